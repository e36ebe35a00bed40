#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ssp/cli.hpp"
#include "ssp/config.hpp"
#include "ssp/error.hpp"
#include "ssp/eval.hpp"
#include "ssp/file_backbone.hpp"
#include "ssp/gradcheck.hpp"
#include "ssp/remote_backbone.hpp"
#include "ssp/toy_backbone.hpp"

namespace ssp {

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

/// Flag values; set flags override the config document.
struct Flags {
  std::optional<std::string> config;
  std::optional<std::string> backbone;
  std::optional<std::uint64_t> toy_seed;
  std::optional<std::string> remote;
  std::optional<std::size_t> layer;
  std::optional<std::string> metric;
  std::optional<double> tau_t;
  std::optional<double> tau_h;
  std::optional<double> lr;
  std::optional<int> epochs;
  std::optional<std::size_t> batch;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> mode;
  std::optional<std::string> noise_mode;
  std::optional<std::size_t> prompt_length;
  std::optional<std::string> variant;
  std::optional<std::string> method;
  std::optional<std::string> dataset;
  std::optional<std::string> hidden;
  std::optional<std::string> checkpoint;
  std::optional<std::string> source;
  std::optional<std::string> target;
  std::optional<std::string> out;
  std::optional<std::size_t> train_cap;
  std::vector<std::size_t> layers;
  bool with_reversed = false;
  bool reversed = false;
  bool no_suffix = false;

  // synth
  std::string synth_kind = "planted";
  double gap = 1.0;
  double sigma = 0.05;
  std::size_t n_per_class = 100;
  std::size_t dim = 32;
  std::size_t num_layers = 1;
  std::optional<std::size_t> planted_layer;
  std::size_t n_samples = 200;

  // gradcheck
  std::optional<double> eps;
  std::optional<double> tolerance;
  std::size_t coords = 12;
  std::size_t gc_samples = 8;

  // report / serve
  std::vector<std::string> files;
  std::optional<std::string> listen;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "JSON config file");
  cmd->add_option("--backbone", f.backbone, "toy, file or remote");
  cmd->add_option("--toy-seed", f.toy_seed, "Seed of the toy backbone weights");
  cmd->add_option("--remote", f.remote, "host:port or stdio:<command>");
  cmd->add_option("--layer", f.layer, "Hidden layer (1-based)");
  cmd->add_option("--metric", f.metric, "cosine, euclidean, manhattan or kl");
  cmd->add_option("--tau-t", f.tau_t, "Truthful threshold");
  cmd->add_option("--tau-h", f.tau_h, "Hallucinated threshold");
  cmd->add_option("--lr", f.lr, "Learning rate");
  cmd->add_option("--epochs", f.epochs, "Training epochs");
  cmd->add_option("--batch", f.batch, "Mini-batch size (0 = full batch)");
  cmd->add_option("--seed", f.seed, "Root seed");
  cmd->add_option("--mode", f.mode, "full or encoder_only");
  cmd->add_option("--noise-mode", f.noise_mode, "seeded_text, static_text or random");
  cmd->add_option("--prompt-length", f.prompt_length, "Noise prompt length m");
  cmd->add_option("--dataset", f.dataset, "Dataset JSONL");
  cmd->add_option("--hidden", f.hidden, "Hidden-state file or directory");
  cmd->add_option("--train-cap", f.train_cap, "Maximum number of training samples");
  cmd->add_option("--out", f.out, "Output directory");
  cmd->add_flag("--no-suffix", f.no_suffix, "Omit the evaluation suffix");
  cmd->add_flag("--reversed", f.reversed, "Train with the reversed objective");
}

RunConfig resolve(const Flags& f) {
  RunConfig c = f.config ? load_run_config(*f.config) : RunConfig{};
  ExperimentConfig& e = c.experiment;
  if (f.backbone) c.backbone = parse_backbone_kind(*f.backbone);
  if (f.toy_seed) c.toy_seed = *f.toy_seed;
  if (f.remote) c.remote = *f.remote;
  if (f.layer) c.layer = *f.layer;
  if (f.metric) e.loss.metric = parse_metric(*f.metric);
  if (f.tau_t) e.loss.tau_t = *f.tau_t;
  if (f.tau_h) e.loss.tau_h = *f.tau_h;
  if (f.lr) e.loss.lr = *f.lr;
  if (f.epochs) e.loss.epochs = *f.epochs;
  if (f.batch) e.loss.batch = *f.batch;
  if (f.seed) e.seed = *f.seed;
  if (f.mode) e.loss.mode = parse_train_mode(*f.mode);
  if (f.noise_mode) e.noise_mode = parse_noise_mode(*f.noise_mode);
  if (f.prompt_length) e.prompt_length = *f.prompt_length;
  if (f.variant) c.variant = *f.variant;
  if (f.method) c.method = *f.method;
  if (f.dataset) c.dataset = *f.dataset;
  if (f.hidden) c.hidden = *f.hidden;
  if (f.checkpoint) c.checkpoint = *f.checkpoint;
  if (f.source) c.source = *f.source;
  if (f.target) c.target = *f.target;
  if (f.out) c.out = *f.out;
  if (f.train_cap) c.train_cap = *f.train_cap;
  if (!f.layers.empty()) c.layers = f.layers;
  if (f.with_reversed) c.with_reversed = true;
  if (f.reversed && !e.loss.reversed) e.loss = reversed_objective(e.loss);
  if (f.no_suffix) e.include_suffix = false;
  validate(e.loss);
  check_paths(c);
  return c;
}

std::unique_ptr<Backbone> make_token_backbone(const RunConfig& c) {
  switch (c.backbone) {
    case BackboneKind::toy: {
      ToyConfig tc;
      tc.seed = c.toy_seed;
      return std::make_unique<ToyBackbone>(tc);
    }
    case BackboneKind::remote: {
      if (c.remote.empty()) throw Error(ErrorCode::ConfigError, "remote: required for the remote backbone");
      std::unique_ptr<Transport> t;
      if (c.remote.starts_with("stdio:")) {
        t = std::make_unique<StdioTransport>(c.remote.substr(6));
      } else {
        t = std::make_unique<TcpTransport>(c.remote);
      }
      auto bb = std::make_unique<RemoteBackbone>(std::move(t));
      if (bb->meta().vocab < 256) {
        throw Error(ErrorCode::ConfigError, "remote: byte-level prompts need a vocabulary of at least 256");
      }
      return bb;
    }
    case BackboneKind::file:
      break;
  }
  throw Error(ErrorCode::ConfigError, "backbone: the file backbone has no tokens");
}

/// Owns whatever a source refers to.
struct SourceHandle {
  std::unique_ptr<FileBackbone> files;
  std::unique_ptr<ItemSource> source;
};

struct Workspace {
  std::unique_ptr<Backbone> token_backbone;

  SourceHandle open(const RunConfig& c, const std::optional<fs::path>& path, const char* key) {
    SourceHandle h;
    if (c.backbone == BackboneKind::file) {
      if (!path) throw Error(ErrorCode::ConfigError, std::string(key) + ": required with the file backbone");
      h.files = std::make_unique<FileBackbone>(FileBackbone::load(*path));
      h.source = std::make_unique<RecordSource>(*h.files, path->stem().string(), c.train_cap);
      return h;
    }
    if (!path) throw Error(ErrorCode::ConfigError, std::string(key) + ": required");
    if (!token_backbone) token_backbone = make_token_backbone(c);
    h.source = std::make_unique<SampleSource>(*token_backbone, load_dataset(*path), c.train_cap);
    return h;
  }
};

const std::optional<fs::path>& data_path(const RunConfig& c) {
  return c.backbone == BackboneKind::file ? c.hidden : c.dataset;
}

const char* data_key(const RunConfig& c) { return c.backbone == BackboneKind::file ? "hidden" : "dataset"; }

ExperimentConfig experiment_for(const RunConfig& c, const ItemSource& source) {
  ExperimentConfig e = c.experiment;
  e.layer = c.layer ? *c.layer : std::max<std::size_t>(1, source.num_layers() / 2);
  return e;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream o(path, std::ios::binary);
  if (!o) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  o << text;
  if (!o) throw Error(ErrorCode::IoError, "failed writing " + path.string());
}

void write_report(const fs::path& dir, const EvalReport& r) {
  write_text(dir / "report.json", r.to_json());
  write_text(dir / "roc.csv", roc_csv(r.roc));
}

std::string lambda_text(const std::optional<double>& l) { return l ? format_double(*l) : "none"; }

int cmd_train(const RunConfig& c, std::ostream& out) {
  Workspace ws;
  auto h = ws.open(c, data_path(c), data_key(c));
  const ExperimentConfig e = experiment_for(c, *h.source);
  const Variant v = find_variant(e, c.variant.empty() ? "ssp" : c.variant);
  const auto trained = train_detector(*h.source, e, v);
  fs::create_directories(c.out);
  save_checkpoint(trained.model, c.out / "model.json");
  write_text(c.out / "trace.csv", trained.trace.to_csv());
  out << "variant " << v.name << " layer " << e.layer << " epoch1_loss " << format_double(trained.trace.mean_loss.front())
      << " final_loss " << format_double(trained.trace.mean_loss.back()) << " lambda "
      << lambda_text(trained.model.meta.lambda) << '\n';
  out << "wrote " << (c.out / "model.json").string() << '\n';
  return 0;
}

int cmd_eval(const RunConfig& c, std::ostream& out) {
  Workspace ws;
  auto h = ws.open(c, data_path(c), data_key(c));
  EvalReport report;
  const bool detector = c.method == "ssp";
  if (detector) {
    if (!c.checkpoint) throw Error(ErrorCode::ConfigError, "checkpoint: required to evaluate a trained detector");
    const DetectorModel model = load_checkpoint(*c.checkpoint);
    ExperimentConfig e = c.experiment;
    e.layer = model.meta.layer;
    report = evaluate(model, *h.source, to_json(e));
  } else {
    const ExperimentConfig e = experiment_for(c, *h.source);
    BaselineConfig b;
    b.choice_token = c.choice_token;
    b.suffix_text = e.suffix_text;
    b.prompt_length = e.prompt_length;
    b.noise_mode = e.noise_mode;
    report = run_baseline(c.method, *h.source, e, b);
  }
  write_report(c.out, report);
  out << "method " << report.method << " dataset " << report.dataset << " layer " << report.layer << " auroc "
      << format_double(report.auroc) << '\n';
  return 0;
}

int cmd_ablate(const RunConfig& c, std::ostream& out) {
  Workspace ws;
  auto h = ws.open(c, data_path(c), data_key(c));
  const ExperimentConfig e = experiment_for(c, *h.source);
  std::vector<EvalReport> reports;
  if (c.variant.empty()) {
    reports = ablation_suite(*h.source, e, c.with_reversed);
  } else {
    const Variant v = find_variant(e, c.variant);
    const auto trained = train_detector(*h.source, e, v);
    nlohmann::ordered_json cfg = to_json(e);
    cfg["variant"] = v.name;
    reports.push_back(evaluate(trained.model, *h.source, std::move(cfg)));
  }
  std::string lines;
  std::ostringstream table;
  table << "variant,auroc,lambda\n";
  for (const auto& r : reports) {
    lines += r.to_json();
    table << r.method << ',' << format_double(r.auroc) << ',' << lambda_text(r.lambda) << '\n';
    write_text(c.out / ("roc-" + r.method + ".csv"), roc_csv(r.roc));
  }
  write_text(c.out / "ablation.jsonl", lines);
  write_text(c.out / "ablation.csv", table.str());
  out << table.str();
  return 0;
}

int cmd_sweep(const RunConfig& c, std::ostream& out) {
  Workspace ws;
  auto h = ws.open(c, data_path(c), data_key(c));
  const ExperimentConfig e = experiment_for(c, *h.source);
  std::vector<std::size_t> layers = c.layers;
  if (layers.empty()) {
    if (h.files) {
      layers = h.files->layers();
    } else {
      for (std::size_t l = 1; l <= h.source->num_layers(); ++l) layers.push_back(l);
    }
  }
  const auto reports = layer_sweep(*h.source, e, layers);
  std::string lines;
  std::ostringstream table;
  table << "layer,auroc\n";
  std::size_t best = 0;
  for (std::size_t i = 0; i < reports.size(); ++i) {
    lines += reports[i].to_json();
    table << reports[i].layer << ',' << format_double(reports[i].auroc) << '\n';
    if (reports[i].auroc > reports[best].auroc) best = i;
  }
  write_text(c.out / "sweep.jsonl", lines);
  write_text(c.out / "sweep.csv", table.str());
  out << table.str() << "best_layer " << reports[best].layer << '\n';
  return 0;
}

int cmd_transfer(const RunConfig& c, std::ostream& out) {
  if (!c.source) throw Error(ErrorCode::ConfigError, "source: required for transfer");
  if (!c.target) throw Error(ErrorCode::ConfigError, "target: required for transfer");
  Workspace ws;
  auto src = ws.open(c, c.source, "source");
  auto tgt = ws.open(c, c.target, "target");
  DetectorModel model;
  if (c.checkpoint) {
    model = load_checkpoint(*c.checkpoint);
  } else {
    const ExperimentConfig e = experiment_for(c, *src.source);
    model = train_detector(*src.source, e, find_variant(e, c.variant.empty() ? "ssp" : c.variant)).model;
  }
  const EvalReport r = transfer_eval(model, src.source->name(), *tgt.source);
  write_report(c.out, r);
  out << "source " << src.source->name() << " target " << tgt.source->name() << " auroc " << format_double(r.auroc)
      << '\n';
  return 0;
}

int cmd_synth(const RunConfig& c, const Flags& f, std::ostream& out) {
  if (f.synth_kind == "planted") {
    SyntheticSpec s;
    s.n_per_class = f.n_per_class;
    s.dim = f.dim;
    s.gap = f.gap;
    s.noise = f.sigma;
    s.seed = c.experiment.seed;
    s.layers = f.num_layers;
    s.planted_layer = f.planted_layer;
    for (const auto& file : synth_planted(s)) {
      const fs::path p = c.out / ("hidden-layer" + std::to_string(file.layer) + ".jsonl");
      write_hidden(file, p);
      out << "wrote " << p.string() << '\n';
    }
    return 0;
  }
  if (f.synth_kind == "qa") {
    const fs::path p = c.out / "dataset.jsonl";
    fs::create_directories(c.out);
    save_dataset(synth_qa(f.n_samples, c.experiment.seed), p);
    out << "wrote " << p.string() << '\n';
    return 0;
  }
  throw Error(ErrorCode::ConfigError, "kind: expected planted or qa, got '" + f.synth_kind + "'");
}

int cmd_gradcheck(const RunConfig& c, const Flags& f, std::ostream& out) {
  Workspace ws;
  SourceHandle h;
  if (data_path(c)) {
    h = ws.open(c, data_path(c), data_key(c));
  } else {
    if (c.backbone == BackboneKind::file) throw Error(ErrorCode::ConfigError, "hidden: required with the file backbone");
    ws.token_backbone = make_token_backbone(c);
    h.source = std::make_unique<SampleSource>(*ws.token_backbone, synth_qa(2 * f.gc_samples, c.experiment.seed),
                                              f.gc_samples);
  }
  const ExperimentConfig e = experiment_for(c, *h.source);
  const Variant v = find_variant(e, c.variant.empty() ? "ssp" : c.variant);
  const DetectorModel model = init_model(*h.source, e, v);
  LossConfig loss = e.loss;
  if (v.reversed && !loss.reversed) loss = reversed_objective(loss);
  loss.mode = v.mode;
  const auto items = h.source->items(Split::train, model);

  GradCheckOptions o;
  o.seed = c.experiment.seed;
  o.generator_coords = f.coords;
  const bool full = generator_trainable(model, loss.mode);
  o.tolerance = f.tolerance ? *f.tolerance : (full ? 1e-4 : 1e-6);
  if (f.eps) o.eps = *f.eps;
  const GradCheckReport r = gradient_check(items, h.source->backbone(), model, loss, o);
  out << "mode " << to_string(loss.mode) << " items " << items.size() << " eps " << format_double(o.eps)
      << " tolerance " << format_double(o.tolerance) << '\n'
      << r.table() << "max_rel_error " << format_double(r.max_rel_error) << ' ' << (r.pass ? "PASS" : "FAIL") << '\n';
  return r.pass ? 0 : 3;
}

int cmd_report(const Flags& f, std::ostream& out) {
  if (f.files.empty()) throw Error(ErrorCode::ConfigError, "report: no report files given");
  out << "method,dataset,layer,auroc,lambda,n_truth,n_hallu\n";
  for (const auto& name : f.files) {
    std::ifstream in(name);
    if (!in) throw Error(ErrorCode::ConfigError, "report: cannot open " + name);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw Error(ErrorCode::SchemaError, name + ":" + std::to_string(lineno) + ": " + e.what());
      }
      if (j.value("format", "") != "ssp-report") {
        throw Error(ErrorCode::SchemaError, name + ":" + std::to_string(lineno) + ": not an ssp-report");
      }
      if (j.value("version", 0) != 1) {
        throw Error(ErrorCode::UnknownVersion, name + ":" + std::to_string(lineno) + ": unsupported report version");
      }
      try {
        out << j.at("method").get<std::string>() << ',' << j.at("dataset").get<std::string>() << ','
            << j.at("layer").get<std::size_t>() << ',' << format_double(j.at("auroc").get<double>()) << ','
            << (j.at("lambda").is_null() ? std::string("none") : format_double(j.at("lambda").get<double>())) << ','
            << j.at("n_truth").get<std::size_t>() << ',' << j.at("n_hallu").get<std::size_t>() << '\n';
      } catch (const json::exception& e) {
        throw Error(ErrorCode::SchemaError, name + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }
  return 0;
}

int cmd_serve(const RunConfig& c, const Flags& f, std::ostream& out, std::ostream& err) {
  const auto bb = make_token_backbone(c);
  if (!f.listen) {
    serve_stream(*bb, std::cin, out);
    return 0;
  }
  const auto colon = f.listen->rfind(':');
  if (colon == std::string::npos) throw Error(ErrorCode::ConfigError, "listen: expected host:port");
  int port = 0;
  try {
    port = std::stoi(f.listen->substr(colon + 1));
  } catch (const std::exception&) {
    throw Error(ErrorCode::ConfigError, "listen: invalid port in '" + *f.listen + "'");
  }
  serve_tcp(*bb, f.listen->substr(0, colon), port, 0, [&](int p) { err << "listening on port " << p << std::endl; });
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sample-specific prompting hallucination detector"};
  app.require_subcommand(1);
  Flags f;

  auto* train = app.add_subcommand("train", "Train a detector and write a checkpoint and trace");
  add_common(train, f);
  train->add_option("--variant", f.variant, "Detector variant (default ssp)");

  auto* eval = app.add_subcommand("eval", "Score the test split and write a report");
  add_common(eval, f);
  eval->add_option("--checkpoint", f.checkpoint, "Trained detector");
  eval->add_option("--method", f.method, "ssp, perplexity, self_eval, delta_p or linear_probe");

  auto* ablate = app.add_subcommand("ablate", "Train and evaluate the ablation variants");
  add_common(ablate, f);
  ablate->add_option("--variant", f.variant, "Run only this variant");
  ablate->add_flag("--with-reversed", f.with_reversed, "Add the reversed-objective row");

  auto* sweep = app.add_subcommand("sweep", "Train and evaluate one detector per layer");
  add_common(sweep, f);
  sweep->add_option("--layers", f.layers, "Layers to sweep (default all)")->delimiter(',');

  auto* transfer = app.add_subcommand("transfer", "Apply a detector trained on one dataset to another");
  add_common(transfer, f);
  transfer->add_option("--source", f.source, "Source data");
  transfer->add_option("--target", f.target, "Target data");
  transfer->add_option("--checkpoint", f.checkpoint, "Detector trained on the source (trained here if absent)");
  transfer->add_option("--variant", f.variant, "Variant when training here");

  auto* synth = app.add_subcommand("synth", "Write synthetic hidden states or question/answer data");
  add_common(synth, f);
  synth->add_option("--kind", f.synth_kind, "planted or qa");
  synth->add_option("--gap", f.gap, "Planted gap in [0, 1]");
  synth->add_option("--sigma", f.sigma, "Planted jitter scale");
  synth->add_option("--n-per-class", f.n_per_class, "Samples per label and split");
  synth->add_option("--dim", f.dim, "Hidden width");
  synth->add_option("--num-layers", f.num_layers, "Number of layer files");
  synth->add_option("--planted-layer", f.planted_layer, "Only this layer carries the gap");
  synth->add_option("--n", f.n_samples, "Question/answer samples");

  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  add_common(gradcheck, f);
  gradcheck->add_option("--variant", f.variant, "Detector variant (default ssp)");
  gradcheck->add_option("--eps", f.eps, "Finite-difference step");
  gradcheck->add_option("--tolerance", f.tolerance, "Maximum relative error");
  gradcheck->add_option("--coords", f.coords, "Sampled coordinates per generator group");
  gradcheck->add_option("--samples", f.gc_samples, "Training samples when no dataset is given");

  auto* report = app.add_subcommand("report", "Summarize report files");
  report->add_option("files", f.files, "Report JSON or JSONL files")->required();

  auto* serve = app.add_subcommand("serve", "Serve a backbone over the line protocol");
  add_common(serve, f);
  serve->add_option("--listen", f.listen, "host:port (default stdio)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (report->parsed()) return cmd_report(f, out);
    const RunConfig c = resolve(f);
    if (train->parsed()) return cmd_train(c, out);
    if (eval->parsed()) return cmd_eval(c, out);
    if (ablate->parsed()) return cmd_ablate(c, out);
    if (sweep->parsed()) return cmd_sweep(c, out);
    if (transfer->parsed()) return cmd_transfer(c, out);
    if (synth->parsed()) return cmd_synth(c, f, out);
    if (gradcheck->parsed()) return cmd_gradcheck(c, f, out);
    if (serve->parsed()) return cmd_serve(c, f, out, err);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return is_validation_error(e.code()) ? 2 : 3;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  }
  return 2;
}

}  // namespace ssp
