#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssp/cli.hpp"
#include "ssp/data.hpp"
#include "ssp/error.hpp"
#include "ssp/eval.hpp"
#include "ssp/file_backbone.hpp"
#include "ssp/gradcheck.hpp"
#include "ssp/model.hpp"
#include "ssp/numerics.hpp"
#include "ssp/objective.hpp"
#include "ssp/rng.hpp"
#include "ssp/toy_backbone.hpp"

using namespace ssp;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

/// Runs one criterion and prints a single PASS or FAIL line with its wall time.
void criterion(const std::string& name, double limit_seconds, const std::function<Outcome()>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const bool in_time = secs < limit_seconds;
  const bool pass = o.pass && in_time;
  if (!pass) ++failures;
  std::printf("%s %s: %s; %.2fs (limit %.0fs)%s\n", pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), secs,
              limit_seconds, in_time ? "" : " over time limit");
  std::fflush(stdout);
}

std::string fmt(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", x);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "ssp");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out;
  std::ostringstream err;
  return run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
}

double brute_force_auroc(const std::vector<double>& s, const std::vector<int>& y) {
  double good = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1 || y[j] != 0) continue;
      pairs += 1.0;
      if (s[i] > s[j]) good += 1.0;
      if (s[i] == s[j]) good += 0.5;
    }
  }
  return good / pairs;
}

/// Held-out AUROC of a detector trained on planted states at the defaults.
double planted_auroc(std::uint64_t seed, double gap, bool reversed) {
  SyntheticSpec spec;
  spec.seed = seed;
  spec.gap = gap;
  const FileBackbone fb(synth_planted(spec));
  const RecordSource source(fb, "planted");
  ExperimentConfig cfg;
  cfg.layer = 1;
  cfg.seed = seed;
  cfg.loss.mode = TrainMode::encoder_only;
  Variant v = find_variant(cfg, reversed ? "reversed" : "ssp");
  v.mode = TrainMode::encoder_only;
  const auto run = train_detector(source, cfg, v);
  return evaluate(run.model, source, to_json(cfg)).auroc;
}

Outcome gradient_fidelity() {
  const ToyBackbone toy(ToyConfig{});
  const SampleSource source(toy, synth_qa(16, 1), 8);
  ExperimentConfig cfg;
  cfg.layer = 2;
  cfg.prompt_length = 8;
  // thresholds that keep every sample on a sloped side of the hinge
  cfg.loss.tau_t = 0.01;
  cfg.loss.tau_h = 0.99;
  std::string detail;
  bool pass = true;
  for (const TrainMode mode : {TrainMode::encoder_only, TrainMode::full}) {
    cfg.loss.mode = mode;
    const Variant v = default_variant(cfg);
    const auto model = init_model(source, cfg, v);
    const auto items = source.items(Split::train, model);
    GradCheckOptions opt;
    opt.tolerance = mode == TrainMode::full ? 1e-4 : 1e-6;
    const auto r = gradient_check(items, &toy, model, cfg.loss, opt);
    pass = pass && r.pass && items.size() == 8;
    detail += std::string(detail.empty() ? "" : ", ") + std::string(to_string(mode)) + " max rel err " +
              fmt(r.max_rel_error) + " (tol " + fmt(opt.tolerance) + ")";
  }
  return {pass, detail};
}

Outcome metric_properties() {
  Rng rng(11);
  double worst_self = 0.0;
  double worst_opposite = 0.0;
  double worst_scale = 0.0;
  double min_kl = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 1 + rng.below(64);
    Vec z(d);
    Vec w(d);
    for (std::size_t i = 0; i < d; ++i) {
      z[i] = rng.normal();
      w[i] = rng.normal();
    }
    Vec neg(d);
    Vec scaled(d);
    const double a = std::exp(4.0 * rng.uniform() - 2.0);
    for (std::size_t i = 0; i < d; ++i) {
      neg[i] = -z[i];
      scaled[i] = a * w[i];
    }
    worst_self = std::max(worst_self, std::abs(dist(z, z, Metric::cosine)));
    worst_opposite = std::max(worst_opposite, std::abs(dist(z, neg, Metric::cosine) - 2.0));
    worst_scale = std::max(worst_scale, std::abs(dist(z, scaled, Metric::cosine) - dist(z, w, Metric::cosine)));
    min_kl = std::min(min_kl, dist(z, w, Metric::kl));
  }
  const bool pass = worst_self <= 1e-12 && worst_opposite <= 1e-12 && worst_scale <= 1e-9 && min_kl >= 0.0;
  return {pass, "|Disc(z,z)| " + fmt(worst_self) + ", |Disc(z,-z)-2| " + fmt(worst_opposite) + ", scale drift " +
                    fmt(worst_scale) + ", min KL " + fmt(min_kl)};
}

Outcome auroc_oracle() {
  Rng rng(5);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(199);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      // coarse grid so ties are common
      s[i] = std::round(rng.normal() * 4.0) / 4.0;
      y[i] = rng.uniform() < 0.5 ? 1 : 0;
    }
    y[0] = 1;
    y[1] = 0;
    worst = std::max(worst, std::abs(auroc(s, y) - brute_force_auroc(s, y)));
  }
  return {worst <= 1e-12, "max deviation " + fmt(worst) + " over 50 instances"};
}

Outcome planted_separability() {
  std::string detail;
  bool pass = true;
  for (std::uint64_t seed : {0, 1, 2}) {
    const double a = planted_auroc(seed, 1.0, false);
    pass = pass && a >= 0.90;
    detail += "seed " + std::to_string(seed) + " " + fmt(a) + ", ";
  }
  detail += "gap 0 control";
  for (std::uint64_t seed : {0, 1, 2}) {
    const double control = planted_auroc(seed, 0.0, false);
    pass = pass && control >= 0.43 && control <= 0.57;
    detail += " " + fmt(control);
  }
  return {pass, detail};
}

Outcome loss_descent() {
  std::string detail;
  bool pass = true;
  for (std::uint64_t seed : {0, 1, 2}) {
    SyntheticSpec spec;
    spec.seed = seed;
    const FileBackbone fb(synth_planted(spec));
    const RecordSource source(fb, "planted");
    ExperimentConfig cfg;
    cfg.layer = 1;
    cfg.seed = seed;
    cfg.loss.mode = TrainMode::encoder_only;
    const auto run = train_detector(source, cfg, default_variant(cfg));
    const auto& l = run.trace.mean_loss;
    pass = pass && l.size() == 40 && l.back() <= 0.5 * l.front();
    detail += std::string(seed ? ", " : "") + "seed " + std::to_string(seed) + " " + fmt(l.front()) + " -> " +
              fmt(l.back());
  }
  return {pass, detail};
}

Outcome reversed_objective_drop() {
  std::string detail;
  bool pass = true;
  for (std::uint64_t seed : {0, 1, 2}) {
    const double normal = planted_auroc(seed, 1.0, false);
    const double rev = planted_auroc(seed, 1.0, true);
    pass = pass && normal >= 0.90 && rev <= 0.55;
    detail += std::string(seed ? ", " : "") + "seed " + std::to_string(seed) + " original " + fmt(normal) +
              " reversed " + fmt(rev);
  }
  return {pass, detail};
}

Outcome layer_sweep_oracle() {
  std::string detail;
  bool pass = true;
  for (std::uint64_t seed : {0, 1, 2}) {
    SyntheticSpec spec;
    spec.seed = seed;
    spec.layers = 4;
    spec.planted_layer = 2;
    const FileBackbone fb(synth_planted(spec));
    const RecordSource source(fb, "planted");
    ExperimentConfig cfg;
    cfg.seed = seed;
    cfg.loss.mode = TrainMode::encoder_only;
    const std::vector<std::size_t> layers{1, 2, 3, 4};
    const auto reports = layer_sweep(source, cfg, layers);
    const auto best = std::max_element(reports.begin(), reports.end(),
                                       [](const EvalReport& a, const EvalReport& b) { return a.auroc < b.auroc; });
    pass = pass && best->layer == 2;
    detail += std::string(seed ? ", " : "") + "seed " + std::to_string(seed) + " best layer " +
              std::to_string(best->layer) + " (" + fmt(best->auroc) + ")";
  }
  return {pass, detail};
}

Outcome ablation_harness() {
  const fs::path dir = fs::temp_directory_path() / "ssp-acceptance-ablate";
  fs::remove_all(dir);
  if (cli({"synth", "--kind", "qa", "--n", "12", "--out", (dir / "qa").string()}) != 0) return {false, "synth failed"};
  if (cli({"ablate", "--backbone", "toy", "--dataset", (dir / "qa/dataset.jsonl").string(), "--epochs", "1",
           "--prompt-length", "4", "--layer", "1", "--with-reversed", "--out", (dir / "ab").string()}) != 0) {
    return {false, "ablate failed"};
  }
  std::istringstream rows(slurp(dir / "ab/ablation.csv"));
  std::string line;
  std::getline(rows, line);
  std::vector<std::string> names;
  while (std::getline(rows, line)) names.push_back(line.substr(0, line.find(',')));
  const std::vector<std::string> expected{"static_prompt", "prompt_tuning", "ssp_wo_encoder", "ssp_wo_seedprompt",
                                          "ssp",           "reversed"};
  fs::remove_all(dir);

  const ToyBackbone toy(ToyConfig{.dim = 16, .layers = 2, .heads = 2});
  const SampleSource qa(toy, synth_qa(8, 5), 4);
  ExperimentConfig cfg;
  cfg.layer = 1;
  cfg.prompt_length = 4;
  auto m = init_model(qa, cfg, find_variant(cfg, "ssp_wo_encoder"));
  const auto items = qa.items(Split::test, m);
  const auto before = score_items(items, m, "x");
  for (auto& layer : m.encoder.layers) {
    for (double& w : layer.weight.values) w += 0.5;
    for (double& b : layer.bias) b -= 0.25;
  }
  const auto after = score_items(items, m, "x");
  bool invariant = !items.empty();
  for (std::size_t i = 0; i < items.size(); ++i) invariant = invariant && after.entries[i].score == before.entries[i].score;
  return {names == expected && invariant, std::to_string(names.size()) + " rows in the expected order: " +
                                              (names == expected ? "yes" : "no") +
                                              ", ssp_wo_encoder scores bitwise invariant: " +
                                              (invariant ? "yes" : "no")};
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / "ssp-acceptance-determinism";
  fs::remove_all(dir);
  if (cli({"synth", "--kind", "planted", "--n-per-class", "40", "--out", (dir / "h").string()}) != 0) {
    return {false, "synth failed"};
  }
  for (const char* run : {"a", "b"}) {
    const std::string out = (dir / run).string();
    if (cli({"train", "--backbone", "file", "--hidden", (dir / "h").string(), "--layer", "1", "--mode",
             "encoder_only", "--seed", "7", "--out", out}) != 0 ||
        cli({"eval", "--backbone", "file", "--hidden", (dir / "h").string(), "--checkpoint", out + "/model.json",
             "--out", out}) != 0) {
      return {false, "train or eval failed"};
    }
  }
  auto report = [&](const char* run) {
    auto j = nlohmann::ordered_json::parse(slurp(dir / run / "report.json"));
    j.erase("timestamp");
    return j.dump();
  };
  const bool ckpt = slurp(dir / "a/model.json") == slurp(dir / "b/model.json");
  const bool rep = report("a") == report("b");
  const bool roc = slurp(dir / "a/roc.csv") == slurp(dir / "b/roc.csv");
  fs::remove_all(dir);
  return {ckpt && rep && roc, std::string("checkpoint identical: ") + (ckpt ? "yes" : "no") +
                                  ", report identical: " + (rep ? "yes" : "no") + ", roc identical: " +
                                  (roc ? "yes" : "no")};
}

Outcome format_round_trips() {
  const std::string data_dir = SSP_TEST_DATA_DIR;
  bool pass = true;
  std::string detail;
  auto note = [&](const std::string& what, bool ok) {
    pass = pass && ok;
    detail += std::string(detail.empty() ? "" : ", ") + what + (ok ? " ok" : " differs");
  };

  const LabeledDataset qa = synth_qa(10, 3);
  const std::string d1 = dataset_to_jsonl(qa);
  note("dataset", dataset_to_jsonl(parse_dataset(d1, "x")) == d1);
  const LabeledDataset fixture = load_dataset(data_dir + "/fixtures/extractor_dataset.jsonl");
  const std::string f1 = dataset_to_jsonl(fixture);
  note("extractor dataset", dataset_to_jsonl(parse_dataset(f1, "x")) == f1);

  SyntheticSpec spec;
  spec.n_per_class = 10;
  spec.dim = 8;
  const std::string h1 = hidden_to_jsonl(synth_planted(spec).front());
  const std::string h2 = hidden_to_jsonl(parse_hidden(h1));
  note("hidden", hidden_to_jsonl(parse_hidden(h2)) == h2 && h2 == h1);
  const std::string e1 = hidden_to_jsonl(read_hidden(data_dir + "/fixtures/extractor_hidden_layer6.jsonl"));
  note("extractor hidden", hidden_to_jsonl(parse_hidden(e1)) == e1);

  const ToyBackbone toy(ToyConfig{.dim = 16, .layers = 2, .heads = 2});
  const SampleSource source(toy, synth_qa(8, 2), 4);
  ExperimentConfig cfg;
  cfg.layer = 1;
  cfg.prompt_length = 4;
  for (const char* v : {"ssp", "prompt_tuning", "ssp_wo_encoder"}) {
    const std::string c1 = checkpoint_to_json(init_model(source, cfg, find_variant(cfg, v)));
    note(std::string("checkpoint ") + v, checkpoint_to_json(checkpoint_from_json(c1)) == c1);
  }
  return {pass, detail};
}

}  // namespace

int main() {
  criterion("gradient fidelity", 60, gradient_fidelity);
  criterion("metric properties", 5, metric_properties);
  criterion("auroc oracle", 10, auroc_oracle);
  criterion("planted separability", 120, planted_separability);
  criterion("loss descent", 120, loss_descent);
  criterion("reversed objective", 120, reversed_objective_drop);
  criterion("layer sweep oracle", 120, layer_sweep_oracle);
  criterion("ablation harness", 120, ablation_harness);
  criterion("determinism", 120, determinism);
  criterion("format round-trips", 30, format_round_trips);
  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
