#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssp/cli.hpp"
#include "ssp/config.hpp"
#include "ssp/error.hpp"

using namespace ssp;
namespace fs = std::filesystem;

namespace {

struct Result {
  int code = 0;
  std::string out;
  std::string err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "ssp");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out;
  std::ostringstream err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string operator/(const std::string& leaf) const { return (path / leaf).string(); }
};

nlohmann::json without_timestamp(const std::string& report) {
  auto j = nlohmann::json::parse(report);
  j.erase("timestamp");
  return j;
}

/// Planted hidden states in dir/planted; returns that directory.
std::string synth_planted_dir(const TempDir& dir, const std::string& gap = "1", const std::string& n = "20") {
  const auto r = run({"synth", "--kind", "planted", "--gap", gap, "--n-per-class", n, "--dim", "8", "--out",
                      dir / "planted"});
  REQUIRE(r.code == 0);
  return dir / "planted";
}

}  // namespace

TEST_CASE("usage errors exit 2 and help exits 0") {
  CHECK(run({}).code == 2);
  CHECK(run({"bogus"}).code == 2);
  CHECK(run({"train", "--epochs", "many"}).code == 2);
  CHECK(run({"--help"}).code == 0);
  CHECK(run({"train", "--help"}).code == 0);
}

TEST_CASE("missing inputs exit 2 and name the key") {
  TempDir dir("ssp-cli-missing");
  const auto r = run({"train", "--backbone", "toy", "--dataset", dir / "nope.jsonl", "--out", dir / "o"});
  CHECK(r.code == 2);
  CHECK(r.err.find("dataset") != std::string::npos);
  const auto h = run({"train", "--backbone", "file", "--hidden", dir / "nope", "--out", dir / "o"});
  CHECK(h.code == 2);
  CHECK(h.err.find("hidden") != std::string::npos);
  const auto e = run({"eval", "--backbone", "file", "--hidden", synth_planted_dir(dir), "--out", dir / "o"});
  CHECK(e.code == 2);
  CHECK(e.err.find("checkpoint") != std::string::npos);
}

TEST_CASE("bad values exit 2") {
  TempDir dir("ssp-cli-values");
  const auto hidden = synth_planted_dir(dir);
  CHECK(run({"train", "--backbone", "file", "--hidden", hidden, "--mode", "encoder_only", "--tau-t", "1.5", "--out",
             dir / "o"})
            .code == 2);
  CHECK(run({"train", "--backbone", "file", "--hidden", hidden, "--mode", "sideways", "--out", dir / "o"}).code == 2);
  CHECK(run({"train", "--backbone", "file", "--hidden", hidden, "--metric", "hamming", "--out", dir / "o"}).code == 2);
  CHECK(run({"train", "--backbone", "file", "--hidden", hidden, "--mode", "encoder_only", "--layer", "7", "--out",
             dir / "o"})
            .code == 2);
  CHECK(run({"train", "--backbone", "quantum", "--out", dir / "o"}).code == 2);
}

TEST_CASE("full training on a file backbone is a capability error") {
  TempDir dir("ssp-cli-capability");
  const auto hidden = synth_planted_dir(dir);
  const auto r = run({"train", "--backbone", "file", "--hidden", hidden, "--out", dir / "o"});
  CHECK(r.code == 2);
  CHECK(r.err.find("CapabilityMissing") != std::string::npos);
  const auto ok = run({"train", "--backbone", "file", "--hidden", hidden, "--mode", "encoder_only", "--epochs", "3",
                       "--out", dir / "o"});
  CHECK(ok.code == 0);
  CHECK(fs::exists(dir / "o/model.json"));
  CHECK(slurp(dir / "o/trace.csv").starts_with("epoch,mean_loss,train_auroc,seconds\n1,"));
}

TEST_CASE("config files and flag overrides") {
  TempDir dir("ssp-cli-config");
  const auto hidden = synth_planted_dir(dir);
  nlohmann::json cfg{{"backbone", "file"}, {"hidden", hidden}, {"mode", "encoder_only"}, {"epochs", 2},
                     {"seed", 5},          {"out", dir / "from-config"}};
  std::ofstream(dir / "cfg.json") << cfg.dump();
  CHECK(run({"train", "--config", dir / "cfg.json"}).code == 0);
  CHECK(fs::exists(dir / "from-config/model.json"));
  CHECK(run({"train", "--config", dir / "cfg.json", "--out", dir / "flag"}).code == 0);
  CHECK(slurp(dir / "flag/model.json") == slurp(dir / "from-config/model.json"));
  CHECK(run({"train", "--config", dir / "cfg.json", "--seed", "6", "--out", dir / "seed6"}).code == 0);
  CHECK(slurp(dir / "seed6/model.json") != slurp(dir / "from-config/model.json"));

  cfg["epochz"] = 3;
  std::ofstream(dir / "bad.json") << cfg.dump();
  const auto r = run({"train", "--config", dir / "bad.json"});
  CHECK(r.code == 2);
  CHECK(r.err.find("epochz") != std::string::npos);
  std::ofstream(dir / "typed.json") << R"({"epochs":"forty"})";
  const auto t = run({"train", "--config", dir / "typed.json"});
  CHECK(t.code == 2);
  CHECK(t.err.find("epochs") != std::string::npos);
  CHECK(run({"train", "--config", dir / "absent.json"}).code == 2);
}

TEST_CASE("run config parsing") {
  const auto c = run_config_from_json(nlohmann::json{{"backbone", "remote"},
                                                     {"remote", "stdio:ssp serve"},
                                                     {"tau_T", 0.2},
                                                     {"metric", "kl"},
                                                     {"layers", {1, 2}},
                                                     {"choice_token", 84}});
  CHECK(c.backbone == BackboneKind::remote);
  CHECK(c.remote == "stdio:ssp serve");
  CHECK(c.experiment.loss.tau_t == 0.2);
  CHECK(c.experiment.loss.metric == Metric::kl);
  CHECK(c.layers == std::vector<std::size_t>{1, 2});
  CHECK(c.choice_token == 84);
  CHECK(!c.layer);
  RunConfig missing;
  missing.source = "/nonexistent/src.jsonl";
  try {
    check_paths(missing);
    FAIL("expected a ConfigError");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ConfigError);
    CHECK(std::string(e.what()).find("source") != std::string::npos);
  }
}

TEST_CASE("train and eval are deterministic") {
  TempDir dir("ssp-cli-determinism");
  const auto hidden = synth_planted_dir(dir);
  for (const char* o : {"a", "b"}) {
    REQUIRE(run({"train", "--backbone", "file", "--hidden", hidden, "--mode", "encoder_only", "--epochs", "5", "--seed",
                 "3", "--out", dir / o})
                .code == 0);
  }
  CHECK(slurp(dir / "a/model.json") == slurp(dir / "b/model.json"));
  for (const char* o : {"a", "b"}) {
    REQUIRE(run({"eval", "--backbone", "file", "--hidden", hidden, "--checkpoint", dir / "a/model.json", "--out",
                 dir / (std::string(o) + "-eval")})
                .code == 0);
  }
  const auto ra = slurp(dir / "a-eval/report.json");
  CHECK(without_timestamp(ra) == without_timestamp(slurp(dir / "b-eval/report.json")));
  CHECK(slurp(dir / "a-eval/roc.csv") == slurp(dir / "b-eval/roc.csv"));
  CHECK(slurp(dir / "a-eval/roc.csv").starts_with("fpr,tpr\n0,0\n"));
  const auto j = nlohmann::json::parse(ra);
  CHECK(j["format"] == "ssp-report");
  CHECK(j["n_truth"] == 20);
  CHECK(j["auroc"].get<double>() > 0.9);
}

TEST_CASE("untrained detector on gap-free data scores at chance") {
  TempDir dir("ssp-cli-null");
  const auto hidden = synth_planted_dir(dir, "0", "100");
  REQUIRE(run({"train", "--backbone", "file", "--hidden", hidden, "--mode", "encoder_only", "--lr", "0", "--epochs",
               "1", "--out", dir / "m"})
              .code == 0);
  REQUIRE(run({"eval", "--backbone", "file", "--hidden", hidden, "--checkpoint", dir / "m/model.json", "--out",
               dir / "e"})
              .code == 0);
  const double a = nlohmann::json::parse(slurp(dir / "e/report.json"))["auroc"].get<double>();
  CHECK(a >= 0.43);
  CHECK(a <= 0.57);
}

TEST_CASE("synth is deterministic") {
  TempDir dir("ssp-cli-synth");
  for (const char* o : {"a", "b"}) {
    REQUIRE(run({"synth", "--kind", "planted", "--seed", "4", "--num-layers", "2", "--out", dir / o}).code == 0);
    REQUIRE(run({"synth", "--kind", "qa", "--n", "10", "--seed", "4", "--out", dir / (std::string(o) + "-qa")}).code == 0);
  }
  CHECK(slurp(dir / "a/hidden-layer2.jsonl") == slurp(dir / "b/hidden-layer2.jsonl"));
  CHECK(!slurp(dir / "a/hidden-layer1.jsonl").empty());
  CHECK(slurp(dir / "a-qa/dataset.jsonl") == slurp(dir / "b-qa/dataset.jsonl"));
}

TEST_CASE("sweep, transfer and report") {
  TempDir dir("ssp-cli-sweep");
  REQUIRE(run({"synth", "--kind", "planted", "--n-per-class", "20", "--dim", "8", "--num-layers", "3",
               "--planted-layer", "2", "--out", dir / "h"})
              .code == 0);
  const auto s = run({"sweep", "--backbone", "file", "--hidden", dir / "h", "--mode", "encoder_only", "--epochs", "5",
                      "--layers", "1,2,3", "--out", dir / "sweep"});
  REQUIRE(s.code == 0);
  CHECK(slurp(dir / "sweep/sweep.csv").starts_with("layer,auroc\n1,"));
  std::istringstream lines(slurp(dir / "sweep/sweep.jsonl"));
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) CHECK(nlohmann::json::parse(line)["layer"] == ++n);
  CHECK(n == 3);
  CHECK(s.out.find("best_layer 2") != std::string::npos);

  REQUIRE(run({"train", "--backbone", "file", "--hidden", dir / "h", "--layer", "2", "--mode", "encoder_only",
               "--epochs", "5", "--out", dir / "m"})
              .code == 0);
  REQUIRE(run({"eval", "--backbone", "file", "--hidden", dir / "h", "--checkpoint", dir / "m/model.json", "--out",
               dir / "in"})
              .code == 0);
  REQUIRE(run({"transfer", "--backbone", "file", "--source", dir / "h", "--target", dir / "h", "--checkpoint",
               dir / "m/model.json", "--out", dir / "tr"})
              .code == 0);
  const auto in = nlohmann::json::parse(slurp(dir / "in/report.json"));
  const auto tr = nlohmann::json::parse(slurp(dir / "tr/report.json"));
  CHECK(in["auroc"] == tr["auroc"]);
  CHECK(in["scores"] == tr["scores"]);
  CHECK(tr["config"]["source"] == "h");
  CHECK(tr["config"]["target"] == "h");

  const auto rep = run({"report", dir / "in/report.json", dir / "tr/report.json"});
  REQUIRE(rep.code == 0);
  CHECK(rep.out.starts_with("method,dataset,layer,auroc,lambda,n_truth,n_hallu\n"));
  CHECK(std::count(rep.out.begin(), rep.out.end(), '\n') == 3);
  CHECK(run({"report", dir / "missing.json"}).code != 0);
}

TEST_CASE("ablate on a token backbone") {
  TempDir dir("ssp-cli-ablate");
  REQUIRE(run({"synth", "--kind", "qa", "--n", "12", "--out", dir / "qa"}).code == 0);
  const auto r = run({"ablate", "--backbone", "toy", "--dataset", dir / "qa/dataset.jsonl", "--epochs", "1",
                      "--prompt-length", "4", "--layer", "1", "--with-reversed", "--out", dir / "ab"});
  REQUIRE(r.code == 0);
  std::istringstream rows(slurp(dir / "ab/ablation.csv"));
  std::string line;
  std::vector<std::string> names;
  std::getline(rows, line);
  CHECK(line == "variant,auroc,lambda");
  while (std::getline(rows, line)) names.push_back(line.substr(0, line.find(',')));
  CHECK(names == std::vector<std::string>{"static_prompt", "prompt_tuning", "ssp_wo_encoder", "ssp_wo_seedprompt",
                                          "ssp", "reversed"});
  CHECK(fs::exists(dir / "ab/roc-ssp_wo_encoder.csv"));
}

TEST_CASE("gradcheck command") {
  TempDir dir("ssp-cli-gradcheck");
  REQUIRE(run({"synth", "--kind", "qa", "--n", "8", "--out", dir / "qa"}).code == 0);
  const auto r = run({"gradcheck", "--backbone", "toy", "--dataset", dir / "qa/dataset.jsonl", "--samples", "4",
                      "--coords", "4", "--layer", "1", "--tau-t", "0.01", "--tau-h", "0.99"});
  CHECK(r.code == 0);
  CHECK(r.out.starts_with("mode full "));
  CHECK(r.out.find("\ngroup,coords,rel_error,analytic_norm,status\n") != std::string::npos);
  CHECK(r.out.find("PASS") != std::string::npos);
  const auto bad = run({"gradcheck", "--backbone", "toy", "--dataset", dir / "qa/dataset.jsonl", "--samples", "4",
                        "--coords", "4", "--layer", "1", "--tau-t", "0.01", "--tau-h", "0.99", "--tolerance", "0"});
  CHECK(bad.code == 3);
  CHECK(bad.out.find("FAIL") != std::string::npos);
}

TEST_CASE("baseline methods through eval") {
  TempDir dir("ssp-cli-baseline");
  REQUIRE(run({"synth", "--kind", "qa", "--n", "12", "--out", dir / "qa"}).code == 0);
  const auto r = run({"eval", "--backbone", "toy", "--dataset", dir / "qa/dataset.jsonl", "--method", "self_eval",
                      "--layer", "1", "--out", dir / "e"});
  CHECK(r.code == 0);
  CHECK(nlohmann::json::parse(slurp(dir / "e/report.json"))["method"] == "self_eval");
  const auto hidden = synth_planted_dir(dir);
  const auto p = run({"eval", "--backbone", "file", "--hidden", hidden, "--method", "perplexity", "--out", dir / "p"});
  CHECK(p.code == 2);
}
