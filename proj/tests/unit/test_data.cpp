#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "ssp/data.hpp"
#include "ssp/error.hpp"

using namespace ssp;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an ssp::Error");
  return ErrorCode::ProtocolError;
}

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

std::filesystem::path fixture(const std::string& name) { return std::filesystem::path(SSP_TEST_DATA_DIR) / "fixtures" / name; }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / name) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

double mean_pair_cosine(const HiddenFile& f, int label) {
  double s = 0.0;
  int n = 0;
  for (const auto& r : f.records) {
    if (r.label != label) continue;
    s += cosine(r.h_orig, r.h_pert);
    ++n;
  }
  return s / n;
}

}  // namespace

TEST_CASE("dataset parsing") {
  const auto ds = parse_dataset(
      "{\"id\":\"a\",\"question\":\"Q1\",\"answer\":\"A1\",\"references\":[\"A1\"],\"label\":1}\n"
      "\n"
      "{\"id\":\"b\",\"question\":\"Q2\",\"answer\":\"A2\",\"context\":\"C\",\"noise_text\":\"N\",\"split\":\"test\"}\n",
      "tiny");
  REQUIRE(ds.samples.size() == 2);
  CHECK(ds.name == "tiny");
  CHECK(ds.samples[0].label == 1);
  CHECK(ds.samples[0].references == std::vector<std::string>{"A1"});
  CHECK(ds.samples[1].context == "C");
  CHECK(!ds.samples[1].label);
  CHECK(ds.samples[1].split == "test");
}

TEST_CASE("dataset errors carry the line number") {
  CHECK(code_of([] { parse_dataset("", "x"); }) == ErrorCode::EmptyDataset);
  CHECK(code_of([] { parse_dataset("\n  \n", "x"); }) == ErrorCode::EmptyDataset);
  const std::string good = "{\"id\":\"a\",\"question\":\"q\",\"answer\":\"a\"}\n";
  CHECK(code_of([&] { parse_dataset(good + good, "x"); }) == ErrorCode::DuplicateId);
  CHECK(message_of([&] { parse_dataset(good + "{\"id\":\"b\",\"question\":\"q\"}\n", "x"); }).find("line 2") !=
        std::string::npos);
  CHECK(code_of([&] { parse_dataset(good + "not json\n", "x"); }) == ErrorCode::SchemaError);
  CHECK(code_of([] { parse_dataset("{\"id\":\"a\",\"question\":\"\",\"answer\":\"a\"}", "x"); }) == ErrorCode::SchemaError);
  CHECK(code_of([] { parse_dataset("{\"id\":\"a\",\"question\":\"q\",\"answer\":\"a\",\"label\":2}", "x"); }) ==
        ErrorCode::SchemaError);
  CHECK(code_of([] { parse_dataset("{\"id\":\"a\",\"question\":\"q\",\"answer\":\"a\",\"split\":\"dev\"}", "x"); }) ==
        ErrorCode::SchemaError);
  CHECK(code_of([] { parse_dataset("[1,2]", "x"); }) == ErrorCode::SchemaError);
  CHECK(code_of([] { load_dataset("/nonexistent/ssp.jsonl"); }) == ErrorCode::IoError);
}

TEST_CASE("dataset round-trip") {
  TempDir dir("ssp-test-dataset");
  const auto ds = synth_qa(9, 4);
  save_dataset(ds, dir.path / "synth-qa.jsonl");
  const auto back = load_dataset(dir.path / "synth-qa.jsonl");
  CHECK(back == ds);
  CHECK(dataset_to_jsonl(back) == dataset_to_jsonl(ds));
}

TEST_CASE("split selection") {
  auto ds = synth_qa(250, 1);
  for (auto& s : ds.samples) s.split.reset();
  CHECK(select_split(ds.samples, Split::train).size() == 100);
  CHECK(select_split(ds.samples, Split::test).size() == 150);
  CHECK(select_split(ds.samples, Split::train, 10).front().id == ds.samples.front().id);
  CHECK(select_split(ds.samples, Split::test, 10).front().id == ds.samples[10].id);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) ds.samples[i].split = i % 5 == 0 ? "test" : "train";
  CHECK(select_split(ds.samples, Split::test).size() == 50);
  CHECK(select_split(ds.samples, Split::train).size() == 100);
  CHECK(select_split(ds.samples, Split::train, 500).size() == 200);
}

TEST_CASE("prompt templates") {
  QASample s;
  s.id = "x";
  s.question = "Who wrote Hamlet?";
  s.answer = "Shakespeare";
  CHECK(build_prompt(s, false) == "Answer the question concisely. Q: Who wrote Hamlet? A:");
  CHECK(build_prompt(s, false) == build_prompt(s, false));
  CHECK(code_of([&] { build_prompt(s, true); }) == ErrorCode::MissingContext);
  s.context = "Hamlet is a tragedy.";
  CHECK(build_prompt(s, true) ==
        "Answer these questions concisely based on the context: \n Context: Hamlet is a tragedy. Q: Who wrote Hamlet? A:");
}

TEST_CASE("rouge-l") {
  CHECK(rouge_l_f1("the cat sat", "the cat") == doctest::Approx(0.8));
  CHECK(rouge_l_f1("Paris is the capital", "Paris is the capital") == 1.0);
  CHECK(rouge_l_f1("alpha beta", "gamma delta") == 0.0);
  CHECK(rouge_l_f1("The Cat, sat!", "the cat sat") == 1.0);
  CHECK(rouge_tokens("Hello,\tWorld!\xe2\x80\x83ok") == std::vector<std::string>{"hello", "world", "ok"});
  CHECK(code_of([] { rouge_l_f1("", "x"); }) == ErrorCode::EmptyText);
  CHECK(code_of([] { rouge_l_f1("x", "..."); }) == ErrorCode::EmptyText);
  // LCS respects order
  CHECK(rouge_l_f1("c b a", "a b c") == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("labeling by similarity") {
  CHECK(label_by_similarity("Mars", {"Venus", "Mars"}) == 1);
  // F1 exactly 0.5: one shared token of two in both texts
  CHECK(rouge_l_f1("a b", "a c") == 0.5);
  CHECK(label_by_similarity("a b", {"a c"}) == 0);
  CHECK(label_by_similarity("a b", {"a c"}, 0.49) == 1);
  CHECK(label_by_similarity("the red planet", {"mars", "red planet"}) ==
        label_by_similarity("the red planet", {"red planet", "mars"}));
  CHECK(code_of([] { label_by_similarity("x", {}); }) == ErrorCode::EmptyText);
}

TEST_CASE("planted generator hits the target cosines without noise") {
  SyntheticSpec spec;
  spec.noise = 0.0;
  spec.n_per_class = 10;
  const auto files = synth_planted(spec);
  REQUIRE(files.size() == 1);
  for (const auto& r : files[0].records) {
    CHECK(cosine(r.h_orig, r.h_pert) == doctest::Approx(r.label == 1 ? 0.2 : 0.9).epsilon(1e-12));
  }
  CHECK(files[0].records.size() == 40);
  CHECK(select_split(files[0].records, Split::train).size() == 20);
}

TEST_CASE("planted gap is visible in mean pair cosines") {
  for (std::uint64_t seed : {0, 1, 2}) {
    for (double gap : {0.25, 0.5, 1.0}) {
      SyntheticSpec spec;
      spec.seed = seed;
      spec.gap = gap;
      const auto f = synth_planted(spec).front();
      CHECK(mean_pair_cosine(f, 0) - mean_pair_cosine(f, 1) >= 0.5 * gap);
    }
  }
}

TEST_CASE("planted generator without a gap draws both classes the same way") {
  SyntheticSpec spec;
  spec.gap = 0.0;
  spec.noise = 0.0;
  spec.n_per_class = 5;
  const auto files = synth_planted(spec);
  for (const auto& r : files.front().records) {
    CHECK(cosine(r.h_orig, r.h_pert) == doctest::Approx(0.9).epsilon(1e-12));
  }
}

TEST_CASE("planted layers") {
  SyntheticSpec spec;
  spec.layers = 3;
  spec.planted_layer = 2;
  spec.noise = 0.0;
  spec.n_per_class = 4;
  const auto files = synth_planted(spec);
  REQUIRE(files.size() == 3);
  CHECK(mean_pair_cosine(files[1], 1) == doctest::Approx(0.2));
  CHECK(mean_pair_cosine(files[0], 1) == doctest::Approx(0.9));
  CHECK(mean_pair_cosine(files[2], 1) == doctest::Approx(0.9));
  spec.planted_layer = 4;
  CHECK(code_of([&] { synth_planted(spec); }) == ErrorCode::LayerOutOfRange);
  SyntheticSpec bad;
  bad.dim = 1;
  CHECK(code_of([&] { synth_planted(bad); }) == ErrorCode::ConfigError);
}

TEST_CASE("planted files are reproducible byte for byte") {
  SyntheticSpec spec;
  spec.seed = 17;
  CHECK(hidden_to_jsonl(synth_planted(spec).front()) == hidden_to_jsonl(synth_planted(spec).front()));
  spec.seed = 18;
  const auto other = hidden_to_jsonl(synth_planted(spec).front());
  spec.seed = 17;
  CHECK(other != hidden_to_jsonl(synth_planted(spec).front()));
}

TEST_CASE("hidden file round-trip") {
  TempDir dir("ssp-test-hidden");
  SyntheticSpec spec;
  spec.n_per_class = 6;
  spec.dim = 5;
  const auto file = synth_planted(spec).front();
  write_hidden(file, dir.path / "a.jsonl");
  const auto back = read_hidden(dir.path / "a.jsonl");
  CHECK(back.dim == 5);
  CHECK(back.layer == 1);
  REQUIRE(back.records.size() == file.records.size());
  for (std::size_t i = 0; i < file.records.size(); ++i) {
    CHECK(back.records[i].id == file.records[i].id);
    CHECK(back.records[i].split == file.records[i].split);
    for (std::size_t k = 0; k < 5; ++k) {
      CHECK(back.records[i].h_orig[k] == static_cast<double>(static_cast<float>(file.records[i].h_orig[k])));
    }
  }
  // once at file precision, a second trip is exact
  write_hidden(back, dir.path / "b.jsonl");
  CHECK(slurp(dir.path / "a.jsonl") == slurp(dir.path / "b.jsonl"));
}

TEST_CASE("hidden files are written in id order") {
  HiddenFile f{"m", 1, 2, {}};
  f.records.push_back({"b", 0, 1, {1.0, 2.0}, {1.0, 2.0}, std::nullopt});
  f.records.push_back({"a", 1, 1, {3.0, 4.0}, {3.0, 4.5}, std::nullopt});
  const auto back = parse_hidden(hidden_to_jsonl(f));
  CHECK(back.records[0].id == "a");
  CHECK(back.records[1].id == "b");
}

TEST_CASE("hidden file errors") {
  const std::string header = "{\"format\":\"ssp-hidden\",\"version\":1,\"model\":\"m\",\"layer\":2,\"dim\":2}\n";
  const std::string rec = "{\"id\":\"a\",\"label\":1,\"h_orig\":[1,2],\"h_pert\":[1,2]}\n";
  CHECK_NOTHROW(parse_hidden(header + rec));
  const std::string short_rec = "{\"id\":\"b\",\"label\":1,\"h_orig\":[1,2],\"h_pert\":[1]}\n";
  CHECK(code_of([&] { parse_hidden(header + rec + short_rec); }) == ErrorCode::DimMismatch);
  CHECK(message_of([&] { parse_hidden(header + rec + short_rec); }).find("line 3") != std::string::npos);
  CHECK(code_of([&] { parse_hidden(header + rec + rec); }) == ErrorCode::DuplicateId);
  CHECK(code_of([&] { parse_hidden(rec); }) == ErrorCode::SchemaError);
  CHECK(code_of([] { parse_hidden(""); }) == ErrorCode::EmptyDataset);
  CHECK(code_of([&] {
          parse_hidden("{\"format\":\"ssp-hidden\",\"version\":2,\"model\":\"m\",\"layer\":2,\"dim\":2}\n");
        }) == ErrorCode::UnknownVersion);
  CHECK(code_of([&] { parse_hidden(header + "{\"id\":\"a\",\"h_orig\":[1,2],\"h_pert\":[1,2]}\n"); }) ==
        ErrorCode::SchemaError);
  // NaN and infinities are not JSON, and out-of-range decimals overflow single precision
  CHECK(code_of([&] { parse_hidden(header + "{\"id\":\"a\",\"label\":1,\"h_orig\":[NaN,2],\"h_pert\":[1,2]}\n"); }) ==
        ErrorCode::SchemaError);
  CHECK(code_of([&] { parse_hidden(header + "{\"id\":\"a\",\"label\":1,\"h_orig\":[1e39,2],\"h_pert\":[1,2]}\n"); }) ==
        ErrorCode::SchemaError);
  CHECK(code_of([&] { parse_hidden(header + "{\"id\":\"a\",\"label\":1,\"h_orig\":[\"1\",2],\"h_pert\":[1,2]}\n"); }) ==
        ErrorCode::SchemaError);
  HiddenFile f{"m", 1, 3, {}};
  f.records.push_back({"a", 1, 1, {1.0, 2.0}, {1.0, 2.0, 3.0}, std::nullopt});
  CHECK(code_of([&] { hidden_to_jsonl(f); }) == ErrorCode::DimMismatch);
}

TEST_CASE("files from the extractor load unchanged") {
  const auto f = read_hidden(fixture("extractor_hidden_layer6.jsonl"));
  CHECK(f.model == "gpt2");
  CHECK(f.layer == 6);
  CHECK(f.dim == 8);
  REQUIRE(f.records.size() == 6);
  CHECK(select_split(f.records, Split::train).size() == 4);
  // every written decimal is already a single-precision value, so it survives exactly
  std::ifstream in(fixture("extractor_hidden_layer6.jsonl"));
  std::string line;
  std::getline(in, line);
  for (const auto& r : f.records) {
    std::getline(in, line);
    const auto j = nlohmann::json::parse(line);
    CHECK(j["id"] == r.id);
    CHECK(j["h_orig"].get<Vec>() == r.h_orig);
    CHECK(j["h_pert"].get<Vec>() == r.h_pert);
  }

  const auto ds = load_dataset(fixture("extractor_dataset.jsonl"));
  CHECK(ds.name == "extractor_dataset");
  REQUIRE(ds.samples.size() == 3);
  CHECK(ds.samples[1].context);
  CHECK(build_prompt(ds.samples[1], true).starts_with("Answer these questions concisely based on the context:"));
  CHECK(label_by_similarity(ds.samples[0].answer, ds.samples[0].references) == 1);
  CHECK(label_by_similarity(ds.samples[2].answer, ds.samples[2].references) == 0);
}

TEST_CASE("synthetic question answering set") {
  const auto a = synth_qa(20, 3);
  CHECK(a == synth_qa(20, 3));
  CHECK(a.samples.size() == 20);
  int truthful = 0;
  for (const auto& s : a.samples) {
    CHECK(s.label);
    CHECK(s.noise_text);
    CHECK(!s.question.empty());
    truthful += *s.label;
  }
  CHECK(truthful > 0);
  CHECK(truthful < 20);
}
