#include "ssp/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "ssp/error.hpp"
#include "ssp/rng.hpp"

namespace ssp {

using nlohmann::json;
using nlohmann::ordered_json;

std::string_view to_string(Split split) { return split == Split::train ? "train" : "test"; }

namespace {

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot write " + path.string());
  out << text;
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find('\n', start);
    if (end == std::string_view::npos) {
      lines.push_back(text.substr(start));
      break;
    }
    lines.push_back(text.substr(start, end - start));
    start = end + 1;
  }
  return lines;
}

bool blank(std::string_view line) {
  return std::all_of(line.begin(), line.end(), [](char c) { return c == ' ' || c == '\t' || c == '\r'; });
}

[[noreturn]] void schema_error(std::size_t line, const std::string& what) {
  throw Error(ErrorCode::SchemaError, "line " + std::to_string(line) + ": " + what);
}

json parse_line(std::string_view line, std::size_t lineno) {
  try {
    return json::parse(line);
  } catch (const json::parse_error& e) {
    schema_error(lineno, e.what());
  }
}

std::string required_string(const json& obj, const char* key, std::size_t lineno, bool non_empty) {
  if (!obj.contains(key) || !obj[key].is_string()) schema_error(lineno, std::string("missing string field '") + key + "'");
  auto s = obj[key].get<std::string>();
  if (non_empty && s.empty()) schema_error(lineno, std::string("empty field '") + key + "'");
  return s;
}

std::optional<std::string> optional_string(const json& obj, const char* key, std::size_t lineno) {
  if (!obj.contains(key) || obj[key].is_null()) return std::nullopt;
  if (!obj[key].is_string()) schema_error(lineno, std::string("field '") + key + "' must be a string");
  return obj[key].get<std::string>();
}

std::optional<int> optional_label(const json& obj, std::size_t lineno) {
  if (!obj.contains("label") || obj["label"].is_null()) return std::nullopt;
  const auto& v = obj["label"];
  if (!v.is_number_integer() || (v.get<long long>() != 0 && v.get<long long>() != 1)) {
    schema_error(lineno, "label must be 0 or 1");
  }
  return static_cast<int>(v.get<long long>());
}

}  // namespace

LabeledDataset parse_dataset(std::string_view text, std::string name) {
  LabeledDataset ds{std::move(name), {}};
  std::set<std::string> seen;
  const auto lines = split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (blank(lines[i])) continue;
    const std::size_t lineno = i + 1;
    const json obj = parse_line(lines[i], lineno);
    if (!obj.is_object()) schema_error(lineno, "expected a JSON object");
    QASample s;
    s.id = required_string(obj, "id", lineno, true);
    s.question = required_string(obj, "question", lineno, true);
    s.answer = required_string(obj, "answer", lineno, true);
    s.context = optional_string(obj, "context", lineno);
    if (obj.contains("references")) {
      if (!obj["references"].is_array()) schema_error(lineno, "references must be an array");
      for (const auto& r : obj["references"]) {
        if (!r.is_string()) schema_error(lineno, "references must hold strings");
        s.references.push_back(r.get<std::string>());
      }
    }
    s.label = optional_label(obj, lineno);
    s.noise_text = optional_string(obj, "noise_text", lineno);
    s.split = optional_string(obj, "split", lineno);
    if (s.split && *s.split != "train" && *s.split != "test") schema_error(lineno, "split must be train or test");
    if (!seen.insert(s.id).second) {
      throw Error(ErrorCode::DuplicateId, "line " + std::to_string(lineno) + ": id '" + s.id + "'");
    }
    ds.samples.push_back(std::move(s));
  }
  if (ds.samples.empty()) throw Error(ErrorCode::EmptyDataset, "no samples in " + ds.name);
  return ds;
}

LabeledDataset load_dataset(const std::filesystem::path& path) {
  return parse_dataset(read_file(path), path.stem().string());
}

std::string dataset_to_jsonl(const LabeledDataset& dataset) {
  std::string out;
  for (const auto& s : dataset.samples) {
    ordered_json obj;
    obj["id"] = s.id;
    obj["question"] = s.question;
    obj["answer"] = s.answer;
    if (s.context) obj["context"] = *s.context;
    obj["references"] = s.references;
    if (s.label) obj["label"] = *s.label;
    if (s.noise_text) obj["noise_text"] = *s.noise_text;
    if (s.split) obj["split"] = *s.split;
    out += obj.dump();
    out += '\n';
  }
  return out;
}

void save_dataset(const LabeledDataset& dataset, const std::filesystem::path& path) {
  write_file(path, dataset_to_jsonl(dataset));
}

namespace {

template <typename T>
std::vector<T> select_split_impl(const std::vector<T>& items, Split split, std::size_t train_cap) {
  const bool tagged = std::any_of(items.begin(), items.end(), [](const T& x) { return x.split.has_value(); });
  std::vector<T> out;
  if (tagged) {
    for (const auto& x : items) {
      if (x.split && *x.split == to_string(split)) out.push_back(x);
    }
    if (split == Split::train && out.size() > train_cap) out.resize(train_cap);
    return out;
  }
  const std::size_t cut = std::min(train_cap, items.size());
  if (split == Split::train) return {items.begin(), items.begin() + static_cast<std::ptrdiff_t>(cut)};
  return {items.begin() + static_cast<std::ptrdiff_t>(cut), items.end()};
}

}  // namespace

std::vector<QASample> select_split(const std::vector<QASample>& samples, Split split, std::size_t train_cap) {
  return select_split_impl(samples, split, train_cap);
}

std::vector<HiddenRecord> select_split(const std::vector<HiddenRecord>& records, Split split, std::size_t train_cap) {
  return select_split_impl(records, split, train_cap);
}

std::string build_prompt(const QASample& sample, bool has_context) {
  if (has_context) {
    if (!sample.context || sample.context->empty()) {
      throw Error(ErrorCode::MissingContext, "sample '" + sample.id + "' has no context");
    }
    return "Answer these questions concisely based on the context: \n Context: " + *sample.context +
           " Q: " + sample.question + " A:";
  }
  return "Answer the question concisely. Q: " + sample.question + " A:";
}

namespace {

// Decodes one UTF-8 code point starting at text[i]; advances i. Malformed
// bytes decode as themselves.
char32_t next_code_point(std::string_view text, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(text[i]);
  auto cont = [&](std::size_t k) -> int {
    if (i + k >= text.size()) return -1;
    const auto b = static_cast<unsigned char>(text[i + k]);
    return (b & 0xC0) == 0x80 ? (b & 0x3F) : -1;
  };
  if (b0 < 0x80) {
    i += 1;
    return b0;
  }
  if ((b0 & 0xE0) == 0xC0 && cont(1) >= 0) {
    const char32_t cp = ((b0 & 0x1F) << 6) | cont(1);
    i += 2;
    return cp;
  }
  if ((b0 & 0xF0) == 0xE0 && cont(1) >= 0 && cont(2) >= 0) {
    const char32_t cp = ((b0 & 0x0F) << 12) | (cont(1) << 6) | cont(2);
    i += 3;
    return cp;
  }
  if ((b0 & 0xF8) == 0xF0 && cont(1) >= 0 && cont(2) >= 0 && cont(3) >= 0) {
    const char32_t cp = ((b0 & 0x07) << 18) | (cont(1) << 12) | (cont(2) << 6) | cont(3);
    i += 4;
    return cp;
  }
  i += 1;
  return b0;
}

bool unicode_space(char32_t c) {
  return (c >= 0x09 && c <= 0x0D) || c == 0x20 || c == 0x85 || c == 0xA0 || c == 0x1680 ||
         (c >= 0x2000 && c <= 0x200A) || c == 0x2028 || c == 0x2029 || c == 0x202F || c == 0x205F || c == 0x3000;
}

bool ascii_punct(char c) {
  const auto u = static_cast<unsigned char>(c);
  return (u >= 0x21 && u <= 0x2F) || (u >= 0x3A && u <= 0x40) || (u >= 0x5B && u <= 0x60) || (u >= 0x7B && u <= 0x7E);
}

}  // namespace

std::vector<std::string> rouge_tokens(std::string_view text) {
  std::vector<std::string> tokens;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) tokens.push_back(std::move(cur));
    cur.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t begin = i;
    const char32_t cp = next_code_point(text, i);
    if (unicode_space(cp)) {
      flush();
      continue;
    }
    for (std::size_t k = begin; k < i; ++k) {
      char c = text[k];
      if (ascii_punct(c)) continue;
      if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
      cur.push_back(c);
    }
  }
  flush();
  return tokens;
}

double rouge_l_f1(std::string_view candidate, std::string_view reference) {
  const auto cand = rouge_tokens(candidate);
  const auto ref = rouge_tokens(reference);
  if (cand.empty() || ref.empty()) throw Error(ErrorCode::EmptyText, "ROUGE-L needs non-empty texts");
  std::vector<std::size_t> prev(ref.size() + 1, 0), cur(ref.size() + 1, 0);
  for (std::size_t i = 1; i <= cand.size(); ++i) {
    for (std::size_t j = 1; j <= ref.size(); ++j) {
      cur[j] = cand[i - 1] == ref[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  const double lcs = static_cast<double>(prev[ref.size()]);
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(cand.size());
  const double r = lcs / static_cast<double>(ref.size());
  return 2.0 * p * r / (p + r);
}

int label_by_similarity(std::string_view generation, const std::vector<std::string>& references, double threshold) {
  if (references.empty()) throw Error(ErrorCode::EmptyText, "no reference answers");
  double best = 0.0;
  for (const auto& ref : references) best = std::max(best, rouge_l_f1(generation, ref));
  return best > threshold ? 1 : 0;
}

namespace {

// Nearest float, expressed as the double whose shortest decimal form equals
// the float's shortest decimal form. Serializing that double reproduces the
// float text exactly.
double float_decimal(double x) {
  const float f = static_cast<float>(x);
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), f);
  *res.ptr = '\0';
  return std::strtod(buf, nullptr);
}

ordered_json float_array(const Vec& v) {
  ordered_json arr = ordered_json::array();
  for (double x : v) arr.push_back(float_decimal(x));
  return arr;
}

Vec read_vector(const json& obj, const char* key, std::size_t dim, std::size_t lineno) {
  if (!obj.contains(key) || !obj[key].is_array()) schema_error(lineno, std::string("missing array '") + key + "'");
  const auto& arr = obj[key];
  if (arr.size() != dim) {
    throw Error(ErrorCode::DimMismatch, "line " + std::to_string(lineno) + ": '" + key + "' has " +
                                            std::to_string(arr.size()) + " values, header dim is " +
                                            std::to_string(dim));
  }
  Vec out;
  out.reserve(dim);
  for (const auto& x : arr) {
    if (!x.is_number()) schema_error(lineno, std::string("non-numeric entry in '") + key + "'");
    const float f = static_cast<float>(x.get<double>());
    if (!std::isfinite(f)) schema_error(lineno, std::string("non-finite entry in '") + key + "'");
    out.push_back(static_cast<double>(f));
  }
  return out;
}

}  // namespace

std::string hidden_to_jsonl(const HiddenFile& file) {
  std::vector<const HiddenRecord*> order;
  for (const auto& r : file.records) order.push_back(&r);
  std::sort(order.begin(), order.end(), [](const auto* a, const auto* b) { return a->id < b->id; });

  ordered_json header;
  header["format"] = "ssp-hidden";
  header["version"] = 1;
  header["model"] = file.model;
  header["layer"] = file.layer;
  header["dim"] = file.dim;
  std::string out = header.dump() + "\n";
  for (const auto* r : order) {
    if (r->h_orig.size() != file.dim || r->h_pert.size() != file.dim) {
      throw Error(ErrorCode::DimMismatch, "record '" + r->id + "' does not match dim " + std::to_string(file.dim));
    }
    ordered_json obj;
    obj["id"] = r->id;
    obj["label"] = r->label;
    obj["h_orig"] = float_array(r->h_orig);
    obj["h_pert"] = float_array(r->h_pert);
    if (r->split) obj["split"] = *r->split;
    out += obj.dump();
    out += '\n';
  }
  return out;
}

void write_hidden(const HiddenFile& file, const std::filesystem::path& path) { write_file(path, hidden_to_jsonl(file)); }

HiddenFile parse_hidden(std::string_view text) {
  const auto lines = split_lines(text);
  HiddenFile file;
  bool have_header = false;
  std::set<std::string> seen;
  for (std::size_t i = 0; i < lines.size(); ++i) {
    if (blank(lines[i])) continue;
    const std::size_t lineno = i + 1;
    const json obj = parse_line(lines[i], lineno);
    if (!obj.is_object()) schema_error(lineno, "expected a JSON object");
    if (!have_header) {
      if (obj.value("format", "") != "ssp-hidden") schema_error(lineno, "missing ssp-hidden header");
      if (!obj.contains("version") || !obj["version"].is_number_integer()) schema_error(lineno, "missing version");
      if (obj["version"].get<long long>() != 1) {
        throw Error(ErrorCode::UnknownVersion, "hidden file version " + obj["version"].dump());
      }
      file.model = required_string(obj, "model", lineno, false);
      if (!obj.contains("layer") || !obj["layer"].is_number_unsigned() || !obj.contains("dim") ||
          !obj["dim"].is_number_unsigned() || obj["dim"].get<std::size_t>() == 0) {
        schema_error(lineno, "header needs positive integer layer and dim");
      }
      file.layer = obj["layer"].get<std::size_t>();
      file.dim = obj["dim"].get<std::size_t>();
      have_header = true;
      continue;
    }
    HiddenRecord r;
    r.id = required_string(obj, "id", lineno, true);
    const auto label = optional_label(obj, lineno);
    if (!label) schema_error(lineno, "missing label");
    r.label = *label;
    r.layer = file.layer;
    r.h_orig = read_vector(obj, "h_orig", file.dim, lineno);
    r.h_pert = read_vector(obj, "h_pert", file.dim, lineno);
    r.split = optional_string(obj, "split", lineno);
    if (!seen.insert(r.id).second) {
      throw Error(ErrorCode::DuplicateId, "line " + std::to_string(lineno) + ": id '" + r.id + "'");
    }
    file.records.push_back(std::move(r));
  }
  if (!have_header) throw Error(ErrorCode::EmptyDataset, "hidden file has no header");
  return file;
}

HiddenFile read_hidden(const std::filesystem::path& path) { return parse_hidden(read_file(path)); }

double planted_truth_cosine(double gap) { return 0.9 - 0.7 * gap; }

std::vector<HiddenFile> synth_planted(const SyntheticSpec& spec) {
  if (spec.n_per_class == 0 || spec.dim < 2 || spec.layers == 0 || spec.gap < 0.0 || spec.gap > 1.0 ||
      spec.noise < 0.0) {
    throw Error(ErrorCode::ConfigError, "invalid synthetic spec");
  }
  if (spec.planted_layer && (*spec.planted_layer < 1 || *spec.planted_layer > spec.layers)) {
    throw Error(ErrorCode::LayerOutOfRange, "planted layer outside the stack");
  }
  const std::size_t d = spec.dim;
  const double scale = std::sqrt(static_cast<double>(d));
  std::vector<HiddenFile> files;
  for (std::size_t layer = 1; layer <= spec.layers; ++layer) {
    double gap = spec.gap;
    if (spec.planted_layer && *spec.planted_layer != layer) gap = 0.0;
    HiddenFile file{"planted-gap" + std::to_string(spec.gap).substr(0, 4), layer, d, {}};
    Rng rng(derive_seed(spec.seed, "synth-layer-" + std::to_string(layer)));
    for (Split split : {Split::train, Split::test}) {
      const std::size_t total = 2 * spec.n_per_class;
      for (std::size_t i = 0; i < total; ++i) {
        HiddenRecord r;
        char idbuf[32];
        std::snprintf(idbuf, sizeof(idbuf), "%s-%06zu", std::string(to_string(split)).c_str(), i);
        r.id = idbuf;
        r.label = i % 2 == 0 ? 1 : 0;
        r.layer = layer;
        r.split = std::string(to_string(split));

        Vec base(d), other(d);
        for (double& x : base) x = rng.normal();
        for (double& x : other) x = rng.normal();
        const double nb = norm2(base);
        for (double& x : base) x /= nb;
        axpy(-dot(other, base), base, other);
        const double no = norm2(other);
        for (double& x : other) x /= no;

        const double mu = r.label == 1 ? planted_truth_cosine(gap) : kPlantedHalluCosine;
        const double ortho = std::sqrt(1.0 - mu * mu);
        r.h_orig.resize(d);
        r.h_pert.resize(d);
        for (std::size_t k = 0; k < d; ++k) {
          r.h_orig[k] = scale * base[k];
          r.h_pert[k] = scale * (mu * base[k] + ortho * other[k]) + spec.noise * rng.normal();
        }
        file.records.push_back(std::move(r));
      }
    }
    std::sort(file.records.begin(), file.records.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    files.push_back(std::move(file));
  }
  return files;
}

LabeledDataset synth_qa(std::size_t n, std::uint64_t seed) {
  static constexpr std::string_view kNoise[] = {"Indeed.", "Truly so.", "Sure thing.", "As said.",
                                                "Plainly.", "Of course.", "Calmly put.", "No doubt."};
  Rng rng(derive_seed(seed, "synth-qa"));
  LabeledDataset ds{"synth-qa", {}};
  for (std::size_t i = 0; i < n; ++i) {
    const int a = static_cast<int>(rng.below(10));
    const int b = static_cast<int>(rng.below(10));
    const bool truthful = i % 2 == 0;
    const int shown = truthful ? a + b : a + b + 1 + static_cast<int>(rng.below(3));
    QASample s;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "qa-%04zu", i);
    s.id = idbuf;
    s.question = std::to_string(a) + "+" + std::to_string(b) + "?";
    s.answer = std::to_string(shown);
    s.references = {std::to_string(a + b)};
    s.label = label_by_similarity(s.answer, s.references);
    s.noise_text = std::string(kNoise[rng.below(std::size(kNoise))]);
    s.split = i < n / 2 ? "train" : "test";
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace ssp
