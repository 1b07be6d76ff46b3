#include "protomix/embedstore.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <fmt/ranges.h>
#include <spdlog/spdlog.h>

#include "binary_io.hpp"
#include "protomix/errors.hpp"
#include "protomix/rng.hpp"

namespace protomix {

namespace {

constexpr std::string_view kEmbfMagic = "EMBF";
constexpr std::uint16_t kEmbfVersion = 1;
constexpr double kUnitTolerance = 1e-5;

bool rows_unit_norm(const Eigen::MatrixXd& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    if (std::abs(m.row(r).norm() - 1.0) > kUnitTolerance) return false;
  }
  return true;
}

std::filesystem::path sidecar_path(const std::filesystem::path& csv) {
  return std::filesystem::path(csv.string() + ".classes");
}

std::vector<std::string> default_class_names(std::size_t count) {
  std::vector<std::string> names(count);
  for (std::size_t c = 0; c < count; ++c) names[c] = fmt::format("class_{}", c);
  return names;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ')) s.remove_suffix(1);
  while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
  return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    const auto comma = line.find(',', start);
    out.push_back(trim(line.substr(start, comma - start)));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return out;
}

double parse_double(std::string_view token, std::size_t line_no) {
  std::string buf(token);
  char* end = nullptr;
  const double value = std::strtod(buf.c_str(), &end);
  if (buf.empty() || end != buf.c_str() + buf.size()) {
    throw FormatError(fmt::format("line {}: '{}' is not a number", line_no, buf));
  }
  return value;
}

// Feature values follow the float32 payload convention, rounded once.
double parse_float(std::string_view token, std::size_t line_no) {
  std::string buf(token);
  char* end = nullptr;
  const float value = std::strtof(buf.c_str(), &end);
  if (buf.empty() || end != buf.c_str() + buf.size()) {
    throw FormatError(fmt::format("line {}: '{}' is not a number", line_no, buf));
  }
  return value;
}

nlohmann::json make_trailer(const EmbeddingSet& set) {
  nlohmann::json trailer = set.extra.is_object() ? set.extra : nlohmann::json::object();
  trailer["class_names"] = set.class_names;
  trailer["normalized"] = set.normalized;
  if (set.prompt_template) {
    trailer["prompt_template"] = *set.prompt_template;
  } else {
    trailer.erase("prompt_template");
  }
  return trailer;
}

bool is_trailer(const nlohmann::json& j) {
  return j.is_object() && j.contains("class_names") && j["class_names"].is_array();
}

// Called when the bytes after the label block do not parse. If a well-formed
// trailer starts somewhere else, the payload length disagrees with the header.
[[noreturn]] void diagnose_bad_trailer(const std::vector<char>& data, std::size_t header_end,
                                       std::size_t expected_offset,
                                       const std::string& context) {
  for (std::size_t pos = header_end; pos < data.size(); ++pos) {
    if (data[pos] != '{' || pos == expected_offset) continue;
    auto parsed = nlohmann::json::parse(data.begin() + static_cast<std::ptrdiff_t>(pos),
                                        data.end(), nullptr, false);
    if (!parsed.is_discarded() && is_trailer(parsed)) {
      throw TruncationError(fmt::format(
          "{}: payload is {} bytes but the header implies {}; header dimensions do not "
          "match the stored rows",
          context, pos - header_end, expected_offset - header_end));
    }
  }
  throw FormatError(fmt::format("{}: JSON trailer missing or malformed", context));
}

EmbeddingSet read_embf(std::vector<char> bytes, const std::string& context) {
  detail::ByteReader in(std::move(bytes), context);
  if (in.raw(4, "magic") != kEmbfMagic) throw FormatError(context + ": bad magic");
  const auto version = in.uint<std::uint16_t>("version");
  if (version != kEmbfVersion) {
    throw FormatError(fmt::format("{}: unsupported EMBF version {}", context, version));
  }
  const auto n = in.uint<std::uint32_t>("N");
  const auto d = in.uint<std::uint32_t>("d");
  const auto c = in.uint<std::uint32_t>("C");
  if (n == 0 || d == 0 || c == 0) {
    throw ValidationError(fmt::format("{}: header has N={}, d={}, C={}", context, n, d, c));
  }
  const std::size_t header_end = in.position();
  const std::size_t payload_bytes = std::size_t{n} * d * 4 + std::size_t{n} * 4;
  if (in.remaining() < payload_bytes) {
    throw TruncationError(fmt::format("{}: header declares N={} d={} ({} bytes of rows and "
                                      "labels) but only {} bytes follow",
                                      context, n, d, payload_bytes, in.remaining()));
  }

  EmbeddingSet set;
  set.features.resize(n, d);
  for (std::uint32_t r = 0; r < n; ++r) {
    for (std::uint32_t k = 0; k < d; ++k) set.features(r, k) = in.f32("payload");
  }
  std::vector<std::uint32_t> raw_labels(n);
  for (auto& label : raw_labels) label = in.uint<std::uint32_t>("labels");

  const std::size_t trailer_offset = in.position();
  const std::string trailer_text = in.rest();
  auto trailer = nlohmann::json::parse(trailer_text, nullptr, false);
  if (trailer.is_discarded() || !is_trailer(trailer)) {
    diagnose_bad_trailer(in.data(), header_end, trailer_offset, context);
  }

  set.class_names = trailer["class_names"].get<std::vector<std::string>>();
  if (set.class_names.size() != c) {
    throw ValidationError(fmt::format("{}: trailer lists {} class names, header says C={}",
                                      context, set.class_names.size(), c));
  }
  set.normalized = trailer.value("normalized", false);
  if (trailer.contains("prompt_template") && trailer["prompt_template"].is_string()) {
    set.prompt_template = trailer["prompt_template"].get<std::string>();
  }
  trailer.erase("class_names");
  trailer.erase("normalized");
  trailer.erase("prompt_template");
  set.extra = std::move(trailer);

  set.labels.resize(n);
  for (std::uint32_t r = 0; r < n; ++r) {
    if (raw_labels[r] >= c) {
      throw ValidationError(
          fmt::format("{}: row {} has label {} outside [0, {})", context, r, raw_labels[r], c));
    }
    set.labels[r] = static_cast<int>(raw_labels[r]);
  }
  if (set.normalized && !rows_unit_norm(set.features)) {
    throw ValidationError(context + ": trailer claims normalized rows but norms differ from 1");
  }
  return set;
}

EmbeddingSet read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(fmt::format("cannot open {}", path.string()));
  const std::string context = path.string();

  std::string line;
  if (!std::getline(in, line)) throw FormatError(context + ": empty CSV");
  const auto header = split_commas(line);
  if (header.empty() || header[0] != "label") {
    throw FormatError(context + ": CSV header must start with 'label'");
  }
  const std::size_t d = header.size() - 1;
  if (d == 0) throw ValidationError(context + ": CSV has no feature columns");
  for (std::size_t k = 0; k < d; ++k) {
    if (header[k + 1] != fmt::format("f{}", k)) {
      throw FormatError(fmt::format("{}: expected column f{}, found '{}'", context, k,
                                    std::string(header[k + 1])));
    }
  }

  std::vector<std::vector<double>> rows;
  std::vector<int> labels;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto fields = split_commas(line);
    if (fields.size() != d + 1) {
      throw TruncationError(fmt::format("{}: line {} has {} values, header declares {}",
                                        context, line_no, fields.size() - 1, d));
    }
    const double label = parse_double(fields[0], line_no);
    if (label < 0 || label != std::floor(label)) {
      throw ValidationError(fmt::format("{}: line {} has invalid label", context, line_no));
    }
    labels.push_back(static_cast<int>(label));
    std::vector<double> row(d);
    for (std::size_t k = 0; k < d; ++k) row[k] = parse_float(fields[k + 1], line_no);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ValidationError(context + ": CSV has no rows");

  EmbeddingSet set;
  set.features.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(d));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t k = 0; k < d; ++k) {
      set.features(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(k)) = rows[r][k];
    }
  }
  set.labels = std::move(labels);

  const auto sidecar = sidecar_path(path);
  if (std::filesystem::exists(sidecar)) {
    std::ifstream names(sidecar);
    std::string name;
    while (std::getline(names, name)) {
      if (!trim(name).empty()) set.class_names.emplace_back(trim(name));
    }
  } else {
    const int max_label = *std::max_element(set.labels.begin(), set.labels.end());
    set.class_names = default_class_names(static_cast<std::size_t>(max_label) + 1);
  }
  for (std::size_t r = 0; r < set.labels.size(); ++r) {
    if (static_cast<std::size_t>(set.labels[r]) >= set.class_names.size()) {
      throw ValidationError(fmt::format("{}: row {} has label {} but only {} classes are named",
                                        context, r, set.labels[r], set.class_names.size()));
    }
  }
  set.normalized = rows_unit_norm(set.features);
  return set;
}

}  // namespace

void validate(const EmbeddingSet& set, bool require_complete) {
  if (set.features.rows() < 1) throw ValidationError("embedding set has no rows");
  if (set.features.cols() < 1) throw ValidationError("embedding set has zero dimensions");
  if (set.class_names.empty()) throw ValidationError("embedding set has no classes");
  if (set.labels.size() != set.size()) {
    throw ValidationError(fmt::format("{} labels for {} rows", set.labels.size(), set.size()));
  }
  const int num_classes = static_cast<int>(set.num_classes());
  std::vector<bool> seen(set.num_classes(), false);
  for (std::size_t r = 0; r < set.labels.size(); ++r) {
    const int label = set.labels[r];
    if (label < 0 || label >= num_classes) {
      throw ValidationError(
          fmt::format("row {} has label {} outside [0, {})", r, label, num_classes));
    }
    seen[static_cast<std::size_t>(label)] = true;
  }
  if (require_complete) {
    std::vector<int> missing;
    for (int c = 0; c < num_classes; ++c) {
      if (!seen[static_cast<std::size_t>(c)]) missing.push_back(c);
    }
    if (!missing.empty()) {
      throw ValidationError(fmt::format("classes without samples: {}", fmt::join(missing, ", ")));
    }
  }
  if (!set.features.allFinite()) throw ValidationError("embedding set contains non-finite values");
  if (set.normalized && !rows_unit_norm(set.features)) {
    throw ValidationError("set is flagged normalized but a row norm differs from 1 by > 1e-5");
  }
}

EmbeddingSet load_embeddings(const std::filesystem::path& path) {
  auto bytes = detail::read_file(path);
  if (bytes.size() >= 4 && std::string_view(bytes.data(), 4) == kEmbfMagic) {
    return read_embf(std::move(bytes), path.string());
  }
  if (bytes.size() >= 5 && std::string_view(bytes.data(), 5) == "label") {
    return read_csv(path);
  }
  throw FormatError(fmt::format("{}: neither EMBF (bad magic) nor CSV with a label header",
                                path.string()));
}

void save_embeddings(const EmbeddingSet& set, const std::filesystem::path& path,
                     bool require_complete) {
  validate(set, require_complete);
  detail::ByteWriter out;
  out.raw(kEmbfMagic);
  out.uint<std::uint16_t>(kEmbfVersion);
  out.uint<std::uint32_t>(static_cast<std::uint32_t>(set.size()));
  out.uint<std::uint32_t>(static_cast<std::uint32_t>(set.dim()));
  out.uint<std::uint32_t>(static_cast<std::uint32_t>(set.num_classes()));
  for (Eigen::Index r = 0; r < set.features.rows(); ++r) {
    for (Eigen::Index k = 0; k < set.features.cols(); ++k) {
      out.f32(static_cast<float>(set.features(r, k)));
    }
  }
  for (int label : set.labels) out.uint<std::uint32_t>(static_cast<std::uint32_t>(label));
  out.raw(make_trailer(set).dump());
  out.write_to(path);
}

void save_embeddings_csv(const EmbeddingSet& set, const std::filesystem::path& path) {
  validate(set, false);
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(fmt::format("cannot open {} for writing", path.string()));
  out << "label";
  for (std::size_t k = 0; k < set.dim(); ++k) out << ",f" << k;
  out << '\n';
  for (std::size_t r = 0; r < set.size(); ++r) {
    out << set.labels[r];
    for (std::size_t k = 0; k < set.dim(); ++k) {
      // float32 payload; 9 significant digits round-trip exactly.
      out << ',' << fmt::format("{:.9g}", static_cast<float>(set.features(
                                              static_cast<Eigen::Index>(r),
                                              static_cast<Eigen::Index>(k))));
    }
    out << '\n';
  }
  if (!out) throw IoError(fmt::format("write failed for {}", path.string()));

  std::ofstream names(sidecar_path(path), std::ios::trunc);
  if (!names) throw IoError(fmt::format("cannot write class sidecar for {}", path.string()));
  for (const auto& name : set.class_names) names << name << '\n';
}

EmbeddingSet l2_normalize(const EmbeddingSet& set) {
  EmbeddingSet out = set;
  for (Eigen::Index r = 0; r < out.features.rows(); ++r) {
    const double norm = out.features.row(r).norm();
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw DegenerateError(fmt::format("row {} has zero norm and cannot be normalized", r));
    }
    out.features.row(r) /= norm;
  }
  out.normalized = true;
  return out;
}

std::vector<std::size_t> class_counts(const EmbeddingSet& set) {
  std::vector<std::size_t> counts(set.num_classes(), 0);
  for (int label : set.labels) ++counts.at(static_cast<std::size_t>(label));
  return counts;
}

namespace {

std::vector<int> checked_subset(std::span<const int> subset, std::size_t num_classes) {
  if (subset.empty()) throw ValidationError("class subset is empty");
  std::vector<int> mapping(num_classes, -1);
  for (std::size_t i = 0; i < subset.size(); ++i) {
    const int c = subset[i];
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
      throw ValidationError(fmt::format("class subset entry {} outside [0, {})", c, num_classes));
    }
    if (mapping[static_cast<std::size_t>(c)] != -1) {
      throw ValidationError(fmt::format("class subset lists class {} twice", c));
    }
    mapping[static_cast<std::size_t>(c)] = static_cast<int>(i);
  }
  return mapping;
}

}  // namespace

EmbeddingSet filter_classes(const EmbeddingSet& set, std::span<const int> subset) {
  const auto mapping = checked_subset(subset, set.num_classes());
  std::vector<Eigen::Index> keep;
  for (std::size_t r = 0; r < set.size(); ++r) {
    if (mapping[static_cast<std::size_t>(set.labels[r])] >= 0) {
      keep.push_back(static_cast<Eigen::Index>(r));
    }
  }
  if (keep.empty()) throw ValidationError("class subset retains no rows");

  EmbeddingSet out;
  out.features = set.features(keep, Eigen::all);
  out.labels.reserve(keep.size());
  for (auto r : keep) {
    out.labels.push_back(mapping[static_cast<std::size_t>(set.labels[static_cast<std::size_t>(r)])]);
  }
  for (int c : subset) out.class_names.push_back(set.class_names[static_cast<std::size_t>(c)]);
  out.normalized = set.normalized;
  out.prompt_template = set.prompt_template;
  out.extra = set.extra;
  return out;
}

TextPrototypeSet filter_classes(const TextPrototypeSet& text, std::span<const int> subset) {
  checked_subset(subset, text.num_classes());
  TextPrototypeSet out;
  std::vector<Eigen::Index> rows(subset.begin(), subset.end());
  out.prototypes = text.prototypes(rows, Eigen::all);
  for (int c : subset) out.class_names.push_back(text.class_names[static_cast<std::size_t>(c)]);
  out.prompt_template = text.prompt_template;
  return out;
}

EmbeddingSet sample_few_shot(const EmbeddingSet& set, const SplitSpec& spec,
                             bool with_replacement) {
  if (spec.shots < 1) throw ParameterError(fmt::format("shots must be >= 1, got {}", spec.shots));
  const EmbeddingSet source =
      spec.class_subset ? filter_classes(set, *spec.class_subset) : set;
  const std::size_t num_classes = source.num_classes();

  std::vector<std::vector<Eigen::Index>> rows_by_class(num_classes);
  for (std::size_t r = 0; r < source.size(); ++r) {
    rows_by_class[static_cast<std::size_t>(source.labels[r])].push_back(
        static_cast<Eigen::Index>(r));
  }

  const auto shots = static_cast<std::size_t>(spec.shots);
  std::vector<std::string> problems;
  for (std::size_t c = 0; c < num_classes; ++c) {
    const auto have = rows_by_class[c].size();
    if (have == 0 || (!with_replacement && have < shots)) {
      problems.push_back(fmt::format("{} ('{}': {} available)", c, source.class_names[c], have));
    }
  }
  if (!problems.empty()) {
    throw SamplingError(fmt::format("not enough samples for {} shots in classes: {}", shots,
                                    fmt::join(problems, ", ")));
  }

  std::vector<Eigen::Index> picked;
  picked.reserve(shots * num_classes);
  std::vector<int> labels;
  labels.reserve(shots * num_classes);
  for (std::size_t c = 0; c < num_classes; ++c) {
    Xoshiro256 rng(derive_seed(spec.seed, c));
    auto& pool = rows_by_class[c];
    if (with_replacement) {
      for (std::size_t i = 0; i < shots; ++i) picked.push_back(pool[rng.uniform_below(pool.size())]);
    } else {
      for (std::size_t i = 0; i < shots; ++i) {
        const auto j = i + rng.uniform_below(pool.size() - i);
        std::swap(pool[i], pool[j]);
        picked.push_back(pool[i]);
      }
    }
    labels.insert(labels.end(), shots, static_cast<int>(c));
  }

  EmbeddingSet out;
  out.features = source.features(picked, Eigen::all);
  out.labels = std::move(labels);
  out.class_names = source.class_names;
  out.normalized = source.normalized;
  out.prompt_template = source.prompt_template;
  return out;
}

TextPrototypeSet text_prototypes_from(const EmbeddingSet& set) {
  validate(set, true);
  if (set.size() != set.num_classes()) {
    throw ValidationError(fmt::format("text prototype file must hold one row per class "
                                      "({} rows for {} classes)",
                                      set.size(), set.num_classes()));
  }
  TextPrototypeSet text;
  text.class_names = set.class_names;
  text.prompt_template = set.prompt_template.value_or(kDefaultPromptTemplate);
  text.prototypes.resize(set.features.rows(), set.features.cols());
  for (std::size_t r = 0; r < set.size(); ++r) {
    text.prototypes.row(set.labels[r]) = set.features.row(static_cast<Eigen::Index>(r));
  }
  if (!rows_unit_norm(text.prototypes)) {
    spdlog::info("text prototypes are not unit-norm; normalizing rows");
    for (Eigen::Index r = 0; r < text.prototypes.rows(); ++r) {
      const double norm = text.prototypes.row(r).norm();
      if (!(norm > 0.0)) {
        throw DegenerateError(fmt::format("text prototype for class {} has zero norm", r));
      }
      text.prototypes.row(r) /= norm;
    }
  }
  return text;
}

TextPrototypeSet load_text_prototypes(const std::filesystem::path& path) {
  return text_prototypes_from(load_embeddings(path));
}

EmbeddingSet to_embedding_set(const TextPrototypeSet& text) {
  EmbeddingSet set;
  set.features = text.prototypes;
  set.labels.resize(text.num_classes());
  std::iota(set.labels.begin(), set.labels.end(), 0);
  set.class_names = text.class_names;
  set.normalized = rows_unit_norm(text.prototypes);
  set.prompt_template = text.prompt_template;
  return set;
}

}  // namespace protomix
