#include "protomix/prototypes.hpp"

#include <cmath>
#include <numeric>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "protomix/errors.hpp"

namespace protomix {

namespace {

// Rows shorter than this after projection count as "fully orthogonal".
constexpr double kVanishingNorm = 1e-12;

void check_lambda(double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw ParameterError(fmt::format("mixing coefficient {} outside [0, 1]", lambda));
  }
}

void check_pairing(const PrototypeBank& bank, const TextPrototypeSet& text) {
  if (bank.num_classes() != text.num_classes()) {
    throw PairingError(fmt::format("image bank has {} classes, text prototypes {}",
                                   bank.num_classes(), text.num_classes()));
  }
  if (bank.dim() != text.dim()) {
    throw ShapeError(fmt::format("image bank has d={}, text prototypes d={}", bank.dim(),
                                 text.dim()));
  }
  if (!bank.class_names.empty() && bank.class_names != text.class_names) {
    for (std::size_t c = 0; c < bank.class_names.size(); ++c) {
      if (bank.class_names[c] != text.class_names[c]) {
        throw PairingError(fmt::format("class {} is '{}' in the image bank but '{}' in the text "
                                       "prototypes",
                                       c, bank.class_names[c], text.class_names[c]));
      }
    }
  }
}

}  // namespace

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::ncm: return "ncm";
    case Strategy::mix: return "mix";
    case Strategy::align: return "align";
    case Strategy::align_mix: return "align_mix";
  }
  return "unknown";
}

Strategy strategy_from_string(std::string_view name) {
  if (name == "ncm") return Strategy::ncm;
  if (name == "mix") return Strategy::mix;
  if (name == "align") return Strategy::align;
  if (name == "align_mix" || name == "align-mix") return Strategy::align_mix;
  throw ParameterError(fmt::format("unknown prototype strategy '{}'", name));
}

PrototypeBank ncm_prototypes(const EmbeddingSet& train) {
  if (train.labels.size() != train.size()) throw ValidationError("labels do not match rows");
  const auto classes = train.num_classes();
  PrototypeBank bank;
  bank.vectors = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(classes), train.features.cols());
  std::vector<std::size_t> counts(classes, 0);
  for (std::size_t r = 0; r < train.size(); ++r) {
    const auto c = static_cast<std::size_t>(train.labels[r]);
    if (c >= classes) throw ValidationError(fmt::format("row {} label out of range", r));
    bank.vectors.row(static_cast<Eigen::Index>(c)) += train.features.row(static_cast<Eigen::Index>(r));
    ++counts[c];
  }
  std::vector<std::size_t> missing;
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] == 0) missing.push_back(c);
    else bank.vectors.row(static_cast<Eigen::Index>(c)) /= static_cast<double>(counts[c]);
  }
  if (!missing.empty()) {
    throw ValidationError(fmt::format("incomplete classes: no training rows for class {}",
                                      missing.front()));
  }
  bank.strategy = Strategy::ncm;
  bank.class_names = train.class_names;
  return bank;
}

PrototypeBank mix_prototypes(const PrototypeBank& image_bank, const TextPrototypeSet& text,
                             double lambda) {
  check_lambda(lambda);
  check_pairing(image_bank, text);
  PrototypeBank out;
  out.vectors = lambda * image_bank.vectors + (1.0 - lambda) * text.prototypes;
  out.strategy = Strategy::mix;
  out.lambda = lambda;
  out.projector_rank = image_bank.projector_rank;
  out.class_names = text.class_names;
  return out;
}

PrototypeBank align_prototypes(const PrototypeBank& image_bank, const SemanticProjector& proj) {
  PrototypeBank out;
  out.vectors = proj.project_rows(image_bank.vectors);
  out.strategy = Strategy::align;
  out.projector_rank = proj.rank();
  out.class_names = image_bank.class_names;
  for (Eigen::Index c = 0; c < out.vectors.rows(); ++c) {
    if (out.vectors.row(c).norm() <= kVanishingNorm * std::max(1.0, image_bank.vectors.row(c).norm())) {
      spdlog::warn("class {} prototype is orthogonal to the text subspace; its aligned "
                   "prototype is zero (weak cross-modal alignment)",
                   c);
    }
  }
  return out;
}

PrototypeBank align_mix_prototypes(const PrototypeBank& image_bank, const TextPrototypeSet& text,
                                   const SemanticProjector& proj, double lambda) {
  check_lambda(lambda);
  PrototypeBank out = mix_prototypes(align_prototypes(image_bank, proj), text, lambda);
  out.strategy = Strategy::align_mix;
  out.projector_rank = proj.rank();
  return out;
}

PrototypeBank renormalized(const PrototypeBank& bank) {
  PrototypeBank out = bank;
  for (Eigen::Index c = 0; c < out.vectors.rows(); ++c) {
    const double norm = out.vectors.row(c).norm();
    if (norm > 0.0) out.vectors.row(c) /= norm;
  }
  return out;
}

EmbeddingSet to_embedding_set(const PrototypeBank& bank) {
  EmbeddingSet set;
  set.features = bank.vectors;
  set.labels.resize(bank.num_classes());
  std::iota(set.labels.begin(), set.labels.end(), 0);
  set.class_names = bank.class_names;
  if (set.class_names.empty()) {
    for (std::size_t c = 0; c < bank.num_classes(); ++c) {
      set.class_names.push_back(fmt::format("class_{}", c));
    }
  }
  set.normalized = false;
  set.extra["strategy"] = std::string(to_string(bank.strategy));
  if (bank.lambda) set.extra["lambda"] = *bank.lambda;
  if (bank.projector_rank) set.extra["projector_rank"] = *bank.projector_rank;
  return set;
}

PrototypeBank bank_from(const EmbeddingSet& set) {
  validate(set, true);
  if (set.size() != set.num_classes()) {
    throw ValidationError("a prototype bank file holds exactly one row per class");
  }
  PrototypeBank bank;
  bank.vectors.resize(set.features.rows(), set.features.cols());
  for (std::size_t r = 0; r < set.size(); ++r) {
    bank.vectors.row(set.labels[r]) = set.features.row(static_cast<Eigen::Index>(r));
  }
  bank.class_names = set.class_names;
  bank.strategy = strategy_from_string(set.extra.value("strategy", std::string("ncm")));
  if (set.extra.contains("lambda")) bank.lambda = set.extra["lambda"].get<double>();
  if (set.extra.contains("projector_rank")) {
    bank.projector_rank = set.extra["projector_rank"].get<int>();
  }
  if ((bank.strategy == Strategy::mix || bank.strategy == Strategy::align_mix) && !bank.lambda) {
    throw ValidationError("mixed prototype bank is missing its lambda");
  }
  return bank;
}

void save_bank(const PrototypeBank& bank, const std::filesystem::path& path) {
  save_embeddings(to_embedding_set(bank), path);
}

PrototypeBank load_bank(const std::filesystem::path& path) {
  return bank_from(load_embeddings(path));
}

}  // namespace protomix
