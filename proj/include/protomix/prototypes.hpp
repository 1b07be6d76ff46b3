#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "protomix/embedstore.hpp"
#include "protomix/subspace.hpp"

namespace protomix {

enum class Strategy { ncm, mix, align, align_mix };

std::string_view to_string(Strategy s);
Strategy strategy_from_string(std::string_view name);

/// One prototype vector per class under a named estimator.
struct PrototypeBank {
  Eigen::MatrixXd vectors;  // C x d
  Strategy strategy = Strategy::ncm;
  std::optional<double> lambda;
  std::optional<int> projector_rank;
  std::vector<std::string> class_names;

  std::size_t num_classes() const { return static_cast<std::size_t>(vectors.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(vectors.cols()); }
};

/// Per-class arithmetic mean of the training rows.
PrototypeBank ncm_prototypes(const EmbeddingSet& train);

/// lambda * image + (1 - lambda) * text, row by row, no renormalization.
PrototypeBank mix_prototypes(const PrototypeBank& image_bank, const TextPrototypeSet& text,
                             double lambda);

/// Projects every prototype onto the text-aligned subspace. A row that
/// vanishes under the projection is kept and reported as a warning.
PrototypeBank align_prototypes(const PrototypeBank& image_bank, const SemanticProjector& proj);

/// Mixing restricted to the aligned component: mix(align(bank), text, lambda).
PrototypeBank align_mix_prototypes(const PrototypeBank& image_bank, const TextPrototypeSet& text,
                                   const SemanticProjector& proj, double lambda);

/// Unit-normalizes every nonzero row; ablation switch only.
PrototypeBank renormalized(const PrototypeBank& bank);

/// Banks travel as EMBF (one row per class) with strategy, lambda and
/// projector_rank in the JSON trailer.
EmbeddingSet to_embedding_set(const PrototypeBank& bank);
PrototypeBank bank_from(const EmbeddingSet& set);
void save_bank(const PrototypeBank& bank, const std::filesystem::path& path);
PrototypeBank load_bank(const std::filesystem::path& path);

}  // namespace protomix
