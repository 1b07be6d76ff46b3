#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "json.hpp"

namespace protomix {

inline constexpr char kDefaultPromptTemplate[] = "a photo of a {}.";

/// Labeled feature matrix: the image side (or any labeled side) of a dataset.
///
/// Features are held in double precision; the on-disk payload is float32, so a
/// load/save cycle is the identity on the stored values.
struct EmbeddingSet {
  Eigen::MatrixXd features;  // N x d, one embedding per row
  std::vector<int> labels;   // N, each in [0, C)
  std::vector<std::string> class_names;
  bool normalized = false;
  std::optional<std::string> prompt_template;
  // Trailer keys beyond the core schema (e.g. prototype-bank metadata);
  // preserved across save/load.
  nlohmann::json extra = nlohmann::json::object();

  std::size_t size() const { return static_cast<std::size_t>(features.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(features.cols()); }
  std::size_t num_classes() const { return class_names.size(); }
};

/// One unit-norm text embedding per class, rows ordered by class index.
struct TextPrototypeSet {
  Eigen::MatrixXd prototypes;  // C x d
  std::vector<std::string> class_names;
  std::string prompt_template = kDefaultPromptTemplate;

  std::size_t num_classes() const { return class_names.size(); }
  std::size_t dim() const { return static_cast<std::size_t>(prototypes.cols()); }
};

struct SplitSpec {
  int shots = 1;
  std::uint64_t seed = 0;
  std::optional<std::vector<int>> class_subset;
};

/// Throws ValidationError when an invariant of EmbeddingSet is broken. With
/// `require_complete`, every class 0..C-1 must own at least one row.
void validate(const EmbeddingSet& set, bool require_complete);

/// Reads EMBF v1 (detected by magic) or the CSV fallback
/// (`label,f0,...,f{d-1}`, optional `<path>.classes` sidecar with one class
/// name per line).
EmbeddingSet load_embeddings(const std::filesystem::path& path);

/// Writes EMBF v1. The set is validated before anything touches the disk.
void save_embeddings(const EmbeddingSet& set, const std::filesystem::path& path,
                     bool require_complete = true);

/// Writes the CSV fallback plus a `<path>.classes` sidecar.
void save_embeddings_csv(const EmbeddingSet& set, const std::filesystem::path& path);

/// Row-wise unit normalization. Throws DegenerateError naming the first
/// zero-norm row.
EmbeddingSet l2_normalize(const EmbeddingSet& set);

std::vector<std::size_t> class_counts(const EmbeddingSet& set);

/// Keeps only the listed classes and relabels them 0..K-1 in list order.
EmbeddingSet filter_classes(const EmbeddingSet& set, std::span<const int> subset);
TextPrototypeSet filter_classes(const TextPrototypeSet& text, std::span<const int> subset);

/// Draws `spec.shots` rows per retained class. Each class c uses its own
/// xoshiro256** stream seeded with derive_seed(spec.seed, c); without
/// replacement the draw is a partial Fisher-Yates shuffle of the class's row
/// indices in ascending order. Output rows are grouped by class.
EmbeddingSet sample_few_shot(const EmbeddingSet& set, const SplitSpec& spec,
                             bool with_replacement);

/// Interprets a set holding exactly one row per class as text prototypes.
/// Rows that are not unit-norm within 1e-5 are normalized.
TextPrototypeSet text_prototypes_from(const EmbeddingSet& set);
TextPrototypeSet load_text_prototypes(const std::filesystem::path& path);
EmbeddingSet to_embedding_set(const TextPrototypeSet& text);

}  // namespace protomix
