#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nn.hpp"

namespace eager::embed {

// Frozen per-item embedding matrix (one row per dense item index). Serves as
// k-means input for code construction and as the contrastive distillation
// target. Rows are guaranteed finite with positive L2 norm.
struct EmbeddingMatrix {
  nn::Tensor matrix;  // N x d
  std::string source_tag;  // "file" | "cooc-svd" | "text-svd"

  int64_t items() const { return matrix.rows; }
  int64_t dim() const { return matrix.cols; }
};

// File format: header line "N d", then N rows. ".txt" rows are space
// separated decimals (doubles round-trip exactly); ".bin" rows are packed
// little-endian f32.
EmbeddingMatrix load_embeddings(const std::string& path, int64_t expected_n);
void save_embeddings(const EmbeddingMatrix& m, const std::string& path);

// Behavior embeddings: symmetric PPMI co-occurrence matrix over the training
// sequences (items within `window` positions co-occur, add-1 smoothing on
// observed pairs), factorized by rank-d truncated eigendecomposition.
// Isolated items receive a small deterministic noise row.
EmbeddingMatrix cooccurrence_behavior_embeddings(
    const std::vector<std::vector<int32_t>>& sequences, int64_t num_items,
    int64_t d, int64_t window, uint64_t seed);

// Semantic embeddings: TF-IDF over a hashed token vocabulary, rank-d
// truncated SVD (rows are U_d * Sigma_d). Items with empty text receive a
// small deterministic noise row.
EmbeddingMatrix text_semantic_embeddings(const std::vector<std::string>& item_texts,
                                         int64_t d, uint64_t seed);

// Hash-bucket count for the text vocabulary.
inline constexpr int64_t kHashedVocab = 4096;

}  // namespace eager::embed
