#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "embed.hpp"

namespace eager::codes {

struct ItemCode {
  std::vector<int32_t> digits;  // length = tree depth, digits in [0, branch_k)
};

// Per-stream item identifier index built by balanced hierarchical k-means.
// Codes have uniform length l = ceil(log_branch_k(N)) (minimum 1); item and
// full code are in bijection; every internal split is balanced to +/- 1.
struct CodeTree {
  int32_t branch_k = 0;
  int32_t depth = 0;
  int64_t num_items = 0;
  std::string stream_tag;
  uint64_t seed = 0;
  std::vector<int32_t> codes;  // num_items x depth, row-major

  struct TrieNode {
    std::map<int32_t, int32_t> children;
    int64_t item = -1;  // set on full-depth leaves
  };
  std::vector<TrieNode> trie;  // node 0 is the root

  // Cluster centers by node, kept for diagnostics.
  struct CentroidRecord {
    std::vector<int32_t> prefix;  // digits leading to the cluster
    std::vector<double> center;
  };
  std::vector<CentroidRecord> centroids;

  int32_t code_digit(int64_t item, int32_t level) const {
    return codes[static_cast<size_t>(item) * depth + level];
  }
};

CodeTree build_code_tree(const embed::EmbeddingMatrix& embeddings,
                         int32_t branch_k, uint64_t seed,
                         const std::string& stream_tag,
                         bool normalize_embeddings = false);

ItemCode item_to_code(const CodeTree& tree, int64_t item);

// Trie walk; std::nullopt for code paths that hold no item.
std::optional<int64_t> code_to_item(const CodeTree& tree, const ItemCode& code);

// Digits with at least one item under prefix+digit. Prefixes that are not in
// the trie yield an empty set; prefix length must be < depth.
std::vector<int32_t> valid_next_digits(const CodeTree& tree,
                                       const std::vector<int32_t>& prefix);

// Code file: header "N branch_k l stream_tag seed", then one line per item
// "item_index d1 ... dl".
void save_code_tree(const CodeTree& tree, const std::string& path);
CodeTree load_code_tree(const std::string& path);

}  // namespace eager::codes
