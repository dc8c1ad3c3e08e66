#include "codes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "error.hpp"
#include "io.hpp"
#include "rng.hpp"

namespace eager::codes {
namespace {

using Point = std::vector<double>;

double sq_dist(const Point& a, const Point& b) {
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    acc += d * d;
  }
  return acc;
}

struct Clustering {
  std::vector<std::vector<int64_t>> members;  // per cluster, item ids
  std::vector<Point> centroids;
};

// k-means++ seeding, Lloyd iterations, then a greedy capacity-constrained
// rebalance that moves points from the largest cluster to the smallest until
// sizes differ by at most one. Fully deterministic for a fixed seed.
Clustering balanced_kmeans(const std::vector<int64_t>& items,
                           const std::vector<Point>& points, int64_t k,
                           uint64_t seed) {
  const int64_t n = static_cast<int64_t>(items.size());
  Clustering out;

  if (k >= n) {
    // Split into singletons.
    out.members.resize(static_cast<size_t>(n));
    out.centroids.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) {
      out.members[static_cast<size_t>(i)] = {items[static_cast<size_t>(i)]};
      out.centroids[static_cast<size_t>(i)] = points[static_cast<size_t>(i)];
    }
    return out;
  }

  Rng rng(seed);

  // k-means++ seeding.
  std::vector<Point> centroids;
  centroids.reserve(static_cast<size_t>(k));
  std::vector<double> dist2(static_cast<size_t>(n), std::numeric_limits<double>::max());
  int64_t first = static_cast<int64_t>(rng.uniform_int(static_cast<uint64_t>(n)));
  centroids.push_back(points[static_cast<size_t>(first)]);
  while (static_cast<int64_t>(centroids.size()) < k) {
    double total = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      double d = sq_dist(points[static_cast<size_t>(i)], centroids.back());
      dist2[static_cast<size_t>(i)] = std::min(dist2[static_cast<size_t>(i)], d);
      total += dist2[static_cast<size_t>(i)];
    }
    int64_t chosen = -1;
    if (total <= 0.0) {
      // All remaining points coincide with a centroid; take the lowest
      // index that is not already exactly a centroid.
      for (int64_t i = 0; i < n && chosen < 0; ++i) {
        if (dist2[static_cast<size_t>(i)] > 0.0) chosen = i;
      }
      if (chosen < 0) chosen = static_cast<int64_t>(centroids.size()) % n;
    } else {
      double target = rng.uniform() * total;
      double acc = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        acc += dist2[static_cast<size_t>(i)];
        if (acc >= target) {
          chosen = i;
          break;
        }
      }
      if (chosen < 0) chosen = n - 1;
    }
    centroids.push_back(points[static_cast<size_t>(chosen)]);
  }

  // Lloyd iterations; assignment ties go to the lowest cluster index.
  std::vector<int64_t> assign(static_cast<size_t>(n), -1);
  for (int iter = 0; iter < 50; ++iter) {
    bool changed = false;
    for (int64_t i = 0; i < n; ++i) {
      int64_t best = 0;
      double best_d = sq_dist(points[static_cast<size_t>(i)], centroids[0]);
      for (int64_t c = 1; c < k; ++c) {
        double d = sq_dist(points[static_cast<size_t>(i)], centroids[static_cast<size_t>(c)]);
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      if (assign[static_cast<size_t>(i)] != best) {
        assign[static_cast<size_t>(i)] = best;
        changed = true;
      }
    }
    if (!changed && iter > 0) break;
    std::vector<Point> sums(static_cast<size_t>(k),
                            Point(points[0].size(), 0.0));
    std::vector<int64_t> counts(static_cast<size_t>(k), 0);
    for (int64_t i = 0; i < n; ++i) {
      int64_t c = assign[static_cast<size_t>(i)];
      ++counts[static_cast<size_t>(c)];
      for (size_t j = 0; j < points[0].size(); ++j) {
        sums[static_cast<size_t>(c)][j] += points[static_cast<size_t>(i)][j];
      }
    }
    for (int64_t c = 0; c < k; ++c) {
      if (counts[static_cast<size_t>(c)] == 0) continue;  // rebalance will fill it
      for (size_t j = 0; j < points[0].size(); ++j) {
        centroids[static_cast<size_t>(c)][j] =
            sums[static_cast<size_t>(c)][j] / static_cast<double>(counts[static_cast<size_t>(c)]);
      }
    }
  }

  std::vector<std::vector<int64_t>> members(static_cast<size_t>(k));  // local indices
  for (int64_t i = 0; i < n; ++i) {
    members[static_cast<size_t>(assign[static_cast<size_t>(i)])].push_back(i);
  }

  // Greedy rebalance: move the point farthest from the donor centroid to the
  // smallest cluster (nearest such cluster by centroid when several tie).
  auto cluster_size = [&](int64_t c) {
    return static_cast<int64_t>(members[static_cast<size_t>(c)].size());
  };
  while (true) {
    int64_t max_c = 0, min_c = 0;
    for (int64_t c = 1; c < k; ++c) {
      if (cluster_size(c) > cluster_size(max_c)) max_c = c;
      if (cluster_size(c) < cluster_size(min_c)) min_c = c;
    }
    if (cluster_size(max_c) - cluster_size(min_c) <= 1) break;

    auto& donor = members[static_cast<size_t>(max_c)];
    int64_t min_size = cluster_size(min_c);

    // Farthest point from the donor centroid, lowest local index on ties.
    size_t worst_at = 0;
    double worst_d = -1.0;
    for (size_t m = 0; m < donor.size(); ++m) {
      double d = sq_dist(points[static_cast<size_t>(donor[m])],
                         centroids[static_cast<size_t>(max_c)]);
      if (d > worst_d) {
        worst_d = d;
        worst_at = m;
      }
    }
    int64_t moving = donor[worst_at];

    // Nearest minimum-size cluster to the moving point.
    int64_t dest = -1;
    double dest_d = std::numeric_limits<double>::max();
    for (int64_t c = 0; c < k; ++c) {
      if (c == max_c || cluster_size(c) != min_size) continue;
      double d = sq_dist(points[static_cast<size_t>(moving)],
                         centroids[static_cast<size_t>(c)]);
      if (d < dest_d) {
        dest_d = d;
        dest = c;
      }
    }
    donor.erase(donor.begin() + static_cast<long>(worst_at));
    members[static_cast<size_t>(dest)].push_back(moving);
  }

  // Final centroids over the balanced membership.
  out.members.resize(static_cast<size_t>(k));
  out.centroids.assign(static_cast<size_t>(k), Point(points[0].size(), 0.0));
  for (int64_t c = 0; c < k; ++c) {
    auto& local = members[static_cast<size_t>(c)];
    std::sort(local.begin(), local.end());
    for (int64_t li : local) {
      out.members[static_cast<size_t>(c)].push_back(items[static_cast<size_t>(li)]);
      for (size_t j = 0; j < points[0].size(); ++j) {
        out.centroids[static_cast<size_t>(c)][j] += points[static_cast<size_t>(li)][j];
      }
    }
    for (size_t j = 0; j < points[0].size(); ++j) {
      out.centroids[static_cast<size_t>(c)][j] /= static_cast<double>(local.size());
    }
  }
  return out;
}

struct Builder {
  const nn::Tensor* matrix = nullptr;
  CodeTree* tree = nullptr;

  Point point_of(int64_t item) const {
    Point p(static_cast<size_t>(matrix->cols));
    for (int64_t j = 0; j < matrix->cols; ++j) p[static_cast<size_t>(j)] = matrix->at(item, j);
    return p;
  }

  void build(const std::vector<int64_t>& items, int32_t level, uint64_t seed,
             std::vector<int32_t>& prefix) {
    if (items.size() == 1) {
      // Chain the remaining levels with digit 0.
      for (int32_t lv = level; lv < tree->depth; ++lv) {
        tree->codes[static_cast<size_t>(items[0]) * tree->depth + lv] = 0;
      }
      return;
    }
    require(level < tree->depth, EAGER_ERR_INTERNAL,
            "code tree recursion exceeded uniform depth");

    std::vector<Point> points;
    points.reserve(items.size());
    for (int64_t item : items) points.push_back(point_of(item));
    int64_t k = std::min<int64_t>(tree->branch_k, static_cast<int64_t>(items.size()));
    std::vector<int64_t> local(items.size());
    for (size_t i = 0; i < items.size(); ++i) local[i] = static_cast<int64_t>(i);
    Clustering clustering = balanced_kmeans(local, points, k, seed);

    // Order children by centroid lexicographic comparison; ties by lowest
    // contained item index.
    std::vector<int64_t> order(clustering.members.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
    std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      const Point& ca = clustering.centroids[static_cast<size_t>(a)];
      const Point& cb = clustering.centroids[static_cast<size_t>(b)];
      for (size_t j = 0; j < ca.size(); ++j) {
        if (ca[j] != cb[j]) return ca[j] < cb[j];
      }
      int64_t ia = items[static_cast<size_t>(clustering.members[static_cast<size_t>(a)][0])];
      int64_t ib = items[static_cast<size_t>(clustering.members[static_cast<size_t>(b)][0])];
      return ia < ib;
    });

    for (size_t rank = 0; rank < order.size(); ++rank) {
      int64_t c = order[rank];
      std::vector<int64_t> child_items;
      child_items.reserve(clustering.members[static_cast<size_t>(c)].size());
      for (int64_t li : clustering.members[static_cast<size_t>(c)]) {
        child_items.push_back(items[static_cast<size_t>(li)]);
      }
      int32_t digit = static_cast<int32_t>(rank);
      for (int64_t item : child_items) {
        tree->codes[static_cast<size_t>(item) * tree->depth + level] = digit;
      }
      prefix.push_back(digit);
      tree->centroids.push_back({prefix, clustering.centroids[static_cast<size_t>(c)]});
      build(child_items, level + 1,
            derive_seed(seed, "child", static_cast<uint64_t>(digit)), prefix);
      prefix.pop_back();
    }
  }
};

void build_trie(CodeTree& tree) {
  tree.trie.clear();
  tree.trie.emplace_back();
  for (int64_t item = 0; item < tree.num_items; ++item) {
    int32_t node = 0;
    for (int32_t lv = 0; lv < tree.depth; ++lv) {
      int32_t digit = tree.code_digit(item, lv);
      auto it = tree.trie[static_cast<size_t>(node)].children.find(digit);
      if (it == tree.trie[static_cast<size_t>(node)].children.end()) {
        int32_t next = static_cast<int32_t>(tree.trie.size());
        tree.trie[static_cast<size_t>(node)].children.emplace(digit, next);
        tree.trie.emplace_back();
        node = next;
      } else {
        node = it->second;
      }
    }
    auto& leaf = tree.trie[static_cast<size_t>(node)];
    require(leaf.item < 0, EAGER_ERR_INTERNAL,
            "duplicate item code for items " + std::to_string(leaf.item) + " and " +
                std::to_string(item));
    leaf.item = item;
  }
}

int32_t uniform_depth(int64_t n, int32_t branch_k) {
  int32_t depth = 1;
  int64_t capacity = branch_k;
  while (capacity < n) {
    capacity *= branch_k;
    ++depth;
  }
  return depth;
}

}  // namespace

CodeTree build_code_tree(const embed::EmbeddingMatrix& embeddings, int32_t branch_k,
                         uint64_t seed, const std::string& stream_tag,
                         bool normalize_embeddings) {
  require(branch_k >= 2, EAGER_ERR_INVALID_ARG, "branch_k must be >= 2");
  require(embeddings.items() >= 1, EAGER_ERR_INVALID_ARG, "no items to index");
  require(embeddings.matrix.finite(), EAGER_ERR_NUMERIC,
          "embeddings contain non-finite values");

  CodeTree tree;
  tree.branch_k = branch_k;
  tree.num_items = embeddings.items();
  tree.depth = uniform_depth(tree.num_items, branch_k);
  tree.stream_tag = stream_tag;
  tree.seed = seed;
  tree.codes.assign(static_cast<size_t>(tree.num_items) * tree.depth, 0);

  nn::Tensor matrix = embeddings.matrix;
  if (normalize_embeddings) {
    for (int64_t i = 0; i < matrix.rows; ++i) {
      double norm = 0.0;
      for (int64_t j = 0; j < matrix.cols; ++j) norm += matrix.at(i, j) * matrix.at(i, j);
      norm = std::sqrt(norm);
      if (norm > 0.0) {
        for (int64_t j = 0; j < matrix.cols; ++j) matrix.at(i, j) /= norm;
      }
    }
  }

  Builder builder{&matrix, &tree};
  std::vector<int64_t> all(static_cast<size_t>(tree.num_items));
  for (int64_t i = 0; i < tree.num_items; ++i) all[static_cast<size_t>(i)] = i;
  std::vector<int32_t> prefix;
  builder.build(all, 0, derive_seed(seed, "codes:" + stream_tag), prefix);

  build_trie(tree);
  return tree;
}

ItemCode item_to_code(const CodeTree& tree, int64_t item) {
  require(item >= 0 && item < tree.num_items, EAGER_ERR_INVALID_ARG,
          "item index out of range: " + std::to_string(item));
  ItemCode code;
  code.digits.resize(static_cast<size_t>(tree.depth));
  for (int32_t lv = 0; lv < tree.depth; ++lv) {
    code.digits[static_cast<size_t>(lv)] = tree.code_digit(item, lv);
  }
  return code;
}

std::optional<int64_t> code_to_item(const CodeTree& tree, const ItemCode& code) {
  require(static_cast<int32_t>(code.digits.size()) == tree.depth, EAGER_ERR_INVALID_ARG,
          "code length must equal tree depth");
  int32_t node = 0;
  for (int32_t digit : code.digits) {
    const auto& children = tree.trie[static_cast<size_t>(node)].children;
    auto it = children.find(digit);
    if (it == children.end()) return std::nullopt;
    node = it->second;
  }
  int64_t item = tree.trie[static_cast<size_t>(node)].item;
  if (item < 0) return std::nullopt;
  return item;
}

std::vector<int32_t> valid_next_digits(const CodeTree& tree,
                                       const std::vector<int32_t>& prefix) {
  require(static_cast<int32_t>(prefix.size()) < tree.depth, EAGER_ERR_INVALID_ARG,
          "prefix must be shorter than tree depth");
  int32_t node = 0;
  for (int32_t digit : prefix) {
    const auto& children = tree.trie[static_cast<size_t>(node)].children;
    auto it = children.find(digit);
    if (it == children.end()) return {};
    node = it->second;
  }
  std::vector<int32_t> digits;
  digits.reserve(tree.trie[static_cast<size_t>(node)].children.size());
  for (const auto& [digit, child] : tree.trie[static_cast<size_t>(node)].children) {
    digits.push_back(digit);
  }
  return digits;
}

void save_code_tree(const CodeTree& tree, const std::string& path) {
  std::ostringstream ss;
  ss << tree.num_items << ' ' << tree.branch_k << ' ' << tree.depth << ' '
     << tree.stream_tag << ' ' << tree.seed << "\n";
  for (int64_t item = 0; item < tree.num_items; ++item) {
    ss << item;
    for (int32_t lv = 0; lv < tree.depth; ++lv) ss << ' ' << tree.code_digit(item, lv);
    ss << "\n";
  }
  write_text_file(path, ss.str());
}

CodeTree load_code_tree(const std::string& path) {
  auto lines = split(read_text_file(path), '\n');
  while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
  require(!lines.empty(), EAGER_ERR_PARSE, path + ": empty code file");
  auto header = split_ws(lines[0]);
  require(header.size() == 5, EAGER_ERR_PARSE,
          path + ": header must be 'N branch_k l stream_tag seed'");
  auto n = parse_int(header[0]);
  auto branch_k = parse_int(header[1]);
  auto depth = parse_int(header[2]);
  auto seed = parse_int(header[3 + 1]);
  require(n && branch_k && depth && seed && *n >= 1 && *branch_k >= 2 && *depth >= 1,
          EAGER_ERR_PARSE, path + ": bad header");
  require(static_cast<int64_t>(lines.size()) == *n + 1, EAGER_ERR_PARSE,
          path + ": expected " + std::to_string(*n) + " code rows");

  CodeTree tree;
  tree.num_items = *n;
  tree.branch_k = static_cast<int32_t>(*branch_k);
  tree.depth = static_cast<int32_t>(*depth);
  tree.stream_tag = header[3];
  tree.seed = static_cast<uint64_t>(*seed);
  tree.codes.assign(static_cast<size_t>(*n) * tree.depth, 0);
  for (int64_t i = 0; i < *n; ++i) {
    auto fields = split_ws(lines[static_cast<size_t>(i) + 1]);
    require(static_cast<int64_t>(fields.size()) == tree.depth + 1, EAGER_ERR_PARSE,
            path + ": bad code row " + std::to_string(i));
    auto item = parse_int(fields[0]);
    require(item && *item == i, EAGER_ERR_PARSE,
            path + ": code rows must be in item order");
    for (int32_t lv = 0; lv < tree.depth; ++lv) {
      auto digit = parse_int(fields[static_cast<size_t>(lv) + 1]);
      require(digit && *digit >= 0 && *digit < tree.branch_k, EAGER_ERR_PARSE,
              path + ": digit out of range in row " + std::to_string(i));
      tree.codes[static_cast<size_t>(i) * tree.depth + lv] = static_cast<int32_t>(*digit);
    }
  }
  build_trie(tree);
  return tree;
}

}  // namespace eager::codes
