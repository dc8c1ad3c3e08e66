#include "embed.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <map>
#include <sstream>

#include "error.hpp"
#include "io.hpp"
#include "log.hpp"

namespace eager::embed {
namespace {

// Past this size the dense eigensolver is replaced by seeded subspace
// iteration on the implicit operator.
constexpr int64_t kDenseLimit = 2048;

struct EigenPairs {
  Eigen::MatrixXd vectors;  // n x r, columns are eigenvectors
  Eigen::VectorXd values;   // r, descending
};

void canonicalize_signs(Eigen::MatrixXd& vectors) {
  for (Eigen::Index c = 0; c < vectors.cols(); ++c) {
    Eigen::Index imax = 0;
    double best = 0.0;
    for (Eigen::Index r = 0; r < vectors.rows(); ++r) {
      double a = std::abs(vectors(r, c));
      if (a > best) {
        best = a;
        imax = r;
      }
    }
    if (vectors(imax, c) < 0.0) vectors.col(c) = -vectors.col(c);
  }
}

// Top-d eigenpairs of a dense symmetric matrix, eigenvalues descending.
EigenPairs dense_top_eigen(const Eigen::MatrixXd& m, int64_t d) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(m);
  require(solver.info() == Eigen::Success, EAGER_ERR_NUMERIC,
          "eigendecomposition failed");
  Eigen::Index n = m.rows();
  EigenPairs out;
  out.vectors.resize(n, d);
  out.values.resize(d);
  for (int64_t i = 0; i < d; ++i) {
    // SelfAdjointEigenSolver sorts ascending.
    out.vectors.col(i) = solver.eigenvectors().col(n - 1 - i);
    out.values(i) = solver.eigenvalues()(n - 1 - i);
  }
  canonicalize_signs(out.vectors);
  return out;
}

using SymOp = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

// Seeded randomized subspace iteration for the top-d eigenpairs (by
// magnitude) of a symmetric operator. Deterministic for a fixed seed.
EigenPairs subspace_top_eigen(const SymOp& op, int64_t n, int64_t d, uint64_t seed) {
  const int64_t r = std::min<int64_t>(n, d + 8);
  Rng rng(derive_seed(seed, "subspace-iteration"));
  Eigen::MatrixXd q(n, r);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < r; ++j) q(i, j) = rng.normal();
  }
  q = Eigen::HouseholderQR<Eigen::MatrixXd>(q).householderQ() *
      Eigen::MatrixXd::Identity(n, r);

  Eigen::VectorXd prev = Eigen::VectorXd::Zero(r);
  Eigen::MatrixXd y(n, r);
  for (int iter = 0; iter < 300; ++iter) {
    for (int64_t j = 0; j < r; ++j) y.col(j) = op(q.col(j));
    q = Eigen::HouseholderQR<Eigen::MatrixXd>(y).householderQ() *
        Eigen::MatrixXd::Identity(n, r);
    Eigen::MatrixXd b(r, r);
    for (int64_t j = 0; j < r; ++j) b.col(j) = q.transpose() * op(q.col(j));
    b = 0.5 * (b + b.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> small(b);
    Eigen::VectorXd ritz = small.eigenvalues();
    double delta = (ritz - prev).norm();
    double scale = std::max(1.0, ritz.norm());
    prev = ritz;
    if (delta / scale < 1e-12 && iter >= 4) break;
  }

  Eigen::MatrixXd b(r, r);
  for (int64_t j = 0; j < r; ++j) b.col(j) = q.transpose() * op(q.col(j));
  b = 0.5 * (b + b.transpose());
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> small(b);

  // Order Ritz pairs by eigenvalue descending and keep d.
  std::vector<int64_t> order(r);
  for (int64_t i = 0; i < r; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t bidx) {
    return small.eigenvalues()(a) > small.eigenvalues()(bidx);
  });
  EigenPairs out;
  out.vectors.resize(n, d);
  out.values.resize(d);
  for (int64_t i = 0; i < d; ++i) {
    out.vectors.col(i) = q * small.eigenvectors().col(order[i]);
    out.values(i) = small.eigenvalues()(order[i]);
  }
  canonicalize_signs(out.vectors);
  return out;
}

// Embedding rows X = U_d * sqrt(max(lambda_d, 0)); negative eigenvalues
// contribute nothing.
nn::Tensor factor_rows(const EigenPairs& pairs) {
  nn::Tensor out(pairs.vectors.rows(), pairs.values.size());
  for (int64_t j = 0; j < pairs.values.size(); ++j) {
    double s = std::sqrt(std::max(0.0, pairs.values(j)));
    for (int64_t i = 0; i < pairs.vectors.rows(); ++i) {
      out.at(i, j) = pairs.vectors(i, j) * s;
    }
  }
  return out;
}

void noise_fill_empty_rows(nn::Tensor& m, const std::vector<char>& is_empty,
                           uint64_t seed, const char* why) {
  for (int64_t i = 0; i < m.rows; ++i) {
    double norm = 0.0;
    for (int64_t j = 0; j < m.cols; ++j) norm += m.at(i, j) * m.at(i, j);
    bool empty = i < static_cast<int64_t>(is_empty.size()) && is_empty[i];
    if (!empty && norm > 1e-24) continue;
    Rng rng(derive_seed(seed, "noise-row", static_cast<uint64_t>(i)));
    for (int64_t j = 0; j < m.cols; ++j) m.at(i, j) = 1e-3 * rng.normal();
    log_warn(std::string("embedding row ") + std::to_string(i) + " filled with noise (" +
             why + ")");
  }
}

uint64_t fnv1a(std::string_view s) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void validate_matrix(const nn::Tensor& m, const std::string& what) {
  require(m.finite(), EAGER_ERR_NUMERIC, what + ": non-finite values");
  for (int64_t i = 0; i < m.rows; ++i) {
    double norm = 0.0;
    for (int64_t j = 0; j < m.cols; ++j) norm += m.at(i, j) * m.at(i, j);
    require(norm > 0.0, EAGER_ERR_NUMERIC,
            what + ": row " + std::to_string(i) + " has zero norm");
  }
}

}  // namespace

EmbeddingMatrix load_embeddings(const std::string& path, int64_t expected_n) {
  EmbeddingMatrix out;
  out.source_tag = "file";
  if (ends_with(path, ".bin")) {
    auto bytes = read_binary_file(path);
    size_t header_end = 0;
    while (header_end < bytes.size() && bytes[header_end] != '\n') ++header_end;
    require(header_end < bytes.size(), EAGER_ERR_PARSE, path + ": missing header line");
    std::string header(reinterpret_cast<const char*>(bytes.data()), header_end);
    auto fields = split_ws(header);
    require(fields.size() == 2, EAGER_ERR_PARSE, path + ": header must be 'N d'");
    auto n = parse_int(fields[0]);
    auto d = parse_int(fields[1]);
    require(n && d && *n >= 1 && *d >= 1, EAGER_ERR_PARSE, path + ": bad header");
    size_t need = static_cast<size_t>(*n) * static_cast<size_t>(*d) * sizeof(float);
    require(bytes.size() - header_end - 1 == need, EAGER_ERR_PARSE,
            path + ": payload size does not match header");
    out.matrix = nn::Tensor(*n, *d);
    const uint8_t* p = bytes.data() + header_end + 1;
    for (int64_t i = 0; i < out.matrix.size(); ++i) {
      float f;
      std::memcpy(&f, p + static_cast<size_t>(i) * sizeof(float), sizeof(float));
      out.matrix.v[static_cast<size_t>(i)] = static_cast<double>(f);
    }
  } else {
    std::string text = read_text_file(path);
    auto lines = split(text, '\n');
    while (!lines.empty() && trim(lines.back()).empty()) lines.pop_back();
    require(!lines.empty(), EAGER_ERR_PARSE, path + ": empty embedding file");
    auto header = split_ws(lines[0]);
    require(header.size() == 2, EAGER_ERR_PARSE, path + ": header must be 'N d'");
    auto n = parse_int(header[0]);
    auto d = parse_int(header[1]);
    require(n && d && *n >= 1 && *d >= 1, EAGER_ERR_PARSE, path + ": bad header");
    require(static_cast<int64_t>(lines.size()) == *n + 1, EAGER_ERR_PARSE,
            path + ": expected " + std::to_string(*n) + " rows");
    out.matrix = nn::Tensor(*n, *d);
    for (int64_t i = 0; i < *n; ++i) {
      auto fields = split_ws(lines[static_cast<size_t>(i) + 1]);
      require(static_cast<int64_t>(fields.size()) == *d, EAGER_ERR_PARSE,
              path + ": row " + std::to_string(i) + " has wrong width");
      for (int64_t j = 0; j < *d; ++j) {
        auto v = parse_double(fields[static_cast<size_t>(j)]);
        require(v.has_value(), EAGER_ERR_PARSE,
                path + ": bad number in row " + std::to_string(i));
        out.matrix.at(i, j) = *v;
      }
    }
  }
  if (expected_n >= 0) {
    require(out.matrix.rows == expected_n, EAGER_ERR_SHAPE,
            path + ": has " + std::to_string(out.matrix.rows) + " rows, dataset has " +
                std::to_string(expected_n) + " items");
  }
  validate_matrix(out.matrix, path);
  return out;
}

void save_embeddings(const EmbeddingMatrix& m, const std::string& path) {
  if (ends_with(path, ".bin")) {
    std::string header =
        std::to_string(m.matrix.rows) + " " + std::to_string(m.matrix.cols) + "\n";
    std::vector<uint8_t> bytes(header.begin(), header.end());
    size_t payload_at = bytes.size();
    bytes.resize(payload_at + static_cast<size_t>(m.matrix.size()) * sizeof(float));
    for (int64_t i = 0; i < m.matrix.size(); ++i) {
      float f = static_cast<float>(m.matrix.v[static_cast<size_t>(i)]);
      std::memcpy(bytes.data() + payload_at + static_cast<size_t>(i) * sizeof(float), &f,
                  sizeof(float));
    }
    write_binary_file(path, bytes.data(), bytes.size());
    return;
  }
  std::ostringstream ss;
  ss << m.matrix.rows << " " << m.matrix.cols << "\n";
  for (int64_t i = 0; i < m.matrix.rows; ++i) {
    for (int64_t j = 0; j < m.matrix.cols; ++j) {
      if (j) ss << ' ';
      ss << format_double_exact(m.matrix.at(i, j));
    }
    ss << "\n";
  }
  write_text_file(path, ss.str());
}

EmbeddingMatrix cooccurrence_behavior_embeddings(
    const std::vector<std::vector<int32_t>>& sequences, int64_t num_items,
    int64_t d, int64_t window, uint64_t seed) {
  require(num_items >= 1, EAGER_ERR_INVALID_ARG, "no items");
  require(d >= 1 && d <= num_items, EAGER_ERR_INVALID_ARG,
          "embedding dim must satisfy 1 <= d <= N");
  require(window >= 1, EAGER_ERR_INVALID_ARG, "window must be >= 1");

  // Observed co-occurrence counts with add-1 smoothing.
  std::vector<std::map<int32_t, double>> counts(static_cast<size_t>(num_items));
  for (const auto& seq : sequences) {
    for (size_t i = 0; i < seq.size(); ++i) {
      size_t hi = std::min(seq.size(), i + static_cast<size_t>(window) + 1);
      for (size_t j = i + 1; j < hi; ++j) {
        counts[static_cast<size_t>(seq[i])][seq[j]] += 1.0;
        counts[static_cast<size_t>(seq[j])][seq[i]] += 1.0;
      }
    }
  }
  std::vector<double> row_sum(static_cast<size_t>(num_items), 0.0);
  double total = 0.0;
  std::vector<char> isolated(static_cast<size_t>(num_items), 0);
  for (int64_t i = 0; i < num_items; ++i) {
    auto& row = counts[static_cast<size_t>(i)];
    if (row.empty()) {
      isolated[static_cast<size_t>(i)] = 1;
      continue;
    }
    for (auto& [j, c] : row) {
      c += 1.0;  // add-1 smoothing on observed pairs
      row_sum[static_cast<size_t>(i)] += c;
      total += c;
    }
  }
  require(total > 0.0, EAGER_ERR_EMPTY_DATASET, "no co-occurrences in corpus");

  auto ppmi = [&](int64_t i, int32_t j, double c) {
    double pmi = std::log(c * total /
                          (row_sum[static_cast<size_t>(i)] * row_sum[static_cast<size_t>(j)]));
    return std::max(0.0, pmi);
  };

  EigenPairs pairs;
  if (num_items <= kDenseLimit) {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(num_items, num_items);
    for (int64_t i = 0; i < num_items; ++i) {
      for (const auto& [j, c] : counts[static_cast<size_t>(i)]) {
        m(i, j) = ppmi(i, j, c);
      }
    }
    pairs = dense_top_eigen(m, d);
  } else {
    // CSR of the sparse PPMI matrix.
    std::vector<int64_t> offsets(static_cast<size_t>(num_items) + 1, 0);
    for (int64_t i = 0; i < num_items; ++i) {
      offsets[static_cast<size_t>(i) + 1] =
          offsets[static_cast<size_t>(i)] +
          static_cast<int64_t>(counts[static_cast<size_t>(i)].size());
    }
    std::vector<int32_t> cols(static_cast<size_t>(offsets.back()));
    std::vector<double> vals(static_cast<size_t>(offsets.back()));
    for (int64_t i = 0; i < num_items; ++i) {
      int64_t at = offsets[static_cast<size_t>(i)];
      for (const auto& [j, c] : counts[static_cast<size_t>(i)]) {
        cols[static_cast<size_t>(at)] = j;
        vals[static_cast<size_t>(at)] = ppmi(i, j, c);
        ++at;
      }
    }
    SymOp op = [&](const Eigen::VectorXd& x) {
      Eigen::VectorXd y = Eigen::VectorXd::Zero(num_items);
      for (int64_t i = 0; i < num_items; ++i) {
        double acc = 0.0;
        for (int64_t e = offsets[static_cast<size_t>(i)];
             e < offsets[static_cast<size_t>(i) + 1]; ++e) {
          acc += vals[static_cast<size_t>(e)] * x(cols[static_cast<size_t>(e)]);
        }
        y(i) = acc;
      }
      return y;
    };
    pairs = subspace_top_eigen(op, num_items, d, seed);
  }

  EmbeddingMatrix out;
  out.source_tag = "cooc-svd";
  out.matrix = factor_rows(pairs);
  noise_fill_empty_rows(out.matrix, isolated, seed, "item has no co-occurrences");
  validate_matrix(out.matrix, "behavior embeddings");
  return out;
}

EmbeddingMatrix text_semantic_embeddings(const std::vector<std::string>& item_texts,
                                         int64_t d, uint64_t seed) {
  int64_t n = static_cast<int64_t>(item_texts.size());
  require(n >= 1, EAGER_ERR_INVALID_ARG, "no items");
  require(d >= 1 && d <= n, EAGER_ERR_INVALID_ARG,
          "embedding dim must satisfy 1 <= d <= N");

  // Hashed bag of words, then TF-IDF.
  std::vector<std::map<int32_t, double>> tf(static_cast<size_t>(n));
  std::vector<double> df(static_cast<size_t>(kHashedVocab), 0.0);
  std::vector<char> empty_text(static_cast<size_t>(n), 0);
  bool any_token = false;
  for (int64_t i = 0; i < n; ++i) {
    const std::string& text = item_texts[static_cast<size_t>(i)];
    std::string token;
    auto flush = [&]() {
      if (token.empty()) return;
      int32_t bucket = static_cast<int32_t>(fnv1a(token) % kHashedVocab);
      tf[static_cast<size_t>(i)][bucket] += 1.0;
      token.clear();
    };
    for (char c : text) {
      if (std::isalnum(static_cast<unsigned char>(c))) {
        token.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      } else {
        flush();
      }
    }
    flush();
    if (tf[static_cast<size_t>(i)].empty()) {
      empty_text[static_cast<size_t>(i)] = 1;
    } else {
      any_token = true;
      for (const auto& [bucket, cnt] : tf[static_cast<size_t>(i)]) {
        df[static_cast<size_t>(bucket)] += 1.0;
      }
    }
  }
  require(any_token, EAGER_ERR_EMPTY_DATASET, "all item texts are empty");

  for (int64_t i = 0; i < n; ++i) {
    for (auto& [bucket, cnt] : tf[static_cast<size_t>(i)]) {
      double idf =
          std::log((1.0 + static_cast<double>(n)) / (1.0 + df[static_cast<size_t>(bucket)])) +
          1.0;
      cnt *= idf;
    }
  }

  // Gram matrix on the item side: G = A A^T, embeddings U_d Sigma_d.
  EigenPairs pairs;
  if (n <= kDenseLimit) {
    Eigen::MatrixXd g = Eigen::MatrixXd::Zero(n, n);
    for (int64_t i = 0; i < n; ++i) {
      for (int64_t j = i; j < n; ++j) {
        const auto& a = tf[static_cast<size_t>(i)];
        const auto& b = tf[static_cast<size_t>(j)];
        const auto& small = a.size() <= b.size() ? a : b;
        const auto& large = a.size() <= b.size() ? b : a;
        double dot = 0.0;
        for (const auto& [bucket, v] : small) {
          auto it = large.find(bucket);
          if (it != large.end()) dot += v * it->second;
        }
        g(i, j) = dot;
        g(j, i) = dot;
      }
    }
    pairs = dense_top_eigen(g, d);
  } else {
    SymOp op = [&](const Eigen::VectorXd& x) {
      // y = A (A^T x) via the hashed vocabulary.
      Eigen::VectorXd mid = Eigen::VectorXd::Zero(kHashedVocab);
      for (int64_t i = 0; i < n; ++i) {
        for (const auto& [bucket, v] : tf[static_cast<size_t>(i)]) {
          mid(bucket) += v * x(i);
        }
      }
      Eigen::VectorXd y = Eigen::VectorXd::Zero(n);
      for (int64_t i = 0; i < n; ++i) {
        double acc = 0.0;
        for (const auto& [bucket, v] : tf[static_cast<size_t>(i)]) {
          acc += v * mid(bucket);
        }
        y(i) = acc;
      }
      return y;
    };
    pairs = subspace_top_eigen(op, n, d, seed);
  }

  EmbeddingMatrix out;
  out.source_tag = "text-svd";
  out.matrix = factor_rows(pairs);
  noise_fill_empty_rows(out.matrix, empty_text, seed, "item text is empty");
  validate_matrix(out.matrix, "semantic embeddings");
  return out;
}

}  // namespace eager::embed
