#include "doctest.h"

#include <Eigen/Dense>

#include <cmath>
#include <cstdlib>
#include <set>

#include "core/embed.hpp"
#include "core/error.hpp"
#include "core/io.hpp"
#include "core/rng.hpp"
#include "helpers.hpp"

using namespace eager;
using namespace eager::embed;

namespace {

// Quiet the noise-row warnings for the whole binary.
struct SilenceLogs {
  SilenceLogs() { setenv("EAGER_LOG", "0", 0); }
} silence_logs;

double row_dot(const nn::Tensor& m, int64_t a, int64_t b) {
  double acc = 0.0;
  for (int64_t j = 0; j < m.cols; ++j) acc += m.at(a, j) * m.at(b, j);
  return acc;
}

double row_cosine(const nn::Tensor& m, int64_t a, int64_t b) {
  return row_dot(m, a, b) / std::sqrt(row_dot(m, a, a) * row_dot(m, b, b));
}

// Reference PPMI with the same counting rules (window pairs, add-1 on
// observed counts), built densely and independently.
Eigen::MatrixXd oracle_ppmi(const std::vector<std::vector<int32_t>>& seqs, int64_t n,
                            int64_t window) {
  Eigen::MatrixXd counts = Eigen::MatrixXd::Zero(n, n);
  for (const auto& seq : seqs) {
    for (size_t i = 0; i < seq.size(); ++i) {
      for (size_t j = i + 1; j < std::min(seq.size(), i + static_cast<size_t>(window) + 1);
           ++j) {
        counts(seq[i], seq[j]) += 1.0;
        counts(seq[j], seq[i]) += 1.0;
      }
    }
  }
  double total = 0.0;
  Eigen::VectorXd row_sum = Eigen::VectorXd::Zero(n);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      if (counts(i, j) > 0.0) {
        counts(i, j) += 1.0;
        row_sum(i) += counts(i, j);
        total += counts(i, j);
      }
    }
  }
  Eigen::MatrixXd ppmi = Eigen::MatrixXd::Zero(n, n);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      if (counts(i, j) > 0.0) {
        ppmi(i, j) = std::max(0.0, std::log(counts(i, j) * total /
                                            (row_sum(i) * row_sum(j))));
      }
    }
  }
  return ppmi;
}

}  // namespace

TEST_CASE("load_embeddings reads a text file with header") {
  TempDir dir;
  auto path = dir.write("e.txt", "3 2\n1 2\n3 4\n5 6\n");
  auto m = load_embeddings(path, 3);
  CHECK(m.items() == 3);
  CHECK(m.dim() == 2);
  CHECK(m.matrix.at(2, 1) == 6.0);
  CHECK(m.source_tag == "file");
}

TEST_CASE("load_embeddings rejects a row-count mismatch with the dataset") {
  TempDir dir;
  auto path = dir.write("e.txt", "5 2\n1 1\n1 1\n1 1\n1 1\n1 1\n");
  try {
    load_embeddings(path, 6);
    FAIL("expected shape error");
  } catch (const Error& e) {
    CHECK(e.status() == EAGER_ERR_SHAPE);
  }
}

TEST_CASE("load_embeddings rejects non-finite and zero-norm rows") {
  TempDir dir;
  CHECK_THROWS_AS(load_embeddings(dir.write("a.txt", "1 2\nnan 1\n"), 1), Error);
  CHECK_THROWS_AS(load_embeddings(dir.write("b.txt", "1 2\n0 0\n"), 1), Error);
}

TEST_CASE("text embedding save/load round-trips doubles exactly") {
  TempDir dir;
  Rng rng(4);
  EmbeddingMatrix m;
  m.source_tag = "file";
  m.matrix = nn::Tensor(7, 5);
  for (auto& x : m.matrix.v) x = rng.normal() * std::pow(10.0, rng.uniform(-8, 8));
  auto path = dir.file("round.txt");
  save_embeddings(m, path);
  auto back = load_embeddings(path, 7);
  for (int64_t i = 0; i < m.matrix.size(); ++i) {
    CHECK(back.matrix.v[static_cast<size_t>(i)] == m.matrix.v[static_cast<size_t>(i)]);
  }
}

TEST_CASE("binary embedding files are stable across a save/load cycle") {
  TempDir dir;
  Rng rng(9);
  EmbeddingMatrix m;
  m.source_tag = "file";
  m.matrix = nn::Tensor(4, 3);
  for (auto& x : m.matrix.v) x = static_cast<float>(rng.normal());
  auto p1 = dir.file("a.bin");
  auto p2 = dir.file("b.bin");
  save_embeddings(m, p1);
  auto back = load_embeddings(p1, 4);
  save_embeddings(back, p2);
  CHECK(read_binary_file(p1) == read_binary_file(p2));
}

TEST_CASE("always-adjacent items have the highest cosine similarity") {
  Rng rng(17);
  const int64_t n = 20;
  std::vector<std::vector<int32_t>> seqs;
  for (int u = 0; u < 60; ++u) {
    std::vector<int32_t> seq;
    for (int t = 0; t < 8; ++t) {
      if (t % 4 == 0) {
        seq.push_back(0);  // items 0 and 1 always adjacent
        seq.push_back(1);
        ++t;
      } else {
        seq.push_back(static_cast<int32_t>(2 + rng.uniform_int(n - 2)));
      }
    }
    seqs.push_back(seq);
  }
  auto m = cooccurrence_behavior_embeddings(seqs, n, 8, 2, 99);
  double target = row_cosine(m.matrix, 0, 1);
  for (int64_t a = 0; a < n; ++a) {
    for (int64_t b = a + 1; b < n; ++b) {
      if (a == 0 && b == 1) continue;
      CHECK(row_cosine(m.matrix, a, b) <= target + 1e-9);
    }
  }
}

TEST_CASE("full-rank factorization reconstructs a PSD PPMI matrix") {
  // Repetition-heavy pairs give constant 2x2 PPMI blocks, which are PSD;
  // verified with the oracle eigensolver before relying on it.
  std::vector<std::vector<int32_t>> seqs;
  for (int rep = 0; rep < 30; ++rep) {
    for (int32_t p = 0; p < 4; ++p) {
      int32_t a = 2 * p, b = 2 * p + 1;
      seqs.push_back({a, a, b, b});
    }
  }
  const int64_t n = 8;
  Eigen::MatrixXd ppmi = oracle_ppmi(seqs, n, 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(ppmi);
  REQUIRE(es.eigenvalues().minCoeff() > -1e-12);

  auto m = cooccurrence_behavior_embeddings(seqs, n, n, 1, 5);
  double err = 0.0, norm = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < n; ++j) {
      double rec = row_dot(m.matrix, i, j);
      err += (rec - ppmi(i, j)) * (rec - ppmi(i, j));
      norm += ppmi(i, j) * ppmi(i, j);
    }
  }
  CHECK(std::sqrt(err / norm) < 1e-6);
}

TEST_CASE("behavior embeddings match a dense SVD oracle on a small corpus") {
  Rng rng(23);
  const int64_t n = 40;
  std::vector<std::vector<int32_t>> seqs;
  for (int u = 0; u < 50; ++u) {
    std::vector<int32_t> seq;
    for (int t = 0; t < 10; ++t) {
      seq.push_back(static_cast<int32_t>(rng.uniform_int(n)));
    }
    seqs.push_back(seq);
  }
  const int64_t d = 6;
  auto m = cooccurrence_behavior_embeddings(seqs, n, d, 3, 7);

  Eigen::MatrixXd ppmi = oracle_ppmi(seqs, n, 3);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(ppmi, Eigen::ComputeThinU | Eigen::ComputeThinV);
  // Compare the rank-d PSD reconstructions (sign-free).
  Eigen::MatrixXd x(n, d);
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j < d; ++j) x(i, j) = m.matrix.at(i, j);
  }
  Eigen::MatrixXd mine = x * x.transpose();
  // The oracle keeps components whose (symmetric-matrix) eigenvalue is
  // positive: sign(lambda) = u . v for each singular triplet.
  Eigen::MatrixXd oracle = Eigen::MatrixXd::Zero(n, n);
  int64_t kept = 0;
  for (int64_t c = 0; c < svd.singularValues().size() && kept < d; ++c) {
    double sign = svd.matrixU().col(c).dot(svd.matrixV().col(c));
    if (sign <= 0.0) continue;  // negative eigenvalue, clipped by the factorization
    oracle += svd.singularValues()(c) * svd.matrixU().col(c) *
              svd.matrixU().col(c).transpose();
    ++kept;
  }
  double err = (mine - oracle).norm() / std::max(1e-12, oracle.norm());
  CHECK(err < 1e-8);
}

TEST_CASE("behavior embeddings ignore user order and are deterministic") {
  std::vector<std::vector<int32_t>> seqs = {{0, 1, 2}, {2, 3, 0}, {3, 1, 0}};
  std::vector<std::vector<int32_t>> shuffled = {{3, 1, 0}, {0, 1, 2}, {2, 3, 0}};
  auto a = cooccurrence_behavior_embeddings(seqs, 4, 3, 2, 11);
  auto b = cooccurrence_behavior_embeddings(shuffled, 4, 3, 2, 11);
  auto c = cooccurrence_behavior_embeddings(seqs, 4, 3, 2, 11);
  for (int64_t i = 0; i < a.matrix.size(); ++i) {
    CHECK(a.matrix.v[static_cast<size_t>(i)] == b.matrix.v[static_cast<size_t>(i)]);
    CHECK(a.matrix.v[static_cast<size_t>(i)] == c.matrix.v[static_cast<size_t>(i)]);
  }
}

TEST_CASE("isolated items get deterministic noise rows") {
  std::vector<std::vector<int32_t>> seqs = {{0, 1}, {0, 1}, {1, 0}};
  auto m = cooccurrence_behavior_embeddings(seqs, 3, 2, 1, 13);
  CHECK(row_dot(m.matrix, 2, 2) > 0.0);
  CHECK(std::sqrt(row_dot(m.matrix, 2, 2)) < 0.1);
  auto again = cooccurrence_behavior_embeddings(seqs, 3, 2, 1, 13);
  CHECK(m.matrix.at(2, 0) == again.matrix.at(2, 0));
}

TEST_CASE("embedding dim larger than the catalog is rejected") {
  std::vector<std::vector<int32_t>> seqs = {{0, 1}, {1, 0}};
  CHECK_THROWS_AS(cooccurrence_behavior_embeddings(seqs, 2, 3, 1, 1), Error);
}

TEST_CASE("identical texts produce identical embedding rows") {
  std::vector<std::string> texts = {"red lipstick gloss", "red lipstick gloss",
                                    "running shoes"};
  auto m = text_semantic_embeddings(texts, 2, 3);
  for (int64_t j = 0; j < m.dim(); ++j) {
    CHECK(m.matrix.at(0, j) == doctest::Approx(m.matrix.at(1, j)).epsilon(1e-9));
  }
}

TEST_CASE("disjoint vocabularies give near-orthogonal embeddings") {
  std::vector<std::string> texts = {"alpha beta gamma", "delta epsilon zeta",
                                    "eta theta iota", "kappa lambda mu"};
  auto m = text_semantic_embeddings(texts, 4, 5);
  for (int64_t a = 0; a < 4; ++a) {
    for (int64_t b = a + 1; b < 4; ++b) {
      CHECK(std::abs(row_dot(m.matrix, a, b)) < 1e-9);
    }
  }
}

TEST_CASE("text embeddings match a dense SVD oracle up to sign") {
  Rng rng(31);
  const int64_t n = 30;
  const std::vector<std::string> words = {"lip",  "skin", "hair", "nail", "bath",
                                          "rose", "mint", "kit",  "gel",  "wax"};
  std::vector<std::string> texts;
  for (int64_t i = 0; i < n; ++i) {
    std::string t;
    int len = 3 + static_cast<int>(rng.uniform_int(5));
    for (int w = 0; w < len; ++w) {
      t += words[rng.uniform_int(words.size())] + " ";
    }
    texts.push_back(t);
  }
  const int64_t d = 8;
  auto m = text_semantic_embeddings(texts, d, 17);

  // Independent TF-IDF reconstruction with the same published hashing rule.
  auto fnv1a = [](const std::string& s) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
      h ^= static_cast<unsigned char>(c);
      h *= 0x100000001b3ULL;
    }
    return h;
  };
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, kHashedVocab);
  std::vector<double> df(static_cast<size_t>(kHashedVocab), 0.0);
  for (int64_t i = 0; i < n; ++i) {
    std::set<int64_t> in_doc;
    std::string token;
    auto flush = [&]() {
      if (token.empty()) return;
      int64_t bucket = static_cast<int64_t>(fnv1a(token) % kHashedVocab);
      a(i, bucket) += 1.0;
      in_doc.insert(bucket);
      token.clear();
    };
    for (char c : texts[static_cast<size_t>(i)]) {
      if (std::isalnum(static_cast<unsigned char>(c))) {
        token.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      } else {
        flush();
      }
    }
    flush();
    for (int64_t bucket : in_doc) df[static_cast<size_t>(bucket)] += 1.0;
  }
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t b = 0; b < kHashedVocab; ++b) {
      if (a(i, b) > 0.0) {
        a(i, b) *= std::log((1.0 + n) / (1.0 + df[static_cast<size_t>(b)])) + 1.0;
      }
    }
  }
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeThinU);
  for (int64_t j = 0; j < d; ++j) {
    double sigma = svd.singularValues()(j);
    // Component match up to sign.
    double same = 0.0, flipped = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      double oracle = svd.matrixU()(i, j) * sigma;
      same += std::abs(m.matrix.at(i, j) - oracle);
      flipped += std::abs(m.matrix.at(i, j) + oracle);
    }
    CHECK(std::min(same, flipped) / n < 1e-8);
  }
}

TEST_CASE("all-empty text corpus is an error, single empty text is noise") {
  CHECK_THROWS_AS(text_semantic_embeddings({"", "", ""}, 1, 1), Error);
  auto m = text_semantic_embeddings({"soap bar", "", "soap dish"}, 2, 21);
  CHECK(row_dot(m.matrix, 1, 1) > 0.0);
  CHECK(std::sqrt(row_dot(m.matrix, 1, 1)) < 0.1);
}

TEST_CASE("subspace iteration path resolves paired structure at scale") {
  // 2100 items force the sparse iterative solver. Items pair up; pair i
  // occurs i+2 times, so rarer pairs carry larger PPMI weight and the top
  // eigenpairs belong to the rarest pairs.
  const int64_t n = 2100;
  std::vector<std::vector<int32_t>> seqs;
  for (int64_t p = 0; p < n / 2; ++p) {
    for (int64_t rep = 0; rep < p + 2; ++rep) {
      seqs.push_back({static_cast<int32_t>(2 * p), static_cast<int32_t>(2 * p + 1)});
    }
  }
  const int64_t d = 8;
  auto m = cooccurrence_behavior_embeddings(seqs, n, d, 1, 3);
  // The rarest pairs (lowest p) dominate; their two rows must coincide and
  // carry real mass.
  for (int64_t p = 0; p < 4; ++p) {
    int64_t a = 2 * p, b = 2 * p + 1;
    double na = std::sqrt(row_dot(m.matrix, a, a));
    REQUIRE(na > 0.5);
    double diff = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      diff += (m.matrix.at(a, j) - m.matrix.at(b, j)) * (m.matrix.at(a, j) - m.matrix.at(b, j));
    }
    CHECK(std::sqrt(diff) / na < 1e-6);
  }
}
