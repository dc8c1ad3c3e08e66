#include "rng.hpp"

#include <unordered_set>

namespace eager {

std::vector<size_t> Rng::sample_without_replacement(size_t n, size_t k) {
  std::vector<size_t> out;
  if (k == 0 || n == 0) return out;
  if (k >= n) {
    out.resize(n);
    for (size_t i = 0; i < n; ++i) out[i] = i;
    shuffle(out);
    return out;
  }
  out.reserve(k);
  if (k * 3 >= n) {
    // Dense case: shuffle a full index vector and take a prefix.
    std::vector<size_t> all(n);
    for (size_t i = 0; i < n; ++i) all[i] = i;
    shuffle(all);
    out.assign(all.begin(), all.begin() + static_cast<long>(k));
    return out;
  }
  std::unordered_set<size_t> seen;
  while (out.size() < k) {
    size_t v = static_cast<size_t>(uniform_int(n));
    if (seen.insert(v).second) out.push_back(v);
  }
  return out;
}

}  // namespace eager
