#pragma once

/*
 * nn — minimal reverse-mode autodiff over row-major matrices, plus the
 * transformer building blocks the model needs: linear layers, multi-head
 * self/cross attention, layer norm, softmax cross-entropy, Adam with
 * linear warmup, and a central finite-difference gradient checker.
 *
 * Everything is double precision and single-threaded; given the same seed
 * a training run is bit-identical across invocations.
 *
 * A Tape owns the nodes of one forward pass. Parameters live outside the
 * tape in a ParamStore; backward() accumulates into Param::grad, so one
 * optimizer step can consume gradients from many per-example tapes.
 */

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rng.hpp"

namespace eager::nn {

struct Tensor {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<double> v;

  Tensor() = default;
  Tensor(int64_t r, int64_t c) : rows(r), cols(c), v(static_cast<size_t>(r * c), 0.0) {}

  double& at(int64_t r, int64_t c) { return v[static_cast<size_t>(r * cols + c)]; }
  double at(int64_t r, int64_t c) const { return v[static_cast<size_t>(r * cols + c)]; }
  int64_t size() const { return rows * cols; }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
  void fill(double x) { std::fill(v.begin(), v.end(), x); }
  bool finite() const;
};

struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
};

// Named parameter set with deterministic iteration order (registration
// order). Initialization draws from a stream derived from (seed, name), so
// values do not depend on registration order.
class ParamStore {
public:
  enum class Init { Zero, Normal };

  explicit ParamStore(uint64_t seed) : seed_(seed) {}

  Param& create(const std::string& name, int64_t rows, int64_t cols, Init init,
                double scale = 0.02);
  Param& get(const std::string& name);
  const Param& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Param*>& all() { return order_; }
  const std::vector<Param*>& all() const { return order_; }

  void zero_grads();
  int64_t total_size() const;
  uint64_t seed() const { return seed_; }

private:
  uint64_t seed_;
  std::vector<std::unique_ptr<Param>> params_;
  std::vector<Param*> order_;
};

struct Value {
  int32_t idx = -1;
  bool valid() const { return idx >= 0; }
};

class Tape {
public:
  // training=true enables dropout; rng must outlive the tape in that case.
  explicit Tape(bool training = false, Rng* rng = nullptr)
      : training_(training), rng_(rng) {}

  const Tensor& value(Value v) const { return nodes_[v.idx].value; }
  bool training() const { return training_; }

  Value constant(Tensor t);
  Value param(Param& p);

  Value matmul(Value a, Value b);
  Value add(Value a, Value b);                 // same shape
  Value sub(Value a, Value b);
  Value add_rowvec(Value a, Value bias);       // bias is [1, n]
  Value mul(Value a, Value b);                 // elementwise
  Value div(Value a, Value b);                 // elementwise
  Value scale(Value a, double c);
  Value add_const(Value a, const Tensor& c);   // additive mask
  Value relu(Value a);
  Value sigmoid(Value a);
  Value softplus(Value a);
  Value log(Value a);
  Value sqrt(Value a);
  Value transpose(Value a);
  Value softmax_rows(Value a);
  Value layer_norm(Value x, Value gain, Value bias, double eps = 1e-5);
  Value gather_rows(Value table, const std::vector<int32_t>& indices);
  Value concat_rows(const std::vector<Value>& parts);
  Value concat_cols(const std::vector<Value>& parts);
  Value slice_rows(Value a, int64_t start, int64_t len);
  Value slice_cols(Value a, int64_t start, int64_t len);
  Value mean_rows(Value a);                    // [m,d] -> [1,d]
  Value sum_all(Value a);                      // -> [1,1]
  Value mean_all(Value a);
  Value dropout(Value a, double p);            // identity when not training

  enum class Reduction { Mean, Sum };
  // -log softmax(logits)[target] reduced over rows; gradient is
  // (softmax - onehot) scaled by the reduction weight.
  Value cross_entropy(Value logits, const std::vector<int32_t>& targets,
                      Reduction reduction);

  // Elementwise Huber (delta = 1) of a - b, averaged over all elements.
  Value huber_mean(Value a, Value b);
  // 1 - cos(a, b) for two [1,d] (or same-shape) tensors.
  Value cosine_distance(Value a, Value b);

  void backward(Value loss);

private:
  struct Node {
    Tensor value;
    Tensor grad;
    std::function<void(Tape&, const Tensor&)> backward_fn;  // receives node grad
    bool needs_grad = false;
    Param* leaf = nullptr;
  };

  Value make(Tensor value, std::vector<int32_t> parents,
             std::function<void(Tape&, const Tensor&)> backward_fn);
  Tensor& grad_of(int32_t idx) { return nodes_[idx].grad; }
  bool needs(int32_t idx) const { return nodes_[idx].needs_grad; }

  bool training_ = false;
  Rng* rng_ = nullptr;
  std::vector<Node> nodes_;
  std::vector<std::vector<int32_t>> parents_;
};

// Multi-head scaled dot-product attention over sequences packed in rows.
// q_in is [batch * q_len, dim]; kv_in is [kv_batch * kv_len, dim] with
// kv_batch either equal to batch or 1 (shared across the batch, as when many
// beam hypotheses attend to one encoded history).
struct AttentionShape {
  int64_t batch = 1;
  int64_t q_len = 0;
  int64_t kv_len = 0;
  int64_t kv_batch = 1;
  int64_t heads = 1;
  bool causal = false;
};

struct AttentionWeights {
  Param* wq = nullptr;
  Param* bq = nullptr;
  Param* wk = nullptr;
  Param* bk = nullptr;
  Param* wv = nullptr;
  Param* bv = nullptr;
  Param* wo = nullptr;
  Param* bo = nullptr;
};

Value multi_head_attention(Tape& tape, Value q_in, Value kv_in,
                           const AttentionWeights& w, const AttentionShape& shape);

Value linear(Tape& tape, Value x, Param& w, Param& b);

// Plain (non-tape) numerics used at inference time.
void softmax_inplace(std::vector<double>& x);
std::vector<double> log_softmax(const std::vector<double>& x);

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t warmup_steps = 0;  // linear warmup; 0 disables
};

class Adam {
public:
  Adam(ParamStore& params, AdamConfig config);

  // Applies one update from the accumulated gradients. Throws on non-finite
  // gradients. Does not zero gradients.
  void step();

  int64_t step_count() const { return step_count_; }
  double effective_lr() const;
  const AdamConfig& config() const { return config_; }

private:
  ParamStore& params_;
  AdamConfig config_;
  int64_t step_count_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

struct FdIssue {
  std::string param;
  int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

struct FdReport {
  double max_rel_error = 0.0;
  int64_t coords_checked = 0;
  bool pass = false;
  FdIssue worst;
};

// Central finite differences against the tape gradient. build must
// reconstruct the same scalar loss on every call (any internal sampling
// must be frozen by the caller). Checks up to max_coords_per_param
// coordinates of each listed parameter.
FdReport finite_difference_check(const std::function<Value(Tape&)>& build,
                                 const std::vector<Param*>& params, double tol,
                                 int64_t max_coords_per_param, Rng& rng);

}  // namespace eager::nn
