#include "nn.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "error.hpp"

namespace eager::nn {
namespace {

// C += A * B
void addmm(Tensor& c, const Tensor& a, const Tensor& b) {
  const double* A = a.v.data();
  const double* B = b.v.data();
  double* C = c.v.data();
  for (int64_t i = 0; i < a.rows; ++i) {
    const double* Ai = A + i * a.cols;
    double* Ci = C + i * b.cols;
    for (int64_t k = 0; k < a.cols; ++k) {
      double aik = Ai[k];
      const double* Bk = B + k * b.cols;
      for (int64_t j = 0; j < b.cols; ++j) Ci[j] += aik * Bk[j];
    }
  }
}

// C += A * B^T
void addmm_nt(Tensor& c, const Tensor& a, const Tensor& b) {
  const double* A = a.v.data();
  const double* B = b.v.data();
  double* C = c.v.data();
  for (int64_t i = 0; i < a.rows; ++i) {
    const double* Ai = A + i * a.cols;
    double* Ci = C + i * b.rows;
    for (int64_t j = 0; j < b.rows; ++j) {
      const double* Bj = B + j * b.cols;
      double acc = 0.0;
      for (int64_t k = 0; k < a.cols; ++k) acc += Ai[k] * Bj[k];
      Ci[j] += acc;
    }
  }
}

// C += A^T * B
void addmm_tn(Tensor& c, const Tensor& a, const Tensor& b) {
  const double* A = a.v.data();
  const double* B = b.v.data();
  double* C = c.v.data();
  for (int64_t i = 0; i < a.rows; ++i) {
    const double* Ai = A + i * a.cols;
    const double* Bi = B + i * b.cols;
    for (int64_t k = 0; k < a.cols; ++k) {
      double aik = Ai[k];
      double* Ck = C + k * b.cols;
      for (int64_t j = 0; j < b.cols; ++j) Ck[j] += aik * Bi[j];
    }
  }
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

bool Tensor::finite() const {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

Param& ParamStore::create(const std::string& name, int64_t rows, int64_t cols,
                          Init init, double scale) {
  require(!contains(name), EAGER_ERR_INVALID_ARG, "duplicate parameter: " + name);
  auto p = std::make_unique<Param>();
  p->name = name;
  p->value = Tensor(rows, cols);
  p->grad = Tensor(rows, cols);
  if (init == Init::Normal) {
    Rng rng(derive_seed(seed_, "param:" + name));
    for (auto& x : p->value.v) x = scale * rng.normal();
  }
  order_.push_back(p.get());
  params_.push_back(std::move(p));
  return *order_.back();
}

Param& ParamStore::get(const std::string& name) {
  for (Param* p : order_) {
    if (p->name == name) return *p;
  }
  fail(EAGER_ERR_INVALID_ARG, "unknown parameter: " + name);
}

const Param& ParamStore::get(const std::string& name) const {
  return const_cast<ParamStore*>(this)->get(name);
}

bool ParamStore::contains(const std::string& name) const {
  for (const Param* p : order_) {
    if (p->name == name) return true;
  }
  return false;
}

void ParamStore::zero_grads() {
  for (Param* p : order_) p->grad.fill(0.0);
}

int64_t ParamStore::total_size() const {
  int64_t n = 0;
  for (const Param* p : order_) n += p->value.size();
  return n;
}

Value Tape::make(Tensor value, std::vector<int32_t> parents,
                 std::function<void(Tape&, const Tensor&)> backward_fn) {
  Node node;
  node.value = std::move(value);
  node.backward_fn = std::move(backward_fn);
  for (int32_t p : parents) {
    if (nodes_[p].needs_grad) {
      node.needs_grad = true;
      break;
    }
  }
  nodes_.push_back(std::move(node));
  parents_.push_back(std::move(parents));
  return Value{static_cast<int32_t>(nodes_.size() - 1)};
}

Value Tape::constant(Tensor t) {
  Node node;
  node.value = std::move(t);
  nodes_.push_back(std::move(node));
  parents_.emplace_back();
  return Value{static_cast<int32_t>(nodes_.size() - 1)};
}

Value Tape::param(Param& p) {
  Node node;
  node.value = p.value;
  node.needs_grad = true;
  node.leaf = &p;
  nodes_.push_back(std::move(node));
  parents_.emplace_back();
  return Value{static_cast<int32_t>(nodes_.size() - 1)};
}

Value Tape::matmul(Value a, Value b) {
  const Tensor& ta = nodes_[a.idx].value;
  const Tensor& tb = nodes_[b.idx].value;
  require(ta.cols == tb.rows, EAGER_ERR_SHAPE, "matmul shape mismatch");
  Tensor out(ta.rows, tb.cols);
  addmm(out, ta, tb);
  int32_t ai = a.idx, bi = b.idx;
  return make(std::move(out), {ai, bi}, [ai, bi](Tape& t, const Tensor& g) {
    if (t.needs(ai)) addmm_nt(t.grad_of(ai), g, t.nodes_[bi].value);
    if (t.needs(bi)) addmm_tn(t.grad_of(bi), t.nodes_[ai].value, g);
  });
}

Value Tape::add(Value a, Value b) {
  const Tensor& ta = nodes_[a.idx].value;
  const Tensor& tb = nodes_[b.idx].value;
  require(ta.same_shape(tb), EAGER_ERR_SHAPE, "add shape mismatch");
  Tensor out = ta;
  for (int64_t i = 0; i < out.size(); ++i) out.v[i] += tb.v[i];
  int32_t ai = a.idx, bi = b.idx;
  return make(std::move(out), {ai, bi}, [ai, bi](Tape& t, const Tensor& g) {
    if (t.needs(ai)) {
      auto& ga = t.grad_of(ai);
      for (int64_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
    }
    if (t.needs(bi)) {
      auto& gb = t.grad_of(bi);
      for (int64_t i = 0; i < g.size(); ++i) gb.v[i] += g.v[i];
    }
  });
}

Value Tape::sub(Value a, Value b) {
  const Tensor& ta = nodes_[a.idx].value;
  const Tensor& tb = nodes_[b.idx].value;
  require(ta.same_shape(tb), EAGER_ERR_SHAPE, "sub shape mismatch");
  Tensor out = ta;
  for (int64_t i = 0; i < out.size(); ++i) out.v[i] -= tb.v[i];
  int32_t ai = a.idx, bi = b.idx;
  return make(std::move(out), {ai, bi}, [ai, bi](Tape& t, const Tensor& g) {
    if (t.needs(ai)) {
      auto& ga = t.grad_of(ai);
      for (int64_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
    }
    if (t.needs(bi)) {
      auto& gb = t.grad_of(bi);
      for (int64_t i = 0; i < g.size(); ++i) gb.v[i] -= g.v[i];
    }
  });
}

Value Tape::add_rowvec(Value a, Value bias) {
  const Tensor& ta = nodes_[a.idx].value;
  const Tensor& tb = nodes_[bias.idx].value;
  require(tb.rows == 1 && tb.cols == ta.cols, EAGER_ERR_SHAPE, "bias shape mismatch");
  Tensor out = ta;
  for (int64_t i = 0; i < ta.rows; ++i) {
    for (int64_t j = 0; j < ta.cols; ++j) out.at(i, j) += tb.at(0, j);
  }
  int32_t ai = a.idx, bi = bias.idx;
  return make(std::move(out), {ai, bi}, [ai, bi](Tape& t, const Tensor& g) {
    if (t.needs(ai)) {
      auto& ga = t.grad_of(ai);
      for (int64_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
    }
    if (t.needs(bi)) {
      auto& gb = t.grad_of(bi);
      for (int64_t i = 0; i < g.rows; ++i) {
        for (int64_t j = 0; j < g.cols; ++j) gb.at(0, j) += g.at(i, j);
      }
    }
  });
}

Value Tape::mul(Value a, Value b) {
  const Tensor& ta = nodes_[a.idx].value;
  const Tensor& tb = nodes_[b.idx].value;
  require(ta.same_shape(tb), EAGER_ERR_SHAPE, "mul shape mismatch");
  Tensor out = ta;
  for (int64_t i = 0; i < out.size(); ++i) out.v[i] *= tb.v[i];
  int32_t ai = a.idx, bi = b.idx;
  return make(std::move(out), {ai, bi}, [ai, bi](Tape& t, const Tensor& g) {
    const Tensor& va = t.nodes_[ai].value;
    const Tensor& vb = t.nodes_[bi].value;
    if (t.needs(ai)) {
      auto& ga = t.grad_of(ai);
      for (int64_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * vb.v[i];
    }
    if (t.needs(bi)) {
      auto& gb = t.grad_of(bi);
      for (int64_t i = 0; i < g.size(); ++i) gb.v[i] += g.v[i] * va.v[i];
    }
  });
}

Value Tape::div(Value a, Value b) {
  const Tensor& ta = nodes_[a.idx].value;
  const Tensor& tb = nodes_[b.idx].value;
  require(ta.same_shape(tb), EAGER_ERR_SHAPE, "div shape mismatch");
  Tensor out = ta;
  for (int64_t i = 0; i < out.size(); ++i) out.v[i] /= tb.v[i];
  int32_t ai = a.idx, bi = b.idx;
  return make(std::move(out), {ai, bi}, [ai, bi](Tape& t, const Tensor& g) {
    const Tensor& va = t.nodes_[ai].value;
    const Tensor& vb = t.nodes_[bi].value;
    if (t.needs(ai)) {
      auto& ga = t.grad_of(ai);
      for (int64_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] / vb.v[i];
    }
    if (t.needs(bi)) {
      auto& gb = t.grad_of(bi);
      for (int64_t i = 0; i < g.size(); ++i) {
        gb.v[i] -= g.v[i] * va.v[i] / (vb.v[i] * vb.v[i]);
      }
    }
  });
}

Value Tape::scale(Value a, double c) {
  Tensor out = nodes_[a.idx].value;
  for (auto& x : out.v) x *= c;
  int32_t ai = a.idx;
  return make(std::move(out), {ai}, [ai, c](Tape& t, const Tensor& g) {
    if (!t.needs(ai)) return;
    auto& ga = t.grad_of(ai);
    for (int64_t i = 0; i < g.size(); ++i) ga.v[i] += c * g.v[i];
  });
}

Value Tape::add_const(Value a, const Tensor& c) {
  const Tensor& ta = nodes_[a.idx].value;
  require(ta.same_shape(c), EAGER_ERR_SHAPE, "add_const shape mismatch");
  Tensor out = ta;
  for (int64_t i = 0; i < out.size(); ++i) out.v[i] += c.v[i];
  int32_t ai = a.idx;
  return make(std::move(out), {ai}, [ai](Tape& t, const Tensor& g) {
    if (!t.needs(ai)) return;
    auto& ga = t.grad_of(ai);
    for (int64_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i];
  });
}

Value Tape::relu(Value a) {
  Tensor out = nodes_[a.idx].value;
  for (auto& x : out.v) x = x > 0.0 ? x : 0.0;
  int32_t ai = a.idx;
  return make(std::move(out), {ai}, [ai](Tape& t, const Tensor& g) {
    if (!t.needs(ai)) return;
    const Tensor& va = t.nodes_[ai].value;
    auto& ga = t.grad_of(ai);
    for (int64_t i = 0; i < g.size(); ++i) {
      if (va.v[i] > 0.0) ga.v[i] += g.v[i];
    }
  });
}

Value Tape::sigmoid(Value a) {
  Tensor out = nodes_[a.idx].value;
  for (auto& x : out.v) x = stable_sigmoid(x);
  int32_t ai = a.idx;
  int32_t self = static_cast<int32_t>(nodes_.size());
  return make(std::move(out), {ai}, [ai, self](Tape& t, const Tensor& g) {
    if (!t.needs(ai)) return;
    const Tensor& s = t.nodes_[self].value;
    auto& ga = t.grad_of(ai);
    for (int64_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * s.v[i] * (1.0 - s.v[i]);
  });
}

Value Tape::softplus(Value a) {
  Tensor out = nodes_[a.idx].value;
  for (auto& x : out.v) x = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
  int32_t ai = a.idx;
  return make(std::move(out), {ai}, [ai](Tape& t, const Tensor& g) {
    if (!t.needs(ai)) return;
    const Tensor& va = t.nodes_[ai].value;
    auto& ga = t.grad_of(ai);
    for (int64_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * stable_sigmoid(va.v[i]);
  });
}

Value Tape::log(Value a) {
  Tensor out = nodes_[a.idx].value;
  for (auto& x : out.v) x = std::log(x);
  int32_t ai = a.idx;
  return make(std::move(out), {ai}, [ai](Tape& t, const Tensor& g) {
    if (!t.needs(ai)) return;
    const Tensor& va = t.nodes_[ai].value;
    auto& ga = t.grad_of(ai);
    for (int64_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] / va.v[i];
  });
}

Value Tape::sqrt(Value a) {
  Tensor out = nodes_[a.idx].value;
  for (auto& x : out.v) x = std::sqrt(x);
  int32_t ai = a.idx;
  int32_t self = static_cast<int32_t>(nodes_.size());
  return make(std::move(out), {ai}, [ai, self](Tape& t, const Tensor& g) {
    if (!t.needs(ai)) return;
    const Tensor& s = t.nodes_[self].value;
    auto& ga = t.grad_of(ai);
    for (int64_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * 0.5 / s.v[i];
  });
}

Value Tape::transpose(Value a) {
  const Tensor& ta = nodes_[a.idx].value;
  Tensor out(ta.cols, ta.rows);
  for (int64_t i = 0; i < ta.rows; ++i) {
    for (int64_t j = 0; j < ta.cols; ++j) out.at(j, i) = ta.at(i, j);
  }
  int32_t ai = a.idx;
  return make(std::move(out), {ai}, [ai](Tape& t, const Tensor& g) {
    if (!t.needs(ai)) return;
    auto& ga = t.grad_of(ai);
    for (int64_t i = 0; i < g.rows; ++i) {
      for (int64_t j = 0; j < g.cols; ++j) ga.at(j, i) += g.at(i, j);
    }
  });
}

Value Tape::softmax_rows(Value a) {
  Tensor out = nodes_[a.idx].value;
  for (int64_t i = 0; i < out.rows; ++i) {
    double* row = out.v.data() + i * out.cols;
    double mx = row[0];
    for (int64_t j = 1; j < out.cols; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < out.cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (int64_t j = 0; j < out.cols; ++j) row[j] /= sum;
  }
  int32_t ai = a.idx;
  int32_t self = static_cast<int32_t>(nodes_.size());
  return make(std::move(out), {ai}, [ai, self](Tape& t, const Tensor& g) {
    if (!t.needs(ai)) return;
    const Tensor& y = t.nodes_[self].value;
    auto& ga = t.grad_of(ai);
    for (int64_t i = 0; i < g.rows; ++i) {
      double dot = 0.0;
      for (int64_t j = 0; j < g.cols; ++j) dot += g.at(i, j) * y.at(i, j);
      for (int64_t j = 0; j < g.cols; ++j) {
        ga.at(i, j) += y.at(i, j) * (g.at(i, j) - dot);
      }
    }
  });
}

Value Tape::layer_norm(Value x, Value gain, Value bias, double eps) {
  const Tensor& tx = nodes_[x.idx].value;
  const Tensor& tg = nodes_[gain.idx].value;
  const Tensor& tb = nodes_[bias.idx].value;
  require(tg.rows == 1 && tg.cols == tx.cols && tb.rows == 1 && tb.cols == tx.cols,
          EAGER_ERR_SHAPE, "layer_norm gain/bias shape mismatch");
  int64_t d = tx.cols;
  Tensor out(tx.rows, d);
  auto xhat = std::make_shared<Tensor>(tx.rows, d);
  auto inv_std = std::make_shared<std::vector<double>>(tx.rows);
  for (int64_t i = 0; i < tx.rows; ++i) {
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += tx.at(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      double c = tx.at(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = inv;
    for (int64_t j = 0; j < d; ++j) {
      double xh = (tx.at(i, j) - mean) * inv;
      xhat->at(i, j) = xh;
      out.at(i, j) = xh * tg.at(0, j) + tb.at(0, j);
    }
  }
  int32_t xi = x.idx, gi = gain.idx, bi = bias.idx;
  return make(std::move(out), {xi, gi, bi},
              [xi, gi, bi, xhat, inv_std](Tape& t, const Tensor& g) {
    const Tensor& tg = t.nodes_[gi].value;
    int64_t d = g.cols;
    if (t.needs(gi)) {
      auto& gg = t.grad_of(gi);
      for (int64_t i = 0; i < g.rows; ++i) {
        for (int64_t j = 0; j < d; ++j) gg.at(0, j) += g.at(i, j) * xhat->at(i, j);
      }
    }
    if (t.needs(bi)) {
      auto& gb = t.grad_of(bi);
      for (int64_t i = 0; i < g.rows; ++i) {
        for (int64_t j = 0; j < d; ++j) gb.at(0, j) += g.at(i, j);
      }
    }
    if (t.needs(xi)) {
      auto& gx = t.grad_of(xi);
      for (int64_t i = 0; i < g.rows; ++i) {
        double mean_dxhat = 0.0;
        double mean_dxhat_xhat = 0.0;
        for (int64_t j = 0; j < d; ++j) {
          double dxh = g.at(i, j) * tg.at(0, j);
          mean_dxhat += dxh;
          mean_dxhat_xhat += dxh * xhat->at(i, j);
        }
        mean_dxhat /= static_cast<double>(d);
        mean_dxhat_xhat /= static_cast<double>(d);
        double inv = (*inv_std)[i];
        for (int64_t j = 0; j < d; ++j) {
          double dxh = g.at(i, j) * tg.at(0, j);
          gx.at(i, j) += inv * (dxh - mean_dxhat - xhat->at(i, j) * mean_dxhat_xhat);
        }
      }
    }
  });
}

Value Tape::gather_rows(Value table, const std::vector<int32_t>& indices) {
  const Tensor& tt = nodes_[table.idx].value;
  Tensor out(static_cast<int64_t>(indices.size()), tt.cols);
  for (size_t i = 0; i < indices.size(); ++i) {
    require(indices[i] >= 0 && indices[i] < tt.rows, EAGER_ERR_INVALID_ARG,
            "gather_rows index out of range");
    std::copy_n(tt.v.data() + static_cast<size_t>(indices[i]) * tt.cols, tt.cols,
                out.v.data() + i * tt.cols);
  }
  int32_t ti = table.idx;
  auto idx = std::make_shared<std::vector<int32_t>>(indices);
  return make(std::move(out), {ti}, [ti, idx](Tape& t, const Tensor& g) {
    if (!t.needs(ti)) return;
    auto& gt = t.grad_of(ti);
    for (size_t i = 0; i < idx->size(); ++i) {
      double* dst = gt.v.data() + static_cast<size_t>((*idx)[i]) * gt.cols;
      const double* src = g.v.data() + i * g.cols;
      for (int64_t j = 0; j < g.cols; ++j) dst[j] += src[j];
    }
  });
}

Value Tape::concat_rows(const std::vector<Value>& parts) {
  require(!parts.empty(), EAGER_ERR_INVALID_ARG, "concat_rows of nothing");
  int64_t cols = nodes_[parts[0].idx].value.cols;
  int64_t rows = 0;
  for (Value p : parts) {
    require(nodes_[p.idx].value.cols == cols, EAGER_ERR_SHAPE, "concat_rows col mismatch");
    rows += nodes_[p.idx].value.rows;
  }
  Tensor out(rows, cols);
  std::vector<int32_t> parents;
  auto offsets = std::make_shared<std::vector<int64_t>>();
  int64_t r = 0;
  for (Value p : parts) {
    const Tensor& tp = nodes_[p.idx].value;
    std::copy_n(tp.v.data(), tp.size(), out.v.data() + r * cols);
    parents.push_back(p.idx);
    offsets->push_back(r);
    r += tp.rows;
  }
  auto parent_ids = std::make_shared<std::vector<int32_t>>(parents);
  return make(std::move(out), parents, [parent_ids, offsets](Tape& t, const Tensor& g) {
    for (size_t i = 0; i < parent_ids->size(); ++i) {
      int32_t pi = (*parent_ids)[i];
      if (!t.needs(pi)) continue;
      auto& gp = t.grad_of(pi);
      const double* src = g.v.data() + (*offsets)[i] * g.cols;
      for (int64_t e = 0; e < gp.size(); ++e) gp.v[e] += src[e];
    }
  });
}

Value Tape::concat_cols(const std::vector<Value>& parts) {
  require(!parts.empty(), EAGER_ERR_INVALID_ARG, "concat_cols of nothing");
  int64_t rows = nodes_[parts[0].idx].value.rows;
  int64_t cols = 0;
  for (Value p : parts) {
    require(nodes_[p.idx].value.rows == rows, EAGER_ERR_SHAPE, "concat_cols row mismatch");
    cols += nodes_[p.idx].value.cols;
  }
  Tensor out(rows, cols);
  std::vector<int32_t> parents;
  auto offsets = std::make_shared<std::vector<int64_t>>();
  int64_t c = 0;
  for (Value p : parts) {
    const Tensor& tp = nodes_[p.idx].value;
    for (int64_t i = 0; i < rows; ++i) {
      std::copy_n(tp.v.data() + i * tp.cols, tp.cols, out.v.data() + i * cols + c);
    }
    parents.push_back(p.idx);
    offsets->push_back(c);
    c += tp.cols;
  }
  auto parent_ids = std::make_shared<std::vector<int32_t>>(parents);
  return make(std::move(out), parents, [parent_ids, offsets](Tape& t, const Tensor& g) {
    for (size_t i = 0; i < parent_ids->size(); ++i) {
      int32_t pi = (*parent_ids)[i];
      if (!t.needs(pi)) continue;
      auto& gp = t.grad_of(pi);
      int64_t off = (*offsets)[i];
      for (int64_t r = 0; r < g.rows; ++r) {
        const double* src = g.v.data() + r * g.cols + off;
        double* dst = gp.v.data() + r * gp.cols;
        for (int64_t j = 0; j < gp.cols; ++j) dst[j] += src[j];
      }
    }
  });
}

Value Tape::slice_rows(Value a, int64_t start, int64_t len) {
  const Tensor& ta = nodes_[a.idx].value;
  require(start >= 0 && start + len <= ta.rows, EAGER_ERR_INVALID_ARG,
          "slice_rows out of range");
  Tensor out(len, ta.cols);
  std::copy_n(ta.v.data() + start * ta.cols, len * ta.cols, out.v.data());
  int32_t ai = a.idx;
  return make(std::move(out), {ai}, [ai, start](Tape& t, const Tensor& g) {
    if (!t.needs(ai)) return;
    auto& ga = t.grad_of(ai);
    double* dst = ga.v.data() + start * ga.cols;
    for (int64_t e = 0; e < g.size(); ++e) dst[e] += g.v[e];
  });
}

Value Tape::slice_cols(Value a, int64_t start, int64_t len) {
  const Tensor& ta = nodes_[a.idx].value;
  require(start >= 0 && start + len <= ta.cols, EAGER_ERR_INVALID_ARG,
          "slice_cols out of range");
  Tensor out(ta.rows, len);
  for (int64_t i = 0; i < ta.rows; ++i) {
    std::copy_n(ta.v.data() + i * ta.cols + start, len, out.v.data() + i * len);
  }
  int32_t ai = a.idx;
  return make(std::move(out), {ai}, [ai, start](Tape& t, const Tensor& g) {
    if (!t.needs(ai)) return;
    auto& ga = t.grad_of(ai);
    for (int64_t i = 0; i < g.rows; ++i) {
      double* dst = ga.v.data() + i * ga.cols + start;
      const double* src = g.v.data() + i * g.cols;
      for (int64_t j = 0; j < g.cols; ++j) dst[j] += src[j];
    }
  });
}

Value Tape::mean_rows(Value a) {
  const Tensor& ta = nodes_[a.idx].value;
  Tensor out(1, ta.cols);
  for (int64_t i = 0; i < ta.rows; ++i) {
    for (int64_t j = 0; j < ta.cols; ++j) out.at(0, j) += ta.at(i, j);
  }
  double inv = 1.0 / static_cast<double>(ta.rows);
  for (auto& x : out.v) x *= inv;
  int32_t ai = a.idx;
  int64_t rows = ta.rows;
  return make(std::move(out), {ai}, [ai, rows, inv](Tape& t, const Tensor& g) {
    if (!t.needs(ai)) return;
    auto& ga = t.grad_of(ai);
    for (int64_t i = 0; i < rows; ++i) {
      for (int64_t j = 0; j < g.cols; ++j) ga.at(i, j) += inv * g.at(0, j);
    }
  });
}

Value Tape::sum_all(Value a) {
  const Tensor& ta = nodes_[a.idx].value;
  Tensor out(1, 1);
  for (double x : ta.v) out.v[0] += x;
  int32_t ai = a.idx;
  return make(std::move(out), {ai}, [ai](Tape& t, const Tensor& g) {
    if (!t.needs(ai)) return;
    auto& ga = t.grad_of(ai);
    for (auto& x : ga.v) x += g.v[0];
  });
}

Value Tape::mean_all(Value a) {
  const Tensor& ta = nodes_[a.idx].value;
  double inv = 1.0 / static_cast<double>(ta.size());
  return scale(sum_all(a), inv);
}

Value Tape::dropout(Value a, double p) {
  if (!training_ || p <= 0.0) return a;
  require(rng_ != nullptr, EAGER_ERR_STATE, "dropout requires a tape rng");
  require(p < 1.0, EAGER_ERR_INVALID_ARG, "dropout rate must be < 1");
  const Tensor& ta = nodes_[a.idx].value;
  auto mask = std::make_shared<Tensor>(ta.rows, ta.cols);
  double keep = 1.0 - p;
  double inv_keep = 1.0 / keep;
  Tensor out = ta;
  for (int64_t i = 0; i < ta.size(); ++i) {
    double m = rng_->uniform() < keep ? inv_keep : 0.0;
    mask->v[i] = m;
    out.v[i] *= m;
  }
  int32_t ai = a.idx;
  return make(std::move(out), {ai}, [ai, mask](Tape& t, const Tensor& g) {
    if (!t.needs(ai)) return;
    auto& ga = t.grad_of(ai);
    for (int64_t i = 0; i < g.size(); ++i) ga.v[i] += g.v[i] * mask->v[i];
  });
}

Value Tape::cross_entropy(Value logits, const std::vector<int32_t>& targets,
                          Reduction reduction) {
  const Tensor& tl = nodes_[logits.idx].value;
  require(static_cast<int64_t>(targets.size()) == tl.rows, EAGER_ERR_SHAPE,
          "cross_entropy needs one target per row");
  auto probs = std::make_shared<Tensor>(tl.rows, tl.cols);
  double total = 0.0;
  for (int64_t i = 0; i < tl.rows; ++i) {
    int32_t target = targets[i];
    require(target >= 0 && target < tl.cols, EAGER_ERR_INVALID_ARG,
            "cross_entropy target out of range");
    const double* row = tl.v.data() + i * tl.cols;
    double mx = row[0];
    for (int64_t j = 1; j < tl.cols; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < tl.cols; ++j) {
      double e = std::exp(row[j] - mx);
      probs->at(i, j) = e;
      sum += e;
    }
    for (int64_t j = 0; j < tl.cols; ++j) probs->at(i, j) /= sum;
    total += mx + std::log(sum) - row[target];
  }
  double w = reduction == Reduction::Mean ? 1.0 / static_cast<double>(tl.rows) : 1.0;
  Tensor out(1, 1);
  out.v[0] = total * w;
  int32_t li = logits.idx;
  auto tgt = std::make_shared<std::vector<int32_t>>(targets);
  return make(std::move(out), {li}, [li, probs, tgt, w](Tape& t, const Tensor& g) {
    if (!t.needs(li)) return;
    auto& gl = t.grad_of(li);
    double s = g.v[0] * w;
    for (int64_t i = 0; i < gl.rows; ++i) {
      for (int64_t j = 0; j < gl.cols; ++j) gl.at(i, j) += s * probs->at(i, j);
      gl.at(i, (*tgt)[i]) -= s;
    }
  });
}

Value Tape::huber_mean(Value a, Value b) {
  const Tensor& ta = nodes_[a.idx].value;
  const Tensor& tb = nodes_[b.idx].value;
  require(ta.same_shape(tb), EAGER_ERR_SHAPE, "huber_mean shape mismatch");
  auto diff = std::make_shared<Tensor>(ta.rows, ta.cols);
  double total = 0.0;
  for (int64_t i = 0; i < ta.size(); ++i) {
    double d = ta.v[i] - tb.v[i];
    diff->v[i] = d;
    double ad = std::abs(d);
    total += ad <= 1.0 ? 0.5 * d * d : ad - 0.5;
  }
  double inv = 1.0 / static_cast<double>(ta.size());
  Tensor out(1, 1);
  out.v[0] = total * inv;
  int32_t ai = a.idx, bi = b.idx;
  return make(std::move(out), {ai, bi}, [ai, bi, diff, inv](Tape& t, const Tensor& g) {
    double s = g.v[0] * inv;
    for (int64_t i = 0; i < diff->size(); ++i) {
      double d = std::clamp(diff->v[i], -1.0, 1.0) * s;
      if (t.needs(ai)) t.grad_of(ai).v[i] += d;
      if (t.needs(bi)) t.grad_of(bi).v[i] -= d;
    }
  });
}

Value Tape::cosine_distance(Value a, Value b) {
  const Tensor& ta = nodes_[a.idx].value;
  const Tensor& tb = nodes_[b.idx].value;
  require(ta.same_shape(tb), EAGER_ERR_SHAPE, "cosine_distance shape mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (int64_t i = 0; i < ta.size(); ++i) {
    dot += ta.v[i] * tb.v[i];
    na += ta.v[i] * ta.v[i];
    nb += tb.v[i] * tb.v[i];
  }
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  require(na > 1e-12 && nb > 1e-12, EAGER_ERR_NUMERIC,
          "cosine distance of a zero-norm vector");
  Tensor out(1, 1);
  out.v[0] = 1.0 - dot / (na * nb);
  int32_t ai = a.idx, bi = b.idx;
  return make(std::move(out), {ai, bi},
              [ai, bi, dot, na, nb](Tape& t, const Tensor& g) {
    const Tensor& va = t.nodes_[ai].value;
    const Tensor& vb = t.nodes_[bi].value;
    double s = g.v[0];
    if (t.needs(ai)) {
      auto& ga = t.grad_of(ai);
      for (int64_t i = 0; i < va.size(); ++i) {
        ga.v[i] -= s * (vb.v[i] / (na * nb) - dot * va.v[i] / (na * na * na * nb));
      }
    }
    if (t.needs(bi)) {
      auto& gb = t.grad_of(bi);
      for (int64_t i = 0; i < vb.size(); ++i) {
        gb.v[i] -= s * (va.v[i] / (na * nb) - dot * vb.v[i] / (nb * nb * nb * na));
      }
    }
  });
}

void Tape::backward(Value loss) {
  require(loss.valid() && nodes_[loss.idx].value.size() == 1, EAGER_ERR_INVALID_ARG,
          "backward needs a scalar loss");
  for (int32_t i = 0; i <= loss.idx; ++i) {
    if (nodes_[i].needs_grad) {
      nodes_[i].grad = Tensor(nodes_[i].value.rows, nodes_[i].value.cols);
    }
  }
  require(nodes_[loss.idx].needs_grad, EAGER_ERR_INVALID_ARG,
          "loss does not depend on any parameter");
  nodes_[loss.idx].grad.v[0] = 1.0;
  for (int32_t i = loss.idx; i >= 0; --i) {
    Node& node = nodes_[i];
    if (!node.needs_grad) continue;
    if (node.leaf != nullptr) {
      auto& pg = node.leaf->grad;
      for (int64_t e = 0; e < pg.size(); ++e) pg.v[e] += node.grad.v[e];
      continue;
    }
    if (node.backward_fn) node.backward_fn(*this, node.grad);
  }
}

Value linear(Tape& tape, Value x, Param& w, Param& b) {
  return tape.add_rowvec(tape.matmul(x, tape.param(w)), tape.param(b));
}

Value multi_head_attention(Tape& tape, Value q_in, Value kv_in,
                           const AttentionWeights& w, const AttentionShape& shape) {
  const int64_t dim = tape.value(q_in).cols;
  require(dim % shape.heads == 0, EAGER_ERR_SHAPE,
          "model dim must be divisible by heads");
  require(tape.value(q_in).rows == shape.batch * shape.q_len, EAGER_ERR_SHAPE,
          "attention q shape mismatch");
  require(tape.value(kv_in).rows == shape.kv_batch * shape.kv_len, EAGER_ERR_SHAPE,
          "attention kv shape mismatch");
  require(shape.kv_batch == shape.batch || shape.kv_batch == 1, EAGER_ERR_SHAPE,
          "attention kv batch must be 1 or equal to batch");
  const int64_t dh = dim / shape.heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  Value q = linear(tape, q_in, *w.wq, *w.bq);
  Value k = linear(tape, kv_in, *w.wk, *w.bk);
  Value v = linear(tape, kv_in, *w.wv, *w.bv);

  Tensor causal_mask;
  if (shape.causal) {
    causal_mask = Tensor(shape.q_len, shape.kv_len);
    for (int64_t i = 0; i < shape.q_len; ++i) {
      for (int64_t j = 0; j < shape.kv_len; ++j) {
        if (j > i) causal_mask.at(i, j) = -1e30;
      }
    }
  }

  std::vector<Value> rows;
  rows.reserve(static_cast<size_t>(shape.batch));
  for (int64_t b = 0; b < shape.batch; ++b) {
    Value qb = shape.batch == 1 ? q : tape.slice_rows(q, b * shape.q_len, shape.q_len);
    Value kb = shape.kv_batch == 1 ? k
                                   : tape.slice_rows(k, b * shape.kv_len, shape.kv_len);
    Value vb = shape.kv_batch == 1 ? v
                                   : tape.slice_rows(v, b * shape.kv_len, shape.kv_len);
    std::vector<Value> heads;
    heads.reserve(static_cast<size_t>(shape.heads));
    for (int64_t h = 0; h < shape.heads; ++h) {
      Value qh = tape.slice_cols(qb, h * dh, dh);
      Value kh = tape.slice_cols(kb, h * dh, dh);
      Value vh = tape.slice_cols(vb, h * dh, dh);
      Value scores = tape.scale(tape.matmul(qh, tape.transpose(kh)), inv_sqrt);
      if (shape.causal) scores = tape.add_const(scores, causal_mask);
      Value probs = tape.softmax_rows(scores);
      heads.push_back(tape.matmul(probs, vh));
    }
    rows.push_back(tape.concat_cols(heads));
  }
  Value merged = rows.size() == 1 ? rows[0] : tape.concat_rows(rows);
  return linear(tape, merged, *w.wo, *w.bo);
}

void softmax_inplace(std::vector<double>& x) {
  if (x.empty()) return;
  double mx = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (auto& v : x) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (auto& v : x) v /= sum;
}

std::vector<double> log_softmax(const std::vector<double>& x) {
  std::vector<double> out(x.size());
  if (x.empty()) return out;
  double mx = *std::max_element(x.begin(), x.end());
  double sum = 0.0;
  for (double v : x) sum += std::exp(v - mx);
  double lse = mx + std::log(sum);
  for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
  return out;
}

Adam::Adam(ParamStore& params, AdamConfig config) : params_(params), config_(config) {
  for (Param* p : params_.all()) {
    m_.emplace_back(p->value.rows, p->value.cols);
    v_.emplace_back(p->value.rows, p->value.cols);
  }
}

double Adam::effective_lr() const {
  if (config_.warmup_steps <= 0) return config_.lr;
  double f = static_cast<double>(step_count_) / static_cast<double>(config_.warmup_steps);
  return config_.lr * std::min(1.0, f);
}

void Adam::step() {
  ++step_count_;
  double lr = effective_lr();
  double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_count_));
  double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_count_));
  auto& all = params_.all();
  for (size_t i = 0; i < all.size(); ++i) {
    Param& p = *all[i];
    for (int64_t e = 0; e < p.value.size(); ++e) {
      double g = p.grad.v[e];
      if (!std::isfinite(g)) {
        fail(EAGER_ERR_NUMERIC, "non-finite gradient in parameter " + p.name);
      }
      double& m = m_[i].v[e];
      double& v = v_[i].v[e];
      m = config_.beta1 * m + (1.0 - config_.beta1) * g;
      v = config_.beta2 * v + (1.0 - config_.beta2) * g * g;
      double mhat = m / bc1;
      double vhat = v / bc2;
      p.value.v[e] -= lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

FdReport finite_difference_check(const std::function<Value(Tape&)>& build,
                                 const std::vector<Param*>& params, double tol,
                                 int64_t max_coords_per_param, Rng& rng) {
  for (Param* p : params) p->grad.fill(0.0);
  {
    Tape tape(false);
    Value loss = build(tape);
    tape.backward(loss);
  }
  std::vector<Tensor> analytic;
  analytic.reserve(params.size());
  for (Param* p : params) analytic.push_back(p->grad);

  auto eval = [&]() {
    Tape tape(false);
    Value loss = build(tape);
    return tape.value(loss).v[0];
  };

  FdReport report;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Param& p = *params[pi];
    int64_t n = p.value.size();
    std::vector<size_t> coords;
    if (n <= max_coords_per_param) {
      coords.resize(static_cast<size_t>(n));
      for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
      coords = rng.sample_without_replacement(static_cast<size_t>(n),
                                              static_cast<size_t>(max_coords_per_param));
    }
    for (size_t c : coords) {
      double theta = p.value.v[c];
      double h = 1e-4 * std::max(1.0, std::abs(theta));
      p.value.v[c] = theta + h;
      double up = eval();
      p.value.v[c] = theta - h;
      double down = eval();
      p.value.v[c] = theta;
      double numeric = (up - down) / (2.0 * h);
      double a = analytic[pi].v[c];
      double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      ++report.coords_checked;
      if (rel > report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst = {p.name, static_cast<int64_t>(c), a, numeric, rel};
      }
    }
  }
  report.pass = report.max_rel_error < tol;
  return report;
}

}  // namespace eager::nn
