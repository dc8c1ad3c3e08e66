#include "doctest.h"

#include <cmath>

#include "core/error.hpp"
#include "core/nn.hpp"
#include "core/rng.hpp"

using namespace eager;
using namespace eager::nn;

namespace {

Tensor random_tensor(int64_t r, int64_t c, Rng& rng, double scale = 1.0) {
  Tensor t(r, c);
  for (auto& x : t.v) x = scale * rng.normal();
  return t;
}

void randomize(Param& p, Rng& rng, double scale = 0.5) {
  for (auto& x : p.value.v) x = scale * rng.normal();
}

}  // namespace

TEST_CASE("softmax of equal inputs is uniform") {
  std::vector<double> x = {0.0, 0.0};
  softmax_inplace(x);
  CHECK(x[0] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(x[1] == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softmax is stable under large inputs") {
  std::vector<double> x = {1000.0, 0.0};
  softmax_inplace(x);
  CHECK(std::isfinite(x[0]));
  CHECK(x[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(x[1] == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("softmax matches a long-double reference within 1e-12") {
  Rng rng(42);
  std::vector<double> x(7);
  for (auto& v : x) v = rng.uniform(-4.0, 4.0);

  // 80-bit reference.
  std::vector<long double> ref(7);
  long double mx = x[0];
  for (double v : x) mx = std::max<long double>(mx, v);
  long double sum = 0.0L;
  for (int i = 0; i < 7; ++i) {
    ref[i] = expl(static_cast<long double>(x[i]) - mx);
    sum += ref[i];
  }
  for (auto& v : ref) v /= sum;

  std::vector<double> got = x;
  softmax_inplace(got);
  double total = 0.0;
  for (int i = 0; i < 7; ++i) {
    CHECK(std::abs(got[i] - static_cast<double>(ref[i])) < 1e-12);
    total += got[i];
  }
  CHECK(std::abs(total - 1.0) < 1e-9);
}

TEST_CASE("cross entropy of uniform logits is ln V") {
  Tape tape;
  Tensor logits(1, 256);
  Value v = tape.constant(logits);
  ParamStore params(1);
  Param& p = params.create("logit_bias", 1, 256, ParamStore::Init::Zero);
  Value loss = tape.cross_entropy(tape.add(v, tape.param(p)), {17},
                                  Tape::Reduction::Mean);
  CHECK(tape.value(loss).v[0] == doctest::Approx(std::log(256.0)).epsilon(1e-12));
}

TEST_CASE("cross entropy goes to zero as the target logit dominates") {
  Tape tape;
  Tensor logits(1, 8);
  logits.at(0, 3) = 60.0;
  Value loss = tape.cross_entropy(tape.constant(logits), {3}, Tape::Reduction::Mean);
  CHECK(tape.value(loss).v[0] < 1e-12);
}

TEST_CASE("cross entropy rejects out-of-range targets") {
  Tape tape;
  Tensor logits(1, 4);
  CHECK_THROWS_AS(tape.cross_entropy(tape.constant(logits), {4}, Tape::Reduction::Mean),
                  Error);
}

TEST_CASE("cross entropy gradient matches finite differences") {
  Rng rng(7);
  ParamStore params(7);
  Param& logits = params.create("logits", 4, 11, ParamStore::Init::Zero);
  randomize(logits, rng);
  std::vector<int32_t> targets = {3, 0, 10, 5};
  auto build = [&](Tape& t) {
    return t.cross_entropy(t.param(logits), targets, Tape::Reduction::Mean);
  };
  auto report = finite_difference_check(build, {&logits}, 1e-4, 44, rng);
  CHECK(report.pass);
  CHECK(report.max_rel_error < 1e-4);
}

TEST_CASE("single-position attention reduces to the value path") {
  Rng rng(3);
  ParamStore params(3);
  const int64_t d = 8;
  AttentionWeights w;
  w.wq = &params.create("wq", d, d, ParamStore::Init::Normal, 0.3);
  w.bq = &params.create("bq", 1, d, ParamStore::Init::Normal, 0.3);
  w.wk = &params.create("wk", d, d, ParamStore::Init::Normal, 0.3);
  w.bk = &params.create("bk", 1, d, ParamStore::Init::Normal, 0.3);
  w.wv = &params.create("wv", d, d, ParamStore::Init::Normal, 0.3);
  w.bv = &params.create("bv", 1, d, ParamStore::Init::Normal, 0.3);
  w.wo = &params.create("wo", d, d, ParamStore::Init::Normal, 0.3);
  w.bo = &params.create("bo", 1, d, ParamStore::Init::Normal, 0.3);

  for (int64_t heads : {1, 2, 4}) {
    Tape tape;
    Tensor x = random_tensor(1, d, rng);
    Value xin = tape.constant(x);
    AttentionShape shape;
    shape.batch = 1;
    shape.q_len = 1;
    shape.kv_len = 1;
    shape.kv_batch = 1;
    shape.heads = heads;
    Value out = multi_head_attention(tape, xin, xin, w, shape);

    // With one position the attention weight is 1, so the output is
    // Wo^T(value projection) + bo regardless of head count.
    Tape ref;
    Value vproj = linear(ref, ref.constant(x), *w.wv, *w.bv);
    Value expect = linear(ref, vproj, *w.wo, *w.bo);
    for (int64_t j = 0; j < d; ++j) {
      CHECK(tape.value(out).at(0, j) ==
            doctest::Approx(ref.value(expect).at(0, j)).epsilon(1e-12));
    }
  }
}

TEST_CASE("causal attention makes position 0 independent of the future") {
  Rng rng(11);
  ParamStore params(11);
  const int64_t d = 8;
  AttentionWeights w;
  w.wq = &params.create("wq", d, d, ParamStore::Init::Normal, 0.3);
  w.bq = &params.create("bq", 1, d, ParamStore::Init::Zero);
  w.wk = &params.create("wk", d, d, ParamStore::Init::Normal, 0.3);
  w.bk = &params.create("bk", 1, d, ParamStore::Init::Zero);
  w.wv = &params.create("wv", d, d, ParamStore::Init::Normal, 0.3);
  w.bv = &params.create("bv", 1, d, ParamStore::Init::Zero);
  w.wo = &params.create("wo", d, d, ParamStore::Init::Normal, 0.3);
  w.bo = &params.create("bo", 1, d, ParamStore::Init::Zero);

  AttentionShape shape;
  shape.batch = 1;
  shape.q_len = 3;
  shape.kv_len = 3;
  shape.kv_batch = 1;
  shape.heads = 2;
  shape.causal = true;

  Tensor x = random_tensor(3, d, rng);
  Tensor y = x;
  y.at(1, 2) += 3.0;
  y.at(2, 5) -= 4.0;

  Tape ta, tb;
  Value oa = multi_head_attention(ta, ta.constant(x), ta.constant(x), w, shape);
  Value ob = multi_head_attention(tb, tb.constant(y), tb.constant(y), w, shape);
  for (int64_t j = 0; j < d; ++j) {
    CHECK(ta.value(oa).at(0, j) == doctest::Approx(tb.value(ob).at(0, j)).epsilon(1e-14));
  }
}

TEST_CASE("single-head attention matches a straight-line oracle") {
  Rng rng(19);
  ParamStore params(19);
  const int64_t d = 6;
  AttentionWeights w;
  w.wq = &params.create("wq", d, d, ParamStore::Init::Normal, 0.4);
  w.bq = &params.create("bq", 1, d, ParamStore::Init::Normal, 0.4);
  w.wk = &params.create("wk", d, d, ParamStore::Init::Normal, 0.4);
  w.bk = &params.create("bk", 1, d, ParamStore::Init::Normal, 0.4);
  w.wv = &params.create("wv", d, d, ParamStore::Init::Normal, 0.4);
  w.bv = &params.create("bv", 1, d, ParamStore::Init::Normal, 0.4);
  w.wo = &params.create("wo", d, d, ParamStore::Init::Normal, 0.4);
  w.bo = &params.create("bo", 1, d, ParamStore::Init::Normal, 0.4);

  Tensor x = random_tensor(3, d, rng);
  AttentionShape shape;
  shape.batch = 1;
  shape.q_len = 3;
  shape.kv_len = 3;
  shape.kv_batch = 1;
  shape.heads = 1;

  Tape tape;
  Value out = multi_head_attention(tape, tape.constant(x), tape.constant(x), w, shape);

  // Hand-rolled attention in plain loops.
  auto matvec = [&](const Tensor& m, const double* in, const Tensor& bias, double* o) {
    for (int64_t c = 0; c < m.cols; ++c) {
      double acc = bias.at(0, c);
      for (int64_t r = 0; r < m.rows; ++r) acc += in[r] * m.at(r, c);
      o[c] = acc;
    }
  };
  double q[3][6], k[3][6], v[3][6];
  for (int i = 0; i < 3; ++i) {
    matvec(w.wq->value, &x.v[static_cast<size_t>(i * d)], w.bq->value, q[i]);
    matvec(w.wk->value, &x.v[static_cast<size_t>(i * d)], w.bk->value, k[i]);
    matvec(w.wv->value, &x.v[static_cast<size_t>(i * d)], w.bv->value, v[i]);
  }
  for (int i = 0; i < 3; ++i) {
    double scores[3];
    for (int j = 0; j < 3; ++j) {
      double acc = 0.0;
      for (int64_t e = 0; e < d; ++e) acc += q[i][e] * k[j][e];
      scores[j] = acc / std::sqrt(static_cast<double>(d));
    }
    double mx = std::max({scores[0], scores[1], scores[2]});
    double sum = 0.0;
    for (double& s : scores) {
      s = std::exp(s - mx);
      sum += s;
    }
    double mixed[6] = {0};
    for (int j = 0; j < 3; ++j) {
      for (int64_t e = 0; e < d; ++e) mixed[e] += (scores[j] / sum) * v[j][e];
    }
    double expect[6];
    matvec(w.wo->value, mixed, w.bo->value, expect);
    for (int64_t e = 0; e < d; ++e) {
      CHECK(std::abs(tape.value(out).at(i, e) - expect[e]) < 1e-10);
    }
  }
}

TEST_CASE("attention gradients pass finite differences") {
  Rng rng(23);
  ParamStore params(23);
  const int64_t d = 6;
  AttentionWeights w;
  w.wq = &params.create("wq", d, d, ParamStore::Init::Normal, 0.4);
  w.bq = &params.create("bq", 1, d, ParamStore::Init::Normal, 0.4);
  w.wk = &params.create("wk", d, d, ParamStore::Init::Normal, 0.4);
  w.bk = &params.create("bk", 1, d, ParamStore::Init::Normal, 0.4);
  w.wv = &params.create("wv", d, d, ParamStore::Init::Normal, 0.4);
  w.bv = &params.create("bv", 1, d, ParamStore::Init::Normal, 0.4);
  w.wo = &params.create("wo", d, d, ParamStore::Init::Normal, 0.4);
  w.bo = &params.create("bo", 1, d, ParamStore::Init::Normal, 0.4);
  Param& xin = params.create("x", 4, d, ParamStore::Init::Normal, 0.8);
  Tensor weights = random_tensor(4, d, rng);

  AttentionShape shape;
  shape.batch = 2;
  shape.q_len = 2;
  shape.kv_len = 2;
  shape.kv_batch = 2;
  shape.heads = 2;
  shape.causal = true;

  auto build = [&](Tape& t) {
    Value out = multi_head_attention(t, t.param(xin), t.param(xin), w, shape);
    return t.sum_all(t.mul(out, t.constant(weights)));
  };
  auto report = finite_difference_check(
      build, {w.wq, w.bq, w.wk, w.wv, w.wo, w.bo, &xin}, 1e-4, 8, rng);
  CHECK(report.pass);
}

TEST_CASE("layer_norm of a constant vector is zero") {
  Tape tape;
  ParamStore params(1);
  Param& g = params.create("g", 1, 5, ParamStore::Init::Zero);
  g.value.fill(1.0);
  Param& b = params.create("b", 1, 5, ParamStore::Init::Zero);
  Tensor x(2, 5);
  x.fill(3.25);
  Value out = tape.layer_norm(tape.constant(x), tape.param(g), tape.param(b));
  for (int64_t i = 0; i < 10; ++i) CHECK(std::abs(tape.value(out).v[i]) < 1e-9);
}

TEST_CASE("layer_norm standardizes each row") {
  Rng rng(31);
  Tape tape;
  ParamStore params(31);
  Param& g = params.create("g", 1, 16, ParamStore::Init::Zero);
  g.value.fill(1.0);
  Param& b = params.create("b", 1, 16, ParamStore::Init::Zero);
  Tensor x = random_tensor(3, 16, rng, 2.0);
  Value out = tape.layer_norm(tape.constant(x), tape.param(g), tape.param(b));
  for (int64_t i = 0; i < 3; ++i) {
    double mean = 0.0, var = 0.0;
    for (int64_t j = 0; j < 16; ++j) mean += tape.value(out).at(i, j);
    mean /= 16.0;
    for (int64_t j = 0; j < 16; ++j) {
      double c = tape.value(out).at(i, j) - mean;
      var += c * c;
    }
    var /= 16.0;
    CHECK(std::abs(mean) < 1e-9);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-3));
  }
}

TEST_CASE("layer_norm gradient matches finite differences") {
  Rng rng(37);
  ParamStore params(37);
  Param& g = params.create("g", 1, 8, ParamStore::Init::Normal, 0.5);
  Param& b = params.create("b", 1, 8, ParamStore::Init::Normal, 0.5);
  Param& x = params.create("x", 3, 8, ParamStore::Init::Normal, 1.0);
  Tensor weights = random_tensor(3, 8, rng);
  auto build = [&](Tape& t) {
    Value out = t.layer_norm(t.param(x), t.param(g), t.param(b));
    return t.sum_all(t.mul(out, t.constant(weights)));
  };
  auto report = finite_difference_check(build, {&g, &b, &x}, 1e-4, 24, rng);
  CHECK(report.pass);
}

TEST_CASE("elementwise and reduction ops pass finite differences") {
  Rng rng(41);
  ParamStore params(41);
  Param& a = params.create("a", 3, 4, ParamStore::Init::Normal, 0.8);
  Param& b = params.create("b", 3, 4, ParamStore::Init::Normal, 0.8);
  for (auto& x : b.value.v) x += 2.5;  // keep div/log/sqrt away from zero
  // Keep relu and huber coordinates away from their kinks, where central
  // differences are not meaningful.
  for (auto& x : a.value.v) {
    if (std::abs(x) < 0.05) x += 0.1;
    double d = x - 2.5;  // approximate a - b
    if (std::abs(std::abs(d) - 1.0) < 0.05) x += 0.1;
  }
  Tensor weights = random_tensor(3, 4, rng);

  int which = 0;
  auto check = [&](const std::function<Value(Tape&)>& build) {
    auto report = finite_difference_check(build, {&a, &b}, 1e-4, 12, rng);
    CAPTURE(which);
    CAPTURE(report.worst.param);
    CAPTURE(report.worst.index);
    CAPTURE(report.worst.analytic);
    CAPTURE(report.worst.numeric);
    CHECK(report.pass);
    ++which;
  };
  check([&](Tape& t) {
    return t.sum_all(t.mul(t.div(t.param(a), t.param(b)), t.constant(weights)));
  });
  check([&](Tape& t) {
    return t.sum_all(t.mul(t.relu(t.param(a)), t.constant(weights)));
  });
  check([&](Tape& t) {
    return t.sum_all(t.mul(t.sigmoid(t.param(a)), t.constant(weights)));
  });
  check([&](Tape& t) {
    return t.sum_all(t.mul(t.softplus(t.param(a)), t.constant(weights)));
  });
  check([&](Tape& t) {
    return t.sum_all(t.mul(t.log(t.param(b)), t.constant(weights)));
  });
  check([&](Tape& t) {
    return t.sum_all(t.mul(t.sqrt(t.param(b)), t.constant(weights)));
  });
  check([&](Tape& t) {
    return t.mean_all(t.mul(t.softmax_rows(t.param(a)), t.constant(weights)));
  });
  check([&](Tape& t) { return t.huber_mean(t.param(a), t.param(b)); });
  check([&](Tape& t) {
    return t.cosine_distance(t.slice_rows(t.param(a), 0, 1),
                             t.slice_rows(t.param(b), 0, 1));
  });
  check([&](Tape& t) {
    Value g = t.gather_rows(t.param(a), {2, 0, 0, 1});
    return t.sum_all(t.mul(g, t.gather_rows(t.constant(weights), {0, 1, 2, 0})));
  });
  Tensor slice_weights = random_tensor(3, 4, rng);
  check([&](Tape& t) {
    Value c = t.concat_cols({t.param(a), t.param(b)});
    Value s = t.slice_cols(c, 2, 4);
    return t.mean_all(t.mul(s, t.constant(slice_weights)));
  });
}

TEST_CASE("linear layer finite differences are tight") {
  Rng rng(43);
  ParamStore params(43);
  Param& w = params.create("w", 6, 4, ParamStore::Init::Normal, 0.5);
  Param& b = params.create("b", 1, 4, ParamStore::Init::Normal, 0.5);
  Tensor x = random_tensor(5, 6, rng);
  Tensor weights = random_tensor(5, 4, rng);
  auto build = [&](Tape& t) {
    Value out = linear(t, t.constant(x), w, b);
    return t.sum_all(t.mul(out, t.constant(weights)));
  };
  auto report = finite_difference_check(build, {&w, &b}, 1e-6, 24, rng);
  CHECK(report.pass);
  CHECK(report.max_rel_error < 1e-6);
}

TEST_CASE("finite difference check flags a non-reproducible loss") {
  Rng rng(47);
  ParamStore params(47);
  Param& p = params.create("p", 1, 4, ParamStore::Init::Normal, 0.5);
  int calls = 0;
  auto build = [&](Tape& t) {
    ++calls;
    // Loss surface shifts between evaluations, so the tape gradient cannot
    // match the numeric one.
    return t.scale(t.sum_all(t.param(p)), 1.0 + 0.05 * calls);
  };
  auto report = finite_difference_check(build, {&p}, 1e-4, 4, rng);
  CHECK_FALSE(report.pass);
}

TEST_CASE("corrupted analytic gradients are detected") {
  Rng rng(53);
  ParamStore params(53);
  Param& p = params.create("p", 2, 3, ParamStore::Init::Normal, 0.5);
  Tensor weights = random_tensor(2, 3, rng);

  // Analytic gradient via the tape, then deliberately corrupted.
  p.grad.fill(0.0);
  Tape tape;
  Value loss = tape.sum_all(tape.mul(tape.param(p), tape.constant(weights)));
  tape.backward(loss);
  Tensor analytic = p.grad;
  analytic.v[3] += 0.5;

  double theta = p.value.v[3];
  double h = 1e-4 * std::max(1.0, std::abs(theta));
  auto eval = [&]() {
    Tape t2;
    return t2.value(t2.sum_all(t2.mul(t2.param(p), t2.constant(weights)))).v[0];
  };
  p.value.v[3] = theta + h;
  double up = eval();
  p.value.v[3] = theta - h;
  double down = eval();
  p.value.v[3] = theta;
  double numeric = (up - down) / (2 * h);
  double rel = std::abs(analytic.v[3] - numeric) /
               std::max({1.0, std::abs(analytic.v[3]), std::abs(numeric)});
  CHECK(rel > 1e-4);
}

TEST_CASE("adam first step has the closed-form magnitude") {
  ParamStore params(1);
  Param& p = params.create("w", 1, 1, ParamStore::Init::Zero);
  p.value.v[0] = 1.0;
  AdamConfig cfg;
  Adam adam(params, cfg);
  p.grad.v[0] = 1.0;
  adam.step();
  double expected = 1.0 - 0.001 * 1.0 / (1.0 + 1e-8);
  CHECK(p.value.v[0] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("adam with zero gradient leaves parameters unchanged") {
  ParamStore params(1);
  Param& p = params.create("w", 2, 2, ParamStore::Init::Normal);
  Tensor before = p.value;
  AdamConfig cfg;
  Adam adam(params, cfg);
  adam.step();
  CHECK(adam.step_count() == 1);
  for (int64_t i = 0; i < 4; ++i) CHECK(p.value.v[i] == before.v[i]);
}

TEST_CASE("adam warmup scales the learning rate linearly") {
  ParamStore params(1);
  params.create("w", 1, 1, ParamStore::Init::Zero);
  AdamConfig cfg;
  cfg.warmup_steps = 100;
  Adam adam(params, cfg);
  for (int i = 0; i < 50; ++i) adam.step();
  CHECK(adam.effective_lr() == doctest::Approx(0.0005).epsilon(1e-12));
}

TEST_CASE("adam fails fast on non-finite gradients") {
  ParamStore params(1);
  Param& p = params.create("w", 1, 1, ParamStore::Init::Zero);
  AdamConfig cfg;
  Adam adam(params, cfg);
  p.grad.v[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(adam.step(), Error);
}

TEST_CASE("dropout is identity at inference and unbiased in training") {
  Rng rng(61);
  Tensor x(1, 10000);
  x.fill(1.0);
  {
    Tape tape(false);
    Value out = tape.dropout(tape.constant(x), 0.3);
    for (double v : tape.value(out).v) CHECK(v == 1.0);
  }
  {
    Tape tape(true, &rng);
    Value out = tape.dropout(tape.constant(x), 0.3);
    double mean = 0.0;
    for (double v : tape.value(out).v) mean += v;
    mean /= 10000.0;
    CHECK(mean == doctest::Approx(1.0).epsilon(0.05));
  }
}

TEST_CASE("attention weights under the causal mask are exactly zero ahead") {
  // Direct check through softmax_rows with the additive mask.
  Tape tape;
  Tensor scores(2, 2);
  scores.at(0, 1) = -1e30;
  scores.at(1, 0) = 1.3;
  scores.at(1, 1) = 0.2;
  Value probs = tape.softmax_rows(tape.constant(scores));
  CHECK(tape.value(probs).at(0, 0) == 1.0);
  CHECK(tape.value(probs).at(0, 1) == 0.0);
}
