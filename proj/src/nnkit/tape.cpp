#include "pctk/nnkit/tape.hpp"

#include <cmath>
#include <memory>

namespace nnkit {

const Tensor& Var::value() const { return tape->value(*this); }
const std::vector<int>& Var::shape() const { return value().shape(); }

std::uint64_t Tape::next_serial() {
  static std::uint64_t counter = 0;
  return ++counter;
}

const Tensor& Tape::value(Var v) const {
  return nodes_.at(static_cast<std::size_t>(v.id)).val;
}
const Tensor& Tape::grad(Var v) const {
  return nodes_.at(static_cast<std::size_t>(v.id)).grad;
}

Var Tape::make(Tensor val, const char* op, std::function<void()> back) {
  if (check_finite_ && !val.all_finite())
    throw pctk::NumericsError(std::string("non-finite values produced by ") + op);
  Node n;
  n.grad = Tensor(val.shape());
  n.val = std::move(val);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

// ====================================================================
//  matmul kernels (row-major)
// ====================================================================

namespace {

// C[M,N] += A[M,K] * B[K,N]
void mm_nn(const double* a, const double* b, double* c, int M, int K, int N) {
  for (int m = 0; m < M; ++m) {
    const double* arow = a + static_cast<std::size_t>(m) * K;
    double* crow = c + static_cast<std::size_t>(m) * N;
    for (int k = 0; k < K; ++k) {
      const double av = arow[k];
      const double* brow = b + static_cast<std::size_t>(k) * N;
      for (int n = 0; n < N; ++n) crow[n] += av * brow[n];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
void mm_nt(const double* a, const double* b, double* c, int M, int N, int K) {
  for (int m = 0; m < M; ++m) {
    const double* arow = a + static_cast<std::size_t>(m) * K;
    double* crow = c + static_cast<std::size_t>(m) * N;
    for (int n = 0; n < N; ++n) {
      const double* brow = b + static_cast<std::size_t>(n) * K;
      double acc = 0.0;
      for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
      crow[n] += acc;
    }
  }
}

// C[K,N] += A[M,K]^T * B[M,N]
void mm_tn(const double* a, const double* b, double* c, int M, int K, int N) {
  for (int m = 0; m < M; ++m) {
    const double* arow = a + static_cast<std::size_t>(m) * K;
    const double* brow = b + static_cast<std::size_t>(m) * N;
    for (int k = 0; k < K; ++k) {
      const double av = arow[k];
      double* crow = c + static_cast<std::size_t>(k) * N;
      for (int n = 0; n < N; ++n) crow[n] += av * brow[n];
    }
  }
}

int last_dim(const Tensor& t) { return t.dim(t.rank() - 1); }

int leading_count(const Tensor& t) {
  return static_cast<int>(t.numel()) / last_dim(t);
}

}  // namespace

// ====================================================================
//  leaves
// ====================================================================

Var Tape::leaf(Tensor value) { return make(std::move(value), "leaf"); }

Var Tape::param(Parameter& p) {
  Var v = make(p.value, "param");
  nodes_.back().sink = &p;
  return v;
}

Var Tape::constant(double v) { return make(Tensor::scalar(v), "constant"); }

// ====================================================================
//  elementwise / scalar ops
// ====================================================================

Var Tape::add(Var a, Var b) {
  const Tensor& av = val_of(a.id);
  const Tensor& bv = val_of(b.id);
  if (!av.same_shape(bv))
    throw pctk::ShapeError("add: shapes differ: " + av.shape_str() + " vs " +
                           bv.shape_str());
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  Var o = make(std::move(out), "add");
  int ai = a.id, bi = b.id, oi = o.id;
  nodes_.back().back = [this, ai, bi, oi] {
    const Tensor& g = nodes_[static_cast<std::size_t>(oi)].grad;
    Tensor& ga = grad_mut(ai);
    Tensor& gb = grad_mut(bi);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      ga[i] += g[i];
      gb[i] += g[i];
    }
  };
  return o;
}

Var Tape::sub(Var a, Var b) {
  const Tensor& av = val_of(a.id);
  const Tensor& bv = val_of(b.id);
  if (!av.same_shape(bv))
    throw pctk::ShapeError("sub: shapes differ: " + av.shape_str() + " vs " +
                           bv.shape_str());
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  Var o = make(std::move(out), "sub");
  int ai = a.id, bi = b.id, oi = o.id;
  nodes_.back().back = [this, ai, bi, oi] {
    const Tensor& g = nodes_[static_cast<std::size_t>(oi)].grad;
    Tensor& ga = grad_mut(ai);
    Tensor& gb = grad_mut(bi);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      ga[i] += g[i];
      gb[i] -= g[i];
    }
  };
  return o;
}

Var Tape::mul(Var a, Var b) {
  const Tensor& av = val_of(a.id);
  const Tensor& bv = val_of(b.id);
  const bool a_scalar = av.numel() == 1 && bv.numel() > 1;
  const bool b_scalar = bv.numel() == 1 && av.numel() > 1;
  if (!a_scalar && !b_scalar && !av.same_shape(bv))
    throw pctk::ShapeError("mul: shapes differ and neither side is scalar: " +
                           av.shape_str() + " vs " + bv.shape_str());

  Tensor out = a_scalar ? bv : av;
  if (a_scalar) {
    const double s = av[0];
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
  } else if (b_scalar) {
    const double s = bv[0];
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
  } else {
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  }
  Var o = make(std::move(out), "mul");
  int ai = a.id, bi = b.id, oi = o.id;
  nodes_.back().back = [this, ai, bi, oi, a_scalar, b_scalar] {
    const Tensor& g = nodes_[static_cast<std::size_t>(oi)].grad;
    const Tensor& av2 = val_of(ai);
    const Tensor& bv2 = val_of(bi);
    Tensor& ga = grad_mut(ai);
    Tensor& gb = grad_mut(bi);
    if (a_scalar) {
      double acc = 0.0;
      const double s = av2[0];
      for (std::size_t i = 0; i < g.numel(); ++i) {
        acc += g[i] * bv2[i];
        gb[i] += g[i] * s;
      }
      ga[0] += acc;
    } else if (b_scalar) {
      double acc = 0.0;
      const double s = bv2[0];
      for (std::size_t i = 0; i < g.numel(); ++i) {
        acc += g[i] * av2[i];
        ga[i] += g[i] * s;
      }
      gb[0] += acc;
    } else {
      for (std::size_t i = 0; i < g.numel(); ++i) {
        ga[i] += g[i] * bv2[i];
        gb[i] += g[i] * av2[i];
      }
    }
  };
  return o;
}

Var Tape::scale(Var a, double c) {
  Tensor out = val_of(a.id);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
  Var o = make(std::move(out), "scale");
  int ai = a.id, oi = o.id;
  nodes_.back().back = [this, ai, oi, c] {
    const Tensor& g = nodes_[static_cast<std::size_t>(oi)].grad;
    Tensor& ga = grad_mut(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
  };
  return o;
}

Var Tape::sigmoid(Var a) {
  Tensor out = val_of(a.id);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
  Var o = make(std::move(out), "sigmoid");
  int ai = a.id, oi = o.id;
  nodes_.back().back = [this, ai, oi] {
    const Tensor& g = nodes_[static_cast<std::size_t>(oi)].grad;
    const Tensor& s = val_of(oi);
    Tensor& ga = grad_mut(ai);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * s[i] * (1.0 - s[i]);
  };
  return o;
}

Var Tape::relu(Var a) {
  Tensor out = val_of(a.id);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
  Var o = make(std::move(out), "relu");
  int ai = a.id, oi = o.id;
  nodes_.back().back = [this, ai, oi] {
    const Tensor& g = nodes_[static_cast<std::size_t>(oi)].grad;
    const Tensor& s = val_of(oi);
    Tensor& ga = grad_mut(ai);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (s[i] > 0.0) ga[i] += g[i];
  };
  return o;
}

Var Tape::sum_all(Var a) {
  const Tensor& av = val_of(a.id);
  double acc = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) acc += av[i];
  Var o = make(Tensor::scalar(acc), "sum_all");
  int ai = a.id, oi = o.id;
  nodes_.back().back = [this, ai, oi] {
    const double g0 = nodes_[static_cast<std::size_t>(oi)].grad[0];
    Tensor& ga = grad_mut(ai);
    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g0;
  };
  return o;
}

Var Tape::select(Var a, int i) {
  const Tensor& av = val_of(a.id);
  if (av.rank() != 1) throw pctk::ShapeError("select: operand must be rank 1");
  if (i < 0 || i >= av.dim(0)) throw pctk::ConfigError("select: index out of range");
  Var o = make(Tensor::scalar(av[static_cast<std::size_t>(i)]), "select");
  int ai = a.id, oi = o.id;
  nodes_.back().back = [this, ai, oi, i] {
    grad_mut(ai)[static_cast<std::size_t>(i)] +=
        nodes_[static_cast<std::size_t>(oi)].grad[0];
  };
  return o;
}

// ====================================================================
//  dense NN ops
// ====================================================================

Var Tape::matmul(Var x, Var w) {
  const Tensor& xv = val_of(x.id);
  const Tensor& wv = val_of(w.id);
  if (wv.rank() != 2) throw pctk::ShapeError("matmul: weight must be rank 2");
  const int k = last_dim(xv);
  if (wv.dim(0) != k)
    throw pctk::ShapeError("matmul: inner dims differ: " + xv.shape_str() + " @ " +
                           wv.shape_str());
  const int n = wv.dim(1);
  const int m = leading_count(xv);
  std::vector<int> out_shape = xv.shape();
  out_shape.back() = n;
  Tensor out(out_shape);
  mm_nn(xv.data(), wv.data(), out.data(), m, k, n);
  Var o = make(std::move(out), "matmul");
  int xi = x.id, wi = w.id, oi = o.id;
  nodes_.back().back = [this, xi, wi, oi, m, k, n] {
    const Tensor& g = nodes_[static_cast<std::size_t>(oi)].grad;
    const Tensor& xv2 = val_of(xi);
    const Tensor& wv2 = val_of(wi);
    // dX += dY W^T ; dW += X^T dY
    mm_nt(g.data(), wv2.data(), grad_mut(xi).data(), m, k, n);
    mm_tn(xv2.data(), g.data(), grad_mut(wi).data(), m, k, n);
  };
  return o;
}

Var Tape::add_bias(Var x, Var b) {
  const Tensor& xv = val_of(x.id);
  const Tensor& bv = val_of(b.id);
  if (bv.rank() != 1) throw pctk::ShapeError("add_bias: bias must be rank 1");
  const int n = last_dim(xv);
  if (bv.dim(0) != n)
    throw pctk::ShapeError("add_bias: bias size does not match last axis");
  const int m = leading_count(xv);
  Tensor out = xv;
  for (int r = 0; r < m; ++r) {
    double* row = out.data() + static_cast<std::size_t>(r) * n;
    for (int c = 0; c < n; ++c) row[c] += bv[static_cast<std::size_t>(c)];
  }
  Var o = make(std::move(out), "add_bias");
  int xi = x.id, bi = b.id, oi = o.id;
  nodes_.back().back = [this, xi, bi, oi, m, n] {
    const Tensor& g = nodes_[static_cast<std::size_t>(oi)].grad;
    Tensor& gx = grad_mut(xi);
    Tensor& gb = grad_mut(bi);
    for (int r = 0; r < m; ++r) {
      const double* grow = g.data() + static_cast<std::size_t>(r) * n;
      double* gxrow = gx.data() + static_cast<std::size_t>(r) * n;
      for (int c = 0; c < n; ++c) {
        gxrow[c] += grow[c];
        gb[static_cast<std::size_t>(c)] += grow[c];
      }
    }
  };
  return o;
}

Var Tape::layer_norm(Var x, Var gain, Var bias, double eps) {
  const Tensor& xv = val_of(x.id);
  const Tensor& gv = val_of(gain.id);
  const Tensor& bv = val_of(bias.id);
  const int w = last_dim(xv);
  if (gv.rank() != 1 || bv.rank() != 1 || gv.dim(0) != w || bv.dim(0) != w)
    throw pctk::ShapeError("layer_norm: gain/bias must be rank-1 of the width");
  if (eps < 0.0) throw pctk::DomainError("layer_norm: eps must be >= 0");
  const int m = leading_count(xv);

  auto saved_xhat = std::make_shared<std::vector<double>>(xv.numel());
  auto saved_inv = std::make_shared<std::vector<double>>(static_cast<std::size_t>(m));
  Tensor out(xv.shape());
  for (int r = 0; r < m; ++r) {
    const double* row = xv.data() + static_cast<std::size_t>(r) * w;
    double* orow = out.data() + static_cast<std::size_t>(r) * w;
    double* xhrow = saved_xhat->data() + static_cast<std::size_t>(r) * w;
    double mean = 0.0;
    for (int c = 0; c < w; ++c) mean += row[c];
    mean /= w;
    double var = 0.0;
    for (int c = 0; c < w; ++c) {
      const double d = row[c] - mean;
      var += d * d;
    }
    var /= w;  // population variance
    const double inv = 1.0 / std::sqrt(var + eps);
    (*saved_inv)[static_cast<std::size_t>(r)] = inv;
    for (int c = 0; c < w; ++c) {
      const double xh = (row[c] - mean) * inv;
      xhrow[c] = xh;
      orow[c] = gv[static_cast<std::size_t>(c)] * xh + bv[static_cast<std::size_t>(c)];
    }
  }
  Var o = make(std::move(out), "layer_norm");
  int xi = x.id, gi = gain.id, bi = bias.id, oi = o.id;
  nodes_.back().back = [this, xi, gi, bi, oi, m, w, saved_xhat, saved_inv] {
    const Tensor& g = nodes_[static_cast<std::size_t>(oi)].grad;
    const Tensor& gv2 = val_of(gi);
    Tensor& gx = grad_mut(xi);
    Tensor& gg = grad_mut(gi);
    Tensor& gb = grad_mut(bi);
    std::vector<double> dxh(static_cast<std::size_t>(w));
    for (int r = 0; r < m; ++r) {
      const double* grow = g.data() + static_cast<std::size_t>(r) * w;
      const double* xhrow = saved_xhat->data() + static_cast<std::size_t>(r) * w;
      const double inv = (*saved_inv)[static_cast<std::size_t>(r)];
      double m1 = 0.0, m2 = 0.0;
      for (int c = 0; c < w; ++c) {
        gg[static_cast<std::size_t>(c)] += grow[c] * xhrow[c];
        gb[static_cast<std::size_t>(c)] += grow[c];
        const double d = grow[c] * gv2[static_cast<std::size_t>(c)];
        dxh[static_cast<std::size_t>(c)] = d;
        m1 += d;
        m2 += d * xhrow[c];
      }
      m1 /= w;
      m2 /= w;
      double* gxrow = gx.data() + static_cast<std::size_t>(r) * w;
      for (int c = 0; c < w; ++c)
        gxrow[c] += inv * (dxh[static_cast<std::size_t>(c)] - m1 - xhrow[c] * m2);
    }
  };
  return o;
}

Var Tape::attention(Var x, const AttentionParams& p, int heads, bool causal) {
  const Tensor& xv = val_of(x.id);
  if (xv.rank() != 3) throw pctk::ShapeError("attention: input must be [batch, seq, width]");
  const int b = xv.dim(0), s = xv.dim(1), w = xv.dim(2);
  if (heads <= 0 || w % heads != 0)
    throw pctk::ConfigError("attention: width must be divisible by heads");
  const int dh = w / heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (Var m : {p.wq, p.wk, p.wv, p.wo}) {
    const Tensor& t = val_of(m.id);
    if (t.rank() != 2 || t.dim(0) != w || t.dim(1) != w)
      throw pctk::ShapeError("attention: projection weights must be [width, width]");
  }
  for (Var m : {p.bq, p.bv, p.bo}) {
    const Tensor& t = val_of(m.id);
    if (t.rank() != 1 || t.dim(0) != w)
      throw pctk::ShapeError("attention: projection biases must be [width]");
  }

  struct Saved {
    std::vector<double> q, k, v, probs, concat;
  };
  auto sv = std::make_shared<Saved>();
  const std::size_t bsw = static_cast<std::size_t>(b) * s * w;
  sv->q.assign(bsw, 0.0);
  sv->k.assign(bsw, 0.0);
  sv->v.assign(bsw, 0.0);
  sv->concat.assign(bsw, 0.0);
  sv->probs.assign(static_cast<std::size_t>(b) * heads * s * s, 0.0);

  const Tensor& wq = val_of(p.wq.id);
  const Tensor& wk = val_of(p.wk.id);
  const Tensor& wv = val_of(p.wv.id);
  const Tensor& wo = val_of(p.wo.id);
  const Tensor& bq = val_of(p.bq.id);
  const Tensor& bv = val_of(p.bv.id);
  const Tensor& bo = val_of(p.bo.id);

  Tensor out({b, s, w});
  std::vector<double> scores(static_cast<std::size_t>(s));
  for (int bb = 0; bb < b; ++bb) {
    const std::size_t xoff = static_cast<std::size_t>(bb) * s * w;
    const double* xb = xv.data() + xoff;
    double* q = sv->q.data() + xoff;
    double* k = sv->k.data() + xoff;
    double* v = sv->v.data() + xoff;
    double* concat = sv->concat.data() + xoff;
    mm_nn(xb, wq.data(), q, s, w, w);
    mm_nn(xb, wk.data(), k, s, w, w);
    mm_nn(xb, wv.data(), v, s, w, w);
    for (int i = 0; i < s; ++i)
      for (int c = 0; c < w; ++c) {
        q[static_cast<std::size_t>(i) * w + c] += bq[static_cast<std::size_t>(c)];
        v[static_cast<std::size_t>(i) * w + c] += bv[static_cast<std::size_t>(c)];
      }
    for (int h = 0; h < heads; ++h) {
      const int hoff = h * dh;
      double* probs = sv->probs.data() +
                      (static_cast<std::size_t>(bb) * heads + h) * s * s;
      for (int i = 0; i < s; ++i) {
        const int jmax = causal ? i : s - 1;
        const double* qi = q + static_cast<std::size_t>(i) * w + hoff;
        double mx = -1e300;
        for (int j = 0; j <= jmax; ++j) {
          const double* kj = k + static_cast<std::size_t>(j) * w + hoff;
          double acc = 0.0;
          for (int c = 0; c < dh; ++c) acc += qi[c] * kj[c];
          scores[static_cast<std::size_t>(j)] = acc * att_scale;
          mx = std::max(mx, scores[static_cast<std::size_t>(j)]);
        }
        double z = 0.0;
        for (int j = 0; j <= jmax; ++j) {
          const double e = std::exp(scores[static_cast<std::size_t>(j)] - mx);
          scores[static_cast<std::size_t>(j)] = e;
          z += e;
        }
        double* prow = probs + static_cast<std::size_t>(i) * s;
        for (int j = 0; j <= jmax; ++j) prow[j] = scores[static_cast<std::size_t>(j)] / z;
        // masked positions beyond jmax stay exactly 0 in probs
        double* orow = concat + static_cast<std::size_t>(i) * w + hoff;
        for (int j = 0; j <= jmax; ++j) {
          const double a = prow[j];
          const double* vj = v + static_cast<std::size_t>(j) * w + hoff;
          for (int c = 0; c < dh; ++c) orow[c] += a * vj[c];
        }
      }
    }
    // output projection
    double* ob = out.data() + xoff;
    mm_nn(concat, wo.data(), ob, s, w, w);
    for (int i = 0; i < s; ++i)
      for (int c = 0; c < w; ++c)
        ob[static_cast<std::size_t>(i) * w + c] += bo[static_cast<std::size_t>(c)];
  }

  Var o = make(std::move(out), "attention");
  int xi = x.id, oi = o.id;
  int wqi = p.wq.id, wki = p.wk.id, wvi = p.wv.id, woi = p.wo.id;
  int bqi = p.bq.id, bvi = p.bv.id, boi = p.bo.id;
  nodes_.back().back = [this, xi, oi, wqi, wki, wvi, woi, bqi, bvi, boi, sv, b, s,
                        w, heads, dh, att_scale, causal] {
    const Tensor& g = nodes_[static_cast<std::size_t>(oi)].grad;
    const Tensor& wq2 = val_of(wqi);
    const Tensor& wk2 = val_of(wki);
    const Tensor& wv2 = val_of(wvi);
    const Tensor& wo2 = val_of(woi);
    const Tensor& xv2 = val_of(xi);
    Tensor& gx = grad_mut(xi);
    Tensor& gwq = grad_mut(wqi);
    Tensor& gwk = grad_mut(wki);
    Tensor& gwv = grad_mut(wvi);
    Tensor& gwo = grad_mut(woi);
    Tensor& gbq = grad_mut(bqi);
    Tensor& gbv = grad_mut(bvi);
    Tensor& gbo = grad_mut(boi);

    const std::size_t sw = static_cast<std::size_t>(s) * w;
    std::vector<double> dconcat(sw), dq(sw), dk(sw), dv(sw), dp(static_cast<std::size_t>(s));
    for (int bb = 0; bb < b; ++bb) {
      const std::size_t xoff = static_cast<std::size_t>(bb) * sw;
      const double* gout = g.data() + xoff;
      const double* concat = sv->concat.data() + xoff;
      const double* q = sv->q.data() + xoff;
      const double* k = sv->k.data() + xoff;
      const double* v = sv->v.data() + xoff;
      std::fill(dconcat.begin(), dconcat.end(), 0.0);
      std::fill(dq.begin(), dq.end(), 0.0);
      std::fill(dk.begin(), dk.end(), 0.0);
      std::fill(dv.begin(), dv.end(), 0.0);

      // out = concat @ Wo + bo
      mm_tn(concat, gout, gwo.data(), s, w, w);
      for (int i = 0; i < s; ++i)
        for (int c = 0; c < w; ++c)
          gbo[static_cast<std::size_t>(c)] += gout[static_cast<std::size_t>(i) * w + c];
      mm_nt(gout, wo2.data(), dconcat.data(), s, w, w);

      for (int h = 0; h < heads; ++h) {
        const int hoff = h * dh;
        const double* probs = sv->probs.data() +
                              (static_cast<std::size_t>(bb) * heads + h) * s * s;
        for (int i = 0; i < s; ++i) {
          const int jmax = causal ? i : s - 1;
          const double* doh = dconcat.data() + static_cast<std::size_t>(i) * w + hoff;
          const double* prow = probs + static_cast<std::size_t>(i) * s;
          // dA = dOh . Vh^T ; dV += A^T dOh
          double dot_pa = 0.0;
          for (int j = 0; j <= jmax; ++j) {
            const double* vj = v + static_cast<std::size_t>(j) * w + hoff;
            double acc = 0.0;
            for (int c = 0; c < dh; ++c) acc += doh[c] * vj[c];
            dp[static_cast<std::size_t>(j)] = acc;
            dot_pa += acc * prow[j];
            double* dvj = dv.data() + static_cast<std::size_t>(j) * w + hoff;
            const double a = prow[j];
            for (int c = 0; c < dh; ++c) dvj[c] += a * doh[c];
          }
          // softmax backward, then score -> q, k
          const double* qi = q + static_cast<std::size_t>(i) * w + hoff;
          double* dqi = dq.data() + static_cast<std::size_t>(i) * w + hoff;
          for (int j = 0; j <= jmax; ++j) {
            const double dscore =
                prow[j] * (dp[static_cast<std::size_t>(j)] - dot_pa) * att_scale;
            const double* kj = k + static_cast<std::size_t>(j) * w + hoff;
            double* dkj = dk.data() + static_cast<std::size_t>(j) * w + hoff;
            for (int c = 0; c < dh; ++c) {
              dqi[c] += dscore * kj[c];
              dkj[c] += dscore * qi[c];
            }
          }
        }
      }

      // q = xb @ Wq + bq (and same for k, v)
      const double* xb = xv2.data() + xoff;
      double* gxb = gx.data() + xoff;
      mm_tn(xb, dq.data(), gwq.data(), s, w, w);
      mm_tn(xb, dk.data(), gwk.data(), s, w, w);
      mm_tn(xb, dv.data(), gwv.data(), s, w, w);
      mm_nt(dq.data(), wq2.data(), gxb, s, w, w);
      mm_nt(dk.data(), wk2.data(), gxb, s, w, w);
      mm_nt(dv.data(), wv2.data(), gxb, s, w, w);
      for (int i = 0; i < s; ++i)
        for (int c = 0; c < w; ++c) {
          gbq[static_cast<std::size_t>(c)] += dq[static_cast<std::size_t>(i) * w + c];
          gbv[static_cast<std::size_t>(c)] += dv[static_cast<std::size_t>(i) * w + c];
        }
    }
  };
  return o;
}

Var Tape::dropout(Var x, double rate, Mode mode, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw pctk::DomainError("dropout: rate must lie in [0, 1)");
  if (mode == Mode::Eval || rate == 0.0) return x;  // exact identity, no node
  const Tensor& xv = val_of(x.id);
  const double keep = 1.0 - rate;
  const double scl = 1.0 / keep;
  auto mask = std::make_shared<std::vector<unsigned char>>(xv.numel());
  Tensor out = xv;
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const bool on = rng.uniform() < keep;
    (*mask)[i] = on ? 1 : 0;
    out[i] = on ? out[i] * scl : 0.0;
  }
  Var o = make(std::move(out), "dropout");
  int xi = x.id, oi = o.id;
  nodes_.back().back = [this, xi, oi, mask, scl] {
    const Tensor& g = nodes_[static_cast<std::size_t>(oi)].grad;
    Tensor& gx = grad_mut(xi);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if ((*mask)[i]) gx[i] += g[i] * scl;
  };
  return o;
}

Var Tape::embedding(const std::vector<int>& ids, int batch, int seq, Var table) {
  const Tensor& tv = val_of(table.id);
  if (tv.rank() != 2) throw pctk::ShapeError("embedding: table must be rank 2");
  if (static_cast<std::size_t>(batch) * seq != ids.size())
    throw pctk::ShapeError("embedding: id count does not match batch*seq");
  const int v = tv.dim(0), w = tv.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw pctk::DataError("embedding: token id " + std::to_string(id) +
                            " outside vocab of size " + std::to_string(v));
  Tensor out({batch, seq, w});
  for (std::size_t r = 0; r < ids.size(); ++r) {
    const double* src = tv.data() + static_cast<std::size_t>(ids[r]) * w;
    double* dst = out.data() + r * w;
    for (int c = 0; c < w; ++c) dst[c] = src[c];
  }
  Var o = make(std::move(out), "embedding");
  auto ids_copy = std::make_shared<std::vector<int>>(ids);
  int ti = table.id, oi = o.id;
  nodes_.back().back = [this, ti, oi, ids_copy, w] {
    const Tensor& g = nodes_[static_cast<std::size_t>(oi)].grad;
    Tensor& gt = grad_mut(ti);
    for (std::size_t r = 0; r < ids_copy->size(); ++r) {
      const double* src = g.data() + r * w;
      double* dst = gt.data() + static_cast<std::size_t>((*ids_copy)[r]) * w;
      for (int c = 0; c < w; ++c) dst[c] += src[c];
    }
  };
  return o;
}

Var Tape::cross_entropy(Var logits, const std::vector<int>& targets) {
  const Tensor& lv = val_of(logits.id);
  const int v = last_dim(lv);
  const int m = leading_count(lv);
  if (static_cast<std::size_t>(m) != targets.size())
    throw pctk::ShapeError("cross_entropy: target count does not match positions");
  for (int t : targets)
    if (t < 0 || t >= v)
      throw pctk::DataError("cross_entropy: target id outside vocab");
  auto probs = std::make_shared<std::vector<double>>(lv.numel());
  double nll = 0.0;
  for (int r = 0; r < m; ++r) {
    const double* row = lv.data() + static_cast<std::size_t>(r) * v;
    double* prow = probs->data() + static_cast<std::size_t>(r) * v;
    double mx = row[0];
    for (int c = 1; c < v; ++c) mx = std::max(mx, row[c]);
    double z = 0.0;
    for (int c = 0; c < v; ++c) {
      const double e = std::exp(row[c] - mx);
      prow[c] = e;
      z += e;
    }
    for (int c = 0; c < v; ++c) prow[c] /= z;
    nll -= std::log(prow[targets[static_cast<std::size_t>(r)]]);
  }
  Var o = make(Tensor::scalar(nll / m), "cross_entropy");
  auto tgt = std::make_shared<std::vector<int>>(targets);
  int li = logits.id, oi = o.id;
  nodes_.back().back = [this, li, oi, probs, tgt, m, v] {
    const double g0 = nodes_[static_cast<std::size_t>(oi)].grad[0];
    Tensor& gl = grad_mut(li);
    const double inv_m = g0 / m;
    for (int r = 0; r < m; ++r) {
      const double* prow = probs->data() + static_cast<std::size_t>(r) * v;
      double* grow = gl.data() + static_cast<std::size_t>(r) * v;
      const int t = (*tgt)[static_cast<std::size_t>(r)];
      for (int c = 0; c < v; ++c) grow[c] += (prow[c] - (c == t ? 1.0 : 0.0)) * inv_m;
    }
  };
  return o;
}

// ====================================================================
//  engine
// ====================================================================

void Tape::backward(Var loss) {
  if (loss.tape != this) throw pctk::ConfigError("backward: loss from another tape");
  Node& ln = nodes_.at(static_cast<std::size_t>(loss.id));
  if (ln.val.numel() != 1) throw pctk::ShapeError("backward: loss must be a scalar");
  ln.grad[0] = 1.0;
  ln.has_grad = true;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.has_grad) continue;
    if (check_finite_ && !n.grad.all_finite())
      throw pctk::NumericsError("non-finite gradient during backward");
    if (n.back) n.back();
  }
}

void Tape::flush_param_grads() {
  for (Node& n : nodes_) {
    if (n.sink != nullptr && n.has_grad) {
      Tensor& g = n.sink->grad;
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[i];
    }
  }
}

}  // namespace nnkit
