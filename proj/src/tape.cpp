#include "skirl/tape.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

#include "skirl/kernels.hpp"

namespace skirl::nd {

namespace {
constexpr float kPi = 3.14159265358979323846f;

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

std::pair<int, int> rows_cols(const Shape& s) {
  int k = s.back();
  int rows = 1;
  for (size_t i = 0; i + 1 < s.size(); ++i) rows *= s[i];
  return {rows, k};
}
}  // namespace

const Tensor& Var::value() const { return tape->value(*this); }

float Var::item() const {
  if (value().size() != 1) throw std::logic_error("item() on non-scalar");
  return value()[0];
}

Var Tape::leaf(Tensor value, bool requires_grad) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{this, int(nodes_.size()) - 1};
}

Var Tape::emit(Tensor value, const std::vector<Var>& parents,
               std::function<void(Tape&, const std::vector<float>&)> backfn) {
  if (!kern::active().all_finite(value.data(), value.size()))
    throw NonFinite("non-finite value in forward op output");
  Node n;
  n.value = std::move(value);
  for (const Var& p : parents)
    if (p.ok() && nodes_[size_t(p.node)].requires_grad) n.requires_grad = true;
  if (n.requires_grad) n.backfn = std::move(backfn);
  nodes_.push_back(std::move(n));
  return Var{this, int(nodes_.size()) - 1};
}

void Tape::accum(Var v, const float* g, int n) { accum_at(v, 0, g, n); }

void Tape::accum_at(Var v, int offset, const float* g, int n) {
  Node& node = nodes_[size_t(v.node)];
  if (!node.requires_grad) return;
  if (node.grad.empty()) node.grad.assign(size_t(node.value.size()), 0.0f);
  kern::active().axpy(1.0f, g, node.grad.data() + offset, n);
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw std::logic_error("backward: var from another tape");
  if (ran_backward_) throw std::logic_error("backward already ran on this tape");
  Node& top = nodes_[size_t(loss.node)];
  if (top.value.size() != 1) throw std::logic_error("backward: loss must be scalar");
  if (!top.requires_grad) throw std::logic_error("backward: loss does not require grad");
  ran_backward_ = true;
  top.grad.assign(1, 1.0f);
  for (int i = loss.node; i >= 0; --i) {
    Node& n = nodes_[size_t(i)];
    if (!n.grad.empty() && n.backfn) n.backfn(*this, n.grad);
  }
}

Tensor Tape::grad(Var v) const {
  const Node& n = nodes_[size_t(v.node)];
  if (n.grad.empty()) return Tensor::zeros(n.value.shape());
  return Tensor(n.value.shape(), n.grad);
}

// ---- elementwise ----

Var add(Var a, Var b) {
  check_same_shape(a, b, "add");
  int n = a.size();
  std::vector<float> out(size_t(n));
  kern::active().add(a.value().data(), b.value().data(), out.data(), n);
  return a.tape->emit(Tensor(a.shape(), std::move(out)), {a, b},
                      [a, b, n](Tape& t, const std::vector<float>& g) {
                        t.accum(a, g.data(), n);
                        t.accum(b, g.data(), n);
                      });
}

Var sub(Var a, Var b) {
  check_same_shape(a, b, "sub");
  int n = a.size();
  std::vector<float> out(size_t(n));
  kern::active().sub(a.value().data(), b.value().data(), out.data(), n);
  return a.tape->emit(Tensor(a.shape(), std::move(out)), {a, b},
                      [a, b, n](Tape& t, const std::vector<float>& g) {
                        t.accum(a, g.data(), n);
                        std::vector<float> ng(size_t(n));
                        kern::active().scale(g.data(), -1.0f, ng.data(), n);
                        t.accum(b, ng.data(), n);
                      });
}

Var mul(Var a, Var b) {
  check_same_shape(a, b, "mul");
  int n = a.size();
  std::vector<float> out(size_t(n));
  kern::active().mul(a.value().data(), b.value().data(), out.data(), n);
  Tensor av = a.value(), bv = b.value();
  return a.tape->emit(Tensor(a.shape(), std::move(out)), {a, b},
                      [a, b, av, bv, n](Tape& t, const std::vector<float>& g) {
                        std::vector<float> buf(size_t(n));
                        kern::active().mul(g.data(), bv.data(), buf.data(), n);
                        t.accum(a, buf.data(), n);
                        kern::active().mul(g.data(), av.data(), buf.data(), n);
                        t.accum(b, buf.data(), n);
                      });
}

Var neg(Var a) { return scale(a, -1.0f); }

Var scale(Var a, float s) {
  int n = a.size();
  std::vector<float> out(size_t(n));
  kern::active().scale(a.value().data(), s, out.data(), n);
  return a.tape->emit(Tensor(a.shape(), std::move(out)), {a},
                      [a, s, n](Tape& t, const std::vector<float>& g) {
                        std::vector<float> buf(size_t(n));
                        kern::active().scale(g.data(), s, buf.data(), n);
                        t.accum(a, buf.data(), n);
                      });
}

Var add_bias(Var x, Var b) {
  if (x.shape().size() == 1) return add(x, b);
  auto [m, n] = rows_cols(x.shape());
  if (b.size() != n) throw std::invalid_argument("add_bias: bias width mismatch");
  std::vector<float> out(size_t(m) * n);
  for (int r = 0; r < m; ++r)
    kern::active().add(x.value().data() + size_t(r) * n, b.value().data(),
                       out.data() + size_t(r) * n, n);
  return x.tape->emit(Tensor(x.shape(), std::move(out)), {x, b},
                      [x, b, m, n](Tape& t, const std::vector<float>& g) {
                        t.accum(x, g.data(), m * n);
                        std::vector<float> db(size_t(n), 0.0f);
                        for (int r = 0; r < m; ++r)
                          kern::active().axpy(1.0f, g.data() + size_t(r) * n, db.data(), n);
                        t.accum(b, db.data(), n);
                      });
}

namespace {
template <typename F, typename DF>
Var unary_op(Var a, F f, DF df) {
  int n = a.size();
  const float* x = a.value().data();
  std::vector<float> out(size_t(n));
  for (int i = 0; i < n; ++i) out[i] = f(x[i]);
  Tensor xv = a.value();
  return a.tape->emit(Tensor(a.shape(), std::move(out)), {a},
                      [a, xv, df, n](Tape& t, const std::vector<float>& g) {
                        std::vector<float> buf(size_t(n));
                        for (int i = 0; i < n; ++i) buf[i] = g[i] * df(xv[i]);
                        t.accum(a, buf.data(), n);
                      });
}
}  // namespace

Var relu(Var a) {
  int n = a.size();
  std::vector<float> out(size_t(n));
  kern::active().relu(a.value().data(), out.data(), n);
  Tensor xv = a.value();
  return a.tape->emit(Tensor(a.shape(), std::move(out)), {a},
                      [a, xv, n](Tape& t, const std::vector<float>& g) {
                        std::vector<float> buf(size_t(n), 0.0f);
                        kern::active().relu_grad(xv.data(), g.data(), buf.data(), n);
                        t.accum(a, buf.data(), n);
                      });
}

Var sigmoid(Var a) {
  return unary_op(
      a,
      [](float x) {
        if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
        float e = std::exp(x);
        return e / (1.0f + e);
      },
      [](float x) {
        float y = x >= 0.0f ? 1.0f / (1.0f + std::exp(-x)) : std::exp(x) / (1.0f + std::exp(x));
        return y * (1.0f - y);
      });
}

Var tanh_op(Var a) {
  return unary_op(a, [](float x) { return std::tanh(x); },
                  [](float x) {
                    float y = std::tanh(x);
                    return 1.0f - y * y;
                  });
}

Var exp_op(Var a) {
  return unary_op(a, [](float x) { return std::exp(x); },
                  [](float x) { return std::exp(x); });
}

Var log_op(Var a) {
  return unary_op(a, [](float x) { return std::log(x); },
                  [](float x) { return 1.0f / x; });
}

Var atan_squash(Var a) {
  return unary_op(a, [](float x) { return (2.0f / kPi) * std::atan((kPi / 2.0f) * x); },
                  [](float x) {
                    float u = (kPi / 2.0f) * x;
                    return 1.0f / (1.0f + u * u);
                  });
}

// ---- shape ops ----

Var reshape(Var a, Shape s) {
  Tensor v = a.value().reshaped(std::move(s));
  int n = a.size();
  return a.tape->emit(std::move(v), {a}, [a, n](Tape& t, const std::vector<float>& g) {
    t.accum(a, g.data(), n);
  });
}

Var concat0(std::span<const Var> xs) {
  if (xs.empty()) throw std::invalid_argument("concat0: empty list");
  Shape rest = xs[0].shape();
  int d0 = 0;
  for (const Var& v : xs) {
    const Shape& s = v.shape();
    if (s.size() != rest.size()) throw std::invalid_argument("concat0: rank mismatch");
    for (size_t i = 1; i < s.size(); ++i)
      if (s[i] != rest[i]) throw std::invalid_argument("concat0: trailing dims mismatch");
    d0 += s[0];
  }
  Shape out_shape = rest;
  out_shape[0] = d0;
  std::vector<float> out;
  out.reserve(size_t(shape_size(out_shape)));
  for (const Var& v : xs) out.insert(out.end(), v.value().vec().begin(), v.value().vec().end());
  std::vector<Var> parents(xs.begin(), xs.end());
  return xs[0].tape->emit(Tensor(std::move(out_shape), std::move(out)), parents,
                          [parents](Tape& tp, const std::vector<float>& g) {
                            int off = 0;
                            for (const Var& v : parents) {
                              int n = v.size();
                              tp.accum(v, g.data() + off, n);
                              off += n;
                            }
                          });
}

Var narrow0(Var x, int start, int len) {
  const Shape& s = x.shape();
  int block = 1;
  for (size_t i = 1; i < s.size(); ++i) block *= s[i];
  if (start < 0 || len <= 0 || start + len > s[0])
    throw std::invalid_argument("narrow0: range out of bounds");
  Shape out_shape = s;
  out_shape[0] = len;
  std::vector<float> out(x.value().vec().begin() + size_t(start) * block,
                         x.value().vec().begin() + size_t(start + len) * block);
  return x.tape->emit(Tensor(std::move(out_shape), std::move(out)), {x},
                      [x, start, len, block](Tape& t, const std::vector<float>& g) {
                        t.accum_at(x, start * block, g.data(), len * block);
                      });
}

Var transpose(Var a) {
  const Shape& s = a.shape();
  if (s.size() != 2) throw std::invalid_argument("transpose: need 2-d");
  int m = s[0], n = s[1];
  std::vector<float> out(size_t(m) * n);
  const float* x = a.value().data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[size_t(j) * m + i] = x[size_t(i) * n + j];
  return a.tape->emit(Tensor({n, m}, std::move(out)), {a},
                      [a, m, n](Tape& t, const std::vector<float>& g) {
                        std::vector<float> buf(size_t(m) * n);
                        for (int j = 0; j < n; ++j)
                          for (int i = 0; i < m; ++i)
                            buf[size_t(i) * n + j] = g[size_t(j) * m + i];
                        t.accum(a, buf.data(), m * n);
                      });
}

// ---- matmul ----

Var matmul(Var a, Var b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != 2 || sb.size() != 2) throw std::invalid_argument("matmul: need 2-d operands");
  if (sa[1] != sb[0])
    throw std::invalid_argument("matmul: inner dims disagree " + shape_str(sa) + " x " +
                                shape_str(sb));
  int m = sa[0], k = sa[1], n = sb[1];
  std::vector<float> out(size_t(m) * n);
  kern::active().gemm_nn(a.value().data(), b.value().data(), out.data(), m, k, n);
  Tensor av = a.value(), bv = b.value();
  return a.tape->emit(Tensor({m, n}, std::move(out)), {a, b},
                      [a, b, av, bv, m, k, n](Tape& t, const std::vector<float>& g) {
                        if (t.requires_grad(a)) {
                          std::vector<float> da(size_t(m) * k);
                          kern::active().gemm_nt(g.data(), bv.data(), da.data(), m, n, k);
                          t.accum(a, da.data(), m * k);
                        }
                        if (t.requires_grad(b)) {
                          std::vector<float> db(size_t(k) * n);
                          kern::active().gemm_tn(av.data(), g.data(), db.data(), k, m, n);
                          t.accum(b, db.data(), k * n);
                        }
                      });
}

// ---- reductions ----

Var sum(Var x) {
  int n = x.size();
  float v = float(kern::active().sum(x.value().data(), n));
  return x.tape->emit(Tensor::scalar(v), {x}, [x, n](Tape& t, const std::vector<float>& g) {
    std::vector<float> buf(size_t(n), g[0]);
    t.accum(x, buf.data(), n);
  });
}

Var mean(Var x) { return scale(sum(x), 1.0f / float(x.size())); }

Var sum_axis0(Var x) {
  const Shape& s = x.shape();
  if (s.size() != 2) throw std::invalid_argument("sum_axis0: need 2-d");
  int m = s[0], n = s[1];
  std::vector<float> out(size_t(n), 0.0f);
  for (int r = 0; r < m; ++r)
    kern::active().axpy(1.0f, x.value().data() + size_t(r) * n, out.data(), n);
  return x.tape->emit(Tensor({n}, std::move(out)), {x},
                      [x, m, n](Tape& t, const std::vector<float>& g) {
                        for (int r = 0; r < m; ++r) t.accum_at(x, r * n, g.data(), n);
                      });
}

Var mean_axis0(Var x) { return scale(sum_axis0(x), 1.0f / float(x.shape()[0])); }

Var scale_rows(Var x, Var s) {
  const Shape& xs = x.shape();
  if (xs.size() != 2 || s.size() != xs[0]) throw std::invalid_argument("scale_rows: shape mismatch");
  int m = xs[0], n = xs[1];
  std::vector<float> out(size_t(m) * n);
  for (int r = 0; r < m; ++r)
    kern::active().scale(x.value().data() + size_t(r) * n, s.value()[r],
                         out.data() + size_t(r) * n, n);
  Tensor xv = x.value(), sv = s.value();
  return x.tape->emit(Tensor({m, n}, std::move(out)), {x, s},
                      [x, s, xv, sv, m, n](Tape& t, const std::vector<float>& g) {
                        if (t.requires_grad(x)) {
                          std::vector<float> dx(size_t(m) * n);
                          for (int r = 0; r < m; ++r)
                            kern::active().scale(g.data() + size_t(r) * n, sv[r],
                                                 dx.data() + size_t(r) * n, n);
                          t.accum(x, dx.data(), m * n);
                        }
                        if (t.requires_grad(s)) {
                          std::vector<float> ds(size_t(m));
                          for (int r = 0; r < m; ++r)
                            ds[size_t(r)] = float(kern::active().dot(
                                g.data() + size_t(r) * n, xv.data() + size_t(r) * n, n));
                          t.accum(s, ds.data(), m);
                        }
                      });
}

Var affine_rows(Var x, Var s, Var b) {
  const Shape& xs = x.shape();
  if (xs.size() != 2 || s.size() != xs[0] || b.size() != xs[0])
    throw std::invalid_argument("affine_rows: shape mismatch");
  int m = xs[0], n = xs[1];
  std::vector<float> out(size_t(m) * n);
  for (int r = 0; r < m; ++r) {
    const float* xr = x.value().data() + size_t(r) * n;
    float sv = s.value()[r], bv = b.value()[r];
    float* o = out.data() + size_t(r) * n;
    for (int j = 0; j < n; ++j) o[j] = sv * xr[j] + bv;
  }
  Tensor xv = x.value(), sv = s.value();
  return x.tape->emit(Tensor({m, n}, std::move(out)), {x, s, b},
                      [x, s, b, xv, sv, m, n](Tape& t, const std::vector<float>& g) {
                        if (t.requires_grad(x)) {
                          std::vector<float> dx(size_t(m) * n);
                          for (int r = 0; r < m; ++r)
                            kern::active().scale(g.data() + size_t(r) * n, sv[r],
                                                 dx.data() + size_t(r) * n, n);
                          t.accum(x, dx.data(), m * n);
                        }
                        std::vector<float> ds(size_t(m)), db(size_t(m));
                        for (int r = 0; r < m; ++r) {
                          ds[size_t(r)] = float(kern::active().dot(g.data() + size_t(r) * n,
                                                                   xv.data() + size_t(r) * n, n));
                          db[size_t(r)] = float(kern::active().sum(g.data() + size_t(r) * n, n));
                        }
                        t.accum(s, ds.data(), m);
                        t.accum(b, db.data(), m);
                      });
}

// ---- normalization / regularization ----

Var layer_norm(Var x, Var gamma, Var beta, float eps) {
  auto [m, k] = rows_cols(x.shape());
  if (gamma.size() != k || beta.size() != k)
    throw std::invalid_argument("layer_norm: gamma/beta width mismatch");
  std::vector<float> out(size_t(m) * k), xhat(size_t(m) * k), inv_std(size_t(m));
  for (int r = 0; r < m; ++r) {
    const float* xr = x.value().data() + size_t(r) * k;
    double mu = kern::active().sum(xr, k) / k;
    double var = 0.0;
    for (int j = 0; j < k; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= k;
    float is = float(1.0 / std::sqrt(var + eps));
    inv_std[size_t(r)] = is;
    for (int j = 0; j < k; ++j) {
      float xh = (xr[j] - float(mu)) * is;
      xhat[size_t(r) * k + j] = xh;
      out[size_t(r) * k + j] = xh * gamma.value()[j] + beta.value()[j];
    }
  }
  Tensor gv = gamma.value();
  auto xhat_sp = std::make_shared<std::vector<float>>(std::move(xhat));
  auto istd_sp = std::make_shared<std::vector<float>>(std::move(inv_std));
  return x.tape->emit(
      Tensor(x.shape(), std::move(out)), {x, gamma, beta},
      [x, gamma, beta, gv, xhat_sp, istd_sp, m, k](Tape& t, const std::vector<float>& g) {
        std::vector<float> dgamma(size_t(k), 0.0f), dbeta(size_t(k), 0.0f);
        std::vector<float> dx(size_t(m) * k);
        for (int r = 0; r < m; ++r) {
          const float* gr = g.data() + size_t(r) * k;
          const float* xh = xhat_sp->data() + size_t(r) * k;
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int j = 0; j < k; ++j) {
            float dxhat = gr[j] * gv[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += double(dxhat) * xh[j];
            dgamma[size_t(j)] += gr[j] * xh[j];
            dbeta[size_t(j)] += gr[j];
          }
          float is = (*istd_sp)[size_t(r)];
          for (int j = 0; j < k; ++j) {
            float dxhat = gr[j] * gv[j];
            dx[size_t(r) * k + j] =
                is * (dxhat - float(sum_dxhat) / k - xh[j] * float(sum_dxhat_xhat) / k);
          }
        }
        if (t.requires_grad(x)) t.accum(x, dx.data(), m * k);
        t.accum(gamma, dgamma.data(), k);
        t.accum(beta, dbeta.data(), k);
      });
}

Var dropout(Var x, float p, Rng& rng) {
  if (p <= 0.0f) return x;
  if (p >= 1.0f) throw std::invalid_argument("dropout: p must be < 1");
  int n = x.size();
  float keep = 1.0f - p;
  auto mask = std::make_shared<std::vector<float>>(size_t(n));
  std::vector<float> out(size_t(n));
  for (int i = 0; i < n; ++i) {
    (*mask)[size_t(i)] = rng.uniform() < p ? 0.0f : 1.0f / keep;
    out[size_t(i)] = x.value()[i] * (*mask)[size_t(i)];
  }
  return x.tape->emit(Tensor(x.shape(), std::move(out)), {x},
                      [x, mask, n](Tape& t, const std::vector<float>& g) {
                        std::vector<float> buf(size_t(n));
                        kern::active().mul(g.data(), mask->data(), buf.data(), n);
                        t.accum(x, buf.data(), n);
                      });
}

// ---- masked distributions ----

namespace {
void check_mask(const Var& logits, const Tensor& mask, const char* op) {
  if (mask.shape() != logits.shape())
    throw std::invalid_argument(std::string(op) + ": mask shape mismatch");
}
}  // namespace

Var masked_softmax(Var logits, const Tensor& mask, float temperature) {
  check_mask(logits, mask, "masked_softmax");
  if (!(temperature > 0.0f)) throw std::invalid_argument("masked_softmax: temperature must be > 0");
  auto [m, k] = rows_cols(logits.shape());
  std::vector<float> probs(size_t(m) * k, 0.0f);
  const float* lx = logits.value().data();
  for (int r = 0; r < m; ++r) {
    const float* row = lx + size_t(r) * k;
    const float* mrow = mask.data() + size_t(r) * k;
    float mx = 0.0f;
    bool any = false;
    for (int j = 0; j < k; ++j)
      if (mrow[j] > 0.5f && (!any || row[j] > mx)) mx = row[j], any = true;
    if (!any) throw NoValidAction("masked_softmax: no valid entry in row " + std::to_string(r));
    double z = 0.0;
    for (int j = 0; j < k; ++j)
      if (mrow[j] > 0.5f) {
        float e = std::exp((row[j] - mx) / temperature);
        probs[size_t(r) * k + j] = e;
        z += e;
      }
    for (int j = 0; j < k; ++j)
      if (mrow[j] > 0.5f) probs[size_t(r) * k + j] = float(probs[size_t(r) * k + j] / z);
  }
  auto pv = std::make_shared<std::vector<float>>(probs);
  Tensor maskc = mask;
  return logits.tape->emit(Tensor(logits.shape(), std::move(probs)), {logits},
                           [logits, pv, maskc, temperature, m, k](Tape& t,
                                                                  const std::vector<float>& g) {
                             std::vector<float> dl(size_t(m) * k, 0.0f);
                             for (int r = 0; r < m; ++r) {
                               const float* p = pv->data() + size_t(r) * k;
                               const float* gr = g.data() + size_t(r) * k;
                               const float* mrow = maskc.data() + size_t(r) * k;
                               double s = 0.0;
                               for (int j = 0; j < k; ++j)
                                 if (mrow[j] > 0.5f) s += double(gr[j]) * p[j];
                               for (int j = 0; j < k; ++j)
                                 if (mrow[j] > 0.5f)
                                   dl[size_t(r) * k + j] =
                                       p[j] * (gr[j] - float(s)) / temperature;
                             }
                             t.accum(logits, dl.data(), m * k);
                           });
}

Var masked_log_softmax(Var logits, const Tensor& mask) {
  check_mask(logits, mask, "masked_log_softmax");
  auto [m, k] = rows_cols(logits.shape());
  std::vector<float> lp(size_t(m) * k, 0.0f);
  const float* lx = logits.value().data();
  for (int r = 0; r < m; ++r) {
    const float* row = lx + size_t(r) * k;
    const float* mrow = mask.data() + size_t(r) * k;
    float mx = 0.0f;
    bool any = false;
    for (int j = 0; j < k; ++j)
      if (mrow[j] > 0.5f && (!any || row[j] > mx)) mx = row[j], any = true;
    if (!any)
      throw NoValidAction("masked_log_softmax: no valid entry in row " + std::to_string(r));
    double z = 0.0;
    for (int j = 0; j < k; ++j)
      if (mrow[j] > 0.5f) z += std::exp(double(row[j]) - mx);
    float lz = float(std::log(z));
    for (int j = 0; j < k; ++j)
      if (mrow[j] > 0.5f) lp[size_t(r) * k + j] = (row[j] - mx) - lz;
  }
  auto lpv = std::make_shared<std::vector<float>>(lp);
  Tensor maskc = mask;
  return logits.tape->emit(
      Tensor(logits.shape(), std::move(lp)), {logits},
      [logits, lpv, maskc, m, k](Tape& t, const std::vector<float>& g) {
        std::vector<float> dl(size_t(m) * k, 0.0f);
        for (int r = 0; r < m; ++r) {
          const float* lpr = lpv->data() + size_t(r) * k;
          const float* gr = g.data() + size_t(r) * k;
          const float* mrow = maskc.data() + size_t(r) * k;
          double gsum = 0.0;
          for (int j = 0; j < k; ++j)
            if (mrow[j] > 0.5f) gsum += gr[j];
          for (int j = 0; j < k; ++j)
            if (mrow[j] > 0.5f)
              dl[size_t(r) * k + j] = gr[j] - std::exp(lpr[j]) * float(gsum);
        }
        t.accum(logits, dl.data(), m * k);
      });
}

Var pick(Var x, const std::vector<int>& index) {
  auto [m, k] = rows_cols(x.shape());
  if (int(index.size()) != m) throw std::invalid_argument("pick: index count mismatch");
  std::vector<float> out(size_t(m));
  for (int r = 0; r < m; ++r) {
    if (index[size_t(r)] < 0 || index[size_t(r)] >= k)
      throw std::out_of_range("pick: index out of range");
    out[size_t(r)] = x.value()[r * k + index[size_t(r)]];
  }
  std::vector<int> idx = index;
  return x.tape->emit(Tensor({m}, std::move(out)), {x},
                      [x, idx, m, k](Tape& t, const std::vector<float>& g) {
                        std::vector<float> dx(size_t(m) * k, 0.0f);
                        for (int r = 0; r < m; ++r) dx[size_t(r) * k + idx[size_t(r)]] = g[size_t(r)];
                        t.accum(x, dx.data(), m * k);
                      });
}

Var cross_entropy(Var logits, int target) {
  Tensor mask = Tensor::full(logits.shape(), 1.0f);
  return cross_entropy_masked(logits, mask, target);
}

Var cross_entropy_masked(Var logits, const Tensor& mask, int target) {
  if (logits.shape().size() != 1) throw std::invalid_argument("cross_entropy: need 1-d logits");
  if (target < 0 || target >= logits.size())
    throw std::out_of_range("cross_entropy: target out of range");
  Var lp = masked_log_softmax(logits, mask);
  return neg(pick(lp, {target}));
}

// ---- convolution ----

namespace {
struct ConvGeom {
  int ci, h, w, co, kh, kw, stride, pad, ho, wo;
};

ConvGeom conv_geom(const Shape& xs, const Shape& ws, int stride, int pad) {
  if (xs.size() != 3 || ws.size() != 4) throw std::invalid_argument("conv2d: need [C,H,W] and [Co,Ci,kh,kw]");
  ConvGeom g;
  g.ci = xs[0];
  g.h = xs[1];
  g.w = xs[2];
  g.co = ws[0];
  g.kh = ws[2];
  g.kw = ws[3];
  g.stride = stride;
  g.pad = pad;
  if (ws[1] != g.ci) throw std::invalid_argument("conv2d: channel mismatch");
  if (g.kh > g.h + 2 * pad || g.kw > g.w + 2 * pad)
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  if (stride <= 0) throw std::invalid_argument("conv2d: stride must be positive");
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  return g;
}

// col is [(ci*kh*kw), (ho*wo)]
void im2col(const float* x, const ConvGeom& g, std::vector<float>& col) {
  col.assign(size_t(g.ci) * g.kh * g.kw * g.ho * g.wo, 0.0f);
  int ohw = g.ho * g.wo;
  for (int c = 0; c < g.ci; ++c)
    for (int i = 0; i < g.kh; ++i)
      for (int j = 0; j < g.kw; ++j) {
        float* crow = col.data() + size_t((c * g.kh + i) * g.kw + j) * ohw;
        for (int oy = 0; oy < g.ho; ++oy) {
          int y = oy * g.stride + i - g.pad;
          if (y < 0 || y >= g.h) continue;
          for (int ox = 0; ox < g.wo; ++ox) {
            int xx = ox * g.stride + j - g.pad;
            if (xx < 0 || xx >= g.w) continue;
            crow[oy * g.wo + ox] = x[(size_t(c) * g.h + y) * g.w + xx];
          }
        }
      }
}

void col2im(const float* col, const ConvGeom& g, float* x /* zeroed [ci,h,w] */) {
  int ohw = g.ho * g.wo;
  for (int c = 0; c < g.ci; ++c)
    for (int i = 0; i < g.kh; ++i)
      for (int j = 0; j < g.kw; ++j) {
        const float* crow = col + size_t((c * g.kh + i) * g.kw + j) * ohw;
        for (int oy = 0; oy < g.ho; ++oy) {
          int y = oy * g.stride + i - g.pad;
          if (y < 0 || y >= g.h) continue;
          for (int ox = 0; ox < g.wo; ++ox) {
            int xx = ox * g.stride + j - g.pad;
            if (xx < 0 || xx >= g.w) continue;
            x[(size_t(c) * g.h + y) * g.w + xx] += crow[oy * g.wo + ox];
          }
        }
      }
}
}  // namespace

Var conv2d(Var x, Var w, Var b, int stride, int pad) {
  ConvGeom g = conv_geom(x.shape(), w.shape(), stride, pad);
  if (b.ok() && b.size() != g.co) throw std::invalid_argument("conv2d: bias size mismatch");
  int ckk = g.ci * g.kh * g.kw, ohw = g.ho * g.wo;
  std::vector<float> col;
  im2col(x.value().data(), g, col);
  std::vector<float> out(size_t(g.co) * ohw);
  kern::active().gemm_nn(w.value().data(), col.data(), out.data(), g.co, ckk, ohw);
  if (b.ok())
    for (int c = 0; c < g.co; ++c) {
      float bias = b.value()[c];
      for (int i = 0; i < ohw; ++i) out[size_t(c) * ohw + i] += bias;
    }
  Tensor wv = w.value();
  auto col_sp = std::make_shared<std::vector<float>>(std::move(col));
  return x.tape->emit(
      Tensor({g.co, g.ho, g.wo}, std::move(out)), {x, w, b},
      [x, w, b, wv, col_sp, g, ckk, ohw](Tape& t, const std::vector<float>& gr) {
        if (t.requires_grad(w)) {
          std::vector<float> dw(size_t(g.co) * ckk);
          kern::active().gemm_nt(gr.data(), col_sp->data(), dw.data(), g.co, ohw, ckk);
          t.accum(w, dw.data(), g.co * ckk);
        }
        if (b.ok() && t.requires_grad(b)) {
          std::vector<float> db(size_t(g.co));
          for (int c = 0; c < g.co; ++c)
            db[size_t(c)] = float(kern::active().sum(gr.data() + size_t(c) * ohw, ohw));
          t.accum(b, db.data(), g.co);
        }
        if (t.requires_grad(x)) {
          std::vector<float> dcol(size_t(ckk) * ohw);
          kern::active().gemm_tn(wv.data(), gr.data(), dcol.data(), ckk, g.co, ohw);
          std::vector<float> dx(size_t(g.ci) * g.h * g.w, 0.0f);
          col2im(dcol.data(), g, dx.data());
          t.accum(x, dx.data(), g.ci * g.h * g.w);
        }
      });
}

Var conv2d_transpose(Var x, Var w, Var b, int stride, int pad) {
  // x: [Co, H', W'] in the geometry of conv2d's output; result: [Ci, H, W]
  const Shape& xs = x.shape();
  const Shape& ws = w.shape();
  if (xs.size() != 3 || ws.size() != 4)
    throw std::invalid_argument("conv2d_transpose: need [C,H,W] and [Co,Ci,kh,kw]");
  if (xs[0] != ws[0]) throw std::invalid_argument("conv2d_transpose: channel mismatch");
  int h = (xs[1] - 1) * stride + ws[2] - 2 * pad;
  int w_ = (xs[2] - 1) * stride + ws[3] - 2 * pad;
  if (h <= 0 || w_ <= 0) throw std::invalid_argument("conv2d_transpose: empty output");
  ConvGeom g;
  g.ci = ws[1];
  g.h = h;
  g.w = w_;
  g.co = ws[0];
  g.kh = ws[2];
  g.kw = ws[3];
  g.stride = stride;
  g.pad = pad;
  g.ho = xs[1];
  g.wo = xs[2];
  if ((g.h + 2 * pad - g.kh) / stride + 1 != g.ho)
    throw std::invalid_argument("conv2d_transpose: geometry mismatch");
  if (b.ok() && b.size() != g.ci) throw std::invalid_argument("conv2d_transpose: bias size");
  int ckk = g.ci * g.kh * g.kw, ohw = g.ho * g.wo;

  std::vector<float> dcol(size_t(ckk) * ohw);
  kern::active().gemm_tn(w.value().data(), x.value().data(), dcol.data(), ckk, g.co, ohw);
  std::vector<float> out(size_t(g.ci) * g.h * g.w, 0.0f);
  col2im(dcol.data(), g, out.data());
  if (b.ok())
    for (int c = 0; c < g.ci; ++c) {
      float bias = b.value()[c];
      for (int i = 0; i < g.h * g.w; ++i) out[size_t(c) * g.h * g.w + i] += bias;
    }
  Tensor wv = w.value(), xv = x.value();
  return x.tape->emit(
      Tensor({g.ci, g.h, g.w}, std::move(out)), {x, w, b},
      [x, w, b, wv, xv, g, ckk, ohw](Tape& t, const std::vector<float>& gr) {
        // backward of the adjoint is the forward conv structure
        std::vector<float> col;
        im2col(gr.data(), g, col);
        if (t.requires_grad(x)) {
          std::vector<float> dx(size_t(g.co) * ohw);
          kern::active().gemm_nn(wv.data(), col.data(), dx.data(), g.co, ckk, ohw);
          t.accum(x, dx.data(), g.co * ohw);
        }
        if (t.requires_grad(w)) {
          std::vector<float> dw(size_t(g.co) * ckk);
          kern::active().gemm_nt(xv.data(), col.data(), dw.data(), g.co, ohw, ckk);
          t.accum(w, dw.data(), g.co * ckk);
        }
        if (b.ok() && t.requires_grad(b)) {
          std::vector<float> db(size_t(g.ci));
          for (int c = 0; c < g.ci; ++c)
            db[size_t(c)] = float(kern::active().sum(gr.data() + size_t(c) * g.h * g.w, g.h * g.w));
          t.accum(b, db.data(), g.ci);
        }
      });
}

}  // namespace skirl::nd
