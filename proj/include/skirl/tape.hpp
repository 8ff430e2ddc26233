#pragma once

// Reverse-mode autodiff over Tensor values. A Tape records forward ops in
// creation order (a topological order by construction); backward() replays it
// in reverse. Every forward op validates that its output is finite and throws
// otherwise. A Tape is confined to one logical thread.

#include <functional>
#include <span>
#include <vector>

#include "skirl/rng.hpp"
#include "skirl/tensor.hpp"

namespace skirl::nd {

class Tape;

struct Var {
  Tape* tape = nullptr;
  int node = -1;

  bool ok() const { return tape != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  int size() const { return value().size(); }
  float item() const;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value, bool requires_grad);
  Var constant(Tensor value) { return leaf(std::move(value), false); }

  // core extension point for ops: backfn receives the node's grad buffer
  Var emit(Tensor value, const std::vector<Var>& parents,
           std::function<void(Tape&, const std::vector<float>&)> backfn);

  void backward(Var loss);

  // zeros if the node never received gradient (e.g. parameter unused in loss)
  Tensor grad(Var v) const;

  bool requires_grad(Var v) const { return nodes_[size_t(v.node)].requires_grad; }
  const Tensor& value(Var v) const { return nodes_[size_t(v.node)].value; }

  // accumulate g (length = node size) into a node's grad buffer
  void accum(Var v, const float* g, int n);
  void accum_at(Var v, int offset, const float* g, int n);

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<float> grad;  // empty until touched
    bool requires_grad = false;
    std::function<void(Tape&, const std::vector<float>&)> backfn;
  };
  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// ---- primitive ops ----

Var add(Var a, Var b);                 // same shape
Var sub(Var a, Var b);
Var mul(Var a, Var b);                 // elementwise
Var neg(Var a);
Var scale(Var a, float s);
Var add_bias(Var x, Var b);            // [m,n]+[n] rowwise, or [n]+[n]
Var matmul(Var a, Var b);              // [m,k]x[k,n]
Var transpose(Var a);                  // 2-d
Var relu(Var a);
Var sigmoid(Var a);
Var tanh_op(Var a);
Var exp_op(Var a);
Var log_op(Var a);
Var atan_squash(Var a);                // (2/pi) * atan((pi/2) x)
Var reshape(Var a, Shape s);
Var concat0(std::span<const Var> xs);  // along axis 0
Var narrow0(Var x, int start, int len);
Var sum(Var x);                        // -> scalar
Var mean(Var x);                       // -> scalar
Var sum_axis0(Var x);                  // [m,n] -> [n]
Var mean_axis0(Var x);                 // [m,n] -> [n]
Var scale_rows(Var x, Var s);          // [m,n] rows scaled by s[m]
Var affine_rows(Var x, Var s, Var b);  // rowwise s*x + b (FiLM core)
Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-5f);  // last dim
Var dropout(Var x, float p, Rng& rng);

// rows of `logits` and `mask` are the trailing dimension; masked-out entries
// get probability exactly 0 / log-prob slot 0 (their incoming gradients are
// dropped). Throws NoValidAction if a row has no valid entry.
Var masked_softmax(Var logits, const Tensor& mask, float temperature);
Var masked_log_softmax(Var logits, const Tensor& mask);

Var pick(Var x, const std::vector<int>& index);   // [m,k]->[m] or [k]->[1]
Var cross_entropy(Var logits, int target);        // full support, 1-d
Var cross_entropy_masked(Var logits, const Tensor& mask, int target);

// convolutions: x [C,H,W], w [Co,Ci,kh,kw], bias [Co] (optional: pass {},
// i.e. a default Var). conv2d_transpose is the exact adjoint of conv2d with
// the same kernel/stride/padding and maps [Co,H',W'] back to [Ci,H,W].
Var conv2d(Var x, Var w, Var b, int stride, int pad);
Var conv2d_transpose(Var x, Var w, Var b, int stride, int pad);

struct NoValidAction : std::runtime_error {
  explicit NoValidAction(const std::string& m) : std::runtime_error(m) {}
};
struct NonFinite : std::runtime_error {
  explicit NonFinite(const std::string& m) : std::runtime_error(m) {}
};

inline Shape conv_out_shape(const Shape& x, const Shape& w, int stride, int pad) {
  int ho = (x[1] + 2 * pad - w[2]) / stride + 1;
  int wo = (x[2] + 2 * pad - w[3]) / stride + 1;
  return {w[0], ho, wo};
}

}  // namespace skirl::nd
