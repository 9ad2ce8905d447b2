#pragma once
//
// Reverse-mode automatic differentiation over Tensors.
//
// A Tape owns a flat arena of nodes; a Var is a cheap (tape, index) handle.
// Parents are always created before children, so one reverse sweep over the
// arena is a valid topological order for backpropagation. Every op validates
// shapes up front and (by default) checks its output for non-finite values.
//
// Var supports +, - (same shape), * (elementwise, either side may be a
// scalar [1] node) and double * Var, which makes it usable as the State type
// of the odekit solver combinators — that is how the transformer block runs
// the stage loops with gradients attached.
//

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pctk/nnkit/param.hpp"
#include "pctk/nnkit/rng.hpp"
#include "pctk/nnkit/tensor.hpp"

namespace nnkit {

enum class Mode { Train, Eval };

class Tape;

struct Var {
  Tape* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor& value() const;
  const std::vector<int>& shape() const;
};

// No key-projection bias: it shifts every score in a softmax row by the same
// amount, so it can never affect the output and its gradient is identically 0.
struct AttentionParams {
  Var wq, bq, wk, wv, bv, wo, bo;
};

class Tape {
 public:
  explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Unique per constructed tape; lets holders of cross-call state prove their
  // cached Vars belong to the live tape (addresses can be reused, this isn't).
  std::uint64_t serial() const { return serial_; }

  // ---- leaves ----
  Var leaf(Tensor value);
  Var param(Parameter& p);  // leaf whose gradient flushes into p.grad
  Var constant(double v);   // shape [1]

  // ---- elementwise / scalar ----
  Var add(Var a, Var b);  // same shape
  Var sub(Var a, Var b);  // same shape
  Var mul(Var a, Var b);  // same shape, or either side scalar [1]
  Var scale(Var a, double c);
  Var sigmoid(Var a);
  Var relu(Var a);
  Var sum_all(Var a);        // -> [1]
  Var select(Var a, int i);  // rank-1 a -> [1] element

  // ---- dense NN ops ----
  // x [..., K] @ w [K, N] -> [..., N]
  Var matmul(Var x, Var w);
  // x [..., N] + b [N] broadcast over leading axes
  Var add_bias(Var x, Var b);
  // normalize over the last axis (population variance), then gain/bias [W]
  Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
  // causal multi-head self-attention over x [B, S, W]
  Var attention(Var x, const AttentionParams& p, int heads, bool causal = true);
  // inverted dropout; identity in Eval mode or at rate 0
  Var dropout(Var x, double rate, Mode mode, Rng& rng);
  // gather rows of table [V, W] by ids laid out as [batch, seq] -> [B, S, W]
  Var embedding(const std::vector<int>& ids, int batch, int seq, Var table);
  // mean token-level negative log likelihood -> [1];
  // logits [..., V] flattened to [M, V], targets length M
  Var cross_entropy(Var logits, const std::vector<int>& targets);

  // ---- engine ----
  void backward(Var loss);   // loss must be [1]
  void flush_param_grads();  // accumulate leaf grads into Parameter::grad
  const Tensor& value(Var v) const;
  const Tensor& grad(Var v) const;
  std::size_t num_nodes() const { return nodes_.size(); }
  bool check_finite() const { return check_finite_; }

 private:
  struct Node {
    Tensor val;
    Tensor grad;
    bool has_grad = false;
    Parameter* sink = nullptr;
    std::function<void()> back;  // deposits into parents' grads
  };

  static std::uint64_t next_serial();

  std::vector<Node> nodes_;
  bool check_finite_;
  std::uint64_t serial_ = next_serial();

  Var make(Tensor val, const char* op, std::function<void()> back = {});
  Tensor& grad_mut(int id) {
    nodes_[static_cast<std::size_t>(id)].has_grad = true;
    return nodes_[static_cast<std::size_t>(id)].grad;
  }
  const Tensor& val_of(int id) const { return nodes_[static_cast<std::size_t>(id)].val; }

  friend struct Var;
};

// ---- operators & ADL hooks (State concept for odekit) -----------------

inline Var operator+(Var a, Var b) { return a.tape->add(a, b); }
inline Var operator-(Var a, Var b) { return a.tape->sub(a, b); }
inline Var operator*(Var a, Var b) { return a.tape->mul(a, b); }
inline Var operator*(double c, Var a) { return a.tape->scale(a, c); }

inline bool all_finite(const Var& v) { return v.value().all_finite(); }

}  // namespace nnkit
