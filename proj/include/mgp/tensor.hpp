// Copyright (c) 2026 The mgp-str Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float32 tensors with reverse-mode differentiation. Ops record a
// backward closure onto an explicit Tape; `backward` replays the tape in
// reverse and accumulates gradients (+=) into every tensor that needs them.
// Nothing model-specific lives here.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "mgp/common.hpp"

namespace mgp {

using Shape = std::vector<int>;

namespace detail {
struct TensorNode {
  Shape dims;
  std::vector<float> data;
  std::vector<float> grad;      // allocated lazily, same numel as data
  bool requires_grad = false;   // leaf updated by an optimizer / checked by FD
  bool needs_grad = false;      // gradient must flow through this node
  std::string name;             // set for registered parameters
};
}  // namespace detail

// Value-semantics handle over a shared node. Copying a Tensor aliases the
// underlying buffer; ops always allocate fresh output nodes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape dims, bool requires_grad = false);
  static Tensor full(Shape dims, float value, bool requires_grad = false);
  static Tensor from_data(Shape dims, std::vector<float> values, bool requires_grad = false);
  static Tensor scalar(float value, bool requires_grad = false);
  // Truncated normal init (two-sigma resampling), the default for weights.
  static Tensor randn(Shape dims, Rng& rng, float stddev, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& dims() const { return node_->dims; }
  int dim(int i) const { return node_->dims[static_cast<size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->dims.size()); }
  size_t numel() const { return node_->data.size(); }

  float* data() { return node_->data.data(); }
  const float* data() const { return node_->data.data(); }
  std::vector<float>& values() { return node_->data; }
  const std::vector<float>& values() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  bool needs_grad() const { return node_->needs_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; node_->needs_grad = v; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<float>& grad();              // allocates zeros on first use
  const std::vector<float>& grad() const;  // throws if absent
  void zero_grad();                        // clears accumulated gradient

  const std::string& name() const { return node_->name; }
  void set_name(std::string n) { node_->name = std::move(n); }

  float item() const;  // scalar tensors only

  // Same node (aliasing) test; used by freeze contracts in tests.
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  // Reinterpret the buffer with a compatible shape (no copy, shares grad).
  Tensor reshaped(Shape dims) const;

  detail::TensorNode* node() const { return node_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorNode> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::TensorNode> node_;

  friend Tensor make_like(const Shape&, bool);
};

// Ordered record of executed ops. Every input precedes its consumer, so the
// reverse sweep sees a valid topological order by construction.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }
  size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }

  void record(const char* op, std::function<void()> backward_fn) {
    if (recording_) entries_.push_back({op, std::move(backward_fn)});
  }

 private:
  struct Entry {
    const char* op;
    std::function<void()> backward_fn;
  };
  bool recording_;
  std::vector<Entry> entries_;

  friend void backward(Tape&, const Tensor&);
};

// ---- differentiable ops ----------------------------------------------------

// a[M,K] * b[K,N] -> [M,N]; optional transposes interpret the stored layout.
Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b,
              bool trans_a = false, bool trans_b = false);

// x[..., In] * w[Out, In]^T (+ bias[Out]) -> [..., Out]; leading dims folded.
Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias = {});

// Per-sample matmul over a leading batch dim: a[B,M,K] * b[B,K,N] -> [B,M,N].
Tensor bmm(Tape& tape, const Tensor& a, const Tensor& b,
           bool trans_a = false, bool trans_b = false);

Tensor add(Tape& tape, const Tensor& a, const Tensor& b);  // same shape
// x[..., D] + p (p's shape must match a trailing slice of x's shape).
Tensor add_broadcast(Tape& tape, const Tensor& x, const Tensor& p);
Tensor scale(Tape& tape, const Tensor& x, float s);
// Multiply by a learnable scalar tensor (gradient flows into s).
Tensor scale_by(Tape& tape, const Tensor& x, const Tensor& s);
Tensor hadamard(Tape& tape, const Tensor& a, const Tensor& b);

// Numerically stabilized softmax along `axis` (negative counts from the end).
Tensor softmax(Tape& tape, const Tensor& x, int axis = -1);

// Per-row normalization over the last dim, then affine by gamma/beta[D].
Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma,
                  const Tensor& beta, float eps = 1e-5f);

// Exact Gaussian-CDF form x * Phi(x).
Tensor gelu(Tape& tape, const Tensor& x);

Tensor sum(Tape& tape, const Tensor& x);   // scalar
Tensor mean(Tape& tape, const Tensor& x);  // scalar
Tensor add_scalars(Tape& tape, const std::vector<Tensor>& terms);

// Mean of -log softmax(logits)[t, target_t] over targets != ignore_id.
// logits may be [T,K] or [B,T,K]; targets run row-major over the T positions.
Tensor cross_entropy(Tape& tape, const Tensor& logits,
                     const std::vector<int>& targets, int ignore_id);

// Row gather from an embedding table[V,D] -> [len(ids), D].
Tensor embedding(Tape& tape, const Tensor& table, const std::vector<int>& ids);

// x[B,R,D], row index per sample -> [B,D].
Tensor gather_rows(Tape& tape, const Tensor& x, const std::vector<int>& rows);

// Prepend one broadcast row: x[B,N,D], row[D] -> [B,N+1,D].
Tensor prepend_row(Tape& tape, const Tensor& x, const Tensor& row);

// Concatenate along the last dim: [B,Ca] ++ [B,Cb] -> [B,Ca+Cb].
Tensor concat_cols(Tape& tape, const Tensor& a, const Tensor& b);

// Row-wise dot product of a[B,D], b[B,D] -> [B,1].
Tensor rowwise_dot(Tape& tape, const Tensor& a, const Tensor& b);

// Unit L2 norm over the last dim.
Tensor l2_normalize(Tape& tape, const Tensor& x, float eps = 1e-12f);

// Fused multi-head self attention over packed projections qkv[B,R,3D].
// Scale is 1/sqrt(D/heads). If `probs_out` is given it receives the
// attention probabilities [B,heads,R,R] (detached, for tests and viz).
Tensor multi_head_attention(Tape& tape, const Tensor& qkv, int heads,
                            bool causal, Tensor* probs_out = nullptr);

// Reverse sweep: seeds d(loss)/d(loss)=1 and accumulates gradients into every
// recorded node. Loss must be scalar.
void backward(Tape& tape, const Tensor& loss);

// Throws NumericError when any element is NaN/Inf. Applied by every op to its
// output; callable directly at module boundaries.
void check_finite(const Tensor& t, const char* where);

}  // namespace mgp
