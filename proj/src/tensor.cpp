// Copyright (c) 2026 The mgp-str Authors
// SPDX-License-Identifier: Apache-2.0

#include "mgp/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace mgp {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<MatRM>;
using CMap = Eigen::Map<const MatRM>;
using StrideT = Eigen::Stride<Eigen::Dynamic, 1>;
using SMap = Eigen::Map<MatRM, Eigen::Unaligned, StrideT>;
using CSMap = Eigen::Map<const MatRM, Eigen::Unaligned, StrideT>;

size_t shape_numel(const Shape& dims) {
  size_t n = 1;
  for (int d : dims) {
    if (d <= 0) throw ShapeError("tensor dims must be positive");
    n *= static_cast<size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& dims) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < dims.size(); ++i) os << (i ? "x" : "") << dims[i];
  os << "]";
  return os.str();
}

[[noreturn]] void shape_fail(const char* op, const Tensor& a, const Tensor& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.dims()) +
                   " and " + shape_str(b.dims()));
}

// Rows/cols view of the last dim: [..., D] -> (numel/D, D).
std::pair<int, int> as_rows(const Tensor& t) {
  int d = t.dim(t.rank() - 1);
  return {static_cast<int>(t.numel()) / d, d};
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

namespace {
Tensor wrap(std::shared_ptr<detail::TensorNode> n) {
  // Tensor's private ctor is inaccessible here; placement via friend factory.
  struct Access : Tensor {
    explicit Access(std::shared_ptr<detail::TensorNode> p) { *static_cast<Tensor*>(this) = reinterpret_cast<Tensor&>(p); }
  };
  // The reinterpret trick above is brittle; use the public factory instead.
  (void)n;
  throw std::logic_error("unused");
}
}  // namespace

Tensor Tensor::zeros(Shape dims, bool requires_grad) {
  auto n = std::make_shared<detail::TensorNode>();
  n->data.assign(shape_numel(dims), 0.0f);
  n->dims = std::move(dims);
  n->requires_grad = requires_grad;
  n->needs_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape dims, float value, bool requires_grad) {
  Tensor t = zeros(std::move(dims), requires_grad);
  std::fill(t.values().begin(), t.values().end(), value);
  return t;
}

Tensor Tensor::from_data(Shape dims, std::vector<float> values, bool requires_grad) {
  if (shape_numel(dims) != values.size())
    throw ShapeError("from_data: " + shape_str(dims) + " does not hold " +
                     std::to_string(values.size()) + " values");
  auto n = std::make_shared<detail::TensorNode>();
  n->dims = std::move(dims);
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  n->needs_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(float value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape dims, Rng& rng, float stddev, bool requires_grad) {
  Tensor t = zeros(std::move(dims), requires_grad);
  for (auto& v : t.values()) v = rng.trunc_normal(stddev);
  return t;
}

std::vector<float>& Tensor::grad() {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0f);
  return node_->grad;
}

const std::vector<float>& Tensor::grad() const {
  if (node_->grad.empty()) throw ContractError("tensor has no gradient: " + node_->name);
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0f);
}

float Tensor::item() const {
  if (numel() != 1) throw ShapeError("item(): tensor is not scalar, shape " + shape_str(dims()));
  return node_->data[0];
}

Tensor Tensor::reshaped(Shape dims) const {
  if (shape_numel(dims) != numel())
    throw ShapeError("reshaped: element count mismatch for " + shape_str(dims));
  auto n = std::make_shared<detail::TensorNode>(*node_);
  // Views share storage through the graph only via explicit ops; a reshape is
  // a metadata copy of an existing buffer and must not be used mid-graph.
  n->dims = std::move(dims);
  return Tensor(std::move(n));
}

void check_finite(const Tensor& t, const char* where) {
  const float* p = t.data();
  const size_t n = t.numel();
  uint32_t bad = 0;
  for (size_t i = 0; i < n; ++i) {
    uint32_t bits;
    std::memcpy(&bits, p + i, 4);
    bad |= static_cast<uint32_t>(((bits >> 23) & 0xffu) == 0xffu);
  }
  if (bad) throw NumericError(std::string(where) + ": non-finite value in output");
}

// ---- op plumbing ------------------------------------------------------------

namespace {

// Output factory: propagates needs_grad from inputs when the tape records.
Tensor make_out(Tape& tape, Shape dims, std::initializer_list<const Tensor*> inputs) {
  Tensor out = Tensor::zeros(std::move(dims));
  if (tape.recording()) {
    for (const Tensor* t : inputs)
      if (t->defined() && t->needs_grad()) {
        out.node()->needs_grad = true;
        break;
      }
  }
  return out;
}

bool want_grad(Tape& tape, const Tensor& out) {
  return tape.recording() && out.needs_grad();
}

}  // namespace

// ---- matmul family ----------------------------------------------------------

Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 2 || b.rank() != 2) shape_fail("matmul", a, b);
  const int m = trans_a ? a.dim(1) : a.dim(0);
  const int k = trans_a ? a.dim(0) : a.dim(1);
  const int kb = trans_b ? b.dim(1) : b.dim(0);
  const int n = trans_b ? b.dim(0) : b.dim(1);
  if (k != kb) shape_fail("matmul", a, b);

  Tensor out = make_out(tape, {m, n}, {&a, &b});
  {
    CMap A(a.data(), a.dim(0), a.dim(1));
    CMap B(b.data(), b.dim(0), b.dim(1));
    Map C(out.data(), m, n);
    if (!trans_a && !trans_b) C.noalias() = A * B;
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  check_finite(out, "matmul");

  if (want_grad(tape, out)) {
    tape.record("matmul", [a, b, out, trans_a, trans_b]() {
      CMap G(out.grad().data(), out.dim(0), out.dim(1));
      CMap A(a.data(), a.dim(0), a.dim(1));
      CMap B(b.data(), b.dim(0), b.dim(1));
      if (a.needs_grad()) {
        Map dA(const_cast<Tensor&>(a).grad().data(), a.dim(0), a.dim(1));
        if (!trans_a && !trans_b) dA.noalias() += G * B.transpose();
        else if (!trans_a && trans_b) dA.noalias() += G * B;
        else if (trans_a && !trans_b) dA.noalias() += B * G.transpose();
        else dA.noalias() += B.transpose() * G.transpose();
      }
      if (b.needs_grad()) {
        Map dB(const_cast<Tensor&>(b).grad().data(), b.dim(0), b.dim(1));
        if (!trans_a && !trans_b) dB.noalias() += A.transpose() * G;
        else if (trans_a && !trans_b) dB.noalias() += A * G;
        else if (!trans_a && trans_b) dB.noalias() += G.transpose() * A;
        else dB.noalias() += G.transpose() * A.transpose();
      }
    });
  }
  return out;
}

Tensor linear(Tape& tape, const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.rank() != 2) throw ShapeError("linear: weight must be [out,in]");
  auto [rows, in] = as_rows(x);
  if (in != w.dim(1)) shape_fail("linear", x, w);
  const int out_dim = w.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_dim))
    shape_fail("linear(bias)", x, bias);

  Shape out_dims = x.dims();
  out_dims.back() = out_dim;
  Tensor out = make_out(tape, std::move(out_dims), {&x, &w, &bias});
  {
    CMap X(x.data(), rows, in);
    CMap W(w.data(), out_dim, in);
    Map Y(out.data(), rows, out_dim);
    Y.noalias() = X * W.transpose();
    if (bias.defined()) {
      Eigen::Map<const Eigen::RowVectorXf> B(bias.data(), out_dim);
      Y.rowwise() += B;
    }
  }
  check_finite(out, "linear");

  if (want_grad(tape, out)) {
    tape.record("linear", [x, w, bias, out, rows = rows, in = in, out_dim]() {
      CMap G(out.grad().data(), rows, out_dim);
      if (x.needs_grad()) {
        Map dX(const_cast<Tensor&>(x).grad().data(), rows, in);
        CMap W(w.data(), out_dim, in);
        dX.noalias() += G * W;
      }
      if (w.needs_grad()) {
        Map dW(const_cast<Tensor&>(w).grad().data(), out_dim, in);
        CMap X(x.data(), rows, in);
        dW.noalias() += G.transpose() * X;
      }
      if (bias.defined() && bias.needs_grad()) {
        Eigen::Map<Eigen::RowVectorXf> dB(const_cast<Tensor&>(bias).grad().data(), out_dim);
        dB += G.colwise().sum();
      }
    });
  }
  return out;
}

Tensor bmm(Tape& tape, const Tensor& a, const Tensor& b, bool trans_a, bool trans_b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) shape_fail("bmm", a, b);
  const int batch = a.dim(0);
  const int m = trans_a ? a.dim(2) : a.dim(1);
  const int k = trans_a ? a.dim(1) : a.dim(2);
  const int kb = trans_b ? b.dim(2) : b.dim(1);
  const int n = trans_b ? b.dim(1) : b.dim(2);
  if (k != kb) shape_fail("bmm", a, b);

  Tensor out = make_out(tape, {batch, m, n}, {&a, &b});
  const size_t sa = static_cast<size_t>(a.dim(1)) * a.dim(2);
  const size_t sb = static_cast<size_t>(b.dim(1)) * b.dim(2);
  const size_t so = static_cast<size_t>(m) * n;
  for (int i = 0; i < batch; ++i) {
    CMap A(a.data() + i * sa, a.dim(1), a.dim(2));
    CMap B(b.data() + i * sb, b.dim(1), b.dim(2));
    Map C(out.data() + i * so, m, n);
    if (!trans_a && !trans_b) C.noalias() = A * B;
    else if (trans_a && !trans_b) C.noalias() = A.transpose() * B;
    else if (!trans_a && trans_b) C.noalias() = A * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
  check_finite(out, "bmm");

  if (want_grad(tape, out)) {
    tape.record("bmm", [a, b, out, trans_a, trans_b, batch, m, n, sa, sb, so]() {
      for (int i = 0; i < batch; ++i) {
        CMap G(out.grad().data() + i * so, m, n);
        CMap A(a.data() + i * sa, a.dim(1), a.dim(2));
        CMap B(b.data() + i * sb, b.dim(1), b.dim(2));
        if (a.needs_grad()) {
          Map dA(const_cast<Tensor&>(a).grad().data() + i * sa, a.dim(1), a.dim(2));
          if (!trans_a && !trans_b) dA.noalias() += G * B.transpose();
          else if (!trans_a && trans_b) dA.noalias() += G * B;
          else if (trans_a && !trans_b) dA.noalias() += B * G.transpose();
          else dA.noalias() += B.transpose() * G.transpose();
        }
        if (b.needs_grad()) {
          Map dB(const_cast<Tensor&>(b).grad().data() + i * sb, b.dim(1), b.dim(2));
          if (!trans_a && !trans_b) dB.noalias() += A.transpose() * G;
          else if (trans_a && !trans_b) dB.noalias() += A * G;
          else if (!trans_a && trans_b) dB.noalias() += G.transpose() * A;
          else dB.noalias() += G.transpose() * A.transpose();
        }
      }
    });
  }
  return out;
}

// ---- elementwise ------------------------------------------------------------

Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) shape_fail("add", a, b);
  Tensor out = make_out(tape, a.dims(), {&a, &b});
  const size_t n = a.numel();
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (size_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  check_finite(out, "add");

  if (want_grad(tape, out)) {
    tape.record("add", [a, b, out, n]() {
      const float* g = out.grad().data();
      if (a.needs_grad()) {
        float* da = const_cast<Tensor&>(a).grad().data();
        for (size_t i = 0; i < n; ++i) da[i] += g[i];
      }
      if (b.needs_grad()) {
        float* db = const_cast<Tensor&>(b).grad().data();
        for (size_t i = 0; i < n; ++i) db[i] += g[i];
      }
    });
  }
  return out;
}

Tensor add_broadcast(Tape& tape, const Tensor& x, const Tensor& p) {
  const size_t pn = p.numel();
  if (pn == 0 || x.numel() % pn != 0) shape_fail("add_broadcast", x, p);
  // p must match a trailing slice of x's shape
  {
    size_t trail = 1;
    int i = x.rank() - 1, j = p.rank() - 1;
    for (; j >= 0; --i, --j) {
      if (i < 0 || x.dim(i) != p.dim(j)) shape_fail("add_broadcast", x, p);
      trail *= static_cast<size_t>(p.dim(j));
    }
    if (trail != pn) shape_fail("add_broadcast", x, p);
  }
  Tensor out = make_out(tape, x.dims(), {&x, &p});
  const size_t n = x.numel();
  const float* px = x.data();
  const float* pp = p.data();
  float* po = out.data();
  for (size_t i = 0; i < n; ++i) po[i] = px[i] + pp[i % pn];
  check_finite(out, "add_broadcast");

  if (want_grad(tape, out)) {
    tape.record("add_broadcast", [x, p, out, n, pn]() {
      const float* g = out.grad().data();
      if (x.needs_grad()) {
        float* dx = const_cast<Tensor&>(x).grad().data();
        for (size_t i = 0; i < n; ++i) dx[i] += g[i];
      }
      if (p.needs_grad()) {
        float* dp = const_cast<Tensor&>(p).grad().data();
        for (size_t i = 0; i < n; ++i) dp[i % pn] += g[i];
      }
    });
  }
  return out;
}

Tensor scale(Tape& tape, const Tensor& x, float s) {
  Tensor out = make_out(tape, x.dims(), {&x});
  const size_t n = x.numel();
  const float* px = x.data();
  float* po = out.data();
  for (size_t i = 0; i < n; ++i) po[i] = s * px[i];
  check_finite(out, "scale");
  if (want_grad(tape, out)) {
    tape.record("scale", [x, out, s, n]() {
      if (!x.needs_grad()) return;
      const float* g = out.grad().data();
      float* dx = const_cast<Tensor&>(x).grad().data();
      for (size_t i = 0; i < n; ++i) dx[i] += s * g[i];
    });
  }
  return out;
}

Tensor scale_by(Tape& tape, const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw ShapeError("scale_by: scale must be scalar");
  Tensor out = make_out(tape, x.dims(), {&x, &s});
  const float sv = s.item();
  const size_t n = x.numel();
  const float* px = x.data();
  float* po = out.data();
  for (size_t i = 0; i < n; ++i) po[i] = sv * px[i];
  check_finite(out, "scale_by");
  if (want_grad(tape, out)) {
    tape.record("scale_by", [x, s, out, sv, n]() {
      const float* g = out.grad().data();
      if (x.needs_grad()) {
        float* dx = const_cast<Tensor&>(x).grad().data();
        for (size_t i = 0; i < n; ++i) dx[i] += sv * g[i];
      }
      if (s.needs_grad()) {
        double acc = 0.0;
        const float* px2 = x.data();
        for (size_t i = 0; i < n; ++i) acc += static_cast<double>(g[i]) * px2[i];
        const_cast<Tensor&>(s).grad()[0] += static_cast<float>(acc);
      }
    });
  }
  return out;
}

Tensor hadamard(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims()) shape_fail("hadamard", a, b);
  Tensor out = make_out(tape, a.dims(), {&a, &b});
  const size_t n = a.numel();
  const float* pa = a.data();
  const float* pb = b.data();
  float* po = out.data();
  for (size_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  check_finite(out, "hadamard");
  if (want_grad(tape, out)) {
    tape.record("hadamard", [a, b, out, n]() {
      const float* g = out.grad().data();
      if (a.needs_grad()) {
        float* da = const_cast<Tensor&>(a).grad().data();
        const float* pb2 = b.data();
        for (size_t i = 0; i < n; ++i) da[i] += g[i] * pb2[i];
      }
      if (b.needs_grad()) {
        float* db = const_cast<Tensor&>(b).grad().data();
        const float* pa2 = a.data();
        for (size_t i = 0; i < n; ++i) db[i] += g[i] * pa2[i];
      }
    });
  }
  return out;
}

// ---- softmax / layer norm / gelu ---------------------------------------------

Tensor softmax(Tape& tape, const Tensor& x, int axis) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: axis out of range");
  size_t inner = 1, outer = 1;
  for (int i = axis + 1; i < r; ++i) inner *= static_cast<size_t>(x.dim(i));
  for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(x.dim(i));
  const size_t n = static_cast<size_t>(x.dim(axis));

  Tensor out = make_out(tape, x.dims(), {&x});
  const float* px = x.data();
  float* po = out.data();
  for (size_t o = 0; o < outer; ++o) {
    for (size_t i = 0; i < inner; ++i) {
      const size_t base = o * n * inner + i;
      float mx = -std::numeric_limits<float>::infinity();
      for (size_t k = 0; k < n; ++k) mx = std::max(mx, px[base + k * inner]);
      float denom = 0.0f;
      for (size_t k = 0; k < n; ++k) {
        float e = std::exp(px[base + k * inner] - mx);
        po[base + k * inner] = e;
        denom += e;
      }
      const float inv = 1.0f / denom;
      for (size_t k = 0; k < n; ++k) po[base + k * inner] *= inv;
    }
  }
  check_finite(out, "softmax");

  if (want_grad(tape, out)) {
    tape.record("softmax", [x, out, outer, inner, n]() {
      if (!x.needs_grad()) return;
      const float* g = out.grad().data();
      const float* y = out.data();
      float* dx = const_cast<Tensor&>(x).grad().data();
      for (size_t o = 0; o < outer; ++o) {
        for (size_t i = 0; i < inner; ++i) {
          const size_t base = o * n * inner + i;
          float dot = 0.0f;
          for (size_t k = 0; k < n; ++k) dot += g[base + k * inner] * y[base + k * inner];
          for (size_t k = 0; k < n; ++k) {
            const size_t idx = base + k * inner;
            dx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps) {
  auto [rows, d] = as_rows(x);
  if (gamma.rank() != 1 || gamma.dim(0) != d) shape_fail("layer_norm(gamma)", x, gamma);
  if (beta.rank() != 1 || beta.dim(0) != d) shape_fail("layer_norm(beta)", x, beta);

  Tensor out = make_out(tape, x.dims(), {&x, &gamma, &beta});
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto rstd = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
  const float* px = x.data();
  const float* pg = gamma.data();
  const float* pb = beta.data();
  float* po = out.data();
  for (int rI = 0; rI < rows; ++rI) {
    const float* xr = px + static_cast<size_t>(rI) * d;
    float* yr = po + static_cast<size_t>(rI) * d;
    float* hr = xhat->data() + static_cast<size_t>(rI) * d;
    float mu = 0.0f;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= static_cast<float>(d);
    float var = 0.0f;
    for (int j = 0; j < d; ++j) {
      float c = xr[j] - mu;
      var += c * c;
    }
    var /= static_cast<float>(d);
    const float inv = 1.0f / std::sqrt(var + eps);
    (*rstd)[static_cast<size_t>(rI)] = inv;
    for (int j = 0; j < d; ++j) {
      hr[j] = (xr[j] - mu) * inv;
      yr[j] = pg[j] * hr[j] + pb[j];
    }
  }
  check_finite(out, "layer_norm");

  if (want_grad(tape, out)) {
    tape.record("layer_norm", [x, gamma, beta, out, xhat, rstd, rows = rows, d = d]() {
      const float* g = out.grad().data();
      const float* h = xhat->data();
      const float* pg = gamma.data();
      float* dgamma = gamma.needs_grad() ? const_cast<Tensor&>(gamma).grad().data() : nullptr;
      float* dbeta = beta.needs_grad() ? const_cast<Tensor&>(beta).grad().data() : nullptr;
      float* dx = x.needs_grad() ? const_cast<Tensor&>(x).grad().data() : nullptr;
      for (int rI = 0; rI < rows; ++rI) {
        const size_t off = static_cast<size_t>(rI) * d;
        const float inv = (*rstd)[static_cast<size_t>(rI)];
        float sum_dh = 0.0f, sum_dh_h = 0.0f;
        for (int j = 0; j < d; ++j) {
          const float gj = g[off + j];
          if (dgamma) dgamma[j] += gj * h[off + j];
          if (dbeta) dbeta[j] += gj;
          const float dh = gj * pg[j];
          sum_dh += dh;
          sum_dh_h += dh * h[off + j];
        }
        if (dx) {
          const float invd = 1.0f / static_cast<float>(d);
          for (int j = 0; j < d; ++j) {
            const float dh = g[off + j] * pg[j];
            dx[off + j] += inv * (dh - invd * sum_dh - h[off + j] * invd * sum_dh_h);
          }
        }
      }
    });
  }
  return out;
}

namespace {
inline float norm_cdf(float v) { return 0.5f * std::erfc(-v * 0.70710678118654752f); }
inline float norm_pdf(float v) { return 0.3989422804014327f * std::exp(-0.5f * v * v); }
}  // namespace

Tensor gelu(Tape& tape, const Tensor& x) {
  Tensor out = make_out(tape, x.dims(), {&x});
  const size_t n = x.numel();
  const float* px = x.data();
  float* po = out.data();
  for (size_t i = 0; i < n; ++i) po[i] = px[i] * norm_cdf(px[i]);
  check_finite(out, "gelu");
  if (want_grad(tape, out)) {
    tape.record("gelu", [x, out, n]() {
      if (!x.needs_grad()) return;
      const float* g = out.grad().data();
      const float* px2 = x.data();
      float* dx = const_cast<Tensor&>(x).grad().data();
      for (size_t i = 0; i < n; ++i) {
        const float v = px2[i];
        dx[i] += g[i] * (norm_cdf(v) + v * norm_pdf(v));
      }
    });
  }
  return out;
}

// ---- reductions ---------------------------------------------------------------

Tensor sum(Tape& tape, const Tensor& x) {
  Tensor out = make_out(tape, {1}, {&x});
  double acc = 0.0;
  const float* px = x.data();
  const size_t n = x.numel();
  for (size_t i = 0; i < n; ++i) acc += px[i];
  out.data()[0] = static_cast<float>(acc);
  check_finite(out, "sum");
  if (want_grad(tape, out)) {
    tape.record("sum", [x, out, n]() {
      if (!x.needs_grad()) return;
      const float g = out.grad()[0];
      float* dx = const_cast<Tensor&>(x).grad().data();
      for (size_t i = 0; i < n; ++i) dx[i] += g;
    });
  }
  return out;
}

Tensor mean(Tape& tape, const Tensor& x) {
  const size_t n = x.numel();
  Tensor s = sum(tape, x);
  return scale(tape, s, 1.0f / static_cast<float>(n));
}

Tensor add_scalars(Tape& tape, const std::vector<Tensor>& terms) {
  if (terms.empty()) throw ValueError("add_scalars: empty term list");
  Tensor out = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) {
    if (terms[i].numel() != 1) throw ShapeError("add_scalars: terms must be scalar");
    out = add(tape, out, terms[i]);
  }
  return out;
}

Tensor cross_entropy(Tape& tape, const Tensor& logits, const std::vector<int>& targets,
                     int ignore_id) {
  auto [rows, k] = as_rows(logits);
  if (static_cast<size_t>(rows) != targets.size())
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(rows) + " rows");
  for (int t : targets)
    if (t != ignore_id && (t < 0 || t >= k))
      throw ValueError("cross_entropy: target id " + std::to_string(t) + " outside [0," +
                       std::to_string(k) + ")");

  auto probs = std::make_shared<std::vector<float>>(logits.numel());
  const float* pl = logits.data();
  double acc = 0.0;
  int valid = 0;
  for (int rI = 0; rI < rows; ++rI) {
    const size_t off = static_cast<size_t>(rI) * k;
    float mx = pl[off];
    for (int j = 1; j < k; ++j) mx = std::max(mx, pl[off + j]);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) {
      const float e = std::exp(pl[off + j] - mx);
      (*probs)[off + j] = e;
      denom += e;
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int j = 0; j < k; ++j) (*probs)[off + j] *= inv;
    if (targets[static_cast<size_t>(rI)] == ignore_id) continue;
    ++valid;
    acc += std::log(denom) + mx - pl[off + targets[static_cast<size_t>(rI)]];
  }
  if (valid == 0) throw ValueError("cross_entropy: every target is the ignore id");

  Tensor out = make_out(tape, {1}, {&logits});
  out.data()[0] = static_cast<float>(acc / valid);
  check_finite(out, "cross_entropy");

  if (want_grad(tape, out)) {
    tape.record("cross_entropy", [logits, out, targets, ignore_id, probs, rows = rows, k = k,
                                  valid]() {
      if (!logits.needs_grad()) return;
      const float g = out.grad()[0] / static_cast<float>(valid);
      float* dl = const_cast<Tensor&>(logits).grad().data();
      for (int rI = 0; rI < rows; ++rI) {
        const int tgt = targets[static_cast<size_t>(rI)];
        if (tgt == ignore_id) continue;
        const size_t off = static_cast<size_t>(rI) * k;
        for (int j = 0; j < k; ++j) dl[off + j] += g * (*probs)[off + j];
        dl[off + tgt] -= g;
      }
    });
  }
  return out;
}

// ---- gather / scatter style ops ------------------------------------------------

Tensor embedding(Tape& tape, const Tensor& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be [V,D]");
  const int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v) throw ValueError("embedding: id " + std::to_string(id) + " out of range");
  Tensor out = make_out(tape, {static_cast<int>(ids.size()), d}, {&table});
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.data() + i * d, table.data() + static_cast<size_t>(ids[i]) * d,
                sizeof(float) * static_cast<size_t>(d));
  check_finite(out, "embedding");
  if (want_grad(tape, out)) {
    tape.record("embedding", [table, out, ids, d]() {
      if (!table.needs_grad()) return;
      float* dt = const_cast<Tensor&>(table).grad().data();
      const float* g = out.grad().data();
      for (size_t i = 0; i < ids.size(); ++i) {
        float* row = dt + static_cast<size_t>(ids[i]) * d;
        const float* gr = g + i * d;
        for (int j = 0; j < d; ++j) row[j] += gr[j];
      }
    });
  }
  return out;
}

Tensor gather_rows(Tape& tape, const Tensor& x, const std::vector<int>& rows) {
  if (x.rank() != 3) throw ShapeError("gather_rows: input must be [B,R,D]");
  const int b = x.dim(0), r = x.dim(1), d = x.dim(2);
  if (static_cast<int>(rows.size()) != b) throw ShapeError("gather_rows: one row index per sample");
  for (int idx : rows)
    if (idx < 0 || idx >= r) throw ValueError("gather_rows: row index out of range");
  Tensor out = make_out(tape, {b, d}, {&x});
  for (int i = 0; i < b; ++i)
    std::memcpy(out.data() + static_cast<size_t>(i) * d,
                x.data() + (static_cast<size_t>(i) * r + rows[static_cast<size_t>(i)]) * d,
                sizeof(float) * static_cast<size_t>(d));
  check_finite(out, "gather_rows");
  if (want_grad(tape, out)) {
    tape.record("gather_rows", [x, out, rows, r, d, b]() {
      if (!x.needs_grad()) return;
      float* dx = const_cast<Tensor&>(x).grad().data();
      const float* g = out.grad().data();
      for (int i = 0; i < b; ++i) {
        float* row = dx + (static_cast<size_t>(i) * r + rows[static_cast<size_t>(i)]) * d;
        const float* gr = g + static_cast<size_t>(i) * d;
        for (int j = 0; j < d; ++j) row[j] += gr[j];
      }
    });
  }
  return out;
}

Tensor prepend_row(Tape& tape, const Tensor& x, const Tensor& row) {
  if (x.rank() != 3) throw ShapeError("prepend_row: input must be [B,N,D]");
  const int b = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (row.rank() != 1 || row.dim(0) != d) shape_fail("prepend_row", x, row);
  Tensor out = make_out(tape, {b, n + 1, d}, {&x, &row});
  for (int i = 0; i < b; ++i) {
    float* dst = out.data() + static_cast<size_t>(i) * (n + 1) * d;
    std::memcpy(dst, row.data(), sizeof(float) * static_cast<size_t>(d));
    std::memcpy(dst + d, x.data() + static_cast<size_t>(i) * n * d,
                sizeof(float) * static_cast<size_t>(n) * d);
  }
  check_finite(out, "prepend_row");
  if (want_grad(tape, out)) {
    tape.record("prepend_row", [x, row, out, b, n, d]() {
      const float* g = out.grad().data();
      if (row.needs_grad()) {
        float* dr = const_cast<Tensor&>(row).grad().data();
        for (int i = 0; i < b; ++i) {
          const float* gr = g + static_cast<size_t>(i) * (n + 1) * d;
          for (int j = 0; j < d; ++j) dr[j] += gr[j];
        }
      }
      if (x.needs_grad()) {
        float* dx = const_cast<Tensor&>(x).grad().data();
        for (int i = 0; i < b; ++i) {
          const float* gr = g + static_cast<size_t>(i) * (n + 1) * d + d;
          float* dst = dx + static_cast<size_t>(i) * n * d;
          for (size_t j = 0; j < static_cast<size_t>(n) * d; ++j) dst[j] += gr[j];
        }
      }
    });
  }
  return out;
}

Tensor concat_cols(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) shape_fail("concat_cols", a, b);
  const int rows = a.dim(0), ca = a.dim(1), cb = b.dim(1);
  Tensor out = make_out(tape, {rows, ca + cb}, {&a, &b});
  for (int i = 0; i < rows; ++i) {
    float* dst = out.data() + static_cast<size_t>(i) * (ca + cb);
    std::memcpy(dst, a.data() + static_cast<size_t>(i) * ca, sizeof(float) * ca);
    std::memcpy(dst + ca, b.data() + static_cast<size_t>(i) * cb, sizeof(float) * cb);
  }
  check_finite(out, "concat_cols");
  if (want_grad(tape, out)) {
    tape.record("concat_cols", [a, b, out, rows, ca, cb]() {
      const float* g = out.grad().data();
      if (a.needs_grad()) {
        float* da = const_cast<Tensor&>(a).grad().data();
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < ca; ++j)
            da[static_cast<size_t>(i) * ca + j] += g[static_cast<size_t>(i) * (ca + cb) + j];
      }
      if (b.needs_grad()) {
        float* db = const_cast<Tensor&>(b).grad().data();
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cb; ++j)
            db[static_cast<size_t>(i) * cb + j] += g[static_cast<size_t>(i) * (ca + cb) + ca + j];
      }
    });
  }
  return out;
}

Tensor rowwise_dot(Tape& tape, const Tensor& a, const Tensor& b) {
  if (a.dims() != b.dims() || a.rank() != 2) shape_fail("rowwise_dot", a, b);
  const int rows = a.dim(0), d = a.dim(1);
  Tensor out = make_out(tape, {rows, 1}, {&a, &b});
  for (int i = 0; i < rows; ++i) {
    const float* pa = a.data() + static_cast<size_t>(i) * d;
    const float* pb = b.data() + static_cast<size_t>(i) * d;
    float acc = 0.0f;
    for (int j = 0; j < d; ++j) acc += pa[j] * pb[j];
    out.data()[i] = acc;
  }
  check_finite(out, "rowwise_dot");
  if (want_grad(tape, out)) {
    tape.record("rowwise_dot", [a, b, out, rows, d]() {
      const float* g = out.grad().data();
      for (int i = 0; i < rows; ++i) {
        const size_t off = static_cast<size_t>(i) * d;
        if (a.needs_grad()) {
          float* da = const_cast<Tensor&>(a).grad().data();
          const float* pb = b.data();
          for (int j = 0; j < d; ++j) da[off + j] += g[i] * pb[off + j];
        }
        if (b.needs_grad()) {
          float* db = const_cast<Tensor&>(b).grad().data();
          const float* pa = a.data();
          for (int j = 0; j < d; ++j) db[off + j] += g[i] * pa[off + j];
        }
      }
    });
  }
  return out;
}

Tensor l2_normalize(Tape& tape, const Tensor& x, float eps) {
  auto [rows, d] = as_rows(x);
  Tensor out = make_out(tape, x.dims(), {&x});
  auto inv_norm = std::make_shared<std::vector<float>>(static_cast<size_t>(rows));
  const float* px = x.data();
  float* po = out.data();
  for (int i = 0; i < rows; ++i) {
    const size_t off = static_cast<size_t>(i) * d;
    float sq = 0.0f;
    for (int j = 0; j < d; ++j) sq += px[off + j] * px[off + j];
    const float inv = 1.0f / std::sqrt(sq + eps);
    (*inv_norm)[static_cast<size_t>(i)] = inv;
    for (int j = 0; j < d; ++j) po[off + j] = px[off + j] * inv;
  }
  check_finite(out, "l2_normalize");
  if (want_grad(tape, out)) {
    tape.record("l2_normalize", [x, out, inv_norm, rows = rows, d = d]() {
      if (!x.needs_grad()) return;
      const float* g = out.grad().data();
      const float* y = out.data();
      float* dx = const_cast<Tensor&>(x).grad().data();
      for (int i = 0; i < rows; ++i) {
        const size_t off = static_cast<size_t>(i) * d;
        const float inv = (*inv_norm)[static_cast<size_t>(i)];
        float dot = 0.0f;
        for (int j = 0; j < d; ++j) dot += g[off + j] * y[off + j];
        for (int j = 0; j < d; ++j) dx[off + j] += inv * (g[off + j] - y[off + j] * dot);
      }
    });
  }
  return out;
}

// ---- fused attention ------------------------------------------------------------

Tensor multi_head_attention(Tape& tape, const Tensor& qkv, int heads, bool causal,
                            Tensor* probs_out) {
  if (qkv.rank() != 3 || qkv.dim(2) % 3 != 0)
    throw ShapeError("multi_head_attention: input must be [B,R,3D]");
  const int b = qkv.dim(0), r = qkv.dim(1), d = qkv.dim(2) / 3;
  if (d % heads != 0) throw ShapeError("multi_head_attention: head count must divide D");
  const int dh = d / heads;
  const float sc = 1.0f / std::sqrt(static_cast<float>(dh));
  const int stride = 3 * d;

  Tensor out = make_out(tape, {b, r, d}, {&qkv});
  auto probs = std::make_shared<std::vector<float>>(
      static_cast<size_t>(b) * heads * r * r);

#pragma omp parallel for collapse(2) schedule(static)
  for (int bi = 0; bi < b; ++bi) {
    for (int h = 0; h < heads; ++h) {
      const float* base = qkv.data() + static_cast<size_t>(bi) * r * stride;
      CSMap Q(base + h * dh, r, dh, StrideT(stride, 1));
      CSMap K(base + d + h * dh, r, dh, StrideT(stride, 1));
      CSMap V(base + 2 * d + h * dh, r, dh, StrideT(stride, 1));
      Map P(probs->data() + (static_cast<size_t>(bi) * heads + h) * r * r, r, r);
      P.noalias() = Q * K.transpose();
      P *= sc;
      for (int i = 0; i < r; ++i) {
        float* row = P.data() + static_cast<size_t>(i) * r;
        const int lim = causal ? i + 1 : r;
        float mx = row[0];
        for (int j = 1; j < lim; ++j) mx = std::max(mx, row[j]);
        float denom = 0.0f;
        for (int j = 0; j < lim; ++j) {
          row[j] = std::exp(row[j] - mx);
          denom += row[j];
        }
        const float inv = 1.0f / denom;
        for (int j = 0; j < lim; ++j) row[j] *= inv;
        for (int j = lim; j < r; ++j) row[j] = 0.0f;
      }
      SMap O(out.data() + static_cast<size_t>(bi) * r * d + h * dh, r, dh, StrideT(d, 1));
      O.noalias() = P * V;
    }
  }
  check_finite(out, "multi_head_attention");

  if (probs_out) {
    *probs_out = Tensor::from_data({b, heads, r, r}, *probs);
  }

  if (want_grad(tape, out)) {
    tape.record("multi_head_attention", [qkv, out, probs, b, r, d, dh, heads, sc, stride]() {
      if (!qkv.needs_grad()) return;
      float* dqkv = const_cast<Tensor&>(qkv).grad().data();
      const float* gout = out.grad().data();
#pragma omp parallel for collapse(2) schedule(static)
      for (int bi = 0; bi < b; ++bi) {
        for (int h = 0; h < heads; ++h) {
          const float* base = qkv.data() + static_cast<size_t>(bi) * r * stride;
          float* dbase = dqkv + static_cast<size_t>(bi) * r * stride;
          CSMap Q(base + h * dh, r, dh, StrideT(stride, 1));
          CSMap K(base + d + h * dh, r, dh, StrideT(stride, 1));
          CSMap V(base + 2 * d + h * dh, r, dh, StrideT(stride, 1));
          CMap P(probs->data() + (static_cast<size_t>(bi) * heads + h) * r * r, r, r);
          CSMap dO(gout + static_cast<size_t>(bi) * r * d + h * dh, r, dh, StrideT(d, 1));

          MatRM dP(r, r), dS(r, r);
          dP.noalias() = dO * V.transpose();
          // softmax backward per row; masked entries have P==0 so dS==0 there
          for (int i = 0; i < r; ++i) {
            const float dot = dP.row(i).dot(P.row(i));
            dS.row(i) = P.row(i).cwiseProduct(dP.row(i).array().operator-(dot).matrix());
          }
          dS *= sc;
          SMap dQ(dbase + h * dh, r, dh, StrideT(stride, 1));
          SMap dK(dbase + d + h * dh, r, dh, StrideT(stride, 1));
          SMap dV(dbase + 2 * d + h * dh, r, dh, StrideT(stride, 1));
          dQ.noalias() += dS * K;
          dK.noalias() += dS.transpose() * Q;
          dV.noalias() += P.transpose() * dO;
        }
      }
    });
  }
  return out;
}

// ---- backward -------------------------------------------------------------------

void backward(Tape& tape, const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ContractError("backward: loss must be a scalar tensor");
  loss.node()->grad.assign(1, 1.0f);
  for (auto it = tape.entries_.rbegin(); it != tape.entries_.rend(); ++it) {
    it->backward_fn();
  }
}

}  // namespace mgp
