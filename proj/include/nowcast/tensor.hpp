#pragma once

// Minimal reverse-mode automatic differentiation over dense NCHW arrays.
//
// A Tape records every operation applied to its Vars together with a
// closure that maps the output gradient to input gradients. Tapes are
// single-use and single-threaded: build one per forward/backward pass.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <concepts>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nowcast/error.hpp"

namespace nowcast::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

template <std::floating_point T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), values_(element_count(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != element_count(shape_)) {
      throw InvalidArgument("tensor of shape " + to_string(shape_) + " given " +
                            std::to_string(values_.size()) + " values");
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return values_.size(); }

  std::span<T> data() noexcept { return values_; }
  std::span<const T> data() const noexcept { return values_; }
  std::vector<T>& values() noexcept { return values_; }
  const std::vector<T>& values() const noexcept { return values_; }

  T& operator[](std::size_t i) { return values_[i]; }
  const T& operator[](std::size_t i) const { return values_[i]; }

  /// NCHW element access.
  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return values_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<T> values_;
};

/// Trainable tensor with its gradient accumulator.
template <std::floating_point T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  std::vector<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.size(), T(0)) {}

  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

/// Running statistics for batch normalization (not trainable).
template <std::floating_point T>
struct BatchNormState {
  std::string name;
  std::vector<T> mean;
  std::vector<T> var;

  BatchNormState() = default;
  BatchNormState(std::string n, std::size_t channels)
      : name(std::move(n)), mean(channels, T(0)), var(channels, T(1)) {}
};

enum class Mode { train, infer };

template <std::floating_point T>
class Tape;

/// Handle to a value recorded on a Tape.
template <std::floating_point T>
class Var {
 public:
  Var() = default;
  Var(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor<T>& value() const { return tape_->value(*this); }
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

template <std::floating_point T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::span<const T>)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives gradients.
  Var<T> constant(Tensor<T> value) { return push(std::move(value), nullptr, false, {}); }

  /// Leaf whose gradient is kept and readable through grad() after backward.
  Var<T> variable(Tensor<T> value) { return push(std::move(value), nullptr, true, {}); }

  /// Leaf bound to a parameter; backward accumulates into p.grad. Repeated
  /// calls with the same parameter return the same leaf.
  Var<T> param(Parameter<T>& p) {
    if (auto it = param_leaf_.find(&p); it != param_leaf_.end()) return {this, it->second};
    Node n;
    n.ref = &p.value;
    n.param = &p;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    param_leaf_[&p] = nodes_.size() - 1;
    return {this, nodes_.size() - 1};
  }

  /// Records an op output. The closure is dropped when no input needs a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs, BackwardFn fn) {
    const bool rg = std::any_of(inputs.begin(), inputs.end(),
                                [this](const Var<T>& v) { return requires_grad(v); });
    return push(std::move(value), nullptr, rg, rg ? std::move(fn) : BackwardFn{});
  }

  const Tensor<T>& value(const Var<T>& v) const {
    const Node& n = nodes_.at(v.id());
    return n.ref ? *n.ref : n.value;
  }

  bool requires_grad(const Var<T>& v) const { return nodes_.at(v.id()).requires_grad; }

  /// Gradient buffer for accumulation from inside backward closures.
  std::vector<T>& grad_buffer(const Var<T>& v) {
    Node& n = nodes_.at(v.id());
    if (n.grad.empty()) n.grad.assign(value(v).size(), T(0));
    return n.grad;
  }

  /// Gradient of a leaf after backward(); empty if it was unreachable.
  std::span<const T> grad(const Var<T>& v) const { return nodes_.at(v.id()).grad; }

  std::size_t size() const noexcept { return nodes_.size(); }

  /// Reverse sweep from a scalar loss. Visits each node at most once, in
  /// reverse recording order; parameter leaves add their gradient into
  /// Parameter::grad. Backward closures are released as they run, so a tape
  /// can be swept only once.
  void backward(const Var<T>& loss) {
    if (value(loss).size() != 1) {
      throw InvalidArgument("backward needs a scalar loss, got shape " +
                            to_string(value(loss).shape()));
    }
    if (swept_) throw InvalidArgument("tape was already differentiated; record a new tape");
    swept_ = true;
    if (!requires_grad(loss)) return;
    grad_buffer(loss)[0] += T(1);
    for (std::size_t id = loss.id() + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.empty()) continue;
      if (n.param) {
        auto& acc = n.param->grad;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += n.grad[i];
      }
      if (n.backward) {
        std::vector<T> g = std::move(n.grad);
        n.grad.clear();
        n.backward(*this, g);
        n.backward = nullptr;
      }
    }
  }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* ref = nullptr;
    Parameter<T>* param = nullptr;
    bool requires_grad = false;
    std::vector<T> grad;
    BackwardFn backward;
  };

  Var<T> push(Tensor<T> value, Parameter<T>* param, bool rg, BackwardFn fn) {
    Node n;
    n.value = std::move(value);
    n.param = param;
    n.requires_grad = rg;
    n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool swept_ = false;
  std::unordered_map<const Parameter<T>*, std::size_t> param_leaf_;
};

// ---------------------------------------------------------------------------
// Operations

namespace detail {

inline void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw InvalidArgument(std::string(op) + " expects NCHW input, got " + to_string(s));
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

/// Output rows per im2col chunk; bounds the column buffer to ~16k pixels.
inline std::size_t chunk_rows(std::size_t width) {
  return std::max<std::size_t>(1, 16384 / std::max<std::size_t>(1, width));
}

/// col[(c*k + ky)*k + kx][(y - row0)*W + x] = x[c][y + ky - pad][x + kx - pad] (zero outside).
template <typename T>
void im2col(const T* x, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
            std::size_t row0, std::size_t row1, T* col) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t n = (row1 - row0) * w;
  const auto sw = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        T* dst = col + ((c * k + ky) * k + kx) * n;
        const auto dx = static_cast<std::ptrdiff_t>(kx) - pad;
        const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(sw, sw - dx);
        for (std::size_t y = row0; y < row1; ++y) {
          T* d = dst + (y - row0) * w;
          const auto sy = static_cast<std::ptrdiff_t>(y + ky) - pad;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h) || x_lo >= x_hi) {
            std::fill(d, d + w, T(0));
            continue;
          }
          const T* s = x + (c * h + static_cast<std::size_t>(sy)) * w;
          std::fill(d, d + x_lo, T(0));
          std::copy(s + x_lo + dx, s + x_hi + dx, d + x_lo);
          std::fill(d + x_hi, d + sw, T(0));
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters column gradients back onto the image.
template <typename T>
void col2im_add(const T* col, std::size_t cin, std::size_t h, std::size_t w, std::size_t k,
                std::size_t row0, std::size_t row1, T* x) {
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  const std::size_t n = (row1 - row0) * w;
  const auto sw = static_cast<std::ptrdiff_t>(w);
  for (std::size_t c = 0; c < cin; ++c) {
    for (std::size_t ky = 0; ky < k; ++ky) {
      for (std::size_t kx = 0; kx < k; ++kx) {
        const T* src = col + ((c * k + ky) * k + kx) * n;
        const auto dx = static_cast<std::ptrdiff_t>(kx) - pad;
        const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, -dx);
        const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(sw, sw - dx);
        for (std::size_t y = row0; y < row1; ++y) {
          const auto sy = static_cast<std::ptrdiff_t>(y + ky) - pad;
          if (sy < 0 || sy >= static_cast<std::ptrdiff_t>(h)) continue;
          const T* s = src + (y - row0) * w;
          T* d = x + (c * h + static_cast<std::size_t>(sy)) * w;
          for (std::ptrdiff_t xo = x_lo; xo < x_hi; ++xo) d[xo + dx] += s[xo];
        }
      }
    }
  }
}

}  // namespace detail

/// Cross-correlation with an odd square kernel, stride 1 and zero padding
/// k/2, so spatial dims are preserved. kernel: [Cout, Cin, k, k], bias: [Cout].
template <std::floating_point T>
Var<T> conv2d(Var<T> input, Var<T> kernel, Var<T> bias) {
  using namespace detail;
  const auto& X = input.value();
  const auto& Wt = kernel.value();
  require_rank4(X.shape(), "conv2d");
  if (Wt.rank() != 4 || Wt.dim(2) != Wt.dim(3) || Wt.dim(2) % 2 == 0) {
    throw InvalidArgument("conv2d kernel must be [Cout,Cin,k,k] with odd k, got " +
                          to_string(Wt.shape()));
  }
  if (Wt.dim(1) != X.dim(1)) {
    throw InvalidArgument("conv2d channel mismatch: input has " + std::to_string(X.dim(1)) +
                          ", kernel expects " + std::to_string(Wt.dim(1)));
  }
  if (bias.value().size() != Wt.dim(0)) throw InvalidArgument("conv2d bias size mismatch");

  const std::size_t nb = X.dim(0), cin = X.dim(1), h = X.dim(2), w = X.dim(3);
  const std::size_t cout = Wt.dim(0), k = Wt.dim(2), hw = h * w, kk = cin * k * k;
  Tensor<T> Y({nb, cout, h, w});
  Eigen::Map<const RowMat<T>> wm(Wt.data().data(), cout, kk);
  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bv(bias.value().data().data(), cout);
  const std::size_t rows = chunk_rows(w);
  std::vector<T> col(k == 1 ? 0 : kk * std::min(h, rows) * w);

  for (std::size_t b = 0; b < nb; ++b) {
    const T* xb = X.data().data() + b * cin * hw;
    T* yb = Y.data().data() + b * cout * hw;
    for (std::size_t r0 = 0; r0 < h; r0 += rows) {
      const std::size_t r1 = std::min(h, r0 + rows);
      const auto n = static_cast<Eigen::Index>((r1 - r0) * w);
      StridedMap<T> ym(yb + r0 * w, cout, n, Eigen::OuterStride<>(hw));
      if (k == 1) {
        ConstStridedMap<T> xm(xb + r0 * w, cin, n, Eigen::OuterStride<>(hw));
        ym.noalias() = wm * xm;
      } else {
        im2col(xb, cin, h, w, k, r0, r1, col.data());
        Eigen::Map<const RowMat<T>> cm(col.data(), kk, n);
        ym.noalias() = wm * cm;
      }
      ym.colwise() += bv;
    }
  }

  return input.tape().record(
      std::move(Y), {input, kernel, bias},
      [input, kernel, bias, nb, cin, h, w, cout, k, hw, kk](Tape<T>& tape, std::span<const T> gy) {
        const auto& X = input.value();
        const auto& Wt = kernel.value();
        Eigen::Map<const RowMat<T>> wm(Wt.data().data(), cout, kk);
        const bool need_x = tape.requires_grad(input);
        const bool need_w = tape.requires_grad(kernel);
        const bool need_b = tape.requires_grad(bias);
        T* gx = need_x ? tape.grad_buffer(input).data() : nullptr;
        T* gw = need_w ? tape.grad_buffer(kernel).data() : nullptr;
        T* gb = need_b ? tape.grad_buffer(bias).data() : nullptr;
        const std::size_t rows = chunk_rows(w);
        std::vector<T> col(k == 1 ? 0 : kk * std::min(h, rows) * w);
        std::vector<T> gcol(k == 1 || !need_x ? 0 : col.size());
        for (std::size_t b = 0; b < nb; ++b) {
          const T* xb = X.data().data() + b * cin * hw;
          const T* gyb = gy.data() + b * cout * hw;
          for (std::size_t r0 = 0; r0 < h; r0 += rows) {
            const std::size_t r1 = std::min(h, r0 + rows);
            const auto n = static_cast<Eigen::Index>((r1 - r0) * w);
            ConstStridedMap<T> gm(gyb + r0 * w, cout, n, Eigen::OuterStride<>(hw));
            if (need_b) {
              for (std::size_t o = 0; o < cout; ++o) {
                const T* row = gyb + o * hw + r0 * w;
                T acc = 0;
                for (Eigen::Index i = 0; i < n; ++i) acc += row[i];
                gb[o] += acc;
              }
            }
            if (k == 1) {
              ConstStridedMap<T> xm(xb + r0 * w, cin, n, Eigen::OuterStride<>(hw));
              if (need_w) {
                Eigen::Map<RowMat<T>> gwm(gw, cout, kk);
                gwm.noalias() += gm * xm.transpose();
              }
              if (need_x) {
                StridedMap<T> gxm(gx + b * cin * hw + r0 * w, cin, n, Eigen::OuterStride<>(hw));
                gxm.noalias() += wm.transpose() * gm;
              }
            } else {
              if (need_w) {
                im2col(xb, cin, h, w, k, r0, r1, col.data());
                Eigen::Map<const RowMat<T>> cm(col.data(), kk, n);
                Eigen::Map<RowMat<T>> gwm(gw, cout, kk);
                gwm.noalias() += gm * cm.transpose();
              }
              if (need_x) {
                Eigen::Map<RowMat<T>> gcm(gcol.data(), kk, n);
                gcm.noalias() = wm.transpose() * gm;
                col2im_add(gcol.data(), cin, h, w, k, r0, r1, gx + b * cin * hw);
              }
            }
          }
        }
      });
}

/// Per-channel batch normalization over (N, H, W). Train mode normalizes by
/// batch statistics and folds them into `state` with the given momentum;
/// infer mode uses the running statistics.
template <std::floating_point T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormState<T>& state, Mode mode,
                  double momentum = 0.9, double eps = 1e-5) {
  const auto& X = input.value();
  detail::require_rank4(X.shape(), "batch_norm");
  const std::size_t nb = X.dim(0), ch = X.dim(1), hw = X.dim(2) * X.dim(3);
  if (gamma.value().size() != ch || beta.value().size() != ch || state.mean.size() != ch ||
      state.var.size() != ch) {
    throw InvalidArgument("batch_norm parameters do not match " + std::to_string(ch) + " channels");
  }
  const std::size_t count = nb * hw;
  if (count == 0) throw InvalidArgument("batch_norm on a zero-size batch");

  std::vector<T> inv_std(ch);
  std::vector<T> xhat(X.size());
  Tensor<T> Y(X.shape());
  const auto& g = gamma.value();
  const auto& bt = beta.value();
  for (std::size_t c = 0; c < ch; ++c) {
    double mean, var;
    if (mode == Mode::train) {
      double s = 0.0;
      for (std::size_t b = 0; b < nb; ++b) {
        const T* p = X.data().data() + (b * ch + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) s += p[i];
      }
      mean = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < nb; ++b) {
        const T* p = X.data().data() + (b * ch + c) * hw;
        for (std::size_t i = 0; i < hw; ++i) ss += (p[i] - mean) * (p[i] - mean);
      }
      var = ss / static_cast<double>(count);
      state.mean[c] = static_cast<T>(momentum * state.mean[c] + (1.0 - momentum) * mean);
      state.var[c] = static_cast<T>(momentum * state.var[c] + (1.0 - momentum) * var);
    } else {
      mean = state.mean[c];
      var = state.var[c];
    }
    inv_std[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
    const T m = static_cast<T>(mean);
    for (std::size_t b = 0; b < nb; ++b) {
      const std::size_t off = (b * ch + c) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = (X[off + i] - m) * inv_std[c];
        xhat[off + i] = xh;
        Y[off + i] = g[c] * xh + bt[c];
      }
    }
  }

  return input.tape().record(
      std::move(Y), {input, gamma, beta},
      [input, gamma, beta, mode, nb, ch, hw, count, inv_std = std::move(inv_std),
       xhat = std::move(xhat)](Tape<T>& tape, std::span<const T> gy) {
        const auto& g = gamma.value();
        const bool need_x = tape.requires_grad(input);
        T* gx = need_x ? tape.grad_buffer(input).data() : nullptr;
        T* gg = tape.requires_grad(gamma) ? tape.grad_buffer(gamma).data() : nullptr;
        T* gbt = tape.requires_grad(beta) ? tape.grad_buffer(beta).data() : nullptr;
        for (std::size_t c = 0; c < ch; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t off = (b * ch + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              sum_dy += gy[off + i];
              sum_dy_xhat += static_cast<double>(gy[off + i]) * xhat[off + i];
            }
          }
          if (gg) gg[c] += static_cast<T>(sum_dy_xhat);
          if (gbt) gbt[c] += static_cast<T>(sum_dy);
          if (!gx) continue;
          const double scale = static_cast<double>(g[c]) * inv_std[c];
          const double n = static_cast<double>(count);
          for (std::size_t b = 0; b < nb; ++b) {
            const std::size_t off = (b * ch + c) * hw;
            for (std::size_t i = 0; i < hw; ++i) {
              if (mode == Mode::train) {
                gx[off + i] += static_cast<T>(
                    scale * (gy[off + i] - sum_dy / n - xhat[off + i] * sum_dy_xhat / n));
              } else {
                gx[off + i] += static_cast<T>(scale * gy[off + i]);
              }
            }
          }
        }
      });
}

template <std::floating_point T>
Var<T> leaky_relu(Var<T> input, T slope) {
  const auto& X = input.value();
  Tensor<T> Y(X.shape());
  for (std::size_t i = 0; i < X.size(); ++i) Y[i] = X[i] >= T(0) ? X[i] : slope * X[i];
  return input.tape().record(std::move(Y), {input},
                             [input, slope](Tape<T>& tape, std::span<const T> gy) {
                               const auto& X = input.value();
                               auto& gx = tape.grad_buffer(input);
                               for (std::size_t i = 0; i < gx.size(); ++i) {
                                 gx[i] += X[i] >= T(0) ? gy[i] : slope * gy[i];
                               }
                             });
}

/// 2x2 window max, stride 2. Ties go to the first position in row-major order.
template <std::floating_point T>
Var<T> max_pool_2x2(Var<T> input) {
  const auto& X = input.value();
  detail::require_rank4(X.shape(), "max_pool_2x2");
  const std::size_t nb = X.dim(0), ch = X.dim(1), h = X.dim(2), w = X.dim(3);
  if (h % 2 || w % 2) {
    throw InvalidArgument("max_pool_2x2 needs even spatial dims, got " + to_string(X.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> Y({nb, ch, oh, ow});
  std::vector<std::uint32_t> argmax(Y.size());
  for (std::size_t p = 0; p < nb * ch; ++p) {
    const T* src = X.data().data() + p * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const std::size_t cand[4] = {2 * y * w + 2 * x, 2 * y * w + 2 * x + 1,
                                     (2 * y + 1) * w + 2 * x, (2 * y + 1) * w + 2 * x + 1};
        std::size_t best = cand[0];
        for (int j = 1; j < 4; ++j) {
          if (src[cand[j]] > src[best]) best = cand[j];
        }
        const std::size_t o = p * oh * ow + y * ow + x;
        Y[o] = src[best];
        argmax[o] = static_cast<std::uint32_t>(best);
      }
    }
  }
  return input.tape().record(
      std::move(Y), {input},
      [input, argmax = std::move(argmax), h, w, oh, ow](Tape<T>& tape, std::span<const T> gy) {
        auto& gx = tape.grad_buffer(input);
        for (std::size_t o = 0; o < gy.size(); ++o) {
          const std::size_t plane = o / (oh * ow);
          gx[plane * h * w + argmax[o]] += gy[o];
        }
      });
}

/// 2x2 window mean, stride 2.
template <std::floating_point T>
Var<T> avg_pool_2x2(Var<T> input) {
  const auto& X = input.value();
  detail::require_rank4(X.shape(), "avg_pool_2x2");
  const std::size_t nb = X.dim(0), ch = X.dim(1), h = X.dim(2), w = X.dim(3);
  if (h % 2 || w % 2) {
    throw InvalidArgument("avg_pool_2x2 needs even spatial dims, got " + to_string(X.shape()));
  }
  const std::size_t oh = h / 2, ow = w / 2;
  Tensor<T> Y({nb, ch, oh, ow});
  for (std::size_t p = 0; p < nb * ch; ++p) {
    const T* s = X.data().data() + p * h * w;
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t x = 0; x < ow; ++x) {
        const std::size_t i = 2 * y * w + 2 * x;
        Y[p * oh * ow + y * ow + x] = T(0.25) * (s[i] + s[i + 1] + s[i + w] + s[i + w + 1]);
      }
    }
  }
  return input.tape().record(std::move(Y), {input},
                             [input, h, w, oh, ow](Tape<T>& tape, std::span<const T> gy) {
                               auto& gx = tape.grad_buffer(input);
                               for (std::size_t o = 0; o < gy.size(); ++o) {
                                 const std::size_t p = o / (oh * ow);
                                 const std::size_t y = (o % (oh * ow)) / ow, x = o % ow;
                                 const std::size_t i = p * h * w + 2 * y * w + 2 * x;
                                 const T g = T(0.25) * gy[o];
                                 gx[i] += g;
                                 gx[i + 1] += g;
                                 gx[i + w] += g;
                                 gx[i + w + 1] += g;
                               }
                             });
}

/// Nearest-neighbour 2x upsampling: each pixel becomes a 2x2 block.
template <std::floating_point T>
Var<T> upsample_nearest_2x(Var<T> input) {
  const auto& X = input.value();
  detail::require_rank4(X.shape(), "upsample_nearest_2x");
  const std::size_t nb = X.dim(0), ch = X.dim(1), h = X.dim(2), w = X.dim(3);
  const std::size_t oh = 2 * h, ow = 2 * w;
  Tensor<T> Y({nb, ch, oh, ow});
  for (std::size_t p = 0; p < nb * ch; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      const T* s = X.data().data() + p * h * w + (y / 2) * w;
      T* d = Y.data().data() + p * oh * ow + y * ow;
      for (std::size_t x = 0; x < ow; ++x) d[x] = s[x / 2];
    }
  }
  return input.tape().record(std::move(Y), {input},
                             [input, h, w, oh, ow](Tape<T>& tape, std::span<const T> gy) {
                               auto& gx = tape.grad_buffer(input);
                               const std::size_t planes = gy.size() / (oh * ow);
                               for (std::size_t p = 0; p < planes; ++p) {
                                 for (std::size_t y = 0; y < oh; ++y) {
                                   const T* g = gy.data() + p * oh * ow + y * ow;
                                   T* d = gx.data() + p * h * w + (y / 2) * w;
                                   for (std::size_t x = 0; x < ow; ++x) d[x / 2] += g[x];
                                 }
                               }
                             });
}

/// Stacks b's channels after a's.
template <std::floating_point T>
Var<T> concat_channels(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  detail::require_rank4(A.shape(), "concat_channels");
  detail::require_rank4(B.shape(), "concat_channels");
  if (A.dim(0) != B.dim(0) || A.dim(2) != B.dim(2) || A.dim(3) != B.dim(3)) {
    throw InvalidArgument("concat_channels shape mismatch: " + to_string(A.shape()) + " vs " +
                          to_string(B.shape()));
  }
  const std::size_t nb = A.dim(0), ca = A.dim(1), cb = B.dim(1), hw = A.dim(2) * A.dim(3);
  Tensor<T> Y({nb, ca + cb, A.dim(2), A.dim(3)});
  for (std::size_t n = 0; n < nb; ++n) {
    std::copy_n(A.data().data() + n * ca * hw, ca * hw, Y.data().data() + n * (ca + cb) * hw);
    std::copy_n(B.data().data() + n * cb * hw, cb * hw,
                Y.data().data() + (n * (ca + cb) + ca) * hw);
  }
  return a.tape().record(std::move(Y), {a, b},
                         [a, b, nb, ca, cb, hw](Tape<T>& tape, std::span<const T> gy) {
                           for (std::size_t n = 0; n < nb; ++n) {
                             const T* g = gy.data() + n * (ca + cb) * hw;
                             if (tape.requires_grad(a)) {
                               T* d = tape.grad_buffer(a).data() + n * ca * hw;
                               for (std::size_t i = 0; i < ca * hw; ++i) d[i] += g[i];
                             }
                             if (tape.requires_grad(b)) {
                               T* d = tape.grad_buffer(b).data() + n * cb * hw;
                               for (std::size_t i = 0; i < cb * hw; ++i) d[i] += g[ca * hw + i];
                             }
                           }
                         });
}

/// Channels [begin, begin + count).
template <std::floating_point T>
Var<T> slice_channels(Var<T> input, std::size_t begin, std::size_t count) {
  const auto& X = input.value();
  detail::require_rank4(X.shape(), "slice_channels");
  const std::size_t nb = X.dim(0), ch = X.dim(1), hw = X.dim(2) * X.dim(3);
  if (begin + count > ch) throw InvalidArgument("slice_channels range exceeds channel count");
  Tensor<T> Y({nb, count, X.dim(2), X.dim(3)});
  for (std::size_t n = 0; n < nb; ++n) {
    std::copy_n(X.data().data() + (n * ch + begin) * hw, count * hw,
                Y.data().data() + n * count * hw);
  }
  return input.tape().record(std::move(Y), {input},
                             [input, nb, ch, hw, begin, count](Tape<T>& tape, std::span<const T> gy) {
                               auto& gx = tape.grad_buffer(input);
                               for (std::size_t n = 0; n < nb; ++n) {
                                 T* d = gx.data() + (n * ch + begin) * hw;
                                 const T* g = gy.data() + n * count * hw;
                                 for (std::size_t i = 0; i < count * hw; ++i) d[i] += g[i];
                               }
                             });
}

template <std::floating_point T>
Var<T> add(Var<T> a, Var<T> b) {
  const auto& A = a.value();
  const auto& B = b.value();
  if (A.shape() != B.shape()) {
    throw InvalidArgument("add shape mismatch: " + to_string(A.shape()) + " vs " +
                          to_string(B.shape()));
  }
  Tensor<T> Y(A.shape());
  for (std::size_t i = 0; i < Y.size(); ++i) Y[i] = A[i] + B[i];
  return a.tape().record(std::move(Y), {a, b}, [a, b](Tape<T>& tape, std::span<const T> gy) {
    for (const auto& v : {a, b}) {
      if (!tape.requires_grad(v)) continue;
      auto& g = tape.grad_buffer(v);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += gy[i];
    }
  });
}

/// Scalar sum of all elements.
template <std::floating_point T>
Var<T> sum(Var<T> input) {
  const auto& X = input.value();
  T s = std::accumulate(X.data().begin(), X.data().end(), T(0));
  return input.tape().record(Tensor<T>({1}, std::vector<T>{s}), {input},
                             [input](Tape<T>& tape, std::span<const T> gy) {
                               auto& gx = tape.grad_buffer(input);
                               for (auto& g : gx) g += gy[0];
                             });
}

/// Scalar sum(x * weights) for a constant weight tensor of the same shape.
template <std::floating_point T>
Var<T> weighted_sum(Var<T> input, Tensor<T> weights) {
  const auto& X = input.value();
  if (weights.shape() != X.shape()) throw InvalidArgument("weighted_sum shape mismatch");
  T s = 0;
  for (std::size_t i = 0; i < X.size(); ++i) s += X[i] * weights[i];
  return input.tape().record(Tensor<T>({1}, std::vector<T>{s}), {input},
                             [input, weights = std::move(weights)](Tape<T>& tape,
                                                                   std::span<const T> gy) {
                               auto& gx = tape.grad_buffer(input);
                               for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += gy[0] * weights[i];
                             });
}

/// Per-pixel softmax over the channel axis (no gradient).
template <std::floating_point T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  detail::require_rank4(logits.shape(), "softmax_channels");
  const std::size_t nb = logits.dim(0), k = logits.dim(1), hw = logits.dim(2) * logits.dim(3);
  Tensor<T> P(logits.shape());
  for (std::size_t n = 0; n < nb; ++n) {
    for (std::size_t i = 0; i < hw; ++i) {
      const T* z = logits.data().data() + n * k * hw + i;
      T* p = P.data().data() + n * k * hw + i;
      T mx = z[0];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, z[c * hw]);
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += std::exp(static_cast<double>(z[c * hw] - mx));
      for (std::size_t c = 0; c < k; ++c) {
        p[c * hw] = static_cast<T>(std::exp(static_cast<double>(z[c * hw] - mx)) / s);
      }
    }
  }
  return P;
}

/// Mean over all N*H*W pixels of -log softmax(logits)[label]. `labels` holds
/// one class index per pixel in [n][h][w] order.
template <std::floating_point T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const std::uint8_t> labels) {
  const auto& Z = logits.value();
  detail::require_rank4(Z.shape(), "softmax_cross_entropy");
  const std::size_t nb = Z.dim(0), k = Z.dim(1), hw = Z.dim(2) * Z.dim(3);
  if (labels.size() != nb * hw) {
    throw InvalidArgument("label count " + std::to_string(labels.size()) + " != " +
                          std::to_string(nb * hw) + " pixels");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= k) {
      throw InvalidArgument("label " + std::to_string(labels[i]) + " at pixel " +
                            std::to_string(i) + " out of range for " + std::to_string(k) +
                            " classes");
    }
  }
  Tensor<T> probs = softmax_channels(Z);
  double total = 0.0;
  for (std::size_t n = 0; n < nb; ++n) {
    for (std::size_t i = 0; i < hw; ++i) {
      const T* z = Z.data().data() + n * k * hw + i;
      T mx = z[0];
      for (std::size_t c = 1; c < k; ++c) mx = std::max(mx, z[c * hw]);
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += std::exp(static_cast<double>(z[c * hw] - mx));
      total += std::log(s) - static_cast<double>(z[labels[n * hw + i] * hw] - mx);
    }
  }
  const double count = static_cast<double>(nb * hw);
  std::vector<std::uint8_t> lab(labels.begin(), labels.end());
  return logits.tape().record(
      Tensor<T>({1}, std::vector<T>{static_cast<T>(total / count)}), {logits},
      [logits, probs = std::move(probs), lab = std::move(lab), nb, k, hw, count](
          Tape<T>& tape, std::span<const T> gy) {
        auto& gz = tape.grad_buffer(logits);
        const T scale = static_cast<T>(static_cast<double>(gy[0]) / count);
        for (std::size_t n = 0; n < nb; ++n) {
          for (std::size_t c = 0; c < k; ++c) {
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t idx = (n * k + c) * hw + i;
              const T onehot = lab[n * hw + i] == c ? T(1) : T(0);
              gz[idx] += scale * (probs[idx] - onehot);
            }
          }
        }
      });
}

}  // namespace nowcast::ad
