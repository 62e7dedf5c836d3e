#pragma once

// Encoder/decoder network built from three block types:
//   basic:      Conv -> BN -> LeakyReLU -> Conv             (+ residual)
//   downsample: BN -> LeakyReLU -> MaxPool -> BN -> LeakyReLU -> Conv
//                                                          (+ avg-pooled residual)
//   upsample:   Upsample -> [concat encoder skip] -> BN -> LeakyReLU -> Conv
//               -> BN -> LeakyReLU -> Conv                  (+ projected residual)
// followed by a 1x1 head producing per-pixel class logits.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "nowcast/checkpoint.hpp"
#include "nowcast/error.hpp"
#include "nowcast/pipeline.hpp"
#include "nowcast/tensor.hpp"
#include "nowcast/text.hpp"

namespace nowcast {

struct UNetConfig {
  std::size_t depth = 7;
  std::size_t base_filters = 32;
  std::vector<std::size_t> schedule;  // empty: base * 2^(level), capped at max_filters
  std::size_t max_filters = 512;
  std::size_t input_channels = kInputChannels;
  std::size_t class_count = 4;
  double leaky_slope = 0.2;
  double bn_momentum = 0.9;
  double bn_eps = 1e-5;
  std::uint64_t init_seed = 0;

  /// Channel count after each downsample level (length = depth).
  std::vector<std::size_t> filters() const {
    if (!schedule.empty()) return schedule;
    std::vector<std::size_t> out;
    std::size_t c = base_filters;
    for (std::size_t i = 0; i < depth; ++i) {
      c = std::min(c * 2, max_filters);
      out.push_back(c);
    }
    return out;
  }

  void validate() const {
    if (depth < 1) throw InvalidArgument("U-Net depth must be >= 1");
    if (base_filters < 1 || input_channels < 1 || class_count < 2) {
      throw InvalidArgument("U-Net needs positive filter/input counts and >= 2 classes");
    }
    if (!schedule.empty() && schedule.size() != depth) {
      throw InvalidArgument("filter schedule length must equal depth");
    }
    for (auto c : filters()) {
      if (c == 0) throw InvalidArgument("filter schedule entries must be > 0");
    }
  }

  /// Canonical key=value text; the hash of this text identifies the architecture.
  std::string canonical_text() const {
    std::ostringstream s;
    const auto f = filters();
    s << "unet.depth=" << depth << '\n'
      << "unet.base_filters=" << base_filters << '\n'
      << "unet.schedule=";
    for (std::size_t i = 0; i < f.size(); ++i) s << (i ? "," : "") << f[i];
    s << '\n'
      << "unet.input_channels=" << input_channels << '\n'
      << "unet.class_count=" << class_count << '\n'
      << "unet.leaky_slope=" << text::format_double(leaky_slope) << '\n'
      << "unet.bn_momentum=" << text::format_double(bn_momentum) << '\n'
      << "unet.bn_eps=" << text::format_double(bn_eps) << '\n'
      << "unet.init=lecun_uniform,bias=0,bn_gamma=1,bn_beta=0\n";
    return s.str();
  }

  std::uint64_t hash() const { return text::fnv1a(canonical_text()); }
};

namespace layers {

template <std::floating_point T>
struct Conv {
  ad::Parameter<T> kernel;
  ad::Parameter<T> bias;

  Conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k,
       std::mt19937_64& rng)
      : kernel(name + ".kernel", ad::Tensor<T>({cout, cin, k, k})),
        bias(name + ".bias", ad::Tensor<T>({cout})) {
    const double bound = std::sqrt(3.0 / static_cast<double>(cin * k * k));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : kernel.value.values()) v = static_cast<T>(dist(rng));
  }

  ad::Var<T> operator()(ad::Var<T> x) {
    auto& tape = x.tape();
    return ad::conv2d(x, tape.param(kernel), tape.param(bias));
  }
};

template <std::floating_point T>
struct BatchNorm {
  ad::Parameter<T> gamma;
  ad::Parameter<T> beta;
  ad::BatchNormState<T> state;

  BatchNorm(const std::string& name, std::size_t channels)
      : gamma(name + ".gamma", ad::Tensor<T>({channels}, T(1))),
        beta(name + ".beta", ad::Tensor<T>({channels})),
        state(name + ".running", channels) {}

  ad::Var<T> operator()(ad::Var<T> x, ad::Mode mode, const UNetConfig& cfg) {
    auto& tape = x.tape();
    return ad::batch_norm(x, tape.param(gamma), tape.param(beta), state, mode, cfg.bn_momentum,
                          cfg.bn_eps);
  }
};

}  // namespace layers

template <std::floating_point T>
struct BasicBlock {
  layers::Conv<T> conv1;
  layers::BatchNorm<T> bn;
  layers::Conv<T> conv2;
  std::optional<layers::Conv<T>> projection;  // 1x1, only when channels change

  BasicBlock(const std::string& name, std::size_t cin, std::size_t cout, std::mt19937_64& rng)
      : conv1(name + ".conv1", cin, cout, 3, rng),
        bn(name + ".bn", cout),
        conv2(name + ".conv2", cout, cout, 3, rng) {
    if (cin != cout) projection.emplace(name + ".proj", cin, cout, 1, rng);
  }

  ad::Var<T> operator()(ad::Var<T> x, ad::Mode mode, const UNetConfig& cfg) {
    auto h = conv1(x);
    h = bn(h, mode, cfg);
    h = ad::leaky_relu(h, static_cast<T>(cfg.leaky_slope));
    h = conv2(h);
    return ad::add(h, projection ? (*projection)(x) : x);
  }
};

template <std::floating_point T>
struct DownsampleBlock {
  layers::BatchNorm<T> bn1;
  layers::BatchNorm<T> bn2;
  layers::Conv<T> conv;
  std::optional<layers::Conv<T>> projection;

  DownsampleBlock(const std::string& name, std::size_t cin, std::size_t cout,
                  std::mt19937_64& rng)
      : bn1(name + ".bn1", cin), bn2(name + ".bn2", cin), conv(name + ".conv", cin, cout, 3, rng) {
    if (cin != cout) projection.emplace(name + ".proj", cin, cout, 1, rng);
  }

  ad::Var<T> operator()(ad::Var<T> x, ad::Mode mode, const UNetConfig& cfg) {
    const auto slope = static_cast<T>(cfg.leaky_slope);
    auto h = bn1(x, mode, cfg);
    h = ad::leaky_relu(h, slope);
    h = ad::max_pool_2x2(h);
    h = bn2(h, mode, cfg);
    h = ad::leaky_relu(h, slope);
    h = conv(h);
    auto skip = ad::avg_pool_2x2(x);
    return ad::add(h, projection ? (*projection)(skip) : skip);
  }
};

template <std::floating_point T>
struct UpsampleBlock {
  layers::BatchNorm<T> bn1;
  layers::Conv<T> conv1;
  layers::BatchNorm<T> bn2;
  layers::Conv<T> conv2;
  layers::Conv<T> projection;

  /// cin: channels of the incoming decoder path, cskip: encoder skip channels.
  UpsampleBlock(const std::string& name, std::size_t cin, std::size_t cskip, std::size_t cout,
                std::mt19937_64& rng)
      : bn1(name + ".bn1", cin + cskip),
        conv1(name + ".conv1", cin + cskip, cout, 3, rng),
        bn2(name + ".bn2", cout),
        conv2(name + ".conv2", cout, cout, 3, rng),
        projection(name + ".proj", cin + cskip, cout, 1, rng) {}

  ad::Var<T> operator()(ad::Var<T> x, ad::Var<T> skip, ad::Mode mode, const UNetConfig& cfg) {
    const auto& xs = x.shape();
    const auto& ss = skip.shape();
    if (ss.size() != 4 || xs.size() != 4 || ss[2] != 2 * xs[2] || ss[3] != 2 * xs[3] ||
        ss[0] != xs[0]) {
      throw InvalidArgument("upsample block skip " + ad::to_string(ss) +
                            " does not mirror input " + ad::to_string(xs));
    }
    const auto slope = static_cast<T>(cfg.leaky_slope);
    auto merged = ad::concat_channels(ad::upsample_nearest_2x(x), skip);
    auto h = bn1(merged, mode, cfg);
    h = ad::leaky_relu(h, slope);
    h = conv1(h);
    h = bn2(h, mode, cfg);
    h = ad::leaky_relu(h, slope);
    h = conv2(h);
    return ad::add(h, projection(merged));
  }
};

template <std::floating_point T>
class UNetModel {
 public:
  explicit UNetModel(UNetConfig config) : config_(std::move(config)) {
    config_.validate();
    std::mt19937_64 rng(config_.init_seed);
    const auto f = config_.filters();
    stem_.emplace_back("stem", config_.input_channels, config_.base_filters, rng);
    std::size_t c = config_.base_filters;
    for (std::size_t i = 0; i < config_.depth; ++i) {
      down_.emplace_back("down" + std::to_string(i + 1), c, f[i], rng);
      c = f[i];
    }
    mid_.emplace_back("mid", c, c, rng);
    // Upsample blocks run from the deepest level back to full resolution.
    for (std::size_t j = config_.depth; j >= 1; --j) {
      const std::size_t cskip = j >= 2 ? f[j - 2] : config_.base_filters;
      up_.emplace_back("up" + std::to_string(j), c, cskip, cskip, rng);
      c = cskip;
    }
    head_.emplace_back("head", c, config_.class_count, 1, rng);
    check_names();
  }

  UNetModel(const UNetModel&) = delete;
  UNetModel& operator=(const UNetModel&) = delete;
  UNetModel(UNetModel&&) = default;
  UNetModel& operator=(UNetModel&&) = default;

  const UNetConfig& config() const noexcept { return config_; }

  /// Logits [N, class_count, H, W].
  ad::Var<T> forward(ad::Var<T> input, ad::Mode mode) {
    const auto& s = input.shape();
    if (s.size() != 4 || s[1] != config_.input_channels) {
      throw InvalidArgument("model expects [N," + std::to_string(config_.input_channels) +
                            ",H,W] input, got " + ad::to_string(s));
    }
    const std::size_t factor = std::size_t{1} << config_.depth;
    if (s[2] % factor || s[3] % factor || s[2] == 0 || s[3] == 0) {
      throw InvalidArgument("input spatial size must be divisible by 2^depth = " +
                            std::to_string(factor));
    }
    std::vector<ad::Var<T>> encoded;
    encoded.push_back(stem_.front()(input, mode, config_));
    for (auto& block : down_) encoded.push_back(block(encoded.back(), mode, config_));
    auto x = mid_.front()(encoded.back(), mode, config_);
    for (std::size_t i = 0; i < up_.size(); ++i) {
      // up_[i] is level depth - i and consumes the encoder output one level above.
      x = up_[i](x, encoded[config_.depth - 1 - i], mode, config_);
    }
    return head_.front()(x);
  }

  /// Convenience inference pass on a plain tensor (infer-mode batch norm).
  ad::Tensor<T> predict_logits(const ad::Tensor<T>& input) {
    ad::Tape<T> tape;
    auto out = forward(tape.constant(input), ad::Mode::infer);
    return out.value();
  }

  std::vector<ad::Parameter<T>*> parameters() {
    std::vector<ad::Parameter<T>*> out;
    auto conv = [&](layers::Conv<T>& c) {
      out.push_back(&c.kernel);
      out.push_back(&c.bias);
    };
    auto bn = [&](layers::BatchNorm<T>& b) {
      out.push_back(&b.gamma);
      out.push_back(&b.beta);
    };
    auto basic = [&](BasicBlock<T>& b) {
      conv(b.conv1);
      bn(b.bn);
      conv(b.conv2);
      if (b.projection) conv(*b.projection);
    };
    basic(stem_.front());
    for (auto& d : down_) {
      bn(d.bn1);
      bn(d.bn2);
      conv(d.conv);
      if (d.projection) conv(*d.projection);
    }
    basic(mid_.front());
    for (auto& u : up_) {
      bn(u.bn1);
      conv(u.conv1);
      bn(u.bn2);
      conv(u.conv2);
      conv(u.projection);
    }
    conv(head_.front());
    return out;
  }

  std::vector<ad::BatchNormState<T>*> buffers() {
    std::vector<ad::BatchNormState<T>*> out;
    out.push_back(&stem_.front().bn.state);
    for (auto& d : down_) {
      out.push_back(&d.bn1.state);
      out.push_back(&d.bn2.state);
    }
    out.push_back(&mid_.front().bn.state);
    for (auto& u : up_) {
      out.push_back(&u.bn1.state);
      out.push_back(&u.bn2.state);
    }
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (auto* p : parameters()) p->zero_grad();
  }

  /// Parameters and running statistics, tagged with the architecture hash.
  Checkpoint to_checkpoint(std::uint64_t step = 0) {
    Checkpoint ck;
    ck.config_hash = config_.hash();
    ck.config_text = config_.canonical_text();
    ck.step = step;
    for (auto* p : parameters()) ck.add(p->name, p->value.shape(), p->value.values());
    for (auto* b : buffers()) {
      ck.add(b->name + ".mean", {b->mean.size()}, b->mean);
      ck.add(b->name + ".var", {b->var.size()}, b->var);
    }
    return ck;
  }

  void load_checkpoint(const Checkpoint& ck) {
    if (ck.config_hash != config_.hash()) {
      throw ConfigMismatch("checkpoint architecture hash " + text::hex64(ck.config_hash) +
                           " != model hash " + text::hex64(config_.hash()));
    }
    for (auto* p : parameters()) ck.restore(p->name, p->value.values());
    for (auto* b : buffers()) {
      ck.restore(b->name + ".mean", b->mean);
      ck.restore(b->name + ".var", b->var);
    }
  }

 private:
  void check_names() {
    std::set<std::string> seen;
    for (auto* p : parameters()) {
      if (!seen.insert(p->name).second) throw Error("duplicate parameter name " + p->name);
    }
  }

  UNetConfig config_;
  // Single-element vectors keep block addresses stable across moves; the
  // tape caches parameter pointers.
  std::vector<BasicBlock<T>> stem_;
  std::vector<DownsampleBlock<T>> down_;
  std::vector<BasicBlock<T>> mid_;
  std::vector<UpsampleBlock<T>> up_;
  std::vector<layers::Conv<T>> head_;
};

/// P(rate >= r_i) for each threshold i as tail sums of class probabilities:
/// [N, K, H, W] probabilities -> [N, K-1, H, W], nested P_0 >= P_1 >= ...
template <std::floating_point T>
ad::Tensor<T> exceedance_from_probs(const ad::Tensor<T>& probs) {
  if (probs.rank() != 4 || probs.dim(1) < 2) {
    throw InvalidArgument("exceedance needs [N,K,H,W] probabilities with K >= 2");
  }
  const std::size_t nb = probs.dim(0), k = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  ad::Tensor<T> out({nb, k - 1, probs.dim(2), probs.dim(3)});
  for (std::size_t n = 0; n < nb; ++n) {
    for (std::size_t i = 0; i < hw; ++i) {
      T tail = 0;
      for (std::size_t c = k - 1; c >= 1; --c) {
        tail += probs[(n * k + c) * hw + i];
        out[(n * (k - 1) + c - 1) * hw + i] = std::min(tail, T(1));
      }
    }
  }
  return out;
}

template <std::floating_point T>
ad::Tensor<T> exceedance_probs(const ad::Tensor<T>& logits, std::size_t class_count = 4) {
  if (logits.rank() != 4 || logits.dim(1) != class_count) {
    throw InvalidArgument("exceedance_probs expects " + std::to_string(class_count) +
                          "-class logits, got " + ad::to_string(logits.shape()));
  }
  return exceedance_from_probs(ad::softmax_channels(logits));
}

/// Stacks examples into an [N, C, S, S] input tensor and flat labels.
template <std::floating_point T>
std::pair<ad::Tensor<T>, std::vector<std::uint8_t>> make_batch(
    const std::vector<const Example*>& examples) {
  if (examples.empty()) throw InvalidArgument("empty batch");
  const auto& first = *examples.front();
  ad::Tensor<T> x({examples.size(), first.channels, first.size, first.size});
  std::vector<std::uint8_t> labels;
  labels.reserve(examples.size() * first.size * first.size);
  std::size_t off = 0;
  for (const auto* ex : examples) {
    if (ex->channels != first.channels || ex->size != first.size) {
      throw InvalidArgument("batch examples differ in layout");
    }
    for (float v : ex->values) x[off++] = static_cast<T>(v);
    labels.insert(labels.end(), ex->label.classes.begin(), ex->label.classes.end());
  }
  return {std::move(x), std::move(labels)};
}

}  // namespace nowcast
