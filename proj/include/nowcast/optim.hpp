#pragma once

// ADADELTA and the training loop.

#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nowcast/checkpoint.hpp"
#include "nowcast/error.hpp"
#include "nowcast/pipeline.hpp"
#include "nowcast/tensor.hpp"
#include "nowcast/text.hpp"
#include "nowcast/unet.hpp"

namespace nowcast {

/// Raised when a gradient holds NaN/Inf; parameters are left untouched.
class NonFiniteGradient : public Error {
 public:
  using Error::Error;
};

template <std::floating_point T>
struct AdadeltaState {
  double rho = 0.95;
  double epsilon = 1e-6;
  std::vector<std::vector<T>> sq_grad;    // E[g^2]
  std::vector<std::vector<T>> sq_update;  // E[dx^2]

  AdadeltaState() = default;
  AdadeltaState(const std::vector<ad::Parameter<T>*>& params, double rho_ = 0.95,
                double epsilon_ = 1e-6)
      : rho(rho_), epsilon(epsilon_) {
    for (const auto* p : params) {
      sq_grad.emplace_back(p->value.size(), T(0));
      sq_update.emplace_back(p->value.size(), T(0));
    }
  }
};

/// One ADADELTA update over every parameter:
///   E[g^2]  <- rho E[g^2] + (1 - rho) g^2
///   dx      <- -sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps) * g
///   E[dx^2] <- rho E[dx^2] + (1 - rho) dx^2
///   x       <- x + dx
template <std::floating_point T>
void adadelta_step(const std::vector<ad::Parameter<T>*>& params, AdadeltaState<T>& state) {
  if (state.sq_grad.size() != params.size() || state.sq_update.size() != params.size()) {
    throw InvalidArgument("optimizer state does not match parameter list");
  }
  for (std::size_t p = 0; p < params.size(); ++p) {
    const auto& g = params[p]->grad;
    if (g.size() != params[p]->value.size() || state.sq_grad[p].size() != g.size()) {
      throw InvalidArgument("gradient shape mismatch for " + params[p]->name);
    }
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw NonFiniteGradient("non-finite gradient " + std::to_string(g[i]) + " in " +
                                params[p]->name + "[" + std::to_string(i) + "]; step rejected");
      }
    }
  }
  const double rho = state.rho;
  const double eps = state.epsilon;
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& x = params[p]->value.values();
    const auto& g = params[p]->grad;
    auto& eg = state.sq_grad[p];
    auto& ed = state.sq_update[p];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = g[i];
      const double eg2 = rho * eg[i] + (1.0 - rho) * gi * gi;
      const double dx = -std::sqrt(ed[i] + eps) / std::sqrt(eg2 + eps) * gi;
      eg[i] = static_cast<T>(eg2);
      ed[i] = static_cast<T>(rho * ed[i] + (1.0 - rho) * dx * dx);
      x[i] = static_cast<T>(x[i] + dx);
    }
  }
}

struct TrainConfig {
  std::size_t batch_size = 4;
  std::uint64_t steps = 1000;
  std::uint64_t seed = 0;
  std::uint64_t checkpoint_every = 0;  // 0: only the final checkpoint
  double rho = 0.95;
  double epsilon = 1e-6;
  std::string precision = "f32";  // f32 | f64

  void validate() const {
    if (batch_size < 1) throw InvalidArgument("batch size must be >= 1");
    if (!(rho > 0.0 && rho < 1.0) || !(epsilon > 0.0)) {
      throw InvalidArgument("ADADELTA needs 0 < rho < 1 and epsilon > 0");
    }
    if (precision != "f32" && precision != "f64") {
      throw InvalidArgument("precision must be f32 or f64");
    }
  }

  std::string canonical_text() const {
    std::ostringstream s;
    s << "train.batch_size=" << batch_size << '\n'
      << "train.seed=" << seed << '\n'
      << "train.rho=" << text::format_double(rho) << '\n'
      << "train.epsilon=" << text::format_double(epsilon) << '\n'
      << "train.precision=" << precision << '\n';
    return s.str();
  }
};

/// Produces the example for a global draw index; must be deterministic in
/// the index so that training can resume mid-stream.
using ExampleSource = std::function<Example(std::uint64_t draw_index)>;

struct LossRecord {
  std::uint64_t step;
  double loss;
  bool operator==(const LossRecord&) const = default;
};

inline void write_loss_log(const std::vector<LossRecord>& log, std::ostream& out) {
  out << "step,loss\n";
  for (const auto& r : log) out << r.step << ',' << text::format_double(r.loss) << '\n';
}

template <std::floating_point T>
class Trainer {
 public:
  Trainer(UNetModel<T>& model, TrainConfig config)
      : model_(model),
        config_(std::move(config)),
        params_(model.parameters()),
        state_(params_, config_.rho, config_.epsilon) {
    config_.validate();
  }

  std::uint64_t step() const noexcept { return step_; }
  const std::vector<LossRecord>& loss_log() const noexcept { return log_; }
  AdadeltaState<T>& optimizer_state() noexcept { return state_; }

  /// forward (train-mode BN) -> per-pixel cross-entropy -> backward -> ADADELTA.
  /// Returns the loss before the update.
  double train_step(const std::vector<const Example*>& batch) {
    auto [x, labels] = make_batch<T>(batch);
    model_.zero_grad();
    ad::Tape<T> tape;
    auto logits = model_.forward(tape.constant(std::move(x)), ad::Mode::train);
    auto loss = ad::softmax_cross_entropy(logits, labels);
    const double value = static_cast<double>(loss.value()[0]);
    tape.backward(loss);
    adadelta_step(params_, state_);
    ++step_;
    log_.push_back({step_, value});
    return value;
  }

  /// Runs until `config.steps`; step k consumes draws [(k-1)B, kB).
  void run(const ExampleSource& source,
           const std::function<void(Trainer&)>& on_checkpoint = nullptr) {
    const std::size_t b = config_.batch_size;
    while (step_ < config_.steps) {
      std::vector<Example> examples;
      examples.reserve(b);
      for (std::size_t j = 0; j < b; ++j) examples.push_back(source(step_ * b + j));
      std::vector<const Example*> batch;
      for (const auto& e : examples) batch.push_back(&e);
      train_step(batch);
      if (on_checkpoint && config_.checkpoint_every && step_ % config_.checkpoint_every == 0) {
        on_checkpoint(*this);
      }
    }
  }

  /// Model weights, running statistics, optimizer accumulators and the step.
  Checkpoint checkpoint() {
    Checkpoint ck = model_.to_checkpoint(step_);
    ck.config_text += config_.canonical_text();
    for (std::size_t p = 0; p < params_.size(); ++p) {
      ck.add("adadelta.sq_grad." + params_[p]->name, params_[p]->value.shape(), state_.sq_grad[p]);
      ck.add("adadelta.sq_update." + params_[p]->name, params_[p]->value.shape(),
             state_.sq_update[p]);
    }
    return ck;
  }

  /// Restores everything checkpoint() saved. The loss log restarts empty.
  void resume(const Checkpoint& ck) {
    model_.load_checkpoint(ck);
    for (std::size_t p = 0; p < params_.size(); ++p) {
      ck.restore("adadelta.sq_grad." + params_[p]->name, state_.sq_grad[p]);
      ck.restore("adadelta.sq_update." + params_[p]->name, state_.sq_update[p]);
    }
    step_ = ck.step;
    log_.clear();
  }

 private:
  UNetModel<T>& model_;
  TrainConfig config_;
  std::vector<ad::Parameter<T>*> params_;
  AdadeltaState<T> state_;
  std::uint64_t step_ = 0;
  std::vector<LossRecord> log_;
};

}  // namespace nowcast
