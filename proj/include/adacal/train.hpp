#pragma once

// MAP fine-tuning of the adapter parameters: plain SGD on mean cross-entropy
// plus an L2 penalty, with periodic checkpoints. The training weight decay is
// a separate knob from the Laplace prior precision; nothing here retrains
// when the posterior is tuned later.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "adacal/data.hpp"
#include "adacal/lora_net.hpp"
#include "adacal/rng.hpp"

namespace adacal {

class BadLabelError : public Error {
  using Error::Error;
};

struct CrossEntropy {
  double loss = 0.0;
  std::vector<double> grad_logits;
};

inline std::vector<double> softmax(std::span<const double> logits) {
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  std::vector<double> p(logits.size());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

// loss = -log softmax(logits)[label]; grad = softmax(logits) - onehot(label)
inline CrossEntropy cross_entropy(std::span<const double> logits, std::size_t label) {
  if (label >= logits.size()) throw BadLabelError("label exceeds n_classes");
  double m = logits[0];
  for (double v : logits) m = std::max(m, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - m);
  CrossEntropy out;
  out.loss = std::log(z) - (logits[label] - m);
  out.grad_logits = softmax(logits);
  out.grad_logits[label] -= 1.0;
  return out;
}

struct TrainConfig {
  double lr = 0.05;
  std::size_t steps = 5000;
  std::size_t batch_size = 4;
  double weight_decay = 0.0;  // lambda_train
  double dropout_rate = 0.1;
  std::size_t checkpoint_every = 1000;
  std::uint64_t seed = 0;
};

struct Checkpoint {
  std::size_t step = 0;
  LoraNetwork net;
};

struct TrainResult {
  std::vector<Checkpoint> checkpoints;  // periodic plus final
  std::vector<double> loss_curve;       // minibatch loss per step
  bool diverged = false;
};

// mean cross-entropy over the whole set plus the L2 term; handy for tests
// and for the Laplace machinery (with weight_decay = 0 it is -loglik / N)
inline double full_batch_loss(const LoraNetwork& net, const Dataset& data,
                              double weight_decay) {
  double total = 0.0;
  for (std::size_t i = 0; i < data.n(); ++i) {
    auto t = forward(net, data.x(i));
    total += cross_entropy(t.logits, data.ys[i]).loss;
  }
  total /= static_cast<double>(data.n());
  if (weight_decay > 0.0) {
    ParamVector p = get_params(net);
    total += 0.5 * weight_decay * dot(p.theta, p.theta);
  }
  return total;
}

// sum over the dataset of log p(y_n | x_n); the Laplace evidence wants the
// un-normalized joint, so this is a sum rather than a mean
inline double log_likelihood(const LoraNetwork& net, const Dataset& data) {
  double total = 0.0;
  for (std::size_t i = 0; i < data.n(); ++i) {
    auto t = forward(net, data.x(i));
    total -= cross_entropy(t.logits, data.ys[i]).loss;
  }
  return total;
}

using StepObserver = std::function<void(std::size_t step, const LoraNetwork&)>;

inline TrainResult map_finetune(const LoraNetwork& initial, const Dataset& data,
                                const TrainConfig& cfg,
                                const StepObserver& observer = nullptr) {
  if (data.n() == 0) throw BadConfigError("map_finetune: empty dataset");
  if (!(cfg.lr > 0)) throw BadConfigError("map_finetune: lr must be positive");
  if (cfg.steps < 1) throw BadConfigError("map_finetune: steps must be >= 1");
  if (data.dim != initial.input_dim() || data.n_classes > initial.n_classes)
    throw DimMismatchError("map_finetune: dataset does not match network");

  LoraNetwork net = initial;
  ParamVector theta = get_params(net);
  Rng batch_rng(cfg.seed);

  TrainResult res;
  res.loss_curve.reserve(cfg.steps);
  LoraNetwork last_good = net;

  const bool use_dropout = cfg.dropout_rate > 0.0;
  std::vector<double> grad(theta.theta.size());

  for (std::size_t step = 1; step <= cfg.steps; ++step) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double batch_loss = 0.0;
    bool finite = true;
    try {
      for (std::size_t b = 0; b < cfg.batch_size; ++b) {
        const std::size_t i = batch_rng.uniform_index(data.n());
        std::optional<DropoutSpec> drop;
        if (use_dropout)
          drop = DropoutSpec{cfg.dropout_rate,
                             Rng::mix(cfg.seed, step * 131 + b)};
        auto trace = forward(net, data.x(i), drop);
        auto ce = cross_entropy(trace.logits, data.ys[i]);
        batch_loss += ce.loss;
        auto bw = backward(net, trace, ce.grad_logits);
        for (std::size_t k = 0; k < grad.size(); ++k)
          grad[k] += bw.grads.theta[k];
      }
    } catch (const NonFiniteError&) {
      finite = false;
    }
    batch_loss /= static_cast<double>(cfg.batch_size);

    if (!finite || !std::isfinite(batch_loss)) {
      res.diverged = true;
      res.checkpoints.push_back({step - 1, last_good});
      return res;
    }
    res.loss_curve.push_back(batch_loss);
    last_good = net;

    const double inv_b = 1.0 / static_cast<double>(cfg.batch_size);
    for (std::size_t k = 0; k < grad.size(); ++k) {
      theta.theta[k] -=
          cfg.lr * (grad[k] * inv_b + cfg.weight_decay * theta.theta[k]);
    }
    set_params(net, theta);

    if (observer) observer(step, net);
    if (cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0)
      res.checkpoints.push_back({step, net});
  }
  if (res.checkpoints.empty() || res.checkpoints.back().step != cfg.steps)
    res.checkpoints.push_back({cfg.steps, net});
  return res;
}

}  // namespace adacal
