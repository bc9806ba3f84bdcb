#pragma once

// Comparison predictors: temperature scaling, Monte-Carlo dropout, and
// probability-averaging ensembles over checkpoints or independent runs.

#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "adacal/predict.hpp"
#include "adacal/train.hpp"

namespace adacal {

struct Temperature {
  double t = 1.0;
};

using LogitLabel = std::pair<std::vector<double>, std::size_t>;

inline double temperature_nll(std::span<const LogitLabel> val, double t) {
  double total = 0.0;
  std::vector<double> scaled;
  for (const auto& [logits, label] : val) {
    scaled.assign(logits.begin(), logits.end());
    for (auto& v : scaled) v /= t;
    total += cross_entropy(scaled, label).loss;
  }
  return total / static_cast<double>(val.size());
}

// Golden-section over log t in [-4, 4]; derivative-free and bounded. Never
// returns a temperature worse than t = 1 on the given set.
inline Temperature temp_fit(std::span<const LogitLabel> val_logits) {
  if (val_logits.empty()) throw BadConfigError("temp_fit: empty validation logits");
  const double gr = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = -4.0, hi = 4.0;
  auto f = [&](double rho) { return temperature_nll(val_logits, std::exp(rho)); };
  double x1 = hi - gr * (hi - lo);
  double x2 = lo + gr * (hi - lo);
  double f1 = f(x1), f2 = f(x2);
  while (hi - lo > 1e-5) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - gr * (hi - lo);
      f1 = f(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + gr * (hi - lo);
      f2 = f(x2);
    }
  }
  const double rho_star = 0.5 * (lo + hi);
  Temperature out{std::exp(rho_star)};
  if (temperature_nll(val_logits, out.t) > temperature_nll(val_logits, 1.0))
    out.t = 1.0;
  return out;
}

inline PredictiveProbs temp_predict(const Temperature& temp,
                                    std::span<const double> logits) {
  std::vector<double> scaled(logits.begin(), logits.end());
  for (auto& v : scaled) v /= temp.t;
  return {softmax(scaled)};
}

// Mean softmax over n stochastic forward passes; rate 0 reduces to MAP.
inline PredictiveProbs mc_dropout_predict(const LoraNetwork& net,
                                          std::span<const double> x,
                                          double rate = 0.1, std::size_t n = 10,
                                          std::uint64_t seed = 0) {
  std::vector<double> mean(net.n_classes, 0.0);
  for (std::size_t pass = 0; pass < n; ++pass) {
    std::optional<DropoutSpec> drop;
    if (rate > 0.0) drop = DropoutSpec{rate, Rng::mix(seed, pass)};
    auto p = softmax(forward(net, x, drop).logits);
    for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += p[i];
  }
  for (auto& v : mean) v /= static_cast<double>(n);
  return {std::move(mean)};
}

// Mean softmax across the most recent (up to three) checkpoints.
inline PredictiveProbs checkpoint_ensemble_predict(
    const std::vector<Checkpoint>& checkpoints, std::span<const double> x,
    std::size_t max_members = 3) {
  if (checkpoints.empty())
    throw BadConfigError("checkpoint ensemble: need at least one checkpoint");
  const std::size_t members = std::min(max_members, checkpoints.size());
  std::vector<double> mean;
  for (std::size_t k = 0; k < members; ++k) {
    const auto& net = checkpoints[checkpoints.size() - 1 - k].net;
    auto p = softmax(forward(net, x).logits);
    if (mean.empty()) mean.assign(p.size(), 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) mean[i] += p[i];
  }
  for (auto& v : mean) v /= static_cast<double>(members);
  return {std::move(mean)};
}

// Mean softmax across independently trained networks.
inline PredictiveProbs deep_ensemble_predict(std::span<const LoraNetwork> nets,
                                             std::span<const double> x) {
  if (nets.empty()) throw BadConfigError("deep ensemble: need at least one net");
  std::vector<double> mean;
  for (const auto& net : nets) {
    auto p = softmax(forward(net, x).logits);
    if (mean.empty()) mean.assign(p.size(), 0.0);
    for (std::size_t i = 0; i < p.size(); ++i) mean[i] += p[i];
  }
  for (auto& v : mean) v /= static_cast<double>(nets.size());
  return {std::move(mean)};
}

}  // namespace adacal
