#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "roomroam/model.hpp"
#include "roomroam/random.hpp"

namespace roomroam::testing {

struct GradCheckCoord {
  std::string tensor;
  std::size_t index;
  double analytic;
  double numeric;
  double rel_error;
};

struct GradCheckResult {
  std::vector<GradCheckCoord> coords;
  double max_rel_error = 0.0;
};

// Loss recomputed from forward passes only.
inline double reference_loss(const ModelParams& p, const ModelConfig& cfg, std::span<const BinaryImage> images,
                             std::span<const double> labels) {
  double s = 0.0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const double d = predict_value(p, cfg, images[i]) - labels[i];
    s += d * d;
  }
  return s / static_cast<double>(images.size());
}

// Central differences on `count` coordinates spread round-robin over every tensor. Relative error
// is |a - n| / max(|a|, |n|, floor). The floor sits above finite-difference roundoff (about
// eps * loss / h), which dominates for coordinates whose exact gradient is zero, like key biases.
inline GradCheckResult gradient_check(const ModelConfig& cfg, const ModelParams& params,
                                      std::span<const BinaryImage> images, std::span<const double> labels, int count,
                                      std::uint64_t seed, double h = 1e-4, double floor = 1e-6) {
  const BatchGradient g = backward_serial(params, cfg, images, labels);
  ModelParams probe = params;
  auto probe_named = probe.named();
  const auto grad_named = g.grads.named();
  Rng rng(seed);
  GradCheckResult out;
  for (int k = 0; k < count; ++k) {
    const std::size_t t = static_cast<std::size_t>(k) % probe_named.size();
    Tensor& tensor = *probe_named[t].second;
    const std::size_t idx = rng.below(tensor.size());
    const double saved = tensor.data[idx];
    tensor.data[idx] = saved + h;
    const double up = reference_loss(probe, cfg, images, labels);
    tensor.data[idx] = saved - h;
    const double down = reference_loss(probe, cfg, images, labels);
    tensor.data[idx] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = grad_named[t].second->data[idx];
    const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
    out.coords.push_back({probe_named[t].first, idx, analytic, numeric, rel});
    out.max_rel_error = std::max(out.max_rel_error, rel);
  }
  return out;
}

}  // namespace roomroam::testing
