#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "tbloc/network.hpp"

namespace tbloc {

struct AdamConfig {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct AdamState {
  std::vector<double> m;
  std::vector<double> v;
  std::size_t step = 0;
};

// One bias-corrected Adam update of `param` in place. Zero-sized state is
// initialised to zeros on first use.
void adam_update(std::span<double> param, std::span<const double> grad, AdamState& state,
                 const AdamConfig& config);

// Adam over the subset of a model's parameters picked by `select`.
class Adam {
 public:
  using Selector = std::function<bool(const std::string&)>;

  Adam(AdamConfig config, Selector select) : config_(config), select_(std::move(select)) {}

  void zero_grad(DetectorModel& model) const;
  // Throws NumericError naming the first parameter with a non-finite gradient;
  // no parameter is modified in that case.
  void step(DetectorModel& model);

  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  Selector select_;
  std::map<std::string, AdamState> state_;
};

}  // namespace tbloc
