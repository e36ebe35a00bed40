#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ssp/objective.hpp"

namespace ssp {

struct GradCheckOptions {
  // small enough that probes of first-layer encoder weights rarely cross a
  // ReLU kink given the magnitude of backbone hidden states
  double eps = 1e-5;
  double tolerance = 1e-4;
  /// Coordinates sampled per generator group; encoder groups are checked in
  /// full because their probes reuse cached hidden states.
  std::size_t generator_coords = 12;
  std::uint64_t seed = 0;
};

struct GradCheckGroup {
  std::string name;
  std::size_t coords = 0;
  double rel_error = 0.0;  // |a - n|_2 / max(|a|_2, |n|_2) over the checked coordinates
  double analytic_norm = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool pass = false;

  /// "group,coords,rel_error,analytic_norm,status" rows.
  std::string table() const;
};

/// Compares the analytic gradient of the training objective with central
/// differences for every trainable parameter group.
GradCheckReport gradient_check(const std::vector<TrainItem>& items, const Backbone* backbone,
                               const DetectorModel& model, const LossConfig& cfg, const GradCheckOptions& options);

}  // namespace ssp
