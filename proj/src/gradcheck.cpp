#include "ssp/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "ssp/error.hpp"
#include "ssp/rng.hpp"

namespace ssp {

std::string GradCheckReport::table() const {
  std::ostringstream out;
  out << "group,coords,rel_error,analytic_norm,status\n";
  for (const auto& g : groups) {
    out << g.name << ',' << g.coords << ',' << format_double(g.rel_error) << ',' << format_double(g.analytic_norm) << ','
        << (g.rel_error <= tolerance ? "pass" : "FAIL") << '\n';
  }
  return out.str();
}

GradCheckReport gradient_check(const std::vector<TrainItem>& items, const Backbone* backbone,
                               const DetectorModel& model, const LossConfig& cfg, const GradCheckOptions& options) {
  if (!(options.eps > 0.0)) throw Error(ErrorCode::ConfigError, "gradcheck eps must be positive");
  std::vector<const TrainItem*> ptrs;
  for (const auto& it : items) ptrs.push_back(&it);

  DetectorModel work = model;
  ModelGrads grads = ModelGrads::zeros_like(work);
  objective(ptrs, backbone, work, cfg, &grads);

  const bool gen = generator_trainable(work, cfg.mode);
  const bool enc = encoder_trainable(work);
  // encoder probes leave the backbone pass untouched, so cached states serve
  LossConfig cached = cfg;
  cached.mode = TrainMode::encoder_only;
  std::vector<TrainItem> current = items;
  if (gen) {
    for (auto& it : current) it.hidden_pert = backbone->forward_hidden(perturbed_sequence(it, work), work.meta.layer);
  }
  std::vector<const TrainItem*> cached_ptrs;
  for (const auto& it : current) cached_ptrs.push_back(&it);

  Rng rng(derive_seed(options.seed, "gradcheck"));
  GradCheckReport report;
  report.tolerance = options.tolerance;
  auto params = parameter_views(work);
  auto gviews = grads.views();
  for (std::size_t p = 0; p < params.size(); ++p) {
    const bool is_gen = params[p].name.starts_with("generator.");
    if ((is_gen && !gen) || (!is_gen && !enc) || params[p].values.empty()) continue;

    std::vector<std::size_t> coords(params[p].values.size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (is_gen && coords.size() > options.generator_coords) {
      for (std::size_t i = 0; i < options.generator_coords; ++i) {
        std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
      }
      coords.resize(options.generator_coords);
      std::sort(coords.begin(), coords.end());
    }

    double diff2 = 0.0;
    double a2 = 0.0;
    double n2 = 0.0;
    for (const std::size_t c : coords) {
      double& x = params[p].values[c];
      const double x0 = x;
      auto eval = [&](double v) {
        x = v;
        return is_gen ? objective(ptrs, backbone, work, cfg).loss : objective(cached_ptrs, nullptr, work, cached).loss;
      };
      const double fp = eval(x0 + options.eps);
      const double fm = eval(x0 - options.eps);
      x = x0;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw Error(ErrorCode::NonFiniteFunction, "non-finite probe in " + params[p].name);
      }
      const double numeric = (fp - fm) / (2.0 * options.eps);
      const double analytic = gviews[p].values[c];
      diff2 += (analytic - numeric) * (analytic - numeric);
      a2 += analytic * analytic;
      n2 += numeric * numeric;
    }
    GradCheckGroup g;
    g.name = params[p].name;
    g.coords = coords.size();
    const double denom = std::max(std::sqrt(a2), std::sqrt(n2));
    g.rel_error = denom > 0.0 ? std::sqrt(diff2) / denom : 0.0;
    g.analytic_norm = std::sqrt(a2);
    report.groups.push_back(g);
    report.max_rel_error = std::max(report.max_rel_error, g.rel_error);
  }
  report.pass = report.max_rel_error <= options.tolerance;
  return report;
}

}  // namespace ssp
