#pragma once

// Sampling from trained models: one-step static maps, Euler-integrated
// dynamic flows, and autoregressive multi-marginal rollouts.

#include <optional>
#include <string>
#include <vector>

#include "m2m/metrics.hpp"
#include "m2m/nn.hpp"

namespace m2m {

constexpr int kDefaultInferenceSteps = 100;

// Euler integration of the learned velocity field. The time variable is
// incremented before each field evaluation, so the field is queried at
// t_start + dt, ..., t_end and never at t_start.
inline PointCloud integrate_flow(ModelParams& params, const PointCloud& source, int num_steps,
                                 double t_start = 0.0, double t_end = 1.0) {
    if (num_steps < 1) throw ValueError("integrate_flow: num_steps must be >= 1");
    if (!params.config.time_conditioned)
        throw ConfigError("integrate_flow needs a time-conditioned model");
    const double dt = (t_end - t_start) / static_cast<double>(num_steps);
    Mat z = source.points;
    double t = t_start;
    for (int s = 0; s < num_steps; ++s) {
        t += dt;
        z += model_forward(params, z, t) * dt;
        if (!z.allFinite())
            throw NumericError("integrate_flow: non-finite state at step " + std::to_string(s));
    }
    return PointCloud{std::move(z)};
}

// One-step static prediction. The output is the model's value directly, not a
// residual update: the static objective regresses F(x) onto y itself.
inline PointCloud static_map(ModelParams& params, const PointCloud& source) {
    if (params.config.time_conditioned)
        throw ConfigError("static_map needs a model without time conditioning");
    return PointCloud{model_forward(params, source.points, std::nullopt)};
}

// Predicts the next marginal from any model: dynamic models integrate the
// flow over [0, 1], static models apply the one-step map.
inline PointCloud predict_next(ModelParams& params, const PointCloud& source, int num_steps) {
    if (params.config.time_conditioned) return integrate_flow(params, source, num_steps);
    return static_map(params, source);
}

struct RolloutResult {
    Trajectory predicted;                    // marginal 0 is the given start
    std::vector<MetricReport> per_marginal;  // vs truth marginals 1..n-1
    std::optional<MetricReport> averages;    // field-wise means over the above
};

namespace detail {

inline MetricReport average_reports(const std::vector<MetricReport>& reports) {
    MetricReport avg;
    double r2_acc = 0.0;
    size_t r2_count = 0;
    for (const auto& r : reports) {
        avg.w1 += r.w1;
        avg.w2 += r.w2;
        avg.ed += r.ed;
        avg.mmd_avg += r.mmd_avg;
        for (const auto& [g, v] : r.mmd_per_gamma) avg.mmd_per_gamma[g] += v;
        if (r.r2) {
            r2_acc += *r.r2;
            r2_count++;
        }
    }
    const double n = static_cast<double>(reports.size());
    avg.w1 /= n;
    avg.w2 /= n;
    avg.ed /= n;
    avg.mmd_avg /= n;
    for (auto& [g, v] : avg.mmd_per_gamma) v /= n;
    if (r2_count > 0) avg.r2 = r2_acc / static_cast<double>(r2_count);
    return avg;
}

}  // namespace detail

// Autoregressive multi-marginal prediction: each predicted measure feeds back
// as the next starting point, with time renormalized to [0, 1] per hop.
inline RolloutResult rollout(ModelParams& params, const PointCloud& mu0, Eigen::Index n_marginals,
                             int steps_per_marginal, const Trajectory* truth = nullptr) {
    if (n_marginals < 2) throw ValueError("rollout: need at least 2 marginals");
    if (truth && static_cast<Eigen::Index>(truth->marginals.size()) < n_marginals)
        throw ShapeError("rollout: truth trajectory shorter than requested marginals");
    RolloutResult result;
    result.predicted.marginals.push_back(mu0);
    result.predicted.times.push_back(0.0);
    PointCloud current = mu0;
    for (Eigen::Index k = 1; k < n_marginals; ++k) {
        current = predict_next(params, current, steps_per_marginal);
        result.predicted.marginals.push_back(current);
        result.predicted.times.push_back(static_cast<double>(k));
        if (truth)
            result.per_marginal.push_back(
                metric_report(current, truth->marginals[static_cast<size_t>(k)]));
    }
    if (truth) result.averages = detail::average_reports(result.per_marginal);
    return result;
}

inline nlohmann::json to_json(const RolloutResult& r) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& m : r.per_marginal) per.push_back(to_json(m));
    nlohmann::json j{{"n_marginals", r.predicted.marginals.size()}, {"per_marginal", per}};
    j["averages"] = r.averages ? to_json(*r.averages) : nlohmann::json(nullptr);
    return j;
}

}  // namespace m2m
