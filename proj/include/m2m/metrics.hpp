#pragma once

#include <cmath>
#include <map>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "m2m/common.hpp"
#include "m2m/pointcloud.hpp"
#include "m2m/transport.hpp"

namespace m2m {

// Bandwidth grid used when reporting MMD as a metric.
inline const std::vector<double>& mmd_gamma_grid() {
    static const std::vector<double> grid = {2.0, 1.0, 0.5, 0.1, 0.01, 0.005};
    return grid;
}

// Energy distance, biased V-statistic (diagonal terms included):
//   2 mean||x - y|| - mean||x - x'|| - mean||y - y'||
inline double energy_distance(const PointCloud& x, const PointCloud& y) {
    if (x.dim() != y.dim()) throw ShapeError("energy_distance: dimension mismatch");
    Mat dxy = cost_matrix(x.points, y.points, 1);
    Mat dxx = cost_matrix(x.points, x.points, 1);
    Mat dyy = cost_matrix(y.points, y.points, 1);
    return 2.0 * dxy.mean() - dxx.mean() - dyy.mean();
}

// MMD with RBF kernel k(x,y) = exp(-||x-y||^2 / (2 gamma^2)); gamma is the
// bandwidth. Biased V-statistic, squared form (no square root).
inline double mmd_rbf(const PointCloud& x, const PointCloud& y, double gamma) {
    if (x.dim() != y.dim()) throw ShapeError("mmd_rbf: dimension mismatch");
    if (gamma <= 0.0) throw ValueError("mmd_rbf: gamma must be > 0");
    const double scale = -1.0 / (2.0 * gamma * gamma);
    auto kmean = [&](const Mat& a, const Mat& b) {
        return (cost_matrix(a, b, 2) * scale).array().exp().mean();
    };
    return kmean(x.points, x.points) + kmean(y.points, y.points) -
           2.0 * kmean(x.points, y.points);
}

inline double mmd_avg(const PointCloud& x, const PointCloud& y) {
    double acc = 0.0;
    for (double g : mmd_gamma_grid()) acc += mmd_rbf(x, y, g);
    return acc / static_cast<double>(mmd_gamma_grid().size());
}

namespace detail {

// Pearson feature-correlation matrix (d x d). Zero-variance features get all
// zero correlations (diagonal included) rather than NaN.
inline Mat feature_correlations(const Mat& pts) {
    const Eigen::Index n = pts.rows(), d = pts.cols();
    Mat centered = pts.rowwise() - pts.colwise().mean();
    Vec sd = (centered.array().square().colwise().sum() / static_cast<double>(n))
                 .sqrt()
                 .matrix()
                 .transpose();
    Mat cov = centered.transpose() * centered / static_cast<double>(n);
    Mat corr(d, d);
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = 0; j < d; ++j) {
            double denom = sd(i) * sd(j);
            corr(i, j) = denom > 0.0 ? cov(i, j) / denom : 0.0;
        }
    return corr;
}

inline Vec strict_upper_triangle(const Mat& m) {
    const Eigen::Index d = m.rows();
    Vec v(d * (d - 1) / 2);
    Eigen::Index k = 0;
    for (Eigen::Index i = 0; i < d; ++i)
        for (Eigen::Index j = i + 1; j < d; ++j) v(k++) = m(i, j);
    return v;
}

}  // namespace detail

// "Correlation of correlations": squared Pearson correlation between the
// strict upper triangles of the two feature-correlation matrices. The exact
// recipe is implementation-defined; see README for the conventions, in
// particular the degenerate d=2 case (single triangle entry), where 1.0 is
// returned iff the entries agree in magnitude.
inline double r_squared(const PointCloud& pred, const PointCloud& target) {
    if (pred.dim() != target.dim()) throw ShapeError("r_squared: dimension mismatch");
    if (pred.dim() < 2) throw ShapeError("r_squared needs d >= 2");
    Vec u = detail::strict_upper_triangle(detail::feature_correlations(pred.points));
    Vec v = detail::strict_upper_triangle(detail::feature_correlations(target.points));
    if (u.size() < 2) return std::abs(std::abs(u(0)) - std::abs(v(0))) < 1e-12 ? 1.0 : 0.0;
    Vec uc = u.array() - u.mean();
    Vec vc = v.array() - v.mean();
    double su = uc.norm(), sv = vc.norm();
    if (su == 0.0 || sv == 0.0) {
        // Constant triangle vector(s): Pearson undefined; agree exactly -> 1.
        return (u - v).lpNorm<Eigen::Infinity>() < 1e-12 ? 1.0 : 0.0;
    }
    double r = uc.dot(vc) / (su * sv);
    return r * r;
}

struct MetricReport {
    double w1 = 0.0;
    double w2 = 0.0;
    double ed = 0.0;
    double mmd_avg = 0.0;
    std::map<double, double> mmd_per_gamma;
    std::optional<double> r2;
};

inline MetricReport metric_report(const PointCloud& pred, const PointCloud& target) {
    if (pred.dim() != target.dim()) throw ShapeError("metric_report: dimension mismatch");
    MetricReport r;
    r.w1 = wasserstein_p(pred, target, 1);
    r.w2 = wasserstein_p(pred, target, 2);
    r.ed = energy_distance(pred, target);
    double acc = 0.0;
    for (double g : mmd_gamma_grid()) {
        double v = mmd_rbf(pred, target, g);
        r.mmd_per_gamma[g] = v;
        acc += v;
    }
    r.mmd_avg = acc / static_cast<double>(mmd_gamma_grid().size());
    if (pred.dim() >= 2) r.r2 = r_squared(pred, target);
    return r;
}

// Gamma keys are printed with their shortest decimal form ("2", "0.005", ...).
inline std::string gamma_key(double g) {
    std::string s = std::to_string(g);
    s.erase(s.find_last_not_of('0') + 1);
    if (!s.empty() && s.back() == '.') s.pop_back();
    return s;
}

inline nlohmann::json to_json(const MetricReport& r) {
    nlohmann::json mmd = nlohmann::json::object();
    for (const auto& [g, v] : r.mmd_per_gamma) mmd[gamma_key(g)] = v;
    nlohmann::json j{{"w1", r.w1},           {"w2", r.w2},   {"ed", r.ed},
                     {"mmd_avg", r.mmd_avg}, {"mmd", mmd}};
    j["r2"] = r.r2 ? nlohmann::json(*r.r2) : nlohmann::json(nullptr);
    return j;
}

inline MetricReport metric_report_from_json(const nlohmann::json& j) {
    MetricReport r;
    r.w1 = j.at("w1").get<double>();
    r.w2 = j.at("w2").get<double>();
    r.ed = j.at("ed").get<double>();
    r.mmd_avg = j.at("mmd_avg").get<double>();
    for (const auto& [k, v] : j.at("mmd").items()) r.mmd_per_gamma[std::stod(k)] = v.get<double>();
    if (!j.at("r2").is_null()) r.r2 = j.at("r2").get<double>();
    return r;
}

}  // namespace m2m
