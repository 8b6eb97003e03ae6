#pragma once

// Synthetic data generation: three interacting-particle SDE systems integrated
// with Euler-Maruyama, plus the diffusion and kernel-interaction corruption
// processes for building paired datasets from arbitrary point clouds.

#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2m/common.hpp"
#include "m2m/pointcloud.hpp"

namespace m2m {

enum class SdeSystem { Kuramoto, FitzHughNagumo, Atlas };

inline std::string to_string(SdeSystem s) {
    switch (s) {
        case SdeSystem::Kuramoto: return "kuramoto";
        case SdeSystem::FitzHughNagumo: return "fitzhugh_nagumo";
        case SdeSystem::Atlas: return "atlas";
    }
    return "?";
}

inline SdeSystem sde_system_from_string(const std::string& s) {
    if (s == "kuramoto") return SdeSystem::Kuramoto;
    if (s == "fitzhugh_nagumo") return SdeSystem::FitzHughNagumo;
    if (s == "atlas") return SdeSystem::Atlas;
    throw ConfigError("data.system: unknown system \"" + s +
                      "\" (expected kuramoto, fitzhugh_nagumo, or atlas)");
}

struct SdeConfig {
    SdeSystem system = SdeSystem::Kuramoto;
    Eigen::Index d = 2;
    Eigen::Index n_particles = 500;
    Eigen::Index n_timepoints = 100;
    double t_end = 0.0;   // <= 0 resolves to the system default
    double sigma = -1.0;  // < 0 resolves to the system default
    uint64_t seed = 0;

    double resolved_t_end() const {
        if (t_end > 0.0) return t_end;
        switch (system) {
            case SdeSystem::Kuramoto: return 5.0;
            case SdeSystem::FitzHughNagumo: return d > 2 ? 10.0 : 4.0;
            case SdeSystem::Atlas: return 2.0;
        }
        return 1.0;
    }
    double resolved_sigma() const {
        if (sigma >= 0.0) return sigma;
        switch (system) {
            case SdeSystem::Kuramoto: return 0.2;
            case SdeSystem::FitzHughNagumo: return 0.1;
            case SdeSystem::Atlas: return 0.5;
        }
        return 0.0;
    }
    void validate() const {
        if (d < 1) throw ConfigError("data.d must be >= 1");
        if (system == SdeSystem::FitzHughNagumo && d < 2)
            throw ConfigError("fitzhugh_nagumo needs d >= 2");
        if (n_particles < 1) throw ConfigError("data.n_particles must be >= 1");
        if (n_timepoints < 2) throw ConfigError("data.n_timepoints must be >= 2");
    }
};

inline nlohmann::json to_json(const SdeConfig& c) {
    return {{"system", to_string(c.system)}, {"d", c.d},
            {"n_particles", c.n_particles},  {"n_timepoints", c.n_timepoints},
            {"t_end", c.resolved_t_end()},   {"sigma", c.resolved_sigma()},
            {"seed", c.seed}};
}

inline SdeConfig sde_config_from_json(const nlohmann::json& j) {
    SdeConfig c;
    if (!j.contains("system")) throw ConfigError("data.system is required");
    c.system = sde_system_from_string(j.at("system").get<std::string>());
    c.d = j.value("d", c.d);
    c.n_particles = j.value("n_particles", c.n_particles);
    c.n_timepoints = j.value("n_timepoints", c.n_timepoints);
    c.t_end = j.value("t_end", c.t_end);
    c.sigma = j.value("sigma", c.sigma);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

struct CorruptionConfig {
    enum class Process { Diffusion, KernelInteraction };
    Process process = Process::KernelInteraction;
    double eta = 0.3;              // repulsion strength
    double sigma = 0.001;          // kernel-process noise scale
    double diffusion_scale = 1.0;  // diffusion-process noise scale
    double h = 0.75;               // kernel bandwidth
    double dt = 0.05;
    int steps = 50;
    uint64_t seed = 0;

    void validate() const {
        if (h <= 0.0 || dt <= 0.0 || steps < 1)
            throw ConfigError("corruption: h, dt must be > 0 and steps >= 1");
        if (sigma < 0.0 || eta < 0.0 || diffusion_scale < 0.0)
            throw ConfigError("corruption: eta, sigma, diffusion_scale must be >= 0");
    }
};

inline CorruptionConfig corruption_config_from_json(const nlohmann::json& j) {
    CorruptionConfig c;
    std::string process = j.value("process", std::string("kernel"));
    if (process == "kernel")
        c.process = CorruptionConfig::Process::KernelInteraction;
    else if (process == "diffusion")
        c.process = CorruptionConfig::Process::Diffusion;
    else
        throw ConfigError("corruption.process must be \"kernel\" or \"diffusion\"");
    c.eta = j.value("eta", c.eta);
    c.sigma = j.value("sigma", c.sigma);
    c.diffusion_scale = j.value("diffusion_scale", c.diffusion_scale);
    c.h = j.value("h", c.h);
    c.dt = j.value("dt", c.dt);
    c.steps = j.value("steps", c.steps);
    c.seed = j.value("seed", c.seed);
    c.validate();
    return c;
}

// Initial conditions: a uniform block and a Gaussian cluster in ratio 333:167,
// scaled to n_particles (Gaussian count rounded, uniform part absorbs the
// remainder). The cluster mean A is drawn independently per coordinate.
inline PointCloud sample_initial(SdeSystem system, Eigen::Index d, Eigen::Index n_particles,
                                 Rng& rng) {
    if (n_particles < 1) throw ValueError("sample_initial: n_particles must be >= 1");
    double uniform_lo, uniform_hi, gauss_sd, a_lo, a_hi;
    switch (system) {
        case SdeSystem::Kuramoto:
            uniform_lo = -1.0; uniform_hi = 1.0; gauss_sd = 0.1; a_lo = -1.0; a_hi = 1.0;
            break;
        case SdeSystem::FitzHughNagumo:
            uniform_lo = -6.0; uniform_hi = 6.0; gauss_sd = 0.1; a_lo = -6.0; a_hi = 6.0;
            break;
        case SdeSystem::Atlas:
            uniform_lo = -2.0; uniform_hi = 2.0; gauss_sd = 0.3; a_lo = -1.0; a_hi = 1.0;
            break;
    }
    const Eigen::Index n_gauss =
        static_cast<Eigen::Index>(std::lround(static_cast<double>(n_particles) * 167.0 / 500.0));
    const Eigen::Index n_unif = n_particles - n_gauss;
    Vec a(d);
    for (Eigen::Index k = 0; k < d; ++k) a(k) = rng.uniform(a_lo, a_hi);
    Mat x(n_particles, d);
    for (Eigen::Index i = 0; i < n_unif; ++i)
        for (Eigen::Index k = 0; k < d; ++k) x(i, k) = rng.uniform(uniform_lo, uniform_hi);
    for (Eigen::Index i = n_unif; i < n_particles; ++i)
        for (Eigen::Index k = 0; k < d; ++k) x(i, k) = a(k) + gauss_sd * rng.normal();
    return PointCloud{std::move(x)};
}

// Drift evaluated on the whole particle state: (state, t) -> per-particle
// drift matrix. x0 is the initial snapshot for systems that couple to it.
using DriftFn = std::function<Mat(const Mat& x, double t)>;

// Generic Euler-Maruyama integrator, exposed so tests can drive it with
// custom drifts (e.g. zero drift for noise-variance checks).
inline Trajectory euler_maruyama(const Mat& x0, const DriftFn& drift, double sigma, double t_end,
                                 Eigen::Index n_timepoints, Rng& rng) {
    if (n_timepoints < 2) throw ValueError("euler_maruyama: need >= 2 timepoints");
    const double dt = t_end / static_cast<double>(n_timepoints - 1);
    const double noise_scale = sigma * std::sqrt(dt);
    Trajectory traj;
    traj.marginals.push_back(PointCloud{x0});
    traj.times.push_back(0.0);
    Mat x = x0;
    for (Eigen::Index step = 1; step < n_timepoints; ++step) {
        const double t_prev = static_cast<double>(step - 1) * dt;
        Mat dx = drift(x, t_prev) * dt;
        if (sigma > 0.0) dx += noise_scale * rng.normal_matrix(x.rows(), x.cols());
        x += dx;
        if (!x.allFinite())
            throw NumericError("euler_maruyama: non-finite state at timestep " +
                               std::to_string(step));
        traj.marginals.push_back(PointCloud{x});
        traj.times.push_back(static_cast<double>(step) * dt);
    }
    return traj;
}

namespace detail {

inline Mat kuramoto_drift(const Mat& x) {
    const Eigen::Index n = x.rows(), d = x.cols();
    Mat drift(n, d);
    for (Eigen::Index k = 0; k < d; ++k)
        for (Eigen::Index i = 0; i < n; ++i) {
            double coupling = 0.0;
            for (Eigen::Index j = 0; j < n; ++j) coupling += std::sin(x(j, k) - x(i, k));
            drift(i, k) = std::sin(x(i, k)) + (2.0 / static_cast<double>(n)) * coupling;
        }
    return drift;
}

// Evenly spaced coefficients over [lo, hi], one per dimension, endpoints
// included.
inline Vec linspace(double lo, double hi, Eigen::Index count) {
    Vec v(count);
    for (Eigen::Index i = 0; i < count; ++i)
        v(i) = count == 1
                   ? lo
                   : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(count - 1);
    return v;
}

// Dimension 0 follows the cubic mean-field equation (its interaction term
// couples to the mean of dimension 1 at time t and to the initial positions
// of dimension 0); all other dimensions follow the relaxation equation with
// per-dimension coefficients.
inline Mat fhn_drift(const Mat& x, double t, const Mat& x_initial) {
    const Eigen::Index n = x.rows(), d = x.cols();
    const Vec b = linspace(0.5, 0.8, d), c = linspace(0.5, 1.0, d), dd = linspace(0.3, 0.7, d),
              tau = linspace(1.0, 10.0, d);
    const double current = 0.1 * std::sin(10.0 * t);
    const double mean_dim1 = x.col(1).mean();
    const double mean_initial_dim0 = x_initial.col(0).mean();
    Mat drift(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double v = x(i, 0);
        drift(i, 0) = 0.2 * v * (v - 0.5) * (1.0 - v) - mean_dim1 + current +
                      (v - mean_initial_dim0);
        for (Eigen::Index k = 1; k < d; ++k)
            drift(i, k) = (-b(k) * x(i, k) + c(k) * x(i, k) + dd(k)) / tau(k);
    }
    return drift;
}

// Rank-based drift: the gamma term takes the empirical CDF value of the
// particle within its own dimension; the sine term couples each dimension to
// the previous one, wrapping cyclically.
inline Mat atlas_drift(const Mat& x) {
    const Eigen::Index n = x.rows(), d = x.cols();
    Mat drift(n, d);
    for (Eigen::Index k = 0; k < d; ++k) {
        const Eigen::Index prev = (k - 1 + d) % d;
        for (Eigen::Index i = 0; i < n; ++i) {
            double rank = 0.0;
            for (Eigen::Index j = 0; j < n; ++j)
                if (x(i, k) - x(j, k) >= 0.0) rank += 1.0;
            rank /= static_cast<double>(n);
            const double v = x(i, k);
            drift(i, k) = 5.0 * (0.5 - rank) + (v - 0.01 * v * v * v) +
                          1.5 * std::sin(x(i, prev));
        }
    }
    return drift;
}

}  // namespace detail

inline Trajectory simulate_mkv(const SdeConfig& cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    PointCloud init = sample_initial(cfg.system, cfg.d, cfg.n_particles, rng);
    DriftFn drift;
    switch (cfg.system) {
        case SdeSystem::Kuramoto:
            drift = [](const Mat& x, double) { return detail::kuramoto_drift(x); };
            break;
        case SdeSystem::FitzHughNagumo:
            drift = [x0 = init.points](const Mat& x, double t) {
                return detail::fhn_drift(x, t, x0);
            };
            break;
        case SdeSystem::Atlas:
            drift = [](const Mat& x, double) { return detail::atlas_drift(x); };
            break;
    }
    return euler_maruyama(init.points, drift, cfg.resolved_sigma(), cfg.resolved_t_end(),
                          cfg.n_timepoints, rng);
}

// Pure Brownian corruption: x += noise_scale * sqrt(dt) * xi per step with
// dt = 1/steps, so the total displacement variance is noise_scale^2.
inline PointCloud corrupt_diffusion(const PointCloud& target, int steps, double noise_scale,
                                    Rng& rng) {
    if (steps < 1) throw ValueError("corrupt_diffusion: steps must be >= 1");
    const double dt = 1.0 / static_cast<double>(steps);
    Mat x = target.points;
    for (int s = 0; s < steps; ++s)
        x += noise_scale * std::sqrt(dt) * rng.normal_matrix(x.rows(), x.cols());
    return PointCloud{std::move(x)};
}

// Kernel-interaction corruption:
//   x <- x + eta (x - A x) dt + sigma sqrt(dt) xi
// with A the row-normalized Gaussian kernel of bandwidth h, recomputed from
// the current positions each step.
inline PointCloud corrupt_kernel(const PointCloud& target, const CorruptionConfig& cfg, Rng& rng) {
    cfg.validate();
    Mat x = target.points;
    const Eigen::Index n = x.rows();
    for (int s = 0; s < cfg.steps; ++s) {
        Mat sq = (x.rowwise().squaredNorm().replicate(1, n) +
                  x.rowwise().squaredNorm().transpose().replicate(n, 1) - 2.0 * x * x.transpose())
                     .cwiseMax(0.0);
        Mat kernel = (-sq / (2.0 * cfg.h * cfg.h)).array().exp();
        Mat weights = kernel.array().colwise() / kernel.rowwise().sum().array();
        Mat drift = cfg.eta * (x - weights * x);
        x += drift * cfg.dt;
        if (cfg.sigma > 0.0)
            x += cfg.sigma * std::sqrt(cfg.dt) * rng.normal_matrix(x.rows(), x.cols());
        if (!x.allFinite())
            throw NumericError("corrupt_kernel: non-finite state at step " + std::to_string(s));
    }
    return PointCloud{std::move(x)};
}

inline PointCloud corrupt(const PointCloud& target, const CorruptionConfig& cfg, Rng& rng) {
    if (cfg.process == CorruptionConfig::Process::Diffusion)
        return corrupt_diffusion(target, cfg.steps, cfg.diffusion_scale, rng);
    return corrupt_kernel(target, cfg, rng);
}

// Simulates every system, writes all marginals as .m2m clouds, and emits a
// dataset.json manifest pairing adjacent timepoints. Each system gets its own
// seed-derived stream, so datasets are reproducible pair by pair.
inline std::filesystem::path emit_mkv_dataset(const std::vector<SdeConfig>& configs,
                                              const std::filesystem::path& out_dir) {
    if (configs.empty()) throw ConfigError("emit_mkv_dataset: need at least one system config");
    const Eigen::Index d = configs.front().d;
    for (const auto& c : configs)
        if (c.d != d) throw ConfigError("emit_mkv_dataset: all systems must share d");
    std::filesystem::create_directories(out_dir);
    nlohmann::json pairs = nlohmann::json::array();
    for (size_t sys = 0; sys < configs.size(); ++sys) {
        Trajectory traj = simulate_mkv(configs[sys]);
        std::vector<std::string> names;
        for (size_t t = 0; t < traj.marginals.size(); ++t) {
            std::string name =
                "sys" + std::to_string(sys) + "_t" + std::to_string(t) + ".m2m";
            save_pointcloud(traj.marginals[t], out_dir / name);
            names.push_back(name);
        }
        for (size_t t = 0; t + 1 < names.size(); ++t)
            pairs.push_back({{"source", names[t]},
                             {"target", names[t + 1]},
                             {"tag", to_string(configs[sys].system) + "-" + std::to_string(sys) +
                                         ":t" + std::to_string(t)}});
    }
    nlohmann::json manifest{{"ambient_dim", d}, {"pairs", pairs}};
    std::filesystem::path manifest_path = out_dir / "dataset.json";
    std::ofstream out(manifest_path);
    if (!out) throw IoError("cannot write manifest: " + manifest_path.string());
    out << manifest.dump(2) << "\n";
    return manifest_path;
}

}  // namespace m2m
