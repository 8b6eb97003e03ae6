#pragma once

// Training: the static distributional objective, the transformer-flow-matching
// objective, measure/particle batching, LR scheduling, and the full loop.

#include <algorithm>
#include <chrono>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "m2m/infer.hpp"
#include "m2m/metrics.hpp"
#include "m2m/nn.hpp"
#include "m2m/optim.hpp"
#include "m2m/transport.hpp"

namespace m2m {

enum class LossKind { MMD, ED, W1, W2, OTMSE, TFM };

inline std::string to_string(LossKind k) {
    switch (k) {
        case LossKind::MMD: return "mmd";
        case LossKind::ED: return "ed";
        case LossKind::W1: return "w1";
        case LossKind::W2: return "w2";
        case LossKind::OTMSE: return "otmse";
        case LossKind::TFM: return "tfm";
    }
    return "?";
}

inline LossKind loss_kind_from_string(const std::string& s) {
    if (s == "mmd") return LossKind::MMD;
    if (s == "ed") return LossKind::ED;
    if (s == "w1") return LossKind::W1;
    if (s == "w2") return LossKind::W2;
    if (s == "otmse") return LossKind::OTMSE;
    if (s == "tfm") return LossKind::TFM;
    throw ConfigError("train.loss: unknown loss kind \"" + s + "\"");
}

struct Schedule {
    enum class Type { Constant, Linear };
    Type type = Type::Linear;
    double start_factor = 1.0;
    double end_factor = 0.01;
};

// Linear interpolation of the LR factor over the run.
inline double lr_factor(long step, long total, double start, double end) {
    if (total == 0) return start;
    return start + (end - start) * static_cast<double>(step) / static_cast<double>(total);
}

inline double schedule_factor(const Schedule& s, long step, long total) {
    if (s.type == Schedule::Type::Constant) return 1.0;
    return lr_factor(std::clamp(step, 0L, total), total, s.start_factor, s.end_factor);
}

struct TrainConfig {
    LossKind loss_kind = LossKind::TFM;
    double lr = 1e-4;
    Schedule schedule;
    Eigen::Index measure_batch = 16;    // b
    Eigen::Index particle_batch = 128;  // m
    bool use_ot_coupling = true;
    long iterations = 1000;
    long epochs = 0;  // when > 0, resolves to epochs * ceil(n_pairs / b)
    uint64_t seed = 0;
    double sinkhorn_epsilon = 0.05;  // relative to the mean entry of the cost matrix
    int sinkhorn_iters = 200;
    long eval_every = 0;  // 0 disables held-out evaluation

    // Configs may speak in epochs (passes over the dataset); the loop runs on
    // iterations, so convert once the dataset size is known.
    void resolve_epochs(size_t n_pairs) {
        if (epochs <= 0) return;
        long steps_per_epoch =
            static_cast<long>((n_pairs + static_cast<size_t>(measure_batch) - 1) /
                              static_cast<size_t>(measure_batch));
        iterations = epochs * std::max(1L, steps_per_epoch);
        epochs = 0;
    }

    void validate() const {
        if (measure_batch < 1) throw ConfigError("train.measure_batch must be >= 1");
        if (particle_batch < 2)
            throw ConfigError("train.particle_batch must be >= 2 (distributional losses)");
        if (iterations < 1) throw ConfigError("train.iterations must be >= 1");
        if (lr <= 0.0) throw ConfigError("train.lr must be > 0");
        if (sinkhorn_epsilon <= 0.0) throw ConfigError("train.sinkhorn_epsilon must be > 0");
        if (sinkhorn_iters < 1) throw ConfigError("train.sinkhorn_iters must be >= 1");
        if (loss_kind == LossKind::OTMSE && !use_ot_coupling)
            throw ConfigError("train.loss otmse requires train.use_ot_coupling = true");
    }
};

inline nlohmann::json to_json(const TrainConfig& c) {
    nlohmann::json sched{{"type", c.schedule.type == Schedule::Type::Linear ? "linear" : "constant"},
                         {"start_factor", c.schedule.start_factor},
                         {"end_factor", c.schedule.end_factor}};
    if (c.epochs > 0)
        return {{"loss", to_string(c.loss_kind)}, {"lr", c.lr},
                {"schedule", sched},             {"measure_batch", c.measure_batch},
                {"particle_batch", c.particle_batch}, {"use_ot_coupling", c.use_ot_coupling},
                {"epochs", c.epochs},            {"seed", c.seed},
                {"sinkhorn_epsilon", c.sinkhorn_epsilon}, {"sinkhorn_iters", c.sinkhorn_iters},
                {"eval_every", c.eval_every}};
    return {{"loss", to_string(c.loss_kind)},
            {"lr", c.lr},
            {"schedule", sched},
            {"measure_batch", c.measure_batch},
            {"particle_batch", c.particle_batch},
            {"use_ot_coupling", c.use_ot_coupling},
            {"iterations", c.iterations},
            {"seed", c.seed},
            {"sinkhorn_epsilon", c.sinkhorn_epsilon},
            {"sinkhorn_iters", c.sinkhorn_iters},
            {"eval_every", c.eval_every}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (!j.contains("loss")) throw ConfigError("train.loss is required");
    if (!j.contains("lr")) throw ConfigError("train.lr is required");
    if (j.contains("epochs") && j.contains("iterations"))
        throw ConfigError("train: give either epochs or iterations, not both");
    c.epochs = j.value("epochs", c.epochs);
    c.loss_kind = loss_kind_from_string(j.at("loss").get<std::string>());
    c.lr = j.at("lr").get<double>();
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        std::string type = s.value("type", std::string("linear"));
        if (type == "linear")
            c.schedule.type = Schedule::Type::Linear;
        else if (type == "constant")
            c.schedule.type = Schedule::Type::Constant;
        else
            throw ConfigError("train.schedule.type must be \"linear\" or \"constant\"");
        c.schedule.start_factor = s.value("start_factor", 1.0);
        c.schedule.end_factor = s.value("end_factor", 0.01);
    }
    c.measure_batch = j.value("measure_batch", c.measure_batch);
    c.particle_batch = j.value("particle_batch", c.particle_batch);
    c.use_ot_coupling = j.value("use_ot_coupling", c.use_ot_coupling);
    c.iterations = j.value("iterations", c.iterations);
    c.seed = j.value("seed", c.seed);
    c.sinkhorn_epsilon = j.value("sinkhorn_epsilon", c.sinkhorn_epsilon);
    c.sinkhorn_iters = j.value("sinkhorn_iters", c.sinkhorn_iters);
    c.eval_every = j.value("eval_every", c.eval_every);
    c.validate();
    return c;
}

struct TrainHistory {
    std::vector<double> losses;   // one per step
    std::vector<double> step_ms;  // wall clock per step
    struct Eval {
        long step = 0;
        std::vector<MetricReport> reports;  // one per held-out pair
        double mean_w1 = 0.0;
    };
    std::vector<Eval> evals;
};

namespace detail {

// b measure indices: without replacement when the dataset is large enough.
inline std::vector<size_t> sample_pair_indices(size_t n, Eigen::Index b, Rng& rng) {
    std::vector<size_t> idx;
    idx.reserve(static_cast<size_t>(b));
    if (static_cast<size_t>(b) <= n) {
        std::vector<size_t> all(n);
        std::iota(all.begin(), all.end(), size_t{0});
        for (Eigen::Index k = 0; k < b; ++k) {
            size_t j = static_cast<size_t>(k) + rng.below(n - static_cast<size_t>(k));
            std::swap(all[static_cast<size_t>(k)], all[j]);
            idx.push_back(all[static_cast<size_t>(k)]);
        }
    } else {
        for (Eigen::Index k = 0; k < b; ++k) idx.push_back(rng.below(n));
    }
    return idx;
}

struct SampledBatch {
    std::vector<Mat> x;  // b matrices of shape m x d
    std::vector<Mat> y;  // row-aligned with x when OT coupling is on
};

inline SampledBatch sample_batch(const Dataset& ds, const TrainConfig& cfg, Rng& rng) {
    SampledBatch batch;
    auto indices = sample_pair_indices(ds.pairs.size(), cfg.measure_batch, rng);
    for (size_t idx : indices) {
        const MeasurePair& pair = ds.pairs[idx];
        Mat xs = subsample(pair.source, cfg.particle_batch, rng).points;
        Mat ys = subsample(pair.target, cfg.particle_batch, rng).points;
        if (cfg.use_ot_coupling) {
            auto [xa, ya] = minibatch_ot_pairs(xs, ys, 2);
            batch.x.push_back(std::move(xa));
            batch.y.push_back(std::move(ya));
        } else {
            batch.x.push_back(std::move(xs));
            batch.y.push_back(std::move(ys));
        }
    }
    return batch;
}

// Distributional loss between the pushed batch (graph node) and the target
// particles, per measure.
inline ad::Var static_loss_node(LossKind kind, const ad::Var& pushed, const Mat& target,
                                const TrainConfig& cfg) {
    ad::Var y = ad::constant(target);
    const double m = static_cast<double>(target.rows());
    switch (kind) {
        case LossKind::ED: {
            ad::Var cross = ad::mean(ad::pairwise_dist(pushed, y));
            ad::Var self_p = ad::mean(ad::pairwise_dist(pushed, pushed));
            double self_y = cost_matrix(target, target, 1).mean();
            return ad::scalar_add(ad::sub(ad::scalar_mul(cross, 2.0), self_p), -self_y);
        }
        case LossKind::MMD: {
            const double gamma = 0.05;  // loss bandwidth
            const double s = -1.0 / (2.0 * gamma * gamma);
            auto kmean = [&](const ad::Var& a, const ad::Var& b) {
                return ad::mean(ad::exp(ad::scalar_mul(ad::pairwise_sqdist(a, b), s)));
            };
            double self_y = (cost_matrix(target, target, 2) * s).array().exp().mean();
            return ad::scalar_add(
                ad::sub(kmean(pushed, pushed), ad::scalar_mul(kmean(pushed, y), 2.0)), self_y);
        }
        case LossKind::W1:
        case LossKind::W2: {
            const int p = kind == LossKind::W1 ? 1 : 2;
            Mat c = cost_matrix(pushed->value, target, p);
            SinkhornOptions opt;
            opt.epsilon = cfg.sinkhorn_epsilon * std::max(c.mean(), 1e-12);
            opt.max_iters = cfg.sinkhorn_iters;
            // Tight marginal tolerance keeps the loss continuous in the
            // inputs at finite-difference scales.
            opt.tol = 1e-9;
            CouplingPlan plan = sinkhorn_plan(PointCloud{pushed->value}, PointCloud{target}, p, opt);
            // The loss value is the full entropic objective <plan, C> + eps
            // KL(plan | a x b). Holding the converged plan constant then gives
            // the exact gradient of that objective (Danskin), so only the
            // cost entries need to be differentiable. Since eps is pegged to
            // the mean cost entry, its variation enters through a mean(C)
            // node as well.
            double kl = 0.0;
            const double nm = static_cast<double>(plan.plan.rows() * plan.plan.cols());
            for (Eigen::Index j = 0; j < plan.plan.rows(); ++j)
                for (Eigen::Index k = 0; k < plan.plan.cols(); ++k) {
                    double v = plan.plan(j, k);
                    if (v > 0.0) kl += v * std::log(v * nm);
                }
            ad::Var costs = p == 1 ? ad::pairwise_dist(pushed, y) : ad::pairwise_sqdist(pushed, y);
            ad::Var transport = ad::sum(ad::mul(costs, ad::constant(plan.plan)));
            return ad::add(transport,
                           ad::scalar_mul(ad::mean(costs), cfg.sinkhorn_epsilon * kl));
        }
        case LossKind::OTMSE: {
            ad::Var diff = ad::sub(pushed, y);
            return ad::scalar_mul(ad::sum(ad::mul(diff, diff)), 1.0 / m);
        }
        case LossKind::TFM:
            throw ConfigError("tfm loss is handled by tfm_training_step");
    }
    throw ConfigError("unhandled loss kind");
}

}  // namespace detail

// One optimization step of the flow-matching objective: per measure, draw a
// shared t, interpolate z = t y + (1-t) x along the coupled batch, and regress
// the velocity field at (z, t) onto y - x.
inline double tfm_training_step(const Dataset& ds, ModelParams& params, AdamState& adam,
                                const TrainConfig& cfg, Rng& rng) {
    if (cfg.loss_kind != LossKind::TFM) throw ConfigError("tfm_training_step needs loss tfm");
    if (!params.config.time_conditioned)
        throw ConfigError("tfm training needs a time-conditioned model");
    cfg.validate();
    detail::SampledBatch batch = detail::sample_batch(ds, cfg, rng);
    std::vector<double> ts;
    ts.reserve(batch.x.size());
    for (size_t i = 0; i < batch.x.size(); ++i) ts.push_back(rng.uniform01());

    ad::Var total;
    for (size_t i = 0; i < batch.x.size(); ++i) {
        const double t = ts[i];
        Mat z = t * batch.y[i] + (1.0 - t) * batch.x[i];
        Mat v_target = batch.y[i] - batch.x[i];
        ad::Var pred = model_forward_graph(params, z, t, true, &rng);
        ad::Var diff = ad::sub(pred, ad::constant(v_target));
        ad::Var sq = ad::sum(ad::mul(diff, diff));
        total = total ? ad::add(total, sq) : sq;
    }
    const double scale =
        1.0 / static_cast<double>(cfg.measure_batch * cfg.particle_batch);
    ad::Var loss = ad::scalar_mul(total, scale);
    const double value = loss->value(0, 0);
    if (!std::isfinite(value))
        throw NumericError("tfm loss is not finite at adam step " + std::to_string(adam.step));
    params.zero_grads();
    ad::backward(loss);
    adam_step(params, adam, cfg.lr * schedule_factor(cfg.schedule, adam.step, cfg.iterations));
    return value;
}

// One optimization step of the static pushforward objective with the chosen
// distributional loss.
inline double static_training_step(const Dataset& ds, ModelParams& params, AdamState& adam,
                                   const TrainConfig& cfg, Rng& rng) {
    if (cfg.loss_kind == LossKind::TFM)
        throw ConfigError("static_training_step cannot train the tfm loss");
    if (params.config.time_conditioned)
        throw ConfigError("static training needs a model without time conditioning");
    cfg.validate();
    detail::SampledBatch batch = detail::sample_batch(ds, cfg, rng);

    ad::Var total;
    for (size_t i = 0; i < batch.x.size(); ++i) {
        ad::Var pushed = model_forward_graph(params, batch.x[i], std::nullopt, true, &rng);
        ad::Var part = detail::static_loss_node(cfg.loss_kind, pushed, batch.y[i], cfg);
        total = total ? ad::add(total, part) : part;
    }
    ad::Var loss = ad::scalar_mul(total, 1.0 / static_cast<double>(cfg.measure_batch));
    const double value = loss->value(0, 0);
    if (!std::isfinite(value))
        throw NumericError(to_string(cfg.loss_kind) + " loss is not finite at adam step " +
                           std::to_string(adam.step));
    params.zero_grads();
    ad::backward(loss);
    adam_step(params, adam, cfg.lr * schedule_factor(cfg.schedule, adam.step, cfg.iterations));
    return value;
}

namespace detail {

inline TrainHistory::Eval evaluate_holdout(ModelParams& params,
                                           const std::vector<const MeasurePair*>& holdout,
                                           long step) {
    TrainHistory::Eval ev;
    ev.step = step;
    for (const MeasurePair* pair : holdout) {
        PointCloud pred = predict_next(params, pair->source, kDefaultInferenceSteps);
        ev.reports.push_back(metric_report(pred, pair->target));
        ev.mean_w1 += ev.reports.back().w1;
    }
    if (!ev.reports.empty()) ev.mean_w1 /= static_cast<double>(ev.reports.size());
    return ev;
}

}  // namespace detail

// Full training loop. Deterministic given (configs, seed): the parameter init
// and every step draw from seed-derived streams. When eval_every > 0 the last
// 10% of pairs (at least one) are held out and evaluated with the inference
// path every eval_every steps and at the end.
inline std::pair<ModelParams, TrainHistory> train(const Dataset& ds, const ModelConfig& mcfg,
                                                  const TrainConfig& config,
                                                  std::optional<ModelParams> resume_params = {},
                                                  long resume_step = 0) {
    mcfg.validate();
    if (ds.pairs.empty()) throw ConfigError("train: dataset is empty");
    TrainConfig tcfg = config;
    tcfg.resolve_epochs(ds.pairs.size());
    tcfg.validate();
    if (tcfg.loss_kind == LossKind::TFM && !mcfg.time_conditioned)
        throw ConfigError("train.loss tfm requires model.time_conditioned = true");

    Rng root(tcfg.seed);
    Rng init_rng = root.child(0);
    ModelParams params = resume_params ? std::move(*resume_params) : init_params(mcfg, init_rng);
    AdamState adam = init_adam(params);
    adam.step = resume_step;

    Dataset train_ds;
    train_ds.ambient_dim = ds.ambient_dim;
    std::vector<const MeasurePair*> holdout;
    if (tcfg.eval_every > 0 && ds.pairs.size() > 1) {
        size_t n_hold = std::max<size_t>(1, ds.pairs.size() / 10);
        size_t n_train = ds.pairs.size() - n_hold;
        for (size_t i = 0; i < n_train; ++i) train_ds.pairs.push_back(ds.pairs[i]);
        for (size_t i = n_train; i < ds.pairs.size(); ++i) holdout.push_back(&ds.pairs[i]);
    } else {
        train_ds.pairs = ds.pairs;
    }

    TrainHistory history;
    for (long step = resume_step; step < tcfg.iterations; ++step) {
        Rng step_rng = root.child(static_cast<uint64_t>(step) + 1);
        auto t0 = std::chrono::steady_clock::now();
        double loss;
        try {
            loss = tcfg.loss_kind == LossKind::TFM
                       ? tfm_training_step(train_ds, params, adam, tcfg, step_rng)
                       : static_training_step(train_ds, params, adam, tcfg, step_rng);
        } catch (const NumericError& e) {
            throw NumericError(std::string(e.what()) + " (training step " + std::to_string(step) +
                               ", lr " +
                               std::to_string(tcfg.lr *
                                              schedule_factor(tcfg.schedule, step, tcfg.iterations)) +
                               ", loss " + to_string(tcfg.loss_kind) + ")");
        }
        auto t1 = std::chrono::steady_clock::now();
        history.losses.push_back(loss);
        history.step_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
        const bool last = step + 1 == tcfg.iterations;
        if (!holdout.empty() && tcfg.eval_every > 0 &&
            ((step + 1) % tcfg.eval_every == 0 || last))
            history.evals.push_back(detail::evaluate_holdout(params, holdout, step + 1));
    }
    return {std::move(params), std::move(history)};
}

}  // namespace m2m
