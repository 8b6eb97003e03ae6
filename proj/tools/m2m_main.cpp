// m2m: measure-to-measure regression experiments.
//
// Subcommands: simulate, corrupt, train, predict, eval, gradcheck.
// Exit codes: 0 success, 2 configuration error, 3 numeric abort (NaN/Inf
// during training or integration), 4 gradient check failure, 1 other errors.
// Seed precedence: --seed flag > M2M_SEED env var > config file.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "m2m/gradcheck.hpp"
#include "m2m/infer.hpp"
#include "m2m/sim.hpp"
#include "m2m/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitGradcheck = 4;

json load_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw m2m::IoError("cannot open config: " + path.string());
    try {
        json j;
        in >> j;
        return j;
    } catch (const json::exception& e) {
        throw m2m::ConfigError("config " + path.string() + ": " + e.what());
    }
}

std::optional<uint64_t> env_seed() {
    const char* v = std::getenv("M2M_SEED");
    if (v == nullptr || *v == '\0') return std::nullopt;
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw m2m::ConfigError("M2M_SEED must be an unsigned integer, got \"" + std::string(v) +
                               "\"");
    }
}

// flag > env > config.
uint64_t resolve_seed(const std::optional<uint64_t>& flag, const json& cfg,
                      const std::string& key, uint64_t fallback) {
    if (flag) return *flag;
    if (auto env = env_seed()) return *env;
    if (cfg.contains(key)) return cfg.at(key).get<uint64_t>();
    return fallback;
}

void write_frozen_config(const json& resolved, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    std::ofstream out(out_dir / "config.resolved.json");
    if (!out) throw m2m::IoError("cannot write frozen config in " + out_dir.string());
    out << resolved.dump(2) << "\n";
}

fs::path require_out_dir(const json& cfg) {
    if (!cfg.contains("out_dir")) throw m2m::ConfigError("config: out_dir is required");
    return fs::path(cfg.at("out_dir").get<std::string>());
}

int cmd_simulate(const fs::path& config_path, std::optional<uint64_t> seed_flag) {
    json cfg = load_json_file(config_path);
    fs::path out_dir = require_out_dir(cfg);
    if (!cfg.contains("data") || !cfg.at("data").contains("systems"))
        throw m2m::ConfigError("config: data.systems is required for simulate");
    uint64_t base_seed = resolve_seed(seed_flag, cfg, "seed", 0);

    std::vector<m2m::SdeConfig> systems;
    const auto& sys_list = cfg.at("data").at("systems");
    if (!sys_list.is_array() || sys_list.empty())
        throw m2m::ConfigError("config: data.systems must be a non-empty array");
    for (size_t i = 0; i < sys_list.size(); ++i) {
        m2m::SdeConfig sc = m2m::sde_config_from_json(sys_list[i]);
        if (!sys_list[i].contains("seed")) sc.seed = base_seed + i;
        systems.push_back(sc);
    }

    json resolved = cfg;
    resolved["seed"] = base_seed;
    resolved["data"]["systems"] = json::array();
    for (const auto& sc : systems) resolved["data"]["systems"].push_back(m2m::to_json(sc));
    write_frozen_config(resolved, out_dir);

    fs::path manifest = m2m::emit_mkv_dataset(systems, out_dir);
    std::cout << manifest.string() << "\n";
    return kExitOk;
}

int cmd_corrupt(const fs::path& config_path, std::optional<uint64_t> seed_flag) {
    json cfg = load_json_file(config_path);
    fs::path out_dir = require_out_dir(cfg);
    if (!cfg.contains("data") || !cfg.at("data").contains("targets"))
        throw m2m::ConfigError("config: data.targets is required for corrupt");
    m2m::CorruptionConfig cc = m2m::corruption_config_from_json(
        cfg.at("data").value("corruption", json::object()));
    cc.seed = resolve_seed(seed_flag, cfg, "seed", cc.seed);

    const auto& targets = cfg.at("data").at("targets");
    if (!targets.is_array() || targets.empty())
        throw m2m::ConfigError("config: data.targets must be a non-empty array");

    json resolved = cfg;
    resolved["seed"] = cc.seed;
    write_frozen_config(resolved, out_dir);

    const fs::path base = config_path.parent_path();
    json pairs = json::array();
    Eigen::Index ambient_dim = 0;
    m2m::Rng root(cc.seed);
    for (size_t i = 0; i < targets.size(); ++i) {
        fs::path target_path = base / targets[i].get<std::string>();
        m2m::PointCloud target = m2m::load_pointcloud(target_path);
        if (i == 0) ambient_dim = target.dim();
        if (target.dim() != ambient_dim)
            throw m2m::ShapeError("corrupt: target " + std::to_string(i) +
                                  " has mismatched dimension");
        m2m::Rng stream = root.child(i);
        m2m::PointCloud source = m2m::corrupt(target, cc, stream);
        std::string src_name = "source" + std::to_string(i) + ".m2m";
        std::string tgt_name = "target" + std::to_string(i) + ".m2m";
        m2m::save_pointcloud(source, out_dir / src_name);
        m2m::save_pointcloud(target, out_dir / tgt_name);
        pairs.push_back({{"source", src_name},
                         {"target", tgt_name},
                         {"tag", "corrupt:" + std::to_string(i)}});
    }
    json manifest{{"ambient_dim", ambient_dim}, {"pairs", pairs}};
    fs::path manifest_path = out_dir / "dataset.json";
    std::ofstream(manifest_path) << manifest.dump(2) << "\n";
    std::cout << manifest_path.string() << "\n";
    return kExitOk;
}

int cmd_train(const fs::path& config_path, std::optional<uint64_t> seed_flag, bool resume) {
    json cfg = load_json_file(config_path);
    fs::path out_dir = require_out_dir(cfg);
    for (const char* section : {"data", "model", "train"})
        if (!cfg.contains(section))
            throw m2m::ConfigError(std::string("config: ") + section + " section is required");
    if (!cfg.at("data").contains("manifest"))
        throw m2m::ConfigError("config: data.manifest is required for train");

    m2m::ModelConfig mcfg = m2m::model_config_from_json(cfg.at("model"));
    m2m::TrainConfig tcfg = m2m::train_config_from_json(cfg.at("train"));
    tcfg.seed = resolve_seed(seed_flag, cfg.at("train"), "seed", tcfg.seed);

    fs::path manifest_path =
        config_path.parent_path() / cfg.at("data").at("manifest").get<std::string>();
    m2m::Dataset ds = m2m::load_dataset(manifest_path);
    if (ds.ambient_dim != mcfg.ambient_dim)
        throw m2m::ConfigError("model.ambient_dim " + std::to_string(mcfg.ambient_dim) +
                               " does not match dataset dimension " +
                               std::to_string(ds.ambient_dim));
    tcfg.resolve_epochs(ds.pairs.size());

    json resolved = cfg;
    resolved["model"] = m2m::to_json(mcfg);
    resolved["train"] = m2m::to_json(tcfg);
    write_frozen_config(resolved, out_dir);

    fs::path ckpt_path = out_dir / "checkpoint.m2mc";
    std::optional<m2m::ModelParams> resume_params;
    long resume_step = 0;
    if (resume) {
        if (!fs::exists(ckpt_path))
            throw m2m::ConfigError("--resume: no checkpoint at " + ckpt_path.string());
        auto [params, step] = m2m::load_checkpoint(ckpt_path);
        resume_params = std::move(params);
        resume_step = step;
    }

    auto [params, history] = m2m::train(ds, mcfg, tcfg, std::move(resume_params), resume_step);
    m2m::save_checkpoint(params, tcfg.iterations, ckpt_path);

    std::ofstream hist(out_dir / "history.jsonl", resume ? std::ios::app : std::ios::trunc);
    size_t eval_idx = 0;
    for (size_t i = 0; i < history.losses.size(); ++i) {
        long step = resume_step + static_cast<long>(i) + 1;
        double lr = tcfg.lr * m2m::schedule_factor(tcfg.schedule, step - 1, tcfg.iterations);
        hist << json{{"type", "step"},
                     {"step", step},
                     {"loss", history.losses[i]},
                     {"lr", lr},
                     {"ms", history.step_ms[i]}}
                    .dump()
             << "\n";
        while (eval_idx < history.evals.size() && history.evals[eval_idx].step == step) {
            json reports = json::array();
            for (const auto& r : history.evals[eval_idx].reports)
                reports.push_back(m2m::to_json(r));
            hist << json{{"type", "eval"},
                         {"step", step},
                         {"mean_w1", history.evals[eval_idx].mean_w1},
                         {"reports", reports}}
                        .dump()
                 << "\n";
            eval_idx++;
        }
    }

    json summary{{"checkpoint", ckpt_path.string()}, {"steps", tcfg.iterations}};
    if (!history.losses.empty()) summary["final_loss"] = history.losses.back();
    if (!history.evals.empty()) {
        json reports = json::array();
        for (const auto& r : history.evals.back().reports) reports.push_back(m2m::to_json(r));
        summary["final_eval"] = {{"step", history.evals.back().step},
                                 {"mean_w1", history.evals.back().mean_w1},
                                 {"reports", reports}};
    }
    std::cout << summary.dump(2) << "\n";
    return kExitOk;
}

int cmd_predict(const fs::path& ckpt_path, const fs::path& source_path, const fs::path& out_path,
                int steps, bool steps_given) {
    auto [params, step] = m2m::load_checkpoint(ckpt_path);
    m2m::PointCloud source = m2m::load_pointcloud(source_path);
    if (source.dim() != params.config.ambient_dim)
        throw m2m::ConfigError("source dimension " + std::to_string(source.dim()) +
                               " does not match checkpoint ambient_dim " +
                               std::to_string(params.config.ambient_dim));
    if (!params.config.time_conditioned && steps_given)
        std::cerr << "warning: static checkpoint, --steps ignored\n";
    m2m::PointCloud pred = m2m::predict_next(params, source, steps);
    m2m::save_pointcloud(pred, out_path);
    std::cout << out_path.string() << "\n";
    return kExitOk;
}

int cmd_eval(const fs::path& pred_path, const fs::path& target_path) {
    m2m::PointCloud pred = m2m::load_pointcloud(pred_path);
    m2m::PointCloud target = m2m::load_pointcloud(target_path);
    m2m::MetricReport report = m2m::metric_report(pred, target);
    std::cout << m2m::to_json(report).dump(2) << "\n";
    return kExitOk;
}

int cmd_gradcheck(const std::optional<fs::path>& config_path, bool corrupt_backward) {
    m2m::ModelConfig cfg;
    cfg.ambient_dim = 2;
    cfg.hidden_dim = 8;
    cfg.num_layers = 1;
    cfg.num_heads = 2;
    cfg.fourier_frequencies = 4;
    cfg.time_embed_dim = 8;
    cfg.dropout_rate = 0.0;
    cfg.time_conditioned = true;
    if (config_path) {
        json j = load_json_file(*config_path);
        cfg = m2m::model_config_from_json(j.contains("model") ? j.at("model") : j);
        cfg.time_conditioned = true;
        cfg.dropout_rate = 0.0;  // the check needs a deterministic loss
    }
    const double rel_tol = 1e-4, abs_tol = 1e-8, fd_step = 1e-6;
    const double inject = corrupt_backward ? 1e-3 : 0.0;

    double worst = 0.0;
    std::string worst_param;
    bool pass = true;
    auto run = [&](const char* label, m2m::ModelConfig mc) {
        m2m::Rng rng(12345);
        m2m::ModelParams P = m2m::init_params(mc, rng);
        m2m::randomize_all(P, rng, 0.3);
        m2m::Mat z = rng.normal_matrix(3, mc.ambient_dim) * 0.5;
        m2m::Mat target = rng.normal_matrix(3, mc.ambient_dim) * 0.5;
        m2m::TrainConfig tc;
        auto build = [&]() -> m2m::ad::Var {
            if (mc.time_conditioned) {
                m2m::ad::Var pred = m2m::model_forward_graph(P, z, 0.35, false, nullptr);
                m2m::ad::Var diff = m2m::ad::sub(pred, m2m::ad::constant(target));
                return m2m::ad::mean(m2m::ad::mul(diff, diff));
            }
            m2m::ad::Var pushed = m2m::model_forward_graph(P, z, std::nullopt, false, nullptr);
            return m2m::detail::static_loss_node(m2m::LossKind::ED, pushed, target, tc);
        };
        m2m::GradCheckReport report = m2m::gradcheck(P, build, fd_step, rel_tol, abs_tol, inject);
        for (const auto& e : report.entries) {
            std::cout << label << " " << e.name << " max_rel_err " << e.max_rel_err
                      << (e.pass ? "" : "  FAIL") << "\n";
            if (e.max_rel_err > worst) {
                worst = e.max_rel_err;
                worst_param = std::string(label) + " " + e.name;
            }
            pass = pass && e.pass;
        }
    };
    run("tfm_mse", cfg);
    m2m::ModelConfig static_cfg = cfg;
    static_cfg.time_conditioned = false;
    run("static_ed", static_cfg);

    std::cout << "max relative error: " << worst << "\n";
    if (!pass) {
        std::cerr << "gradcheck failed at " << worst_param << "\n";
        return kExitGradcheck;
    }
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"measure-to-measure regression: simulate, train, predict, evaluate"};
    app.require_subcommand(1);

    std::string config_path, ckpt, source, pred, target;
    std::string out_path = "prediction.m2m";
    std::optional<uint64_t> seed_flag;
    bool resume = false, corrupt_backward = false;
    int steps = m2m::kDefaultInferenceSteps;

    auto* sim = app.add_subcommand("simulate", "simulate SDE systems into a paired dataset");
    sim->add_option("config", config_path, "JSON config with out_dir and data.systems")
        ->required();
    sim->add_option("--seed", seed_flag, "override the config seed");

    auto* cor = app.add_subcommand("corrupt", "corrupt target clouds into paired sources");
    cor->add_option("config", config_path, "JSON config with out_dir and data.targets")
        ->required();
    cor->add_option("--seed", seed_flag, "override the config seed");

    auto* tr = app.add_subcommand("train", "train a model from a dataset manifest");
    tr->add_option("config", config_path, "JSON config with data, model, train sections")
        ->required();
    tr->add_option("--seed", seed_flag, "override train.seed");
    tr->add_flag("--resume", resume, "continue from out_dir/checkpoint.m2mc");

    auto* pr = app.add_subcommand("predict", "map a source cloud through a trained model");
    pr->add_option("checkpoint", ckpt, "checkpoint file")->required();
    pr->add_option("source", source, "source .m2m cloud")->required();
    pr->add_option("-o,--output", out_path, "output cloud path");
    auto* steps_opt = pr->add_option("--steps", steps, "integration steps (dynamic models)");

    auto* ev = app.add_subcommand("eval", "distributional metrics between two clouds");
    ev->add_option("prediction", pred, "predicted .m2m cloud")->required();
    ev->add_option("target", target, "target .m2m cloud")->required();

    auto* gc = app.add_subcommand("gradcheck", "finite-difference check of model gradients");
    gc->add_option("config", config_path, "optional JSON config with a model section");
    gc->add_flag("--corrupt-backward", corrupt_backward,
                 "negative control: bias one gradient and expect exit 4");

    CLI11_PARSE(app, argc, argv);

    try {
        if (sim->parsed()) return cmd_simulate(config_path, seed_flag);
        if (cor->parsed()) return cmd_corrupt(config_path, seed_flag);
        if (tr->parsed()) return cmd_train(config_path, seed_flag, resume);
        if (pr->parsed())
            return cmd_predict(ckpt, source, out_path, steps, steps_opt->count() > 0);
        if (ev->parsed()) return cmd_eval(pred, target);
        if (gc->parsed())
            return cmd_gradcheck(
                config_path.empty() ? std::nullopt : std::optional<fs::path>(config_path),
                corrupt_backward);
    } catch (const m2m::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const m2m::FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const m2m::NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const m2m::Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitError;
}
