#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "m2m/gradcheck.hpp"
#include "m2m/nn.hpp"
#include "m2m/optim.hpp"

using namespace m2m;

namespace {

ModelConfig tiny_config(bool time_conditioned) {
    ModelConfig c;
    c.ambient_dim = 2;
    c.hidden_dim = 8;
    c.num_layers = 1;
    c.num_heads = 2;
    c.fourier_frequencies = 4;
    c.time_embed_dim = 8;
    c.dropout_rate = 0.0;
    c.time_conditioned = time_conditioned;
    return c;
}

Mat permute_rows(const Mat& m, const std::vector<Eigen::Index>& perm) {
    Mat out(m.rows(), m.cols());
    for (Eigen::Index i = 0; i < m.rows(); ++i) out.row(i) = m.row(perm[static_cast<size_t>(i)]);
    return out;
}

}  // namespace

TEST_CASE("attention_finite") {
    SECTION("single token: softmax over one key is 1, output is the V projection") {
        Rng rng(3);
        Mat x = rng.normal_matrix(1, 4);
        AttentionWeights w;
        w.Wq = ad::leaf(rng.normal_matrix(4, 4));
        w.bq = ad::leaf(Mat::Zero(1, 4));
        w.Wk = ad::leaf(rng.normal_matrix(4, 4));
        w.bk = ad::leaf(Mat::Zero(1, 4));
        w.Wv = ad::leaf(rng.normal_matrix(4, 4));
        w.bv = ad::leaf(Mat::Zero(1, 4));
        w.Wo = ad::leaf(Mat::Identity(4, 4));
        w.bo = ad::leaf(Mat::Zero(1, 4));
        ad::Var out = attention_finite(ad::constant(x), w, 1);
        CHECK((out->value - x * w.Wv->value).norm() == 0.0);
    }

    SECTION("identical tokens produce identical outputs") {
        Rng rng(5);
        Mat token = rng.normal_matrix(1, 6);
        Mat x(3, 6);
        x << token, token, token;
        AttentionWeights w;
        auto mk = [&](Eigen::Index r, Eigen::Index c) { return ad::leaf(rng.normal_matrix(r, c)); };
        w.Wq = mk(6, 6); w.bq = mk(1, 6); w.Wk = mk(6, 6); w.bk = mk(1, 6);
        w.Wv = mk(6, 6); w.bv = mk(1, 6); w.Wo = mk(6, 6); w.bo = mk(1, 6);
        ad::Var out = attention_finite(ad::constant(x), w, 3);
        CHECK((out->value.row(0) - out->value.row(1)).norm() < 1e-14);
        CHECK((out->value.row(0) - out->value.row(2)).norm() < 1e-14);
    }

    SECTION("two tokens, one head, hand-computed softmax combination") {
        // h = 2, integer weights, worked through by hand below.
        Mat x(2, 2);
        x << 1, 0,
             0, 1;
        Mat Wq(2, 2), Wk(2, 2), Wv(2, 2);
        Wq << 1, 2, 0, 1;
        Wk << 1, 0, 1, 1;
        Wv << 2, 0, 0, 3;
        AttentionWeights w;
        w.Wq = ad::leaf(Wq); w.Wk = ad::leaf(Wk); w.Wv = ad::leaf(Wv);
        w.Wo = ad::leaf(Mat::Identity(2, 2));
        w.bq = ad::leaf(Mat::Zero(1, 2)); w.bk = ad::leaf(Mat::Zero(1, 2));
        w.bv = ad::leaf(Mat::Zero(1, 2)); w.bo = ad::leaf(Mat::Zero(1, 2));
        ad::Var out = attention_finite(ad::constant(x), w, 1);

        // Rows of Q = x Wq: q0 = (1,2), q1 = (0,1). Rows of K = x Wk: k0 = (1,0),
        // k1 = (1,1). Rows of V = x Wv: v0 = (2,0), v1 = (0,3).
        // Logits/sqrt(2): row0 = (1, 3)/sqrt(2), row1 = (0, 1)/sqrt(2).
        double s = 1.0 / std::sqrt(2.0);
        auto softmax2 = [](double a, double b) {
            double ea = std::exp(a), eb = std::exp(b);
            return std::pair<double, double>{ea / (ea + eb), eb / (ea + eb)};
        };
        auto [a00, a01] = softmax2(1 * s, 3 * s);
        auto [a10, a11] = softmax2(0 * s, 1 * s);
        Mat expect(2, 2);
        expect << a00 * 2.0, a01 * 3.0,
                  a10 * 2.0, a11 * 3.0;
        CHECK((out->value - expect).cwiseAbs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("fourier features") {
    Rng rng(7);

    SECTION("x = 0 gives sin part 0, cos part 1") {
        auto B = ad::leaf(rng.normal_matrix(5, 3));
        ad::Var out = fourier_features(ad::constant(Mat::Zero(2, 3)), B);
        CHECK(out->value.leftCols(5).isZero(0.0));
        CHECK((out->value.rightCols(5).array() - 1.0).abs().maxCoeff() == 0.0);
    }

    SECTION("B = 0 behaves like x = 0 for any x") {
        auto B = ad::leaf(Mat::Zero(5, 3));
        ad::Var out = fourier_features(ad::constant(rng.normal_matrix(4, 3)), B);
        CHECK(out->value.leftCols(5).isZero(0.0));
        CHECK((out->value.rightCols(5).array() - 1.0).abs().maxCoeff() == 0.0);
    }

    SECTION("matches elementwise recomputation") {
        Mat x = rng.normal_matrix(3, 2), B = rng.normal_matrix(4, 2);
        ad::Var out = fourier_features(ad::constant(x), ad::leaf(B));
        for (Eigen::Index i = 0; i < 3; ++i)
            for (Eigen::Index f = 0; f < 4; ++f) {
                double phase = 2.0 * M_PI * B.row(f).dot(x.row(i));
                CHECK(out->value(i, f) == Catch::Approx(std::sin(phase)).margin(1e-14));
                CHECK(out->value(i, 4 + f) == Catch::Approx(std::cos(phase)).margin(1e-14));
            }
    }
}

TEST_CASE("time embedding") {
    SECTION("t = 0: sines 0, cosines 1") {
        Mat e = time_embedding(0.0, 16);
        CHECK(e.leftCols(8).isZero(0.0));
        CHECK((e.rightCols(8).array() - 1.0).abs().maxCoeff() == 0.0);
    }

    SECTION("distinct on a grid, deterministic") {
        std::vector<Mat> embeddings;
        for (int i = 0; i <= 100; ++i) embeddings.push_back(time_embedding(i / 100.0, 32));
        for (size_t i = 0; i < embeddings.size(); ++i)
            for (size_t j = i + 1; j < embeddings.size(); ++j)
                CHECK((embeddings[i] - embeddings[j]).norm() > 1e-8);
        CHECK(time_embedding(0.375, 32) == time_embedding(0.375, 32));
    }

    SECTION("odd dim is an error") { CHECK_THROWS_AS(time_embedding(0.5, 7), ValueError); }
}

TEST_CASE("adaln block is the identity at zero-init modulation") {
    Rng rng(11);
    ModelConfig cfg = tiny_config(true);
    ModelParams P = init_params(cfg, rng);
    Mat tokens = rng.normal_matrix(5, cfg.hidden_dim);
    ad::Var cond = ad::constant(rng.normal_matrix(1, cfg.hidden_dim));
    ad::Var out = adaln_block(ad::constant(tokens), cond, detail::block_weights(P, 0),
                              cfg.num_heads, 0.0, false, nullptr);
    CHECK((out->value - tokens).norm() == 0.0);
}

TEST_CASE("transformer forward") {
    Rng rng(13);

    SECTION("zero-initialized output projection gives the zero field") {
        ModelConfig cfg = tiny_config(false);
        ModelParams P = init_params(cfg, rng);
        Mat x = rng.normal_matrix(6, 2);
        CHECK(model_forward(P, x, std::nullopt).isZero(0.0));
    }

    SECTION("row permutation equivariance at 1e-10") {
        ModelConfig cfg = tiny_config(true);
        cfg.hidden_dim = 16;
        cfg.num_layers = 2;
        ModelParams P = init_params(cfg, rng);
        randomize_all(P, rng);
        Mat x = rng.normal_matrix(7, 2);
        std::vector<Eigen::Index> perm = {3, 0, 6, 1, 5, 2, 4};
        Mat out = model_forward(P, x, 0.3);
        Mat out_perm = model_forward(P, permute_rows(x, perm), 0.3);
        CHECK((out_perm - permute_rows(out, perm)).cwiseAbs().maxCoeff() < 1e-10);
    }

    SECTION("output depends on the other rows (measure dependence)") {
        ModelConfig cfg = tiny_config(false);
        ModelParams P = init_params(cfg, rng);
        randomize_all(P, rng);
        Mat a = rng.normal_matrix(5, 2), b = rng.normal_matrix(5, 2);
        b.row(0) = a.row(0);  // same probe row, different context
        Mat out_a = model_forward(P, a, std::nullopt);
        Mat out_b = model_forward(P, b, std::nullopt);
        CHECK((out_a.row(0) - out_b.row(0)).norm() > 1e-8);
    }

    SECTION("eval forwards are bit-identical") {
        ModelConfig cfg = tiny_config(true);
        ModelParams P = init_params(cfg, rng);
        randomize_all(P, rng);
        Mat x = rng.normal_matrix(4, 2);
        CHECK(model_forward(P, x, 0.7) == model_forward(P, x, 0.7));
    }

    SECTION("contract errors") {
        ModelConfig cfg = tiny_config(false);
        ModelParams P = init_params(cfg, rng);
        Mat x = rng.normal_matrix(3, 2);
        CHECK_THROWS_AS(model_forward(P, x, 0.5), ConfigError);  // static takes no t
        ModelParams Q = init_params(tiny_config(true), rng);
        CHECK_THROWS_AS(model_forward(Q, x, std::nullopt), ConfigError);
        Mat bad = x;
        bad(0, 0) = std::numeric_limits<double>::infinity();
        CHECK_THROWS_AS(model_forward(Q, bad, 0.5), ValueError);
    }
}

TEST_CASE("mlp forward") {
    Rng rng(17);
    ModelConfig cfg = tiny_config(true);
    cfg.arch = ModelConfig::Arch::Mlp;
    cfg.num_layers = 2;

    SECTION("no measure dependence: same row, any context") {
        ModelParams P = init_params(cfg, rng);
        randomize_all(P, rng);
        Mat a = rng.normal_matrix(4, 2), b = rng.normal_matrix(4, 2);
        b.row(2) = a.row(1);
        Mat out_a = model_forward(P, a, 0.25);
        Mat out_b = model_forward(P, b, 0.25);
        CHECK((out_a.row(1) - out_b.row(2)).norm() == 0.0);
    }

    SECTION("zero final layer gives zero output") {
        ModelParams P = init_params(cfg, rng);
        Mat x = rng.normal_matrix(3, 2);
        CHECK(model_forward(P, x, 0.5).isZero(0.0));
    }

    SECTION("mlp requires time conditioning") {
        ModelConfig bad = cfg;
        bad.time_conditioned = false;
        CHECK_THROWS_AS(bad.validate(), ConfigError);
    }
}

TEST_CASE("dropout preserves the expectation of a linear probe") {
    Rng rng(23);
    ModelConfig cfg = tiny_config(true);
    cfg.dropout_rate = 0.2;
    ModelParams P = init_params(cfg, rng);
    randomize_all(P, rng);
    // With the first MLP matrix zeroed, both dropout sites feed the output
    // linearly, so the train-mode expectation matches the eval value exactly.
    P.at("block0.mlp.W1")->value.setZero();
    Mat x = rng.normal_matrix(4, 2);

    double eval_probe = model_forward(P, x, 0.4).sum();
    const int reps = 10000;
    double acc = 0.0, acc_sq = 0.0;
    Rng drop_rng(31);
    for (int i = 0; i < reps; ++i) {
        double probe = model_forward_graph(P, x, 0.4, true, &drop_rng)->value.sum();
        acc += probe;
        acc_sq += probe * probe;
    }
    double mean = acc / reps;
    double var = acc_sq / reps - mean * mean;
    double stderr_mean = std::sqrt(var / reps);
    CHECK(std::abs(mean - eval_probe) < 3.0 * stderr_mean + 1e-12);
}

TEST_CASE("full-model gradient check on a tiny transformer") {
    Rng rng(29);
    ModelConfig cfg = tiny_config(true);
    ModelParams P = init_params(cfg, rng);
    // Weight scale 0.3 keeps the loss O(1); larger scales drown small
    // gradient coordinates in finite-difference round-off noise.
    randomize_all(P, rng, 0.3);
    Mat z = rng.normal_matrix(3, 2) * 0.5;
    Mat target = rng.normal_matrix(3, 2) * 0.5;
    auto build = [&]() -> ad::Var {
        ad::Var pred = transformer_forward_graph(P, z, 0.35, false, nullptr);
        ad::Var diff = ad::sub(pred, ad::constant(target));
        return ad::mean(ad::mul(diff, diff));
    };
    GradCheckReport report = gradcheck(P, build, 1e-6, 1e-4, 1e-8);
    for (const auto& e : report.entries) {
        INFO(e.name << " rel=" << e.max_rel_err);
        CHECK(e.pass);
    }
    CHECK(report.pass);
}

TEST_CASE("gradcheck flags an injected gradient error") {
    Rng rng(37);
    ModelConfig cfg = tiny_config(false);
    cfg.num_heads = 1;
    cfg.hidden_dim = 4;
    ModelParams P = init_params(cfg, rng);
    randomize_all(P, rng);
    Mat z = rng.normal_matrix(2, 2);
    auto build = [&]() -> ad::Var {
        ad::Var out = transformer_forward_graph(P, z, std::nullopt, false, nullptr);
        return ad::mean(ad::mul(out, out));
    };
    GradCheckReport report = gradcheck(P, build, 1e-6, 1e-4, 1e-8, 0.05);
    CHECK_FALSE(report.pass);
}

TEST_CASE("adam") {
    SECTION("zero gradient leaves parameters unchanged and bumps the counter") {
        Rng rng(41);
        ModelParams P = init_params(tiny_config(false), rng);
        P.zero_grads();
        AdamState s = init_adam(P);
        Mat before = P.at("input.W")->value;
        adam_step(P, s, 0.1);
        CHECK(s.step == 1);
        CHECK(P.at("input.W")->value == before);
    }

    SECTION("first step is approximately -lr sign(g)") {
        Rng rng(43);
        ModelParams P = init_params(tiny_config(false), rng);
        P.zero_grads();
        P.at("input.W")->grad.setConstant(7.3);  // |g| >> eps
        Mat before = P.at("input.W")->value;
        AdamState s = init_adam(P);
        adam_step(P, s, 0.01);
        Mat delta = P.at("input.W")->value - before;
        CHECK((delta.array() + 0.01).abs().maxCoeff() < 1e-8);
    }

    SECTION("three steps with unit gradients match a scalar reference") {
        // Hand-rolled Adam on one scalar with g = 1 at every step.
        double m = 0.0, v = 0.0, x_ref = 0.5;
        const double b1 = 0.9, b2 = 0.999, eps = 1e-8, lr = 0.1;
        for (int t = 1; t <= 3; ++t) {
            m = b1 * m + (1 - b1) * 1.0;
            v = b2 * v + (1 - b2) * 1.0;
            double mhat = m / (1 - std::pow(b1, t));
            double vhat = v / (1 - std::pow(b2, t));
            x_ref -= lr * mhat / (std::sqrt(vhat) + eps);
        }

        ModelConfig cfg = tiny_config(false);
        Rng rng(47);
        ModelParams P = init_params(cfg, rng);
        P.at("out.b")->value.setConstant(0.5);
        AdamState s = init_adam(P);
        for (int t = 0; t < 3; ++t) {
            P.zero_grads();
            P.at("out.b")->grad.setConstant(1.0);
            adam_step(P, s, 0.1);
        }
        CHECK(P.at("out.b")->value(0, 0) == Catch::Approx(x_ref).margin(1e-12));
    }
}

TEST_CASE("checkpoint round trip") {
    namespace fs = std::filesystem;
    fs::path dir = fs::temp_directory_path() / "m2m_test_ckpt";
    fs::create_directories(dir);
    Rng rng(53);
    ModelConfig cfg = tiny_config(true);
    ModelParams P = init_params(cfg, rng);
    randomize_all(P, rng);
    fs::path path = dir / "model.ckpt";
    save_checkpoint(P, 1234, path);

    auto [Q, step] = load_checkpoint(path);
    CHECK(step == 1234);
    CHECK(Q.config.hidden_dim == cfg.hidden_dim);
    CHECK(Q.config.time_conditioned);
    REQUIRE(Q.tensors.size() == P.tensors.size());
    for (size_t i = 0; i < P.tensors.size(); ++i) {
        CHECK(Q.tensors[i].first == P.tensors[i].first);
        CHECK(Q.tensors[i].second->value == P.tensors[i].second->value);
    }

    SECTION("forward passes agree after reload") {
        Mat x = rng.normal_matrix(4, 2);
        CHECK(model_forward(P, x, 0.6) == model_forward(Q, x, 0.6));
    }

    SECTION("bad magic rejected") {
        fs::path bad = dir / "bad.ckpt";
        std::ofstream(bad, std::ios::binary) << "garbage data here";
        CHECK_THROWS_AS(load_checkpoint(bad), FormatError);
    }
}
