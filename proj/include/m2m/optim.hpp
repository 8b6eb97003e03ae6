#pragma once

#include <vector>

#include "m2m/nn.hpp"

namespace m2m {

// Adam with the original publication's defaults and bias correction.
struct AdamState {
    std::vector<Mat> m;  // first moments, one per parameter tensor
    std::vector<Mat> v;  // second moments
    long step = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

inline AdamState init_adam(const ModelParams& P) {
    AdamState s;
    s.m.reserve(P.tensors.size());
    s.v.reserve(P.tensors.size());
    for (const auto& [name, var] : P.tensors) {
        s.m.push_back(Mat::Zero(var->value.rows(), var->value.cols()));
        s.v.push_back(Mat::Zero(var->value.rows(), var->value.cols()));
    }
    return s;
}

inline void adam_step(ModelParams& P, AdamState& s, double lr) {
    if (lr <= 0.0) throw ValueError("adam_step: lr must be > 0");
    if (s.m.size() != P.tensors.size()) throw ShapeError("adam state does not match params");
    s.step += 1;
    const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
    const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
    for (size_t i = 0; i < P.tensors.size(); ++i) {
        ad::Var& var = P.tensors[i].second;
        var->ensure_grad();
        const Mat& g = var->grad;
        s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * g;
        s.v[i] = (s.beta2 * s.v[i].array() + (1.0 - s.beta2) * g.array().square()).matrix();
        Mat mhat = s.m[i] / bc1;
        Mat vhat = s.v[i] / bc2;
        var->value -= lr * (mhat.array() / (vhat.array().sqrt() + s.eps)).matrix();
    }
}

}  // namespace m2m
