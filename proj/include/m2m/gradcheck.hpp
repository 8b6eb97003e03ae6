#pragma once

// Central finite-difference validation of reverse-mode gradients, per
// parameter tensor. The loss builder must be a deterministic function of the
// current parameter values (fixed batch, no dropout).

#include <functional>
#include <string>
#include <vector>

#include "m2m/nn.hpp"

namespace m2m {

struct GradCheckEntry {
    std::string name;
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    bool pass = true;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double worst_rel_err = 0.0;
    bool pass = true;
};

// A coordinate passes when |ad - fd| <= abs_tol or the relative error is
// within rel_tol. inject_error adds a bias to the first analytic gradient,
// which serves as the negative control for the checker itself.
inline GradCheckReport gradcheck(ModelParams& P, const std::function<ad::Var()>& build_loss,
                                 double step = 1e-6, double rel_tol = 1e-4,
                                 double abs_tol = 1e-8, double inject_error = 0.0) {
    P.zero_grads();
    ad::backward(build_loss());
    std::vector<Mat> analytic;
    analytic.reserve(P.tensors.size());
    for (auto& [name, var] : P.tensors) {
        var->ensure_grad();
        analytic.push_back(var->grad);
    }
    if (inject_error != 0.0 && !analytic.empty()) analytic[0].array() += inject_error;

    GradCheckReport report;
    for (size_t ti = 0; ti < P.tensors.size(); ++ti) {
        auto& [name, var] = P.tensors[ti];
        GradCheckEntry entry;
        entry.name = name;
        for (Eigen::Index i = 0; i < var->value.rows(); ++i)
            for (Eigen::Index j = 0; j < var->value.cols(); ++j) {
                const double orig = var->value(i, j);
                var->value(i, j) = orig + step;
                double up = build_loss()->value(0, 0);
                var->value(i, j) = orig - step;
                double down = build_loss()->value(0, 0);
                var->value(i, j) = orig;
                double fd = (up - down) / (2.0 * step);
                double adv = analytic[ti](i, j);
                double abs_err = std::abs(fd - adv);
                double denom = std::max(std::abs(fd), std::abs(adv));
                double rel_err = denom > 0.0 ? abs_err / denom : 0.0;
                entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
                if (abs_err > abs_tol) {
                    entry.max_rel_err = std::max(entry.max_rel_err, rel_err);
                    if (rel_err > rel_tol) entry.pass = false;
                }
            }
        report.worst_rel_err = std::max(report.worst_rel_err, entry.max_rel_err);
        report.pass = report.pass && entry.pass;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace m2m
