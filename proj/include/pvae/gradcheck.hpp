#ifndef PVAE_GRADCHECK_HPP
#define PVAE_GRADCHECK_HPP

// Central finite-difference certification of analytic gradients. Runs in
// float64; every trainable parameter element is perturbed symmetrically.

#include <functional>

#include "pvae/autograd.hpp"

namespace pvae {

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    double denom_floor = 1e-6;  // guards the relative error for near-zero gradients
};

struct ParamCheck {
    std::string name;
    double max_rel_err = 0.0;
};

struct GradCheckReport {
    std::vector<ParamCheck> params;
    double tolerance = 0.0;
    bool pass = true;

    double worst() const {
        double w = 0.0;
        for (const auto& p : params) w = std::max(w, p.max_rel_err);
        return w;
    }
    std::string worst_param() const {
        std::string n;
        double w = -1.0;
        for (const auto& p : params)
            if (p.max_rel_err > w) {
                w = p.max_rel_err;
                n = p.name;
            }
        return n;
    }
};

// loss_fn(with_grad): evaluates the model loss at the store's current
// parameter values; when with_grad is set it must also leave dL/dtheta in the
// store gradients. The function must be deterministic in the parameters.
inline GradCheckReport finite_difference_check(ParamStore<double>& store,
                                               const std::function<double(bool)>& loss_fn,
                                               const GradCheckOptions& opt = {}) {
    GradCheckReport report;
    report.tolerance = opt.tolerance;

    store.zero_grads();
    double base = loss_fn(true);
    PVAE_CHECK(std::isfinite(base), "finite_difference_check: loss is not finite (" << base << ")");

    std::map<std::string, Tensor<double>> analytic;
    for (auto& [name, e] : store.entries())
        if (e.trainable) analytic.emplace(name, e.grad);

    for (auto& [name, e] : store.entries()) {
        if (!e.trainable) continue;
        ParamCheck pc{name, 0.0};
        const Tensor<double>& g = analytic.at(name);
        for (int64_t i = 0; i < e.value.numel(); ++i) {
            double saved = e.value[i];
            e.value[i] = saved + opt.step;
            double up = loss_fn(false);
            e.value[i] = saved - opt.step;
            double down = loss_fn(false);
            e.value[i] = saved;
            PVAE_CHECK(std::isfinite(up) && std::isfinite(down),
                       "finite_difference_check: non-finite loss while perturbing '" << name << "'");
            double numeric = (up - down) / (2.0 * opt.step);
            double a = g[i];
            double denom = std::max({std::abs(a), std::abs(numeric), opt.denom_floor});
            pc.max_rel_err = std::max(pc.max_rel_err, std::abs(a - numeric) / denom);
        }
        report.params.push_back(pc);
        if (pc.max_rel_err >= opt.tolerance) report.pass = false;
    }
    return report;
}

}  // namespace pvae

#endif
