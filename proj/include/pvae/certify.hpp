#ifndef PVAE_CERTIFY_HPP
#define PVAE_CERTIFY_HPP

// Gradient certification entry points: every layer kind, both latent
// samplers, and the full PatchVAE objective on a miniature configuration,
// all checked against central finite differences in float64.

#include "pvae/gradcheck.hpp"
#include "pvae/losses.hpp"

namespace pvae::certify {

struct NamedReport {
    std::string name;
    GradCheckReport report;
};

// The trainable "input" trick: registering the input as a parameter makes the
// harness certify d(loss)/d(input) through the layer as well.
namespace detail {

inline GradCheckReport check_stack(const std::vector<nn::LayerSpec>& specs, Shape in_shape,
                                   uint64_t seed, const GradCheckOptions& opt,
                                   bool train_mode = true) {
    ParamStore<double> store;
    std::mt19937_64 rng = substream(seed, 0x636865636bULL);
    store.add("input", rand_uniform<double>(in_shape, rng, -1.0, 1.0));
    nn::LayerStack<double> stack("layer", specs);
    int in_c = in_shape.size() == 4 ? in_shape[3] : in_shape[1];
    stack.init(store, in_c, rng);

    // Fixed random regression target; shape discovered from one forward pass.
    nn::Mode mode = train_mode ? nn::Mode::frozen_forward() : nn::Mode::eval();
    Tensor<double> target;
    {
        Tape<double> t(&store);
        Value y = stack.forward(t, store, t.param("input"), mode);
        target = rand_uniform<double>(t.val(y).shape(), rng, -1.0, 1.0);
    }
    auto loss_fn = [&](bool with_grad) {
        Tape<double> t(&store);
        Value y = stack.forward(t, store, t.param("input"), mode);
        Value diff = ag::sub(t, y, t.constant(target));
        Value loss = ag::mean_all(t, ag::square(t, diff));
        double lv = t.val(loss)[0];
        if (with_grad) t.backward(loss);
        return lv;
    };
    return finite_difference_check(store, loss_fn, opt);
}

}  // namespace detail

inline std::vector<NamedReport> check_all_layer_kinds(const GradCheckOptions& opt = {},
                                                      uint64_t seed = 42) {
    using L = nn::LayerSpec;
    std::vector<NamedReport> out;
    auto add = [&](const std::string& name, const std::vector<L>& specs, Shape in_shape) {
        out.push_back({name, detail::check_stack(specs, in_shape, seed, opt)});
    };
    add("conv", {L::conv2d(3, 4, 1, 1, true)}, {2, 6, 6, 3});
    add("conv_stride2", {L::conv2d(3, 4, 2, 1, false)}, {2, 7, 7, 3});
    add("deconv", {L::deconv2d(4, 3, 2, 1, 0, true)}, {2, 3, 3, 4});
    add("batchnorm", {L::bn()}, {2, 5, 5, 3});
    add("relu", {L::relu()}, {2, 4, 4, 3});
    add("leakyrelu", {L::leakyrelu(0.2)}, {2, 4, 4, 3});
    add("tanh", {L::tanh_act()}, {2, 4, 4, 3});
    add("sigmoid", {L::sigmoid_act()}, {2, 4, 4, 3});
    add("fully_connected", {L::fc(4, true)}, {3, 7});
    add("maxpool", {L::pool(3, 2, 1)}, {2, 6, 6, 2});
    add("residual_block_identity", {L::residual(3)}, {2, 4, 4, 3});
    add("residual_block_projection", {L::residual(5)}, {2, 4, 4, 3});
    return out;
}

// Reparameterized samplers: gradients w.r.t. mu/logvar and the occurrence
// probabilities (through their logits).
inline NamedReport check_samplers(const GradCheckOptions& opt = {}, uint64_t seed = 7) {
    ParamStore<double> store;
    std::mt19937_64 rng = substream(seed, 0x73616d70ULL);
    Shape s{3, 4};
    store.add("mu", rand_uniform<double>(s, rng, -1.0, 1.0));
    store.add("logvar", rand_uniform<double>(s, rng, -1.0, 1.0));
    store.add("occ_logits", rand_uniform<double>(s, rng, -2.0, 2.0));
    Tensor<double> gnoise = randn<double>(s, rng);
    Tensor<double> unoise = rand_uniform<double>(s, rng, 0.05, 0.95);
    Tensor<double> target = rand_uniform<double>(s, rng, -1.0, 1.0);

    auto loss_fn = [&](bool with_grad) {
        Tape<double> t(&store);
        Value z = dist::sample_gaussian(t, t.param("mu"), t.param("logvar"), gnoise);
        Value q = ag::sigmoid_(t, t.param("occ_logits"));
        Value r = dist::sample_relaxed_bernoulli(t, q, 0.7, unoise);
        Value kl = ag::sum_all(t, dist::kl_bernoulli(t, q, 0.25));
        Value diff = ag::sub(t, z, t.constant(target));
        Value loss = ag::add(t, ag::mean_all(t, ag::square(t, diff)),
                             ag::add(t, ag::mean_all(t, ag::square(t, r)),
                                     ag::mul_scalar(t, kl, 0.1)));
        double lv = t.val(loss)[0];
        if (with_grad) t.backward(loss);
        return lv;
    };
    return {"samplers", finite_difference_check(store, loss_fn, opt)};
}

inline ModelConfig miniature_config() {
    ModelConfig cfg;
    cfg.kind = ModelKind::patchvae;
    cfg.n_parts = 2;
    cfg.d_p = 2;
    cfg.d_e = 8;
    cfg.height = 8;
    cfg.width = 8;
    cfg.beta_occ = 0.3;
    cfg.beta_app = 1.0;
    return cfg;
}

// End-to-end check of the complete objective (weighted reconstruction plus
// both KL families) through sampling, assembly, and the decoder.
inline NamedReport check_patchvae_objective(const GradCheckOptions& opt = {}, uint64_t seed = 11,
                                            losses::LossVariant variant =
                                                losses::LossVariant::weighted) {
    ModelConfig cfg = miniature_config();
    PatchVaeModel<double> model(cfg, seed);
    std::mt19937_64 rng = substream(seed, 0x6f626a65ULL);
    Tensor<double> x = rand_uniform<double>({2, cfg.height, cfg.width, 3}, rng, -0.9, 0.9);
    PatchNoise<double> noise = PatchNoise<double>::draw(cfg, 2, rng);
    const double tau = 0.8;
    nn::Mode mode = nn::Mode::frozen_forward();

    auto loss_fn = [&](bool with_grad) {
        Tape<double> t(&model.params());
        auto fwd = model.forward(t, x, noise, tau, mode);
        auto obj = losses::patchvae_objective(t, x, fwd, cfg, variant);
        if (with_grad) t.backward(obj.total);
        return static_cast<double>(obj.parts.total);
    };
    return {"patchvae_objective", finite_difference_check(model.params(), loss_fn, opt)};
}

struct CertificationSummary {
    std::vector<NamedReport> reports;
    bool pass = true;
    double worst = 0.0;
};

inline CertificationSummary run_full_certification(const GradCheckOptions& opt = {}) {
    CertificationSummary s;
    s.reports = check_all_layer_kinds(opt);
    s.reports.push_back(check_samplers(opt));
    s.reports.push_back(check_patchvae_objective(opt));
    for (const auto& r : s.reports) {
        s.pass = s.pass && r.report.pass;
        s.worst = std::max(s.worst, r.report.worst());
    }
    return s;
}

}  // namespace pvae::certify

#endif
