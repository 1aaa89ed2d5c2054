#ifndef PVAE_DISTRIBUTIONS_HPP
#define PVAE_DISTRIBUTIONS_HPP

// Reparameterizable latent primitives: diagonal Gaussians and relaxed
// Bernoullis, their closed-form KL divergences, and temperature annealing.
// Each primitive exists twice: a plain tensor form for evaluation and tests,
// and a tape form used inside model forwards.

#include "pvae/autograd.hpp"

namespace pvae::dist {

constexpr double kProbEps = 1e-6;     // keeps logits finite
constexpr double kLogvarMin = -10.0;  // GaussianParams logvar clamp
constexpr double kLogvarMax = 10.0;
constexpr double kPoolEps = 1e-6;     // occurrence-mass normalizer guard

template <typename T>
struct GaussianParams {
    Tensor<T> mu;
    Tensor<T> logvar;
};

template <typename T>
struct BernoulliParams {
    Tensor<T> probs;  // in (eps, 1-eps) after clamping
};

struct TemperatureSchedule {
    double tau0 = 1.0;
    double rate = 3e-5;
    double tau_min = 0.4;
};

inline double temperature_at(const TemperatureSchedule& s, int64_t step) {
    PVAE_CHECK(step >= 0, "temperature_at: negative step");
    PVAE_CHECK(s.tau0 > 0 && s.rate > 0 && s.tau_min > 0, "temperature schedule must be positive");
    return std::max(s.tau_min, s.tau0 * std::exp(-s.rate * static_cast<double>(step)));
}

template <typename T>
T clamp_prob(T p) {
    const T lo = static_cast<T>(kProbEps), hi = static_cast<T>(1.0 - kProbEps);
    return p < lo ? lo : (p > hi ? hi : p);
}

template <typename T>
T logit(T p) {
    p = clamp_prob(p);
    return std::log(p) - std::log(T(1) - p);
}

// --- plain tensor forms ----------------------------------------------------

template <typename T>
Tensor<T> sample_gaussian(const GaussianParams<T>& g, const Tensor<T>& noise) {
    PVAE_CHECK(g.mu.same_shape(g.logvar), "gaussian: mu/logvar shape mismatch");
    PVAE_CHECK(g.mu.same_shape(noise), "gaussian: noise shape mismatch");
    Tensor<T> out(g.mu.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = g.mu[i] + std::exp(g.logvar[i] / T(2)) * noise[i];
    return out;
}

// KL( N(mu, exp(logvar)) || N(0, I) ), summed over all entries.
template <typename T>
T kl_gaussian_std(const GaussianParams<T>& g) {
    PVAE_CHECK(g.mu.same_shape(g.logvar), "gaussian: mu/logvar shape mismatch");
    T s = T(0);
    for (int64_t i = 0; i < g.mu.numel(); ++i)
        s += T(-0.5) * (T(1) + g.logvar[i] - g.mu[i] * g.mu[i] - std::exp(g.logvar[i]));
    return s;
}

// Elementwise KL( Bern(q) || Bern(p) ); the caller sums over locations.
template <typename T>
Tensor<T> kl_bernoulli(const BernoulliParams<T>& b, T p_prior) {
    PVAE_CHECK(p_prior > T(0) && p_prior < T(1), "bernoulli prior must lie in (0,1)");
    Tensor<T> out(b.probs.shape());
    for (int64_t i = 0; i < out.numel(); ++i) {
        T q = clamp_prob(b.probs[i]);
        out[i] = q * (std::log(q) - std::log(p_prior)) +
                 (T(1) - q) * (std::log(T(1) - q) - std::log(T(1) - p_prior));
    }
    return out;
}

// sigmoid( (logit(q) + logit(u)) / tau ), u uniform in (0,1). Outputs are
// clamped to [eps, 1-eps] so the open-interval guarantee survives rounding
// at low temperatures.
template <typename T>
Tensor<T> sample_relaxed_bernoulli(const BernoulliParams<T>& b, T tau, const Tensor<T>& uniform_noise) {
    PVAE_CHECK(tau > T(0), "relaxed bernoulli: tau must be positive");
    PVAE_CHECK(b.probs.same_shape(uniform_noise), "relaxed bernoulli: noise shape mismatch");
    Tensor<T> out(b.probs.shape());
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = clamp_prob(
            ag::sigmoid_scalar((logit(b.probs[i]) + logit(uniform_noise[i])) / tau));
    return out;
}

// Deterministic occurrence at evaluation time; ties resolve to 0.
template <typename T>
Tensor<T> harden(const BernoulliParams<T>& b, T threshold) {
    PVAE_CHECK(threshold > T(0) && threshold < T(1), "harden: threshold must lie in (0,1)");
    Tensor<T> out(b.probs.shape());
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = b.probs[i] > threshold ? T(1) : T(0);
    return out;
}

// --- tape forms ------------------------------------------------------------

template <typename T>
Value sample_gaussian(Tape<T>& t, Value mu, Value logvar, const Tensor<T>& noise) {
    ag::check_same_shape(t, mu, logvar, "sample_gaussian");
    PVAE_CHECK(t.val(mu).same_shape(noise), "sample_gaussian: noise shape mismatch");
    Value sd = ag::exp_(t, ag::mul_scalar(t, logvar, T(0.5)));
    return ag::add(t, mu, ag::mul(t, sd, t.constant(noise)));
}

// Summed KL to the standard normal: -1/2 sum(1 + logvar - mu^2 - exp(logvar)).
template <typename T>
Value kl_gaussian_std(Tape<T>& t, Value mu, Value logvar) {
    Value term = ag::sub(t, ag::add_scalar(t, logvar, T(1)),
                         ag::add(t, ag::square(t, mu), ag::exp_(t, logvar)));
    return ag::mul_scalar(t, ag::sum_all(t, term), T(-0.5));
}

// Elementwise Bernoulli KL against a scalar prior.
template <typename T>
Value kl_bernoulli(Tape<T>& t, Value q, T p_prior) {
    PVAE_CHECK(p_prior > T(0) && p_prior < T(1), "bernoulli prior must lie in (0,1)");
    Value qc = ag::clamp(t, q, static_cast<T>(kProbEps), static_cast<T>(1.0 - kProbEps));
    Value one_m_q = ag::rsub_scalar(t, T(1), qc);
    Value t1 = ag::mul(t, qc, ag::add_scalar(t, ag::log_(t, qc), -std::log(p_prior)));
    Value t2 = ag::mul(t, one_m_q,
                       ag::add_scalar(t, ag::log_(t, one_m_q), -std::log(T(1) - p_prior)));
    return ag::add(t, t1, t2);
}

template <typename T>
Value sample_relaxed_bernoulli(Tape<T>& t, Value q, T tau, const Tensor<T>& uniform_noise) {
    PVAE_CHECK(tau > T(0), "relaxed bernoulli: tau must be positive");
    PVAE_CHECK(t.val(q).same_shape(uniform_noise), "relaxed bernoulli: noise shape mismatch");
    Value qc = ag::clamp(t, q, static_cast<T>(kProbEps), static_cast<T>(1.0 - kProbEps));
    Value logit_q = ag::sub(t, ag::log_(t, qc), ag::log_(t, ag::rsub_scalar(t, T(1), qc)));
    Tensor<T> noise_logit(uniform_noise.shape());
    for (int64_t i = 0; i < noise_logit.numel(); ++i) noise_logit[i] = logit(uniform_noise[i]);
    Value z = ag::add(t, logit_q, t.constant(noise_logit));
    Value s = ag::sigmoid_(t, ag::mul_scalar(t, z, T(1) / tau));
    return ag::clamp(t, s, static_cast<T>(kProbEps), static_cast<T>(1.0 - kProbEps));
}

}  // namespace pvae::dist

#endif
