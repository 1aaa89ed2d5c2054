// Latent primitives: samplers, closed-form KL divergences (checked against
// Monte-Carlo estimates), hardening, and the temperature schedule.

#include <gtest/gtest.h>

#include "pvae/certify.hpp"
#include "pvae/distributions.hpp"

using namespace pvae;

TEST(Gaussian, SamplePassThroughAndMean) {
    std::mt19937_64 rng(1);
    Tensor<double> n = randn<double>({4, 3}, rng);
    dist::GaussianParams<double> std_normal{Tensor<double>::zeros({4, 3}),
                                            Tensor<double>::zeros({4, 3})};
    Tensor<double> s = dist::sample_gaussian(std_normal, n);
    for (int64_t i = 0; i < n.numel(); ++i) EXPECT_DOUBLE_EQ(s[i], n[i]);

    dist::GaussianParams<double> g{rand_uniform<double>({4, 3}, rng, -1.0, 1.0),
                                   rand_uniform<double>({4, 3}, rng, -1.0, 1.0)};
    Tensor<double> zero = Tensor<double>::zeros({4, 3});
    Tensor<double> mean_sample = dist::sample_gaussian(g, zero);
    for (int64_t i = 0; i < zero.numel(); ++i) EXPECT_DOUBLE_EQ(mean_sample[i], g.mu[i]);
}

TEST(Gaussian, ClosedFormSampleValue) {
    // mu=1, logvar=2 ln 2 (sd 2), noise=1 -> 3.
    dist::GaussianParams<double> g{Tensor<double>::scalar(1.0),
                                   Tensor<double>::scalar(2.0 * std::log(2.0))};
    Tensor<double> s = dist::sample_gaussian(g, Tensor<double>::scalar(1.0));
    EXPECT_NEAR(s[0], 3.0, 1e-12);
}

TEST(Gaussian, KlClosedFormValues) {
    dist::GaussianParams<double> zero{Tensor<double>::scalar(0.0), Tensor<double>::scalar(0.0)};
    EXPECT_DOUBLE_EQ(dist::kl_gaussian_std(zero), 0.0);
    dist::GaussianParams<double> unit_mean{Tensor<double>::scalar(1.0),
                                           Tensor<double>::scalar(0.0)};
    EXPECT_NEAR(dist::kl_gaussian_std(unit_mean), 0.5, 1e-12);
}

// Monte-Carlo oracle: E_q[log q(z) - log p(z)] over draws from q.
static void expect_gaussian_kl_matches_mc(double mu, double logvar, std::mt19937_64& rng) {
    dist::GaussianParams<double> g{Tensor<double>::scalar(mu), Tensor<double>::scalar(logvar)};
    double closed = dist::kl_gaussian_std(g);
    const int n = 100000;
    double var = std::exp(logvar);
    double sd = std::sqrt(var);
    std::normal_distribution<double> d(0.0, 1.0);
    double sum = 0, sum2 = 0;
    for (int i = 0; i < n; ++i) {
        double z = mu + sd * d(rng);
        double log_q = -0.5 * std::log(2 * M_PI * var) - (z - mu) * (z - mu) / (2 * var);
        double log_p = -0.5 * std::log(2 * M_PI) - z * z / 2;
        double v = log_q - log_p;
        sum += v;
        sum2 += v * v;
    }
    double mean = sum / n;
    double se = std::sqrt(std::max(0.0, sum2 / n - mean * mean) / n);
    EXPECT_LT(std::abs(closed - mean), 3 * se + 1e-9)
        << "mu=" << mu << " logvar=" << logvar << " closed=" << closed << " mc=" << mean;
}

TEST(Gaussian, KlMatchesMonteCarloOracle) {
    std::mt19937_64 rng(1234);
    std::uniform_real_distribution<double> um(-2.0, 2.0), ul(-2.0, 1.5);
    for (int trial = 0; trial < 20; ++trial) expect_gaussian_kl_matches_mc(um(rng), ul(rng), rng);
}

TEST(Bernoulli, KlClosedFormValues) {
    dist::BernoulliParams<double> matching{Tensor<double>::full({5}, 0.25)};
    Tensor<double> kl = dist::kl_bernoulli(matching, 0.25);
    for (int64_t i = 0; i < kl.numel(); ++i) EXPECT_NEAR(kl[i], 0.0, 1e-12);

    dist::BernoulliParams<double> q{Tensor<double>::scalar(0.5)};
    double expected = 0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0);  // ~0.14384
    EXPECT_NEAR(dist::kl_bernoulli(q, 0.25)[0], expected, 1e-12);
    EXPECT_NEAR(expected, 0.14384, 1e-4);
}

TEST(Bernoulli, KlNonnegativeOnRandomPairs) {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> u(0.001, 0.999);
    for (int i = 0; i < 1000; ++i) {
        dist::BernoulliParams<double> q{Tensor<double>::scalar(u(rng))};
        EXPECT_GE(dist::kl_bernoulli(q, u(rng))[0], 0.0);
    }
}

TEST(Bernoulli, KlMatchesMonteCarloOracle) {
    std::mt19937_64 rng(4321);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    for (int trial = 0; trial < 20; ++trial) {
        double qp = u(rng), pp = u(rng);
        dist::BernoulliParams<double> q{Tensor<double>::scalar(qp)};
        double closed = dist::kl_bernoulli(q, pp)[0];
        const int n = 100000;
        std::bernoulli_distribution draw(qp);
        double sum = 0, sum2 = 0;
        for (int i = 0; i < n; ++i) {
            bool z = draw(rng);
            double v = z ? std::log(qp / pp) : std::log((1 - qp) / (1 - pp));
            sum += v;
            sum2 += v * v;
        }
        double mean = sum / n;
        double se = std::sqrt(std::max(0.0, sum2 / n - mean * mean) / n);
        EXPECT_LT(std::abs(closed - mean), 3 * se + 1e-9) << "q=" << qp << " p=" << pp;
    }
}

TEST(RelaxedBernoulli, SymmetryAndZeroNoise) {
    dist::BernoulliParams<double> half{Tensor<double>::scalar(0.5)};
    for (double tau : {0.1, 1.0, 5.0}) {
        Tensor<double> s =
            dist::sample_relaxed_bernoulli(half, tau, Tensor<double>::scalar(0.5));
        EXPECT_NEAR(s[0], 0.5, 1e-12) << tau;
    }
    // u = 0.5 contributes zero logit noise: sigmoid(logit(q)) = q.
    dist::BernoulliParams<double> q{Tensor<double>::scalar(0.8)};
    Tensor<double> s = dist::sample_relaxed_bernoulli(q, 1.0, Tensor<double>::scalar(0.5));
    EXPECT_NEAR(s[0], 0.8, 1e-9);
}

TEST(RelaxedBernoulli, LowTemperatureLimitIsHard) {
    // tau -> 0+ approaches the indicator of logit(q)+logit(u) > 0, up to the
    // eps clamp that keeps samples inside the open interval.
    dist::BernoulliParams<double> q{Tensor<double>::scalar(0.7)};
    Tensor<double> up = dist::sample_relaxed_bernoulli(q, 1e-4, Tensor<double>::scalar(0.6));
    Tensor<double> down = dist::sample_relaxed_bernoulli(q, 1e-4, Tensor<double>::scalar(0.1));
    EXPECT_GT(up[0], 0.999);   // logit(q)+logit(u) > 0
    EXPECT_LT(down[0], 0.001); // logit(q)+logit(u) < 0
}

TEST(RelaxedBernoulli, SamplesInOpenUnitIntervalAndMeanApproachesQ) {
    std::mt19937_64 rng(7);
    dist::BernoulliParams<double> q{Tensor<double>::scalar(0.3)};
    const int n = 100000;
    double tau = 0.05;  // low temperature: mean of samples approaches q
    std::uniform_real_distribution<double> u(0.0, 1.0);
    double sum = 0;
    for (int i = 0; i < n; ++i) {
        double uv = std::clamp(u(rng), dist::kProbEps, 1.0 - dist::kProbEps);
        Tensor<double> s = dist::sample_relaxed_bernoulli(q, tau, Tensor<double>::scalar(uv));
        EXPECT_GT(s[0], 0.0);
        EXPECT_LT(s[0], 1.0);
        sum += s[0];
    }
    double mc_err = 3.0 * std::sqrt(0.3 * 0.7 / n) + 1e-3;
    EXPECT_NEAR(sum / n, 0.3, mc_err);
}

TEST(Harden, ThresholdAndTieBreak) {
    dist::BernoulliParams<double> q{
        Tensor<double>({3}, std::vector<double>{0.9, 0.1, 0.5})};
    Tensor<double> h = dist::harden(q, 0.5);
    EXPECT_EQ(h[0], 1.0);
    EXPECT_EQ(h[1], 0.0);
    EXPECT_EQ(h[2], 0.0);  // strict inequality: ties go to 0
}

TEST(Temperature, ScheduleValues) {
    dist::TemperatureSchedule s;  // tau0 1.0, rate 3e-5, floor 0.4
    EXPECT_DOUBLE_EQ(dist::temperature_at(s, 0), 1.0);

    dist::TemperatureSchedule s2{1.0, 3e-5, 1e-3};
    EXPECT_NEAR(dist::temperature_at(s2, 100000), std::exp(-3.0), 1e-12);
    EXPECT_NEAR(std::exp(-3.0), 0.0498, 1e-4);

    dist::TemperatureSchedule s3{1.0, 3e-5, 0.5};
    EXPECT_DOUBLE_EQ(dist::temperature_at(s3, 10000000), 0.5);
}

TEST(Temperature, NonIncreasingAndBounded) {
    dist::TemperatureSchedule s{1.3, 1e-4, 0.3};
    double prev = std::numeric_limits<double>::infinity();
    for (int64_t step = 0; step < 200000; step += 997) {
        double tau = dist::temperature_at(s, step);
        EXPECT_LE(tau, prev);
        EXPECT_GE(tau, s.tau_min);
        prev = tau;
    }
}

TEST(TapeForms, MatchPlainForms) {
    std::mt19937_64 rng(11);
    Tensor<double> mu = rand_uniform<double>({6}, rng, -1.0, 1.0);
    Tensor<double> lv = rand_uniform<double>({6}, rng, -1.0, 1.0);
    Tensor<double> noise = randn<double>({6}, rng);
    Tensor<double> probs = rand_uniform<double>({6}, rng, 0.1, 0.9);
    Tensor<double> u = rand_uniform<double>({6}, rng, 0.05, 0.95);

    Tape<double> t;
    Value vmu = t.constant(mu), vlv = t.constant(lv), vq = t.constant(probs);
    Tensor<double> s_t = t.val(dist::sample_gaussian(t, vmu, vlv, noise));
    Tensor<double> s_p = dist::sample_gaussian(dist::GaussianParams<double>{mu, lv}, noise);
    for (int i = 0; i < 6; ++i) EXPECT_NEAR(s_t[i], s_p[i], 1e-12);

    double kl_t = t.val(dist::kl_gaussian_std(t, vmu, vlv))[0];
    EXPECT_NEAR(kl_t, dist::kl_gaussian_std(dist::GaussianParams<double>{mu, lv}), 1e-12);

    Tensor<double> klb_t = t.val(dist::kl_bernoulli(t, vq, 0.2));
    Tensor<double> klb_p = dist::kl_bernoulli(dist::BernoulliParams<double>{probs}, 0.2);
    for (int i = 0; i < 6; ++i) EXPECT_NEAR(klb_t[i], klb_p[i], 1e-12);

    Tensor<double> rb_t = t.val(dist::sample_relaxed_bernoulli(t, vq, 0.7, u));
    Tensor<double> rb_p =
        dist::sample_relaxed_bernoulli(dist::BernoulliParams<double>{probs}, 0.7, u);
    for (int i = 0; i < 6; ++i) EXPECT_NEAR(rb_t[i], rb_p[i], 1e-12);
}

TEST(Samplers, GradientsPassFiniteDifferenceCheck) {
    auto rep = certify::check_samplers();
    EXPECT_TRUE(rep.report.pass) << rep.report.worst_param() << " " << rep.report.worst();
}
