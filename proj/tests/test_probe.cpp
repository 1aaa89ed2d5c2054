// Probe construction, freeze semantics, SGD training, and the PSNR/SSIM
// metric oracles.

#include <gtest/gtest.h>

#include "pvae/probe.hpp"

using namespace pvae;

namespace {

ModelConfig paper_cfg(int side) {
    ModelConfig cfg;
    cfg.height = cfg.width = side;
    return cfg;  // d_e = 128
}

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.n_parts = 2;
    cfg.d_p = 2;
    cfg.d_e = 8;
    cfg.height = cfg.width = 32;
    return cfg;
}

data::Dataset labeled_synth(int count, uint64_t seed) {
    data::SynthSpec spec;
    spec.count = count;
    spec.motif_count = 3;
    spec.motifs_per_image = 1;
    spec.seed = seed;
    return data::make_synthetic(spec).data;
}

int64_t trainable_count(const ParamStore<float>& store) {
    return store.trainable_scalar_count();
}

}  // namespace

TEST(Classifier, HeadShapesMatchTheTablePresets) {
    probe::ProbeConfig pc;
    pc.num_classes = 100;
    auto clf = probe::build_classifier_random<float>(paper_cfg(32), pc, 1);
    EXPECT_EQ(clf.feature_dim(), 2048);  // 4x4x128
    EXPECT_EQ(clf.params().at("head.0.w").value.shape(), (Shape{2048, 512}));
    EXPECT_EQ(clf.params().at("head.2.w").value.shape(), (Shape{512, 100}));

    probe::ProbeConfig pc67;
    pc67.num_classes = 67;
    auto clf67 = probe::build_classifier_random<float>(paper_cfg(64), pc67, 1);
    EXPECT_EQ(clf67.feature_dim(), 8192);  // 8x8x128
    EXPECT_EQ(clf67.params().at("head.0.w").value.shape(), (Shape{8192, 512}));
    EXPECT_EQ(clf67.params().at("head.2.w").value.shape(), (Shape{512, 67}));
}

TEST(Classifier, FreezeLevelsNestMonotonically) {
    ModelConfig mc = tiny_cfg();
    auto count_for = [&](probe::FreezeLevel f) {
        probe::ProbeConfig pc;
        pc.num_classes = 5;
        pc.freeze = f;
        auto clf = probe::build_classifier_random<float>(mc, pc, 2);
        return trainable_count(clf.params());
    };
    int64_t c1 = count_for(probe::FreezeLevel::conv1);
    int64_t c13 = count_for(probe::FreezeLevel::conv1_3);
    int64_t c15 = count_for(probe::FreezeLevel::conv1_5);
    EXPECT_GT(c1, c13);
    EXPECT_GT(c13, c15);

    // conv1_5 leaves exactly the head trainable.
    probe::ProbeConfig pc;
    pc.num_classes = 5;
    pc.freeze = probe::FreezeLevel::conv1_5;
    auto clf = probe::build_classifier_random<float>(mc, pc, 2);
    for (auto& [name, e] : clf.params().entries()) {
        bool is_head = name.rfind("head.", 0) == 0;
        if (e.trainable) EXPECT_TRUE(is_head) << name;
        if (is_head) EXPECT_TRUE(e.trainable) << name;
    }
}

TEST(Classifier, ChecksRejectMissingTrunk) {
    probe::ProbeConfig pc;
    pc.num_classes = 3;
    std::map<std::string, Tensor<float>> empty;
    EXPECT_THROW((probe::Classifier<float>(tiny_cfg(), empty, pc)), Error);
}

TEST(TrainProbe, FrozenParametersAreBitIdentical) {
    ModelConfig mc = tiny_cfg();
    data::Dataset train_ds = labeled_synth(60, 1);
    data::Dataset test_ds = labeled_synth(30, 2);
    for (auto freeze : {probe::FreezeLevel::conv1, probe::FreezeLevel::conv1_3,
                        probe::FreezeLevel::conv1_5}) {
        probe::ProbeConfig pc;
        pc.num_classes = train_ds.num_classes;
        pc.freeze = freeze;
        pc.epochs = 2;
        pc.batch_size = 16;
        auto clf = probe::build_classifier_random<float>(mc, pc, 3);
        // Frozen layers: weights, scale/shift, and batchnorm running stats
        // must all stay untouched (the frozen prefix runs in eval mode).
        auto is_frozen_name = [&](const std::string& k) {
            for (size_t i = 0; i < probe::frozen_layer_end(freeze); ++i)
                if (k.rfind("trunk." + std::to_string(i) + ".", 0) == 0) return true;
            return false;
        };
        std::map<std::string, Tensor<float>> before;
        for (auto& [k, e] : clf.params().entries())
            if (is_frozen_name(k)) before.emplace(k, e.value);
        ASSERT_FALSE(before.empty());
        probe::EvalReport rep = probe::train_probe(clf, train_ds, test_ds);
        EXPECT_GE(rep.top5, rep.top1);
        for (auto& [k, snap] : before) {
            const Tensor<float>& now = clf.params().at(k).value;
            for (int64_t i = 0; i < snap.numel(); ++i)
                ASSERT_EQ(snap[i], now[i]) << k << " changed under freeze "
                                           << probe::to_string(freeze);
        }
    }
}

TEST(TrainProbe, RandomLabelsScoreAtChanceOnHeldOut) {
    ModelConfig mc = tiny_cfg();
    data::Dataset train_ds = labeled_synth(160, 3);
    data::Dataset test_ds = labeled_synth(400, 4);
    std::mt19937_64 rng(5);
    std::uniform_int_distribution<int> lab(0, train_ds.num_classes - 1);
    for (int& l : train_ds.labels) l = lab(rng);  // sever image-label link
    for (int& l : test_ds.labels) l = lab(rng);

    probe::ProbeConfig pc;
    pc.num_classes = train_ds.num_classes;  // 3 classes
    pc.epochs = 4;
    pc.batch_size = 32;
    auto clf = probe::build_classifier_random<float>(mc, pc, 6);
    probe::EvalReport rep = probe::train_probe(clf, train_ds, test_ds);
    double chance = 100.0 / pc.num_classes;
    double mc_sd = 100.0 * std::sqrt((1.0 / 3) * (2.0 / 3) / 400.0);
    EXPECT_NEAR(rep.top1, chance, 5.0 * mc_sd + 2.0);
}

TEST(TrainProbe, DeterministicGivenSeed) {
    ModelConfig mc = tiny_cfg();
    data::Dataset train_ds = labeled_synth(60, 7);
    data::Dataset test_ds = labeled_synth(40, 8);
    auto run = [&] {
        probe::ProbeConfig pc;
        pc.num_classes = train_ds.num_classes;
        pc.epochs = 3;
        pc.batch_size = 16;
        pc.seed = 9;
        auto clf = probe::build_classifier_random<float>(mc, pc, 10);
        return probe::train_probe(clf, train_ds, test_ds);
    };
    probe::EvalReport a = run(), b = run();
    EXPECT_EQ(a.top1, b.top1);
    EXPECT_EQ(a.top5, b.top5);
    EXPECT_EQ(a.per_class, b.per_class);
}

TEST(TrainProbe, StepDecaySchedule) {
    // lr halves by x0.1 every `decay_every` epochs; verify the exponent math.
    probe::ProbeConfig pc;
    pc.lr = 1e-2;
    pc.decay_every = 30;
    pc.decay_factor = 0.1;
    auto lr_at = [&](int epoch) {
        return pc.lr * std::pow(pc.decay_factor, epoch / pc.decay_every);
    };
    EXPECT_DOUBLE_EQ(lr_at(0), 1e-2);
    EXPECT_DOUBLE_EQ(lr_at(29), 1e-2);
    EXPECT_DOUBLE_EQ(lr_at(30), 1e-3);
    EXPECT_DOUBLE_EQ(lr_at(60), 1e-4);
}

TEST(Psnr, CapSymmetryAndClosedForm) {
    std::mt19937_64 rng(11);
    Tensor<float> x = rand_uniform<float>({16, 16, 3}, rng, -1.0f, 1.0f);
    EXPECT_DOUBLE_EQ(probe::psnr(x, x), 100.0);  // documented cap

    // Shift by 0.2 in [-1,1] = 0.1 on the unit range: MSE 0.01 -> 20 dB.
    Tensor<float> y = Tensor<float>::full({8, 8, 3}, 0.0f);
    Tensor<float> y2 = Tensor<float>::full({8, 8, 3}, 0.2f);
    EXPECT_NEAR(probe::psnr(y, y2), 20.0, 1e-6);
    EXPECT_DOUBLE_EQ(probe::psnr(y, y2), probe::psnr(y2, y));
}

TEST(Ssim, IdentityAndAnticorrelation) {
    std::mt19937_64 rng(12);
    Tensor<float> x = rand_uniform<float>({24, 24, 3}, rng, -1.0f, 1.0f);
    EXPECT_NEAR(probe::ssim(x, x), 1.0, 1e-9);

    Tensor<float> neg = x;
    for (int64_t i = 0; i < neg.numel(); ++i) neg[i] = -neg[i];
    EXPECT_LT(probe::ssim(x, neg), 0.0);  // anticorrelated structure
}

namespace {

// Independent reference: direct per-window double loops with an explicitly
// normalized 2D Gaussian, no separable filtering.
double ssim_reference(const Tensor<float>& x, const Tensor<float>& y) {
    const int H = x.dim(0), W = x.dim(1), R = 5;
    const double sigma = 1.5, C1 = 1e-4, C2 = 9e-4;
    auto lum = [&](const Tensor<float>& img, int yy, int xx) {
        const float* p = img.data() + ((int64_t)yy * W + xx) * 3;
        return 0.299 * (p[0] + 1.0) / 2.0 + 0.587 * (p[1] + 1.0) / 2.0 +
               0.114 * (p[2] + 1.0) / 2.0;
    };
    double wsum = 0;
    std::vector<double> w((2 * R + 1) * (2 * R + 1));
    for (int dy = -R; dy <= R; ++dy)
        for (int dx = -R; dx <= R; ++dx) {
            double v = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
            w[(dy + R) * (2 * R + 1) + dx + R] = v;
            wsum += v;
        }
    for (double& v : w) v /= wsum;
    double acc = 0;
    int count = 0;
    for (int cy = R; cy < H - R; ++cy)
        for (int cx = R; cx < W - R; ++cx) {
            double ma = 0, mb = 0, maa = 0, mbb = 0, mab = 0;
            for (int dy = -R; dy <= R; ++dy)
                for (int dx = -R; dx <= R; ++dx) {
                    double wv = w[(dy + R) * (2 * R + 1) + dx + R];
                    double a = lum(x, cy + dy, cx + dx);
                    double b = lum(y, cy + dy, cx + dx);
                    ma += wv * a;
                    mb += wv * b;
                    maa += wv * a * a;
                    mbb += wv * b * b;
                    mab += wv * a * b;
                }
            double va = maa - ma * ma, vb = mbb - mb * mb, cab = mab - ma * mb;
            acc += ((2 * ma * mb + C1) * (2 * cab + C2)) /
                   ((ma * ma + mb * mb + C1) * (va + vb + C2));
            ++count;
        }
    return acc / count;
}

double psnr_reference(const Tensor<float>& x, const Tensor<float>& y) {
    double mse = 0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        double d = (x[i] + 1.0) / 2.0 - (y[i] + 1.0) / 2.0;
        mse += d * d;
    }
    mse /= static_cast<double>(x.numel());
    return mse <= 0 ? 100.0 : std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

}  // namespace

TEST(Metrics, MatchIndependentReferenceOnRandomPairs) {
    std::mt19937_64 rng(13);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor<float> x = rand_uniform<float>({16, 16, 3}, rng, -1.0f, 1.0f);
        Tensor<float> y = rand_uniform<float>({16, 16, 3}, rng, -1.0f, 1.0f);
        EXPECT_NEAR(probe::ssim(x, y), ssim_reference(x, y), 1e-6);
        EXPECT_NEAR(probe::psnr(x, y), psnr_reference(x, y), 1e-6);
    }
}

TEST(EvalReport, SerializationSmoke) {
    probe::EvalReport rep;
    rep.top1 = 31.25;
    rep.top5 = 75.0;
    rep.per_class = {50.0, 12.5};
    rep.config_echo = "freeze=conv1_5";
    std::string text = rep.to_text();
    EXPECT_NE(text.find("top1 31.25%"), std::string::npos);
    auto path = std::filesystem::temp_directory_path() / "pvae_eval_report.csv";
    rep.to_csv(path);
    std::ifstream f(path);
    std::string line;
    std::getline(f, line);
    EXPECT_EQ(line, "metric,value");
    std::filesystem::remove(path);
}
