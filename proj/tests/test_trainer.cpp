// Optimization loop: ADAM against a scalar reference, determinism contracts,
// checkpoint round trips, and save/resume equivalence.

#include <gtest/gtest.h>

#include "pvae/trainer.hpp"

using namespace pvae;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("pvae_train_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.n_parts = 2;
    cfg.d_p = 2;
    cfg.d_e = 8;
    cfg.height = cfg.width = 32;
    return cfg;
}

data::Dataset tiny_dataset(int count = 48) {
    data::SynthSpec spec;
    spec.count = count;
    spec.motif_count = 2;
    spec.motifs_per_image = 1;
    return data::make_synthetic(spec).data;
}

train::TrainConfig tiny_train(int epochs) {
    train::TrainConfig cfg;
    cfg.epochs = epochs;
    cfg.batch_size = 16;
    cfg.seed = 5;
    return cfg;
}

}  // namespace

TEST(Adam, MatchesScalarReference) {
    // Ten-line scalar ADAM reference, run over a fixed gradient sequence.
    std::vector<double> grads{1.0, -0.5, 0.25, 2.0, -1.0};
    const double lr = 1e-4, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    double theta_ref = 0.7, m = 0, v = 0;
    for (size_t t = 1; t <= grads.size(); ++t) {
        double g = grads[t - 1];
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        double mhat = m / (1 - std::pow(b1, static_cast<double>(t)));
        double vhat = v / (1 - std::pow(b2, static_cast<double>(t)));
        theta_ref -= lr * mhat / (std::sqrt(vhat) + eps);
    }

    ParamStore<double> store;
    store.add("theta", Tensor<double>::scalar(0.7));
    train::AdamState<double> state;
    for (size_t t = 1; t <= grads.size(); ++t) {
        store.at("theta").grad = Tensor<double>::scalar(grads[t - 1]);
        train::adam_step(store, state, lr, b1, b2, eps, static_cast<int64_t>(t));
    }
    EXPECT_NEAR(store.at("theta").value[0], theta_ref, 1e-15);

    // First-step magnitude sanity: |delta| ~ lr for g=1 at t=1.
    ParamStore<double> s2;
    s2.add("w", Tensor<double>::scalar(0.0));
    s2.at("w").grad = Tensor<double>::scalar(1.0);
    train::AdamState<double> st2;
    train::adam_step(s2, st2, 1e-4, b1, b2, eps, 1);
    EXPECT_NEAR(s2.at("w").value[0], -1e-4, 1e-9);
}

TEST(Adam, ZeroGradLeavesParamsAndDecaysMoments) {
    ParamStore<double> store;
    store.add("w", Tensor<double>::scalar(1.5));
    train::AdamState<double> state;
    store.at("w").grad = Tensor<double>::scalar(0.0);
    train::adam_step(store, state, 1e-3, 0.9, 0.999, 1e-8, 1);
    EXPECT_DOUBLE_EQ(store.at("w").value[0], 1.5);
    EXPECT_DOUBLE_EQ(state.m.at("w")[0], 0.0);

    // Prime a moment, then decay it with a zero gradient.
    store.at("w").grad = Tensor<double>::scalar(2.0);
    train::adam_step(store, state, 0.0, 0.9, 0.999, 1e-8, 2);
    double m_before = state.m.at("w")[0];
    store.at("w").grad = Tensor<double>::scalar(0.0);
    train::adam_step(store, state, 0.0, 0.9, 0.999, 1e-8, 3);
    EXPECT_DOUBLE_EQ(state.m.at("w")[0], 0.9 * m_before);
}

TEST(Adam, PureGivenIdenticalInputs) {
    auto run = [] {
        ParamStore<double> store;
        store.add("w", Tensor<double>({3}, std::vector<double>{1.0, -2.0, 0.5}));
        store.at("w").grad = Tensor<double>({3}, std::vector<double>{0.3, 0.1, -0.2});
        train::AdamState<double> state;
        train::adam_step(store, state, 1e-2, 0.9, 0.999, 1e-8, 1);
        return store.at("w").value;
    };
    Tensor<double> a = run(), b = run();
    for (int i = 0; i < 3; ++i) EXPECT_EQ(a[i], b[i]);
}

TEST(Adam, SkipsFrozenParameters) {
    ParamStore<double> store;
    store.add("w", Tensor<double>::scalar(1.0));
    store.add("frozen", Tensor<double>::scalar(2.0), /*trainable=*/false);
    store.at("w").grad = Tensor<double>::scalar(1.0);
    train::AdamState<double> state;
    train::adam_step(store, state, 1e-2, 0.9, 0.999, 1e-8, 1);
    EXPECT_DOUBLE_EQ(store.at("frozen").value[0], 2.0);
    EXPECT_NE(store.at("w").value[0], 1.0);
}

TEST(Train, ZeroLearningRateIsANullUpdate) {
    ModelConfig mc = tiny_model();
    PatchVaeModel<float> model(mc, 3);
    std::map<std::string, Tensor<float>> before;
    for (auto& [k, e] : model.params().entries())
        if (e.trainable) before.emplace(k, e.value);
    data::Dataset ds = tiny_dataset();
    train::TrainConfig tc = tiny_train(1);
    tc.lr = 0.0;
    train::TrainState<float> state;
    train::train(model, ds, tc, state);
    for (auto& [k, e] : model.params().entries()) {
        if (!e.trainable) continue;
        for (int64_t i = 0; i < e.value.numel(); ++i)
            ASSERT_EQ(e.value[i], before.at(k)[i]) << k;
    }
}

TEST(Train, FixedSeedReproducesHistoryBitwise) {
    data::Dataset ds = tiny_dataset();
    auto run = [&] {
        PatchVaeModel<float> model(tiny_model(), 3);
        train::TrainState<float> state;
        train::train(model, ds, tiny_train(2), state);
        return state.step_history;
    };
    auto h1 = run(), h2 = run();
    ASSERT_EQ(h1.size(), h2.size());
    for (size_t i = 0; i < h1.size(); ++i) {
        EXPECT_EQ(h1[i].step, h2[i].step);
        EXPECT_EQ(h1[i].recon, h2[i].recon);
        EXPECT_EQ(h1[i].kl_occ, h2[i].kl_occ);
        EXPECT_EQ(h1[i].kl_app, h2[i].kl_app);
        EXPECT_EQ(h1[i].tau, h2[i].tau);
    }
}

TEST(Train, StepCountAndTemperatureTrace) {
    data::Dataset ds = tiny_dataset(50);  // 50/16 -> 4 batches per epoch
    PatchVaeModel<float> model(tiny_model(), 3);
    train::TrainConfig tc = tiny_train(3);
    tc.schedule = {1.0, 1e-2, 0.05};
    train::TrainState<float> state;
    train::train(model, ds, tc, state);
    EXPECT_EQ(state.global_step, 3 * 4);
    ASSERT_EQ(state.step_history.size(), 12u);
    for (const auto& row : state.step_history)
        EXPECT_DOUBLE_EQ(row.tau, dist::temperature_at(tc.schedule, row.step));
}

TEST(Train, BetaVaeLoopRuns) {
    ModelConfig mc = tiny_model();
    mc.kind = ModelKind::betavae;
    mc.z_dim = 8;
    BetaVaeModel<float> model(mc, 4);
    data::Dataset ds = tiny_dataset(32);
    train::TrainState<float> state;
    train::train(model, ds, tiny_train(1), state);
    EXPECT_EQ(state.global_step, 2);
    for (const auto& row : state.step_history) EXPECT_EQ(row.kl_occ, 0.0);
}

TEST(Train, NonFiniteLossHaltsWithDiagnostics) {
    TempDir tmp;
    ModelConfig mc = tiny_model();
    PatchVaeModel<float> model(mc, 3);
    model.params().at("dec.0.w").value.fill(std::numeric_limits<float>::quiet_NaN());
    data::Dataset ds = tiny_dataset(16);
    train::TrainConfig tc = tiny_train(1);
    tc.checkpoint_dir = (tmp.path / "ckpts").string();
    train::TrainState<float> state;
    try {
        train::train(model, ds, tc, state);
        FAIL() << "expected divergence";
    } catch (const train::TrainDiverged& e) {
        EXPECT_EQ(e.batch_index, 0);
        bool found = false;
        for (auto& entry : fs::directory_iterator(tmp.path / "ckpts"))
            found = found || entry.path().filename().string().rfind("diverged", 0) == 0;
        EXPECT_TRUE(found) << "diagnostic checkpoint missing";
    }
}

TEST(Checkpoint, RoundTripIsBitExact) {
    TempDir tmp;
    ModelConfig mc = tiny_model();
    PatchVaeModel<float> model(mc, 7);
    data::Dataset ds = tiny_dataset(32);
    train::TrainState<float> state;
    train::train(model, ds, tiny_train(1), state);
    fs::path file = tmp.path / "model.ckpt";
    train::save_checkpoint(file, mc, model.params(), &state);

    auto cp = train::load_checkpoint<float>(file);
    EXPECT_EQ(cp.config.n_parts, mc.n_parts);
    EXPECT_EQ(cp.state.global_step, state.global_step);
    for (auto& [name, e] : model.params().entries()) {
        const Tensor<float>& loaded = cp.arrays.at(name);
        ASSERT_EQ(loaded.shape(), e.value.shape()) << name;
        for (int64_t i = 0; i < loaded.numel(); ++i) ASSERT_EQ(loaded[i], e.value[i]) << name;
    }
    for (auto& [name, m] : state.adam.m) {
        const Tensor<float>& loaded = cp.state.adam.m.at(name);
        for (int64_t i = 0; i < loaded.numel(); ++i) ASSERT_EQ(loaded[i], m[i]);
    }
    ASSERT_EQ(cp.state.step_history.size(), state.step_history.size());
    for (size_t i = 0; i < state.step_history.size(); ++i)
        EXPECT_EQ(cp.state.step_history[i].recon, state.step_history[i].recon);
}

TEST(Checkpoint, WrongMagicAndCorruptionAreRejected) {
    TempDir tmp;
    fs::path bad = tmp.path / "bad.ckpt";
    std::ofstream(bad, std::ios::binary) << "NOTPVAE_____________";
    EXPECT_THROW(train::load_checkpoint<float>(bad), Error);

    ModelConfig mc = tiny_model();
    PatchVaeModel<float> model(mc, 7);
    fs::path good = tmp.path / "good.ckpt";
    train::save_checkpoint<float>(good, mc, model.params(), nullptr);
    // flip one payload byte near the end (before the trailing crc)
    std::fstream f(good, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-16, std::ios::end);
    char c;
    f.read(&c, 1);
    f.seekp(-16, std::ios::end);
    c ^= 0x40;
    f.write(&c, 1);
    f.close();
    try {
        train::load_checkpoint<float>(good);
        FAIL() << "expected checksum failure";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("checksum"), std::string::npos) << e.what();
    }
}

TEST(Checkpoint, DatasetContainerIsNotACheckpoint) {
    TempDir tmp;
    data::SynthSpec spec;
    spec.count = 2;
    data::SynthResult r = data::make_synthetic(spec);
    data::save_dataset(r.data, std::nullopt, {}, tmp.path / "ds.pvae");
    EXPECT_THROW(train::load_checkpoint<float>(tmp.path / "ds.pvae"), Error);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
    TempDir tmp;
    data::Dataset ds = tiny_dataset(48);
    train::TrainConfig tc = tiny_train(4);

    // Straight-through run.
    PatchVaeModel<float> straight(tiny_model(), 11);
    train::TrainState<float> full_state;
    train::train(straight, ds, tc, full_state);

    // Interrupted at epoch 2, checkpointed, resumed in fresh objects.
    PatchVaeModel<float> first(tiny_model(), 11);
    train::TrainState<float> state_a;
    train::TrainConfig tc_half = tc;
    tc_half.epochs = 2;
    train::train(first, ds, tc_half, state_a);
    fs::path file = tmp.path / "half.ckpt";
    train::save_checkpoint(file, first.config(), first.params(), &state_a);

    auto cp = train::load_checkpoint<float>(file);
    PatchVaeModel<float> resumed = train::patch_model_from_checkpoint(cp);
    train::TrainState<float> state_b = cp.state;
    train::train(resumed, ds, tc, state_b);

    ASSERT_EQ(state_b.step_history.size(), full_state.step_history.size());
    for (size_t i = 0; i < full_state.step_history.size(); ++i) {
        EXPECT_EQ(state_b.step_history[i].recon, full_state.step_history[i].recon) << i;
        EXPECT_EQ(state_b.step_history[i].kl_occ, full_state.step_history[i].kl_occ) << i;
        EXPECT_EQ(state_b.step_history[i].tau, full_state.step_history[i].tau) << i;
    }
    // Final parameters coincide bitwise as well.
    for (auto& [name, e] : straight.params().entries()) {
        const Tensor<float>& other = resumed.params().at(name).value;
        for (int64_t i = 0; i < e.value.numel(); ++i) ASSERT_EQ(e.value[i], other[i]) << name;
    }
}

TEST(HistoryCsv, RoundTripAndErrors) {
    TempDir tmp;
    std::vector<train::MetricRow> rows{{0, 0.5, 1.25, 0.125, 1.0},
                                       {1, 0.25, 1.0, 0.1, 0.99997}};
    fs::path file = tmp.path / "history.csv";
    train::write_history_csv(file, rows);
    auto back = train::read_history_csv(file);
    ASSERT_EQ(back.size(), 2u);
    for (size_t i = 0; i < rows.size(); ++i) {
        EXPECT_EQ(back[i].step, rows[i].step);
        EXPECT_EQ(back[i].recon, rows[i].recon);
        EXPECT_EQ(back[i].tau, rows[i].tau);
    }

    std::ofstream(tmp.path / "bad_header.csv") << "nope\n0,1,2,3,4\n";
    EXPECT_THROW(train::read_history_csv(tmp.path / "bad_header.csv"), Error);

    std::ofstream(tmp.path / "bad_row.csv")
        << "step,recon,kl_occ,kl_app,tau\n0,0.1,0.2,0.3,0.4\ngarbage,row\n";
    try {
        train::read_history_csv(tmp.path / "bad_row.csv");
        FAIL() << "expected malformed-line error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    }
}
