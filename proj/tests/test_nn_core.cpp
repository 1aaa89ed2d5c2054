// Numeric substrate: tensors, the tape, layer forward/backward, and the
// finite-difference certification harness.

#include <gtest/gtest.h>

#include "pvae/certify.hpp"
#include "pvae/gradcheck.hpp"
#include "pvae/layers.hpp"
#include "pvae/model.hpp"

using namespace pvae;
using nn::LayerSpec;

TEST(Tensor, ShapeChecks) {
    Tensor<float> t({2, 3, 4});
    EXPECT_EQ(t.numel(), 24);
    EXPECT_THROW(Tensor<float>({0, 3}), Error);
    EXPECT_THROW(t.at({2, 0, 0}), Error);
    EXPECT_EQ(t.reshaped({6, 4}).dim(0), 6);
    EXPECT_THROW(t.reshaped({5, 5}), Error);
}

TEST(Autograd, LinearFormGradientIsInput) {
    // loss = sum(w * x)  =>  dloss/dw = x
    ParamStore<double> store;
    std::mt19937_64 rng(1);
    Tensor<double> x = rand_uniform<double>({3, 4}, rng, -2.0, 2.0);
    store.add("w", rand_uniform<double>({3, 4}, rng, -1.0, 1.0));
    Tape<double> t(&store);
    Value loss = ag::sum_all(t, ag::mul(t, t.param("w"), t.constant(x)));
    store.zero_grads();
    t.backward(loss);
    const Tensor<double>& g = store.at("w").grad;
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(g[i], x[i]);
}

TEST(Autograd, ZeroLossHasZeroGradients) {
    ParamStore<double> store;
    std::mt19937_64 rng(2);
    store.add("w", rand_uniform<double>({5}, rng, -1.0, 1.0));
    Tape<double> t(&store);
    Value loss = ag::mul_scalar(t, ag::sum_all(t, t.param("w")), 0.0);
    store.zero_grads();
    t.backward(loss);
    for (int64_t i = 0; i < 5; ++i) EXPECT_EQ(store.at("w").grad[i], 0.0);
}

TEST(Autograd, BackwardOnDetachedValueThrows) {
    Tape<double> t;
    Value c = t.constant(Tensor<double>::scalar(3.0));
    EXPECT_THROW(t.backward(c), Error);
}

TEST(Autograd, MseGradientMatchesFiniteDifferences) {
    // loss = mean((x - xhat)^2) with xhat = w (direct), float64, step 1e-5.
    ParamStore<double> store;
    std::mt19937_64 rng(3);
    Tensor<double> x = rand_uniform<double>({4, 4}, rng, -1.0, 1.0);
    store.add("w", rand_uniform<double>({4, 4}, rng, -1.0, 1.0));
    auto loss_fn = [&](bool with_grad) {
        Tape<double> t(&store);
        Value diff = ag::sub(t, t.param("w"), t.constant(x));
        Value loss = ag::mean_all(t, ag::square(t, diff));
        if (with_grad) t.backward(loss);
        return t.val(loss)[0];
    };
    GradCheckReport rep = finite_difference_check(store, loss_fn);
    EXPECT_TRUE(rep.pass);
    EXPECT_LT(rep.worst(), 1e-4);
}

TEST(Layers, IdentityStackIsBitExact) {
    ParamStore<float> store;
    std::mt19937_64 rng(4);
    nn::LayerStack<float> empty("id", {});
    empty.init(store, 3, rng);
    Tensor<float> x = rand_uniform<float>({2, 5, 5, 3}, rng, -1.0f, 1.0f);
    Tape<float> t(&store);
    Value y = empty.forward(t, store, t.constant(x), nn::Mode::eval());
    const Tensor<float>& yv = t.val(y);
    for (int64_t i = 0; i < x.numel(); ++i) EXPECT_EQ(yv[i], x[i]);
}

TEST(Layers, UnitOneByOneConvPreservesConstantMap) {
    ParamStore<float> store;
    store.add("w", Tensor<float>({1, 1, 1, 1}, std::vector<float>{1.0f}));
    Tensor<float> x = Tensor<float>::full({1, 4, 4, 1}, 0.7f);
    Tape<float> t(&store);
    Value y = nn::conv2d(t, t.constant(x), t.param("w"), std::nullopt, 1, 0);
    const Tensor<float>& yv = t.val(y);
    ASSERT_EQ(yv.shape(), (Shape{1, 4, 4, 1}));
    for (int64_t i = 0; i < yv.numel(); ++i) EXPECT_FLOAT_EQ(yv[i], 0.7f);
}

TEST(Layers, ShapeMismatchNamesTheLayer) {
    ParamStore<float> store;
    std::mt19937_64 rng(5);
    nn::LayerStack<float> stack("stem", {LayerSpec::conv2d(3, 4, 1, 1)});
    stack.init(store, 3, rng);
    Tensor<float> bad = rand_uniform<float>({1, 4, 4, 5}, rng, -1.0f, 1.0f);  // 5 channels
    Tape<float> t(&store);
    try {
        stack.forward(t, store, t.constant(bad), nn::Mode::eval());
        FAIL() << "expected shape error";
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("stem.0"), std::string::npos) << e.what();
    }
}

TEST(Layers, StrideTwoOutputIsCeilHalf) {
    // Appendix paddings: 7x7 stride 2 pad 3, and 3x3 pool stride 2 pad 1.
    for (int in : {7, 8, 9, 15, 16, 32, 33}) {
        EXPECT_EQ(nn::conv_out_extent(in, 7, 2, 3), (in + 1) / 2) << in;
        EXPECT_EQ(nn::conv_out_extent(in, 3, 2, 1), (in + 1) / 2) << in;
    }
}

TEST(Layers, TrunkMapsInputToEighth) {
    for (int side : {32, 64}) {
        ModelConfig cfg;
        cfg.height = cfg.width = side;
        cfg.d_e = 16;  // slim but structurally identical
        PatchVaeModel<float> model(cfg, 9);
        std::mt19937_64 rng(6);
        Tensor<float> x = rand_uniform<float>({1, side, side, 3}, rng, -1.0f, 1.0f);
        Tape<float> t(&model.params());
        Value f = model.encode_trunk(t, t.constant(x), nn::Mode::eval());
        EXPECT_EQ(t.val(f).shape(), (Shape{1, side / 8, side / 8, 16}));
    }
}

TEST(Layers, DeconvDoublesSpatialExtent) {
    EXPECT_EQ(nn::deconv_out_extent(4, 4, 2, 1, 0), 8);
    EXPECT_EQ(nn::deconv_out_extent(8, 4, 2, 1, 0), 16);
    EXPECT_EQ(nn::deconv_out_extent(1, 4, 1, 0, 0), 4);
    EXPECT_EQ(nn::deconv_out_extent(1, 8, 1, 0, 0), 8);
}

TEST(Layers, BatchnormEvalIsDeterministicAffine) {
    ParamStore<float> store;
    std::mt19937_64 rng(7);
    nn::LayerStack<float> stack("bn", {LayerSpec::bn()});
    stack.init(store, 3, rng);
    store.at("bn.0.g").value = Tensor<float>({3}, std::vector<float>{2.0f, 1.0f, 0.5f});
    store.at("bn.0.s").value = Tensor<float>({3}, std::vector<float>{0.1f, -0.2f, 0.0f});
    store.at("bn.0.rm").value = Tensor<float>({3}, std::vector<float>{0.5f, 0.0f, -0.5f});
    store.at("bn.0.rv").value = Tensor<float>({3}, std::vector<float>{4.0f, 1.0f, 0.25f});
    Tensor<float> x = rand_uniform<float>({2, 3, 3, 3}, rng, -1.0f, 1.0f);
    auto run = [&] {
        Tape<float> t(&store);
        return t.val(stack.forward(t, store, t.constant(x), nn::Mode::eval()));
    };
    Tensor<float> y1 = run(), y2 = run();
    for (int64_t i = 0; i < y1.numel(); ++i) EXPECT_EQ(y1[i], y2[i]);
    // affine check on one element
    float eps = 1e-5f;
    float expect = 2.0f * (x[0] - 0.5f) / std::sqrt(4.0f + eps) + 0.1f;
    EXPECT_NEAR(y1[0], expect, 1e-6f);
}

TEST(GradCheck, TwoLayerConvNetPasses) {
    GradCheckReport rep = certify::detail::check_stack(
        {LayerSpec::conv2d(3, 4, 1, 1, true), LayerSpec::relu(), LayerSpec::conv2d(3, 2, 2, 1)},
        {2, 8, 8, 3}, 21, GradCheckOptions{});
    EXPECT_TRUE(rep.pass) << rep.worst_param() << " " << rep.worst();
    EXPECT_LT(rep.worst(), 1e-4);
}

TEST(GradCheck, PlantedFaultIsNamed) {
    ParamStore<double> store;
    std::mt19937_64 rng(8);
    Tensor<double> x = rand_uniform<double>({3, 3}, rng, -1.0, 1.0);
    store.add("good", rand_uniform<double>({3}, rng, -1.0, 1.0));
    store.add("bad", rand_uniform<double>({3, 3}, rng, -1.0, 1.0));
    auto loss_fn = [&](bool with_grad) {
        Tape<double> t(&store);
        Value prod = ag::mul(t, t.param("bad"), t.constant(x));
        Value s1 = ag::sum_all(t, ag::square(t, prod));
        Value s2 = ag::sum_all(t, ag::square(t, t.param("good")));
        Value loss = ag::add(t, s1, s2);
        if (with_grad) {
            t.backward(loss);
            Tensor<double>& g = store.at("bad").grad;  // deliberately corrupted by 2x
            for (int64_t i = 0; i < g.numel(); ++i) g[i] *= 2.0;
        }
        return t.val(loss)[0];
    };
    GradCheckReport rep = finite_difference_check(store, loss_fn);
    EXPECT_FALSE(rep.pass);
    EXPECT_EQ(rep.worst_param(), "bad");
    bool good_ok = false;
    for (auto& p : rep.params)
        if (p.name == "good") good_ok = p.max_rel_err < 1e-4;
    EXPECT_TRUE(good_ok);
}

TEST(GradCheck, ZeroParameterModelIsVacuousPass) {
    ParamStore<double> store;  // nothing trainable
    auto loss_fn = [&](bool) { return 1.5; };
    GradCheckReport rep = finite_difference_check(store, loss_fn);
    EXPECT_TRUE(rep.pass);
    EXPECT_TRUE(rep.params.empty());
}

TEST(GradCheck, NonFiniteLossAborts) {
    ParamStore<double> store;
    std::mt19937_64 rng(9);
    store.add("w", rand_uniform<double>({2}, rng, -1.0, 1.0));
    auto loss_fn = [&](bool) { return std::numeric_limits<double>::quiet_NaN(); };
    EXPECT_THROW(finite_difference_check(store, loss_fn), Error);
}

TEST(GradCheck, EveryLayerKindPasses) {
    auto reports = certify::check_all_layer_kinds();
    for (const auto& r : reports) {
        EXPECT_TRUE(r.report.pass) << r.name << ": worst " << r.report.worst() << " at "
                                   << r.report.worst_param();
    }
}

TEST(Store, GradientMapKeyedByParameterName) {
    ParamStore<double> store;
    std::mt19937_64 rng(10);
    store.add("a", rand_uniform<double>({2}, rng, -1.0, 1.0));
    store.add("b", rand_uniform<double>({3}, rng, -1.0, 1.0), /*trainable=*/false);
    Tape<double> t(&store);
    Value loss = ag::sum_all(t, ag::square(t, t.param("a")));
    store.zero_grads();
    t.backward(loss);
    auto grads = store.gradients();
    EXPECT_EQ(grads.size(), 1u);
    EXPECT_TRUE(grads.count("a"));
    for (int i = 0; i < 2; ++i)
        EXPECT_DOUBLE_EQ(grads.at("a")[i], 2.0 * store.at("a").value[i]);
}
