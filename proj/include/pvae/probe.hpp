#ifndef PVAE_PROBE_HPP
#define PVAE_PROBE_HPP

// Downstream evaluation: a classifier head on top of the pretrained trunk
// with configurable freeze depth, SGD training, top-1/top-5 accuracy, and
// reconstruction quality metrics (PSNR / SSIM).

#include "pvae/trainer.hpp"

namespace pvae::probe {

enum class FreezeLevel { conv1, conv1_3, conv1_5 };

inline std::string to_string(FreezeLevel f) {
    switch (f) {
        case FreezeLevel::conv1: return "conv1";
        case FreezeLevel::conv1_3: return "conv1_3";
        case FreezeLevel::conv1_5: return "conv1_5";
    }
    return "?";
}

inline FreezeLevel freeze_from_string(const std::string& s) {
    if (s == "conv1") return FreezeLevel::conv1;
    if (s == "conv1_3") return FreezeLevel::conv1_3;
    if (s == "conv1_5") return FreezeLevel::conv1_5;
    throw Error("unknown freeze level '" + s + "'");
}

struct ProbeConfig {
    FreezeLevel freeze = FreezeLevel::conv1_5;
    int hidden = 512;
    int num_classes = 0;
    double lr = 1e-2;
    double momentum = 0.9;
    int decay_every = 30;       // epochs
    double decay_factor = 0.1;
    int epochs = 30;
    int batch_size = 128;
    uint64_t seed = 1;
    bool log_progress = false;

    void validate() const {
        PVAE_CHECK(num_classes >= 2, "probe needs num_classes >= 2");
        PVAE_CHECK(hidden >= 1 && epochs >= 1 && batch_size >= 1, "bad probe sizes");
        PVAE_CHECK(lr > 0 && momentum >= 0 && momentum < 1, "bad SGD constants");
        PVAE_CHECK(decay_every >= 1 && decay_factor > 0 && decay_factor <= 1, "bad decay");
    }
};

struct EvalReport {
    double top1 = 0;                 // percent
    double top5 = 0;                 // percent
    std::vector<double> per_class;   // percent per class
    std::string config_echo;

    std::string to_text() const {
        std::ostringstream os;
        os << "top1 " << top1 << "%\ntop5 " << top5 << "%\n" << config_echo << "\n";
        for (size_t c = 0; c < per_class.size(); ++c)
            os << "class " << c << " " << per_class[c] << "%\n";
        return os.str();
    }

    void to_csv(const std::filesystem::path& path) const {
        std::ofstream f(path);
        PVAE_CHECK(f.good(), "cannot open '" << path.string() << "'");
        f << "metric,value\n";
        f << "top1," << top1 << "\ntop5," << top5 << "\n";
        for (size_t c = 0; c < per_class.size(); ++c)
            f << "class_" << c << "," << per_class[c] << "\n";
    }
};

// Trunk layer indices: 0 conv stem, 1 bn, 2 relu, 3 pool, 4-5 first residual
// stage, 6-7 second residual stage, 8 exit pool.
inline size_t frozen_layer_end(FreezeLevel f) {
    switch (f) {
        case FreezeLevel::conv1: return 4;
        case FreezeLevel::conv1_3: return 6;
        case FreezeLevel::conv1_5: return 9;
    }
    return 0;
}

template <typename T>
class Classifier {
public:
    Classifier(const ModelConfig& model_cfg, const std::map<std::string, Tensor<T>>& trunk_arrays,
               const ProbeConfig& probe_cfg)
        : model_cfg_(model_cfg), probe_cfg_(probe_cfg) {
        model_cfg_.validate();
        probe_cfg_.validate();
        std::mt19937_64 rng = substream(probe_cfg_.seed, 0x70726f6265ULL);
        trunk_ = nn::LayerStack<T>("trunk", trunk_specs(model_cfg_.d_e));
        using L = nn::LayerSpec;
        head_ = nn::LayerStack<T>("head", {L::fc(probe_cfg_.hidden, true), L::relu(),
                                           L::fc(probe_cfg_.num_classes, true)});
        trunk_.init(store_, 3, rng);
        feature_dim_ = model_cfg_.grid_cells() * model_cfg_.d_e;
        head_.init(store_, feature_dim_, rng);

        // Copy pretrained trunk parameters (weights, batchnorm state).
        for (auto& [name, e] : store_.entries()) {
            if (name.rfind("trunk.", 0) != 0) continue;
            auto it = trunk_arrays.find(name);
            PVAE_CHECK(it != trunk_arrays.end(), "checkpoint lacks trunk parameter '" << name << "'");
            PVAE_CHECK(it->second.shape() == e.value.shape(),
                       "trunk parameter '" << name << "' shape mismatch");
            e.value = it->second;
        }
        apply_freeze();
    }

    const ModelConfig& model_config() const { return model_cfg_; }
    const ProbeConfig& probe_config() const { return probe_cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }
    int feature_dim() const { return feature_dim_; }
    size_t frozen_end() const { return frozen_layer_end(probe_cfg_.freeze); }
    bool fully_frozen_trunk() const { return frozen_end() >= trunk_.specs().size(); }

    // Frozen prefix runs in eval mode with frozen statistics; the trainable
    // remainder follows `mode`.
    Value features(Tape<T>& t, const Tensor<T>& x, const nn::Mode& mode) {
        PVAE_CHECK(x.ndim() == 4 && x.dim(1) == model_cfg_.height && x.dim(2) == model_cfg_.width,
                   "probe input " << shape_str(x.shape()) << " does not match trunk resolution "
                                  << model_cfg_.height << "x" << model_cfg_.width);
        Value v = t.constant(x);
        size_t cut = frozen_end();
        v = trunk_.forward_range(t, store_, v, nn::Mode::eval(), 0, cut);
        v = trunk_.forward_range(t, store_, v, mode, cut, trunk_.specs().size());
        return nn::flatten(t, v);
    }

    Value logits(Tape<T>& t, Value features_flat, const nn::Mode& mode) {
        return head_.forward(t, store_, features_flat, mode);
    }

    Value logits_from_features(Tape<T>& t, const Tensor<T>& feats, const nn::Mode& mode) {
        return head_.forward(t, store_, t.constant(feats), mode);
    }

private:
    void apply_freeze() {
        size_t cut = frozen_end();
        for (size_t i = 0; i < cut; ++i) {
            std::string prefix = "trunk." + std::to_string(i) + ".";
            for (auto& [name, e] : store_.entries())
                if (name.rfind(prefix, 0) == 0) e.trainable = false;
        }
    }

    ModelConfig model_cfg_;
    ProbeConfig probe_cfg_;
    ParamStore<T> store_;
    nn::LayerStack<T> trunk_, head_;
    int feature_dim_ = 0;
};

// From a saved checkpoint (either model kind: both own a "trunk." stack).
template <typename T>
Classifier<T> build_classifier(const train::CheckpointData<T>& cp, const ProbeConfig& pc) {
    return Classifier<T>(cp.config, cp.arrays, pc);
}

// Fresh randomly initialized trunk, for the random-baseline comparison.
template <typename T>
Classifier<T> build_classifier_random(const ModelConfig& cfg, const ProbeConfig& pc,
                                      uint64_t trunk_seed) {
    ParamStore<T> tmp;
    nn::LayerStack<T> trunk("trunk", trunk_specs(cfg.d_e));
    std::mt19937_64 rng = substream(trunk_seed, 0x72616e64ULL);
    trunk.init(tmp, 3, rng);
    std::map<std::string, Tensor<T>> arrays;
    for (auto& [name, e] : tmp.entries()) arrays.emplace(name, e.value);
    return Classifier<T>(cfg, arrays, pc);
}

namespace detail {

template <typename T>
void sgd_momentum_step(ParamStore<T>& store, std::map<std::string, Tensor<T>>& velocity,
                       double lr, double momentum) {
    for (auto& [name, e] : store.entries()) {
        if (!e.trainable) continue;
        auto it = velocity.find(name);
        if (it == velocity.end())
            it = velocity.emplace(name, Tensor<T>::zeros(e.value.shape())).first;
        Tensor<T>& v = it->second;
        for (int64_t i = 0; i < e.value.numel(); ++i) {
            v[i] = static_cast<T>(momentum) * v[i] + e.grad[i];
            e.value[i] -= static_cast<T>(lr) * v[i];
        }
    }
}

inline void topk_update(const float* row, int C, int label, int k, int64_t& hits) {
    float lv = row[label];
    int better = 0;
    for (int c = 0; c < C; ++c)
        if (row[c] > lv || (row[c] == lv && c < label)) ++better;
    if (better < k) ++hits;
}

}  // namespace detail

// Evaluates logits over a dataset; returns top-1/top-5/per-class accuracy.
template <typename T>
EvalReport evaluate(Classifier<T>& clf, const data::Dataset& ds, int batch_size = 256) {
    EvalReport rep;
    const int C = clf.probe_config().num_classes;
    int64_t top1 = 0, top5 = 0;
    std::vector<int64_t> class_total(C, 0), class_hit(C, 0);
    auto batches = data::minibatches(ds.count(), batch_size, std::nullopt);
    const int k5 = std::min(5, C);
    for (auto& idx : batches) {
        Tensor<T> x = data::gather_images<T>(ds, idx);
        std::vector<int> labels = data::gather_labels(ds, idx);
        Tape<T> t(&clf.params());
        Value f = clf.features(t, x, nn::Mode::eval());
        Value lg = clf.logits(t, f, nn::Mode::eval());
        const Tensor<T>& logits = t.val(lg);
        for (size_t r = 0; r < idx.size(); ++r) {
            std::vector<float> row(C);
            for (int c = 0; c < C; ++c)
                row[c] = static_cast<float>(logits[(int64_t)r * C + c]);
            int label = labels[r];
            PVAE_CHECK(label >= 0 && label < C, "label " << label << " outside probe classes");
            int64_t h1 = 0, h5 = 0;
            detail::topk_update(row.data(), C, label, 1, h1);
            detail::topk_update(row.data(), C, label, k5, h5);
            top1 += h1;
            top5 += h5;
            ++class_total[label];
            class_hit[label] += h1;
        }
    }
    double n = static_cast<double>(ds.count());
    rep.top1 = 100.0 * static_cast<double>(top1) / n;
    rep.top5 = 100.0 * static_cast<double>(top5) / n;
    rep.per_class.resize(C, 0.0);
    for (int c = 0; c < C; ++c)
        if (class_total[c])
            rep.per_class[c] = 100.0 * static_cast<double>(class_hit[c]) /
                               static_cast<double>(class_total[c]);
    return rep;
}

// SGD with momentum and step decay; cross entropy on the head (and any
// unfrozen trunk layers). With a fully frozen trunk the features are
// deterministic, so they are extracted once and reused each epoch.
template <typename T>
EvalReport train_probe(Classifier<T>& clf, const data::Dataset& train_ds,
                       const data::Dataset& test_ds) {
    const ProbeConfig& pc = clf.probe_config();
    pc.validate();
    PVAE_CHECK(train_ds.num_classes <= pc.num_classes && test_ds.num_classes <= pc.num_classes,
               "dataset classes exceed probe head width");

    std::map<std::string, Tensor<T>> velocity;
    Tensor<T> feature_cache;
    const bool cache = clf.fully_frozen_trunk();
    if (cache) {
        feature_cache = Tensor<T>({train_ds.count(), clf.feature_dim()});
        auto batches = data::minibatches(train_ds.count(), 256, std::nullopt);
        int64_t row = 0;
        for (auto& idx : batches) {
            Tensor<T> x = data::gather_images<T>(train_ds, idx);
            Tape<T> t(&clf.params());
            const Tensor<T>& f = t.val(clf.features(t, x, nn::Mode::eval()));
            std::copy_n(f.data(), f.numel(), feature_cache.data() + row * clf.feature_dim());
            row += static_cast<int64_t>(idx.size());
        }
    }

    for (int epoch = 0; epoch < pc.epochs; ++epoch) {
        double lr = pc.lr * std::pow(pc.decay_factor, epoch / pc.decay_every);
        auto batches = data::minibatches(
            train_ds.count(), pc.batch_size,
            splitmix64(pc.seed ^ (0x70726f62ULL + static_cast<uint64_t>(epoch))));
        double epoch_loss = 0;
        for (auto& idx : batches) {
            std::vector<int> labels = data::gather_labels(train_ds, idx);
            Tape<T> t(&clf.params());
            Value lg;
            if (cache) {
                Tensor<T> feats({static_cast<int>(idx.size()), clf.feature_dim()});
                for (size_t r = 0; r < idx.size(); ++r)
                    std::copy_n(feature_cache.data() + (int64_t)idx[r] * clf.feature_dim(),
                                clf.feature_dim(), feats.data() + (int64_t)r * clf.feature_dim());
                lg = clf.logits_from_features(t, feats, nn::Mode::training());
            } else {
                Tensor<T> x = data::gather_images<T>(train_ds, idx);
                Value f = clf.features(t, x, nn::Mode::training());
                lg = clf.logits(t, f, nn::Mode::training());
            }
            Value loss = nn::softmax_cross_entropy(t, lg, labels);
            T lv = t.val(loss)[0];
            PVAE_CHECK(std::isfinite(static_cast<double>(lv)),
                       "probe loss diverged at epoch " << epoch);
            epoch_loss += static_cast<double>(lv);
            clf.params().zero_grads();
            t.backward(loss);
            detail::sgd_momentum_step(clf.params(), velocity, lr, pc.momentum);
        }
        if (pc.log_progress)
            std::cerr << "probe epoch " << epoch + 1 << "/" << pc.epochs << " loss "
                      << epoch_loss / static_cast<double>(batches.size()) << " lr " << lr << "\n";
    }

    EvalReport rep = evaluate(clf, test_ds);
    std::ostringstream echo;
    echo << "freeze=" << to_string(pc.freeze) << " hidden=" << pc.hidden
         << " classes=" << pc.num_classes << " lr=" << pc.lr << " momentum=" << pc.momentum
         << " epochs=" << pc.epochs << " seed=" << pc.seed;
    rep.config_echo = echo.str();
    return rep;
}

// --- reconstruction quality metrics -----------------------------------------

constexpr double kPsnrCap = 100.0;  // returned for (near-)identical inputs

// Inputs in [-1,1] are mapped to [0,1]; PSNR = 10 log10(1 / MSE), capped.
template <typename T>
double psnr(const Tensor<T>& x, const Tensor<T>& xhat) {
    PVAE_CHECK(x.same_shape(xhat), "psnr: shape mismatch");
    double mse = 0;
    for (int64_t i = 0; i < x.numel(); ++i) {
        double a = (static_cast<double>(x[i]) + 1.0) / 2.0;
        double b = (static_cast<double>(xhat[i]) + 1.0) / 2.0;
        mse += (a - b) * (a - b);
    }
    mse /= static_cast<double>(x.numel());
    if (mse <= 0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

inline std::vector<double> gaussian_window(int radius, double sigma) {
    std::vector<double> w(2 * radius + 1);
    double sum = 0;
    for (int i = -radius; i <= radius; ++i) {
        w[i + radius] = std::exp(-(i * i) / (2.0 * sigma * sigma));
        sum += w[i + radius];
    }
    for (double& v : w) v /= sum;
    return w;
}

// Separable valid-mode filtering of a [H,W] map with a symmetric window.
inline std::vector<double> filter_valid(const std::vector<double>& img, int H, int W,
                                        const std::vector<double>& win) {
    int r = static_cast<int>(win.size() / 2);
    int Hv = H - 2 * r, Wv = W - 2 * r;
    std::vector<double> tmp((size_t)H * Wv, 0.0), out((size_t)Hv * Wv, 0.0);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < Wv; ++x) {
            double s = 0;
            for (int k = 0; k < (int)win.size(); ++k) s += win[k] * img[(size_t)y * W + x + k];
            tmp[(size_t)y * Wv + x] = s;
        }
    for (int y = 0; y < Hv; ++y)
        for (int x = 0; x < Wv; ++x) {
            double s = 0;
            for (int k = 0; k < (int)win.size(); ++k) s += win[k] * tmp[(size_t)(y + k) * Wv + x];
            out[(size_t)y * Wv + x] = s;
        }
    return out;
}

}  // namespace detail

// Mean local SSIM on the luminance channel, 11x11 Gaussian window (sigma
// 1.5), C1=(0.01)^2, C2=(0.03)^2 on unit range, valid-mode windows.
template <typename T>
double ssim(const Tensor<T>& x, const Tensor<T>& xhat) {
    PVAE_CHECK(x.same_shape(xhat) && x.ndim() == 3 && x.dim(2) == 3,
               "ssim: expects matching [H,W,3] images");
    const int H = x.dim(0), W = x.dim(1);
    constexpr int radius = 5;
    PVAE_CHECK(H >= 2 * radius + 1 && W >= 2 * radius + 1,
               "ssim: image smaller than the 11x11 window");
    std::vector<double> a((size_t)H * W), b((size_t)H * W);
    for (int y = 0; y < H; ++y)
        for (int x2 = 0; x2 < W; ++x2) {
            const T* pa = x.data() + ((int64_t)y * W + x2) * 3;
            const T* pb = xhat.data() + ((int64_t)y * W + x2) * 3;
            auto lum = [](const T* p) {
                return 0.299 * (static_cast<double>(p[0]) + 1.0) / 2.0 +
                       0.587 * (static_cast<double>(p[1]) + 1.0) / 2.0 +
                       0.114 * (static_cast<double>(p[2]) + 1.0) / 2.0;
            };
            a[(size_t)y * W + x2] = lum(pa);
            b[(size_t)y * W + x2] = lum(pb);
        }
    std::vector<double> aa(a.size()), bb(a.size()), ab(a.size());
    for (size_t i = 0; i < a.size(); ++i) {
        aa[i] = a[i] * a[i];
        bb[i] = b[i] * b[i];
        ab[i] = a[i] * b[i];
    }
    auto win = detail::gaussian_window(radius, 1.5);
    auto mu_a = detail::filter_valid(a, H, W, win);
    auto mu_b = detail::filter_valid(b, H, W, win);
    auto m_aa = detail::filter_valid(aa, H, W, win);
    auto m_bb = detail::filter_valid(bb, H, W, win);
    auto m_ab = detail::filter_valid(ab, H, W, win);
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    double acc = 0;
    for (size_t i = 0; i < mu_a.size(); ++i) {
        double va = m_aa[i] - mu_a[i] * mu_a[i];
        double vb = m_bb[i] - mu_b[i] * mu_b[i];
        double cab = m_ab[i] - mu_a[i] * mu_b[i];
        acc += ((2 * mu_a[i] * mu_b[i] + C1) * (2 * cab + C2)) /
               ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + C1) * (va + vb + C2));
    }
    return acc / static_cast<double>(mu_a.size());
}

}  // namespace pvae::probe

#endif
