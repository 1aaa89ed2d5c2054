#ifndef PVAE_MODEL_HPP
#define PVAE_MODEL_HPP

// PatchVAE: a shared convolutional trunk, a per-location occurrence head, an
// appearance head pooled by occurrence probability, broadcast assembly of the
// patch latent code, and a deconvolutional decoder. The beta-VAE baseline
// shares the trunk and decoder family through a global bottleneck.

#include "pvae/distributions.hpp"
#include "pvae/layers.hpp"

namespace pvae {

enum class ModelKind { patchvae, betavae };

inline std::string to_string(ModelKind k) {
    return k == ModelKind::patchvae ? "patchvae" : "betavae";
}

inline ModelKind model_kind_from_string(const std::string& s) {
    if (s == "patchvae") return ModelKind::patchvae;
    if (s == "betavae") return ModelKind::betavae;
    throw Error("unknown model kind '" + s + "'");
}

struct ModelConfig {
    ModelKind kind = ModelKind::patchvae;
    int n_parts = 16;      // N
    int d_p = 6;           // appearance dims per part
    int d_e = 128;         // trunk output channels
    int height = 32;
    int width = 32;
    double p_prior = 0.0;  // occurrence prior; <= 0 selects the 1/N default
    double beta_app = 1.0;
    double beta_occ = 0.3;
    double beta = 1.0;     // betavae KL weight
    int z_dim = 96;        // betavae bottleneck

    int grid_h() const { return height / 8; }
    int grid_w() const { return width / 8; }
    int grid_cells() const { return grid_h() * grid_w(); }
    int code_channels() const { return n_parts * d_p; }

    double occurrence_prior() const {
        return p_prior > 0.0 ? p_prior : 1.0 / static_cast<double>(n_parts);
    }

    void validate() const {
        PVAE_CHECK(height % 8 == 0 && width % 8 == 0,
                   "input size " << height << "x" << width << " must be divisible by 8");
        PVAE_CHECK(n_parts >= 1 && d_p >= 1 && z_dim >= 1, "latent sizes must be positive");
        PVAE_CHECK(d_e >= 2 && d_e % 2 == 0, "d_e must be even and >= 2, got " << d_e);
        double p = occurrence_prior();
        PVAE_CHECK(p > 0.0 && p < 1.0, "occurrence prior " << p << " must lie in (0,1)");
        PVAE_CHECK(beta_app >= 0.0 && beta_occ >= 0.0 && beta >= 0.0,
                   "KL weights must be nonnegative");
    }
};

// Posterior parameters for one batch: occurrence probabilities per grid cell
// and pooled appearance Gaussians (one per part, not per location).
template <typename T>
struct PatchPosterior {
    Tensor<T> occ_probs;   // [B, h, w, N]
    Tensor<T> app_mu;      // [B, N, d_p]
    Tensor<T> app_logvar;  // [B, N, d_p]
};

template <typename T>
struct PatchLatentCode {
    Tensor<T> zhat;         // [B, h, w, N*d_p]
    Tensor<T> occ_samples;  // [B, h, w, N]
    Tensor<T> app_samples;  // [B, N, d_p]
};

template <typename T>
struct PatchForwardOut {
    Value xhat;
    Value occ_probs;
    Value app_mu;
    Value app_logvar;
    Value occ_samples;
    Value app_samples;
    Value zhat;
};

template <typename T>
struct BetaForwardOut {
    Value xhat;
    Value mu;
    Value logvar;
    Value z;
};

template <typename T>
struct PatchNoise {
    Tensor<T> app;  // standard normal, [B, N*d_p]
    Tensor<T> occ;  // uniform (0,1), [B, h, w, N]

    static PatchNoise draw(const ModelConfig& c, int batch, std::mt19937_64& rng) {
        PatchNoise n;
        n.app = randn<T>({batch, c.n_parts * c.d_p}, rng);
        n.occ = rand_uniform<T>({batch, c.grid_h(), c.grid_w(), c.n_parts}, rng,
                                static_cast<T>(dist::kProbEps),
                                static_cast<T>(1.0 - dist::kProbEps));
        return n;
    }
    static PatchNoise zero(const ModelConfig& c, int batch) {
        PatchNoise n;
        n.app = Tensor<T>::zeros({batch, c.n_parts * c.d_p});
        n.occ = Tensor<T>::full({batch, c.grid_h(), c.grid_w(), c.n_parts}, T(0.5));
        return n;
    }
};

namespace ops {

using pvae::ag::Node;

// Pools per-location appearance maps into one vector per part, weighted by
// the occurrence probabilities: pooled[i] = sum_l q[i,l] v[i,l] / (sum_l q[i,l] + eps).
template <typename T>
Value part_weighted_pool(Tape<T>& t, Value values, Value probs, int n_parts, int d_p) {
    const Tensor<T>& vv = t.val(values);
    const Tensor<T>& qv = t.val(probs);
    PVAE_CHECK(vv.ndim() == 4 && qv.ndim() == 4, "part_weighted_pool: expects NHWC maps");
    const int B = vv.dim(0), H = vv.dim(1), W = vv.dim(2);
    PVAE_CHECK(vv.dim(3) == n_parts * d_p, "part_weighted_pool: value channels "
                                               << vv.dim(3) << " != N*d_p");
    PVAE_CHECK(qv.dim(0) == B && qv.dim(1) == H && qv.dim(2) == W && qv.dim(3) == n_parts,
               "part_weighted_pool: probs shape " << shape_str(qv.shape()) << " mismatch");
    const int64_t L = (int64_t)H * W;
    const T eps = static_cast<T>(dist::kPoolEps);

    Tensor<T> mass({B, n_parts});           // sum_l q + eps
    Tensor<T> out({B, n_parts * d_p});      // weighted sums, then normalized
    for (int b = 0; b < B; ++b) {
        for (int64_t l = 0; l < L; ++l) {
            const T* qrow = qv.data() + ((int64_t)b * L + l) * n_parts;
            const T* vrow = vv.data() + ((int64_t)b * L + l) * n_parts * d_p;
            for (int i = 0; i < n_parts; ++i) {
                mass.data()[(int64_t)b * n_parts + i] += qrow[i];
                T* orow = out.data() + ((int64_t)b * n_parts + i) * d_p;
                for (int j = 0; j < d_p; ++j) orow[j] += qrow[i] * vrow[i * d_p + j];
            }
        }
        for (int i = 0; i < n_parts; ++i) {
            T m = mass.data()[(int64_t)b * n_parts + i] + eps;
            mass.data()[(int64_t)b * n_parts + i] = m;
            T* orow = out.data() + ((int64_t)b * n_parts + i) * d_p;
            for (int j = 0; j < d_p; ++j) orow[j] /= m;
        }
    }

    int vi = values.idx, qi = probs.idx;
    Tensor<T> pooled = out;  // captured for the backward pass
    return t.make_op(std::move(out), {values, probs},
                     [=](Tape<T>& tp, Node<T>& n) {
                         const Tensor<T>& vval = tp.val(Value{vi});
                         const Tensor<T>& qval = tp.val(Value{qi});
                         Tensor<T>* gv = tp.grad_sink(vi);
                         Tensor<T>* gq = tp.grad_sink(qi);
                         for (int b = 0; b < B; ++b)
                             for (int64_t l = 0; l < L; ++l) {
                                 const T* qrow = qval.data() + ((int64_t)b * L + l) * n_parts;
                                 const T* vrow = vval.data() + ((int64_t)b * L + l) * n_parts * d_p;
                                 for (int i = 0; i < n_parts; ++i) {
                                     T m = mass[(int64_t)b * n_parts + i];
                                     const T* grow = n.grad.data() + ((int64_t)b * n_parts + i) * d_p;
                                     const T* prow = pooled.data() + ((int64_t)b * n_parts + i) * d_p;
                                     if (gv) {
                                         T* gvrow = gv->data() + ((int64_t)b * L + l) * n_parts * d_p;
                                         for (int j = 0; j < d_p; ++j)
                                             gvrow[i * d_p + j] += qrow[i] * grow[j] / m;
                                     }
                                     if (gq) {
                                         T acc = T(0);
                                         for (int j = 0; j < d_p; ++j)
                                             acc += grow[j] * (vrow[i * d_p + j] - prow[j]) / m;
                                         (*gq)[((int64_t)b * L + l) * n_parts + i] += acc;
                                     }
                                 }
                             }
                     });
}

// zhat[b,l,i*d_p+j] = occ[b,l,i] * app[b,i*d_p+j]: the broadcasted product
// placing each part's appearance at every cell where the part occurs.
template <typename T>
Value assemble_patch_code(Tape<T>& t, Value occ, Value app, int n_parts, int d_p) {
    const Tensor<T>& ov = t.val(occ);
    const Tensor<T>& av = t.val(app);
    PVAE_CHECK(ov.ndim() == 4 && ov.dim(3) == n_parts, "assemble: occ must be [B,h,w,N]");
    const int B = ov.dim(0), H = ov.dim(1), W = ov.dim(2);
    PVAE_CHECK(av.ndim() == 2 && av.dim(0) == B && av.dim(1) == n_parts * d_p,
               "assemble: app must be [B,N*d_p], got " << shape_str(av.shape()));
    const int64_t L = (int64_t)H * W;

    Tensor<T> z({B, H, W, n_parts * d_p});
    for (int b = 0; b < B; ++b)
        for (int64_t l = 0; l < L; ++l) {
            const T* orow = ov.data() + ((int64_t)b * L + l) * n_parts;
            const T* arow = av.data() + (int64_t)b * n_parts * d_p;
            T* zrow = z.data() + ((int64_t)b * L + l) * n_parts * d_p;
            for (int i = 0; i < n_parts; ++i)
                for (int j = 0; j < d_p; ++j) zrow[i * d_p + j] = orow[i] * arow[i * d_p + j];
        }

    int oi = occ.idx, ai = app.idx;
    return t.make_op(std::move(z), {occ, app}, [=](Tape<T>& tp, Node<T>& n) {
        const Tensor<T>& oval = tp.val(Value{oi});
        const Tensor<T>& aval = tp.val(Value{ai});
        Tensor<T>* go = tp.grad_sink(oi);
        Tensor<T>* ga = tp.grad_sink(ai);
        for (int b = 0; b < B; ++b)
            for (int64_t l = 0; l < L; ++l) {
                const T* orow = oval.data() + ((int64_t)b * L + l) * n_parts;
                const T* arow = aval.data() + (int64_t)b * n_parts * d_p;
                const T* grow = n.grad.data() + ((int64_t)b * L + l) * n_parts * d_p;
                for (int i = 0; i < n_parts; ++i) {
                    if (go) {
                        T acc = T(0);
                        for (int j = 0; j < d_p; ++j) acc += grow[i * d_p + j] * arow[i * d_p + j];
                        (*go)[((int64_t)b * L + l) * n_parts + i] += acc;
                    }
                    if (ga) {
                        T* garow = ga->data() + (int64_t)b * n_parts * d_p;
                        for (int j = 0; j < d_p; ++j) garow[i * d_p + j] += grow[i * d_p + j] * orow[i];
                    }
                }
            }
    });
}

}  // namespace ops

// The trunk phi: a 7x7 stem, two residual stages, and stride-2 reductions at
// the stem, the pool, and the exit, taking HxW down to H/8 x W/8.
inline std::vector<nn::LayerSpec> trunk_specs(int d_e) {
    using L = nn::LayerSpec;
    int half = d_e / 2;
    return {
        L::conv2d(7, half, 2, 3), L::bn(), L::relu(), L::pool(3, 2, 1),
        L::residual(half), L::residual(half),
        L::residual(d_e), L::residual(d_e),
        L::pool(3, 2, 1),
    };
}

// Decoder pyramid: channels halve while the map doubles, ending in tanh.
inline std::vector<nn::LayerSpec> decoder_tail_specs(int d_e) {
    using L = nn::LayerSpec;
    return {
        L::deconv2d(1, 2 * d_e, 1, 0), L::bn(), L::leakyrelu(0.2),
        L::deconv2d(4, d_e, 2, 1), L::bn(), L::leakyrelu(0.2),
        L::deconv2d(4, d_e / 2, 2, 1), L::bn(), L::leakyrelu(0.2),
        L::deconv2d(4, 3, 2, 1), L::tanh_act(),
    };
}

template <typename T>
class PatchVaeModel {
public:
    explicit PatchVaeModel(ModelConfig cfg, uint64_t seed = 1) : cfg_(cfg) {
        cfg_.validate();
        PVAE_CHECK(cfg_.kind == ModelKind::patchvae, "PatchVaeModel requires kind=patchvae");
        std::mt19937_64 rng = substream(seed, /*tag=*/0x7061746368ULL);
        using L = nn::LayerSpec;
        trunk_ = nn::LayerStack<T>("trunk", trunk_specs(cfg_.d_e));
        occ_head_ = nn::LayerStack<T>("occ", {L::conv2d(3, cfg_.n_parts, 1, 1, /*bias=*/true)});
        mu_head_ = nn::LayerStack<T>("app_mu", {L::conv2d(3, cfg_.code_channels(), 1, 1, true)});
        logvar_head_ =
            nn::LayerStack<T>("app_lv", {L::conv2d(3, cfg_.code_channels(), 1, 1, true)});
        decoder_ = nn::LayerStack<T>("dec", decoder_tail_specs(cfg_.d_e));
        int c = trunk_.init(store_, 3, rng);
        occ_head_.init(store_, c, rng);
        mu_head_.init(store_, c, rng);
        logvar_head_.init(store_, c, rng);
        decoder_.init(store_, cfg_.code_channels(), rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }

    Value encode_trunk(Tape<T>& t, Value x, const nn::Mode& mode) {
        const Tensor<T>& xv = t.val(x);
        PVAE_CHECK(xv.ndim() == 4 && xv.dim(3) == 3,
                   "encode_trunk: input must be [B,H,W,3], got " << shape_str(xv.shape()));
        PVAE_CHECK(xv.dim(1) == cfg_.height && xv.dim(2) == cfg_.width,
                   "encode_trunk: input " << xv.dim(1) << "x" << xv.dim(2)
                                          << " does not match configured " << cfg_.height << "x"
                                          << cfg_.width);
        return trunk_.forward(t, store_, x, mode);
    }

    // Occurrence probabilities in (0,1): sigmoid of a single conv layer.
    Value encode_occurrence(Tape<T>& t, Value f, const nn::Mode& mode) {
        Value logits = occ_head_.forward(t, store_, f, mode);
        return ag::clamp(t, ag::sigmoid_(t, logits), static_cast<T>(dist::kProbEps),
                         static_cast<T>(1.0 - dist::kProbEps));
    }

    // Pooled appearance Gaussian per part; pooling weights are probabilities,
    // so the posterior is a deterministic function of the image.
    std::pair<Value, Value> encode_appearance(Tape<T>& t, Value f, Value occ_probs,
                                              const nn::Mode& mode) {
        Value mu_map = mu_head_.forward(t, store_, f, mode);
        Value lv_map = logvar_head_.forward(t, store_, f, mode);
        Value mu = ops::part_weighted_pool(t, mu_map, occ_probs, cfg_.n_parts, cfg_.d_p);
        Value lv = ops::part_weighted_pool(t, lv_map, occ_probs, cfg_.n_parts, cfg_.d_p);
        lv = ag::clamp(t, lv, static_cast<T>(dist::kLogvarMin), static_cast<T>(dist::kLogvarMax));
        return {mu, lv};
    }

    Value decode(Tape<T>& t, Value zhat, const nn::Mode& mode) {
        const Tensor<T>& zv = t.val(zhat);
        PVAE_CHECK(zv.ndim() == 4 && zv.dim(3) == cfg_.code_channels(),
                   "decode: zhat must be [B,h,w," << cfg_.code_channels() << "], got "
                                                  << shape_str(zv.shape()));
        return decoder_.forward(t, store_, zhat, mode);
    }

    // Full forward pass. Train mode samples relaxed occurrences and
    // reparameterized appearances; eval mode hardens at 0.5 and uses the mean.
    PatchForwardOut<T> forward(Tape<T>& t, const Tensor<T>& x, const PatchNoise<T>& noise, T tau,
                               const nn::Mode& mode) {
        PatchForwardOut<T> out;
        Value xin = t.constant(x);
        Value f = encode_trunk(t, xin, mode);
        out.occ_probs = encode_occurrence(t, f, mode);
        auto [mu, lv] = encode_appearance(t, f, out.occ_probs, mode);
        out.app_mu = mu;
        out.app_logvar = lv;
        if (mode.train) {
            out.app_samples = dist::sample_gaussian(t, mu, lv, noise.app);
            out.occ_samples = dist::sample_relaxed_bernoulli(t, out.occ_probs, tau, noise.occ);
        } else {
            out.app_samples = mu;
            dist::BernoulliParams<T> q{t.val(out.occ_probs)};
            out.occ_samples = t.constant(dist::harden(q, T(0.5)));
        }
        out.zhat = ops::assemble_patch_code(t, out.occ_samples, out.app_samples, cfg_.n_parts,
                                            cfg_.d_p);
        out.xhat = decode(t, out.zhat, mode);
        return out;
    }

    PatchPosterior<T> posterior(const Tape<T>& t, const PatchForwardOut<T>& out) const {
        PatchPosterior<T> p;
        p.occ_probs = t.val(out.occ_probs);
        p.app_mu = t.val(out.app_mu).reshaped({t.val(out.app_mu).dim(0), cfg_.n_parts, cfg_.d_p});
        p.app_logvar =
            t.val(out.app_logvar).reshaped({t.val(out.app_logvar).dim(0), cfg_.n_parts, cfg_.d_p});
        return p;
    }

    PatchLatentCode<T> latent_code(const Tape<T>& t, const PatchForwardOut<T>& out) const {
        PatchLatentCode<T> c;
        c.zhat = t.val(out.zhat);
        c.occ_samples = t.val(out.occ_samples);
        c.app_samples =
            t.val(out.app_samples).reshaped({t.val(out.app_samples).dim(0), cfg_.n_parts, cfg_.d_p});
        return c;
    }

    // Decode with an externally assembled code (appearance swapping).
    Tensor<T> decode_assembled(const Tensor<T>& occ_samples, const Tensor<T>& app_samples) {
        Tape<T> t(&store_);
        Value z = ops::assemble_patch_code(t, t.constant(occ_samples), t.constant(app_samples),
                                           cfg_.n_parts, cfg_.d_p);
        return t.val(decode(t, z, nn::Mode::eval()));
    }

private:
    ModelConfig cfg_;
    ParamStore<T> store_;
    nn::LayerStack<T> trunk_, occ_head_, mu_head_, logvar_head_, decoder_;
};

template <typename T>
class BetaVaeModel {
public:
    explicit BetaVaeModel(ModelConfig cfg, uint64_t seed = 1) : cfg_(cfg) {
        cfg_.validate();
        PVAE_CHECK(cfg_.kind == ModelKind::betavae, "BetaVaeModel requires kind=betavae");
        PVAE_CHECK(cfg_.height == cfg_.width, "betavae bottleneck assumes square inputs");
        std::mt19937_64 rng = substream(seed, /*tag=*/0x62657461ULL);
        using L = nn::LayerSpec;
        int g = cfg_.grid_h();
        int half = cfg_.d_e / 2;
        trunk_ = nn::LayerStack<T>("trunk", trunk_specs(cfg_.d_e));
        pre_ = nn::LayerStack<T>("qpre", {L::conv2d(1, half, 1, 0), L::bn(), L::relu()});
        mu_head_ = nn::LayerStack<T>("z_mu", {L::conv2d(g, cfg_.z_dim, 1, 0, true)});
        logvar_head_ = nn::LayerStack<T>("z_lv", {L::conv2d(g, cfg_.z_dim, 1, 0, true)});
        std::vector<L> dec{L::deconv2d(g, half, 1, 0), L::bn(), L::leakyrelu(0.2)};
        for (const L& l : decoder_tail_specs(cfg_.d_e)) dec.push_back(l);
        decoder_ = nn::LayerStack<T>("dec", dec);
        int c = trunk_.init(store_, 3, rng);
        c = pre_.init(store_, c, rng);
        mu_head_.init(store_, c, rng);
        logvar_head_.init(store_, c, rng);
        decoder_.init(store_, cfg_.z_dim, rng);
    }

    const ModelConfig& config() const { return cfg_; }
    ParamStore<T>& params() { return store_; }
    const ParamStore<T>& params() const { return store_; }

    Value encode_trunk(Tape<T>& t, Value x, const nn::Mode& mode) {
        return trunk_.forward(t, store_, x, mode);
    }

    BetaForwardOut<T> forward(Tape<T>& t, const Tensor<T>& x, const Tensor<T>& noise,
                              const nn::Mode& mode) {
        PVAE_CHECK(noise.ndim() == 2 && noise.dim(0) == x.dim(0) && noise.dim(1) == cfg_.z_dim,
                   "betavae: noise must be [B,z_dim]");
        BetaForwardOut<T> out;
        Value f = encode_trunk(t, t.constant(x), mode);
        Value h = pre_.forward(t, store_, f, mode);
        int B = x.dim(0);
        out.mu = ag::reshape(t, mu_head_.forward(t, store_, h, mode), {B, cfg_.z_dim});
        Value lv = ag::reshape(t, logvar_head_.forward(t, store_, h, mode), {B, cfg_.z_dim});
        out.logvar = ag::clamp(t, lv, static_cast<T>(dist::kLogvarMin),
                               static_cast<T>(dist::kLogvarMax));
        out.z = mode.train ? dist::sample_gaussian(t, out.mu, out.logvar, noise) : out.mu;
        Value zmap = ag::reshape(t, out.z, {B, 1, 1, cfg_.z_dim});
        out.xhat = decoder_.forward(t, store_, zmap, mode);
        return out;
    }

private:
    ModelConfig cfg_;
    ParamStore<T> store_;
    nn::LayerStack<T> trunk_, pre_, mu_head_, logvar_head_, decoder_;
};

}  // namespace pvae

#endif
