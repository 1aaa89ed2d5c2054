#ifndef PVAE_LOSSES_HPP
#define PVAE_LOSSES_HPP

// Reconstruction losses (plain and gradient-energy weighted), KL assembly,
// and the complete PatchVAE / beta-VAE objectives.

#include "pvae/model.hpp"

namespace pvae::losses {

enum class LossVariant { plain, weighted };

inline std::string to_string(LossVariant v) {
    return v == LossVariant::plain ? "plain" : "weighted";
}

inline LossVariant loss_variant_from_string(const std::string& s) {
    if (s == "plain") return LossVariant::plain;
    if (s == "weighted") return LossVariant::weighted;
    throw Error("unknown loss variant '" + s + "'");
}

// One weight per 8x8 pixel cell, normalized to sum to one.
template <typename T>
struct WeightMask {
    Tensor<T> weights;  // [H/8, W/8]
};

template <typename T>
struct LossBreakdown {
    T recon = T(0);
    T kl_occ = T(0);
    T kl_app = T(0);
    T total = T(0);
    T w_app = T(0);  // beta_app, or beta for the betavae objective
    T w_occ = T(0);

    T recombined() const { return recon + w_occ * kl_occ + w_app * kl_app; }
};

template <typename T>
struct Objective {
    Value total;
    LossBreakdown<T> parts;
};

// Mean squared error over batch, pixels, and channels.
template <typename T>
Value l2_recon(Tape<T>& t, Value xhat, const Tensor<T>& x) {
    PVAE_CHECK(t.val(xhat).same_shape(x), "l2_recon: shape mismatch "
                                              << shape_str(t.val(xhat).shape()) << " vs "
                                              << shape_str(x.shape()));
    Value diff = ag::sub(t, xhat, t.constant(x));
    return ag::mean_all(t, ag::square(t, diff));
}

template <typename T>
T l2_recon(const Tensor<T>& x, const Tensor<T>& xhat) {
    PVAE_CHECK(x.same_shape(xhat), "l2_recon: shape mismatch");
    T s = T(0);
    for (int64_t i = 0; i < x.numel(); ++i) {
        T d = x[i] - xhat[i];
        s += d * d;
    }
    return s / static_cast<T>(x.numel());
}

template <typename T>
Tensor<T> luminance(const Tensor<T>& img) {
    PVAE_CHECK(img.ndim() == 3 && img.dim(2) == 3, "luminance: expects [H,W,3]");
    const int H = img.dim(0), W = img.dim(1);
    Tensor<T> g({H, W});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const T* p = img.data() + ((int64_t)y * W + x) * 3;
            g[(int64_t)y * W + x] =
                T(0.299) * p[0] + T(0.587) * p[1] + T(0.114) * p[2];
        }
    return g;
}

// 4-neighbor Laplacian with replicate borders.
template <typename T>
Tensor<T> laplacian(const Tensor<T>& gray) {
    PVAE_CHECK(gray.ndim() == 2, "laplacian: expects [H,W]");
    const int H = gray.dim(0), W = gray.dim(1);
    Tensor<T> out({H, W});
    auto at = [&](int y, int x) {
        y = std::clamp(y, 0, H - 1);
        x = std::clamp(x, 0, W - 1);
        return gray[(int64_t)y * W + x];
    };
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            out[(int64_t)y * W + x] =
                at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - T(4) * at(y, x);
    return out;
}

// Per-cell mean of |laplacian(luminance)| over non-overlapping 8x8 patches,
// normalized to sum to one. A constant image yields the uniform mask.
template <typename T>
WeightMask<T> laplacian_weight_mask(const Tensor<T>& img) {
    PVAE_CHECK(img.ndim() == 3 && img.dim(2) == 3, "weight mask: expects [H,W,3]");
    const int H = img.dim(0), W = img.dim(1);
    PVAE_CHECK(H % 8 == 0 && W % 8 == 0, "weight mask: image size must be divisible by 8");
    const int hc = H / 8, wc = W / 8;
    Tensor<T> lap = laplacian(luminance(img));
    Tensor<T> cells({hc, wc});
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            cells[(int64_t)(y / 8) * wc + (x / 8)] += std::abs(lap[(int64_t)y * W + x]);
    T total = T(0);
    for (int64_t i = 0; i < cells.numel(); ++i) {
        cells[i] /= T(64);
        total += cells[i];
    }
    if (!(total > T(0))) {
        cells.fill(T(1) / static_cast<T>(hc * wc));
        return {cells};
    }
    for (int64_t i = 0; i < cells.numel(); ++i) cells[i] /= total;
    return {cells};
}

// Batched masks, [B, H/8, W/8].
template <typename T>
Tensor<T> laplacian_weight_masks(const Tensor<T>& batch) {
    PVAE_CHECK(batch.ndim() == 4 && batch.dim(3) == 3, "weight masks: expects [B,H,W,3]");
    const int B = batch.dim(0), H = batch.dim(1), W = batch.dim(2);
    Tensor<T> out({B, H / 8, W / 8});
    for (int b = 0; b < B; ++b) {
        Tensor<T> img({H, W, 3});
        std::copy_n(batch.data() + (int64_t)b * H * W * 3, (int64_t)H * W * 3, img.data());
        WeightMask<T> m = laplacian_weight_mask(img);
        std::copy_n(m.weights.data(), m.weights.numel(), out.data() + (int64_t)b * (H / 8) * (W / 8));
    }
    return out;
}

// Sum over cells of weight * (mean squared error within the cell), averaged
// over the batch. With the uniform mask this equals l2_recon exactly.
template <typename T>
Value weighted_recon(Tape<T>& t, Value xhat, const Tensor<T>& x, const Tensor<T>& masks) {
    const Tensor<T>& rv = t.val(xhat);
    PVAE_CHECK(rv.same_shape(x), "weighted_recon: shape mismatch");
    PVAE_CHECK(x.ndim() == 4 && x.dim(3) == 3, "weighted_recon: expects [B,H,W,3]");
    const int B = x.dim(0), H = x.dim(1), W = x.dim(2);
    PVAE_CHECK(masks.ndim() == 3 && masks.dim(0) == B && masks.dim(1) == H / 8 &&
                   masks.dim(2) == W / 8,
               "weighted_recon: masks must be [B,H/8,W/8], got " << shape_str(masks.shape()));
    const int wc = W / 8;
    Tensor<T> coeff({B, H, W, 3});
    const T norm = T(1) / (T(64 * 3) * static_cast<T>(B));
    for (int b = 0; b < B; ++b)
        for (int y = 0; y < H; ++y)
            for (int x2 = 0; x2 < W; ++x2) {
                T w = masks[((int64_t)b * (H / 8) + y / 8) * wc + x2 / 8] * norm;
                T* c = coeff.data() + (((int64_t)b * H + y) * W + x2) * 3;
                c[0] = c[1] = c[2] = w;
            }
    Value sq = ag::square(t, ag::sub(t, xhat, t.constant(x)));
    return ag::weighted_sum_all(t, sq, coeff);
}

template <typename T>
T weighted_recon(const Tensor<T>& x, const Tensor<T>& xhat, const WeightMask<T>& mask) {
    PVAE_CHECK(x.same_shape(xhat) && x.ndim() == 3 && x.dim(2) == 3,
               "weighted_recon: expects matching [H,W,3]");
    const int H = x.dim(0), W = x.dim(1), wc = W / 8;
    PVAE_CHECK(mask.weights.ndim() == 2 && mask.weights.dim(0) == H / 8 &&
                   mask.weights.dim(1) == wc,
               "weighted_recon: mask shape mismatch");
    T s = T(0);
    for (int y = 0; y < H; ++y)
        for (int x2 = 0; x2 < W; ++x2)
            for (int c = 0; c < 3; ++c) {
                T d = x.data()[(((int64_t)y * W) + x2) * 3 + c] -
                      xhat.data()[(((int64_t)y * W) + x2) * 3 + c];
                s += mask.weights[(int64_t)(y / 8) * wc + x2 / 8] * d * d / T(64 * 3);
            }
    return s;
}

// Occurrence KL summed over parts and grid cells, appearance KL summed over
// parts and dims, both averaged over the batch; weights follow the ablation
// convention (beta_occ scales occurrence, beta_app scales appearance).
template <typename T>
Objective<T> patchvae_objective(Tape<T>& t, const Tensor<T>& x, const PatchForwardOut<T>& fwd,
                                const ModelConfig& cfg, LossVariant variant,
                                const Tensor<T>* masks = nullptr) {
    const int B = x.dim(0);
    Value recon;
    if (variant == LossVariant::weighted) {
        Tensor<T> m = masks ? *masks : laplacian_weight_masks(x);
        recon = weighted_recon(t, fwd.xhat, x, m);
    } else {
        recon = l2_recon(t, fwd.xhat, x);
    }
    T inv_b = T(1) / static_cast<T>(B);
    Value kl_occ = ag::mul_scalar(
        t, ag::sum_all(t, dist::kl_bernoulli(t, fwd.occ_probs, static_cast<T>(cfg.occurrence_prior()))),
        inv_b);
    Value kl_app =
        ag::mul_scalar(t, dist::kl_gaussian_std(t, fwd.app_mu, fwd.app_logvar), inv_b);

    Objective<T> obj;
    T w_occ = static_cast<T>(cfg.beta_occ), w_app = static_cast<T>(cfg.beta_app);
    obj.total = ag::add(t, recon,
                        ag::add(t, ag::mul_scalar(t, kl_occ, w_occ),
                                ag::mul_scalar(t, kl_app, w_app)));
    obj.parts.recon = t.val(recon)[0];
    obj.parts.kl_occ = t.val(kl_occ)[0];
    obj.parts.kl_app = t.val(kl_app)[0];
    obj.parts.total = t.val(obj.total)[0];
    obj.parts.w_app = w_app;
    obj.parts.w_occ = w_occ;
    return obj;
}

template <typename T>
Objective<T> betavae_objective(Tape<T>& t, const Tensor<T>& x, const BetaForwardOut<T>& fwd,
                               T beta, LossVariant variant, const Tensor<T>* masks = nullptr) {
    const int B = x.dim(0);
    Value recon;
    if (variant == LossVariant::weighted) {
        Tensor<T> m = masks ? *masks : laplacian_weight_masks(x);
        recon = weighted_recon(t, fwd.xhat, x, m);
    } else {
        recon = l2_recon(t, fwd.xhat, x);
    }
    Value kl = ag::mul_scalar(t, dist::kl_gaussian_std(t, fwd.mu, fwd.logvar),
                              T(1) / static_cast<T>(B));
    Objective<T> obj;
    obj.total = ag::add(t, recon, ag::mul_scalar(t, kl, beta));
    obj.parts.recon = t.val(recon)[0];
    obj.parts.kl_occ = T(0);
    obj.parts.kl_app = t.val(kl)[0];
    obj.parts.total = t.val(obj.total)[0];
    obj.parts.w_app = beta;
    obj.parts.w_occ = T(0);
    return obj;
}

}  // namespace pvae::losses

#endif
