#ifndef PVAE_VIZ_HPP
#define PVAE_VIZ_HPP

// Qualitative artifacts: occurrence heatmap panels, top patch crops per part,
// appearance swapping, weight-mask panels, and training-curve plots.

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pvae/probe.hpp"

namespace pvae::viz {

// [-1,1] RGB tensor -> BGR byte image on disk.
inline void save_image(const std::filesystem::path& path, const Tensor<float>& img) {
    PVAE_CHECK(img.ndim() == 3 && img.dim(2) == 3, "save_image: expects [H,W,3]");
    const int H = img.dim(0), W = img.dim(1);
    cv::Mat m(H, W, CV_8UC3);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) {
            const float* p = img.data() + ((int64_t)y * W + x) * 3;
            m.at<cv::Vec3b>(y, x) = cv::Vec3b(data::denormalize_pixel(p[2]),
                                              data::denormalize_pixel(p[1]),
                                              data::denormalize_pixel(p[0]));
        }
    PVAE_CHECK(cv::imwrite(path.string(), m), "failed to write '" << path.string() << "'");
}

// [0,1] grayscale tensor -> 8-bit image on disk.
inline void save_grayscale(const std::filesystem::path& path, const Tensor<float>& img) {
    PVAE_CHECK(img.ndim() == 2, "save_grayscale: expects [H,W]");
    const int H = img.dim(0), W = img.dim(1);
    cv::Mat m(H, W, CV_8UC1);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x)
            m.at<uint8_t>(y, x) = static_cast<uint8_t>(
                std::lround(std::clamp(img.data()[(int64_t)y * W + x], 0.0f, 1.0f) * 255.0f));
    PVAE_CHECK(cv::imwrite(path.string(), m), "failed to write '" << path.string() << "'");
}

// Eval-mode occurrence probabilities for a batch, [B,h,w,N].
template <typename T>
Tensor<T> encode_occurrence_probs(PatchVaeModel<T>& model, const Tensor<T>& images) {
    Tape<T> t(&model.params());
    Value f = model.encode_trunk(t, t.constant(images), nn::Mode::eval());
    return t.val(model.encode_occurrence(t, f, nn::Mode::eval()));
}

// Blends per-part occurrence heat over the input: one row per part, one
// column per image. Heat color ramps blue (absent) to red (present), alpha
// fixed blending in unit range.
inline Tensor<float> occurrence_panel(const Tensor<float>& images, const Tensor<float>& occ,
                                      float alpha = 0.5f, int pad = 2) {
    PVAE_CHECK(images.ndim() == 4 && occ.ndim() == 4 && images.dim(0) == occ.dim(0),
               "occurrence_panel: batch mismatch");
    const int B = images.dim(0), H = images.dim(1), W = images.dim(2);
    const int h = occ.dim(1), w = occ.dim(2), N = occ.dim(3);
    PVAE_CHECK(H % h == 0 && W % w == 0, "occurrence_panel: grid does not divide image");
    const int sy = H / h, sx = W / w;
    const int PH = N * (H + pad) + pad, PW = B * (W + pad) + pad;
    Tensor<float> panel({PH, PW, 3}, 1.0f);  // white background
    for (int part = 0; part < N; ++part)
        for (int b = 0; b < B; ++b) {
            int oy = pad + part * (H + pad), ox = pad + b * (W + pad);
            for (int y = 0; y < H; ++y)
                for (int x = 0; x < W; ++x) {
                    float p = occ.at({b, y / sy, x / sx, part});  // nearest upsample
                    const float* src = images.data() + (((int64_t)b * H + y) * W + x) * 3;
                    float* dst = panel.data() + (((int64_t)(oy + y) * PW) + ox + x) * 3;
                    float heat[3] = {p, 0.0f, 1.0f - p};
                    for (int c = 0; c < 3; ++c) {
                        float img01 = (src[c] + 1.0f) / 2.0f;
                        float blend = (1.0f - alpha) * img01 + alpha * heat[c];
                        dst[c] = 2.0f * blend - 1.0f;
                    }
                }
        }
    return panel;
}

struct CropHit {
    int image_index = 0;
    int cell_y = 0;
    int cell_x = 0;
    float score = 0;
};

// All grid cells of one part across the dataset, sorted by occurrence
// probability (ties broken by index for a stable order).
template <typename T>
std::vector<CropHit> rank_part_cells(PatchVaeModel<T>& model, const data::Dataset& ds,
                                     int part_index, int batch_size = 256) {
    PVAE_CHECK(part_index >= 0 && part_index < model.config().n_parts,
               "part index " << part_index << " out of range [0," << model.config().n_parts << ")");
    std::vector<CropHit> hits;
    auto batches = data::minibatches(ds.count(), batch_size, std::nullopt);
    for (auto& idx : batches) {
        Tensor<T> x = data::gather_images<T>(ds, idx);
        Tensor<T> occ = encode_occurrence_probs(model, x);
        const int h = occ.dim(1), w = occ.dim(2);
        for (size_t r = 0; r < idx.size(); ++r)
            for (int cy = 0; cy < h; ++cy)
                for (int cx = 0; cx < w; ++cx)
                    hits.push_back(CropHit{idx[r], cy, cx,
                                           static_cast<float>(occ.at({(int)r, cy, cx, part_index}))});
    }
    std::sort(hits.begin(), hits.end(), [](const CropHit& a, const CropHit& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.image_index != b.image_index) return a.image_index < b.image_index;
        if (a.cell_y != b.cell_y) return a.cell_y < b.cell_y;
        return a.cell_x < b.cell_x;
    });
    return hits;
}

// Crop footprint: twice the 8-pixel grid stride, centered on the cell.
constexpr int kCropSize = 16;

inline Tensor<float> crop_at_cell(const Tensor<float>& image, int cell_y, int cell_x,
                                  int crop = kCropSize) {
    const int H = image.dim(0), W = image.dim(1);
    int cy = cell_y * 8 + 4, cx = cell_x * 8 + 4;
    int y0 = std::clamp(cy - crop / 2, 0, std::max(0, H - crop));
    int x0 = std::clamp(cx - crop / 2, 0, std::max(0, W - crop));
    Tensor<float> out({crop, crop, 3});
    for (int y = 0; y < crop; ++y)
        for (int x = 0; x < crop; ++x)
            for (int c = 0; c < 3; ++c)
                out.at({y, x, c}) = image.at({std::min(y0 + y, H - 1), std::min(x0 + x, W - 1), c});
    return out;
}

struct TopCrops {
    std::vector<Tensor<float>> crops;
    std::vector<CropHit> hits;
    bool truncated = false;  // dataset had fewer than k cells
};

template <typename T>
TopCrops top_crops(PatchVaeModel<T>& model, const data::Dataset& ds, int part_index, int k) {
    PVAE_CHECK(k >= 1, "top_crops: k must be >= 1");
    std::vector<CropHit> ranked = rank_part_cells(model, ds, part_index);
    TopCrops out;
    if (static_cast<int>(ranked.size()) < k) {
        std::cerr << "warning: only " << ranked.size() << " cells available, requested " << k
                  << "\n";
        out.truncated = true;
        k = static_cast<int>(ranked.size());
    }
    for (int i = 0; i < k; ++i) {
        out.hits.push_back(ranked[i]);
        out.crops.push_back(
            crop_at_cell(ds.image(ranked[i].image_index), ranked[i].cell_y, ranked[i].cell_x));
    }
    return out;
}

inline Tensor<float> crop_grid_panel(const std::vector<Tensor<float>>& crops, int columns = 10,
                                     int pad = 2) {
    PVAE_CHECK(!crops.empty(), "crop_grid_panel: no crops");
    const int ch = crops[0].dim(0), cw = crops[0].dim(1);
    int rows = (static_cast<int>(crops.size()) + columns - 1) / columns;
    Tensor<float> panel({pad + rows * (ch + pad), pad + columns * (cw + pad), 3}, 1.0f);
    for (size_t i = 0; i < crops.size(); ++i) {
        int ry = pad + (static_cast<int>(i) / columns) * (ch + pad);
        int rx = pad + (static_cast<int>(i) % columns) * (cw + pad);
        for (int y = 0; y < ch; ++y)
            for (int x = 0; x < cw; ++x)
                for (int c = 0; c < 3; ++c) panel.at({ry + y, rx + x, c}) = crops[i].at({y, x, c});
    }
    return panel;
}

// --- appearance swapping -----------------------------------------------------

template <typename T>
struct SwapResult {
    Tensor<T> original;   // target reconstruction, eval mode
    Tensor<T> swapped;    // with source part appearance spliced in
    Tensor<T> target_occ; // hardened target occurrence [h,w,N]
};

// Replaces the target part's appearance vector with the source part's while
// keeping the target occurrence map fixed, then decodes both.
template <typename T>
SwapResult<T> swap_appearance(PatchVaeModel<T>& model, const Tensor<T>& source_image,
                              int source_part, const Tensor<T>& target_image, int target_part) {
    const ModelConfig& cfg = model.config();
    PVAE_CHECK(source_part >= 0 && source_part < cfg.n_parts && target_part >= 0 &&
                   target_part < cfg.n_parts,
               "invalid part index for swap");
    auto encode_one = [&](const Tensor<T>& img) {
        Tensor<T> batch = img.reshaped({1, cfg.height, cfg.width, 3});
        Tape<T> t(&model.params());
        PatchNoise<T> noise = PatchNoise<T>::zero(cfg, 1);
        auto fwd = model.forward(t, batch, noise, T(1), nn::Mode::eval());
        struct {
            Tensor<T> occ, app, recon;
        } r{t.val(fwd.occ_samples), t.val(fwd.app_samples), t.val(fwd.xhat)};
        return r;
    };
    auto src = encode_one(source_image);
    auto tgt = encode_one(target_image);

    Tensor<T> app = tgt.app;  // [1, N*d_p]
    for (int j = 0; j < cfg.d_p; ++j)
        app[(int64_t)target_part * cfg.d_p + j] = src.app[(int64_t)source_part * cfg.d_p + j];

    SwapResult<T> out;
    out.original = model.decode_assembled(tgt.occ, tgt.app)
                       .reshaped({cfg.height, cfg.width, 3});
    out.swapped = model.decode_assembled(tgt.occ, app).reshaped({cfg.height, cfg.width, 3});
    out.target_occ = tgt.occ.reshaped({cfg.grid_h(), cfg.grid_w(), cfg.n_parts});
    return out;
}

// --- weight-mask panel ---------------------------------------------------------

// Rows: input image, |laplacian|, weight mask, input * mask.
inline void save_weight_mask_panel(const Tensor<float>& image, const std::filesystem::path& path) {
    const int H = image.dim(0), W = image.dim(1);
    Tensor<float> lap = losses::laplacian(losses::luminance(image));
    float peak = 1e-12f;
    for (int64_t i = 0; i < lap.numel(); ++i) peak = std::max(peak, std::abs(lap[i]));
    losses::WeightMask<float> mask = losses::laplacian_weight_mask(image);
    float mpeak = 1e-12f;
    for (int64_t i = 0; i < mask.weights.numel(); ++i)
        mpeak = std::max(mpeak, mask.weights[i]);

    const int pad = 2;
    Tensor<float> panel({4 * (H + pad) + pad, W + 2 * pad, 3}, 1.0f);
    auto put_rgb = [&](int row, auto&& pixel) {
        int oy = pad + row * (H + pad);
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                float rgb[3];
                pixel(y, x, rgb);
                for (int c = 0; c < 3; ++c) panel.at({oy + y, pad + x, c}) = rgb[c];
            }
    };
    put_rgb(0, [&](int y, int x, float* rgb) {
        for (int c = 0; c < 3; ++c) rgb[c] = image.at({y, x, c});
    });
    put_rgb(1, [&](int y, int x, float* rgb) {
        float v = std::abs(lap.at({y, x})) / peak;
        rgb[0] = rgb[1] = rgb[2] = 2.0f * v - 1.0f;
    });
    put_rgb(2, [&](int y, int x, float* rgb) {
        float v = mask.weights.at({y / 8, x / 8}) / mpeak;
        rgb[0] = rgb[1] = rgb[2] = 2.0f * v - 1.0f;
    });
    put_rgb(3, [&](int y, int x, float* rgb) {
        float v = mask.weights.at({y / 8, x / 8}) / mpeak;
        for (int c = 0; c < 3; ++c) {
            float img01 = (image.at({y, x, c}) + 1.0f) / 2.0f;
            rgb[c] = 2.0f * (img01 * v) - 1.0f;
        }
    });
    save_image(path, panel);
}

// --- training-curve plots -------------------------------------------------------

namespace detail {

struct Series {
    std::string label;
    cv::Scalar color;  // BGR
    std::vector<double> values;
};

inline void render_plot(const std::filesystem::path& path, const std::vector<int64_t>& steps,
                        const std::vector<Series>& series, const std::string& y_label) {
    PVAE_CHECK(!steps.empty(), "plot: no data rows");
    const int W = 900, H = 540, ml = 70, mr = 20, mt = 20, mb = 50;
    cv::Mat canvas(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
    double lo = 0.0, hi = -1e300;
    for (const auto& s : series)
        for (double v : s.values) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    if (hi <= lo) hi = lo + 1.0;
    double x0 = static_cast<double>(steps.front());
    double x1 = static_cast<double>(steps.back());
    if (x1 <= x0) x1 = x0 + 1.0;
    auto px = [&](double step) {
        return ml + static_cast<int>((step - x0) / (x1 - x0) * (W - ml - mr));
    };
    auto py = [&](double v) {
        return H - mb - static_cast<int>((v - lo) / (hi - lo) * (H - mt - mb));
    };
    cv::line(canvas, {ml, H - mb}, {W - mr, H - mb}, cv::Scalar(0, 0, 0), 1);
    cv::line(canvas, {ml, mt}, {ml, H - mb}, cv::Scalar(0, 0, 0), 1);
    cv::putText(canvas, "step", {W / 2 - 20, H - 15}, cv::FONT_HERSHEY_SIMPLEX, 0.5,
                cv::Scalar(0, 0, 0), 1);
    cv::putText(canvas, y_label, {8, mt + 12}, cv::FONT_HERSHEY_SIMPLEX, 0.5, cv::Scalar(0, 0, 0),
                1);
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.4g", hi);
    cv::putText(canvas, buf, {4, py(hi) + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1);
    std::snprintf(buf, sizeof(buf), "%.4g", lo);
    cv::putText(canvas, buf, {4, py(lo) + 4}, cv::FONT_HERSHEY_SIMPLEX, 0.4, cv::Scalar(0, 0, 0), 1);
    int ly = mt + 16;
    for (const auto& s : series) {
        for (size_t i = 1; i < steps.size(); ++i)
            cv::line(canvas,
                     {px(static_cast<double>(steps[i - 1])), py(s.values[i - 1])},
                     {px(static_cast<double>(steps[i])), py(s.values[i])}, s.color, 1);
        cv::putText(canvas, s.label, {W - mr - 120, ly}, cv::FONT_HERSHEY_SIMPLEX, 0.45, s.color,
                    1);
        ly += 18;
    }
    PVAE_CHECK(cv::imwrite(path.string(), canvas), "failed to write '" << path.string() << "'");
}

}  // namespace detail

// Loss curves (recon, kl_occ, kl_app) and the temperature schedule from a
// step-history CSV. An empty history is an error, not an empty plot.
inline void emit_plots(const std::filesystem::path& history_csv,
                       const std::filesystem::path& out_dir) {
    std::vector<train::MetricRow> rows = train::read_history_csv(history_csv);
    PVAE_CHECK(!rows.empty(), "history CSV '" << history_csv.string() << "' has no data rows");
    std::filesystem::create_directories(out_dir);
    std::vector<int64_t> steps;
    detail::Series recon{"recon", cv::Scalar(180, 60, 20), {}};
    detail::Series occ{"kl_occ", cv::Scalar(40, 40, 200), {}};
    detail::Series app{"kl_app", cv::Scalar(40, 160, 40), {}};
    detail::Series tau{"tau", cv::Scalar(120, 40, 160), {}};
    for (const auto& r : rows) {
        steps.push_back(r.step);
        recon.values.push_back(r.recon);
        occ.values.push_back(r.kl_occ);
        app.values.push_back(r.kl_app);
        tau.values.push_back(r.tau);
    }
    detail::render_plot(out_dir / "loss_curves.png", steps, {recon, occ, app}, "loss");
    detail::render_plot(out_dir / "tau_schedule.png", steps, {tau}, "tau");
}

}  // namespace pvae::viz

#endif
