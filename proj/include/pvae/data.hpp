#ifndef PVAE_DATA_HPP
#define PVAE_DATA_HPP

// Dataset ingestion: CIFAR-style binary batches, image folders, and a seeded
// synthetic repeated-motif generator with exact ground-truth occupancy.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "pvae/io.hpp"
#include "pvae/tensor.hpp"

namespace pvae::data {

namespace fs = std::filesystem;

enum class Split { train, test };

inline std::string to_string(Split s) { return s == Split::train ? "train" : "test"; }

struct Dataset {
    Tensor<float> images;     // [count, H, W, 3], pixels in [-1, 1]
    std::vector<int> labels;  // in [0, num_classes)
    int num_classes = 0;
    std::string split;

    int count() const { return images.empty() ? 0 : images.dim(0); }
    int height() const { return images.dim(1); }
    int width() const { return images.dim(2); }

    Tensor<float> image(int i) const {
        const int H = height(), W = width();
        Tensor<float> out({H, W, 3});
        std::copy_n(images.data() + (int64_t)i * H * W * 3, (int64_t)H * W * 3, out.data());
        return out;
    }

    // Deterministic per-class head selection for desk-scale runs.
    Dataset limit_per_class(int k) const {
        std::vector<int> keep;
        std::map<int, int> taken;
        for (int i = 0; i < count(); ++i)
            if (taken[labels[i]]++ < k) keep.push_back(i);
        return subset(keep);
    }

    Dataset subset(const std::vector<int>& idx) const {
        Dataset out;
        const int H = height(), W = width();
        out.images = Tensor<float>({static_cast<int>(idx.size()), H, W, 3});
        for (size_t j = 0; j < idx.size(); ++j) {
            std::copy_n(images.data() + (int64_t)idx[j] * H * W * 3, (int64_t)H * W * 3,
                        out.images.data() + (int64_t)j * H * W * 3);
            out.labels.push_back(labels[idx[j]]);
        }
        out.num_classes = num_classes;
        out.split = split;
        return out;
    }
};

inline float normalize_byte(uint8_t b) { return 2.0f * (static_cast<float>(b) / 255.0f) - 1.0f; }

inline uint8_t denormalize_pixel(float v) {
    float b = (v + 1.0f) * 255.0f / 2.0f;
    b = std::clamp(b, 0.0f, 255.0f);
    return static_cast<uint8_t>(std::lround(b));
}

// Standard CIFAR binary layout: each record is one label byte followed by
// 3072 pixel bytes (channel-planar RGB, 32x32 row-major).
constexpr int kCifarSide = 32;
constexpr int64_t kCifarRecordBytes = 1 + 3 * kCifarSide * kCifarSide;

inline void append_cifar_file(const fs::path& file, std::vector<uint8_t>& labels,
                              std::vector<uint8_t>& pixels) {
    std::ifstream f(file, std::ios::binary | std::ios::ate);
    PVAE_CHECK(f.good(), "cannot open CIFAR batch '" << file.string() << "'");
    int64_t size = f.tellg();
    PVAE_CHECK(size > 0, "cannot determine size of '" << file.string() << "'");
    PVAE_CHECK(size % kCifarRecordBytes == 0,
               "'" << file.string() << "': truncated record at byte offset "
                   << (size / kCifarRecordBytes) * kCifarRecordBytes << " (file size " << size
                   << " is not a multiple of " << kCifarRecordBytes << ")");
    f.seekg(0);
    int64_t records = size / kCifarRecordBytes;
    std::vector<uint8_t> buf(kCifarRecordBytes);
    for (int64_t r = 0; r < records; ++r) {
        f.read(reinterpret_cast<char*>(buf.data()), kCifarRecordBytes);
        PVAE_CHECK(f.good(), "'" << file.string() << "': read failure at record " << r);
        labels.push_back(buf[0]);
        pixels.insert(pixels.end(), buf.begin() + 1, buf.end());
    }
}

// Loads a CIFAR directory (data_batch_*.bin / test_batch.bin) or a single
// .bin file. Records are decoded in file order; pixels normalized to [-1,1].
inline Dataset load_cifar_binary(const fs::path& path, Split split) {
    std::vector<fs::path> files;
    if (fs::is_directory(path)) {
        if (split == Split::train) {
            for (int i = 1; i <= 99; ++i) {
                fs::path p = path / ("data_batch_" + std::to_string(i) + ".bin");
                if (fs::exists(p)) files.push_back(p);
            }
        } else {
            fs::path p = path / "test_batch.bin";
            if (fs::exists(p)) files.push_back(p);
        }
        PVAE_CHECK(!files.empty(), "no " << to_string(split) << " CIFAR batches under '"
                                         << path.string() << "'");
    } else {
        PVAE_CHECK(fs::exists(path), "CIFAR path '" << path.string() << "' does not exist");
        files.push_back(path);
    }

    std::vector<uint8_t> labels, pixels;
    for (const fs::path& f : files) append_cifar_file(f, labels, pixels);

    const int n = static_cast<int>(labels.size());
    Dataset ds;
    ds.split = to_string(split);
    ds.images = Tensor<float>({n, kCifarSide, kCifarSide, 3});
    ds.labels.resize(n);
    const int hw = kCifarSide * kCifarSide;
    for (int r = 0; r < n; ++r) {
        ds.labels[r] = labels[r];
        const uint8_t* rec = pixels.data() + (int64_t)r * 3 * hw;
        float* out = ds.images.data() + (int64_t)r * hw * 3;
        for (int p = 0; p < hw; ++p)
            for (int c = 0; c < 3; ++c) out[p * 3 + c] = normalize_byte(rec[c * hw + p]);
    }
    ds.num_classes = n ? *std::max_element(ds.labels.begin(), ds.labels.end()) + 1 : 0;
    return ds;
}

// Folder-per-class layout; labels follow sorted directory names. Images are
// resized (shorter side) then center-cropped to size x size.
inline Dataset load_image_folder(const fs::path& root, int size, Split split = Split::train) {
    PVAE_CHECK(fs::is_directory(root), "'" << root.string() << "' is not a directory");
    std::vector<fs::path> class_dirs;
    for (auto& e : fs::directory_iterator(root))
        if (e.is_directory()) class_dirs.push_back(e.path());
    std::sort(class_dirs.begin(), class_dirs.end());
    PVAE_CHECK(!class_dirs.empty(), "no class subdirectories under '" << root.string() << "'");

    std::vector<std::pair<fs::path, int>> items;
    for (size_t ci = 0; ci < class_dirs.size(); ++ci) {
        std::vector<fs::path> files;
        for (auto& e : fs::directory_iterator(class_dirs[ci]))
            if (e.is_regular_file()) files.push_back(e.path());
        std::sort(files.begin(), files.end());
        PVAE_CHECK(!files.empty(), "class directory '" << class_dirs[ci].string() << "' is empty");
        for (auto& f : files) items.emplace_back(f, static_cast<int>(ci));
    }

    std::vector<cv::Mat> decoded;
    std::vector<int> labels;
    int skipped = 0;
    for (auto& [file, label] : items) {
        cv::Mat img = cv::imread(file.string(), cv::IMREAD_COLOR);
        if (img.empty()) {
            std::cerr << "warning: skipping undecodable image '" << file.string() << "'\n";
            ++skipped;
            continue;
        }
        int short_side = std::min(img.rows, img.cols);
        double scale = static_cast<double>(size) / short_side;
        cv::Mat resized;
        cv::resize(img, resized,
                   cv::Size(std::max(size, (int)std::lround(img.cols * scale)),
                            std::max(size, (int)std::lround(img.rows * scale))),
                   0, 0, cv::INTER_AREA);
        int x0 = (resized.cols - size) / 2;
        int y0 = (resized.rows - size) / 2;
        decoded.push_back(resized(cv::Rect(x0, y0, size, size)).clone());
        labels.push_back(label);
    }
    if (skipped) std::cerr << "warning: skipped " << skipped << " undecodable file(s)\n";
    PVAE_CHECK(!decoded.empty(), "no decodable images under '" << root.string() << "'");

    Dataset ds;
    ds.split = to_string(split);
    ds.labels = labels;
    ds.num_classes = static_cast<int>(class_dirs.size());
    ds.images = Tensor<float>({static_cast<int>(decoded.size()), size, size, 3});
    for (size_t i = 0; i < decoded.size(); ++i) {
        float* out = ds.images.data() + (int64_t)i * size * size * 3;
        for (int y = 0; y < size; ++y)
            for (int x = 0; x < size; ++x) {
                cv::Vec3b bgr = decoded[i].at<cv::Vec3b>(y, x);
                out[((int64_t)y * size + x) * 3 + 0] = normalize_byte(bgr[2]);
                out[((int64_t)y * size + x) * 3 + 1] = normalize_byte(bgr[1]);
                out[((int64_t)y * size + x) * 3 + 2] = normalize_byte(bgr[0]);
            }
    }
    return ds;
}

// ---------------------------------------------------------------------------
// Synthetic repeated-motif images.

struct SynthSpec {
    int canvas = 32;            // square canvas, divisible by 8
    int motif_count = 4;        // bank size
    int motif_size = 8;         // pixels, divisible by 8
    int motifs_per_image = 2;   // distinct motifs pasted per image
    float noise_level = 0.2f;   // uniform background amplitude
    int count = 2000;
    uint64_t seed = 1;

    int grid() const { return canvas / 8; }
    int cells_per_motif() const { return (motif_size / 8) * (motif_size / 8); }

    void validate() const {
        PVAE_CHECK(canvas % 8 == 0 && canvas >= 16, "canvas must be divisible by 8");
        PVAE_CHECK(motif_size % 8 == 0 && motif_size >= 8 && motif_size <= canvas,
                   "motif size must be a multiple of the 8-pixel grid stride");
        PVAE_CHECK(motif_count >= 1 && motifs_per_image >= 0 && count >= 1, "bad synth sizes");
        PVAE_CHECK(motifs_per_image <= motif_count,
                   "motifs per image exceeds the motif bank size");
        PVAE_CHECK(noise_level >= 0.0f && noise_level < 1.0f, "noise level must be in [0,1)");
    }
};

struct SynthResult {
    Dataset data;
    Tensor<uint8_t> occupancy;  // [count, grid, grid, motif_count]
    int motif_count = 0;
};

// The bank: per motif, a high-contrast pattern built from 4x4 sub-blocks of
// saturated colors. Patterns are fixed per (seed, motif id).
inline Tensor<float> make_motif(int motif_size, uint64_t seed, int id) {
    std::mt19937_64 rng = substream(seed, 0x6d6f746966ULL, static_cast<uint64_t>(id));
    std::uniform_real_distribution<float> mag(0.55f, 1.0f);
    std::uniform_int_distribution<int> sign(0, 1);
    Tensor<float> m({motif_size, motif_size, 3});
    int blocks = motif_size / 4;
    for (int by = 0; by < blocks; ++by)
        for (int bx = 0; bx < blocks; ++bx) {
            float col[3];
            for (float& c : col) c = (sign(rng) ? 1.0f : -1.0f) * mag(rng);
            for (int y = by * 4; y < (by + 1) * 4; ++y)
                for (int x = bx * 4; x < (bx + 1) * 4; ++x)
                    for (int c = 0; c < 3; ++c)
                        m.data()[((int64_t)y * motif_size + x) * 3 + c] = col[c];
        }
    return m;
}

// Each image: uniform noise background plus `motifs_per_image` distinct
// motifs at non-overlapping grid-aligned positions. The label is the rank of
// the chosen motif combination; occupancy marks which cells hold which motif.
inline SynthResult make_synthetic(const SynthSpec& spec) {
    spec.validate();
    const int g = spec.grid();
    const int span = spec.motif_size / 8;  // cells per motif side
    PVAE_CHECK(spec.motifs_per_image * spec.cells_per_motif() <= g * g,
               "motifs per image exceed grid capacity: " << spec.motifs_per_image << " x "
                                                          << spec.cells_per_motif() << " cells > "
                                                          << g * g);

    std::vector<Tensor<float>> bank;
    for (int i = 0; i < spec.motif_count; ++i)
        bank.push_back(make_motif(spec.motif_size, spec.seed, i));

    // Enumerate distinct motif combinations; the combination index is the label.
    std::vector<std::vector<int>> combos;
    std::vector<int> combo(spec.motifs_per_image);
    std::function<void(int, int)> rec = [&](int start, int depth) {
        if (depth == spec.motifs_per_image) {
            combos.push_back(combo);
            return;
        }
        for (int i = start; i < spec.motif_count; ++i) {
            combo[depth] = i;
            rec(i + 1, depth + 1);
        }
    };
    rec(0, 0);
    if (combos.empty()) combos.push_back({});

    SynthResult out;
    out.motif_count = spec.motif_count;
    out.data.split = "train";
    out.data.num_classes = static_cast<int>(combos.size());
    out.data.images = Tensor<float>({spec.count, spec.canvas, spec.canvas, 3});
    out.occupancy = Tensor<uint8_t>({spec.count, g, g, spec.motif_count});

    std::mt19937_64 rng = substream(spec.seed, 0x73796e7468ULL);
    std::uniform_real_distribution<float> noise(-spec.noise_level, spec.noise_level);
    std::uniform_int_distribution<int> pick_combo(0, static_cast<int>(combos.size()) - 1);

    for (int n = 0; n < spec.count; ++n) {
        float* img = out.data.images.data() + (int64_t)n * spec.canvas * spec.canvas * 3;
        for (int64_t i = 0; i < (int64_t)spec.canvas * spec.canvas * 3; ++i) img[i] = noise(rng);

        int label = pick_combo(rng);
        out.data.labels.push_back(label);

        // Non-overlapping anchor cells, chosen by shuffling all anchors.
        std::vector<std::pair<int, int>> anchors;
        for (int cy = 0; cy + span <= g; ++cy)
            for (int cx = 0; cx + span <= g; ++cx) anchors.emplace_back(cy, cx);
        std::shuffle(anchors.begin(), anchors.end(), rng);
        std::vector<bool> used((size_t)g * g, false);
        size_t cursor = 0;
        for (int motif_id : combos[label]) {
            // first shuffled anchor whose footprint is free
            while (cursor < anchors.size()) {
                auto [cy, cx] = anchors[cursor++];
                bool free = true;
                for (int dy = 0; dy < span && free; ++dy)
                    for (int dx = 0; dx < span && free; ++dx)
                        if (used[(size_t)(cy + dy) * g + cx + dx]) free = false;
                if (!free) continue;
                for (int dy = 0; dy < span; ++dy)
                    for (int dx = 0; dx < span; ++dx) {
                        used[(size_t)(cy + dy) * g + cx + dx] = true;
                        out.occupancy.at({n, cy + dy, cx + dx, motif_id}) = 1;
                    }
                const Tensor<float>& m = bank[motif_id];
                int py = cy * 8, px = cx * 8;
                for (int y = 0; y < spec.motif_size; ++y)
                    for (int x = 0; x < spec.motif_size; ++x)
                        for (int c = 0; c < 3; ++c)
                            img[(((int64_t)(py + y) * spec.canvas) + px + x) * 3 + c] =
                                m.data()[((int64_t)y * spec.motif_size + x) * 3 + c];
                break;
            }
            PVAE_CHECK(cursor <= anchors.size(), "synthetic placement failed");
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Persistence: versioned array container with a manifest.

inline void save_dataset(const Dataset& ds, const std::optional<Tensor<uint8_t>>& occupancy,
                         const std::map<std::string, std::string>& manifest,
                         const std::filesystem::path& path) {
    io::ArrayFile af;
    af.set_meta("kind", "dataset");
    af.set_meta("split", ds.split);
    af.set_meta("num_classes", std::to_string(ds.num_classes));
    for (auto& [k, v] : manifest) af.set_meta("manifest." + k, v);
    af.put("images", ds.images);
    Tensor<int32_t> lab({std::max(1, ds.count())});
    for (int i = 0; i < ds.count(); ++i) lab[i] = ds.labels[i];
    af.put("labels", lab);
    if (occupancy) af.put("occupancy", *occupancy);
    af.save(path);
}

inline Dataset load_dataset(const std::filesystem::path& path,
                            Tensor<uint8_t>* occupancy = nullptr) {
    io::ArrayFile af = io::ArrayFile::load(path);
    PVAE_CHECK(af.get_meta("kind") == "dataset",
               "'" << path.string() << "' is a " << af.get_meta("kind") << ", not a dataset");
    Dataset ds;
    ds.images = af.get<float>("images");
    Tensor<int32_t> lab = af.get<int32_t>("labels");
    for (int i = 0; i < ds.count(); ++i) ds.labels.push_back(lab[i]);
    ds.num_classes = std::stoi(af.get_meta("num_classes"));
    ds.split = af.get_meta("split");
    if (occupancy && af.has("occupancy")) *occupancy = af.get<uint8_t>("occupancy");
    return ds;
}

// Exports a dataset in the CIFAR binary layout (one file).
inline void save_cifar_binary(const Dataset& ds, const fs::path& file) {
    PVAE_CHECK(ds.height() == kCifarSide && ds.width() == kCifarSide,
               "CIFAR export requires 32x32 images");
    std::ofstream f(file, std::ios::binary);
    PVAE_CHECK(f.good(), "cannot open '" << file.string() << "' for writing");
    const int hw = kCifarSide * kCifarSide;
    for (int r = 0; r < ds.count(); ++r) {
        PVAE_CHECK(ds.labels[r] >= 0 && ds.labels[r] < 256, "label out of byte range");
        f.put(static_cast<char>(ds.labels[r]));
        const float* img = ds.images.data() + (int64_t)r * hw * 3;
        for (int c = 0; c < 3; ++c)
            for (int p = 0; p < hw; ++p)
                f.put(static_cast<char>(denormalize_pixel(img[p * 3 + c])));
    }
    PVAE_CHECK(f.good(), "write failure on '" << file.string() << "'");
}

// ---------------------------------------------------------------------------
// Minibatching.

// Index batches covering every record exactly once; the last batch may be
// short. Without a seed the original order is kept.
inline std::vector<std::vector<int>> minibatches(int count, int batch_size,
                                                 std::optional<uint64_t> shuffle_seed) {
    PVAE_CHECK(batch_size >= 1, "batch size must be >= 1, got " << batch_size);
    std::vector<int> order(count);
    std::iota(order.begin(), order.end(), 0);
    if (shuffle_seed) {
        std::mt19937_64 rng(splitmix64(*shuffle_seed));
        std::shuffle(order.begin(), order.end(), rng);
    }
    std::vector<std::vector<int>> batches;
    for (int start = 0; start < count; start += batch_size) {
        int end = std::min(count, start + batch_size);
        batches.emplace_back(order.begin() + start, order.begin() + end);
    }
    return batches;
}

template <typename T>
Tensor<T> gather_images(const Dataset& ds, const std::vector<int>& idx) {
    const int H = ds.height(), W = ds.width();
    Tensor<T> out({static_cast<int>(idx.size()), H, W, 3});
    for (size_t j = 0; j < idx.size(); ++j) {
        const float* src = ds.images.data() + (int64_t)idx[j] * H * W * 3;
        T* dst = out.data() + (int64_t)j * H * W * 3;
        for (int64_t i = 0; i < (int64_t)H * W * 3; ++i) dst[i] = static_cast<T>(src[i]);
    }
    return out;
}

inline std::vector<int> gather_labels(const Dataset& ds, const std::vector<int>& idx) {
    std::vector<int> out;
    out.reserve(idx.size());
    for (int i : idx) out.push_back(ds.labels[i]);
    return out;
}

}  // namespace pvae::data

#endif
