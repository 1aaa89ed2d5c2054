#ifndef PVAE_TENSOR_HPP
#define PVAE_TENSOR_HPP

// Dense row-major tensors on the CPU. Images and feature maps are kept in
// [batch, height, width, channels] order so the channel axis is contiguous.

#include <cstdint>
#include <cmath>
#include <initializer_list>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pvae {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

#define PVAE_CHECK(cond, msg)                                  \
    do {                                                       \
        if (!(cond)) {                                         \
            std::ostringstream oss_;                           \
            oss_ << msg;                                       \
            throw ::pvae::Error(oss_.str());                   \
        }                                                      \
    } while (0)

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int d : s) {
        PVAE_CHECK(d >= 1, "tensor extent must be >= 1, got " << d);
        n *= d;
    }
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string r = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) r += ",";
        r += std::to_string(s[i]);
    }
    return r + "]";
}

template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, T fill = T(0))
        : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}
    Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
        PVAE_CHECK(static_cast<int64_t>(data_.size()) == shape_numel(shape_),
                   "data size " << data_.size() << " does not match shape " << shape_str(shape_));
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }
    static Tensor scalar(T v) { return Tensor(Shape{1}, std::vector<T>{v}); }

    const Shape& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(i); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool empty() const { return data_.empty(); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](int64_t i) { return data_[i]; }
    const T& operator[](int64_t i) const { return data_[i]; }

    // Multi-index access; convenience for tests and cold paths.
    T& at(std::initializer_list<int> idx) { return data_[offset(idx)]; }
    const T& at(std::initializer_list<int> idx) const { return data_[offset(idx)]; }

    int64_t offset(std::initializer_list<int> idx) const {
        PVAE_CHECK(idx.size() == shape_.size(),
                   "index rank " << idx.size() << " vs tensor rank " << shape_.size());
        int64_t off = 0;
        int i = 0;
        for (int v : idx) {
            PVAE_CHECK(v >= 0 && v < shape_[i], "index " << v << " out of range for axis " << i
                                                          << " of " << shape_str(shape_));
            off = off * shape_[i] + v;
            ++i;
        }
        return off;
    }

    Tensor reshaped(Shape s) const {
        PVAE_CHECK(shape_numel(s) == numel(),
                   "reshape " << shape_str(shape_) << " -> " << shape_str(s) << " changes numel");
        Tensor r = *this;
        r.shape_ = std::move(s);
        return r;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    template <typename U>
    Tensor<U> cast() const {
        Tensor<U> r;
        r.set_shape_and_data(shape_, std::vector<U>(data_.begin(), data_.end()));
        return r;
    }

    void set_shape_and_data(Shape s, std::vector<T> d) {
        shape_ = std::move(s);
        data_ = std::move(d);
        PVAE_CHECK(static_cast<int64_t>(data_.size()) == shape_numel(shape_), "shape/data mismatch");
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool all_finite() const {
        for (const T& v : data_)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

private:
    Shape shape_;
    std::vector<T> data_;
};

// Deterministic stream derivation: one master seed fans out into independent
// substreams keyed by (tag, index) so resumed runs replay the same noise.
inline uint64_t splitmix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::mt19937_64 substream(uint64_t seed, uint64_t tag, uint64_t index = 0) {
    return std::mt19937_64(splitmix64(splitmix64(seed ^ (tag * 0x9e3779b97f4a7c15ULL)) + index));
}

template <typename T>
Tensor<T> randn(Shape shape, std::mt19937_64& rng, T stddev = T(1)) {
    Tensor<T> t(std::move(shape));
    std::normal_distribution<double> d(0.0, 1.0);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(d(rng)) * stddev;
    return t;
}

template <typename T>
Tensor<T> rand_uniform(Shape shape, std::mt19937_64& rng, T lo = T(0), T hi = T(1)) {
    Tensor<T> t(std::move(shape));
    std::uniform_real_distribution<double> d(static_cast<double>(lo), static_cast<double>(hi));
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(d(rng));
    return t;
}

}  // namespace pvae

#endif
