#ifndef PVAE_IO_HPP
#define PVAE_IO_HPP

// Versioned named-array container used for checkpoints and persisted
// datasets. Layout: magic "PVAE1", format version, a key=value metadata
// block, an array directory, the raw little-endian payload, and a CRC32 of
// the payload. Arrays round-trip bit-exactly.

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "pvae/tensor.hpp"

namespace pvae::io {

static_assert(std::endian::native == std::endian::little,
              "container payloads are little-endian");

constexpr char kMagic[5] = {'P', 'V', 'A', 'E', '1'};
constexpr uint16_t kFormatVersion = 1;

enum class DType : uint8_t { f32 = 0, f64 = 1, i32 = 2, u8 = 3 };

inline size_t dtype_size(DType d) {
    switch (d) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::i32: return 4;
        case DType::u8: return 1;
    }
    throw Error("bad dtype");
}

template <typename T> struct dtype_of;
template <> struct dtype_of<float> { static constexpr DType value = DType::f32; };
template <> struct dtype_of<double> { static constexpr DType value = DType::f64; };
template <> struct dtype_of<int32_t> { static constexpr DType value = DType::i32; };
template <> struct dtype_of<uint8_t> { static constexpr DType value = DType::u8; };

inline uint32_t crc32(const uint8_t* data, size_t len, uint32_t crc = 0) {
    static const auto table = [] {
        std::array<uint32_t, 256> t{};
        for (uint32_t i = 0; i < 256; ++i) {
            uint32_t c = i;
            for (int k = 0; k < 8; ++k) c = (c & 1) ? 0xedb88320u ^ (c >> 1) : c >> 1;
            t[i] = c;
        }
        return t;
    }();
    crc ^= 0xffffffffu;
    for (size_t i = 0; i < len; ++i) crc = table[(crc ^ data[i]) & 0xffu] ^ (crc >> 8);
    return crc ^ 0xffffffffu;
}

struct ArrayRecord {
    DType dtype = DType::f32;
    Shape shape;
    std::vector<uint8_t> bytes;

    int64_t numel() const { return shape_numel(shape); }

    template <typename T>
    static ArrayRecord from(const Tensor<T>& t) {
        ArrayRecord r;
        r.dtype = dtype_of<T>::value;
        r.shape = t.shape();
        r.bytes.resize(t.numel() * sizeof(T));
        std::memcpy(r.bytes.data(), t.data(), r.bytes.size());
        return r;
    }

    template <typename T>
    Tensor<T> to() const {
        PVAE_CHECK(dtype == dtype_of<T>::value, "array dtype mismatch on read");
        Tensor<T> t(shape);
        PVAE_CHECK(bytes.size() == static_cast<size_t>(t.numel()) * sizeof(T),
                   "array payload size mismatch");
        std::memcpy(t.data(), bytes.data(), bytes.size());
        return t;
    }
};

class ArrayFile {
public:
    std::map<std::string, std::string> meta;

    void set_meta(const std::string& k, const std::string& v) { meta[k] = v; }
    std::string get_meta(const std::string& k) const {
        auto it = meta.find(k);
        PVAE_CHECK(it != meta.end(), "container metadata key '" << k << "' missing");
        return it->second;
    }
    bool has_meta(const std::string& k) const { return meta.count(k) != 0; }

    template <typename T>
    void put(const std::string& name, const Tensor<T>& t) {
        arrays_[name] = ArrayRecord::from(t);
    }

    bool has(const std::string& name) const { return arrays_.count(name) != 0; }

    template <typename T>
    Tensor<T> get(const std::string& name) const {
        auto it = arrays_.find(name);
        PVAE_CHECK(it != arrays_.end(), "container array '" << name << "' missing");
        return it->second.template to<T>();
    }

    const std::map<std::string, ArrayRecord>& arrays() const { return arrays_; }

    void save(const std::filesystem::path& path) const {
        std::ofstream f(path, std::ios::binary);
        PVAE_CHECK(f.good(), "cannot open '" << path.string() << "' for writing");
        f.write(kMagic, 5);
        write_u16(f, kFormatVersion);
        write_u32(f, static_cast<uint32_t>(meta.size()));
        for (auto& [k, v] : meta) {
            write_str(f, k);
            write_str(f, v);
        }
        write_u32(f, static_cast<uint32_t>(arrays_.size()));
        uint32_t crc = 0;
        uint64_t payload = 0;
        for (auto& [name, rec] : arrays_) {
            write_str(f, name);
            f.put(static_cast<char>(rec.dtype));
            f.put(static_cast<char>(rec.shape.size()));
            for (int d : rec.shape) write_u32(f, static_cast<uint32_t>(d));
            write_u64(f, rec.bytes.size());
            payload += rec.bytes.size();
        }
        for (auto& [name, rec] : arrays_) {
            f.write(reinterpret_cast<const char*>(rec.bytes.data()), rec.bytes.size());
            crc = crc32_update(crc, rec.bytes);
        }
        write_u32(f, crc);
        PVAE_CHECK(f.good(), "write failure on '" << path.string() << "'");
    }

    static ArrayFile load(const std::filesystem::path& path) {
        std::ifstream f(path, std::ios::binary);
        PVAE_CHECK(f.good(), "cannot open '" << path.string() << "'");
        char magic[5];
        f.read(magic, 5);
        PVAE_CHECK(f.good() && std::memcmp(magic, kMagic, 5) == 0,
                   "'" << path.string() << "' is not a PVAE1 container (bad magic)");
        uint16_t version = read_u16(f);
        PVAE_CHECK(version == kFormatVersion, "unsupported container version " << version
                                                  << " (expected " << kFormatVersion << ")");
        ArrayFile af;
        uint32_t nmeta = read_u32(f);
        for (uint32_t i = 0; i < nmeta; ++i) {
            std::string k = read_str(f);
            af.meta[k] = read_str(f);
        }
        uint32_t narr = read_u32(f);
        std::vector<std::string> order;
        for (uint32_t i = 0; i < narr; ++i) {
            std::string name = read_str(f);
            ArrayRecord rec;
            rec.dtype = static_cast<DType>(f.get());
            int ndim = f.get();
            PVAE_CHECK(ndim >= 0 && ndim <= 8, "corrupt array directory");
            for (int d = 0; d < ndim; ++d) rec.shape.push_back(static_cast<int>(read_u32(f)));
            uint64_t nbytes = read_u64(f);
            PVAE_CHECK(nbytes == static_cast<uint64_t>(rec.numel()) * dtype_size(rec.dtype),
                       "array '" << name << "': payload length does not match shape");
            rec.bytes.resize(nbytes);
            af.arrays_[name] = std::move(rec);
            order.push_back(name);
        }
        uint32_t crc = 0;
        for (const std::string& name : order) {
            ArrayRecord& rec = af.arrays_[name];
            f.read(reinterpret_cast<char*>(rec.bytes.data()), rec.bytes.size());
            PVAE_CHECK(f.good(), "truncated payload for array '" << name << "'");
            crc = crc32_update(crc, rec.bytes);
        }
        uint32_t stored = read_u32(f);
        PVAE_CHECK(stored == crc, "checksum failure: payload crc " << std::hex << crc
                                      << " != stored " << stored);
        return af;
    }

private:
    // Streamed crc of the concatenated payloads.
    static uint32_t crc32_update(uint32_t crc, const std::vector<uint8_t>& b) {
        return b.empty() ? crc : crc32(b.data(), b.size(), crc);
    }
    static void write_u16(std::ostream& f, uint16_t v) { f.write(reinterpret_cast<char*>(&v), 2); }
    static void write_u32(std::ostream& f, uint32_t v) { f.write(reinterpret_cast<char*>(&v), 4); }
    static void write_u64(std::ostream& f, uint64_t v) { f.write(reinterpret_cast<char*>(&v), 8); }
    static void write_str(std::ostream& f, const std::string& s) {
        write_u32(f, static_cast<uint32_t>(s.size()));
        f.write(s.data(), s.size());
    }
    static uint16_t read_u16(std::istream& f) {
        uint16_t v;
        f.read(reinterpret_cast<char*>(&v), 2);
        return v;
    }
    static uint32_t read_u32(std::istream& f) {
        uint32_t v;
        f.read(reinterpret_cast<char*>(&v), 4);
        PVAE_CHECK(f.good(), "unexpected end of container");
        return v;
    }
    static uint64_t read_u64(std::istream& f) {
        uint64_t v;
        f.read(reinterpret_cast<char*>(&v), 8);
        PVAE_CHECK(f.good(), "unexpected end of container");
        return v;
    }
    static std::string read_str(std::istream& f) {
        uint32_t n = read_u32(f);
        PVAE_CHECK(n <= (1u << 20), "corrupt string length in container");
        std::string s(n, '\0');
        f.read(s.data(), n);
        PVAE_CHECK(f.good(), "unexpected end of container");
        return s;
    }

    std::map<std::string, ArrayRecord> arrays_;
};

}  // namespace pvae::io

#endif
