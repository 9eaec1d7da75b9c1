#include "cag/numerics/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "cag/error.hpp"

namespace cag {

namespace {

static_assert(sizeof(float) == 4 && sizeof(double) == 8);

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_u64(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

template <class Word, class T>
void put_scalars(std::string& out, std::span<const T> values) {
    for (T v : values) {
        const auto w = std::bit_cast<Word>(v);
        for (std::size_t i = 0; i < sizeof(Word); ++i) out.push_back(static_cast<char>((w >> (8 * i)) & 0xFF));
    }
}

template <class Word, class T>
void get_scalars(const unsigned char* p, std::span<T> values) {
    for (auto& v : values) {
        Word w = 0;
        for (std::size_t i = 0; i < sizeof(Word); ++i) w |= static_cast<Word>(p[i]) << (8 * i);
        v = std::bit_cast<T>(w);
        p += sizeof(Word);
    }
}

std::size_t element_size(DType d) {
    switch (d) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::boolean: return 1;
    }
    return 0;
}

} // namespace

std::string encode_tensor(const Tensor& t) {
    if (t.rank() > 255) throw FormatError("CAGT supports at most 255 dims");
    std::string out(kTensorMagic);
    out.push_back(static_cast<char>(kTensorVersion));
    out.push_back(static_cast<char>(t.dtype()));
    out.push_back(static_cast<char>(t.rank()));
    out.push_back(0);
    for (auto d : t.dims()) put_u64(out, d);
    out.reserve(out.size() + t.numel() * element_size(t.dtype()));
    switch (t.dtype()) {
        case DType::f32: put_scalars<std::uint32_t>(out, t.f32()); break;
        case DType::f64: put_scalars<std::uint64_t>(out, t.f64()); break;
        case DType::boolean:
            for (auto b : t.boolean()) out.push_back(static_cast<char>(b));
            break;
    }
    return out;
}

Tensor decode_tensor(std::string_view bytes) {
    const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
    const std::size_t size = bytes.size();
    if (size < 8) throw FormatError("CAGT header truncated");
    if (bytes.substr(0, 4) != kTensorMagic) throw FormatError("bad CAGT magic");
    if (p[4] != kTensorVersion) throw FormatError("unsupported CAGT version " + std::to_string(p[4]));
    if (p[5] > 2) throw FormatError("bad CAGT dtype code " + std::to_string(p[5]));
    if (p[7] != 0) throw FormatError("CAGT reserved byte must be zero");
    const auto dtype = static_cast<DType>(p[5]);
    const std::size_t ndim = p[6];
    if (size < 8 + 8 * ndim) throw FormatError("CAGT dims truncated");
    Dims dims(ndim);
    std::size_t count = 1;
    for (std::size_t i = 0; i < ndim; ++i) {
        dims[i] = get_u64(p + 8 + 8 * i);
        if (dims[i] == 0) throw FormatError("CAGT dim " + std::to_string(i) + " is zero");
        if (count > (std::size_t(1) << 48) / dims[i]) throw FormatError("CAGT dims overflow");
        count *= dims[i];
    }
    const std::size_t offset = 8 + 8 * ndim;
    const std::size_t payload = count * element_size(dtype);
    if (size - offset < payload) throw FormatError("CAGT payload truncated");
    if (size - offset > payload) throw FormatError("CAGT file has trailing bytes");
    Tensor t(dtype, dims);
    switch (dtype) {
        case DType::f32: get_scalars<std::uint32_t>(p + offset, t.f32()); break;
        case DType::f64: get_scalars<std::uint64_t>(p + offset, t.f64()); break;
        case DType::boolean: {
            auto out = t.boolean();
            for (std::size_t i = 0; i < count; ++i) {
                if (p[offset + i] > 1) throw FormatError("CAGT bool payload holds a value other than 0/1");
                out[i] = p[offset + i];
            }
            break;
        }
    }
    return t;
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open " + path.string() + " for writing");
    const std::string bytes = encode_tensor(t);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!f) throw FormatError("write failed for " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open " + path.string());
    const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return decode_tensor(bytes);
}

} // namespace cag
