#include "emkd/serialize.hpp"

#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "emkd/error.hpp"

namespace emkd::io {

namespace {

constexpr char kMagic[4] = {'E', 'M', 'K', 'D'};
constexpr std::uint32_t kVersion = 1;

std::string offset_str(std::uint64_t offset) { return " at byte offset " + std::to_string(offset); }

}  // namespace

void write_u16(std::ostream& out, std::uint16_t v) {
    const char bytes[2] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff)};
    out.write(bytes, 2);
}

void write_u32(std::ostream& out, std::uint32_t v) {
    char bytes[4];
    for (int i = 0; i < 4; ++i) {
        bytes[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    }
    out.write(bytes, 4);
}

void read_exact(std::istream& in, char* dst, std::size_t n, std::uint64_t offset, const char* what) {
    in.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in.gcount()) != n) {
        throw FormatError(std::string("truncated ") + what + offset_str(offset));
    }
}

std::uint16_t read_u16(std::istream& in, std::uint64_t offset, const char* what) {
    unsigned char bytes[2];
    read_exact(in, reinterpret_cast<char*>(bytes), 2, offset, what);
    return static_cast<std::uint16_t>(bytes[0] | (bytes[1] << 8));
}

std::uint32_t read_u32(std::istream& in, std::uint64_t offset, const char* what) {
    unsigned char bytes[4];
    read_exact(in, reinterpret_cast<char*>(bytes), 4, offset, what);
    return static_cast<std::uint32_t>(bytes[0]) | (static_cast<std::uint32_t>(bytes[1]) << 8) |
           (static_cast<std::uint32_t>(bytes[2]) << 16) | (static_cast<std::uint32_t>(bytes[3]) << 24);
}

void write_tensor_record(std::ostream& out, const Tensor& t, Dtype dtype) {
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    const char dt = static_cast<char>(dtype);
    out.write(&dt, 1);
    const char rank = static_cast<char>(t.rank());
    out.write(&rank, 1);
    for (int i = 0; i < t.rank(); ++i) {
        write_u32(out, static_cast<std::uint32_t>(t.extent(i)));
    }
    if (dtype == Dtype::f64) {
        for (double v : t.data()) {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            char bytes[8];
            for (int i = 0; i < 8; ++i) {
                bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
            }
            out.write(bytes, 8);
        }
    } else {
        for (double v : t.data()) {
            const float f = static_cast<float>(v);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            write_u32(out, bits);
        }
    }
}

Tensor read_tensor_record(std::istream& in, std::uint64_t base_offset) {
    std::uint64_t pos = base_offset;
    char magic[4];
    read_exact(in, magic, 4, pos, "tensor record magic");
    if (std::memcmp(magic, kMagic, 4) != 0) {
        throw FormatError("bad tensor record magic" + offset_str(pos));
    }
    pos += 4;
    const std::uint32_t version = read_u32(in, pos, "tensor record version");
    if (version != kVersion) {
        throw FormatError("unsupported tensor record version " + std::to_string(version) + offset_str(pos));
    }
    pos += 4;
    char dt_byte;
    read_exact(in, &dt_byte, 1, pos, "tensor record dtype");
    if (dt_byte != 0 && dt_byte != 1) {
        throw FormatError("unknown tensor dtype " + std::to_string(int(dt_byte)) + offset_str(pos));
    }
    const Dtype dtype = static_cast<Dtype>(dt_byte);
    pos += 1;
    char rank_byte;
    read_exact(in, &rank_byte, 1, pos, "tensor record rank");
    const int rank = static_cast<int>(rank_byte);
    if (rank < 1 || rank > 4) {
        throw FormatError("tensor rank out of range" + offset_str(pos));
    }
    pos += 1;
    std::vector<int> shape(static_cast<std::size_t>(rank));
    std::size_t numel = 1;
    for (int i = 0; i < rank; ++i) {
        const std::uint32_t e = read_u32(in, pos, "tensor extent");
        pos += 4;
        if (e == 0) {
            throw FormatError("zero tensor extent" + offset_str(pos - 4));
        }
        shape[static_cast<std::size_t>(i)] = static_cast<int>(e);
        numel *= e;
    }
    std::vector<double> payload(numel);
    if (dtype == Dtype::f64) {
        for (std::size_t i = 0; i < numel; ++i) {
            unsigned char bytes[8];
            read_exact(in, reinterpret_cast<char*>(bytes), 8, pos, "tensor payload");
            pos += 8;
            std::uint64_t bits = 0;
            for (int b = 7; b >= 0; --b) {
                bits = (bits << 8) | bytes[b];
            }
            std::memcpy(&payload[i], &bits, 8);
        }
    } else {
        for (std::size_t i = 0; i < numel; ++i) {
            const std::uint32_t bits = read_u32(in, pos, "tensor payload");
            pos += 4;
            float f;
            std::memcpy(&f, &bits, 4);
            payload[i] = static_cast<double>(f);
        }
    }
    return Tensor::from_data(std::move(shape), std::move(payload), false);
}

}  // namespace emkd::io
