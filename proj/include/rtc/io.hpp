#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "rtc/tensor.hpp"

// File formats, all explicitly little-endian:
//
//   RTT1 tensor:      "RTT1" | u32 rank | rank x u64 extents | f64 payload,
//                     row-major.
//   RTC1 checkpoint:  "RTC1" | u32 section count | per section:
//                     u32 name length, name bytes, embedded RTT1 tensor.
//   PGM mask:         binary P5, maxval 255, label values stored directly.

namespace rtc::io {

class parse_error : public std::runtime_error {
public:
    parse_error(const std::string& what, std::size_t offset)
        : std::runtime_error(what + " (byte offset " + std::to_string(offset) + ")"),
          offset_(offset) {}
    std::size_t offset() const { return offset_; }

private:
    std::size_t offset_;
};

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

inline void put_f64(std::string& out, double d) {
    std::uint64_t bits;
    static_assert(sizeof(bits) == sizeof(d));
    __builtin_memcpy(&bits, &d, sizeof(bits));
    put_u64(out, bits);
}

struct Reader {
    const std::string& buf;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > buf.size()) throw parse_error(std::string("truncated ") + what, pos);
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint64_t u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i)
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    double f64(const char* what) {
        const std::uint64_t bits = u64(what);
        double d;
        __builtin_memcpy(&d, &bits, sizeof(d));
        return d;
    }
    void expect_magic(const char* magic) {
        need(4, "magic");
        if (buf.compare(pos, 4, magic) != 0)
            throw parse_error(std::string("bad magic, expected ") + magic, pos);
        pos += 4;
    }
};

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& data) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + path + " for writing");
    out.write(data.data(), static_cast<std::streamsize>(data.size()));
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// RTT1
// ---------------------------------------------------------------------------

inline std::string encode_tensor(const Tensor& t) {
    std::string out = "RTT1";
    detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t e : t.shape()) detail::put_u64(out, e);
    for (double v : t.values()) detail::put_f64(out, v);
    return out;
}

inline Tensor decode_tensor(detail::Reader& r) {
    r.expect_magic("RTT1");
    const std::uint32_t rank = r.u32("rank");
    if (rank == 0 || rank > 8) throw parse_error("unreasonable tensor rank", r.pos - 4);
    std::vector<std::size_t> shape(rank);
    std::size_t numel = 1;
    for (auto& e : shape) {
        e = static_cast<std::size_t>(r.u64("extent"));
        if (e == 0) throw parse_error("zero extent", r.pos - 8);
        numel *= e;
    }
    std::vector<double> data(numel);
    for (auto& v : data) v = r.f64("payload");
    return Tensor::from(std::move(shape), std::move(data));
}

inline void save_tensor(const Tensor& t, const std::string& path) {
    detail::write_file(path, encode_tensor(t));
}

inline Tensor load_tensor(const std::string& path) {
    const std::string buf = detail::read_file(path);
    detail::Reader r{buf};
    Tensor t = decode_tensor(r);
    if (r.pos != buf.size()) throw parse_error("trailing bytes after tensor", r.pos);
    return t;
}

// ---------------------------------------------------------------------------
// RTC1 checkpoints (ordered named tensor sections)
// ---------------------------------------------------------------------------

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

inline void save_checkpoint(const NamedTensors& sections, const std::string& path) {
    std::string out = "RTC1";
    detail::put_u32(out, static_cast<std::uint32_t>(sections.size()));
    for (const auto& [name, tensor] : sections) {
        detail::put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        out += encode_tensor(tensor);
    }
    detail::write_file(path, out);
}

inline NamedTensors load_checkpoint(const std::string& path) {
    const std::string buf = detail::read_file(path);
    detail::Reader r{buf};
    r.expect_magic("RTC1");
    const std::uint32_t count = r.u32("section count");
    NamedTensors sections;
    sections.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t len = r.u32("name length");
        r.need(len, "section name");
        std::string name = buf.substr(r.pos, len);
        r.pos += len;
        sections.emplace_back(std::move(name), decode_tensor(r));
    }
    if (r.pos != buf.size()) throw parse_error("trailing bytes after checkpoint", r.pos);
    return sections;
}

// ---------------------------------------------------------------------------
// PGM (P5) label masks
// ---------------------------------------------------------------------------

struct Mask {
    std::size_t height = 0, width = 0;
    std::vector<std::uint8_t> labels;  // row-major
};

inline std::string encode_mask(const Mask& m) {
    std::string out = "P5\n" + std::to_string(m.width) + " " + std::to_string(m.height) + "\n255\n";
    out.append(reinterpret_cast<const char*>(m.labels.data()), m.labels.size());
    return out;
}

inline Mask decode_mask(const std::string& buf) {
    detail::Reader r{buf};
    auto skip_ws = [&] {
        while (r.pos < buf.size() &&
               (buf[r.pos] == ' ' || buf[r.pos] == '\t' || buf[r.pos] == '\n' || buf[r.pos] == '\r'))
            ++r.pos;
    };
    auto read_int = [&](const char* what) -> std::size_t {
        skip_ws();
        const std::size_t start = r.pos;
        std::size_t v = 0;
        while (r.pos < buf.size() && buf[r.pos] >= '0' && buf[r.pos] <= '9') {
            v = v * 10 + static_cast<std::size_t>(buf[r.pos] - '0');
            ++r.pos;
        }
        if (r.pos == start) throw parse_error(std::string("expected integer for ") + what, r.pos);
        return v;
    };
    if (buf.size() < 2 || buf[0] != 'P' || buf[1] != '5') throw parse_error("not a P5 file", 0);
    r.pos = 2;
    const std::size_t w = read_int("width");
    const std::size_t h = read_int("height");
    const std::size_t maxval = read_int("maxval");
    if (maxval != 255) throw parse_error("unsupported maxval", r.pos);
    if (r.pos >= buf.size()) throw parse_error("missing payload separator", r.pos);
    ++r.pos;  // exactly one whitespace byte between maxval and payload
    r.need(w * h, "pixel payload");
    Mask m;
    m.width = w;
    m.height = h;
    m.labels.assign(buf.begin() + static_cast<std::ptrdiff_t>(r.pos),
                    buf.begin() + static_cast<std::ptrdiff_t>(r.pos + w * h));
    r.pos += w * h;
    if (r.pos != buf.size()) throw parse_error("trailing bytes after payload", r.pos);
    return m;
}

inline void save_mask(const Mask& m, const std::string& path) {
    detail::write_file(path, encode_mask(m));
}

inline Mask load_mask(const std::string& path) {
    return decode_mask(detail::read_file(path));
}

}  // namespace rtc::io
