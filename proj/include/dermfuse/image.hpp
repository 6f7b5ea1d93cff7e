#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <zlib.h>

#include "dermfuse/common.hpp"

namespace dermfuse {

// ---------------------------------------------------------------------------
// Image: 3-channel planar RGB, values in [0,1].
// ---------------------------------------------------------------------------
struct Image {
    int64_t height = 0, width = 0;
    std::vector<double> data;  // [3][height][width]

    static Image blank(int64_t h, int64_t w, double r = 0.0, double g = 0.0, double b = 0.0) {
        if (h < 1 || w < 1) throw ShapeError("image: extents must be positive");
        Image im;
        im.height = h;
        im.width = w;
        im.data.resize(size_t(3 * h * w));
        for (int64_t i = 0; i < h * w; ++i) {
            im.data[size_t(i)] = r;
            im.data[size_t(h * w + i)] = g;
            im.data[size_t(2 * h * w + i)] = b;
        }
        return im;
    }

    double& at(int64_t c, int64_t y, int64_t x) {
        return data[size_t((c * height + y) * width + x)];
    }
    double at(int64_t c, int64_t y, int64_t x) const {
        return data[size_t((c * height + y) * width + x)];
    }
    int64_t pixels() const { return height * width; }

    void clamp01() {
        for (double& v : data) v = std::min(1.0, std::max(0.0, v));
    }
};

inline double luma(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

namespace detail {

inline uint32_t read_be32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

inline void append_be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

inline uint8_t paeth(int a, int b, int c) {
    const int p = a + b - c;
    const int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
    if (pa <= pb && pa <= pc) return uint8_t(a);
    if (pb <= pc) return uint8_t(b);
    return uint8_t(c);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// PNG: 8-bit gray / gray+alpha / RGB / RGBA, non-interlaced. Alpha is
// dropped on load; gray replicates across channels. Encoding writes 8-bit
// RGB with unfiltered scanlines.
// ---------------------------------------------------------------------------

inline Image decode_png(const std::vector<uint8_t>& bytes) {
    static const uint8_t sig[8] = {137, 80, 78, 71, 13, 10, 26, 10};
    if (bytes.size() < 8 || std::memcmp(bytes.data(), sig, 8) != 0)
        throw DataError("png: bad signature");

    int64_t w = 0, h = 0;
    int color = -1, channels = 0;
    std::vector<uint8_t> idat;
    size_t pos = 8;
    bool seen_end = false;
    while (pos + 8 <= bytes.size()) {
        const uint32_t len = detail::read_be32(bytes.data() + pos);
        if (pos + 12 + len > bytes.size()) throw DataError("png: truncated chunk");
        const std::string type(bytes.begin() + long(pos) + 4, bytes.begin() + long(pos) + 8);
        const uint8_t* payload = bytes.data() + pos + 8;
        if (type == "IHDR") {
            if (len != 13) throw DataError("png: bad IHDR");
            w = detail::read_be32(payload);
            h = detail::read_be32(payload + 4);
            const int depth = payload[8];
            color = payload[9];
            if (depth != 8) throw DataError("png: only 8-bit depth supported");
            if (payload[10] != 0 || payload[11] != 0) throw DataError("png: bad compression/filter");
            if (payload[12] != 0) throw DataError("png: interlacing not supported");
            switch (color) {
                case 0: channels = 1; break;
                case 2: channels = 3; break;
                case 4: channels = 2; break;
                case 6: channels = 4; break;
                default: throw DataError("png: unsupported color type " + std::to_string(color));
            }
        } else if (type == "IDAT") {
            idat.insert(idat.end(), payload, payload + len);
        } else if (type == "IEND") {
            seen_end = true;
            break;
        }
        pos += 12 + len;
    }
    if (w < 1 || h < 1 || channels == 0) throw DataError("png: missing IHDR");
    if (!seen_end || idat.empty()) throw DataError("png: missing image data");

    const int64_t rowbytes = w * channels;
    std::vector<uint8_t> raw(size_t(h * (rowbytes + 1)), 0);
    uLongf raw_len = uLongf(raw.size());
    if (uncompress(raw.data(), &raw_len, idat.data(), uLong(idat.size())) != Z_OK ||
        int64_t(raw_len) != int64_t(raw.size()))
        throw DataError("png: inflate failed");

    // undo per-row filters in place
    std::vector<uint8_t> prev(size_t(rowbytes), 0);
    std::vector<uint8_t> cur(size_t(rowbytes), 0);
    std::vector<uint8_t> pixels;
    pixels.reserve(size_t(h * rowbytes));
    const int bpp = channels;
    for (int64_t y = 0; y < h; ++y) {
        const uint8_t* row = raw.data() + y * (rowbytes + 1);
        const uint8_t filter = row[0];
        const uint8_t* src = row + 1;
        for (int64_t x = 0; x < rowbytes; ++x) {
            const int left = x >= bpp ? cur[size_t(x - bpp)] : 0;
            const int up = prev[size_t(x)];
            const int upleft = x >= bpp ? prev[size_t(x - bpp)] : 0;
            int v = src[x];
            switch (filter) {
                case 0: break;
                case 1: v += left; break;
                case 2: v += up; break;
                case 3: v += (left + up) / 2; break;
                case 4: v += detail::paeth(left, up, upleft); break;
                default: throw DataError("png: unknown filter " + std::to_string(filter));
            }
            cur[size_t(x)] = uint8_t(v & 0xff);
        }
        pixels.insert(pixels.end(), cur.begin(), cur.end());
        std::swap(prev, cur);
    }

    Image im = Image::blank(h, w);
    const int64_t plane = h * w;
    for (int64_t i = 0; i < plane; ++i) {
        const uint8_t* px = pixels.data() + i * channels;
        double r, g, b;
        if (channels <= 2) {
            r = g = b = px[0] / 255.0;
        } else {
            r = px[0] / 255.0;
            g = px[1] / 255.0;
            b = px[2] / 255.0;
        }
        im.data[size_t(i)] = r;
        im.data[size_t(plane + i)] = g;
        im.data[size_t(2 * plane + i)] = b;
    }
    return im;
}

inline std::vector<uint8_t> encode_png(const Image& im) {
    const int64_t h = im.height, w = im.width, plane = h * w;
    std::vector<uint8_t> raw(size_t(h * (w * 3 + 1)), 0);
    auto to_byte = [](double v) {
        return uint8_t(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
    };
    for (int64_t y = 0; y < h; ++y) {
        uint8_t* row = raw.data() + y * (w * 3 + 1);
        row[0] = 0;  // unfiltered
        for (int64_t x = 0; x < w; ++x) {
            row[1 + x * 3] = to_byte(im.data[size_t(y * w + x)]);
            row[2 + x * 3] = to_byte(im.data[size_t(plane + y * w + x)]);
            row[3 + x * 3] = to_byte(im.data[size_t(2 * plane + y * w + x)]);
        }
    }
    uLongf comp_len = compressBound(uLong(raw.size()));
    std::vector<uint8_t> comp(size_t(comp_len), 0);
    if (compress2(comp.data(), &comp_len, raw.data(), uLong(raw.size()), 6) != Z_OK)
        throw IoError("png: deflate failed");
    comp.resize(size_t(comp_len));

    std::vector<uint8_t> out = {137, 80, 78, 71, 13, 10, 26, 10};
    auto chunk = [&out](const char* type, const std::vector<uint8_t>& payload) {
        detail::append_be32(out, uint32_t(payload.size()));
        std::vector<uint8_t> body(type, type + 4);
        body.insert(body.end(), payload.begin(), payload.end());
        out.insert(out.end(), body.begin(), body.end());
        detail::append_be32(out, uint32_t(crc32(0, body.data(), uInt(body.size()))));
    };
    std::vector<uint8_t> ihdr;
    detail::append_be32(ihdr, uint32_t(w));
    detail::append_be32(ihdr, uint32_t(h));
    ihdr.push_back(8);  // depth
    ihdr.push_back(2);  // RGB
    ihdr.push_back(0);
    ihdr.push_back(0);
    ihdr.push_back(0);
    chunk("IHDR", ihdr);
    chunk("IDAT", comp);
    chunk("IEND", {});
    return out;
}

// ---------------------------------------------------------------------------
// Binary PPM (P6), 8-bit
// ---------------------------------------------------------------------------

inline Image decode_ppm(const std::vector<uint8_t>& bytes) {
    size_t pos = 0;
    auto skip_space = [&] {
        while (pos < bytes.size()) {
            if (std::isspace(bytes[pos])) {
                ++pos;
            } else if (bytes[pos] == '#') {
                while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
            } else {
                break;
            }
        }
    };
    auto read_int = [&]() -> int64_t {
        skip_space();
        int64_t v = 0;
        bool any = false;
        while (pos < bytes.size() && std::isdigit(bytes[pos])) {
            v = v * 10 + (bytes[pos] - '0');
            ++pos;
            any = true;
        }
        if (!any) throw DataError("ppm: malformed header");
        return v;
    };
    if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw DataError("ppm: not P6");
    pos = 2;
    const int64_t w = read_int();
    const int64_t h = read_int();
    const int64_t maxval = read_int();
    if (maxval != 255) throw DataError("ppm: only maxval 255 supported");
    ++pos;  // single whitespace after maxval
    if (pos + size_t(3 * w * h) > bytes.size()) throw DataError("ppm: truncated pixel data");
    Image im = Image::blank(h, w);
    const int64_t plane = h * w;
    for (int64_t i = 0; i < plane; ++i) {
        im.data[size_t(i)] = bytes[pos + size_t(i * 3)] / 255.0;
        im.data[size_t(plane + i)] = bytes[pos + size_t(i * 3 + 1)] / 255.0;
        im.data[size_t(2 * plane + i)] = bytes[pos + size_t(i * 3 + 2)] / 255.0;
    }
    return im;
}

inline std::vector<uint8_t> encode_ppm(const Image& im) {
    const std::string header =
        "P6\n" + std::to_string(im.width) + " " + std::to_string(im.height) + "\n255\n";
    std::vector<uint8_t> out(header.begin(), header.end());
    const int64_t plane = im.pixels();
    auto to_byte = [](double v) {
        return uint8_t(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
    };
    for (int64_t i = 0; i < plane; ++i) {
        out.push_back(to_byte(im.data[size_t(i)]));
        out.push_back(to_byte(im.data[size_t(plane + i)]));
        out.push_back(to_byte(im.data[size_t(2 * plane + i)]));
    }
    return out;
}

// ---------------------------------------------------------------------------
// File IO
// ---------------------------------------------------------------------------

inline std::vector<uint8_t> read_file_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
    if (!out) throw IoError("short write to " + path);
}

inline Image load_image(const std::string& path) {
    const std::vector<uint8_t> bytes = read_file_bytes(path);
    if (bytes.size() >= 8 && bytes[0] == 137 && bytes[1] == 'P') return decode_png(bytes);
    if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] == '6') return decode_ppm(bytes);
    throw DataError("unrecognized image format: " + path);
}

inline void save_png(const std::string& path, const Image& im) {
    write_file_bytes(path, encode_png(im));
}

inline void save_ppm(const std::string& path, const Image& im) {
    write_file_bytes(path, encode_ppm(im));
}

}  // namespace dermfuse
