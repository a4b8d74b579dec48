// Copyright (c) 2026 The diffkit Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "diffkit/errors.hpp"

namespace diffkit::image_io {

/// Interleaved 8-bit RGB image.
struct ImageU8 {
    int width = 0;
    int height = 0;
    std::vector<unsigned char> rgb; // 3 * width * height, row-major
};

inline void write_png(const std::string& path, const ImageU8& img) {
    if (static_cast<std::size_t>(img.width) * img.height * 3 != img.rgb.size())
        throw DataError("write_png: pixel buffer does not match dimensions");
    std::FILE* fp = std::fopen(path.c_str(), "wb");
    if (!fp) throw DataError("write_png: cannot open " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_write_struct(&png, info ? &info : nullptr);
        std::fclose(fp);
        throw DataError("write_png: libpng failure for " + path);
    }
    png_init_io(png, fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y)
        rows[y] = const_cast<png_bytep>(img.rgb.data() + static_cast<std::size_t>(y) * img.width * 3);
    png_write_image(png, rows.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
}

inline ImageU8 read_png(const std::string& path) {
    std::FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw DataError("read_png: cannot open " + path);
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info || setjmp(png_jmpbuf(png))) {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
        std::fclose(fp);
        throw DataError("read_png: libpng failure for " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);
    // Normalize everything to 8-bit RGB.
    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);
    ImageU8 img;
    img.width = static_cast<int>(png_get_image_width(png, info));
    img.height = static_cast<int>(png_get_image_height(png, info));
    img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
    for (int y = 0; y < img.height; ++y)
        rows[y] = img.rgb.data() + static_cast<std::size_t>(y) * img.width * 3;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

/// Binary PPM (P6), 8-bit.
inline void write_ppm(const std::string& path, const ImageU8& img) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("write_ppm: cannot open " + path);
    os << "P6\n" << img.width << " " << img.height << "\n255\n";
    os.write(reinterpret_cast<const char*>(img.rgb.data()),
             static_cast<std::streamsize>(img.rgb.size()));
}

inline ImageU8 read_ppm(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("read_ppm: cannot open " + path);
    std::string magic;
    is >> magic;
    if (magic != "P6") throw DataError("read_ppm: not a binary PPM: " + path);
    auto next_int = [&is, &path]() {
        // Skip whitespace and '#' comment lines.
        int c = is.get();
        while (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '#') {
            if (c == '#')
                while (c != '\n' && c != EOF) c = is.get();
            c = is.get();
        }
        int value = 0;
        bool any = false;
        while (c >= '0' && c <= '9') {
            value = value * 10 + (c - '0');
            any = true;
            c = is.get();
        }
        if (!any) throw DataError("read_ppm: malformed header: " + path);
        return value;
    };
    ImageU8 img;
    img.width = next_int();
    img.height = next_int();
    const int maxval = next_int();
    if (maxval != 255) throw DataError("read_ppm: only 8-bit PPM supported: " + path);
    img.rgb.resize(static_cast<std::size_t>(img.width) * img.height * 3);
    is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
    if (is.gcount() != static_cast<std::streamsize>(img.rgb.size()))
        throw DataError("read_ppm: truncated pixel data: " + path);
    return img;
}

/// Dispatch on extension (.png / .ppm).
inline ImageU8 read_image(const std::string& path) {
    const auto dot = path.rfind('.');
    const std::string ext = dot == std::string::npos ? "" : path.substr(dot);
    if (ext == ".png") return read_png(path);
    if (ext == ".ppm") return read_ppm(path);
    throw DataError("read_image: unsupported format: " + path);
}

/// Bilinear resize of interleaved RGB.
inline ImageU8 resize_bilinear(const ImageU8& src, int out_w, int out_h) {
    ImageU8 out;
    out.width = out_w;
    out.height = out_h;
    out.rgb.resize(static_cast<std::size_t>(out_w) * out_h * 3);
    const double sx = static_cast<double>(src.width) / out_w;
    const double sy = static_cast<double>(src.height) / out_h;
    for (int y = 0; y < out_h; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        const int y0 = std::max(0, std::min(src.height - 1, static_cast<int>(std::floor(fy))));
        const int y1 = std::min(src.height - 1, y0 + 1);
        const double wy = std::min(1.0, std::max(0.0, fy - y0));
        for (int x = 0; x < out_w; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            const int x0 = std::max(0, std::min(src.width - 1, static_cast<int>(std::floor(fx))));
            const int x1 = std::min(src.width - 1, x0 + 1);
            const double wx = std::min(1.0, std::max(0.0, fx - x0));
            for (int ch = 0; ch < 3; ++ch) {
                const double v00 = src.rgb[(static_cast<std::size_t>(y0) * src.width + x0) * 3 + ch];
                const double v01 = src.rgb[(static_cast<std::size_t>(y0) * src.width + x1) * 3 + ch];
                const double v10 = src.rgb[(static_cast<std::size_t>(y1) * src.width + x0) * 3 + ch];
                const double v11 = src.rgb[(static_cast<std::size_t>(y1) * src.width + x1) * 3 + ch];
                const double v = (1 - wy) * ((1 - wx) * v00 + wx * v01) +
                                 wy * ((1 - wx) * v10 + wx * v11);
                out.rgb[(static_cast<std::size_t>(y) * out_w + x) * 3 + ch] =
                    static_cast<unsigned char>(std::lround(std::min(255.0, std::max(0.0, v))));
            }
        }
    }
    return out;
}

} // namespace diffkit::image_io
