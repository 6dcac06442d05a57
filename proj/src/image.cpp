#include "multiref/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <memory>
#include <vector>

namespace multiref {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

}  // namespace

Tensor read_png(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    if (!fp) throw io_error("cannot open " + path.string());

    png_byte header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
        throw io_error("not a PNG file: " + path.string());

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw io_error("png_create_read_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw io_error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw io_error("failed to decode " + path.string());
    }

    png_init_io(png, fp.get());
    png_set_sig_bytes(png, 8);
    png_read_info(png, info);

    png_set_expand(png);
    png_set_strip_16(png);
    png_set_strip_alpha(png);
    png_set_gray_to_rgb(png);
    png_read_update_info(png, info);

    const png_uint_32 W = png_get_image_width(png, info);
    const png_uint_32 H = png_get_image_height(png, info);
    const png_uint_32 rowbytes = static_cast<png_uint_32>(png_get_rowbytes(png, info));
    if (rowbytes != W * 3) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw io_error("unexpected PNG channel layout in " + path.string());
    }

    std::vector<png_byte> pixels(static_cast<size_t>(H) * rowbytes);
    std::vector<png_bytep> rows(H);
    for (png_uint_32 i = 0; i < H; ++i) rows[i] = pixels.data() + static_cast<size_t>(i) * rowbytes;
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    Tensor out({3, static_cast<int>(H), static_cast<int>(W)});
    for (png_uint_32 i = 0; i < H; ++i)
        for (png_uint_32 j = 0; j < W; ++j)
            for (int c = 0; c < 3; ++c)
                out.at(c, static_cast<int>(i), static_cast<int>(j)) =
                    static_cast<real>(pixels[static_cast<size_t>(i) * rowbytes + j * 3 + c]) / 255.0;
    return out;
}

namespace {

inline png_byte to_byte(real v) {
    const real c = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
    return static_cast<png_byte>(std::lround(c * 255.0));
}

}  // namespace

void write_png(const std::filesystem::path& path, const Tensor& image) {
    if (image.ndim() != 3 || image.dim(0) != 3)
        throw io_error("write_png: expected (3,H,W), got " + image.shape_str());
    const int H = image.dim(1), W = image.dim(2);

    FilePtr fp(std::fopen(path.c_str(), "wb"));
    if (!fp) throw io_error("cannot create " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw io_error("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw io_error("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw io_error("failed to encode " + path.string());
    }

    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(W), static_cast<png_uint_32>(H), 8,
                 PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<png_byte> row(static_cast<size_t>(W) * 3);
    for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j)
            for (int c = 0; c < 3; ++c) row[static_cast<size_t>(j) * 3 + c] = to_byte(image.at(c, i, j));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Tensor quantize_to_8bit(const Tensor& image) {
    Tensor out(image.shape());
    for (size_t i = 0; i < image.numel(); ++i)
        out[i] = static_cast<real>(to_byte(image[i])) / 255.0;
    return out;
}

}  // namespace multiref
