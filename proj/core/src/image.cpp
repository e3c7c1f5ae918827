#include "mmfl/image.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <csetjmp>
#include <memory>

#include "mmfl/rng.hpp"

namespace mmfl {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

Image from_rgb8(const std::vector<unsigned char>& rgb, int h, int w) {
    Image img(h, w);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) =
                    rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 255.0f;
    return img;
}

Image read_png_file(std::FILE* fp, const std::string& path) {
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(png != nullptr, "png reader allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        require(false, "png info allocation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        require(false, "failed to decode png: " + path);
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    // Normalize everything to 8-bit RGB.
    png_set_strip_16(png);
    png_set_palette_to_rgb(png);
    png_set_expand_gray_1_2_4_to_8(png);
    png_set_gray_to_rgb(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const int w = static_cast<int>(png_get_image_width(png, info));
    const int h = static_cast<int>(png_get_image_height(png, info));
    std::vector<unsigned char> rgb(static_cast<std::size_t>(h) * w * 3);
    std::vector<png_bytep> rows(static_cast<std::size_t>(h));
    for (int y = 0; y < h; ++y) rows[static_cast<std::size_t>(y)] = rgb.data() + static_cast<std::size_t>(y) * w * 3;
    png_read_image(png, rows.data());
    png_destroy_read_struct(&png, &info, nullptr);
    return from_rgb8(rgb, h, w);
}

struct JpegErr {
    jpeg_error_mgr mgr;
    std::jmp_buf jump;
};

void jpeg_error_exit(j_common_ptr cinfo) {
    std::longjmp(reinterpret_cast<JpegErr*>(cinfo->err)->jump, 1);
}

Image read_jpeg_file(std::FILE* fp, const std::string& path) {
    jpeg_decompress_struct cinfo;
    JpegErr err;
    cinfo.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_error_exit;
    if (setjmp(err.jump)) {
        jpeg_destroy_decompress(&cinfo);
        require(false, "failed to decode jpeg: " + path);
    }
    jpeg_create_decompress(&cinfo);
    jpeg_stdio_src(&cinfo, fp);
    jpeg_read_header(&cinfo, TRUE);
    cinfo.out_color_space = JCS_RGB;
    jpeg_start_decompress(&cinfo);

    const int w = static_cast<int>(cinfo.output_width);
    const int h = static_cast<int>(cinfo.output_height);
    std::vector<unsigned char> rgb(static_cast<std::size_t>(h) * w * 3);
    while (cinfo.output_scanline < cinfo.output_height) {
        unsigned char* row = rgb.data() + static_cast<std::size_t>(cinfo.output_scanline) * w * 3;
        jpeg_read_scanlines(&cinfo, &row, 1);
    }
    jpeg_finish_decompress(&cinfo);
    jpeg_destroy_decompress(&cinfo);
    return from_rgb8(rgb, h, w);
}

float clamp01(float v) { return std::min(1.0f, std::max(0.0f, v)); }

// Axis-aligned bilinear tap with edge clamping (resize-style sampling).
float sample_clamped(const Image& img, int c, double y, double x) {
    const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
    const double fy = y - y0, fx = x - x0;
    auto px = [&](int yy, int xx) {
        yy = std::min(img.height - 1, std::max(0, yy));
        xx = std::min(img.width - 1, std::max(0, xx));
        return img.at(c, yy, xx);
    };
    return static_cast<float>((1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                              fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1)));
}

// Bilinear tap where out-of-frame contributions read as `fill` (rotation).
float sample_filled(const Image& img, int c, double y, double x, float fill) {
    const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
    const double fy = y - y0, fx = x - x0;
    auto px = [&](int yy, int xx) {
        if (yy < 0 || yy >= img.height || xx < 0 || xx >= img.width) return fill;
        return img.at(c, yy, xx);
    };
    return static_cast<float>((1 - fy) * ((1 - fx) * px(y0, x0) + fx * px(y0, x0 + 1)) +
                              fy * ((1 - fx) * px(y0 + 1, x0) + fx * px(y0 + 1, x0 + 1)));
}

Image resize(const Image& img, int out_h, int out_w) {
    if (out_h == img.height && out_w == img.width) return img;
    Image out(out_h, out_w);
    const double sy = static_cast<double>(img.height) / out_h;
    const double sx = static_cast<double>(img.width) / out_w;
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x)
                out.at(c, y, x) =
                    sample_clamped(img, c, (y + 0.5) * sy - 0.5, (x + 0.5) * sx - 0.5);
    return out;
}

Image flip_horizontal(const Image& img) {
    Image out(img.height, img.width);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
    return out;
}

Image rotate(const Image& img, double degrees, const std::array<float, 3>& fill) {
    const double rad = degrees * std::acos(-1.0) / 180.0;
    const double cs = std::cos(rad), sn = std::sin(rad);
    const double cy = (img.height - 1) / 2.0, cx = (img.width - 1) / 2.0;
    Image out(img.height, img.width);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x) {
                // Inverse map: rotate the output grid back into the source.
                const double dy = y - cy, dx = x - cx;
                const double sy = cy + cs * dy - sn * dx;
                const double sx = cx + sn * dy + cs * dx;
                out.at(c, y, x) = sample_filled(img, c, sy, sx, fill[static_cast<std::size_t>(c)]);
            }
    return out;
}

}  // namespace

Image read_image(const std::string& path) {
    FilePtr fp(std::fopen(path.c_str(), "rb"));
    require(fp != nullptr, "cannot open image: " + path);
    unsigned char magic[2] = {0, 0};
    const std::size_t got = std::fread(magic, 1, 2, fp.get());
    std::rewind(fp.get());
    require(got == 2, "image file too short: " + path);
    if (magic[0] == 0x89 && magic[1] == 'P') return read_png_file(fp.get(), path);
    if (magic[0] == 0xFF && magic[1] == 0xD8) return read_jpeg_file(fp.get(), path);
    require(false, "unsupported image format (expect png or jpeg): " + path);
    return {};
}

void write_png(const std::string& path, const Image& img) {
    require(img.height > 0 && img.width > 0, "write_png: empty image");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    require(fp != nullptr, "cannot write image: " + path);
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    require(png != nullptr, "png writer allocation failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        require(false, "png info allocation failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        require(false, "failed to encode png: " + path);
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width),
                 static_cast<png_uint_32>(img.height), 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * 3);
    for (int y = 0; y < img.height; ++y) {
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                row[static_cast<std::size_t>(x) * 3 + c] = static_cast<unsigned char>(
                    std::lround(clamp01(img.at(c, y, x)) * 255.0f));
        png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

void write_jpeg(const std::string& path, const Image& img, int quality) {
    require(img.height > 0 && img.width > 0, "write_jpeg: empty image");
    require(quality >= 1 && quality <= 100, "write_jpeg: quality must lie in [1,100]");
    FilePtr fp(std::fopen(path.c_str(), "wb"));
    require(fp != nullptr, "cannot write image: " + path);

    jpeg_compress_struct cinfo;
    JpegErr err;
    cinfo.err = jpeg_std_error(&err.mgr);
    err.mgr.error_exit = jpeg_error_exit;
    if (setjmp(err.jump)) {
        jpeg_destroy_compress(&cinfo);
        require(false, "failed to encode jpeg: " + path);
    }
    jpeg_create_compress(&cinfo);
    jpeg_stdio_dest(&cinfo, fp.get());
    cinfo.image_width = static_cast<JDIMENSION>(img.width);
    cinfo.image_height = static_cast<JDIMENSION>(img.height);
    cinfo.input_components = 3;
    cinfo.in_color_space = JCS_RGB;
    jpeg_set_defaults(&cinfo);
    jpeg_set_quality(&cinfo, quality, TRUE);
    jpeg_start_compress(&cinfo, TRUE);

    std::vector<unsigned char> row(static_cast<std::size_t>(img.width) * 3);
    while (cinfo.next_scanline < cinfo.image_height) {
        const int y = static_cast<int>(cinfo.next_scanline);
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                row[static_cast<std::size_t>(x) * 3 + c] = static_cast<unsigned char>(
                    std::lround(clamp01(img.at(c, y, x)) * 255.0f));
        unsigned char* rp = row.data();
        jpeg_write_scanlines(&cinfo, &rp, 1);
    }
    jpeg_finish_compress(&cinfo);
    jpeg_destroy_compress(&cinfo);
}

Image pad_resize(const Image& img, int target, const std::array<float, 3>& fill) {
    require(target > 0, "pad_resize: target side must be positive");
    require(img.height >= 1 && img.width >= 1, "pad_resize: empty image");
    int out_h, out_w;
    if (img.height >= img.width) {
        out_h = target;
        out_w = std::max(1, static_cast<int>(std::lround(
                                static_cast<double>(img.width) * target / img.height)));
    } else {
        out_w = target;
        out_h = std::max(1, static_cast<int>(std::lround(
                                static_cast<double>(img.height) * target / img.width)));
    }
    const Image scaled = resize(img, out_h, out_w);
    Image out(target, target);
    const int top = (target - out_h) / 2, left = (target - out_w) / 2;
    for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < target; ++y)
            for (int x = 0; x < target; ++x) out.at(c, y, x) = fill[static_cast<std::size_t>(c)];
        for (int y = 0; y < out_h; ++y)
            for (int x = 0; x < out_w; ++x) out.at(c, top + y, left + x) = scaled.at(c, y, x);
    }
    return out;
}

Image crop(const Image& img, int x, int y, int w, int h) {
    const int x0 = std::min(std::max(0, x), img.width - 1);
    const int y0 = std::min(std::max(0, y), img.height - 1);
    const int x1 = std::min(img.width, std::max(x0 + 1, x + w));
    const int y1 = std::min(img.height, std::max(y0 + 1, y + h));
    Image out(y1 - y0, x1 - x0);
    for (int c = 0; c < 3; ++c)
        for (int yy = y0; yy < y1; ++yy)
            for (int xx = x0; xx < x1; ++xx) out.at(c, yy - y0, xx - x0) = img.at(c, yy, xx);
    return out;
}

Image augment(const Image& img, const AugmentConfig& cfg, std::uint64_t seed) {
    Rng rng(seed);
    Image out = img;

    if (rng.uniform() < cfg.flip_prob) out = flip_horizontal(out);

    const bool do_rotate = rng.uniform() < cfg.rotate_prob;
    const double degrees = rng.uniform(-cfg.rotate_degrees, cfg.rotate_degrees);
    if (do_rotate && degrees != 0.0) out = rotate(out, degrees, cfg.fill);

    const bool do_crop = rng.uniform() < cfg.crop_prob;
    const double keep = rng.uniform(std::min(1.0, std::max(0.0, cfg.crop_min_scale)), 1.0);
    if (do_crop && keep < 1.0) {
        const int ch = std::max(1, static_cast<int>(std::lround(out.height * keep)));
        const int cw = std::max(1, static_cast<int>(std::lround(out.width * keep)));
        out = crop(out, (out.width - cw) / 2, (out.height - ch) / 2, cw, ch);
    }

    const bool do_jitter = rng.uniform() < cfg.jitter_prob;
    const double s = std::max(0.0, cfg.jitter_strength);
    const double brightness = rng.uniform(-s, s);
    const double contrast = 1.0 + rng.uniform(-s, s);
    const double saturation = 1.0 + rng.uniform(-s, s);
    if (do_jitter && s > 0.0) {
        for (int y = 0; y < out.height; ++y)
            for (int x = 0; x < out.width; ++x) {
                const double r = out.at(0, y, x), g = out.at(1, y, x), b = out.at(2, y, x);
                const double grey = 0.299 * r + 0.587 * g + 0.114 * b;
                for (int c = 0; c < 3; ++c) {
                    double v = out.at(c, y, x);
                    v = grey + (v - grey) * saturation;            // pull toward/away grey
                    v = 0.5 + (v - 0.5) * contrast + brightness;   // affine tone map
                    out.at(c, y, x) = clamp01(static_cast<float>(v));
                }
            }
    }
    return out;
}

void copy_into_batch(const Image& img, Tensor& batch, int row) {
    require(batch.ndim() == 4 && batch.dim(1) == 3, "copy_into_batch: batch must be (B,3,H,W)");
    require(batch.dim(2) == img.height && batch.dim(3) == img.width,
            "copy_into_batch: image size mismatch");
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                batch.at(row, c, y, x) = static_cast<double>(img.at(c, y, x));
}

Image image_from_batch(const Tensor& batch, int row) {
    require(batch.ndim() == 4 && batch.dim(1) == 3, "image_from_batch: batch must be (B,3,H,W)");
    Image img(batch.dim(2), batch.dim(3));
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < img.height; ++y)
            for (int x = 0; x < img.width; ++x)
                img.at(c, y, x) = static_cast<float>(batch.at(row, c, y, x));
    return img;
}

}  // namespace mmfl
