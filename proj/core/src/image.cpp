#include "dvit/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <memory>

namespace dvit {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const {
        if (f) std::fclose(f);
    }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

std::uint8_t to_u8(float v) {
    const float c = std::min(1.0f, std::max(0.0f, v));
    return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

void write_png_impl(const std::filesystem::path& path, int width, int height, int color_type,
                    const std::vector<std::uint8_t>& rows_interleaved) {
    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path.string());

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw IoError("png_create_write_struct failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw IoError("png_create_info_struct failed");
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw IoError("png write failed: " + path.string());
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 color_type, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    // Pin encoder settings so identical pixels give identical bytes.
    png_set_compression_level(png, 6);
    png_set_filter(png, 0, PNG_FILTER_NONE);
    png_write_info(png, info);

    const int stride = width * (color_type == PNG_COLOR_TYPE_RGB ? 3 : 1);
    for (int y = 0; y < height; ++y)
        png_write_row(png, const_cast<png_bytep>(rows_interleaved.data() + static_cast<std::size_t>(y) * stride));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

}  // namespace

void write_png_rgb(const std::filesystem::path& path, const Image& img) {
    std::vector<std::uint8_t> rows(static_cast<std::size_t>(img.width) * img.height * 3);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x)
            for (int c = 0; c < 3; ++c)
                rows[(static_cast<std::size_t>(y) * img.width + x) * 3 + c] = to_u8(img.at(c, y, x));
    write_png_impl(path, img.width, img.height, PNG_COLOR_TYPE_RGB, rows);
}

void write_png_gray(const std::filesystem::path& path, const LabelMap& mask) {
    std::vector<std::uint8_t> rows(mask.data.begin(), mask.data.end());
    write_png_impl(path, mask.width, mask.height, PNG_COLOR_TYPE_GRAY, rows);
}

namespace {

struct PngReader {
    png_structp png = nullptr;
    png_infop info = nullptr;
    ~PngReader() {
        if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    }
};

void read_png_rows(const std::filesystem::path& path, bool want_rgb, int& width, int& height,
                   std::vector<std::uint8_t>& out) {
    FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw DecodeError("cannot open image: " + path.string());

    std::uint8_t header[8];
    if (std::fread(header, 1, 8, fp.get()) != 8 || png_sig_cmp(header, 0, 8))
        throw DecodeError("not a PNG file: " + path.string());

    PngReader r;
    r.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!r.png) throw DecodeError("png_create_read_struct failed");
    r.info = png_create_info_struct(r.png);
    if (!r.info) throw DecodeError("png_create_info_struct failed");
    if (setjmp(png_jmpbuf(r.png))) throw DecodeError("corrupt PNG: " + path.string());

    png_init_io(r.png, fp.get());
    png_set_sig_bytes(r.png, 8);
    png_read_info(r.png, r.info);

    width = static_cast<int>(png_get_image_width(r.png, r.info));
    height = static_cast<int>(png_get_image_height(r.png, r.info));
    const png_byte color_type = png_get_color_type(r.png, r.info);
    const png_byte bit_depth = png_get_bit_depth(r.png, r.info);

    if (bit_depth == 16) png_set_strip_16(r.png);
    if (color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(r.png);
    if (want_rgb) {
        if (color_type == PNG_COLOR_TYPE_GRAY || color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
            png_set_gray_to_rgb(r.png);
        png_set_strip_alpha(r.png);
    } else {
        if (color_type & PNG_COLOR_MASK_COLOR) png_set_rgb_to_gray_fixed(r.png, 1, -1, -1);
        png_set_strip_alpha(r.png);
        if (bit_depth < 8) png_set_expand_gray_1_2_4_to_8(r.png);
    }
    png_read_update_info(r.png, r.info);

    const int channels = want_rgb ? 3 : 1;
    out.assign(static_cast<std::size_t>(width) * height * channels, 0);
    std::vector<png_bytep> row_ptrs(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y)
        row_ptrs[static_cast<std::size_t>(y)] = out.data() + static_cast<std::size_t>(y) * width * channels;
    png_read_image(r.png, row_ptrs.data());
    png_read_end(r.png, nullptr);
}

}  // namespace

Image read_png_rgb(const std::filesystem::path& path) {
    int w = 0, h = 0;
    std::vector<std::uint8_t> rows;
    read_png_rows(path, true, w, h, rows);
    Image img(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < 3; ++c)
                img.at(c, y, x) =
                    static_cast<float>(rows[(static_cast<std::size_t>(y) * w + x) * 3 + c]) / 255.0f;
    return img;
}

LabelMap read_png_gray(const std::filesystem::path& path) {
    int w = 0, h = 0;
    std::vector<std::uint8_t> rows;
    read_png_rows(path, false, w, h, rows);
    LabelMap mask(w, h);
    mask.data = std::move(rows);
    return mask;
}

namespace {

void put_u32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
    buf.push_back(static_cast<std::uint8_t>(v & 0xff));
    buf.push_back(static_cast<std::uint8_t>((v >> 8) & 0xff));
    buf.push_back(static_cast<std::uint8_t>((v >> 16) & 0xff));
    buf.push_back(static_cast<std::uint8_t>((v >> 24) & 0xff));
}

std::uint32_t get_u32(const std::uint8_t* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void write_depth_raster(const std::filesystem::path& path, const DepthMap& depth) {
    std::vector<std::uint8_t> buf;
    buf.reserve(16 + depth.data.size() * 4);
    buf.insert(buf.end(), {'D', 'P', 'T', 'H'});
    put_u32(buf, 1);
    put_u32(buf, static_cast<std::uint32_t>(depth.width));
    put_u32(buf, static_cast<std::uint32_t>(depth.height));
    for (float v : depth.data) {
        std::uint32_t bits;
        std::memcpy(&bits, &v, 4);
        put_u32(buf, bits);
    }
    FilePtr fp(std::fopen(path.string().c_str(), "wb"));
    if (!fp) throw IoError("cannot open for writing: " + path.string());
    if (std::fwrite(buf.data(), 1, buf.size(), fp.get()) != buf.size())
        throw IoError("short write: " + path.string());
}

DepthMap read_depth_raster(const std::filesystem::path& path) {
    FilePtr fp(std::fopen(path.string().c_str(), "rb"));
    if (!fp) throw DecodeError("cannot open depth raster: " + path.string());
    std::uint8_t header[16];
    if (std::fread(header, 1, 16, fp.get()) != 16 || std::memcmp(header, "DPTH", 4) != 0)
        throw DecodeError("bad depth raster header: " + path.string());
    const std::uint32_t version = get_u32(header + 4);
    if (version != 1) throw DecodeError("unsupported depth raster version: " + path.string());
    const int w = static_cast<int>(get_u32(header + 8));
    const int h = static_cast<int>(get_u32(header + 12));
    DepthMap depth(w, h);
    std::vector<std::uint8_t> payload(static_cast<std::size_t>(w) * h * 4);
    if (std::fread(payload.data(), 1, payload.size(), fp.get()) != payload.size())
        throw DecodeError("truncated depth raster: " + path.string());
    for (std::size_t i = 0; i < depth.data.size(); ++i) {
        const std::uint32_t bits = get_u32(payload.data() + i * 4);
        std::memcpy(&depth.data[i], &bits, 4);
    }
    return depth;
}

Image resize_bilinear(const Image& src, int out_w, int out_h) {
    Image dst(out_w, out_h);
    const double sx = static_cast<double>(src.width) / out_w;
    const double sy = static_cast<double>(src.height) / out_h;
    for (int y = 0; y < out_h; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        fy = std::max(0.0, std::min(fy, static_cast<double>(src.height - 1)));
        const int y0 = static_cast<int>(std::floor(fy));
        const int y1 = std::min(y0 + 1, src.height - 1);
        const float wy = static_cast<float>(fy - y0);
        for (int x = 0; x < out_w; ++x) {
            double fx = (x + 0.5) * sx - 0.5;
            fx = std::max(0.0, std::min(fx, static_cast<double>(src.width - 1)));
            const int x0 = static_cast<int>(std::floor(fx));
            const int x1 = std::min(x0 + 1, src.width - 1);
            const float wx = static_cast<float>(fx - x0);
            for (int c = 0; c < 3; ++c) {
                const float top = (1.0f - wx) * src.at(c, y0, x0) + wx * src.at(c, y0, x1);
                const float bot = (1.0f - wx) * src.at(c, y1, x0) + wx * src.at(c, y1, x1);
                dst.at(c, y, x) = (1.0f - wy) * top + wy * bot;
            }
        }
    }
    return dst;
}

Image crop(const Image& src, int x0, int y0, int w, int h) {
    Image dst(w, h);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) dst.at(c, y, x) = src.at(c, y0 + y, x0 + x);
    return dst;
}

Image flip_horizontal(const Image& src) {
    Image dst(src.width, src.height);
    for (int c = 0; c < 3; ++c)
        for (int y = 0; y < src.height; ++y)
            for (int x = 0; x < src.width; ++x) dst.at(c, y, x) = src.at(c, y, src.width - 1 - x);
    return dst;
}

Tensor images_to_tensor(const std::vector<Image>& batch) {
    if (batch.empty()) throw ShapeMismatch("images_to_tensor: empty batch");
    const int w = batch[0].width, h = batch[0].height;
    Tensor t = Tensor::zeros({static_cast<std::int64_t>(batch.size()), 3, h, w});
    auto& d = t.data();
    std::size_t off = 0;
    for (const auto& img : batch) {
        if (img.width != w || img.height != h)
            throw ShapeMismatch("images_to_tensor: mixed image sizes in batch");
        std::copy(img.data.begin(), img.data.end(), d.begin() + static_cast<std::ptrdiff_t>(off));
        off += img.data.size();
    }
    return t;
}

}  // namespace dvit
