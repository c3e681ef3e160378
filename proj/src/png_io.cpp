#include "mapedit/png_io.hpp"

#include <png.h>

#include <csetjmp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace mapedit::io {

std::vector<std::uint8_t> quantize_rgb8(const render::Image& image)
{
    std::vector<std::uint8_t> out(image.data.size());
    for (std::size_t i = 0; i < image.data.size(); ++i) {
        // nearbyint honours the default round-to-nearest-even mode.
        const double v = std::nearbyint(std::clamp(image.data[i], 0.0, 1.0) * 255.0);
        out[i] = static_cast<std::uint8_t>(v);
    }
    return out;
}

namespace {

// libpng reports errors by longjmp; the message is stashed and rethrown on the C++ side.
thread_local std::string g_png_error;

void on_png_error(png_structp png, png_const_charp msg)
{
    g_png_error = msg ? msg : "unknown error";
    png_longjmp(png, 1);
}

void on_png_warning(png_structp, png_const_charp) {}

void append_bytes(png_structp png, png_bytep data, png_size_t len)
{
    auto* out = static_cast<std::string*>(png_get_io_ptr(png));
    out->append(reinterpret_cast<const char*>(data), len);
}

struct ReadCursor {
    const std::string* bytes;
    std::size_t pos = 0;
};

void read_bytes(png_structp png, png_bytep data, png_size_t len)
{
    auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
    if (cur->pos + len > cur->bytes->size()) {
        png_error(png, "PNG data truncated");
    }
    std::memcpy(data, cur->bytes->data() + cur->pos, len);
    cur->pos += len;
}

} // namespace

std::string encode_png(const render::Image& image)
{
    if (image.width <= 0 || image.height <= 0) {
        throw ConfigError("cannot encode an empty image");
    }
    const std::vector<std::uint8_t> rgb = quantize_rgb8(image);
    std::string out;
    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error, on_png_warning);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_write_struct(&png, &info);
        throw FormatError("libpng initialisation failed");
    }
    std::vector<png_bytep> rows(static_cast<std::size_t>(image.height));
    for (int y = 0; y < image.height; ++y) {
        rows[y] = const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * image.width * 3);
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw FormatError("libpng: " + g_png_error);
    }
    {
        png_set_write_fn(png, &out, append_bytes, nullptr);
        png_set_IHDR(png, info, static_cast<png_uint_32>(image.width), static_cast<png_uint_32>(image.height), 8,
                     PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
        png_write_info(png, info);
        png_write_image(png, rows.data());
        png_write_end(png, nullptr);
    }
    png_destroy_write_struct(&png, &info);
    return out;
}

void write_png(const std::filesystem::path& path, const render::Image& image) { write_file(path, encode_png(image)); }

render::Image decode_png(const std::string& bytes)
{
    if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
        throw FormatError("not a PNG stream");
    }
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, on_png_error, on_png_warning);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("libpng initialisation failed");
    }
    ReadCursor cursor{&bytes, 0};
    png_uint_32 w = 0, h = 0;
    int channels = 0;
    std::vector<std::uint8_t> pixels;
    std::vector<png_bytep> rows;
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw FormatError("libpng: " + g_png_error);
    }
    png_set_read_fn(png, &cursor, read_bytes);
    png_read_info(png, info);
    w = png_get_image_width(png, info);
    h = png_get_image_height(png, info);
    if (png_get_bit_depth(png, info) != 8 ||
        (png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB && png_get_color_type(png, info) != PNG_COLOR_TYPE_RGB_ALPHA)) {
        png_error(png, "only 8-bit RGB/RGBA PNGs are supported");
    }
    channels = png_get_color_type(png, info) == PNG_COLOR_TYPE_RGB ? 3 : 4;
    pixels.resize(static_cast<std::size_t>(w) * h * channels);
    rows.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) {
        rows[y] = pixels.data() + static_cast<std::size_t>(y) * w * channels;
    }
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    render::Image image(static_cast<int>(w), static_cast<int>(h));
    for (std::size_t i = 0, n = static_cast<std::size_t>(w) * h; i < n; ++i) {
        for (int c = 0; c < 3; ++c) {
            image.data[3 * i + c] = pixels[i * channels + c] / 255.0;
        }
    }
    return image;
}

render::Image read_png(const std::filesystem::path& path) { return decode_png(read_file(path)); }

void write_file(const std::filesystem::path& path, const std::string& bytes)
{
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) {
        throw ConfigError("cannot open " + path.string() + " for writing");
    }
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) {
        throw ConfigError("failed writing " + path.string());
    }
}

std::string read_file(const std::filesystem::path& path)
{
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw ConfigError("cannot open " + path.string());
    }
    return std::string(std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>());
}

} // namespace mapedit::io
