#pragma once

#include "mapedit/renderer.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace mapedit::io {

/// 8-bit RGB quantisation of [0,1] intensities, rounding half to even.
std::vector<std::uint8_t> quantize_rgb8(const render::Image& image);

/// PNG encoding (8-bit RGB, no interlace) into memory.
std::string encode_png(const render::Image& image);

void write_png(const std::filesystem::path& path, const render::Image& image);

/// Decodes an 8-bit RGB or RGBA PNG into [0,1] intensities (alpha dropped).
render::Image decode_png(const std::string& bytes);
render::Image read_png(const std::filesystem::path& path);

void write_file(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);

} // namespace mapedit::io
