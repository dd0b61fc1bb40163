#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "carm/drr.hpp"

namespace carm {

// 16-bit grayscale PNG, value = round(p * 65535). Output bytes are a pure
// function of the pixels (no timestamps or text chunks).
std::vector<unsigned char> encode_png16(const DrrImage& image);
DrrImage decode_png16(const std::vector<unsigned char>& bytes, double detector_mm = 0.0);

void write_png16(const DrrImage& image, const std::filesystem::path& path);
DrrImage read_png16(const std::filesystem::path& path, double detector_mm = 0.0);

// Pixel values after the PNG round trip.
DrrImage quantize16(const DrrImage& image);

}  // namespace carm
