#include "carm/image_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "carm/error.hpp"

namespace carm {
namespace {

std::uint16_t to_u16(float p) {
  const double v = std::nearbyint(std::clamp(static_cast<double>(p), 0.0, 1.0) * 65535.0);
  return static_cast<std::uint16_t>(v);
}

float from_u16(std::uint16_t v) { return static_cast<float>(v / 65535.0); }

void write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<unsigned char>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void flush_noop(png_structp) {}

struct ReadCursor {
  const std::vector<unsigned char>* bytes;
  std::size_t offset;
};

void read_from_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* cur = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cur->offset + length > cur->bytes->size()) png_error(png, "truncated PNG");
  std::memcpy(data, cur->bytes->data() + cur->offset, length);
  cur->offset += length;
}

}  // namespace

std::vector<unsigned char> encode_png16(const DrrImage& image) {
  std::vector<unsigned char> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("PNG encoding failed");
  }
  const auto n = static_cast<png_uint_32>(image.resolution);
  png_set_write_fn(png, &out, write_to_vector, flush_noop);
  png_set_IHDR(png, info, n, n, 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 6);
  png_write_info(png, info);
  std::vector<unsigned char> row(static_cast<std::size_t>(n) * 2);
  for (int r = 0; r < image.resolution; ++r) {
    for (int c = 0; c < image.resolution; ++c) {
      const std::uint16_t v = to_u16(image.at(r, c));
      row[2 * c] = static_cast<unsigned char>(v >> 8);  // PNG is big-endian
      row[2 * c + 1] = static_cast<unsigned char>(v & 0xff);
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

DrrImage decode_png16(const std::vector<unsigned char>& bytes, double detector_mm) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw ValidationError("not a PNG stream");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!png) throw IoError("png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ValidationError("corrupt PNG stream");
  }
  ReadCursor cursor{&bytes, 0};
  png_set_read_fn(png, &cursor, read_from_vector);
  png_read_info(png, info);
  const png_uint_32 w = png_get_image_width(png, info), h = png_get_image_height(png, info);
  const int depth = png_get_bit_depth(png, info), type = png_get_color_type(png, info);
  if (w != h || depth != 16 || type != PNG_COLOR_TYPE_GRAY) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw ValidationError("expected a square 16-bit grayscale PNG");
  }
  DrrImage img(static_cast<int>(w), detector_mm);
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 2);
  for (png_uint_32 r = 0; r < h; ++r) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 c = 0; c < w; ++c)
      img.at(static_cast<int>(r), static_cast<int>(c)) =
          from_u16(static_cast<std::uint16_t>((row[2 * c] << 8) | row[2 * c + 1]));
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

void write_png16(const DrrImage& image, const std::filesystem::path& path) {
  const auto bytes = encode_png16(image);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

DrrImage read_png16(const std::filesystem::path& path, double detector_mm) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_png16(bytes, detector_mm);
}

DrrImage quantize16(const DrrImage& image) {
  DrrImage out = image;
  for (auto& p : out.pixels) p = from_u16(to_u16(p));
  return out;
}

}  // namespace carm
