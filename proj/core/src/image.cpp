#include "gsmap/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace gsmap {

namespace {

void write_u32_le(std::ostream& os, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t read_u32_le(std::istream& is, const std::filesystem::path& path,
                     std::streamoff offset) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw format_error(path.string() + ": truncated at byte offset " +
                       std::to_string(offset));
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

}  // namespace

double psnr(const Image& a, const Image& b) {
  if (!a.same_shape(b)) throw input_error("psnr: shape mismatch");
  double sq = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a.data()[i] - b.data()[i];
    sq += d * d;
  }
  const double mse = sq / static_cast<double>(a.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

void save_ppm(const Image& rgb, const std::filesystem::path& path) {
  if (rgb.channels() != 3) throw input_error("save_ppm: need 3 channels");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw input_error("save_ppm: cannot open " + path.string());
  os << "P6\n" << rgb.width() << " " << rgb.height() << "\n255\n";
  std::vector<unsigned char> row(static_cast<std::size_t>(rgb.width()) * 3);
  for (int y = 0; y < rgb.height(); ++y) {
    for (int x = 0; x < rgb.width(); ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(rgb.at(y, x, c), 0.0, 1.0);
        row[static_cast<std::size_t>(x) * 3 + c] =
            static_cast<unsigned char>(std::lround(v * 255.0));
      }
    os.write(reinterpret_cast<const char*>(row.data()),
             static_cast<std::streamsize>(row.size()));
  }
  if (!os) throw input_error("save_ppm: write failed for " + path.string());
}

Image load_ppm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw input_error("load_ppm: cannot open " + path.string());
  std::string magic;
  is >> magic;
  if (magic != "P6")
    throw format_error(path.string() + ": bad magic at byte offset 0");
  int w = 0, h = 0, maxval = 0;
  is >> w >> h >> maxval;
  if (!is || w <= 0 || h <= 0 || maxval != 255)
    throw format_error(path.string() + ": bad PPM header");
  is.get();  // single whitespace after maxval
  Image img(w, h, 3);
  std::vector<unsigned char> row(static_cast<std::size_t>(w) * 3);
  for (int y = 0; y < h; ++y) {
    if (!is.read(reinterpret_cast<char*>(row.data()),
                 static_cast<std::streamsize>(row.size())))
      throw format_error(path.string() + ": truncated at byte offset " +
                         std::to_string(static_cast<long long>(is.tellg())));
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = row[static_cast<std::size_t>(x) * 3 + c] / 255.0;
  }
  return img;
}

void save_depth(const Image& gray, const std::filesystem::path& path) {
  if (gray.channels() != 1) throw input_error("save_depth: need 1 channel");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw input_error("save_depth: cannot open " + path.string());
  os.write("DPTH", 4);
  write_u32_le(os, static_cast<uint32_t>(gray.width()));
  write_u32_le(os, static_cast<uint32_t>(gray.height()));
  std::vector<float> buf(gray.size());
  for (std::size_t i = 0; i < gray.size(); ++i)
    buf[i] = static_cast<float>(gray.data()[i]);
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!os) throw input_error("save_depth: write failed for " + path.string());
}

Image load_depth(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw input_error("load_depth: cannot open " + path.string());
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "DPTH", 4) != 0)
    throw format_error(path.string() + ": bad magic at byte offset 0");
  const uint32_t w = read_u32_le(is, path, 4);
  const uint32_t h = read_u32_le(is, path, 8);
  if (w == 0 || h == 0 || w > (1u << 16) || h > (1u << 16))
    throw format_error(path.string() + ": implausible dimensions at byte offset 4");
  Image img(static_cast<int>(w), static_cast<int>(h), 1);
  std::vector<float> buf(img.size());
  if (!is.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float))))
    throw format_error(path.string() + ": truncated at byte offset " +
                       std::to_string(12 + static_cast<long long>(is.gcount())));
  for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = buf[i];
  return img;
}

}  // namespace gsmap
