#include "cdre/base_codec.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <numbers>

#include "json.hpp"

#include "cdre/bitstream.hpp"
#include "cdre/error.hpp"
#include "cdre/image_io.hpp"

namespace cdre::codec {

namespace {

constexpr int kBlock = 8;
constexpr int kMaxDim = 65535;

int reflect_index(int i, int n) {
  // Mirror about the last sample: n, n+1 -> n-1, n-2 (symmetric padding).
  while (i < 0 || i >= n) {
    if (i >= n) i = 2 * n - 1 - i;
    if (i < 0) i = -i - 1;
  }
  return i;
}

int round_up8(int v) { return (v + kBlock - 1) / kBlock * kBlock; }

// 8-bit samples, level shifted by 128, padded to multiples of 8.
std::vector<double> to_samples(const Tensor& image, int channel, int ph, int pw) {
  const int H = image.dim(1), W = image.dim(2);
  std::vector<double> out(static_cast<std::size_t>(ph) * pw);
  for (int y = 0; y < ph; ++y) {
    for (int x = 0; x < pw; ++x) {
      const double v = std::clamp(image.at(channel, reflect_index(y, H), reflect_index(x, W)), 0.0, 1.0);
      out[static_cast<std::size_t>(y) * pw + x] = static_cast<double>(std::lround(v * 255.0)) - 128.0;
    }
  }
  return out;
}

void forward_dct(const double* in, double* out) {
  const auto& B = dct_basis();
  double tmp[64];
  // rows: tmp[y][u] = sum_x in[y][x] * B[u][x]
  for (int y = 0; y < 8; ++y)
    for (int u = 0; u < 8; ++u) {
      double s = 0.0;
      for (int x = 0; x < 8; ++x) s += in[y * 8 + x] * B[u * 8 + x];
      tmp[y * 8 + u] = s;
    }
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u) {
      double s = 0.0;
      for (int y = 0; y < 8; ++y) s += tmp[y * 8 + u] * B[v * 8 + y];
      out[v * 8 + u] = s;
    }
}

void inverse_dct(const double* in, double* out) {
  const auto& B = dct_basis();
  double tmp[64];
  for (int y = 0; y < 8; ++y)
    for (int u = 0; u < 8; ++u) {
      double s = 0.0;
      for (int v = 0; v < 8; ++v) s += in[v * 8 + u] * B[v * 8 + y];
      tmp[y * 8 + u] = s;
    }
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) {
      double s = 0.0;
      for (int u = 0; u < 8; ++u) s += tmp[y * 8 + u] * B[u * 8 + x];
      out[y * 8 + x] = s;
    }
}

[[noreturn]] void malformed(std::size_t offset, const std::string& reason) {
  throw data_error("malformed bitstream at byte " + std::to_string(offset) + ": " + reason);
}

} // namespace

void ImagePair::validate() const {
  if (original.shape != compressed.shape) {
    throw data_error("image pair shape mismatch: original " + shape_str(original.shape) +
                     " vs compressed " + shape_str(compressed.shape));
  }
  if (!std::isfinite(base_bpp) || base_bpp < 0.0) {
    throw data_error("image pair base_bpp must be finite and >= 0");
  }
}

CodecQuality::CodecQuality(int quality) : quality_(quality) {
  if (quality < 1 || quality > 99) {
    throw invalid_argument("invalid quality " + std::to_string(quality) + " (expected 1..99)");
  }
}

const std::array<double, 64>& dct_basis() {
  static const std::array<double, 64> basis = [] {
    std::array<double, 64> b{};
    for (int u = 0; u < 8; ++u) {
      const double a = u == 0 ? std::sqrt(1.0 / 8.0) : std::sqrt(2.0 / 8.0);
      for (int x = 0; x < 8; ++x) {
        b[u * 8 + x] = a * std::cos((2 * x + 1) * u * std::numbers::pi / 16.0);
      }
    }
    return b;
  }();
  return basis;
}

const std::array<int, 64>& zigzag_order() {
  static const std::array<int, 64> order = [] {
    std::array<int, 64> z{};
    int i = 0;
    for (int s = 0; s < 15; ++s) {
      if (s % 2 == 0) {
        for (int r = std::min(s, 7); r >= 0 && s - r < 8; --r) z[i++] = r * 8 + (s - r);
      } else {
        for (int c = std::min(s, 7); c >= 0 && s - c < 8; --c) z[i++] = (s - c) * 8 + c;
      }
    }
    return z;
  }();
  return order;
}

std::vector<std::uint8_t> dct_encode(const Tensor& image, CodecQuality quality) {
  if (image.rank() != 3 || image.numel() == 0) throw invalid_argument("empty input");
  if (image.dim(0) != 3) {
    throw invalid_argument("dct_encode expects 3 channels, got " + shape_str(image.shape));
  }
  const int H = image.dim(1), W = image.dim(2);
  if (H > kMaxDim || W > kMaxDim) throw invalid_argument("image dimensions exceed 65535");
  const int ph = round_up8(H), pw = round_up8(W);
  const double step = quality.step();
  const auto& zz = zigzag_order();

  BitWriter bits;
  double block[64], coef[64];
  int levels[64];
  for (int c = 0; c < 3; ++c) {
    const auto samples = to_samples(image, c, ph, pw);
    for (int by = 0; by < ph; by += kBlock) {
      for (int bx = 0; bx < pw; bx += kBlock) {
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x)
            block[y * 8 + x] = samples[static_cast<std::size_t>(by + y) * pw + bx + x];
        forward_dct(block, coef);
        int nonzero = 0;
        for (int i = 0; i < 64; ++i) {
          levels[i] = static_cast<int>(std::lround(coef[zz[i]] / step));
          if (levels[i] != 0) ++nonzero;
        }
        bits.put_ue(static_cast<std::uint32_t>(nonzero));
        int run = 0;
        for (int i = 0; i < 64; ++i) {
          if (levels[i] == 0) {
            ++run;
            continue;
          }
          bits.put_ue(static_cast<std::uint32_t>(run));
          bits.put_se(levels[i]);
          run = 0;
        }
      }
    }
  }

  std::vector<std::uint8_t> out(kCodecMagic, kCodecMagic + 4);
  out.push_back(kCodecVersion);
  put_u16_be(out, static_cast<std::uint32_t>(H));
  put_u16_be(out, static_cast<std::uint32_t>(W));
  out.push_back(static_cast<std::uint8_t>(quality.value()));
  const auto payload = bits.finish();
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

CodecHeader read_codec_header(std::span<const std::uint8_t> bitstream) {
  if (bitstream.size() < kCodecHeaderBytes) malformed(bitstream.size(), "truncated header");
  if (!std::equal(kCodecMagic, kCodecMagic + 4, bitstream.begin())) malformed(0, "bad magic");
  if (bitstream[4] != kCodecVersion) malformed(4, "unsupported version");
  CodecHeader h;
  h.height = static_cast<int>(get_u16_be(bitstream, 5));
  h.width = static_cast<int>(get_u16_be(bitstream, 7));
  h.quality = bitstream[9];
  if (h.height == 0 || h.width == 0) malformed(5, "zero dimension");
  if (h.quality < 1 || h.quality > 99) malformed(9, "invalid quality");
  return h;
}

Tensor dct_decode(std::span<const std::uint8_t> bitstream) {
  const CodecHeader h = read_codec_header(bitstream);
  const int ph = round_up8(h.height), pw = round_up8(h.width);
  const double step = CodecQuality(h.quality).step();
  const auto& zz = zigzag_order();

  BitReader reader(bitstream.subspan(kCodecHeaderBytes), kCodecHeaderBytes,
                   "malformed bitstream");
  Tensor out({3, h.height, h.width});
  std::vector<double> plane(static_cast<std::size_t>(ph) * pw);
  double coef[64], block[64];
  for (int c = 0; c < 3; ++c) {
    for (int by = 0; by < ph; by += kBlock) {
      for (int bx = 0; bx < pw; bx += kBlock) {
        std::fill(coef, coef + 64, 0.0);
        const std::uint32_t nonzero = reader.get_ue();
        if (nonzero > 64) reader.fail("block coefficient count exceeds 64");
        int pos = 0;
        for (std::uint32_t k = 0; k < nonzero; ++k) {
          const std::uint32_t run = reader.get_ue();
          if (run > 63 || pos + static_cast<int>(run) >= 64) reader.fail("zero run overflows block");
          pos += static_cast<int>(run);
          const std::int32_t level = reader.get_se();
          if (level == 0) reader.fail("zero level coded as nonzero");
          coef[zz[pos++]] = level * step;
        }
        inverse_dct(coef, block);
        for (int y = 0; y < 8; ++y)
          for (int x = 0; x < 8; ++x) plane[static_cast<std::size_t>(by + y) * pw + bx + x] = block[y * 8 + x];
      }
    }
    for (int y = 0; y < h.height; ++y) {
      for (int x = 0; x < h.width; ++x) {
        const double v = std::lround(plane[static_cast<std::size_t>(y) * pw + x] + 128.0);
        out.at(c, y, x) = std::clamp(v, 0.0, 255.0) / 255.0;
      }
    }
  }
  if (kCodecHeaderBytes + reader.bytes_consumed() != bitstream.size()) {
    malformed(kCodecHeaderBytes + reader.bytes_consumed(), "trailing bytes after payload");
  }
  return out;
}

double measure_bpp(std::size_t byte_count, int height, int width) {
  if (height <= 0 || width <= 0) {
    throw invalid_argument("measure_bpp requires a positive pixel count");
  }
  return 8.0 * static_cast<double>(byte_count) /
         (static_cast<double>(height) * static_cast<double>(width));
}

double measure_bpp(std::span<const std::uint8_t> bitstream, int height, int width) {
  return measure_bpp(bitstream.size(), height, width);
}

ImagePair compress(const Tensor& image, CodecQuality quality) {
  const auto bits = dct_encode(image, quality);
  ImagePair pair;
  pair.original = image;
  pair.compressed = dct_decode(bits);
  pair.base_bpp = measure_bpp(bits, image.dim(1), image.dim(2));
  return pair;
}

double psnr(const Tensor& reference, const Tensor& test) {
  if (reference.shape != test.shape || reference.numel() == 0) {
    throw invalid_argument("psnr: shape mismatch");
  }
  double se = 0.0;
  for (std::size_t i = 0; i < reference.numel(); ++i) {
    const double d = reference.data[i] - test.data[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(reference.numel());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

ExternalPairManifest read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("cannot open manifest " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto base = path.parent_path();

  std::vector<nlohmann::json> records;
  try {
    const auto first = text.find_first_not_of(" \t\r\n");
    if (first != std::string::npos && text[first] == '[') {
      for (const auto& r : nlohmann::json::parse(text)) records.push_back(r);
    } else {
      std::istringstream lines(text);
      std::string line;
      while (std::getline(lines, line)) {
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        records.push_back(nlohmann::json::parse(line));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw data_error(path.string() + ": " + e.what());
  }

  ExternalPairManifest manifest;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const std::string where = path.string() + " entry " + std::to_string(i);
    if (!r.is_object() || !r.contains("original_path") || !r.contains("compressed_path") ||
        !r.contains("base_bpp")) {
      throw data_error(where + ": expected original_path, compressed_path, base_bpp");
    }
    ExternalPairEntry e;
    e.original_path = r.at("original_path").get<std::string>();
    e.compressed_path = r.at("compressed_path").get<std::string>();
    if (!r.at("base_bpp").is_number()) throw data_error(where + ": base_bpp must be a number");
    e.base_bpp = r.at("base_bpp").get<double>();
    if (!std::isfinite(e.base_bpp) || e.base_bpp < 0.0) {
      throw data_error(where + ": base_bpp must be finite and >= 0");
    }
    if (e.original_path.is_relative()) e.original_path = base / e.original_path;
    if (e.compressed_path.is_relative()) e.compressed_path = base / e.compressed_path;
    manifest.entries.push_back(std::move(e));
  }
  return manifest;
}

std::vector<ImagePair> load_external_pairs(const ExternalPairManifest& manifest) {
  std::vector<ImagePair> pairs;
  pairs.reserve(manifest.entries.size());
  for (std::size_t i = 0; i < manifest.entries.size(); ++i) {
    const auto& e = manifest.entries[i];
    ImagePair p;
    p.original = read_ppm(e.original_path);
    p.compressed = read_ppm(e.compressed_path);
    p.base_bpp = e.base_bpp;
    if (p.original.shape != p.compressed.shape) {
      throw data_error("manifest entry " + std::to_string(i) + " (" + e.original_path.string() +
                       "): dimension mismatch " + shape_str(p.original.shape) + " vs " +
                       shape_str(p.compressed.shape));
    }
    p.validate();
    pairs.push_back(std::move(p));
  }
  return pairs;
}

} // namespace cdre::codec
