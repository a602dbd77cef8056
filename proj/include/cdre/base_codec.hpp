#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cdre/tensor.hpp"

namespace cdre::codec {

// An original frame and its codec reconstruction, both [3, H, W] in [0, 1].
struct ImagePair {
  Tensor original;
  Tensor compressed;
  double base_bpp = 0.0;

  int height() const { return original.dim(1); }
  int width() const { return original.dim(2); }
  // Throws if shapes differ or base_bpp is negative / non-finite.
  void validate() const;
};

// Higher quality means a finer quantizer. Valid range [1, 99].
class CodecQuality {
 public:
  explicit CodecQuality(int quality);
  int value() const { return quality_; }
  // Uniform quantizer step for every DCT coefficient.
  int step() const { return quality_ < 99 ? 100 - quality_ : 1; }

 private:
  int quality_;
};

struct ExternalPairEntry {
  std::filesystem::path original_path;
  std::filesystem::path compressed_path;
  double base_bpp = 0.0;
};

struct ExternalPairManifest {
  std::vector<ExternalPairEntry> entries;
};

inline constexpr char kCodecMagic[4] = {'C', 'D', 'R', 'B'};
inline constexpr std::uint8_t kCodecVersion = 1;
inline constexpr std::size_t kCodecHeaderBytes = 10;

struct CodecHeader {
  int height = 0;
  int width = 0;
  int quality = 0;
};

// Block-DCT surrogate codec. Layout: "CDRB", u8 version, u16 H, u16 W, u8 q
// (big-endian), then per channel and per 8x8 block in raster order:
// ue(nonzero count), then for each nonzero zig-zag coefficient ue(zero run)
// and se(level).
std::vector<std::uint8_t> dct_encode(const Tensor& image, CodecQuality quality);
Tensor dct_decode(std::span<const std::uint8_t> bitstream);
CodecHeader read_codec_header(std::span<const std::uint8_t> bitstream);

double measure_bpp(std::span<const std::uint8_t> bitstream, int height, int width);
double measure_bpp(std::size_t byte_count, int height, int width);

// Encode, decode and measure in one step.
ImagePair compress(const Tensor& image, CodecQuality quality);

double psnr(const Tensor& reference, const Tensor& test);

// JSON array of {original_path, compressed_path, base_bpp}, or one such
// object per line. Relative paths resolve against the manifest directory.
ExternalPairManifest read_manifest(const std::filesystem::path& path);
std::vector<ImagePair> load_external_pairs(const ExternalPairManifest& manifest);

// Orthonormal 8x8 DCT-II basis, row u = frequency.
const std::array<double, 64>& dct_basis();
const std::array<int, 64>& zigzag_order();

} // namespace cdre::codec
