#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "svp/tensor.hpp"

namespace svp {

class ImageDecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Interleaved 8-bit pixels, row-major, `channels` samples per pixel.
struct RawImage {
  std::size_t width = 0;
  std::size_t height = 0;
  std::size_t channels = 0;
  std::vector<std::uint8_t> pixels;

  RawImage() = default;
  RawImage(std::size_t w, std::size_t h, std::size_t c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(w * h * c, fill) {}

  std::uint8_t& at(std::size_t x, std::size_t y, std::size_t c) {
    return pixels[(y * width + x) * channels + c];
  }
  std::uint8_t at(std::size_t x, std::size_t y, std::size_t c) const {
    return pixels[(y * width + x) * channels + c];
  }

  void validate() const;
};

enum class ValueRange { kUnit, kModel };

// N x C x H x W batch tagged with the value range it is expressed in.
struct ImageTensor {
  Tensor<float> data;
  ValueRange range = ValueRange::kUnit;

  std::size_t count() const { return data.rank() == 4 ? data.dim(0) : 0; }
};

inline constexpr std::size_t kStandardSize = 64;

// PNG or TIFF, 8-bit, grayscale or RGB. Throws std::runtime_error with the path
// for I/O failures and ImageDecodeError for unsupported formats.
RawImage load_image(const std::filesystem::path& path);

// Writes an 8-bit PNG. Parent directories must exist.
void save_png(const std::filesystem::path& path, const RawImage& image);

// Smallest edge to `size` (bilinear, half-pixel centers, aspect ratio kept),
// center crop to size x size, grayscale replicated to 3 channels, [0, 1].
ImageTensor standardize(const RawImage& image, std::size_t size = kStandardSize);

// Bilinear resampling with half-pixel centers and edge clamping. `batch` is NCHW.
Tensor<float> resize_bilinear(const Tensor<float>& batch, std::size_t out_h, std::size_t out_w);

ImageTensor to_model_range(const ImageTensor& unit);
ImageTensor from_model_range(const ImageTensor& model);

// Concatenates single-image tensors (1 x C x H x W each) into one batch.
ImageTensor stack_images(const std::vector<ImageTensor>& images);

// Quantizes image `index` of a unit-range batch to 8 bits (round to nearest).
RawImage to_raw_image(const ImageTensor& unit, std::size_t index);

// Lays images out in a grid (`columns` per row, 2 px white gutter) and writes a PNG.
void save_grid_png(const std::filesystem::path& path, const ImageTensor& unit, std::size_t columns);

// Loads and standardizes every file; `size` may differ from 64, in which case
// the standardized 64 x 64 image is resampled to size x size.
ImageTensor load_standardized(const std::vector<std::filesystem::path>& paths,
                              std::size_t size = kStandardSize);

}  // namespace svp
