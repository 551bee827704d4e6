#include <algorithm>
#include <cmath>

#include "svp/imageio.hpp"

namespace svp {

void RawImage::validate() const {
  if (width < 1 || height < 1) throw std::invalid_argument("image must be at least 1x1");
  if (channels != 1 && channels != 3) {
    throw std::invalid_argument("image channel count must be 1 or 3, got " + std::to_string(channels));
  }
  if (pixels.size() != width * height * channels) {
    throw std::invalid_argument("image pixel buffer size does not match dimensions");
  }
}

Tensor<float> resize_bilinear(const Tensor<float>& batch, std::size_t out_h, std::size_t out_w) {
  if (batch.rank() != 4) throw std::invalid_argument("resize_bilinear: expected NCHW batch");
  if (out_h == 0 || out_w == 0) throw std::invalid_argument("resize_bilinear: empty output size");
  const std::size_t planes = batch.dim(0) * batch.dim(1);
  const std::size_t in_h = batch.dim(2), in_w = batch.dim(3);
  if (in_h == out_h && in_w == out_w) return batch;

  struct Tap {
    std::size_t i0, i1;
    double frac;
  };
  auto taps = [](std::size_t in, std::size_t out) {
    std::vector<Tap> t(out);
    const double scale = static_cast<double>(in) / static_cast<double>(out);
    for (std::size_t o = 0; o < out; ++o) {
      double src = (static_cast<double>(o) + 0.5) * scale - 0.5;
      src = std::clamp(src, 0.0, static_cast<double>(in - 1));
      const auto i0 = static_cast<std::size_t>(std::floor(src));
      t[o] = {i0, std::min(i0 + 1, in - 1), src - static_cast<double>(i0)};
    }
    return t;
  };
  const auto ty = taps(in_h, out_h);
  const auto tx = taps(in_w, out_w);

  Tensor<float> out({batch.dim(0), batch.dim(1), out_h, out_w});
  for (std::size_t p = 0; p < planes; ++p) {
    const float* src = batch.data() + p * in_h * in_w;
    float* dst = out.data() + p * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const float* r0 = src + ty[y].i0 * in_w;
      const float* r1 = src + ty[y].i1 * in_w;
      const double fy = ty[y].frac;
      for (std::size_t x = 0; x < out_w; ++x) {
        const double fx = tx[x].frac;
        const double top = r0[tx[x].i0] * (1.0 - fx) + r0[tx[x].i1] * fx;
        const double bot = r1[tx[x].i0] * (1.0 - fx) + r1[tx[x].i1] * fx;
        dst[y * out_w + x] = static_cast<float>(top * (1.0 - fy) + bot * fy);
      }
    }
  }
  return out;
}

ImageTensor standardize(const RawImage& image, std::size_t size) {
  image.validate();
  if (size == 0) throw std::invalid_argument("standardize: size must be positive");
  const std::size_t w = image.width, h = image.height, c = image.channels;
  Tensor<float> planar({1, c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        planar.at(0, ch, y, x) = static_cast<float>(image.at(x, y, ch)) / 255.0f;

  const double scale = static_cast<double>(size) / static_cast<double>(std::min(w, h));
  const std::size_t new_w = w <= h ? size : static_cast<std::size_t>(std::lround(w * scale));
  const std::size_t new_h = h <= w ? size : static_cast<std::size_t>(std::lround(h * scale));
  Tensor<float> resized = resize_bilinear(planar, std::max(new_h, size), std::max(new_w, size));

  const std::size_t off_y = (resized.dim(2) - size) / 2;
  const std::size_t off_x = (resized.dim(3) - size) / 2;
  ImageTensor out{Tensor<float>({1, 3, size, size}), ValueRange::kUnit};
  for (std::size_t ch = 0; ch < 3; ++ch) {
    const std::size_t src_c = c == 1 ? 0 : ch;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        out.data.at(0, ch, y, x) = std::clamp(resized.at(0, src_c, y + off_y, x + off_x), 0.0f, 1.0f);
  }
  return out;
}

ImageTensor to_model_range(const ImageTensor& unit) {
  if (unit.range != ValueRange::kUnit) throw std::invalid_argument("to_model_range: input is not unit range");
  ImageTensor out{unit.data, ValueRange::kModel};
  for (auto& v : out.data.values()) {
    if (v < 0.0f || v > 1.0f) throw std::invalid_argument("to_model_range: value outside [0, 1]");
    v = 2.0f * v - 1.0f;
  }
  return out;
}

ImageTensor from_model_range(const ImageTensor& model) {
  if (model.range != ValueRange::kModel) {
    throw std::invalid_argument("from_model_range: input is not model range");
  }
  ImageTensor out{model.data, ValueRange::kUnit};
  for (auto& v : out.data.values()) v = (v + 1.0f) * 0.5f;
  return out;
}

ImageTensor stack_images(const std::vector<ImageTensor>& images) {
  if (images.empty()) throw std::invalid_argument("stack_images: no images");
  const auto& first = images.front().data;
  Shape shape = first.shape();
  std::size_t total = 0;
  for (const auto& im : images) {
    if (im.range != images.front().range || im.data.rank() != 4 || im.data.dim(1) != shape[1] ||
        im.data.dim(2) != shape[2] || im.data.dim(3) != shape[3]) {
      throw std::invalid_argument("stack_images: inconsistent image shapes or ranges");
    }
    total += im.data.dim(0);
  }
  shape[0] = total;
  std::vector<float> data;
  data.reserve(shape_numel(shape));
  for (const auto& im : images) data.insert(data.end(), im.data.values().begin(), im.data.values().end());
  return {Tensor<float>(shape, std::move(data)), images.front().range};
}

RawImage to_raw_image(const ImageTensor& unit, std::size_t index) {
  if (unit.range != ValueRange::kUnit) throw std::invalid_argument("to_raw_image: expected unit range");
  const auto& d = unit.data;
  const std::size_t c = d.dim(1), h = d.dim(2), w = d.dim(3);
  if (c != 1 && c != 3) throw std::invalid_argument("to_raw_image: expected 1 or 3 channels");
  RawImage img(w, h, c);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const float v = std::clamp(d.at(index, ch, y, x), 0.0f, 1.0f);
        img.at(x, y, ch) = static_cast<std::uint8_t>(std::lround(v * 255.0f));
      }
  return img;
}

void save_grid_png(const std::filesystem::path& path, const ImageTensor& unit, std::size_t columns) {
  const std::size_t n = unit.count();
  if (n == 0 || columns == 0) throw std::invalid_argument("save_grid_png: empty grid");
  const std::size_t c = unit.data.dim(1), h = unit.data.dim(2), w = unit.data.dim(3);
  const std::size_t cols = std::min(columns, n);
  const std::size_t rows = (n + cols - 1) / cols;
  constexpr std::size_t kGutter = 2;
  RawImage grid(cols * (w + kGutter) + kGutter, rows * (h + kGutter) + kGutter, c, 255);
  for (std::size_t i = 0; i < n; ++i) {
    const RawImage tile = to_raw_image(unit, i);
    const std::size_t ox = kGutter + (i % cols) * (w + kGutter);
    const std::size_t oy = kGutter + (i / cols) * (h + kGutter);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        for (std::size_t ch = 0; ch < c; ++ch) grid.at(ox + x, oy + y, ch) = tile.at(x, y, ch);
  }
  save_png(path, grid);
}

ImageTensor load_standardized(const std::vector<std::filesystem::path>& paths, std::size_t size) {
  if (paths.empty()) throw std::invalid_argument("load_standardized: no paths");
  ImageTensor out{Tensor<float>({paths.size(), 3, size, size}), ValueRange::kUnit};
  const std::size_t per = 3 * size * size;
  for (std::size_t i = 0; i < paths.size(); ++i) {
    ImageTensor one = standardize(load_image(paths[i]));
    if (size != kStandardSize) one.data = resize_bilinear(one.data, size, size);
    std::copy_n(one.data.data(), per, out.data.data() + i * per);
  }
  return out;
}

}  // namespace svp
