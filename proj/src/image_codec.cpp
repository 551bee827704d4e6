#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "svp/imageio.hpp"

namespace svp {

RawImage load_image(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    throw std::runtime_error("cannot read image '" + path.string() + "': no such file");
  }
  cv::Mat mat;
  try {
    mat = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    throw ImageDecodeError("cannot decode image '" + path.string() + "': " + e.what());
  }
  if (mat.empty()) throw ImageDecodeError("cannot decode image '" + path.string() + "'");
  if (mat.depth() != CV_8U) {
    throw ImageDecodeError("unsupported bit depth in '" + path.string() +
                           "': only 8-bit images are accepted");
  }
  const int ch = mat.channels();
  if (ch != 1 && ch != 3) {
    throw ImageDecodeError("unsupported channel count " + std::to_string(ch) + " in '" +
                           path.string() + "': expected 1 or 3");
  }
  RawImage img(static_cast<std::size_t>(mat.cols), static_cast<std::size_t>(mat.rows),
               static_cast<std::size_t>(ch));
  for (int y = 0; y < mat.rows; ++y) {
    const std::uint8_t* row = mat.ptr<std::uint8_t>(y);
    for (int x = 0; x < mat.cols; ++x) {
      for (int c = 0; c < ch; ++c) {
        // OpenCV stores color as BGR.
        const int src_c = ch == 3 ? 2 - c : c;
        img.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(c)) =
            row[x * ch + src_c];
      }
    }
  }
  return img;
}

void save_png(const std::filesystem::path& path, const RawImage& image) {
  image.validate();
  const int ch = static_cast<int>(image.channels);
  cv::Mat mat(static_cast<int>(image.height), static_cast<int>(image.width),
              ch == 3 ? CV_8UC3 : CV_8UC1);
  for (int y = 0; y < mat.rows; ++y) {
    std::uint8_t* row = mat.ptr<std::uint8_t>(y);
    for (int x = 0; x < mat.cols; ++x) {
      for (int c = 0; c < ch; ++c) {
        const int dst_c = ch == 3 ? 2 - c : c;
        row[x * ch + dst_c] =
            image.at(static_cast<std::size_t>(x), static_cast<std::size_t>(y), static_cast<std::size_t>(c));
      }
    }
  }
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), mat);
  } catch (const cv::Exception& e) {
    throw std::runtime_error("cannot write '" + path.string() + "': " + e.what());
  }
  if (!ok) throw std::runtime_error("cannot write '" + path.string() + "'");
}

}  // namespace svp
