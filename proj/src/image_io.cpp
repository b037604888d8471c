// SPDX-License-Identifier: Apache-2.0
#include "atp/image_io.hpp"

#include <png.h>

#include <cstring>
#include <string>

#include "atp/error.hpp"

namespace atp {

namespace {

void write_png(const std::filesystem::path& path, int width, int height, int channels,
               std::span<const std::uint8_t> pixels) {
  if (pixels.size() != static_cast<std::size_t>(width) * height * channels)
    throw InvalidInput("pixel buffer size does not match image shape for " + path.string());
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&image, path.c_str(), 0, pixels.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw IoError("cannot write " + path.string() + ": " + msg);
  }
}

}  // namespace

void write_png_gray(const std::filesystem::path& path, int width, int height, std::span<const std::uint8_t> pixels) {
  write_png(path, width, height, 1, pixels);
}

void write_png_rgb(const std::filesystem::path& path, int width, int height, std::span<const std::uint8_t> pixels) {
  write_png(path, width, height, 3, pixels);
}

RawImage read_png(const std::filesystem::path& path, int channels) {
  if (!std::filesystem::is_regular_file(path)) throw IoError("missing image file " + path.string());
  png_image image;
  std::memset(&image, 0, sizeof(image));
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str()))
    throw FormatError("cannot decode " + path.string() + ": " + image.message);
  image.format = channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  RawImage out;
  out.width = static_cast<int>(image.width);
  out.height = static_cast<int>(image.height);
  out.channels = channels;
  out.pixels.resize(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, out.pixels.data(), 0, nullptr)) {
    std::string msg = image.message;
    png_image_free(&image);
    throw FormatError("cannot decode " + path.string() + ": " + msg);
  }
  return out;
}

}  // namespace atp
