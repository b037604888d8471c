// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace atp {

struct RawImage {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray) or 3 (RGB), interleaved
  std::vector<std::uint8_t> pixels;
};

void write_png_gray(const std::filesystem::path& path, int width, int height, std::span<const std::uint8_t> pixels);
void write_png_rgb(const std::filesystem::path& path, int width, int height, std::span<const std::uint8_t> pixels);

/// Reads an 8-bit PNG with the requested channel count (1 or 3).
/// Throws IoError for missing files and FormatError for undecodable ones.
RawImage read_png(const std::filesystem::path& path, int channels);

}  // namespace atp
