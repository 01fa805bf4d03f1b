#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace wmlab {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
};

/// 8-bit RGB raster, row-major.
struct RgbImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  RgbImage() = default;
  RgbImage(int w, int h, Rgb fill = {255, 255, 255});

  void set(int x, int y, Rgb c);
  Rgb get(int x, int y) const;
  void fill_rect(int x, int y, int w, int h, Rgb c);
  /// Copies `src` with its top-left at (x, y), clipped.
  void blit(const RgbImage& src, int x, int y);
};

void write_png(const std::filesystem::path& path, const RgbImage& image);
/// Single-channel 8-bit PNG.
void write_png_gray(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& values);

/// 5x7 bitmap for `c` (rows top to bottom, bit 4 = leftmost column), or
/// nullptr if the character has no glyph. Lowercase maps to uppercase.
const std::array<std::uint8_t, 7>* glyph(char c);

constexpr int kGlyphWidth = 5;
constexpr int kGlyphHeight = 7;

/// Width in pixels of `text` at `scale` (1 px spacing between glyphs).
int text_width(const std::string& text, int scale = 1);
void draw_text(RgbImage& image, int x, int y, const std::string& text, Rgb color, int scale = 1);
/// Rasterized text as a height x width 0/1 mask.
Eigen::ArrayXXf text_mask(const std::string& text, int scale = 1);

/// Jet-style colormap for v in [0, 1].
Rgb colormap(float v);

/// Image from HWC floats in [0, 1] (1 or 3 channels).
RgbImage to_rgb(const Eigen::ArrayXf& pixels, int height, int width, int channels, int upscale = 1);

struct BarSeries {
  std::string name;
  std::vector<double> values;
};

/// Grouped bar chart with a title, category labels and a legend.
RgbImage bar_chart(const std::string& title, const std::vector<std::string>& categories, const std::vector<BarSeries>& series,
                   double y_max = 1.0);

}  // namespace wmlab
