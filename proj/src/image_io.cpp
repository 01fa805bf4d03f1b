#include "wmlab/image_io.hpp"

#include "wmlab/errors.hpp"

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

namespace wmlab {
namespace {

using Glyph = std::array<std::uint8_t, 7>;

const std::map<char, Glyph>& font() {
  static const std::map<char, Glyph> kFont = {
      {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
      {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
      {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
      {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
      {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
      {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
      {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
      {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
      {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
      {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
      {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
      {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
      {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
      {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
      {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
      {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
      {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
      {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
      {' ', {0, 0, 0, 0, 0, 0, 0}},                      {'.', {0, 0, 0, 0, 0, 0x0C, 0x0C}},
      {'-', {0, 0, 0, 0x1F, 0, 0, 0}},                   {'/', {0, 0x01, 0x02, 0x04, 0x08, 0x10, 0}},
      {':', {0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0}},          {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}},
      {'_', {0, 0, 0, 0, 0, 0, 0x1F}},                   {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
      {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}}, {'=', {0, 0, 0x1F, 0, 0x1F, 0, 0}},
      {'+', {0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0}},       {',', {0, 0, 0, 0, 0x0C, 0x04, 0x08}},
  };
  return kFont;
}

void encode_png(const std::filesystem::path& path, int width, int height, int channels, const std::uint8_t* pixels) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(width);
  image.height = static_cast<png_uint_32>(height);
  image.format = channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  if (!png_image_write_to_file(&image, path.c_str(), 0, pixels, 0, nullptr))
    throw MissingArtifact("cannot write " + path.string() + ": " + image.message);
}

}  // namespace

RgbImage::RgbImage(int w, int h, Rgb fill) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3) {
  for (std::size_t i = 0; i < data.size(); i += 3) {
    data[i] = fill.r;
    data[i + 1] = fill.g;
    data[i + 2] = fill.b;
  }
}

void RgbImage::set(int x, int y, Rgb c) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
  data[i] = c.r;
  data[i + 1] = c.g;
  data[i + 2] = c.b;
}

Rgb RgbImage::get(int x, int y) const {
  const std::size_t i = (static_cast<std::size_t>(y) * width + x) * 3;
  return {data[i], data[i + 1], data[i + 2]};
}

void RgbImage::fill_rect(int x, int y, int w, int h, Rgb c) {
  for (int yy = y; yy < y + h; ++yy)
    for (int xx = x; xx < x + w; ++xx) set(xx, yy, c);
}

void RgbImage::blit(const RgbImage& src, int x, int y) {
  for (int yy = 0; yy < src.height; ++yy)
    for (int xx = 0; xx < src.width; ++xx) set(x + xx, y + yy, src.get(xx, yy));
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  encode_png(path, image.width, image.height, 3, image.data.data());
}

void write_png_gray(const std::filesystem::path& path, int width, int height, const std::vector<std::uint8_t>& values) {
  if (values.size() != static_cast<std::size_t>(width) * height) throw std::invalid_argument("gray image size mismatch");
  encode_png(path, width, height, 1, values.data());
}

const std::array<std::uint8_t, 7>* glyph(char c) {
  const auto& f = font();
  const auto it = f.find(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
  return it == f.end() ? nullptr : &it->second;
}

int text_width(const std::string& text, int scale) {
  if (text.empty()) return 0;
  return static_cast<int>(text.size()) * (kGlyphWidth + 1) * scale - scale;
}

void draw_text(RgbImage& image, int x, int y, const std::string& text, Rgb color, int scale) {
  int cx = x;
  for (char c : text) {
    if (const auto* g = glyph(c)) {
      for (int row = 0; row < kGlyphHeight; ++row)
        for (int col = 0; col < kGlyphWidth; ++col)
          if ((*g)[static_cast<std::size_t>(row)] & (0x10 >> col)) image.fill_rect(cx + col * scale, y + row * scale, scale, scale, color);
    }
    cx += (kGlyphWidth + 1) * scale;
  }
}

Eigen::ArrayXXf text_mask(const std::string& text, int scale) {
  Eigen::ArrayXXf mask = Eigen::ArrayXXf::Zero(kGlyphHeight * scale, std::max(text_width(text, scale), 0));
  int cx = 0;
  for (char c : text) {
    const auto* g = glyph(c);
    if (g == nullptr) throw std::invalid_argument(std::string("no glyph for character '") + c + "'");
    for (int row = 0; row < kGlyphHeight; ++row)
      for (int col = 0; col < kGlyphWidth; ++col)
        if ((*g)[static_cast<std::size_t>(row)] & (0x10 >> col))
          mask.block(row * scale, cx + col * scale, scale, scale).setOnes();
    cx += (kGlyphWidth + 1) * scale;
  }
  return mask;
}

Rgb colormap(float v) {
  v = std::clamp(v, 0.0f, 1.0f);
  auto channel = [](float t) {
    return static_cast<std::uint8_t>(std::lround(255.0f * std::clamp(1.5f - std::abs(4.0f * t), 0.0f, 1.0f)));
  };
  return {channel(v - 0.75f), channel(v - 0.5f), channel(v - 0.25f)};
}

RgbImage to_rgb(const Eigen::ArrayXf& pixels, int height, int width, int channels, int upscale) {
  RgbImage out(width * upscale, height * upscale);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const std::size_t base = (static_cast<std::size_t>(y) * width + x) * channels;
      auto q = [&](int c) {
        return static_cast<std::uint8_t>(std::lround(255.0f * std::clamp(pixels(static_cast<Eigen::Index>(base + c)), 0.0f, 1.0f)));
      };
      const Rgb c = channels == 3 ? Rgb{q(0), q(1), q(2)} : Rgb{q(0), q(0), q(0)};
      out.fill_rect(x * upscale, y * upscale, upscale, upscale, c);
    }
  return out;
}

RgbImage bar_chart(const std::string& title, const std::vector<std::string>& categories, const std::vector<BarSeries>& series,
                   double y_max) {
  static const Rgb kPalette[] = {{52, 101, 164}, {245, 121, 0}, {136, 138, 133}, {237, 212, 0}, {78, 154, 6}, {117, 80, 123}};
  const int bar_w = 14, gap = 18, left = 50, top = 30, plot_h = 200;
  const int group_w = std::max<int>(1, static_cast<int>(series.size())) * bar_w + gap;
  const int legend_h = 12 * static_cast<int>(series.size()) + 8;
  const int width = std::max(left + group_w * static_cast<int>(categories.size()) + 20, text_width(title, 2) + 20);
  RgbImage img(std::max(width, 220), top + plot_h + 24 + legend_h);
  draw_text(img, 10, 8, title, {0, 0, 0}, 2);
  const Rgb axis{0, 0, 0};
  img.fill_rect(left - 2, top, 1, plot_h + 1, axis);
  img.fill_rect(left - 2, top + plot_h, img.width - left - 8, 1, axis);
  for (int t = 0; t <= 4; ++t) {
    const int y = top + plot_h - t * plot_h / 4;
    img.fill_rect(left - 5, y, 3, 1, axis);
    char label[16];
    std::snprintf(label, sizeof(label), "%.2f", y_max * t / 4.0);
    draw_text(img, 4, y - 3, label, axis);
  }
  for (std::size_t c = 0; c < categories.size(); ++c) {
    const int gx = left + static_cast<int>(c) * group_w + gap / 2;
    for (std::size_t s = 0; s < series.size(); ++s) {
      const double v = c < series[s].values.size() ? series[s].values[c] : 0.0;
      const int h = static_cast<int>(std::lround(std::clamp(v / y_max, 0.0, 1.0) * plot_h));
      img.fill_rect(gx + static_cast<int>(s) * bar_w, top + plot_h - h, bar_w - 2, h, kPalette[s % 6]);
    }
    draw_text(img, gx, top + plot_h + 6, categories[c], axis);
  }
  for (std::size_t s = 0; s < series.size(); ++s) {
    const int y = top + plot_h + 22 + static_cast<int>(s) * 12;
    img.fill_rect(left, y, 8, 8, kPalette[s % 6]);
    draw_text(img, left + 12, y, series[s].name, axis);
  }
  return img;
}

}  // namespace wmlab
