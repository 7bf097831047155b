#include "synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

namespace deblur::fixtures {

namespace fs = std::filesystem;

AnnotatedSample rectangles_on_noise(int size, std::mt19937_64& rng, const std::string& id) {
  AnnotatedSample s;
  s.source_id = id;
  ImagePlane img(3, size, size);
  std::uniform_real_distribution<float> noise(0.0f, 1.0f);
  for (auto& v : img.vec()) v = noise(rng);

  std::uniform_int_distribution<int> count(1, 2);
  std::uniform_int_distribution<int> extent(size / 4, size / 2);
  const int n = count(rng);
  for (int i = 0; i < n; ++i) {
    const int w = extent(rng);
    const int h = extent(rng);
    std::uniform_int_distribution<int> px(0, size - w);
    std::uniform_int_distribution<int> py(0, size - h);
    const int x0 = px(rng);
    const int y0 = py(rng);
    s.boxes.push_back({x0, y0, x0 + w, y0 + h});
    for (int c = 0; c < 3; ++c)
      for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) img.at(c, y, x) = 1.0f;
  }
  s.mask = rasterize_mask(s.boxes, size, size);
  s.blurred = img;
  s.sharp = img;
  return s;
}

MovingScene MovingScene::random(int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MovingScene m{};
  for (int c = 0; c < 3; ++c) {
    m.bg_phase[c] = 6.283 * u(rng);
    m.bg_freq[c][0] = 0.15 + 0.35 * u(rng);
    m.bg_freq[c][1] = 0.15 + 0.35 * u(rng);
    m.box_color[c] = 0.2 + 0.6 * u(rng);
  }
  m.bg_drift[0] = 0.3 * (u(rng) - 0.5);
  m.bg_drift[1] = 0.3 * (u(rng) - 0.5);
  m.box_w = size * (0.25 + 0.2 * u(rng));
  m.box_h = size * (0.35 + 0.25 * u(rng));
  m.box_x = size * 0.15 + (size * 0.7 - m.box_w) * u(rng);
  m.box_y = (size - m.box_h) * u(rng);
  m.box_vx = (u(rng) < 0.5 ? -1.0 : 1.0) * (0.4 + 0.5 * u(rng));
  m.box_vy = 0.4 * (u(rng) - 0.5);
  m.box_stripe = 0.5 + 0.5 * u(rng);
  return m;
}

ImagePlane MovingScene::render(int size, double t) const {
  ImagePlane img(3, size, size);
  const double bx = box_x + box_vx * t;
  const double by = box_y + box_vy * t;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double xs = x + 0.5 + bg_drift[0] * t;
      const double ys = y + 0.5 + bg_drift[1] * t;
      // Area coverage of the pixel by the box gives antialiased, subpixel motion.
      const double cx = std::clamp(std::min(x + 1.0, bx + box_w) - std::max(double(x), bx), 0.0, 1.0);
      const double cy = std::clamp(std::min(y + 1.0, by + box_h) - std::max(double(y), by), 0.0, 1.0);
      const double cover = cx * cy;
      for (int c = 0; c < 3; ++c) {
        const double bg = 0.5 + 0.25 * std::sin(bg_freq[c][0] * xs + bg_phase[c]) * std::cos(bg_freq[c][1] * ys);
        const double u = x + 0.5 - bx;
        const double fg = box_color[c] + 0.2 * std::sin(box_stripe * u);
        img.at(c, y, x) = static_cast<float>(cover * fg + (1.0 - cover) * bg);
      }
    }
  return img;
}

BoundingBox MovingScene::box_at(double t, int size) const {
  const double bx = box_x + box_vx * t;
  const double by = box_y + box_vy * t;
  BoundingBox b{static_cast<int>(std::floor(bx)), static_cast<int>(std::floor(by)),
                static_cast<int>(std::ceil(bx + box_w)), static_cast<int>(std::ceil(by + box_h))};
  return b.clipped(size, size);
}

std::vector<ImagePlane> render_frames(const MovingScene& scene, int size, int window) {
  std::vector<ImagePlane> frames;
  for (int t = 0; t < window; ++t) frames.push_back(scene.render(size, t));
  return frames;
}

AnnotatedSample moving_scene_sample(int size, int window, std::mt19937_64& rng, const std::string& id) {
  const MovingScene scene = MovingScene::random(size, rng);
  const auto frames = render_frames(scene, size, window);
  const BlurPair pair = synthesize_blur(frames);
  AnnotatedSample s;
  s.source_id = id;
  s.blurred = pair.blurred;
  s.sharp = pair.sharp;
  const BoundingBox b = scene.box_at(window / 2, size);
  if (b.area() > 0) s.boxes.push_back(b);
  s.mask = rasterize_mask(s.boxes, size, size);
  return s;
}

void write_dataset(const fs::path& root, Split split, std::span<const AnnotatedSample> samples) {
  const fs::path base = root / split_name(split);
  fs::create_directories(base / "blur");
  fs::create_directories(base / "sharp");
  fs::create_directories(base / "annotations");
  for (const auto& s : samples) {
    const std::string name = s.source_id + ".png";
    save_png(base / "blur" / name, s.blurred);
    save_png(base / "sharp" / name, s.sharp);
    write_annotation(base / "annotations" / (s.source_id + ".json"),
                     {name, s.blurred.width(), s.blurred.height(), s.boxes});
  }
}

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("deblur_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

BinaryMask random_mask(int height, int width, std::mt19937_64& rng) {
  BinaryMask m(height, width);
  std::bernoulli_distribution b(0.4);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) m.set(y, x, b(rng));
  return m;
}

}  // namespace deblur::fixtures
