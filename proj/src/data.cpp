#include "deblur/data.hpp"

#include <algorithm>
#include <fstream>
#include <map>

#include <nlohmann/json.hpp>

namespace deblur {

namespace fs = std::filesystem;
using nlohmann::json;

BoundingBox BoundingBox::clipped(int width, int height) const {
  return {std::clamp(x0, 0, width), std::clamp(y0, 0, height), std::clamp(x1, 0, width), std::clamp(y1, 0, height)};
}

const char* split_name(Split split) { return split == Split::kTrain ? "train" : "test"; }

// ---------------------------------------------------------------------------
// annotations

Annotation read_annotation(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError(path, "cannot open annotation");
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(path, std::string("malformed JSON: ") + e.what());
  }
  Annotation a;
  try {
    a.image = doc.at("image").get<std::string>();
    a.width = doc.at("width").get<int>();
    a.height = doc.at("height").get<int>();
    for (const auto& b : doc.at("boxes")) {
      if (!b.is_array() || b.size() != 4) throw DataError(path, "box record must be [x0,y0,x1,y1]");
      for (const auto& v : b)
        if (!v.is_number_integer()) throw DataError(path, "box coordinates must be integers");
      a.boxes.push_back({b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()});
      if (a.boxes.back().x1 < a.boxes.back().x0 || a.boxes.back().y1 < a.boxes.back().y0)
        throw DataError(path, "box with negative width or height");
    }
  } catch (const json::exception& e) {
    throw DataError(path, std::string("malformed annotation record: ") + e.what());
  }
  if (a.width <= 0 || a.height <= 0) throw DataError(path, "annotation width/height must be positive");
  return a;
}

void write_annotation(const fs::path& path, const Annotation& a) {
  json boxes = json::array();
  for (const auto& b : a.boxes) boxes.push_back({b.x0, b.y0, b.x1, b.y1});
  json doc = {{"image", a.image}, {"width", a.width}, {"height", a.height}, {"boxes", boxes}};
  std::ofstream out(path);
  if (!out) throw DataError(path, "cannot write annotation");
  out << doc.dump() << "\n";
}

// ---------------------------------------------------------------------------
// loading

namespace {

std::map<std::string, fs::path> list_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError(dir, "missing directory");
  std::map<std::string, fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.emplace(e.path().filename().string(), e.path());
  return files;
}

}  // namespace

std::vector<AnnotatedSample> load_dataset(const fs::path& root, Split split) {
  const fs::path base = root / split_name(split);
  if (!fs::is_directory(base)) throw DataError(base, "missing split directory");
  const auto blurred = list_pngs(base / "blur");
  const auto sharp = list_pngs(base / "sharp");
  const fs::path ann_dir = base / "annotations";

  for (const auto& [name, path] : sharp)
    if (!blurred.count(name)) throw DataError(path, "sharp image has no blurred counterpart");

  std::vector<AnnotatedSample> samples;
  samples.reserve(blurred.size());
  for (const auto& [name, path] : blurred) {
    auto it = sharp.find(name);
    if (it == sharp.end()) throw DataError(path, "blurred image has no sharp counterpart");

    AnnotatedSample s;
    s.source_id = fs::path(name).stem().string();
    try {
      s.blurred = load_png(path);
      s.sharp = load_png(it->second);
    } catch (const IoError& e) {
      throw DataError(path, e.what());
    }
    if (!(s.blurred.shape() == s.sharp.shape()))
      throw DataError(it->second, "sharp dimensions " + s.sharp.shape().str() + " differ from blurred " +
                                      s.blurred.shape().str());

    const int w = s.blurred.width();
    const int h = s.blurred.height();
    const fs::path ann_path = ann_dir / (s.source_id + ".json");
    if (fs::exists(ann_path)) {
      const Annotation a = read_annotation(ann_path);
      if (a.image != name) throw DataError(ann_path, "annotation refers to '" + a.image + "', expected '" + name + "'");
      if (a.width != w || a.height != h) throw DataError(ann_path, "annotation size does not match image size");
      for (const auto& b : a.boxes) {
        const BoundingBox c = b.clipped(w, h);
        if (c.area() > 0) s.boxes.push_back(c);
      }
    }
    s.mask = rasterize_mask(s.boxes, w, h);
    samples.push_back(std::move(s));
  }
  return samples;
}

// ---------------------------------------------------------------------------
// masks and blur

BinaryMask rasterize_mask(std::span<const BoundingBox> boxes, int width, int height) {
  if (width < 0 || height < 0) throw std::invalid_argument("rasterize_mask: negative image size");
  BinaryMask mask(height, width);
  for (const auto& box : boxes) {
    if (box.x1 < box.x0 || box.y1 < box.y0) throw std::invalid_argument("rasterize_mask: box with negative extent");
    const BoundingBox c = box.clipped(width, height);
    if (c.area() == 0) continue;
    for (int y = c.y0; y < c.y1; ++y)
      for (int x = c.x0; x < c.x1; ++x) mask.set(y, x, true);
  }
  return mask;
}

BlurPair synthesize_blur(std::span<const ImagePlane> frames) {
  const std::size_t n = frames.size();
  if (n < 3 || n % 2 == 0)
    throw std::invalid_argument("synthesize_blur: window must be odd and >= 3, got " + std::to_string(n));
  const Shape shape = frames.front().shape();
  for (const auto& f : frames) require_same_shape(shape, f.shape(), "synthesize_blur");

  std::vector<double> acc(shape.numel(), 0.0);
  for (const auto& f : frames)
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += f[i];
  BlurPair out{ImagePlane(shape), frames[n / 2]};
  for (std::size_t i = 0; i < acc.size(); ++i) out.blurred[i] = static_cast<float>(acc[i] / static_cast<double>(n));
  return out;
}

// ---------------------------------------------------------------------------
// pyramids

ImagePlane area_downsample(const ImagePlane& image, int factor) {
  if (factor < 1 || image.height() % factor != 0 || image.width() % factor != 0)
    throw std::invalid_argument("area_downsample: factor " + std::to_string(factor) + " does not divide " +
                                image.shape().str());
  if (factor == 1) return image;
  const int oh = image.height() / factor;
  const int ow = image.width() / factor;
  const double inv = 1.0 / (factor * factor);
  ImagePlane out(image.channels(), oh, ow);
  for (int c = 0; c < image.channels(); ++c)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy)
          for (int dx = 0; dx < factor; ++dx) acc += image.at(c, y * factor + dy, x * factor + dx);
        out.at(c, y, x) = static_cast<float>(acc * inv);
      }
  return out;
}

ImagePlane area_upsample(const ImagePlane& image, int factor) {
  if (factor < 1) throw std::invalid_argument("area_upsample: factor must be positive");
  ImagePlane out(image.channels(), image.height() * factor, image.width() * factor);
  for (int c = 0; c < out.channels(); ++c)
    for (int y = 0; y < out.height(); ++y)
      for (int x = 0; x < out.width(); ++x) out.at(c, y, x) = image.at(c, y / factor, x / factor);
  return out;
}

namespace {

void check_pyramid_dims(int height, int width, int scales) {
  if (scales < 1) throw std::invalid_argument("pyramid needs at least one scale");
  const int divisor = (1 << (scales - 1)) * 4;
  if (height % divisor != 0 || width % divisor != 0)
    throw std::invalid_argument("image " + std::to_string(width) + "x" + std::to_string(height) +
                                " must have dimensions divisible by " + std::to_string(divisor) + " for " +
                                std::to_string(scales) + " scales");
}

}  // namespace

std::vector<ImagePlane> build_pyramid(const ImagePlane& image, int scales) {
  check_pyramid_dims(image.height(), image.width(), scales);
  std::vector<ImagePlane> levels;
  levels.reserve(scales);
  for (int s = 0; s < scales; ++s) levels.push_back(area_downsample(image, 1 << (scales - 1 - s)));
  return levels;
}

BinaryMask downsample_mask(const BinaryMask& mask, int factor) {
  if (factor < 1 || mask.height() % factor != 0 || mask.width() % factor != 0)
    throw std::invalid_argument("downsample_mask: factor " + std::to_string(factor) + " does not divide " +
                                std::to_string(mask.width()) + "x" + std::to_string(mask.height()));
  if (factor == 1) return mask;
  const int oh = mask.height() / factor;
  const int ow = mask.width() / factor;
  const int block = factor * factor;
  BinaryMask out(oh, ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      int ones = 0;
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx) ones += mask(y * factor + dy, x * factor + dx);
      out.set(y, x, 2 * ones >= block);  // mean >= 0.5, ties to 1
    }
  return out;
}

std::vector<BinaryMask> build_mask_pyramid(const BinaryMask& mask, int scales) {
  check_pyramid_dims(mask.height(), mask.width(), scales);
  std::vector<BinaryMask> levels;
  levels.reserve(scales);
  for (int s = 0; s < scales; ++s) levels.push_back(downsample_mask(mask, 1 << (scales - 1 - s)));
  return levels;
}

// ---------------------------------------------------------------------------
// patches

Patch crop_patch(const AnnotatedSample& sample, int x, int y, int size) {
  const int w = sample.blurred.width();
  const int h = sample.blurred.height();
  if (x < 0 || y < 0 || x + size > w || y + size > h) throw std::out_of_range("crop outside image");
  Patch p;
  p.x = x;
  p.y = y;
  const int ch = sample.blurred.channels();
  p.blurred = ImagePlane(ch, size, size);
  p.sharp = ImagePlane(ch, size, size);
  p.mask = BinaryMask(size, size);
  for (int c = 0; c < ch; ++c)
    for (int yy = 0; yy < size; ++yy)
      for (int xx = 0; xx < size; ++xx) {
        p.blurred.at(c, yy, xx) = sample.blurred.at(c, y + yy, x + xx);
        p.sharp.at(c, yy, xx) = sample.sharp.at(c, y + yy, x + xx);
      }
  for (int yy = 0; yy < size; ++yy)
    for (int xx = 0; xx < size; ++xx) p.mask.set(yy, xx, sample.mask(y + yy, x + xx) != 0);
  return p;
}

Patch sample_patch(const AnnotatedSample& sample, int size, std::mt19937_64& rng, bool require_fg) {
  const int w = sample.blurred.width();
  const int h = sample.blurred.height();
  if (size <= 0 || w < size || h < size)
    throw std::invalid_argument("sample_patch: image " + std::to_string(w) + "x" + std::to_string(h) +
                                " smaller than patch " + std::to_string(size));
  if (require_fg && sample.boxes.empty())
    throw std::invalid_argument("sample_patch: foreground requested from boxless sample " + sample.source_id);

  std::uniform_int_distribution<int> ux(0, w - size);
  std::uniform_int_distribution<int> uy(0, h - size);
  auto has_fg = [&](int x0, int y0) {
    for (const auto& b : sample.boxes)
      if (b.x0 < x0 + size && b.x1 > x0 && b.y0 < y0 + size && b.y1 > y0) return true;
    return false;
  };

  int x = ux(rng);
  int y = uy(rng);
  if (require_fg && !has_fg(x, y)) {
    bool found = false;
    for (int attempt = 1; attempt < kPatchRetries && !found; ++attempt) {
      x = ux(rng);
      y = uy(rng);
      found = has_fg(x, y);
    }
    if (!found) {
      std::uniform_int_distribution<std::size_t> pick(0, sample.boxes.size() - 1);
      const BoundingBox& b = sample.boxes[pick(rng)];
      const int cx = (b.x0 + b.x1 - 1) / 2;
      const int cy = (b.y0 + b.y1 - 1) / 2;
      x = std::clamp(cx - size / 2, 0, w - size);
      y = std::clamp(cy - size / 2, 0, h - size);
    }
  }
  return crop_patch(sample, x, y, size);
}

}  // namespace deblur
