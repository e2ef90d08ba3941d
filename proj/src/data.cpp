#include "fel/data.hpp"

#include <cmath>
#include <stdexcept>

#include "fel/serialize.hpp"

namespace fel {

namespace {

constexpr char kMagic[4] = {'F', 'E', 'L', 'D'};
constexpr std::uint32_t kVersion = 1;

struct Geometry {
  double cx, cy, r;
};

bool inside_shape(int label, double px, double py, const Geometry& g) {
  const double dx = px - g.cx, dy = py - g.cy;
  switch (label) {
    case 0:  // circle
      return dx * dx + dy * dy <= g.r * g.r;
    case 1:  // square
      return std::max(std::abs(dx), std::abs(dy)) <= 0.85 * g.r;
    case 2: {  // triangle, apex up
      const double ax = g.cx, ay = g.cy - g.r;
      const double bx = g.cx - 0.95 * g.r, by = g.cy + 0.78 * g.r;
      const double cx2 = g.cx + 0.95 * g.r, cy2 = g.cy + 0.78 * g.r;
      auto side = [px, py](double x0, double y0, double x1, double y1) {
        return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0);
      };
      const double s1 = side(ax, ay, bx, by);
      const double s2 = side(bx, by, cx2, cy2);
      const double s3 = side(cx2, cy2, ax, ay);
      return (s1 >= 0 && s2 >= 0 && s3 >= 0) || (s1 <= 0 && s2 <= 0 && s3 <= 0);
    }
    case 3:  // cross
      return (std::abs(dx) <= 0.34 * g.r && std::abs(dy) <= g.r) ||
             (std::abs(dy) <= 0.34 * g.r && std::abs(dx) <= g.r);
    default:
      return false;
  }
}

}  // namespace

const char* shape_class_name(int label) {
  static const char* names[kNumShapeClasses] = {"circle", "square", "triangle",
                                                "cross"};
  if (label < 0 || label >= kNumShapeClasses) return "?";
  return names[label];
}

void DatasetSpec::validate() const {
  if (num_classes < 2 || num_classes > kNumShapeClasses)
    throw std::invalid_argument("DatasetSpec: num_classes must be in [2, " +
                                std::to_string(kNumShapeClasses) + "], got " +
                                std::to_string(num_classes));
  if (image_size < 8)
    throw std::invalid_argument("DatasetSpec: image_size must be at least 8");
  if (train_count < 0 || val_count < 0)
    throw std::invalid_argument("DatasetSpec: sample counts must be non-negative");
  if (gamma_lo <= 0 || gamma_hi < gamma_lo)
    throw std::invalid_argument("DatasetSpec: bad gamma range");
  if (brightness_lo <= 0 || brightness_hi < brightness_lo)
    throw std::invalid_argument("DatasetSpec: bad brightness range");
  if (noise_sigma < 0)
    throw std::invalid_argument("DatasetSpec: noise_sigma must be non-negative");
}

Tensor render_shape(int label, int size, Rng& rng) {
  if (label < 0 || label >= kNumShapeClasses)
    throw std::invalid_argument("render_shape: label " + std::to_string(label) +
                                " out of range");
  if (size < 8)
    throw std::invalid_argument("render_shape: size must be at least 8");
  // fixed draw order keeps images reproducible for a given rng state
  const double bg = rng.uniform(0.0, 0.08);
  double color[3];
  for (double& c : color) c = rng.uniform(0.55, 1.0);
  Geometry g;
  g.cx = rng.uniform(0.34, 0.66) * size;
  g.cy = rng.uniform(0.34, 0.66) * size;
  g.r = rng.uniform(0.22, 0.32) * size;

  Tensor out = Tensor::zeros({3, size, size});
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  constexpr int kSub = 4;  // 4x4 coverage sampling softens the edges
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy)
        for (int sx = 0; sx < kSub; ++sx)
          if (inside_shape(label, x + (sx + 0.5) / kSub, y + (sy + 0.5) / kSub,
                           g))
            ++hits;
      const double cov = static_cast<double>(hits) / (kSub * kSub);
      const std::size_t at = static_cast<std::size_t>(y) * size + x;
      for (int c = 0; c < 3; ++c)
        out.data[static_cast<std::size_t>(c) * plane + at] =
            bg + cov * (color[c] - bg);
    }
  }
  return out;
}

Tensor darken(const Tensor& img, double gamma, double brightness,
              double noise_sigma, std::uint64_t noise_seed) {
  if (img.rank() != 3)
    throw std::invalid_argument("darken: expected a CHW tensor, got " +
                                shape_str(img.shape));
  Tensor out = Tensor::zeros(img.shape);
  Rng noise(noise_seed);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    double v = brightness * std::pow(img.data[i], gamma);
    if (noise_sigma > 0) v += noise.gaussian() * noise_sigma;
    out.data[i] = std::min(std::max(v, 0.0), 1.0);
  }
  return out;
}

Dataset generate_dataset(const DatasetSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  auto make_split = [&spec](std::uint64_t stream, int count) {
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      Rng rng(derive_seed(spec.seed, stream, static_cast<std::uint64_t>(i)));
      Sample s;
      s.label = static_cast<int>(rng.below(
          static_cast<std::uint64_t>(spec.num_classes)));
      const Tensor clean = render_shape(s.label, spec.image_size, rng);
      s.gamma = rng.uniform(spec.gamma_lo, spec.gamma_hi);
      s.brightness = rng.uniform(spec.brightness_lo, spec.brightness_hi);
      s.noise_seed = rng.next_u64();
      s.image = darken(clean, s.gamma, s.brightness, spec.noise_sigma,
                       s.noise_seed);
      out.push_back(std::move(s));
    }
    return out;
  };
  ds.train = make_split(1, spec.train_count);
  ds.val = make_split(2, spec.val_count);
  return ds;
}

void write_dataset(const std::string& path, const Dataset& ds) {
  ds.spec.validate();
  ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(kVersion);
  w.u32(static_cast<std::uint32_t>(ds.spec.num_classes));
  w.u32(static_cast<std::uint32_t>(ds.spec.image_size));
  w.u32(static_cast<std::uint32_t>(ds.train.size()));
  w.u32(static_cast<std::uint32_t>(ds.val.size()));
  w.f64(ds.spec.gamma_lo);
  w.f64(ds.spec.gamma_hi);
  w.f64(ds.spec.brightness_lo);
  w.f64(ds.spec.brightness_hi);
  w.f64(ds.spec.noise_sigma);
  w.u64(ds.spec.seed);
  const std::size_t plane =
      static_cast<std::size_t>(ds.spec.image_size) * ds.spec.image_size * 3;
  auto put_split = [&](const std::vector<Sample>& split) {
    for (const Sample& s : split) {
      if (s.image.data.size() != plane)
        throw std::invalid_argument(
            "write_dataset: sample image " + shape_str(s.image.shape) +
            " does not match the spec size " +
            std::to_string(ds.spec.image_size));
      w.u32(static_cast<std::uint32_t>(s.label));
      w.f64(s.gamma);
      w.f64(s.brightness);
      w.u64(s.noise_seed);
      for (double v : s.image.data) w.f64(v);
    }
  };
  put_split(ds.train);
  put_split(ds.val);
  ByteWriter footer;
  footer.u64(fnv1a64(w.data().data(), w.data().size()));
  write_file(path, w.data() + footer.data());
}

Dataset read_dataset(const std::string& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 8 + 4)
    throw std::runtime_error("dataset " + path + " is too small to be valid");
  const std::string payload = bytes.substr(0, bytes.size() - 8);
  // the digest is the last eight bytes, little endian
  std::uint64_t stored = 0;
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(
                  static_cast<unsigned char>(bytes[bytes.size() - 8 +
                                                   static_cast<std::size_t>(i)]))
              << (8 * i);
  if (fnv1a64(payload.data(), payload.size()) != stored)
    throw std::runtime_error("dataset " + path +
                             " failed its integrity check");
  ByteReader r(payload);
  char magic[4];
  for (char& m : magic) m = static_cast<char>(r.u8());
  if (std::string(magic, 4) != std::string(kMagic, 4))
    throw std::runtime_error("dataset " + path + " has the wrong magic");
  const std::uint32_t version = r.u32();
  if (version != kVersion)
    throw std::runtime_error("dataset " + path + " uses version " +
                             std::to_string(version) + ", expected " +
                             std::to_string(kVersion));
  Dataset ds;
  ds.spec.num_classes = static_cast<int>(r.u32());
  ds.spec.image_size = static_cast<int>(r.u32());
  const int train_count = static_cast<int>(r.u32());
  const int val_count = static_cast<int>(r.u32());
  ds.spec.train_count = train_count;
  ds.spec.val_count = val_count;
  ds.spec.gamma_lo = r.f64();
  ds.spec.gamma_hi = r.f64();
  ds.spec.brightness_lo = r.f64();
  ds.spec.brightness_hi = r.f64();
  ds.spec.noise_sigma = r.f64();
  ds.spec.seed = r.u64();
  ds.spec.validate();
  const int size = ds.spec.image_size;
  auto get_split = [&r, size](int count) {
    std::vector<Sample> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
      Sample s;
      s.label = static_cast<int>(r.u32());
      s.gamma = r.f64();
      s.brightness = r.f64();
      s.noise_seed = r.u64();
      s.image = Tensor::zeros({3, size, size});
      for (double& v : s.image.data) v = r.f64();
      out.push_back(std::move(s));
    }
    return out;
  };
  ds.train = get_split(train_count);
  ds.val = get_split(val_count);
  if (r.remaining() != 0)
    throw std::runtime_error("dataset " + path + " has " +
                             std::to_string(r.remaining()) +
                             " unexpected trailing bytes");
  return ds;
}

}  // namespace fel
