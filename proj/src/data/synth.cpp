#include "capsct/data/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include "capsct/ad/errors.hpp"
#include "capsct/ad/rng.hpp"

namespace capsct::data {
namespace {

// All geometry lives in normalized image coordinates (x, y in [0, 1]);
// sizes quoted in pixels refer to the 64x64 reference grid.
constexpr double kRefSize = 64.0;
constexpr float kBodyLevel = 0.5f;
constexpr float kLungLevel = 0.1f;
constexpr float kLesionLevel = 1.0f;

struct Ellipse {
  double cx, cy, rx, ry;
  double radial(double x, double y) const {
    const double dx = (x - cx) / rx, dy = (y - cy) / ry;
    return dx * dx + dy * dy;
  }
};

struct Geometry {
  Ellipse body;
  std::array<Ellipse, 2> lungs;
};

struct Lesion {
  int lung;
  double rho, theta;  // position inside the lung, fraction of its radii
  double radius;      // normalized
};

// Draw order is fixed: geometry, TEST4 branch, then lesions and slice count,
// then acquisition effects. Each uses its own child stream.
enum Stream : std::uint64_t { kGeometry = 1, kBranch = 2, kAnatomy = 3, kAcquisition = 4, kVessels = 5, kTexture = 6 };

// Thin vessel-like segments: clutter every class shares, so brightness
// alone does not mark a lesion.
struct Vessel {
  int lung;
  double rho, theta, angle, length;
};
constexpr float kVesselBoost = 0.2f;
// Parenchyma granularity; amplitude varies per scan.
constexpr double kTextureMin = 0.04, kTextureMax = 0.12;

std::vector<Vessel> draw_vessels(std::uint64_t seed) {
  Rng rng(Rng::mix(seed, kVessels));
  std::vector<Vessel> out;
  for (int side = 0; side < 2; ++side) {
    const int count = static_cast<int>(rng.between(4, 7));
    for (int i = 0; i < count; ++i) {
      out.push_back({side, rng.uniform(0.0, 0.75), rng.uniform(0.0, 2.0 * std::numbers::pi),
                     rng.uniform(0.0, std::numbers::pi), rng.uniform(3.0, 8.0) / kRefSize});
    }
  }
  return out;
}

double segment_distance(double x, double y, double ax, double ay, double bx, double by) {
  const double vx = bx - ax, vy = by - ay;
  const double t = std::clamp(((x - ax) * vx + (y - ay) * vy) / (vx * vx + vy * vy), 0.0, 1.0);
  return std::hypot(x - ax - t * vx, y - ay - t * vy);
}

Geometry draw_geometry(std::uint64_t seed) {
  Rng rng(Rng::mix(seed, kGeometry));
  Geometry g;
  g.body = {0.5 + rng.uniform(-0.01, 0.01), 0.5 + rng.uniform(-0.01, 0.01), 0.44 + rng.uniform(-0.02, 0.02),
            0.36 + rng.uniform(-0.02, 0.02)};
  const double gap = 0.2 + rng.uniform(-0.01, 0.01);
  const double rx = 0.16 + rng.uniform(-0.01, 0.01), ry = 0.27 + rng.uniform(-0.015, 0.015);
  g.lungs[0] = {g.body.cx - gap, g.body.cy, rx, ry};
  g.lungs[1] = {g.body.cx + gap, g.body.cy, rx * (1.0 + rng.uniform(-0.04, 0.04)), ry};
  return g;
}

// Lungs taper toward the ends of the volume.
double lung_scale(std::size_t n_slices, std::size_t k) {
  const double z = (static_cast<double>(k) + 0.5) / static_cast<double>(n_slices);
  return 0.85 + 0.15 * std::sin(std::numbers::pi * z);
}

Ellipse lung_at(const Geometry& g, int side, double scale) {
  Ellipse e = g.lungs[side];
  e.rx *= scale;
  e.ry *= scale;
  return e;
}

std::vector<std::uint8_t> render_mask(const Geometry& g, double scale, std::size_t h, std::size_t w) {
  std::vector<std::uint8_t> m(h * w, 0);
  const auto left = lung_at(g, 0, scale), right = lung_at(g, 1, scale);
  for (std::size_t r = 0; r < h; ++r) {
    const double y = (r + 0.5) / h;
    for (std::size_t c = 0; c < w; ++c) {
      const double x = (c + 0.5) / w;
      m[r * w + c] = left.radial(x, y) <= 1.0 || right.radial(x, y) <= 1.0;
    }
  }
  return m;
}

ShiftProfile resolve(const ShiftProfile& profile, std::uint64_t seed) {
  if (!profile.mixture) return profile;
  Rng rng(Rng::mix(seed, kBranch));
  return ShiftProfile::preset(rng.bernoulli(0.5) ? SetId::Test1 : SetId::Test2);
}

}  // namespace

VolumetricScan generate_scan(ClassLabel cls, const ShiftProfile& requested, std::uint64_t seed,
                             std::size_t image_size) {
  if (image_size < 16) throw ConfigError("generate_scan: image size " + std::to_string(image_size) + " < 16");
  if (requested.slice_min < 8 || requested.slice_max < requested.slice_min) {
    throw ConfigError("generate_scan: invalid slice count range");
  }
  const ShiftProfile profile = resolve(requested, seed);
  const Geometry g = draw_geometry(seed);

  Rng anatomy(Rng::mix(seed, kAnatomy));
  const auto n = static_cast<std::size_t>(anatomy.between(profile.slice_min, profile.slice_max));

  std::vector<Lesion> lesions;
  double band_fraction = 0.0;
  if (cls == ClassLabel::Covid) {
    // small peripheral lesions in both lungs
    band_fraction = anatomy.uniform(0.3, 0.6);
    for (int side = 0; side < 2; ++side) {
      const int count = static_cast<int>(anatomy.between(2, 3));
      for (int i = 0; i < count; ++i) {
        const double theta = anatomy.uniform(0.0, 2.0 * std::numbers::pi);
        lesions.push_back({side, anatomy.uniform(0.42, 0.55), theta, anatomy.uniform(2.0, 3.0) / kRefSize});
      }
    }
  } else if (cls == ClassLabel::Cap) {
    // one large central lesion on one side
    band_fraction = anatomy.uniform(0.2, 0.45);
    const int side = static_cast<int>(anatomy.below(2));
    lesions.push_back({side, anatomy.uniform(0.0, 0.15), anatomy.uniform(0.0, 2.0 * std::numbers::pi),
                       anatomy.uniform(5.0, 6.0) / kRefSize});
  }

  VolumetricScan scan;
  scan.n_slices = n;
  scan.height = scan.width = image_size;
  scan.pixels.assign(n * image_size * image_size, 0.0f);
  scan.meta.true_class = cls;
  scan.meta.shift_profile = profile;
  scan.meta.rng_seed = seed;

  std::size_t band_begin = 0, band_len = 0;
  if (!lesions.empty()) {
    const auto floor_len = static_cast<std::size_t>(std::ceil(0.07 * static_cast<double>(n)));
    band_len = std::clamp<std::size_t>(static_cast<std::size_t>(std::lround(band_fraction * n)), floor_len, n);
    band_begin = static_cast<std::size_t>(anatomy.below(n - band_len + 1));
    for (std::size_t k = band_begin; k < band_begin + band_len; ++k) scan.meta.infected_slices.push_back(static_cast<int>(k));
  }

  const auto vessels = draw_vessels(seed);
  Rng texture(Rng::mix(seed, kTexture));
  const double grain = texture.uniform(kTextureMin, kTextureMax);
  Rng acq(Rng::mix(seed, kAcquisition));
  const std::size_t h = image_size, w = image_size;
  for (std::size_t k = 0; k < n; ++k) {
    const double scale = lung_scale(n, k);
    const auto left = lung_at(g, 0, scale), right = lung_at(g, 1, scale);
    const bool infected = k >= band_begin && k < band_begin + band_len;
    auto img = scan.slice(k);
    for (std::size_t r = 0; r < h; ++r) {
      const double y = (r + 0.5) / h;
      for (std::size_t c = 0; c < w; ++c) {
        const double x = (c + 0.5) / w;
        float v = 0.0f;
        if (g.body.radial(x, y) <= 1.0) v = kBodyLevel;
        if (left.radial(x, y) <= 1.0 || right.radial(x, y) <= 1.0) {
          v = kLungLevel + static_cast<float>(grain * texture.normal());
          for (const auto& ves : vessels) {
            const auto& lung = ves.lung == 0 ? left : right;
            const double ax = lung.cx + ves.rho * lung.rx * std::cos(ves.theta);
            const double ay = lung.cy + ves.rho * lung.ry * std::sin(ves.theta);
            const double half = 0.5 * ves.length;
            const double dx = half * std::cos(ves.angle), dy = half * std::sin(ves.angle);
            if (segment_distance(x, y, ax - dx, ay - dy, ax + dx, ay + dy) <= 0.5 / kRefSize) {
              v = kLungLevel + kVesselBoost;
              break;
            }
          }
        }
        if (infected) {
          for (const auto& les : lesions) {
            const auto& lung = les.lung == 0 ? left : right;
            const double lx = lung.cx + les.rho * lung.rx * std::cos(les.theta);
            const double ly = lung.cy + les.rho * lung.ry * std::sin(les.theta);
            if (std::hypot(x - lx, y - ly) <= les.radius) v = kLesionLevel;
          }
        }
        if (v > 0.0f) v += static_cast<float>(profile.intensity_shift);
        img[r * w + c] = v;
      }
    }
    if (profile.artifact_rate > 0.0 && acq.bernoulli(profile.artifact_rate)) {
      // thin bright streak through the chest
      const double angle = acq.uniform(0.0, std::numbers::pi);
      const double ox = 0.5 + acq.uniform(-0.15, 0.15), oy = 0.5 + acq.uniform(-0.15, 0.15);
      const double nx = -std::sin(angle), ny = std::cos(angle);
      const double half_width = 0.6 / kRefSize;
      for (std::size_t r = 0; r < h; ++r) {
        const double y = (r + 0.5) / h;
        for (std::size_t c = 0; c < w; ++c) {
          const double x = (c + 0.5) / w;
          if (g.body.radial(x, y) <= 1.0 && std::abs((x - ox) * nx + (y - oy) * ny) <= half_width) {
            img[r * w + c] += 0.5f;
          }
        }
      }
    }
    if (profile.noise_sigma > 0.0) {
      for (auto& p : img) p += static_cast<float>(profile.noise_sigma * acq.normal());
    }
  }
  return scan;
}

std::vector<std::uint8_t> synthetic_lung_mask(const ScanMetadata& meta, std::size_t n_slices, std::size_t slice,
                                              std::size_t height, std::size_t width) {
  return render_mask(draw_geometry(meta.rng_seed), lung_scale(n_slices, slice), height, width);
}

CorpusSpec CorpusSpec::desk_default() {
  CorpusSpec s;
  s.counts[SetId::Train] = {50, 18, 22};  // 171:60:76 scaled to 90
  s.counts[SetId::Test1] = {15, 0, 15};
  s.counts[SetId::Test2] = {10, 10, 10};
  s.counts[SetId::Test3] = {10, 10, 10};
  s.counts[SetId::Test4] = {16, 8, 16};
  return s;
}

std::size_t CorpusSpec::total() const {
  std::size_t t = 0;
  for (const auto& [set, c] : counts) t += c[0] + c[1] + c[2];
  return t;
}

std::vector<VolumetricScan> generate_corpus(const CorpusSpec& spec, std::uint64_t base_seed,
                                            std::size_t image_size) {
  std::vector<VolumetricScan> out;
  out.reserve(spec.total());
  for (const auto& [set, counts] : spec.counts) {
    const auto custom = spec.profiles.find(set);
    const auto profile = custom != spec.profiles.end() ? custom->second : ShiftProfile::preset(set);
    std::string prefix(to_string(set));
    std::transform(prefix.begin(), prefix.end(), prefix.begin(), [](unsigned char ch) { return std::tolower(ch); });
    std::size_t ordinal = 0;
    for (auto cls : kAllClasses) {
      for (std::size_t i = 0; i < counts[index(cls)]; ++i, ++ordinal) {
        const auto seed = Rng::mix(base_seed, Rng::mix(static_cast<std::uint64_t>(set), ordinal));
        auto scan = generate_scan(cls, profile, seed, image_size);
        char id[32];
        std::snprintf(id, sizeof id, "%s-%03zu", prefix.c_str(), ordinal);
        scan.meta.scan_id = id;
        scan.meta.set_id = set;
        out.push_back(std::move(scan));
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> SyntheticMaskProvider::mask(const VolumetricScan& scan, std::size_t slice) const {
  return synthetic_lung_mask(scan.meta, scan.n_slices, slice, scan.height, scan.width);
}

std::vector<std::uint8_t> FullMaskProvider::mask(const VolumetricScan& scan, std::size_t) const {
  return std::vector<std::uint8_t>(scan.slice_size(), 1);
}

std::vector<float> resize_bilinear(std::span<const float> image, std::size_t h, std::size_t w, std::size_t out_h,
                                   std::size_t out_w) {
  std::vector<float> out(out_h * out_w);
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (std::size_t r = 0; r < out_h; ++r) {
    const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const auto y0 = static_cast<std::size_t>(fy);
    const std::size_t y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - y0;
    for (std::size_t c = 0; c < out_w; ++c) {
      const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const auto x0 = static_cast<std::size_t>(fx);
      const std::size_t x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - x0;
      const double top = (1 - tx) * image[y0 * w + x0] + tx * image[y0 * w + x1];
      const double bottom = (1 - tx) * image[y1 * w + x0] + tx * image[y1 * w + x1];
      out[r * out_w + c] = static_cast<float>((1 - ty) * top + ty * bottom);
    }
  }
  return out;
}

VolumetricScan preprocess(const VolumetricScan& scan, const MaskProvider& masks, std::size_t input_size) {
  if (input_size == 0) throw ConfigError("preprocess: input size must be positive");
  VolumetricScan out;
  out.meta = scan.meta;
  out.n_slices = scan.n_slices;
  out.height = out.width = input_size;
  out.pixels.resize(scan.n_slices * input_size * input_size);
  std::vector<float> masked(scan.slice_size()), mask_f(scan.slice_size());
  for (std::size_t k = 0; k < scan.n_slices; ++k) {
    const auto m = masks.mask(scan, k);
    if (m.size() != scan.slice_size()) {
      throw DimensionError("preprocess: mask for slice " + std::to_string(k) + " has " + std::to_string(m.size()) +
                           " pixels, slice has " + std::to_string(scan.height) + "x" + std::to_string(scan.width));
    }
    const auto src = scan.slice(k);
    for (std::size_t i = 0; i < src.size(); ++i) {
      masked[i] = m[i] ? src[i] : 0.0f;
      mask_f[i] = m[i] ? 1.0f : 0.0f;
    }
    auto img = resize_bilinear(masked, scan.height, scan.width, input_size, input_size);
    const auto inside = resize_bilinear(mask_f, scan.height, scan.width, input_size, input_size);
    float lo = 0.0f, hi = 0.0f;
    bool any = false;
    for (std::size_t i = 0; i < img.size(); ++i) {
      if (inside[i] < 0.5f) continue;
      lo = any ? std::min(lo, img[i]) : img[i];
      hi = any ? std::max(hi, img[i]) : img[i];
      any = true;
    }
    auto dst = out.slice(k);
    const float range = hi - lo;
    for (std::size_t i = 0; i < img.size(); ++i) {
      dst[i] = (inside[i] < 0.5f || !(range > 0.0f)) ? 0.0f : (img[i] - lo) / range;
    }
  }
  return out;
}

std::pair<std::vector<VolumetricScan>, std::vector<VolumetricScan>> split_train_validation(
    const std::vector<VolumetricScan>& corpus, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ConfigError("split_train_validation: fraction must lie in (0, 1), got " + std::to_string(fraction));
  }
  std::vector<bool> to_val(corpus.size(), false);
  for (auto cls : kAllClasses) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      if (corpus[i].meta.true_class == cls) members.push_back(i);
    }
    if (members.empty()) continue;
    if (members.size() < 2) {
      throw ConfigError("split_train_validation: class " + std::string(to_string(cls)) + " has " +
                        std::to_string(members.size()) + " scan(s), need at least 2");
    }
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(index(cls))));
    rng.shuffle(members.begin(), members.end());
    auto n_val = static_cast<std::size_t>(std::lround(fraction * members.size()));
    n_val = std::clamp<std::size_t>(n_val, 1, members.size() - 1);
    for (std::size_t i = 0; i < n_val; ++i) to_val[members[i]] = true;
  }
  std::pair<std::vector<VolumetricScan>, std::vector<VolumetricScan>> out;
  for (std::size_t i = 0; i < corpus.size(); ++i) (to_val[i] ? out.second : out.first).push_back(corpus[i]);
  return out;
}

}  // namespace capsct::data
