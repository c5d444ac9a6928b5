#include <algorithm>
#include <cmath>

#include "cifuse/rng.hpp"
#include "cifuse/stream.hpp"

namespace cifuse {

namespace {

struct BlobClass {
  double wavelength;   // radial ring wavelength, pixels
  double ring_amp;
  double radius;       // Gaussian envelope
  double color[3];
};

// All classes render a ring-textured blob at the image center, so every
// round competes for the same features. Classes come in pairs sharing color
// and envelope; the two members differ only by a wavelength ratio, which
// makes within-pair discrimination a fine frequency distinction.
std::vector<BlobClass> make_classes(const SyntheticSpec& spec) {
  std::vector<BlobClass> out(spec.classes);
  Rng rng(derive_seed(spec.seed, "classes"));
  const int pairs = (spec.classes + 1) / 2;
  for (int p = 0; p < pairs; ++p) {
    BlobClass base;
    base.wavelength = rng.uniform(3.4, 6.2);
    base.ring_amp = rng.uniform(0.55, 0.85);
    base.radius = rng.uniform(0.38, 0.46) * std::min(spec.width, spec.height);
    // well-spread hues, one per pair
    const double hue = (p + rng.uniform(0.1, 0.9)) / pairs * 2.0 * M_PI;
    base.color[0] = 0.55 + 0.40 * std::cos(hue);
    base.color[1] = 0.55 + 0.40 * std::cos(hue - 2.0944);
    base.color[2] = 0.55 + 0.40 * std::cos(hue + 2.0944);

    for (int v = 0; v < 2; ++v) {
      const int cls = 2 * p + v;
      if (cls >= spec.classes) break;
      BlobClass b = base;
      const double half = 0.5 * spec.pair_ratio;
      b.wavelength *= (v == 0) ? (1.0 + half) : (1.0 - half);
      out[cls] = b;
    }
  }
  return out;
}

LabeledExample render(const SyntheticSpec& spec, const BlobClass& cls, int label,
                      Rng& rng) {
  LabeledExample e;
  e.label = label;
  e.pixels.resize(static_cast<size_t>(spec.height) * spec.width * spec.channels);

  const double cx = 0.5 * (spec.width - 1) + rng.normal(0.0, spec.center_jitter);
  const double cy = 0.5 * (spec.height - 1) + rng.normal(0.0, spec.center_jitter);
  // a common scale jitter shifts the apparent ring frequency, so the
  // within-pair wavelength gap has to be resolved against it
  const double scale = std::max(0.7, 1.0 + rng.normal(0.0, spec.scale_jitter));
  // the ring phase is a per-image nuisance: the wavelength has to be read
  // from texture statistics rather than a fixed template
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  const double amp = rng.uniform(0.7, 1.2);
  const double ring_amp = std::clamp(cls.ring_amp + rng.normal(0.0, 0.08), 0.2, 1.0);
  double color[3];
  for (int k = 0; k < 3; ++k)
    color[k] = std::clamp(cls.color[k] + rng.normal(0.0, spec.color_jitter), 0.0, 1.0);

  const int n_distract = spec.distractor ? 2 : 0;
  double dx_[2], dy_[2], damp[2], dcol[2][3];
  for (int d = 0; d < n_distract; ++d) {
    dx_[d] = rng.uniform(1.0, spec.width - 1.0);
    dy_[d] = rng.uniform(1.0, spec.height - 1.0);
    damp[d] = rng.uniform(0.1, 0.35);
    for (int k = 0; k < 3; ++k) dcol[d][k] = rng.uniform(0.3, 1.0);
  }

  size_t idx = 0;
  for (int y = 0; y < spec.height; ++y) {
    for (int x = 0; x < spec.width; ++x) {
      const double r =
          std::sqrt((x - cx) * (x - cx) + (y - cy) * (y - cy)) / scale;
      const double envelope = std::exp(-(r * r) / (2.0 * cls.radius * cls.radius));
      const double ring =
          1.0 + ring_amp * std::cos(2.0 * M_PI * r / cls.wavelength + phase);
      const double shape = amp * envelope * ring * 0.5;
      double dshape[3] = {0.0, 0.0, 0.0};
      for (int d = 0; d < n_distract; ++d) {
        const double d2 =
            ((x - dx_[d]) * (x - dx_[d]) + (y - dy_[d]) * (y - dy_[d])) / 2.5;
        const double g = damp[d] * std::exp(-d2);
        for (int k = 0; k < 3; ++k) dshape[k] += g * dcol[d][k];
      }
      for (int k = 0; k < spec.channels; ++k) {
        const double v =
            color[k % 3] * shape + dshape[k % 3] + rng.normal(0.0, spec.noise);
        e.pixels[idx++] =
            static_cast<uint8_t>(std::clamp(v, 0.0, 1.0) * 255.0 + 0.5);
      }
    }
  }
  return e;
}

void fill(const SyntheticSpec& spec, const std::vector<BlobClass>& classes,
          int per_class, const char* split, Dataset& out) {
  out.height = spec.height;
  out.width = spec.width;
  out.channels = spec.channels;
  out.examples.clear();
  out.examples.reserve(static_cast<size_t>(per_class) * spec.classes);
  for (int c = 0; c < spec.classes; ++c) {
    Rng rng(derive_seed(derive_seed(spec.seed, split), "class" + std::to_string(c)));
    for (int i = 0; i < per_class; ++i)
      out.examples.push_back(render(spec, classes[c], c, rng));
  }
}

}  // namespace

void generate_synthetic(const SyntheticSpec& spec, Dataset& train, Dataset& test) {
  if (spec.classes < 1 || spec.train_per_class < 1 || spec.test_per_class < 1)
    throw std::invalid_argument("generate_synthetic: counts must be positive");
  if (spec.channels < 1 || spec.channels > 3)
    throw std::invalid_argument("generate_synthetic: channels must be 1..3");
  if (spec.pair_ratio <= 0.0 || spec.pair_ratio >= 1.0)
    throw std::invalid_argument("generate_synthetic: pair_ratio must be in (0,1)");
  const auto classes = make_classes(spec);
  fill(spec, classes, spec.train_per_class, "train", train);
  fill(spec, classes, spec.test_per_class, "test", test);
}

}  // namespace cifuse
