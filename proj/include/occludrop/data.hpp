#pragma once

// Seeded synthetic identity dataset and the occluded evaluation split.
//
// Every identity has a fixed face layout (outline, eyes, brows, nose, mouth,
// hairline and a few skin marks); each image re-renders it with geometric and
// photometric jitter plus pixel noise. Each image derives its own random
// stream from (seed, identity, index), so generation order and thread count
// never change the pixels.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "occludrop/errors.hpp"

namespace occludrop {

/// Grayscale images in [0,1], stored row-major as float.
struct ImageSet {
  std::size_t size = 0;  ///< height == width
  std::vector<float> pixels;
  std::vector<std::size_t> labels;

  std::size_t count() const { return labels.size(); }
  std::size_t plane() const { return size * size; }
  const float* image(std::size_t i) const { return pixels.data() + i * plane(); }
  float* image(std::size_t i) { return pixels.data() + i * plane(); }
  void push(const std::vector<float>& img, std::size_t label) {
    pixels.insert(pixels.end(), img.begin(), img.end());
    labels.push_back(label);
  }
};

struct Dataset {
  ImageSet train;
  ImageSet test;
  std::size_t num_ids = 0;
};

struct SyntheticSpec {
  std::size_t ids = 64;
  std::size_t images_per_id = 100;
  std::size_t image_size = 64;
  double train_fraction = 0.8;
  std::uint64_t seed = 1;
  double noise = 0.03;
  double jitter = 1.0;  ///< scales all per-image perturbations
};

/// splitmix64 finalizer; used to derive independent stream seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0) {
  std::uint64_t z = a ^ (b * 0x9E3779B97F4A7C15ULL) ^ (c * 0xC2B2AE3D27D4EB4FULL);
  z += 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Worker count from OCCLUDROP_THREADS, defaulting to 1.
inline std::size_t worker_threads() {
  if (const char* env = std::getenv("OCCLUDROP_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (...) {
    }
  }
  return 1;
}

namespace detail {

struct Ellipse {
  double cx, cy, rx, ry, angle, value;
};

struct FaceLayout {
  double background;
  Ellipse face;
  double hairline, hair_value;
  Ellipse eye[2], pupil[2], brow[2], nose, mouth;
  Ellipse marks[3];
};

inline FaceLayout identity_layout(std::uint64_t seed, std::size_t id) {
  std::mt19937_64 rng(mix_seed(seed, 0x1d, id));
  auto U = [&rng](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  FaceLayout f{};
  f.background = U(0.05, 0.25);
  f.face = {0.5, 0.54, U(0.28, 0.38), U(0.36, 0.45), 0.0, U(0.5, 0.8)};
  f.hairline = U(0.16, 0.32);
  f.hair_value = U(0.0, 0.35);
  const double eye_y = U(0.38, 0.47), sep = U(0.11, 0.19);
  const double erx = U(0.045, 0.085), ery = U(0.025, 0.05), ev = U(0.9, 1.0);
  const double pv = U(0.0, 0.2), pr = U(0.4, 0.8);
  const double by = eye_y - U(0.07, 0.12), blen = U(0.05, 0.1), bth = U(0.012, 0.03), btilt = U(-0.35, 0.35);
  const double bv = U(0.0, 0.3);
  for (int s = 0; s < 2; ++s) {
    const double sign = s == 0 ? -1.0 : 1.0;
    f.eye[s] = {0.5 + sign * sep, eye_y, erx, ery, 0.0, ev};
    f.pupil[s] = {0.5 + sign * sep, eye_y, erx * pr * 0.6, ery * pr, 0.0, pv};
    f.brow[s] = {0.5 + sign * sep, by, blen, bth, sign * btilt, bv};
  }
  f.nose = {0.5, U(0.53, 0.6), U(0.02, 0.05), U(0.06, 0.11), 0.0, U(0.2, 0.45)};
  f.mouth = {0.5, U(0.7, 0.8), U(0.07, 0.15), U(0.015, 0.045), 0.0, U(0.05, 0.35)};
  for (auto& m : f.marks) {
    const double a = U(0.0, 6.283185307179586), r = U(0.1, 0.85);
    m = {0.5 + std::cos(a) * r * f.face.rx, f.face.cy + std::sin(a) * r * f.face.ry, U(0.015, 0.04),
         U(0.015, 0.04), 0.0, U(0.0, 1.0)};
  }
  return f;
}

/// Soft-edged ellipse painted with alpha coverage.
inline void paint(std::vector<float>& img, std::size_t size, const Ellipse& e, double softness) {
  const double ca = std::cos(e.angle), sa = std::sin(e.angle);
  const double px = 1.0 / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    const double v = (static_cast<double>(y) + 0.5) * px - e.cy;
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) + 0.5) * px - e.cx;
      const double ux = (u * ca + v * sa) / e.rx, vy = (-u * sa + v * ca) / e.ry;
      const double d = std::sqrt(ux * ux + vy * vy);
      // distance to the rim in pixels (approx.)
      const double rim = (1.0 - d) * std::min(e.rx, e.ry) / px;
      const double alpha = std::clamp(0.5 + rim / softness, 0.0, 1.0);
      if (alpha <= 0.0) continue;
      float& p = img[y * size + x];
      p = static_cast<float>(p * (1.0 - alpha) + e.value * alpha);
    }
  }
}

inline std::vector<float> render_face(const FaceLayout& base, std::size_t size, std::uint64_t stream, double noise,
                                      double jitter) {
  std::mt19937_64 rng(stream);
  auto U = [&rng, jitter](double r) { return std::uniform_real_distribution<double>(-r * jitter, r * jitter)(rng); };
  FaceLayout f = base;
  const double dx = U(0.04), dy = U(0.04), sc = 1.0 + U(0.06);
  auto place = [&](Ellipse& e) {
    e.cx = 0.5 + (e.cx - 0.5) * sc + dx;
    e.cy = 0.5 + (e.cy - 0.5) * sc + dy;
    e.rx *= sc;
    e.ry *= sc;
  };
  for (auto* e : {&f.face, &f.eye[0], &f.eye[1], &f.pupil[0], &f.pupil[1], &f.brow[0], &f.brow[1], &f.nose,
                  &f.mouth, &f.marks[0], &f.marks[1], &f.marks[2]}) {
    e->cx += U(0.008);
    e->cy += U(0.008);
    place(*e);
  }
  f.mouth.ry *= 1.0 + U(0.3);
  const double gaze = U(0.015);
  f.pupil[0].cx += gaze;
  f.pupil[1].cx += gaze;

  std::vector<float> img(size * size, static_cast<float>(f.background + U(0.05)));
  paint(img, size, f.face, 1.5);
  // hair: everything inside the face outline above the hairline
  const double hair_cut = 0.5 + (f.hairline - 0.5) * sc + dy;
  Ellipse hair = f.face;
  hair.value = f.hair_value;
  std::vector<float> hair_layer = img;
  paint(hair_layer, size, hair, 1.5);
  for (std::size_t y = 0; y < size; ++y) {
    const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(size);
    if (v < hair_cut) std::copy_n(hair_layer.begin() + y * size, size, img.begin() + y * size);
  }
  for (const auto& m : f.marks) paint(img, size, m, 1.0);
  for (int s = 0; s < 2; ++s) {
    paint(img, size, f.eye[s], 1.0);
    paint(img, size, f.pupil[s], 1.0);
    paint(img, size, f.brow[s], 1.0);
  }
  paint(img, size, f.nose, 1.0);
  paint(img, size, f.mouth, 1.0);

  const double gain = 1.0 + U(0.15), bias = U(0.08);
  std::normal_distribution<double> nd(0.0, noise);
  for (auto& p : img) p = static_cast<float>(std::clamp((p - 0.5) * gain + 0.5 + bias + nd(rng), 0.0, 1.0));
  return img;
}

}  // namespace detail

/// Split per identity: the first round(train_fraction * images_per_id)
/// renders train, the rest test.
inline Dataset make_synthetic_dataset(const SyntheticSpec& spec, std::size_t threads = worker_threads()) {
  if (spec.ids == 0 || spec.images_per_id < 2) throw DataError("synthetic dataset needs ids >= 1 and images_per_id >= 2");
  if (spec.image_size < 16) throw DataError("synthetic dataset needs image_size >= 16");
  if (!(spec.train_fraction > 0.0 && spec.train_fraction < 1.0)) {
    throw DataError("train_fraction must be in (0,1)");
  }
  const std::size_t per = spec.images_per_id;
  const std::size_t n_train = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::lround(spec.train_fraction * static_cast<double>(per))), 1, per - 1);
  const std::size_t total = spec.ids * per;
  const std::size_t plane = spec.image_size * spec.image_size;
  std::vector<float> all(total * plane);
  std::vector<detail::FaceLayout> layouts(spec.ids);
  for (std::size_t id = 0; id < spec.ids; ++id) layouts[id] = detail::identity_layout(spec.seed, id);

  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t q = begin; q < end; ++q) {
      const std::size_t id = q / per, k = q % per;
      auto img = detail::render_face(layouts[id], spec.image_size, mix_seed(spec.seed, id + 1, k + 1), spec.noise,
                                     spec.jitter);
      std::copy(img.begin(), img.end(), all.begin() + q * plane);
    }
  };
  threads = std::max<std::size_t>(1, std::min(threads, total));
  if (threads == 1) {
    work(0, total);
  } else {
    std::vector<std::thread> pool;
    const std::size_t chunk = (total + threads - 1) / threads;
    for (std::size_t w = 0; w < threads; ++w) {
      const std::size_t b = w * chunk, e = std::min(total, b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& t : pool) t.join();
  }

  Dataset ds;
  ds.num_ids = spec.ids;
  ds.train.size = ds.test.size = spec.image_size;
  for (std::size_t q = 0; q < total; ++q) {
    const std::size_t id = q / per, k = q % per;
    std::vector<float> img(all.begin() + q * plane, all.begin() + (q + 1) * plane);
    (k < n_train ? ds.train : ds.test).push(img, id);
  }
  return ds;
}

struct OccludedTestSpec {
  double min_fraction = 0.3;  ///< side length as a fraction of the image side
  double max_fraction = 0.5;
  double fill = 0.5;
  std::uint64_t seed = 7;
};

struct Rect {
  std::size_t y0 = 0, x0 = 0, height = 0, width = 0;
};

/// Occluder for image `index`: side floor(f*H) x floor(f*W), f uniform in
/// [min,max], position uniform over placements that fit.
inline Rect occluder_for(const OccludedTestSpec& spec, std::size_t size, std::size_t index) {
  std::mt19937_64 rng(mix_seed(spec.seed, 0x0cc1, index));
  const double f = spec.min_fraction == spec.max_fraction
                       ? spec.min_fraction
                       : std::uniform_real_distribution<double>(spec.min_fraction, spec.max_fraction)(rng);
  Rect r;
  r.height = static_cast<std::size_t>(std::floor(f * static_cast<double>(size)));
  r.width = r.height;
  r.y0 = std::uniform_int_distribution<std::size_t>(0, size - r.height)(rng);
  r.x0 = std::uniform_int_distribution<std::size_t>(0, size - r.width)(rng);
  return r;
}

/// Occluded twin of every image; labels unchanged.
inline ImageSet build_occluded_split(const ImageSet& clean, const OccludedTestSpec& spec) {
  if (spec.min_fraction < 0.0 || spec.max_fraction > 1.0 || spec.min_fraction > spec.max_fraction) {
    throw ContractError("occluder fraction range must satisfy 0 <= min <= max <= 1");
  }
  ImageSet out = clean;
  for (std::size_t i = 0; i < out.count(); ++i) {
    const Rect r = occluder_for(spec, clean.size, i);
    float* img = out.image(i);
    for (std::size_t y = r.y0; y < r.y0 + r.height; ++y) {
      std::fill_n(img + y * clean.size + r.x0, r.width, static_cast<float>(spec.fill));
    }
  }
  return out;
}

}  // namespace occludrop
