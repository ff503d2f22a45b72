#pragma once

// Verification and identification metrics over embedding sets. Scores are
// cosine similarities; a pair is accepted when its score is >= threshold.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "occludrop/errors.hpp"

namespace occludrop {

enum class Provenance { clean, occluded };

inline std::string to_string(Provenance p) { return p == Provenance::clean ? "clean" : "occluded"; }

/// Row-major embedding matrix.
struct Embeddings {
  std::size_t count = 0, dim = 0;
  std::vector<double> values;
  const double* row(std::size_t i) const { return values.data() + i * dim; }
};

inline double cosine_similarity(const double* a, const double* b, std::size_t dim) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (std::size_t k = 0; k < dim; ++k) {
    ab += a[k] * b[k];
    aa += a[k] * a[k];
    bb += b[k] * b[k];
  }
  if (aa <= 0.0 || bb <= 0.0) return 0.0;
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

/// Verification pairs reduced to their scores.
struct EvalPairSet {
  std::vector<double> genuine;
  std::vector<double> impostor;
  Provenance provenance = Provenance::clean;

  void add(double score, bool same) { (same ? genuine : impostor).push_back(score); }
  std::size_t size() const { return genuine.size() + impostor.size(); }
};

/// All unordered pairs (i<j) of one embedding set.
inline EvalPairSet all_pairs(const Embeddings& e, const std::vector<std::size_t>& labels,
                             Provenance prov = Provenance::clean) {
  if (labels.size() != e.count) throw ContractError("all_pairs: one label per embedding required");
  EvalPairSet set;
  set.provenance = prov;
  for (std::size_t i = 0; i < e.count; ++i) {
    for (std::size_t j = i + 1; j < e.count; ++j) {
      set.add(cosine_similarity(e.row(i), e.row(j), e.dim), labels[i] == labels[j]);
    }
  }
  return set;
}

/// Pairs (a_i, b_j) for i<j: a clean reference against an occluded probe of a
/// different image.
inline EvalPairSet cross_pairs(const Embeddings& a, const Embeddings& b, const std::vector<std::size_t>& labels,
                               Provenance prov) {
  if (a.count != b.count || a.dim != b.dim || labels.size() != a.count) {
    throw ContractError("cross_pairs: sets must be aligned with the labels");
  }
  EvalPairSet set;
  set.provenance = prov;
  for (std::size_t i = 0; i < a.count; ++i) {
    for (std::size_t j = i + 1; j < a.count; ++j) {
      set.add(cosine_similarity(a.row(i), b.row(j), a.dim), labels[i] == labels[j]);
    }
  }
  return set;
}

struct TarAtFar {
  double far_target = 0.0;
  bool resolvable = true;
  std::size_t required_impostors = 0;  ///< minimum impostor count for this target
  double tar = 0.0;
  double far = 0.0;  ///< achieved false accept rate
  double threshold = 0.0;
};

/// For each target: the smallest observed score threshold whose impostor
/// acceptance rate is <= target, and the genuine acceptance rate there.
/// If every score is rejected the threshold is +inf. Targets with fewer than
/// ceil(1/target) impostors are flagged unresolvable.
inline std::vector<TarAtFar> tar_at_far(const EvalPairSet& pairs, const std::vector<double>& far_targets) {
  if (pairs.genuine.empty() || pairs.impostor.empty()) {
    throw ContractError("tar_at_far: needs at least one genuine and one impostor pair (got " +
                        std::to_string(pairs.genuine.size()) + " genuine, " +
                        std::to_string(pairs.impostor.size()) + " impostor)");
  }
  std::vector<double> gen = pairs.genuine, imp = pairs.impostor;
  std::sort(gen.begin(), gen.end(), std::greater<>());
  std::sort(imp.begin(), imp.end(), std::greater<>());
  std::vector<double> all = gen;
  all.insert(all.end(), imp.begin(), imp.end());
  std::sort(all.begin(), all.end());
  const auto ng = static_cast<double>(gen.size()), ni = static_cast<double>(imp.size());
  auto count_ge = [](const std::vector<double>& desc, double t) {
    return static_cast<std::size_t>(
        std::partition_point(desc.begin(), desc.end(), [t](double x) { return x >= t; }) - desc.begin());
  };

  std::vector<TarAtFar> out;
  for (double target : far_targets) {
    if (!(target > 0.0 && target <= 1.0)) throw ContractError("tar_at_far: FAR target must be in (0,1]");
    TarAtFar r;
    r.far_target = target;
    r.required_impostors = static_cast<std::size_t>(std::ceil(1.0 / target - 1e-9));
    r.resolvable = imp.size() >= r.required_impostors;
    const auto allowed = static_cast<std::size_t>(std::floor(target * ni + 1e-9));
    if (allowed >= imp.size()) {
      r.threshold = all.front();
    } else {
      // Every threshold above imp[allowed] accepts at most `allowed` impostors.
      const auto it = std::upper_bound(all.begin(), all.end(), imp[allowed]);
      r.threshold = it == all.end() ? std::numeric_limits<double>::infinity() : *it;
    }
    r.tar = static_cast<double>(count_ge(gen, r.threshold)) / ng;
    r.far = static_cast<double>(count_ge(imp, r.threshold)) / ni;
    out.push_back(r);
  }
  return out;
}

/// Fraction of probes whose most similar gallery entry (first on ties)
/// carries the same label.
inline double rank1_identification(const Embeddings& gallery, const std::vector<std::size_t>& gallery_labels,
                                   const Embeddings& probes, const std::vector<std::size_t>& probe_labels) {
  if (gallery.count == 0) throw ContractError("rank1_identification: empty gallery");
  if (gallery_labels.size() != gallery.count || probe_labels.size() != probes.count) {
    throw ContractError("rank1_identification: one label per embedding required");
  }
  if (gallery.dim != probes.dim) throw DimensionError("rank1_identification: gallery and probe dims differ");
  if (probes.count == 0) return 0.0;
  std::size_t hits = 0;
  for (std::size_t p = 0; p < probes.count; ++p) {
    std::size_t best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t g = 0; g < gallery.count; ++g) {
      const double s = cosine_similarity(probes.row(p), gallery.row(g), gallery.dim);
      if (s > best_score) {
        best_score = s;
        best = g;
      }
    }
    if (gallery_labels[best] == probe_labels[p]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(probes.count);
}

struct MetricRow {
  std::string metric;
  std::string split;
  double value = 0.0;
  std::optional<double> threshold;
};

inline std::string format_double(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& rows, std::uint64_t seed_fingerprint) {
  os << "metric,split,value,threshold,seed_fingerprint\n";
  for (const auto& r : rows) {
    os << r.metric << ',' << r.split << ',' << format_double(r.value) << ','
       << (r.threshold ? format_double(*r.threshold) : std::string()) << ',' << hex64(seed_fingerprint) << '\n';
  }
}

}  // namespace occludrop
