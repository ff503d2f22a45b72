#pragma once

// Training harness: settings resolution, the training loop, evaluation,
// the feature-compensation experiment and the multi-run comparisons.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "occludrop/checkpoint.hpp"
#include "occludrop/config.hpp"
#include "occludrop/data.hpp"
#include "occludrop/margin.hpp"
#include "occludrop/metrics.hpp"
#include "occludrop/model.hpp"
#include "occludrop/optim.hpp"
#include "occludrop/png_io.hpp"
#include "occludrop/spatial_reg.hpp"
#include "occludrop/strategies.hpp"

namespace occludrop {

struct ExperimentSettings {
  ModelConfig model;
  OcclusionStrategy strategy;  ///< as named by strategy.name
  double alpha = 100, beta = 1, margin = 0.5, scale = 64, epsilon = 1e-8;
  double lr = 0.1, momentum = 0.9, weight_decay = 5e-4, decay = 0.1;
  std::size_t epochs = 30, batch_size = 64;
  std::vector<double> milestones{0.6, 0.85};
  std::uint64_t seed_data = 0, seed_init = 0, seed_dropout = 0, seed_mask = 0, seed_eval = 0;
  std::string source = "synthetic", root;
  SyntheticSpec synthetic;
  OccludedTestSpec occluded;
  std::vector<double> far_targets{1e-2, 1e-3};
  std::size_t eval_batch = 128;
  bool mse_normalize = true;
  int mse_stage = 3;
  std::optional<std::size_t> mse_gamma_min, mse_gamma_max;
  std::size_t mse_samples = 0;
  int precision = 32;
  bool deterministic = false;
  std::size_t log_every = 1;
  std::uint64_t config_fingerprint = 0, seed_fingerprint = 0;
};

inline OcclusionStrategy parse_strategy(const Config& cfg, const ModelConfig& model, std::uint64_t mask_seed) {
  const std::string name = cfg.get("strategy.name");
  if (name == "none") return std::monostate{};
  if (name == "cutout") return CutoutParams{cfg.get_size("strategy.cutout.box_size")};
  if (name == "dropblock") {
    return DropBlockParams{cfg.get_size("strategy.dropblock.block_size"), cfg.get_double("strategy.dropblock.drop_prob")};
  }
  if (name == "wcd") return WcdParams{cfg.get_double("strategy.wcd.keep_ratio")};
  if (name == "image_template") {
    return ImageTemplateParams{cfg.get_double("strategy.image_template.min_fraction"),
                               cfg.get_double("strategy.image_template.max_fraction"),
                               cfg.get_double("strategy.image_template.fill")};
  }
  if (name == "lcd") {
    const std::size_t c = model.stage_width(model.stage);
    GammaPolicy p = GammaPolicy::defaults_for(c, mask_seed);
    if (!cfg.is_auto("lcd.gamma_min")) p.gamma_min = cfg.get_size("lcd.gamma_min");
    if (!cfg.is_auto("lcd.gamma_max")) p.gamma_max = cfg.get_size("lcd.gamma_max");
    if (p.gamma_min > p.gamma_max || p.gamma_max > c) {
      throw ConfigError("lcd.gamma_min/gamma_max must satisfy min <= max <= " + std::to_string(c) +
                        " (channels at stage " + std::to_string(model.stage) + "), got " +
                        std::to_string(p.gamma_min) + ".." + std::to_string(p.gamma_max));
    }
    return LcdParams{p, false};
  }
  throw ConfigError("strategy.name '" + name + "' unknown; expected none, cutout, dropblock, wcd, lcd or image_template");
}

inline ExperimentSettings settings_from_config(const Config& cfg) {
  ExperimentSettings s;
  auto& m = s.model;
  m.in_channels = cfg.get_size("model.in_channels");
  m.image_size = cfg.get_size("model.image_size");
  m.width_base = cfg.get_size("model.width_base");
  m.embedding_dim = cfg.get_size("model.embedding_dim");
  if (m.in_channels != 1) throw ConfigError("model.in_channels: only grayscale input (1) is supported");
  if (m.image_size == 0 || m.image_size % 16 != 0) throw ConfigError("model.image_size must be a positive multiple of 16");
  if (m.width_base == 0 || m.embedding_dim == 0) throw ConfigError("model.width_base and model.embedding_dim must be > 0");
  m = place_lcd(m, static_cast<int>(cfg.get_int("lcd.stage")));
  try {
    m.order = parse_lcd_order(cfg.get("lcd.order"));
    m.sam.squash = parse_squash(cfg.get("sam.squash"));
    m.column_rule = parse_column_rule(cfg.get("sr.column_rule"));
  } catch (const ContractError& e) {
    throw ConfigError(e.what());
  }
  m.sam.enabled = cfg.get_bool("sam.enabled");
  m.sam.c_mid = cfg.get_size("sam.c_mid");
  m.sam.hidden = cfg.get_size("sam.hidden");
  m.bn_momentum = cfg.get_double("bn.momentum");
  m.bn_epsilon = cfg.get_double("bn.epsilon");
  if (!(m.bn_momentum > 0 && m.bn_momentum < 1)) throw ConfigError("bn.momentum must be in (0,1)");
  if (!(m.bn_epsilon > 0)) throw ConfigError("bn.epsilon must be > 0");

  s.seed_data = cfg.seed("data");
  s.seed_init = cfg.seed("init");
  s.seed_dropout = cfg.seed("dropout");
  s.seed_eval = cfg.seed("eval");
  s.seed_mask = cfg.is_auto("lcd.seed") ? mix_seed(s.seed_dropout, fnv1a("mask"))
                                        : static_cast<std::uint64_t>(cfg.get_int("lcd.seed"));

  s.strategy = parse_strategy(cfg, m, s.seed_mask);
  if (domain_of(s.strategy) == StrategyDomain::feature) m.feature_strategy = s.strategy;

  s.alpha = cfg.get_double("loss.alpha");
  s.beta = cfg.get_double("loss.beta");
  if (s.alpha < 0 || s.beta < 0) throw ConfigError("loss.alpha and loss.beta must be >= 0");
  s.margin = cfg.get_double("loss.margin");
  s.scale = cfg.get_double("loss.scale");
  s.epsilon = cfg.get_double("loss.epsilon");
  s.lr = cfg.get_double("optim.lr");
  s.momentum = cfg.get_double("optim.momentum");
  s.weight_decay = cfg.get_double("optim.weight_decay");
  s.epochs = cfg.get_size("optim.epochs");
  s.batch_size = cfg.get_size("optim.batch_size");
  if (s.batch_size < 2) throw ConfigError("optim.batch_size must be >= 2");
  s.milestones = cfg.get_doubles("optim.milestones");
  s.decay = cfg.get_double("optim.decay");

  s.source = cfg.get("data.source");
  if (s.source != "synthetic" && s.source != "directory") throw ConfigError("data.source must be synthetic or directory");
  s.root = cfg.get("data.root");
  s.synthetic.ids = cfg.get_size("data.ids");
  s.synthetic.images_per_id = cfg.get_size("data.images_per_id");
  s.synthetic.image_size = m.image_size;
  s.synthetic.train_fraction = cfg.get_double("data.train_fraction");
  s.synthetic.seed = s.seed_data;
  s.synthetic.noise = cfg.get_double("data.noise");
  s.synthetic.jitter = cfg.get_double("data.jitter");

  s.far_targets = cfg.get_doubles("eval.far_targets");
  s.occluded.min_fraction = cfg.get_double("eval.occluder_min");
  s.occluded.max_fraction = cfg.get_double("eval.occluder_max");
  s.occluded.fill = cfg.get_double("eval.occluder_fill");
  s.occluded.seed = s.seed_eval;
  s.eval_batch = std::max<std::size_t>(1, cfg.get_size("eval.batch_size"));

  s.mse_normalize = cfg.get_bool("mse.normalize");
  s.mse_stage = static_cast<int>(cfg.get_int("mse.stage"));
  place_lcd(m, s.mse_stage);
  if (!cfg.is_auto("mse.gamma_min")) s.mse_gamma_min = cfg.get_size("mse.gamma_min");
  if (!cfg.is_auto("mse.gamma_max")) s.mse_gamma_max = cfg.get_size("mse.gamma_max");
  s.mse_samples = cfg.get_size("mse.samples");

  const long long precision = cfg.get_int("run.precision");
  if (precision != 32 && precision != 64) throw ConfigError("run.precision must be 32 or 64");
  s.precision = static_cast<int>(precision);
  s.deterministic = cfg.get_bool("run.deterministic");
  s.log_every = std::max<std::size_t>(1, cfg.get_size("run.log_every"));
  s.config_fingerprint = cfg.fingerprint();
  s.seed_fingerprint = cfg.seed_fingerprint();
  return s;
}

inline Dataset load_dataset(const ExperimentSettings& s) {
  if (s.source == "directory") {
    if (s.root.empty()) throw DataError("data.source = directory needs data.root");
    return load_directory_dataset(s.root, s.model.image_size, s.synthetic.train_fraction);
  }
  return make_synthetic_dataset(s.synthetic, s.deterministic ? 1 : worker_threads());
}

template <typename T>
Tensor<T> batch_tensor(const ImageSet& set, const std::vector<std::size_t>& idx, std::size_t begin,
                       std::size_t end) {
  const std::size_t plane = set.plane();
  std::vector<T> v((end - begin) * plane);
  for (std::size_t b = begin; b < end; ++b) {
    const float* src = set.image(idx[b]);
    std::transform(src, src + plane, v.begin() + (b - begin) * plane, [](float p) { return static_cast<T>(p); });
  }
  return Tensor<T>::from({end - begin, 1, set.size, set.size}, std::move(v));
}

/// Temporarily marks tensors as not requiring gradients so forwards build no graph.
template <typename T>
class NoGradScope {
 public:
  explicit NoGradScope(std::vector<Tensor<T>> tensors) : tensors_(std::move(tensors)) {
    for (auto& t : tensors_) {
      saved_.push_back(t.requires_grad());
      t.set_requires_grad(false);
    }
  }
  ~NoGradScope() {
    for (std::size_t k = 0; k < tensors_.size(); ++k) tensors_[k].set_requires_grad(saved_[k]);
  }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  std::vector<Tensor<T>> tensors_;
  std::vector<bool> saved_;
};

template <typename T>
struct TrainedModel {
  Backbone<T> backbone;
  MarginHead<T> head;

  std::vector<std::pair<std::string, Tensor<T>>> parameters() const {
    auto p = backbone.parameters();
    p.emplace_back("head.weight", head.weight);
    return p;
  }
  /// Everything a checkpoint stores.
  std::vector<std::pair<std::string, Tensor<T>>> state() const {
    auto p = parameters();
    for (auto& b : backbone.buffers()) p.push_back(std::move(b));
    return p;
  }
  NoGradScope<T> no_grad() const {
    std::vector<Tensor<T>> ts;
    for (auto& [name, t] : parameters()) ts.push_back(t);
    return NoGradScope<T>(std::move(ts));
  }
};

template <typename T>
TrainedModel<T> make_model(const ExperimentSettings& s, std::size_t num_ids) {
  std::mt19937_64 head_rng(mix_seed(s.seed_init, fnv1a("head")));
  return TrainedModel<T>{Backbone<T>(s.model, s.seed_init),
                         MarginHead<T>::init(num_ids, s.model.embedding_dim, static_cast<T>(s.margin),
                                             static_cast<T>(s.scale), head_rng)};
}

struct StepLog {
  std::size_t step = 0, epoch = 0;
  double total = 0, id = 0, filter = 0, response = 0, lr = 0;
};

struct RunRecord {
  std::vector<StepLog> steps;
  std::size_t params_backbone = 0;  ///< everything except the attention module and the class weights
  std::size_t params_sam = 0;
  std::size_t params_head = 0;
  std::size_t clamped_cosines = 0;
  std::size_t degenerate_channels = 0;
  double wall_seconds = 0;
};

inline void write_run_record_csv(std::ostream& os, const RunRecord& r, std::uint64_t seed_fingerprint) {
  os << "step,epoch,loss_total,loss_id,loss_filter,loss_response,lr,seed_fingerprint\n";
  const std::string fp = hex64(seed_fingerprint);
  for (const auto& s : r.steps) {
    os << s.step << ',' << s.epoch << ',' << format_double(s.total) << ',' << format_double(s.id) << ','
       << format_double(s.filter) << ',' << format_double(s.response) << ',' << format_double(s.lr) << ',' << fp
       << '\n';
  }
}

/// Algorithm: per mini-batch, forward to the insertion point (drawing the
/// per-sample channel drop), attention, remaining forward, margin loss plus
/// weighted orthogonality losses on the insertion stage's second conv, then
/// backward and a momentum-SGD step.
template <typename T>
RunRecord train(TrainedModel<T>& net, const ExperimentSettings& s, const ImageSet& train_set,
                const std::string& diagnostic_dir = "") {
  const auto started = std::chrono::steady_clock::now();
  RunRecord record;
  record.params_sam = net.backbone.sam() ? net.backbone.sam()->parameter_count() : 0;
  record.params_backbone = net.backbone.parameter_count(false);
  record.params_head = net.head.weight.numel();

  Sgd<T> opt(net.parameters(), s.momentum, s.weight_decay);
  std::mt19937_64 stream(s.seed_dropout);   // shuffling and image-level strategies
  std::mt19937_64 mask_stream(s.seed_mask);  // feature-level strategies
  const std::size_t n = train_set.count();
  if (n < s.batch_size) {
    throw DataError("training set has " + std::to_string(n) + " images, fewer than optim.batch_size " +
                    std::to_string(s.batch_size));
  }
  const std::size_t batches = n / s.batch_size;
  std::vector<std::size_t> order(n);
  const T alpha = static_cast<T>(s.alpha), beta = static_cast<T>(s.beta), eps = static_cast<T>(s.epsilon);
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < s.epochs; ++epoch) {
    const double lr = scheduled_lr(s.lr, epoch, s.epochs, s.milestones, s.decay);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), stream);
    for (std::size_t b = 0; b < batches; ++b, ++step) {
      const std::size_t begin = b * s.batch_size, end = begin + s.batch_size;
      Tensor<T> images = batch_tensor<T>(train_set, order, begin, end);
      if (domain_of(s.strategy) == StrategyDomain::image) {
        auto px = images.values();
        if (const auto* c = std::get_if<CutoutParams>(&s.strategy)) {
          cutout(px, images.shape(), c->box_size, stream);
        } else {
          image_template(px, images.shape(), std::get<ImageTemplateParams>(s.strategy), stream);
        }
      }
      std::vector<std::size_t> labels(s.batch_size);
      for (std::size_t k = begin; k < end; ++k) labels[k - begin] = train_set.labels[order[k]];

      ForwardOptions<T> fo;
      fo.training = true;
      fo.rng = &mask_stream;
      auto res = net.backbone.forward(images, fo);
      Tensor<T> total = margin_loss(res.embedding, labels, net.head);
      StepLog log{step, epoch, 0, static_cast<double>(total.item()), 0, 0, lr};

      if (alpha != T(0)) {
        auto lf = filter_orthogonal_loss(net.backbone.filter_bank(), eps);
        log.filter = static_cast<double>(lf.item());
        total = add(total, scale(lf, alpha));
      } else {
        FilterBank<T> detached(net.backbone.regularized_weight().detach(), s.model.column_rule);
        log.filter = static_cast<double>(filter_orthogonal_loss(detached, eps).item());
      }
      if (beta != T(0)) {
        auto lr_loss = response_orthogonal_loss(ResponseSet<T>(res.response), eps);
        log.response = static_cast<double>(lr_loss.item());
        total = add(total, scale(lr_loss, beta));
      } else {
        log.response = static_cast<double>(response_orthogonal_loss(ResponseSet<T>(res.response.detach()), eps).item());
      }
      log.total = static_cast<double>(total.item());

      if (!std::isfinite(log.total)) {
        std::ostringstream snap;
        snap << "non-finite loss at step " << step << " (epoch " << epoch << ")\n"
             << "loss_id " << log.id << "\nloss_filter " << log.filter << "\nloss_response " << log.response
             << "\nlr " << lr << "\nseed_data " << s.seed_data << "\nseed_init " << s.seed_init << "\nseed_dropout "
             << s.seed_dropout << "\nseed_mask " << s.seed_mask << "\nbatch";
        for (std::size_t k = begin; k < end; ++k) snap << ' ' << order[k];
        snap << '\n';
        std::string where;
        if (!diagnostic_dir.empty()) {
          where = (std::filesystem::path(diagnostic_dir) / "nonfinite_snapshot.txt").string();
          std::ofstream(where) << snap.str();
        }
        throw NumericError("non-finite loss at step " + std::to_string(step) +
                           (where.empty() ? std::string() : "; snapshot written to " + where));
      }

      backward(total);
      opt.step(lr);
      opt.zero_grad();
      if (step % s.log_every == 0) record.steps.push_back(log);
    }
  }
  record.clamped_cosines = net.head.clamped;
  record.degenerate_channels = net.backbone.degenerate_channels();
  record.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return record;
}

/// Eval-mode embeddings of a whole image set. `forced` (optional) supplies a
/// channel drop per batch at `forced_stage`; `on_response` sees the
/// regularized layer's responses of each batch.
template <typename T>
Embeddings embed(TrainedModel<T>& net, const ImageSet& set, std::size_t batch,
                 const std::function<std::optional<DropMask>(std::size_t, const Shape&)>& forced = {},
                 int forced_stage = 3, const std::function<void(const Tensor<T>&)>& on_response = {}) {
  auto guard = net.no_grad();
  Embeddings out;
  out.count = set.count();
  out.dim = net.backbone.config().embedding_dim;
  out.values.reserve(out.count * out.dim);
  std::vector<std::size_t> idx(set.count());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  const auto& mc = net.backbone.config();
  for (std::size_t begin = 0; begin < set.count(); begin += batch) {
    const std::size_t end = std::min(set.count(), begin + batch);
    auto images = batch_tensor<T>(set, idx, begin, end);
    ForwardOptions<T> fo;
    std::optional<DropMask> mask;
    if (forced) {
      const std::size_t hs = mc.stage_size(forced_stage);
      mask = forced(end - begin, Shape{end - begin, mc.stage_width(forced_stage), hs, hs});
      if (mask) {
        fo.forced_mask = &*mask;
        fo.forced_stage = forced_stage;
      }
    }
    auto res = net.backbone.forward(images, fo);
    if (on_response) on_response(res.response);
    for (T v : res.embedding.values()) out.values.push_back(static_cast<double>(v));
  }
  return out;
}

struct EvalSummary {
  std::vector<MetricRow> rows;
  double rank1_clean = 0, rank1_occluded = 0;
  std::vector<TarAtFar> tar_clean, tar_occluded;
  double response_abs_cosine = 0;
  std::size_t genuine_pairs = 0, impostor_pairs = 0;
};

inline std::string far_label(double far) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "tar@far=%g", far);
  return buf;
}

/// Gallery: clean training images. Probes: clean test images and their
/// occluded twins. Verification pairs: all test pairs (clean split) and
/// clean-vs-occluded pairs of distinct images (occluded split).
template <typename T>
EvalSummary evaluate(TrainedModel<T>& net, const Dataset& ds, const ExperimentSettings& s) {
  EvalSummary ev;
  const auto occluded_set = build_occluded_split(ds.test, s.occluded);
  double cos_acc = 0;
  std::size_t cos_count = 0;
  const auto gallery = embed(net, ds.train, s.eval_batch);
  const std::function<void(const Tensor<T>&)> tap = [&](const Tensor<T>& resp) {
    cos_acc += mean_abs_response_cosine(ResponseSet<T>(resp), static_cast<T>(s.epsilon)) *
               static_cast<double>(resp.dim(0));
    cos_count += resp.dim(0);
  };
  const auto clean = embed(net, ds.test, s.eval_batch, {}, 3, tap);
  const auto occluded = embed(net, occluded_set, s.eval_batch);
  ev.response_abs_cosine = cos_count ? cos_acc / static_cast<double>(cos_count) : 0.0;

  ev.rank1_clean = rank1_identification(gallery, ds.train.labels, clean, ds.test.labels);
  ev.rank1_occluded = rank1_identification(gallery, ds.train.labels, occluded, ds.test.labels);
  const auto pairs_clean = all_pairs(clean, ds.test.labels, Provenance::clean);
  const auto pairs_occ = cross_pairs(clean, occluded, ds.test.labels, Provenance::occluded);
  ev.genuine_pairs = pairs_clean.genuine.size();
  ev.impostor_pairs = pairs_clean.impostor.size();
  ev.tar_clean = tar_at_far(pairs_clean, s.far_targets);
  ev.tar_occluded = tar_at_far(pairs_occ, s.far_targets);

  ev.rows.push_back({"rank1", "clean", ev.rank1_clean, std::nullopt});
  ev.rows.push_back({"rank1", "occluded", ev.rank1_occluded, std::nullopt});
  for (const auto* list : {&ev.tar_clean, &ev.tar_occluded}) {
    const std::string split = list == &ev.tar_clean ? "clean" : "occluded";
    for (const auto& t : *list) {
      if (t.resolvable) {
        ev.rows.push_back({far_label(t.far_target), split, t.tar, t.threshold});
      } else {
        ev.rows.push_back({far_label(t.far_target) + ":unresolvable(required_impostors=" +
                               std::to_string(t.required_impostors) + ")",
                           split, std::nan(""), std::nullopt});
      }
    }
  }
  ev.rows.push_back({"response_abs_cosine", "clean", ev.response_abs_cosine, std::nullopt});
  return ev;
}

struct MseReport {
  double mean = 0;
  std::vector<double> per_image;
  bool normalized = true;
  int stage = 3;
  std::uint64_t mask_seed = 0;
};

/// Mean over test images of (1/L) sum_k (f_k - f'_k)^2, where f' is the
/// eval-mode embedding with a channel drop forced at `stage`. Drop sets
/// depend only on the mask seed and batch geometry, so every model measured
/// with the same settings sees the same drops.
template <typename T>
MseReport mse_compensation(TrainedModel<T>& net, const ImageSet& test, const ExperimentSettings& s,
                           std::optional<GammaPolicy> policy_override = std::nullopt) {
  MseReport rep;
  rep.normalized = s.mse_normalize;
  rep.stage = s.mse_stage;
  rep.mask_seed = mix_seed(s.seed_eval, fnv1a("mse"));
  ImageSet subset = test;
  if (s.mse_samples > 0 && s.mse_samples < test.count()) {
    subset.labels.resize(s.mse_samples);
    subset.pixels.resize(s.mse_samples * test.plane());
  }
  const std::size_t c = s.model.stage_width(s.mse_stage);
  GammaPolicy policy = policy_override.value_or(GammaPolicy::defaults_for(c));
  if (!policy_override) {
    if (s.mse_gamma_min) policy.gamma_min = *s.mse_gamma_min;
    if (s.mse_gamma_max) policy.gamma_max = *s.mse_gamma_max;
  }
  policy.validate(c);
  std::mt19937_64 rng(rep.mask_seed);
  const auto base = embed(net, subset, s.eval_batch);
  const std::function<std::optional<DropMask>(std::size_t, const Shape&)> draw =
      [&](std::size_t, const Shape& shape) -> std::optional<DropMask> {
    return sample_mask(shape[0], shape[1], shape[2], shape[3], policy, rng);
  };
  const auto dropped = embed(net, subset, s.eval_batch, draw, s.mse_stage);
  const std::size_t dim = base.dim;
  std::vector<double> a(dim), b(dim);
  double acc = 0;
  for (std::size_t i = 0; i < base.count; ++i) {
    std::copy(base.row(i), base.row(i) + dim, a.begin());
    std::copy(dropped.row(i), dropped.row(i) + dim, b.begin());
    if (s.mse_normalize) {
      a = normalize_rows<double>(a, 1, dim, nullptr);
      b = normalize_rows<double>(b, 1, dim, nullptr);
    }
    double e = 0;
    for (std::size_t k = 0; k < dim; ++k) e += (a[k] - b[k]) * (a[k] - b[k]);
    e /= static_cast<double>(dim);
    rep.per_image.push_back(e);
    acc += e;
  }
  rep.mean = base.count ? acc / static_cast<double>(base.count) : 0.0;
  return rep;
}

/// Mean attention weight per channel at the insertion stage: over clean
/// inputs, and over inputs with a forced channel drop, split into the
/// dropped and the intact channels of each sample.
struct AttentionReport {
  std::vector<double> clean, dropped, intact;
  std::vector<std::size_t> dropped_count, intact_count;
  double spread_clean() const {
    if (clean.empty()) return 0.0;
    const auto [lo, hi] = std::minmax_element(clean.begin(), clean.end());
    return *hi - *lo;
  }
  /// Mean over (sample, channel) entries rather than over channels.
  double mean_dropped() const { return pooled(dropped, dropped_count); }
  double mean_intact() const { return pooled(intact, intact_count); }

 private:
  static double pooled(const std::vector<double>& m, const std::vector<std::size_t>& n) {
    double acc = 0, cnt = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      acc += m[i] * static_cast<double>(n[i]);
      cnt += static_cast<double>(n[i]);
    }
    return cnt > 0 ? acc / cnt : std::nan("");
  }
};

template <typename T>
AttentionReport sam_attention_report(TrainedModel<T>& net, const ImageSet& set, const ExperimentSettings& s) {
  const auto& mc = net.backbone.config();
  if (!net.backbone.sam()) throw ConfigError("attention report needs sam.enabled = true");
  const std::size_t c = mc.stage_width(mc.stage), hs = mc.stage_size(mc.stage);
  AttentionReport rep;
  rep.clean.assign(c, 0.0);
  rep.dropped.assign(c, 0.0);
  rep.intact.assign(c, 0.0);
  rep.dropped_count.assign(c, 0);
  rep.intact_count.assign(c, 0);
  const auto policy = GammaPolicy::defaults_for(c);
  std::mt19937_64 rng(mix_seed(s.seed_eval, fnv1a("attention")));
  auto guard = net.no_grad();
  std::vector<std::size_t> idx(set.count());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t begin = 0; begin < set.count(); begin += s.eval_batch) {
    const std::size_t end = std::min(set.count(), begin + s.eval_batch), n = end - begin;
    auto images = batch_tensor<T>(set, idx, begin, end);
    const auto clean = net.backbone.forward(images, ForwardOptions<T>{});
    const auto mask = sample_mask(n, c, hs, hs, policy, rng);
    ForwardOptions<T> fo;
    fo.forced_mask = &mask;
    fo.forced_stage = mc.stage;
    const auto masked = net.backbone.forward(images, fo);
    for (std::size_t t = 0; t < n; ++t) {
      for (std::size_t i = 0; i < c; ++i) {
        rep.clean[i] += static_cast<double>(clean.theta.values()[t * c + i]);
        const double th = static_cast<double>(masked.theta.values()[t * c + i]);
        if (mask.kept(t, i)) {
          rep.intact[i] += th;
          ++rep.intact_count[i];
        } else {
          rep.dropped[i] += th;
          ++rep.dropped_count[i];
        }
      }
    }
  }
  for (std::size_t i = 0; i < c; ++i) {
    rep.clean[i] /= static_cast<double>(std::max<std::size_t>(set.count(), 1));
    rep.dropped[i] = rep.dropped_count[i] ? rep.dropped[i] / static_cast<double>(rep.dropped_count[i]) : std::nan("");
    rep.intact[i] = rep.intact_count[i] ? rep.intact[i] / static_cast<double>(rep.intact_count[i]) : std::nan("");
  }
  return rep;
}

/// Outcome of one configured run, precision-independent.
struct RunSummary {
  std::string name;
  std::uint64_t seed_base = 0;
  std::uint64_t config_fingerprint = 0;
  std::uint64_t seed_fingerprint = 0;
  RunRecord record;
  EvalSummary eval;
  std::optional<MseReport> mse;
  std::string status = "ok";
};

struct RunOptions {
  std::string out_dir;    ///< artifacts are written here when non-empty
  bool compute_mse = false;
  const Dataset* dataset = nullptr;  ///< reuse instead of loading
};

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write '" + p.string() + "'");
  out << text;
}

inline std::string run_log_text(const RunSummary& r) {
  std::ostringstream os;
  os << "config_fingerprint " << hex64(r.config_fingerprint) << "\n"
     << "seed_fingerprint " << hex64(r.seed_fingerprint) << "\n"
     << "params_backbone " << r.record.params_backbone << "\n"
     << "params_attention " << r.record.params_sam << "\n"
     << "params_class_weights " << r.record.params_head << "\n"
     << "params_attention_increase "
     << format_double(r.record.params_backbone
                          ? static_cast<double>(r.record.params_sam) / static_cast<double>(r.record.params_backbone)
                          : 0.0)
     << "\n"
     << "clamped_cosines " << r.record.clamped_cosines << "\n"
     << "degenerate_channels " << r.record.degenerate_channels << "\n"
     << "genuine_pairs " << r.eval.genuine_pairs << "\n"
     << "impostor_pairs " << r.eval.impostor_pairs << "\n"
     << "verification_score cosine\n";
  for (const auto* list : {&r.eval.tar_clean, &r.eval.tar_occluded}) {
    for (const auto& t : *list) {
      if (!t.resolvable) {
        os << "unresolvable " << far_label(t.far_target) << " required_impostors " << t.required_impostors << "\n";
      }
    }
  }
  if (r.mse) {
    os << "mse_mean " << format_double(r.mse->mean) << " (per-image then mean, stage " << r.mse->stage
       << ", paired drop sets, " << (r.mse->normalized ? "normalized" : "raw") << " embeddings)\n";
  }
  os << "wall_seconds " << r.record.wall_seconds << "\n";
  return os.str();
}

template <typename T>
RunSummary run_experiment_t(const ExperimentSettings& s, const RunOptions& opt, TrainedModel<T>* keep = nullptr) {
  RunSummary r;
  r.config_fingerprint = s.config_fingerprint;
  r.seed_fingerprint = s.seed_fingerprint;
  Dataset loaded;
  const Dataset& ds = opt.dataset ? *opt.dataset : (loaded = load_dataset(s));
  auto net = make_model<T>(s, ds.num_ids);
  r.record = train(net, s, ds.train, opt.out_dir);
  r.eval = evaluate(net, ds, s);
  if (opt.compute_mse) r.mse = mse_compensation(net, ds.test, s);
  if (!opt.out_dir.empty()) {
    namespace fs = std::filesystem;
    const fs::path dir(opt.out_dir);
    std::ostringstream rec, met;
    write_run_record_csv(rec, r.record, s.seed_fingerprint);
    write_metrics_csv(met, r.eval.rows, s.seed_fingerprint);
    write_text(dir / "run_record.csv", rec.str());
    write_text(dir / "metrics.csv", met.str());
    save_checkpoint(( dir / "checkpoint.bin").string(), s.config_fingerprint, net.state());
    write_text(dir / "run.log", run_log_text(r));
  }
  if (keep) *keep = std::move(net);
  return r;
}

inline RunSummary run_experiment(const Config& cfg, const RunOptions& opt = {}) {
  const auto s = settings_from_config(cfg);
  auto r = s.precision == 64 ? run_experiment_t<double>(s, opt) : run_experiment_t<float>(s, opt);
  r.seed_base = static_cast<std::uint64_t>(cfg.get_int("seed.base"));
  return r;
}

/// Model rebuilt from settings with weights and statistics from a checkpoint.
/// Returns the stored config fingerprint through `stored_fingerprint`.
template <typename T>
TrainedModel<T> load_trained(const ExperimentSettings& s, std::size_t num_ids, const std::string& path,
                             std::uint64_t* stored_fingerprint = nullptr) {
  auto net = make_model<T>(s, num_ids);
  const auto ck = load_checkpoint(path);
  restore_checkpoint(ck, net.state());
  if (stored_fingerprint) *stored_fingerprint = ck.config_fingerprint;
  return net;
}

inline std::vector<std::uint64_t> experiment_seeds(const Config& cfg) {
  std::vector<std::uint64_t> out;
  for (double v : cfg.get_doubles("experiment.seeds")) out.push_back(static_cast<std::uint64_t>(v));
  if (out.empty()) throw ConfigError("experiment.seeds must list at least one seed");
  return out;
}

/// Component configurations compared by the ablation: baseline, channel
/// drop, channel drop + spatial regularization, and all three with attention.
inline std::vector<std::pair<std::string, Config>> ablation_configs(const Config& base) {
  std::vector<std::pair<std::string, Config>> out;
  Config b = base;
  b.set("strategy.name", "none");
  b.set("loss.alpha", "0");
  b.set("loss.beta", "0");
  b.set("sam.enabled", "false");
  out.emplace_back("baseline", b);
  Config cd = b;
  cd.set("strategy.name", "lcd");
  out.emplace_back("cd", cd);
  Config sr = cd;
  sr.set("loss.alpha", base.get("loss.alpha"));
  sr.set("loss.beta", base.get("loss.beta"));
  out.emplace_back("cd_sr", sr);
  Config full = sr;
  full.set("sam.enabled", "true");
  out.emplace_back("cd_sr_sam", full);
  return out;
}

using RunObserver = std::function<void(const RunSummary&)>;

/// Runs each named config for every seed; failed runs are kept as annotated rows.
inline std::vector<RunSummary> run_matrix(const std::vector<std::pair<std::string, Config>>& configs,
                                          const std::vector<std::uint64_t>& seeds, bool compute_mse,
                                          const RunObserver& observer = {}) {
  std::vector<RunSummary> rows;
  for (std::uint64_t seed : seeds) {
    std::optional<Dataset> shared;
    for (const auto& [name, cfg0] : configs) {
      Config cfg = cfg0;
      cfg.set("seed.base", std::to_string(seed));
      RunSummary r;
      try {
        const auto s = settings_from_config(cfg);
        if (!shared) shared = load_dataset(s);
        RunOptions opt;
        opt.compute_mse = compute_mse;
        opt.dataset = &*shared;
        r = s.precision == 64 ? run_experiment_t<double>(s, opt) : run_experiment_t<float>(s, opt);
      } catch (const Error& e) {
        r.status = std::string("failed: ") + category_name(e.category()) + ": " + e.what();
        r.config_fingerprint = cfg.fingerprint();
        r.seed_fingerprint = cfg.seed_fingerprint();
      }
      r.name = name;
      r.seed_base = seed;
      if (observer) observer(r);
      rows.push_back(std::move(r));
    }
  }
  return rows;
}

inline std::vector<RunSummary> ablation_suite(const Config& base, const RunObserver& observer = {}) {
  return run_matrix(ablation_configs(base), experiment_seeds(base), true, observer);
}

inline std::vector<RunSummary> placement_sweep(const Config& base, const RunObserver& observer = {}) {
  std::vector<std::pair<std::string, Config>> configs;
  for (double st : base.get_doubles("experiment.stages")) {
    Config c = base;
    c.set("strategy.name", "lcd");
    c.set("lcd.stage", std::to_string(static_cast<int>(st)));
    configs.emplace_back("stage" + std::to_string(static_cast<int>(st)), c);
  }
  return run_matrix(configs, experiment_seeds(base), false, observer);
}

/// Baseline vs channel-drop model, each measured under the same forced drops.
inline std::vector<RunSummary> mse_experiment(const Config& base, const RunObserver& observer = {}) {
  auto abl = ablation_configs(base);
  std::vector<std::pair<std::string, Config>> configs{abl[0], abl[1]};
  return run_matrix(configs, experiment_seeds(base), true, observer);
}

inline double first_tar(const std::vector<TarAtFar>& v) { return v.empty() || !v[0].resolvable ? std::nan("") : v[0].tar; }

/// Per-run rows, followed by per-config means when several seeds were run.
inline void write_comparison_csv(std::ostream& os, const std::vector<RunSummary>& rows) {
  os << "config,seed,config_fingerprint,rank1_clean,rank1_occluded,tar_clean,tar_occluded,response_abs_cosine,"
        "mse,status\n";
  auto line = [&os](const std::string& name, const std::string& seed, const std::string& fp, double r1c, double r1o,
                    double tc, double to, double cosv, double mse, const std::string& status) {
    os << name << ',' << seed << ',' << fp << ',' << format_double(r1c) << ',' << format_double(r1o) << ','
       << format_double(tc) << ',' << format_double(to) << ',' << format_double(cosv) << ',' << format_double(mse)
       << ',' << status << '\n';
  };
  std::vector<std::string> names;
  std::vector<std::uint64_t> seeds;
  for (const auto& r : rows) {
    if (std::find(names.begin(), names.end(), r.name) == names.end()) names.push_back(r.name);
    if (std::find(seeds.begin(), seeds.end(), r.seed_base) == seeds.end()) seeds.push_back(r.seed_base);
    const bool ok = r.status == "ok";
    const double nan = std::nan("");
    line(r.name, std::to_string(r.seed_base), hex64(r.config_fingerprint), ok ? r.eval.rank1_clean : nan,
         ok ? r.eval.rank1_occluded : nan, ok ? first_tar(r.eval.tar_clean) : nan,
         ok ? first_tar(r.eval.tar_occluded) : nan, ok ? r.eval.response_abs_cosine : nan,
         ok && r.mse ? r.mse->mean : nan, r.status);
  }
  if (seeds.size() < 2) return;
  for (const auto& name : names) {
    double acc[6] = {0, 0, 0, 0, 0, 0};
    std::size_t count = 0;
    bool has_mse = true;
    for (const auto& r : rows) {
      if (r.name != name || r.status != "ok") continue;
      acc[0] += r.eval.rank1_clean;
      acc[1] += r.eval.rank1_occluded;
      acc[2] += first_tar(r.eval.tar_clean);
      acc[3] += first_tar(r.eval.tar_occluded);
      acc[4] += r.eval.response_abs_cosine;
      if (r.mse) acc[5] += r.mse->mean; else has_mse = false;
      ++count;
    }
    const double k = count ? static_cast<double>(count) : std::nan("");
    line(name, "mean", "", acc[0] / k, acc[1] / k, acc[2] / k, acc[3] / k, acc[4] / k,
         has_mse ? acc[5] / k : std::nan(""), count ? "ok" : "no successful runs");
  }
}

}  // namespace occludrop
