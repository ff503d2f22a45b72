// Experiment driver: training, evaluation, comparisons and diagnostics.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "occludrop/occludrop.hpp"

namespace fs = std::filesystem;
using namespace occludrop;

namespace {

struct CommonArgs {
  std::string config_file;
  std::vector<std::string> sets;
  std::string out = "out";
  std::optional<long long> seed;
  bool deterministic = false;
  std::optional<int> precision;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("--config", a.config_file, "config file of key = value lines")->check(CLI::ExistingFile);
  cmd->add_option("--set", a.sets, "key=value override (repeatable)");
  cmd->add_option("--out", a.out, "output directory")->capture_default_str();
  cmd->add_option("--seed", a.seed, "seed.base");
  cmd->add_flag("--deterministic", a.deterministic, "single-threaded data preparation");
  cmd->add_option("--precision", a.precision, "32 | 64")->check(CLI::IsMember({32, 64}));
}

/// Defaults, then the file, then --set, then the dedicated flags.
Config resolve(const CommonArgs& a) {
  Config cfg;
  if (!a.config_file.empty()) cfg.load_file(a.config_file);
  for (const auto& s : a.sets) cfg.apply_override(s);
  if (a.seed) cfg.set("seed.base", std::to_string(*a.seed), "--seed");
  if (a.deterministic) cfg.set("run.deterministic", "true", "--deterministic");
  if (a.precision) cfg.set("run.precision", std::to_string(*a.precision), "--precision");
  settings_from_config(cfg);  // validates every key before any work starts
  return cfg;
}

void write_resolved(const Config& cfg, const std::string& out) {
  fs::create_directories(out);
  write_text(fs::path(out) / "config.resolved",
             "# seed_fingerprint " + hex64(cfg.seed_fingerprint()) + "\n" + cfg.snapshot());
}

void print_run(const RunSummary& r) {
  std::cout << r.name << " seed=" << r.seed_base;
  if (r.status != "ok") {
    std::cout << " " << r.status << std::endl;
    return;
  }
  std::cout << " rank1_clean=" << format_double(r.eval.rank1_clean)
            << " rank1_occluded=" << format_double(r.eval.rank1_occluded)
            << " tar_clean=" << format_double(first_tar(r.eval.tar_clean))
            << " tar_occluded=" << format_double(first_tar(r.eval.tar_occluded))
            << " response_abs_cosine=" << format_double(r.eval.response_abs_cosine);
  if (r.mse) std::cout << " mse=" << format_double(r.mse->mean);
  std::cout << " wall=" << r.record.wall_seconds << "s" << std::endl;
}

void write_comparison(const std::vector<RunSummary>& rows, const std::string& out, const std::string& file) {
  std::ostringstream os;
  write_comparison_csv(os, rows);
  write_text(fs::path(out) / file, os.str());
  std::cout << os.str();
}

std::string checkpoint_path(const Config& cfg, const std::string& out) {
  const auto& p = cfg.get("eval.checkpoint");
  return p.empty() ? (fs::path(out) / "checkpoint.bin").string() : p;
}

template <typename T>
TrainedModel<T> load_for_eval(const Config& cfg, const ExperimentSettings& s, std::size_t num_ids,
                              const std::string& out) {
  const auto path = checkpoint_path(cfg, out);
  std::uint64_t stored = 0;
  auto net = load_trained<T>(s, num_ids, path, &stored);
  if (stored != s.config_fingerprint) {
    std::cerr << "warning: checkpoint " << path << " was written under config " << hex64(stored)
              << ", current config is " << hex64(s.config_fingerprint) << "\n";
  }
  return net;
}

template <typename T>
void eval_t(const Config& cfg, const ExperimentSettings& s, const std::string& out) {
  const auto ds = load_dataset(s);
  auto net = load_for_eval<T>(cfg, s, ds.num_ids, out);
  const auto ev = evaluate(net, ds, s);
  std::ostringstream met;
  write_metrics_csv(met, ev.rows, s.seed_fingerprint);
  write_text(fs::path(out) / "eval_metrics.csv", met.str());
  std::cout << met.str();
}

/// Per-channel response maps of the regularized layer over test images, plus
/// the attention table when the model has an attention module.
template <typename T>
void heatmaps_t(const Config& cfg, const ExperimentSettings& s, const std::string& out) {
  const auto ds = load_dataset(s);
  auto net = load_for_eval<T>(cfg, s, ds.num_ids, out);
  ImageSet subset;
  subset.size = ds.test.size;
  const std::size_t count = std::min(ds.test.count(), cfg.get_size("heatmaps.images"));
  if (count == 0) throw ConfigError("heatmaps.images must select at least one test image");
  for (std::size_t i = 0; i < count; ++i) {
    subset.push(std::vector<float>(ds.test.image(i), ds.test.image(i) + ds.test.plane()), ds.test.labels[i]);
  }
  std::optional<Tensor<T>> responses;
  const std::function<void(const Tensor<T>&)> tap = [&](const Tensor<T>& r) { responses = r; };
  embed(net, subset, count, {}, s.model.stage, tap);
  const ResponseSet<T> set(*responses);
  const fs::path dir = fs::path(out) / "heatmaps";
  fs::create_directories(dir);
  const std::string layer = "stage" + std::to_string(s.model.stage);
  std::vector<Heatmap> maps;
  for (std::size_t ch = 0; ch < set.channels(); ++ch) {
    maps.push_back(channel_response_heatmap(set, ch));
    if (maps.back().constant) std::cerr << "warning: " << layer << " channel " << ch << " is spatially constant\n";
    write_pgm((dir / (layer + "_" + std::to_string(ch) + ".pgm")).string(), maps.back().width, maps.back().height,
              maps.back().pixels);
  }
  double acc = 0;
  std::size_t pairs = 0;
  for (std::size_t a = 0; a < maps.size(); ++a)
    for (std::size_t b = a + 1; b < maps.size(); ++b, ++pairs) acc += heatmap_correlation(maps[a], maps[b]);
  const double mean_corr = pairs ? acc / static_cast<double>(pairs) : 0.0;
  std::ostringstream summary;
  summary << "layer " << layer << "\nchannels " << maps.size() << "\nimages " << count
          << "\nmean_pairwise_correlation " << format_double(mean_corr) << "\n";
  if (net.backbone.sam()) {
    const auto rep = sam_attention_report(net, subset, s);
    summary << "attention_spread_clean " << format_double(rep.spread_clean()) << "\nattention_mean_dropped "
            << format_double(rep.mean_dropped()) << "\nattention_mean_intact " << format_double(rep.mean_intact())
            << "\n";
    std::ostringstream table;
    table << "channel,theta_clean,theta_dropped,theta_intact,dropped_count,intact_count\n";
    for (std::size_t i = 0; i < rep.clean.size(); ++i) {
      table << i << ',' << format_double(rep.clean[i]) << ',' << format_double(rep.dropped[i]) << ','
            << format_double(rep.intact[i]) << ',' << rep.dropped_count[i] << ',' << rep.intact_count[i] << '\n';
    }
    write_text(dir / "attention.csv", table.str());
  }
  write_text(dir / "summary.txt", summary.str());
  std::cout << summary.str();
}

void gen_data(const ExperimentSettings& s, const std::string& out) {
  const auto ds = load_dataset(s);
  const fs::path root = fs::path(out) / "data";
  std::vector<std::size_t> next(ds.num_ids, 0);
  for (const ImageSet* set : {&ds.train, &ds.test}) {
    for (std::size_t i = 0; i < set->count(); ++i) {
      const std::size_t id = set->labels[i];
      char dir[32], file[32];
      std::snprintf(dir, sizeof dir, "id_%04zu", id);
      std::snprintf(file, sizeof file, "img_%04zu.png", next[id]++);
      fs::create_directories(root / dir);
      write_png_gray((root / dir / file).string(), set->size, set->size, set->image(i));
    }
  }
  std::cout << "wrote " << ds.train.count() + ds.test.count() << " images of " << ds.num_ids << " identities to "
            << root.string() << std::endl;
}

int gradcheck(std::size_t seeds) {
  const auto results = run_gradient_suite(seeds);
  bool ok = true;
  for (const auto& r : results) {
    std::cout << (r.passed() ? "ok   " : "FAIL ") << r.name << " seeds=" << r.seeds << " worst=" << r.worst;
    if (!r.passed()) std::cout << " " << r.diagnostic;
    std::cout << std::endl;
    ok = ok && r.passed();
  }
  return ok ? 0 : static_cast<int>(ErrorCategory::numeric);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"occlusion-robust channel dropout experiments"};
  app.require_subcommand(1);
  CommonArgs common;
  std::size_t grad_seeds = 20;

  auto* train_cmd = app.add_subcommand("train", "train one model, then evaluate it");
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a saved checkpoint");
  auto* ablate_cmd = app.add_subcommand("ablate", "baseline / cd / cd_sr / cd_sr_sam over experiment.seeds");
  auto* place_cmd = app.add_subcommand("place-sweep", "channel drop at each of experiment.stages");
  auto* mse_cmd = app.add_subcommand("mse-exp", "embedding shift under forced channel drops");
  auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every primitive");
  auto* gen_cmd = app.add_subcommand("gen-data", "write the synthetic dataset as PNG folders");
  auto* heat_cmd = app.add_subcommand("heatmaps", "per-channel response maps of a saved checkpoint");
  for (auto* c : {train_cmd, eval_cmd, ablate_cmd, place_cmd, mse_cmd, grad_cmd, gen_cmd, heat_cmd}) add_common(c, common);
  grad_cmd->add_option("--seeds", grad_seeds, "random shapes per primitive")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorCategory::config);
  }

  try {
    if (grad_cmd->parsed()) return gradcheck(grad_seeds);
    const Config cfg = resolve(common);
    write_resolved(cfg, common.out);
    const auto s = settings_from_config(cfg);
    if (train_cmd->parsed()) {
      RunOptions opt;
      opt.out_dir = common.out;
      auto r = run_experiment(cfg, opt);
      r.name = "train";
      print_run(r);
    } else if (eval_cmd->parsed()) {
      s.precision == 64 ? eval_t<double>(cfg, s, common.out) : eval_t<float>(cfg, s, common.out);
    } else if (ablate_cmd->parsed()) {
      write_comparison(ablation_suite(cfg, print_run), common.out, "ablation.csv");
    } else if (place_cmd->parsed()) {
      const auto rows = placement_sweep(cfg, print_run);
      write_comparison(rows, common.out, "placement.csv");
      double r3 = 0, r4 = 0;
      std::size_t n3 = 0, n4 = 0;
      for (const auto& r : rows) {
        if (r.status != "ok") continue;
        if (r.name == "stage3") r3 += r.eval.rank1_occluded, ++n3;
        if (r.name == "stage4") r4 += r.eval.rank1_occluded, ++n4;
      }
      if (n3 && n4) {
        std::cout << "trend: occluded rank-1 stage3=" << format_double(r3 / n3) << " stage4=" << format_double(r4 / n4)
                  << (r3 / n3 >= r4 / n4 ? " (stage3 >= stage4)" : " (stage3 < stage4)") << std::endl;
      }
    } else if (mse_cmd->parsed()) {
      write_comparison(mse_experiment(cfg, print_run), common.out, "mse.csv");
    } else if (gen_cmd->parsed()) {
      gen_data(s, common.out);
    } else if (heat_cmd->parsed()) {
      s.precision == 64 ? heatmaps_t<double>(cfg, s, common.out) : heatmaps_t<float>(cfg, s, common.out);
    }
  } catch (const Error& e) {
    std::cerr << "error (" << category_name(e.category()) << "): " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error (data): " << e.what() << "\n";
    return static_cast<int>(ErrorCategory::data);
  }
  return 0;
}
