// Acceptance run: one PASS/FAIL line per criterion, tolerances pinned below.
// Exit status is nonzero when any criterion fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "occludrop/occludrop.hpp"
#include "oracles.hpp"

using namespace occludrop;
namespace fs = std::filesystem;
using TD = Tensor<double>;
using Clock = std::chrono::steady_clock;

namespace {

constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 120;
constexpr std::size_t kGradSeeds = 20;
constexpr double kOracleTol = 1e-10;
constexpr double kMaskedStatTol = 1e-12;
constexpr double kFractionTol = 0.01;
constexpr double kMaskSeconds = 10;
constexpr double kReductionTol = 1e-10;
constexpr double kRunSeconds = 600;

int failures = 0;

void report(int id, bool ok, const std::string& what) {
  std::cout << "[" << id << "] " << (ok ? "PASS" : "FAIL") << "  " << what << std::endl;
  if (!ok) ++failures;
}

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string num(double v, int prec = 4) {
  std::ostringstream os;
  os.precision(prec);
  os << v;
  return os.str();
}

std::vector<double> uniform_values(std::size_t count, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(count);
  for (auto& x : v) x = u(rng);
  return v;
}

double max_abs_diff(std::span<const double> a, const std::vector<double>& b) {
  double worst = 0;
  for (std::size_t i = 0; i < b.size(); ++i) worst = std::max(worst, std::abs(a[i] - b[i]));
  return worst;
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(OCCLUDROP_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path fresh(const fs::path& p) {
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void gradient_suite() {
  const auto t0 = Clock::now();
  const auto results = run_gradient_suite(kGradSeeds);
  const double secs = seconds_since(t0);
  bool ok = secs < kGradSeconds;
  double worst = 0;
  std::string bad;
  for (const auto& r : results) {
    worst = std::max(worst, r.worst);
    if (!r.passed() || r.seeds < kGradSeeds || !(r.worst < kGradTol)) {
      ok = false;
      bad += " " + r.name;
    }
  }
  report(1, ok,
         "gradient suite: " + std::to_string(results.size()) + " primitives x " + std::to_string(kGradSeeds) +
             " seeds, worst rel err " + num(worst) + " (< " + num(kGradTol) + "), " + num(secs, 3) + " s (< " +
             num(kGradSeconds) + " s)" + (bad.empty() ? "" : "; failing:" + bad));
}

void oracle_equivalence() {
  double conv_err = 0, lin_err = 0, filt_err = 0, resp_err = 0, stat_err = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t stride = 1 + seed % 2, pad = seed % 3 == 0 ? 0 : 1, k = seed % 4 == 0 ? 1 : 3;
    auto xv = uniform_values(2 * 3 * 7 * 7, rng), wv = uniform_values(4 * 3 * k * k, rng);
    auto y = conv2d(TD::from({2, 3, 7, 7}, xv), TD::from({4, 3, k, k}, wv), stride, pad);
    std::size_t ho = 0, wo = 0;
    conv_err = std::max(conv_err, max_abs_diff(y.values(), oracle::conv2d(xv, 2, 3, 7, 7, wv, 4, k, stride, pad, ho, wo)));

    auto lx = uniform_values(15, rng), lw = uniform_values(30, rng), lb = uniform_values(6, rng);
    auto ly = linear(TD::from({3, 5}, lx), TD::from({6, 5}, lw), TD::from({6}, lb));
    lin_err = std::max(lin_err, max_abs_diff(ly.values(), oracle::linear(lx, 3, 5, lw, lb, 6)));

    const bool x_rule = seed % 2 == 0;
    auto fw = uniform_values(5 * 3 * 3 * 3, rng);
    const double fl = filter_orthogonal_loss(
                          FilterBank<double>(TD::from({5, 3, 3, 3}, fw), x_rule ? ColumnRule::x_offset : ColumnRule::y_offset),
                          1e-8)
                          .item();
    filt_err = std::max(filt_err, std::abs(fl - oracle::filter_orthogonal(fw, 5, 3, 3, x_rule, 1e-8)));

    auto f = uniform_values(3 * 4 * 4 * 4, rng);
    const double rl = response_orthogonal_loss(ResponseSet<double>(TD::from({3, 4, 4, 4}, f)), 1e-8).item();
    resp_err = std::max(resp_err, std::abs(rl - oracle::response_orthogonal(f, 3, 4, 16, 1e-8)));

    auto bv = uniform_values(6 * 5 * 9, rng, -3, 3);
    auto m = sample_mask(6, 5, 3, 3, GammaPolicy{0, 3, 0}, rng);
    auto masked = apply_lcd(TD::from({6, 5, 3, 3}, bv), m, true);
    std::vector<unsigned char> keep(m.channel_keep().begin(), m.channel_keep().end());
    std::vector<double> mean, var;
    oracle::removal_stats(std::vector<double>(masked.values().begin(), masked.values().end()), 6, 5, 9, keep, mean, var);
    const auto u = masked_batchnorm_mean(masked, m);
    const auto v = masked_batchnorm_variance(masked, m);
    for (std::size_t i = 0; i < 5; ++i) {
      if (m.dropped_count(i) == 6) continue;
      stat_err = std::max({stat_err, std::abs(u[i] - mean[i]), std::abs(v[i] - var[i])});
    }
  }

  std::size_t tar_mismatch = 0, tar_cases = 0, max_pairs = 0;
  for (std::uint64_t seed = 1; seed <= 40; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.6, 0.2), im(0.1, 0.25);
    EvalPairSet set;
    const std::size_t total = 60 + seed * 11;
    for (std::size_t i = 0; i < total; ++i) {
      const bool same = i % 5 == 0;
      set.add(std::round((same ? g(rng) : im(rng)) * 40) / 40, same);
    }
    max_pairs = std::max(max_pairs, set.size());
    const std::vector<double> targets{0.5, 0.1, 0.05, 0.01};
    const auto got = tar_at_far(set, targets);
    for (std::size_t k = 0; k < targets.size(); ++k) {
      const auto ref = oracle::tar_at_far(set.genuine, set.impostor, targets[k]);
      ++tar_cases;
      if (got[k].tar != ref.tar || got[k].far != ref.far || got[k].threshold != ref.threshold) ++tar_mismatch;
    }
  }
  std::size_t rank_mismatch = 0;
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> d(0, 1);
    const std::size_t ng = 24, np = 18, dim = 4;
    Embeddings gal{ng, dim, {}}, pr{np, dim, {}};
    for (std::size_t i = 0; i < ng * dim; ++i) gal.values.push_back(std::round(d(rng) * 2) / 2 + (i % dim == 0 ? 0.25 : 0));
    for (std::size_t i = 0; i < np * dim; ++i) pr.values.push_back(std::round(d(rng) * 2) / 2 + (i % dim == 0 ? 0.25 : 0));
    std::vector<std::size_t> gl(ng), pl(np);
    for (auto& l : gl) l = rng() % 6;
    for (auto& l : pl) l = rng() % 6;
    if (rank1_identification(gal, gl, pr, pl) != oracle::rank1(gal.values, gl, pr.values, pl, dim)) ++rank_mismatch;
  }

  const bool ok = conv_err <= kOracleTol && lin_err <= kOracleTol && filt_err <= kOracleTol && resp_err <= kOracleTol &&
                  stat_err <= kMaskedStatTol && tar_mismatch == 0 && rank_mismatch == 0 && max_pairs <= 500;
  report(2, ok,
         "oracles: conv " + num(conv_err, 2) + ", linear " + num(lin_err, 2) + ", filter loss " + num(filt_err, 2) +
             ", response loss " + num(resp_err, 2) + " (<= 1e-10); masked stats " + num(stat_err, 2) +
             " (<= 1e-12); tar " + std::to_string(tar_cases - tar_mismatch) + "/" + std::to_string(tar_cases) +
             " exact, rank-1 " + std::to_string(20 - rank_mismatch) + "/20 exact (<= " + std::to_string(max_pairs) +
             " pairs)");
}

void mask_statistics() {
  const auto t0 = Clock::now();
  const std::size_t draws = 10000, c = 8;
  std::mt19937_64 rng(2024);
  auto m = sample_mask(draws, c, 1, 1, GammaPolicy{1, 3, 0}, rng);
  std::size_t total = 0;
  bool in_range = true;
  for (std::size_t t = 0; t < draws; ++t) {
    in_range = in_range && m.gamma(t) >= 1 && m.gamma(t) <= 3;
    total += m.gamma(t);
  }
  const double fraction = static_cast<double>(total) / (draws * c);
  const double p = 0.25, sigma = std::sqrt(p * (1 - p) / draws);
  double worst_z = 0;
  for (std::size_t i = 0; i < c; ++i) {
    worst_z = std::max(worst_z, std::abs(static_cast<double>(m.dropped_count(i)) / draws - p) / sigma);
  }
  const double secs = seconds_since(t0);
  const bool ok = in_range && std::abs(fraction - p) <= kFractionTol && worst_z <= 3.0 && secs < kMaskSeconds;
  report(3, ok,
         "mask stats (c=8, gamma 1..3, 10000 draws): dropped fraction " + num(fraction, 5) + " (|d| <= 0.01 of 0.25), "
             "worst channel deviation " + num(worst_z, 3) + " sigma (<= 3), " + num(secs, 3) + " s (< 10 s)");
}

void reductions() {
  std::mt19937_64 rng(77);
  // gamma = 0: nothing dropped, output is the input
  auto x = TD::from({4, 6, 3, 3}, uniform_values(216, rng));
  auto none = sample_mask(4, 6, 3, 3, GammaPolicy{0, 0, 0}, rng);
  auto y = apply_lcd(x, none, true);
  const bool lcd_identity = max_abs_diff(y.values(), std::vector<double>(x.values().begin(), x.values().end())) == 0.0;

  // no drops: masked statistics and normalization equal plain batch norm
  const DropMask keep_all(4, 6, 3, 3);
  BatchNorm<double> a(6), b(6);
  auto ya = masked_batchnorm(x, keep_all, a, true);
  auto yb = batchnorm(x, b, true);
  bool bn_equal = max_abs_diff(ya.values(), std::vector<double>(yb.values().begin(), yb.values().end())) == 0.0;
  const auto mu = masked_batchnorm_mean(x, keep_all);
  const auto var = masked_batchnorm_variance(x, keep_all);
  for (std::size_t i = 0; i < 6; ++i) bn_equal = bn_equal && mu[i] == b.stats.mean[i] && var[i] == b.stats.variance[i];

  // no margin, unit scale: cosine softmax cross-entropy
  double margin_err = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    std::mt19937_64 r(seed);
    const std::size_t n = 6, d = 5, k = 4;
    auto xv = uniform_values(n * d, r), wv = uniform_values(k * d, r);
    std::vector<std::size_t> labels(n);
    for (auto& l : labels) l = r() % k;
    MarginHead<double> head;
    head.weight = TD::from({k, d}, wv, true);
    head.margin = 0.0;
    head.scale = 1.0;
    margin_err = std::max(margin_err, std::abs(margin_loss(TD::from({n, d}, xv), labels, head).item() -
                                               oracle::cosine_softmax_ce(xv, n, d, wv, k, labels)));
  }

  // unit attention weights: output is the input
  SamConfig cfg;
  cfg.enabled = true;
  cfg.squash = Squash::identity;
  auto params = SamParams<double>::init(6, 3, 3, cfg, rng);
  auto out = sam_forward(x, params);
  bool sam_identity = max_abs_diff(out.output.values(), std::vector<double>(x.values().begin(), x.values().end())) == 0.0;
  for (double th : out.theta.values()) sam_identity = sam_identity && th == 1.0;

  const bool ok = lcd_identity && bn_equal && margin_err <= kReductionTol && sam_identity;
  report(4, ok,
         std::string("reductions: gamma=0 identity ") + (lcd_identity ? "exact" : "differs") +
             ", no-drop masked BN " + (bn_equal ? "exact" : "differs") + ", m=0 s=1 vs cosine softmax " +
             num(margin_err, 2) + " (<= 1e-10), unit attention " + (sam_identity ? "exact" : "differs"));
}

void determinism(const fs::path& work) {
  const std::string cfg = std::string(OCCLUDROP_ACCEPTANCE_DIR) + "/determinism.cfg";
  const auto a = fresh(work / "train_a"), b = fresh(work / "train_b");
  const int ca = run_cli("train --config " + cfg + " --precision 64 --deterministic --out " + a.string(), work / "train_a.log");
  const int cb = run_cli("train --config " + cfg + " --precision 64 --deterministic --out " + b.string(), work / "train_b.log");
  bool ok = ca == 0 && cb == 0;
  std::string detail;
  for (const char* f : {"metrics.csv", "checkpoint.bin"}) {
    const auto sa = slurp(a / f), sb = slurp(b / f);
    const bool same = !sa.empty() && sa == sb;
    ok = ok && same;
    detail += std::string(", ") + f + " " + (same ? "identical" : "differs") + " (" + std::to_string(sa.size()) + " B)";
  }
  report(8, ok, "determinism: two 64-bit train runs exit " + std::to_string(ca) + "/" + std::to_string(cb) + detail);
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!cells.empty()) rows.push_back(cells);
  }
  return rows;
}

void placement(const fs::path& work) {
  const std::string cfg = std::string(OCCLUDROP_ACCEPTANCE_DIR) + "/ablation.cfg";
  const auto out = fresh(work / "placement");
  const int code = run_cli("place-sweep --config " + cfg + " --set experiment.seeds=1 --set experiment.stages=2,3,4 --out " +
                               out.string(),
                           work / "placement.log");
  std::map<std::string, double> occluded;
  std::size_t rows = 0;
  for (const auto& r : csv_rows(out / "placement.csv")) {
    if (r.size() < 5 || r[0].rfind("stage", 0) != 0 || r[1] == "mean") continue;
    ++rows;
    occluded[r[0]] = std::strtod(r[4].c_str(), nullptr);
  }
  std::string trend = "trend not available";
  if (occluded.count("stage3") && occluded.count("stage4")) {
    trend = "trend (reported, not gated): occluded rank-1 stage3 " + num(occluded["stage3"]) + " vs stage4 " +
            num(occluded["stage4"]) + (occluded["stage3"] >= occluded["stage4"] ? " (stage3 >= stage4)" : " (stage3 < stage4)");
  }
  report(9, code == 0 && rows == 3,
         "place-sweep over stages 2,3,4: exit " + std::to_string(code) + ", " + std::to_string(rows) + " rows (== 3); " + trend);
}

struct Tally {
  double sum = 0;
  std::size_t count = 0;
  double mean() const { return count ? sum / count : std::nan(""); }
};

void ablation(const fs::path& work) {
  Config base;
  base.load_file(std::string(OCCLUDROP_ACCEPTANCE_DIR) + "/ablation.cfg");
  std::map<std::string, Tally> occluded, cosine;
  std::map<std::uint64_t, std::map<std::string, double>> mse;
  double slowest = 0;
  bool all_ok = true;
  auto last = Clock::now();
  const auto rows = ablation_suite(base, [&](const RunSummary& r) {
    const double secs = seconds_since(last);
    last = Clock::now();
    slowest = std::max(slowest, secs);
    std::cout << "    " << r.name << " seed " << r.seed_base << ": occluded rank-1 " << num(r.eval.rank1_occluded)
              << ", clean rank-1 " << num(r.eval.rank1_clean) << ", |cos| " << num(r.eval.response_abs_cosine)
              << ", mse " << (r.mse ? num(r.mse->mean) : "-") << ", " << num(secs, 3) << " s, " << r.status << std::endl;
    if (r.status != "ok") {
      all_ok = false;
      return;
    }
    occluded[r.name].sum += r.eval.rank1_occluded;
    ++occluded[r.name].count;
    cosine[r.name].sum += r.eval.response_abs_cosine;
    ++cosine[r.name].count;
    if (r.mse) mse[r.seed_base][r.name] = r.mse->mean;
  });
  {
    std::ofstream csv(work / "ablation.csv");
    write_comparison_csv(csv, rows);
  }
  const std::size_t seeds = experiment_seeds(base).size();

  const double full = occluded["cd_sr_sam"].mean(), cd = occluded["cd"].mean(), baseline = occluded["baseline"].mean();
  report(5, all_ok && seeds >= 3 && full >= cd && cd >= baseline && slowest < kRunSeconds,
         "ablation (" + std::to_string(seeds) + "-seed mean occluded rank-1): full " + num(full) + " >= cd " + num(cd) +
             " >= baseline " + num(baseline) + "; slowest run " + num(slowest, 3) + " s (< 600 s)");

  std::size_t below = 0;
  std::string per_seed;
  for (const auto& [seed, m] : mse) {
    const bool have = m.count("cd") && m.count("baseline");
    if (have && m.at("cd") < m.at("baseline")) ++below;
    if (have) per_seed += " " + num(m.at("cd"), 3) + "<" + num(m.at("baseline"), 3);
  }
  report(6, all_ok && below == seeds && seeds >= 3,
         "compensation mse under matched drops: channel-drop below baseline in " + std::to_string(below) + "/" +
             std::to_string(seeds) + " seeds (cd<baseline:" + per_seed + ")");

  const double reg = cosine["cd_sr"].mean(), plain = cosine["cd"].mean();
  report(7, all_ok && seeds >= 3 && reg < plain,
         "mean |response cosine| (" + std::to_string(seeds) + "-seed): alpha=100,beta=1 " + num(reg) +
             " < alpha=beta=0 " + num(plain));
}

}  // namespace

int main() {
  const fs::path work = fs::absolute("acceptance_out");
  fs::create_directories(work);
  try {
    gradient_suite();
    oracle_equivalence();
    mask_statistics();
    reductions();
    ablation(work);
    determinism(work);
    placement(work);
  } catch (const std::exception& e) {
    std::cout << "acceptance aborted: " << e.what() << std::endl;
    return 2;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
