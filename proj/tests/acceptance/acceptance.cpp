// Acceptance checks. Prints one PASS/FAIL line per criterion and exits non-zero
// if any fail.
//
//   modalfuse_acceptance [--workdir DIR] [--cli PATH] [--only N[,N...]]

#include <algorithm>
#include <array>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "modalfuse/config.hpp"
#include "modalfuse/cpia.hpp"
#include "modalfuse/dgfm.hpp"
#include "modalfuse/engine.hpp"
#include "modalfuse/experiments.hpp"
#include "modalfuse/losses.hpp"
#include "modalfuse/mcrm.hpp"
#include "modalfuse/metrics.hpp"
#include "modalfuse/ops.hpp"
#include "test_support.hpp"

#ifndef MODALFUSE_SOURCE_DIR
#define MODALFUSE_SOURCE_DIR "."
#endif

using namespace modalfuse;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int precision = 4) {
  std::ostringstream ss;
  ss.precision(precision);
  ss << v;
  return ss.str();
}

RunConfig acceptance_config() {
  return load_config(fs::path(MODALFUSE_SOURCE_DIR) / "configs" / "acceptance.json", {});
}

// 1. Frozen weights are untouched by training.
Outcome frozen_invariance() {
  const auto t0 = Clock::now();
  Trainer t(acceptance_config(), 42);
  std::vector<Tensor> before;
  for (const auto& p : t.partition().frozen) before.push_back(p.var.value());
  for (int i = 0; i < 100; ++i) t.train_step();
  std::int64_t changed = 0, elements = 0;
  for (std::size_t k = 0; k < before.size(); ++k) {
    changed += bit_identical(t.partition().frozen[k].var.value(), before[k]) ? 0 : 1;
    elements += before[k].numel();
  }
  const double secs = seconds_since(t0);
  return {changed == 0 && secs < 120.0,
          std::to_string(before.size()) + " frozen tensors (" + std::to_string(elements) +
              " values), " + std::to_string(changed) + " changed after 100 steps; " + fmt(secs, 3) + " s"};
}

// 2. A fresh adapter stage is the identity.
Outcome identity_at_init() {
  RunConfig c = acceptance_config();
  Rng init(7), data(8), drop(9);
  Model m(c.model_config(), init);
  const CpiaStage& s = m.cpia().at(0);
  for (const Var* v : {&s.tft.gamma_rgb, &s.tft.beta_rgb, &s.tft.gamma_aux, &s.tft.beta_aux,
                       &s.rgb_adapter.up.weight, &s.aux_adapter.up.weight}) {
    if (v->value().max_abs() != 0.0) return {false, "initial W_up / gamma / beta are not zero"};
  }
  int exact = 0;
  for (int b = 0; b < 10; ++b) {
    Tensor rgb = testutil::random_tensor({2, 3, 32, 32}, data, -2, 2);
    Tensor aux = testutil::random_tensor({2, 1, 32, 32}, data, 0, 1);
    TokenGrid x = m.backbone().embed_rgb(rgb), y = m.backbone().embed_aux(aux);
    auto [xo, yo] = s.forward(x, y, true, &drop);
    exact += (xo.data.value() == x.data.value() && yo.data.value() == y.data.value()) ? 1 : 0;
  }
  return {exact == 10, std::to_string(exact) + "/10 batches returned their input exactly"};
}

// Smallest distance of any ReLU or |.| argument from its kink. Central differences
// are only exact where no perturbation can carry an argument across zero.
double kink_margin(const CpiaStage& cpia, const DgfmWeights& dgfm, const TokenGrid& x,
                   const TokenGrid& y) {
  double margin = std::numeric_limits<double>::infinity();
  auto scan = [&](const Tensor& t) {
    for (double v : t.values()) margin = std::min(margin, std::abs(v));
  };
  Var z = generate_shared_base(x, y, cpia.cpg);
  scan(ops::add(cpia.rgb_adapter.down.tokens(x.data),
                cpia.rgb_adapter.prompt.tokens(apply_tft(z, Modality::Rgb, cpia.tft))).value());
  scan(ops::add(cpia.aux_adapter.down.tokens(y.data),
                cpia.aux_adapter.prompt.tokens(apply_tft(z, Modality::Aux, cpia.tft))).value());
  auto [xo, yo] = cpia.forward(x, y, false, nullptr);
  scan(ops::sub(reduce_channels(tokens_to_map(xo), Stream::X, dgfm),
                reduce_channels(tokens_to_map(yo), Stream::Y, dgfm)).value());
  return margin;
}

// 3. Analytic gradients of every adapter and fusion parameter.
Outcome gradient_correctness() {
  const auto t0 = Clock::now();
  RunConfig c = acceptance_config();
  const std::int64_t C = c.encoder.embed_dim;
  const double step = 1e-3;
  // A one-entry perturbation of size `step` moves any kink argument by well under
  // 5 * step at these weight and input scales.
  const double required_margin = 5.0 * step;
  Rng rng(31);
  CpiaOptions copt = c.cpia;
  copt.dropout = 0.0;
  for (int attempt = 1; attempt <= 1000; ++attempt) {
    CpiaStage cpia = CpiaStage::create(C, copt, rng);
    DgfmWeights dgfm = DgfmWeights::create(C, c.dgfm, rng);
    ParamList params;
    cpia.collect(params, "cpia");
    dgfm.collect(params, "dgfm");
    // Move every parameter off its initial value so no branch is trivially zero.
    for (auto& p : params) testutil::randomize(p.var, rng, -0.3, 0.3);
    // B = 2 on a 2 x 2 grid: 8 tokens.
    TokenGrid x{Var::constant(testutil::random_tensor({2, 2, 2, C}, rng)), Modality::Rgb};
    TokenGrid y{Var::constant(testutil::random_tensor({2, 2, 2, C}, rng)), Modality::Aux};
    Tensor w = testutil::random_tensor({2, 4, C}, rng);
    const double margin = kink_margin(cpia, dgfm, x, y);
    if (margin < required_margin) continue;
    auto r = testutil::check_gradients(params, [&] {
      auto [xo, yo] = cpia.forward(x, y, false, nullptr);
      return ops::weighted_sum(fuse_stage(xo, yo, dgfm).fused, w);
    }, step);
    const double secs = seconds_since(t0);
    const auto above = std::count_if(r.rel_errors.begin(), r.rel_errors.end(),
                                     [](double e) { return e >= 1e-4; });
    return {r.max_rel_error < 1e-4 && secs < 30.0,
            std::to_string(r.checked) + " values, " + std::to_string(above) +
                " with relative error >= 1e-4, max " + fmt(r.max_rel_error, 3) + " (" + r.worst +
                "), vector-norm relative error " + fmt(r.norm_rel_error, 3) + "; kink margin " + fmt(margin, 3) + " after " +
                std::to_string(attempt) + " draws; " + fmt(secs, 3) + " s"};
  }
  return {false, "no instance with all kink arguments at least " + fmt(required_margin) + " from zero"};
}

// 4. Fused output is a per-element convex combination; gate strictly inside (0, 1).
Outcome dgfm_convexity() {
  RunConfig c = acceptance_config();
  const std::int64_t C = c.encoder.embed_dim;
  Rng rng(41);
  std::int64_t outside = 0, gate_bad = 0, entries = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    Rng wrng(static_cast<std::uint64_t>(trial));
    DgfmWeights w = DgfmWeights::create(C, c.dgfm, wrng);
    // Spread the weights so gates span their range, including saturation.
    const double spread = trial % 4 == 0 ? 10.0 : 1.0;
    ParamList ps;
    w.collect(ps, "dgfm");
    for (auto& p : ps) testutil::randomize(p.var, wrng, -spread, spread);
    const std::int64_t h = rng.integer(1, 4), wd = rng.integer(1, 4);
    const double scale = std::pow(10.0, rng.uniform(-2, 2));
    Tensor a = testutil::random_tensor({1, h, wd, C}, rng, -scale, scale);
    Tensor b = testutil::random_tensor({1, h, wd, C}, rng, -scale, scale);
    StageBundle s = fuse_stage({Var::constant(a), Modality::Rgb}, {Var::constant(b), Modality::Aux}, w);
    const Tensor& f = s.fused.value();
    for (std::int64_t i = 0; i < f.numel(); ++i) {
      outside += (f[i] < std::min(a[i], b[i]) || f[i] > std::max(a[i], b[i])) ? 1 : 0;
    }
    for (double g : s.gate.value().values()) gate_bad += (g > 0.0 && g < 1.0) ? 0 : 1;
    entries += f.numel();
  }
  return {outside == 0 && gate_bad == 0,
          std::to_string(entries) + " fused entries, " + std::to_string(outside) +
              " outside [min, max], " + std::to_string(gate_bad) + " gate entries outside (0, 1)"};
}

// 5. Masking counts, untouched modalities and rectangle confinement.
Outcome mcrm_partition_law() {
  Rng rng(51);
  const std::array<double, 4> ratios{0.0, 0.25, 0.5, 1.0};
  MaskGeometry g;
  int count_err = 0, leak = 0;
  for (int t = 0; t < 500; ++t) {
    const std::int64_t B = rng.integer(1, 16);
    const double r = ratios[static_cast<std::size_t>(t % 4)];
    const std::int64_t H = 16, W = 16;
    MaskPlan plan = plan_masking(B, r, g, H, W, rng);
    const auto N = static_cast<std::int64_t>(std::floor(r * static_cast<double>(B)));
    if (plan.count(MaskAssignment::MaskRgb) != N / 2 || plan.count(MaskAssignment::MaskAux) != N - N / 2 ||
        plan.count(MaskAssignment::Full) != B - N) {
      ++count_err;
    }
    // Strictly positive inputs so a zero can only come from masking.
    Tensor rgb = testutil::random_tensor({B, 3, H, W}, rng, 0.1, 1.0);
    Tensor aux = testutil::random_tensor({B, 1, H, W}, rng, 0.1, 1.0);
    auto [mr, ma] = apply_masking(rgb, aux, plan);
    for (std::int64_t b = 0; b < B; ++b) {
      const auto a = plan.assignments[static_cast<std::size_t>(b)];
      auto inside = [&](std::int64_t i, std::int64_t j) {
        for (const Rect& rc : plan.regions[static_cast<std::size_t>(b)])
          if (i >= rc.top && i < rc.top + rc.height && j >= rc.left && j < rc.left + rc.width) return true;
        return false;
      };
      auto check = [&](const Tensor& src, const Tensor& dst, bool masked) {
        const std::int64_t C = src.dim(1);
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t i = 0; i < H; ++i)
            for (std::int64_t j = 0; j < W; ++j) {
              const double s = src.at({b, c, i, j}), d = dst.at({b, c, i, j});
              const bool expect_zero = masked && inside(i, j);
              if (expect_zero ? d != 0.0 : !(std::bit_cast<std::uint64_t>(s) == std::bit_cast<std::uint64_t>(d))) ++leak;
            }
      };
      check(rgb, mr, a == MaskAssignment::MaskRgb);
      check(aux, ma, a == MaskAssignment::MaskAux);
    }
  }
  return {count_err == 0 && leak == 0, "500 batches: " + std::to_string(count_err) + " count violations, " +
                                           std::to_string(leak) + " pixels differing outside the rule"};
}

// 6. Hard-pixel set and auxiliary loss.
Outcome hard_pixel_law() {
  Rng rng(61);
  const std::int32_t K = 6;
  int set_err = 0, empty_err = 0, grad_leak = 0;
  for (int t = 0; t < 100; ++t) {
    Tensor z = testutil::random_tensor({1, K, 8, 8}, rng, -2, 2);
    if (t % 10 == 0) z.at({0, 3, 1, 1}) = z.at({0, 1, 1, 1});  // exercise ties
    LabelMap y(1, 8, 8);
    for (auto& v : y.ids) v = rng.bernoulli(0.1) ? 255 : static_cast<std::int32_t>(rng.integer(0, K - 1));
    HardPixelMask omega = hard_pixel_set(z, y, 255);
    for (std::int64_t i = 0; i < 8; ++i)
      for (std::int64_t j = 0; j < 8; ++j) {
        std::int32_t best = 0;
        for (std::int32_t k = 1; k < K; ++k)
          if (z.at({0, k, i, j}) > z.at({0, best, i, j})) best = k;
        const bool hard = y.at(0, i, j) != 255 && best != y.at(0, i, j);
        set_err += omega[static_cast<std::size_t>(i * 8 + j)] != (hard ? 1 : 0);
      }
    Var zr = Var::leaf(testutil::random_tensor({1, K, 8, 8}, rng), true);
    Var za = Var::leaf(testutil::random_tensor({1, K, 8, 8}, rng), true);
    LossTerms terms = total_loss(Var::constant(z), zr, za, y, LossOptions{});
    backward(terms.total);
    for (const Var* v : {&zr, &za}) {
      if (!v->has_grad()) continue;
      for (std::int64_t k = 0; k < K; ++k)
        for (std::int64_t p = 0; p < 64; ++p)
          if (omega[static_cast<std::size_t>(p)] == 0 && v->grad()[k * 64 + p] != 0.0) ++grad_leak;
    }
    // Same instance with labels set to the prediction: the hard set is empty.
    LabelMap easy = argmax_labels(z.reshaped({K, 8, 8}));
    LossTerms e = total_loss(Var::constant(z), zr, za, easy, LossOptions{});
    empty_err += (e.breakdown.aux_rgb != 0.0 || e.breakdown.aux_aux != 0.0) ? 1 : 0;
  }
  return {set_err == 0 && empty_err == 0 && grad_leak == 0,
          "100 instances: " + std::to_string(set_err) + " mask mismatches, " + std::to_string(empty_err) +
              " non-zero losses on empty sets, " + std::to_string(grad_leak) + " gradients outside the set"};
}

// 7. Metrics against a brute-force recount.
Outcome metrics_oracle() {
  Rng rng(71);
  int count_err = 0, ratio_err = 0, identity_err = 0;
  double worst = 0.0;
  auto rel = [&](double a, double b) {
    const double r = std::abs(a - b) / std::max(std::abs(b), 1e-300);
    worst = std::max(worst, a == b ? 0.0 : r);
    return r < 1e-12 || a == b;
  };
  for (int t = 0; t < 100; ++t) {
    const std::int32_t K = static_cast<std::int32_t>(rng.integer(2, 7));
    const std::int64_t n = rng.integer(1, 400);
    std::vector<std::int32_t> gt(static_cast<std::size_t>(n)), pred(static_cast<std::size_t>(n));
    for (std::size_t i = 0; i < gt.size(); ++i) {
      gt[i] = static_cast<std::int32_t>(rng.integer(0, K - 1));
      pred[i] = rng.bernoulli(0.5) ? gt[i] : static_cast<std::int32_t>(rng.integer(0, K - 1));
    }
    ConfusionMatrix cm(K);
    cm.accumulate(pred, gt);
    std::int64_t correct = 0;
    for (std::size_t i = 0; i < gt.size(); ++i) correct += pred[i] == gt[i];
    if (cm.total() != n) ++count_err;
    if (!rel(overall_accuracy(cm), static_cast<double>(correct) / static_cast<double>(n))) ++ratio_err;
    double f1_sum = 0.0, iou_sum = 0.0;
    int present = 0;
    for (std::int32_t c = 0; c < K - 1; ++c) {
      std::int64_t tp = 0, fp = 0, fn = 0;
      for (std::size_t i = 0; i < gt.size(); ++i) {
        tp += gt[i] == c && pred[i] == c;
        fp += gt[i] != c && pred[i] == c;
        fn += gt[i] == c && pred[i] != c;
      }
      const ClassScore s = class_score(cm, c);
      if (s.tp != tp || s.fp != fp || s.fn != fn) ++count_err;
      if (tp + fp + fn == 0) continue;
      ++present;
      const double f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
      const double iou = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
      f1_sum += f1;
      iou_sum += iou;
      if (!rel(s.f1, f1) || !rel(s.iou, iou)) ++ratio_err;
      if (!rel(s.iou, s.f1 / (2.0 - s.f1))) ++identity_err;
    }
    if (present > 0) {
      if (!rel(mean_f1(cm), f1_sum / present) || !rel(mean_iou(cm), iou_sum / present)) ++ratio_err;
    }
  }
  return {count_err == 0 && ratio_err == 0 && identity_err == 0,
          "100 maps: " + std::to_string(count_err) + " count mismatches, " + std::to_string(ratio_err) +
              " ratio mismatches, " + std::to_string(identity_err) +
              " IoU = F1/(2-F1) violations; worst relative difference " + fmt(worst, 3)};
}

// 8. Trainable parameter counts across the ablation ladder.
Outcome ablation_monotonicity() {
  RunConfig c = load_config({}, {});
  std::vector<std::int64_t> counts;
  std::string detail;
  for (const auto& [name, cfg] : ablation_variants(c)) {
    counts.push_back(param_report(cfg).trainable);
    detail += (detail.empty() ? "" : " < ") + name + " " + std::to_string(counts.back());
  }
  bool increasing = counts.size() == 4;
  for (std::size_t i = 1; i < counts.size(); ++i) increasing &= counts[i] > counts[i - 1];
  return {increasing, detail};
}

// 9. MCRM reduces the RGB-only mIoU drop relative to its unmasked twin.
Outcome robustness_direction(const fs::path& workdir) {
  const auto t0 = Clock::now();
  RunConfig c = acceptance_config();
  int wins = 0;
  std::ostringstream detail;
  std::ofstream tsv(workdir / "robustness_seeds.tsv");
  tsv << "seed\tmcrm_on_drop\tmcrm_off_drop\tmcrm_on_full\tmcrm_off_full\n";
  for (std::uint64_t seed : {42u, 43u, 44u}) {
    auto rows = run_paired_robustness(c, seed);
    const double on = find_row(rows, "mcrm_on", "drop_rgb_only").miou;
    const double off = find_row(rows, "mcrm_off", "drop_rgb_only").miou;
    const double on_full = find_row(rows, "mcrm_on", "full").miou;
    const double off_full = find_row(rows, "mcrm_off", "full").miou;
    tsv << seed << '\t' << on << '\t' << off << '\t' << on_full << '\t' << off_full << '\n';
    wins += on < off ? 1 : 0;
    detail << "seed " << seed << ": drop " << fmt(on, 3) << " vs " << fmt(off, 3) << "; ";
  }
  const double secs = seconds_since(t0);
  detail << wins << "/3 seeds favour masking; " << fmt(secs, 4) << " s";
  return {wins >= 2 && secs < 1200.0, detail.str()};
}

// 10. Warmup and cosine schedule values.
Outcome schedule_reproduction() {
  ScheduleSpec s;
  s.base_lr = 3e-4;
  s.lr_min = 0.0;
  s.warmup_epochs = 5;
  s.epochs = 50;
  s.steps_per_epoch = 1000;
  const std::int64_t W = s.warmup_steps(), T = s.total_steps();
  bool ok = lr_at(0, s) == 0.0 && std::abs(lr_at(W, s) - 3e-4) <= 1e-12 && std::abs(lr_at(T, s) - s.lr_min) <= 1e-12;
  double worst = 0.0;
  for (std::int64_t t = 0; t <= T; t += 7) {
    const double want = t < W ? 3e-4 * static_cast<double>(t) / static_cast<double>(W)
                              : 0.5 * 3e-4 *
                                    (1.0 + std::cos(std::numbers::pi * static_cast<double>(t - W) /
                                                    static_cast<double>(T - W)));
    worst = std::max(worst, std::abs(lr_at(t, s) - want));
  }
  ok &= worst <= 1e-12;
  // Continuity at the warmup boundary: neighbouring steps differ by one warmup increment at most.
  const double jump = std::max(std::abs(lr_at(W, s) - lr_at(W - 1, s)), std::abs(lr_at(W + 1, s) - lr_at(W, s)));
  ok &= jump <= 3e-4 / static_cast<double>(W) + 1e-12;
  ScheduleSpec m = s;
  m.lr_min = 1e-6;
  ok &= std::abs(lr_at(m.total_steps(), m) - 1e-6) <= 1e-12;
  return {ok, "lr(0) = " + fmt(lr_at(0, s)) + ", lr(" + std::to_string(W) + ") = " + fmt(lr_at(W, s), 12) +
                  ", lr(" + std::to_string(T) + ") = " + fmt(lr_at(T, s)) + "; max deviation " + fmt(worst, 3) +
                  ", boundary step " + fmt(jump, 3)};
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string run_cli_train(const std::string& cli, const fs::path& out) {
  const std::string cmd = "\"" + cli + "\" train --config \"" +
                          (fs::path(MODALFUSE_SOURCE_DIR) / "configs" / "acceptance.json").string() +
                          "\" --seed 42 --out \"" + out.string() + "\" --schedule.epochs=2 2>/dev/null";
  FILE* pipe = popen(cmd.c_str(), "r");
  if (!pipe) return {};
  std::string text;
  std::array<char, 512> buf{};
  while (fgets(buf.data(), static_cast<int>(buf.size()), pipe)) text += buf.data();
  if (pclose(pipe) != 0) return {};
  while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) text.pop_back();
  return text;
}

// 11. Two identical training runs give byte-identical metrics.json.
Outcome determinism(const fs::path& workdir, const std::string& cli) {
  std::string a, b, how;
  if (!cli.empty()) {
    const fs::path da = run_cli_train(cli, workdir / "det_a");
    const fs::path db = run_cli_train(cli, workdir / "det_b");
    if (da.empty() || db.empty()) return {false, "train command failed"};
    a = read_file(da / "metrics.json");
    b = read_file(db / "metrics.json");
    how = "train command";
  } else {
    RunConfig c = acceptance_config();
    c.schedule.epochs = 2;
    train_to_dir(c, 42, workdir / "det_a");
    train_to_dir(c, 42, workdir / "det_b");
    a = read_file(workdir / "det_a" / "metrics.json");
    b = read_file(workdir / "det_b" / "metrics.json");
    how = "train_to_dir";
  }
  return {!a.empty() && a == b, how + ", seed 42: metrics.json " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()) + " bytes, " + (a == b ? "identical" : "different")};
}

// 12. Aux-head-free checkpoint predicts exactly what the training graph's fused branch does.
Outcome inference_purity(const fs::path& workdir) {
  RunConfig c = acceptance_config();
  Trainer t(c, 42);
  for (int i = 0; i < 5; ++i) t.train_step();
  t.save_checkpoint(workdir / "purity.ckpt");
  Checkpoint ck = read_checkpoint(workdir / "purity.ckpt");
  auto stripped = model_from_checkpoint(ck, true);
  if (stripped->aux_heads().has_value()) return {false, "aux heads still present"};
  int identical = 0;
  for (int b = 0; b < 5; ++b) {
    Batch batch = t.sample_batch();
    ForwardResult train_graph = t.model().forward(batch.rgb, batch.aux, ForwardOptions{true, nullptr, true});
    Tensor inference = stripped->predict(batch.rgb, batch.aux);
    identical += inference == train_graph.logits.value() ? 1 : 0;
  }
  const std::int64_t removed = count_params(t.model().parameters()) - count_params(stripped->parameters());
  return {identical == 5, std::to_string(identical) + "/5 batches identical; " + std::to_string(removed) +
                              " aux-head parameters dropped"};
}

}  // namespace

int main(int argc, char** argv) {
  fs::path workdir = fs::temp_directory_path() / "modalfuse_acceptance";
  std::string cli;
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--workdir" && i + 1 < argc) {
      workdir = argv[++i];
    } else if (a == "--cli" && i + 1 < argc) {
      cli = argv[++i];
    } else if (a == "--only" && i + 1 < argc) {
      std::stringstream ss(argv[++i]);
      for (std::string n; std::getline(ss, n, ',');) only.insert(std::stoi(n));
    } else {
      std::cerr << "usage: modalfuse_acceptance [--workdir DIR] [--cli PATH] [--only N,...]\n";
      return 2;
    }
  }
  fs::remove_all(workdir);
  fs::create_directories(workdir);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"frozen-backbone invariance", frozen_invariance},
      {"identity at init", identity_at_init},
      {"gradient correctness", gradient_correctness},
      {"gated-fusion convexity", dgfm_convexity},
      {"masking partition law", mcrm_partition_law},
      {"hard-pixel loss law", hard_pixel_law},
      {"metrics oracle", metrics_oracle},
      {"ablation monotonicity", ablation_monotonicity},
      {"modality-robustness direction", [&] { return robustness_direction(workdir); }},
      {"schedule reproduction", schedule_reproduction},
      {"determinism", [&] { return determinism(workdir, cli); }},
      {"inference purity", [&] { return inference_purity(workdir); }},
  };

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed")
            << std::endl;
  return failures == 0 ? 0 : 1;
}
