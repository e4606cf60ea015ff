#include "modalfuse/losses.hpp"

#include "modalfuse/errors.hpp"
#include "modalfuse/ops.hpp"

namespace modalfuse {

namespace {

void check_labels(const Tensor& logits, const LabelMap& labels, const char* where) {
  if (logits.rank() != 4 || logits.dim(0) != labels.batch || logits.dim(2) != labels.height ||
      logits.dim(3) != labels.width || labels.size() != labels.batch * labels.height * labels.width) {
    throw ShapeError(std::string(where) + ": logits " + shape_str(logits.shape()) +
                     " do not match labels [" + std::to_string(labels.batch) + ", " +
                     std::to_string(labels.height) + ", " + std::to_string(labels.width) + "]");
  }
}

}  // namespace

Var main_loss(const Var& logits, const LabelMap& labels, std::int32_t ignore_index) {
  check_labels(logits.value(), labels, "main_loss");
  return ops::cross_entropy(logits, labels.ids, ignore_index);
}

HardPixelMask hard_pixel_set(const Tensor& logits, const LabelMap& labels,
                             std::int32_t ignore_index) {
  check_labels(logits, labels, "hard_pixel_set");
  const std::int64_t B = logits.dim(0), K = logits.dim(1);
  const std::int64_t P = logits.dim(2) * logits.dim(3);
  HardPixelMask omega(static_cast<std::size_t>(B * P), 0);
  for (std::int64_t b = 0; b < B; ++b) {
    const double* z = logits.ptr() + b * K * P;
    for (std::int64_t p = 0; p < P; ++p) {
      const std::int32_t y = labels.ids[static_cast<std::size_t>(b * P + p)];
      if (y == ignore_index) continue;
      std::int64_t best = 0;
      for (std::int64_t k = 1; k < K; ++k) {
        if (z[k * P + p] > z[best * P + p]) best = k;
      }
      omega[static_cast<std::size_t>(b * P + p)] = best != y ? 1 : 0;
    }
  }
  return omega;
}

std::pair<Var, Var> aux_loss(const Var& logits_rgb, const Var& logits_aux, const LabelMap& labels,
                             const HardPixelMask& omega, std::int32_t ignore_index) {
  check_labels(logits_rgb.value(), labels, "aux_loss");
  check_labels(logits_aux.value(), labels, "aux_loss");
  return {ops::cross_entropy(logits_rgb, labels.ids, ignore_index, &omega),
          ops::cross_entropy(logits_aux, labels.ids, ignore_index, &omega)};
}

LossTerms total_loss(const Var& logits, const Var& logits_rgb, const Var& logits_aux,
                     const LabelMap& labels, const LossOptions& options) {
  if (options.lambda_aux < 0.0) throw ConfigError("loss.lambda_aux must be non-negative");
  LossTerms out;
  Var main = main_loss(logits, labels, options.ignore_index);
  out.breakdown.main = main.value()[0];
  for (auto y : labels.ids) out.breakdown.valid_pixels += y != options.ignore_index ? 1 : 0;

  if (!logits_rgb.defined() || !logits_aux.defined()) {
    out.total = main;
    out.breakdown.total = out.breakdown.main;
    return out;
  }
  const HardPixelMask omega = hard_pixel_set(logits.value(), labels, options.ignore_index);
  std::int64_t hard = 0;
  for (auto v : omega) hard += v;
  out.breakdown.hard_pixel_fraction =
      out.breakdown.valid_pixels > 0
          ? static_cast<double>(hard) / static_cast<double>(out.breakdown.valid_pixels)
          : 0.0;
  auto [l_rgb, l_aux] = aux_loss(logits_rgb, logits_aux, labels, omega, options.ignore_index);
  out.breakdown.aux_rgb = l_rgb.value()[0];
  out.breakdown.aux_aux = l_aux.value()[0];
  out.total = ops::add(main, ops::scale(ops::add(l_rgb, l_aux), options.lambda_aux));
  out.breakdown.total = out.total.value()[0];
  return out;
}

}  // namespace modalfuse
