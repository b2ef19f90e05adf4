#pragma once

// Linear softmax style classifiers: scoring, cross-entropy and its gradient,
// training, macro-F1, temperature scaling and expected calibration error.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "multistyle/corpus.hpp"
#include "multistyle/error.hpp"
#include "multistyle/features.hpp"
#include "multistyle/math.hpp"
#include "multistyle/rng.hpp"

namespace multistyle {

using Logits = Vector;

struct LabeledExample {
  FeatureVector features;
  int label = 0;
};

struct DiscTrainConfig {
  double learning_rate = 4.0;
  int epochs = 40;
  int batch_size = 32;
  double l2_penalty = 1e-4;
  std::uint64_t seed = 1;
  int max_halvings = 10;
};

struct CalibrationParams {
  double temperature = 1.0;
};

struct LinearDiscriminator {
  std::string axis_name;
  int num_classes = 2;
  FeatureSpec feature_spec;
  Matrix weights;  // num_classes x feature_length
  Vector bias;
  std::optional<double> temperature;

  static LinearDiscriminator zeros(std::string axis, int classes, FeatureSpec spec) {
    detail::require(classes >= 2, "LinearDiscriminator: num_classes must be >= 2");
    LinearDiscriminator d;
    d.axis_name = std::move(axis);
    d.num_classes = classes;
    d.weights = Matrix(static_cast<std::size_t>(classes), spec.feature_length());
    d.bias.assign(static_cast<std::size_t>(classes), 0.0);
    d.feature_spec = std::move(spec);
    return d;
  }

  double calibrated_temperature() const { return temperature.value_or(1.0); }
};

// weights * fv + bias
inline Logits disc_logits(const LinearDiscriminator& d, std::span<const double> fv) {
  detail::require_dims(fv.size() == d.weights.cols, "disc_logits: feature length does not match the weights");
  Logits out = matvec(d.weights, fv);
  for (std::size_t c = 0; c < out.size(); ++c) out[c] += d.bias[c];
  return out;
}

inline Logits score_tokens(const LinearDiscriminator& d, std::span<const Token> tokens) {
  return disc_logits(d, extract(tokens, d.feature_spec));
}

inline void check_class(std::span<const double> logits, int k, const char* where) {
  if (k < 0 || static_cast<std::size_t>(k) >= logits.size()) {
    throw ValidationError(std::string(where) + ": class index " + std::to_string(k) + " is out of range");
  }
}

// -log softmax(l)_k
inline double ce_loss(std::span<const double> logits, int k) {
  check_class(logits, k, "ce_loss");
  return log_sum_exp(logits) - logits[static_cast<std::size_t>(k)];
}

// softmax(l) - onehot(k)
inline Vector ce_grad_logits(std::span<const double> logits, int k) {
  check_class(logits, k, "ce_grad_logits");
  Vector g = softmax(logits);
  g[static_cast<std::size_t>(k)] -= 1.0;
  return g;
}

// Binary axes: sigma_k >= 0.5. Multi-class axes: argmax == k.
inline bool target_satisfied(std::span<const double> logits, int k) {
  check_class(logits, k, "target_satisfied");
  if (logits.size() == 2) return softmax(logits)[static_cast<std::size_t>(k)] >= 0.5;
  return argmax(logits) == static_cast<std::size_t>(k);
}

inline int predict(std::span<const double> logits) { return static_cast<int>(argmax(logits)); }

inline std::vector<LabeledExample> make_examples(const std::vector<LabeledSequence>& corpus, const std::string& axis,
                                                 const FeatureSpec& spec) {
  std::vector<LabeledExample> out;
  out.reserve(corpus.size());
  for (const auto& seq : corpus) {
    auto it = seq.labels.find(axis);
    if (it == seq.labels.end()) throw ValidationError("make_examples: sequence has no label for axis '" + axis + "'");
    out.push_back({extract(seq.tokens, spec), it->second});
  }
  return out;
}

namespace detail {

inline double softmax_regression_loss(const Matrix& w, const Vector& b, const std::vector<LabeledExample>& data,
                                      double l2) {
  double loss = 0.0;
  for (const auto& ex : data) {
    Vector z = matvec(w, ex.features);
    for (std::size_t c = 0; c < z.size(); ++c) z[c] += b[c];
    loss += ce_loss(z, ex.label);
  }
  loss /= static_cast<double>(data.size());
  double sq = 0.0;
  for (double x : w.data) sq += x * x;
  return loss + 0.5 * l2 * sq;
}

// Mini-batch gradient descent on mean CE + (l2/2)|W|^2. An epoch that raises
// the full-set loss is undone and repeated with half the learning rate.
inline void train_softmax_regression(Matrix& w, Vector& b, const std::vector<LabeledExample>& data,
                                     const DiscTrainConfig& cfg, std::vector<double>* epoch_losses) {
  require(!data.empty(), "train: training data must be nonempty");
  require(cfg.epochs >= 1, "DiscTrainConfig: epochs must be >= 1");
  require(cfg.learning_rate > 0.0, "DiscTrainConfig: learning_rate must be > 0");
  require(cfg.batch_size >= 1, "DiscTrainConfig: batch_size must be >= 1");
  for (const auto& ex : data) {
    require_dims(ex.features.size() == w.cols, "train: feature length does not match the weights");
    require(ex.label >= 0 && static_cast<std::size_t>(ex.label) < w.rows, "train: label out of range");
  }
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  double lr = cfg.learning_rate;
  double loss = softmax_regression_loss(w, b, data, cfg.l2_penalty);
  if (epoch_losses) epoch_losses->push_back(loss);
  Matrix gw(w.rows, w.cols);
  Vector gb(b.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Matrix w_saved = w;
    const Vector b_saved = b;
    bool accepted = false;
    for (int attempt = 0; attempt <= cfg.max_halvings; ++attempt) {
      shuffle(std::span<std::size_t>(order), rng);
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
        std::fill(gw.data.begin(), gw.data.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (std::size_t i = start; i < end; ++i) {
          const auto& ex = data[order[i]];
          Vector z = matvec(w, ex.features);
          for (std::size_t c = 0; c < z.size(); ++c) z[c] += b[c];
          const Vector g = ce_grad_logits(z, ex.label);
          for (std::size_t c = 0; c < w.rows; ++c) {
            gb[c] += g[c];
            auto row = gw.row(c);
            for (std::size_t f = 0; f < w.cols; ++f) row[f] += g[c] * ex.features[f];
          }
        }
        const double inv = 1.0 / static_cast<double>(end - start);
        for (std::size_t i = 0; i < w.data.size(); ++i) w.data[i] -= lr * (gw.data[i] * inv + cfg.l2_penalty * w.data[i]);
        for (std::size_t c = 0; c < b.size(); ++c) b[c] -= lr * gb[c] * inv;
      }
      const double next = softmax_regression_loss(w, b, data, cfg.l2_penalty);
      if (next <= loss) {
        loss = next;
        accepted = true;
        break;
      }
      w = w_saved;
      b = b_saved;
      lr *= 0.5;
    }
    if (epoch_losses) epoch_losses->push_back(loss);
    if (!accepted) break;
  }
}

}  // namespace detail

inline LinearDiscriminator train_disc(LinearDiscriminator d, const std::vector<LabeledExample>& data,
                                      const DiscTrainConfig& cfg, std::vector<double>* epoch_losses = nullptr) {
  detail::require(!data.empty(), "train_disc: training data must be nonempty");
  detail::train_softmax_regression(d.weights, d.bias, data, cfg, epoch_losses);
  return d;
}

// Unweighted mean of per-class F1. A class absent from both predictions and
// gold labels contributes 0.
inline double macro_f1(std::span<const int> predicted, std::span<const int> gold, int num_classes) {
  detail::require_dims(predicted.size() == gold.size(), "macro_f1: prediction and gold lengths differ");
  detail::require(num_classes >= 1, "macro_f1: num_classes must be >= 1");
  double total = 0.0;
  for (int c = 0; c < num_classes; ++c) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) {
      const bool p = predicted[i] == c;
      const bool g = gold[i] == c;
      tp += (p && g) ? 1 : 0;
      fp += (p && !g) ? 1 : 0;
      fn += (!p && g) ? 1 : 0;
    }
    const double denom = 2 * tp + fp + fn;
    total += denom > 0 ? 2 * tp / denom : 0.0;
  }
  return total / num_classes;
}

inline double macro_f1(const LinearDiscriminator& d, const std::vector<LabeledExample>& data) {
  detail::require(!data.empty(), "macro_f1: data must be nonempty");
  std::vector<int> pred, gold;
  for (const auto& ex : data) {
    pred.push_back(predict(disc_logits(d, ex.features)));
    gold.push_back(ex.label);
  }
  return macro_f1(pred, gold, d.num_classes);
}

// Mean negative log-likelihood of softmax(logits / T).
inline double mean_nll(const LinearDiscriminator& d, const std::vector<LabeledExample>& data, double temperature) {
  detail::require(!data.empty(), "mean_nll: data must be nonempty");
  detail::require(temperature > 0.0, "mean_nll: temperature must be > 0");
  double s = 0.0;
  for (const auto& ex : data) s += ce_loss(scaled(disc_logits(d, ex.features), 1.0 / temperature), ex.label);
  return s / static_cast<double>(data.size());
}

// Temperature scaling: golden-section search for the T minimizing validation
// NLL, over log T in [log 0.05, log 20]. Never returns a T with higher NLL
// than T = 1.
inline CalibrationParams fit_temperature(const LinearDiscriminator& d, const std::vector<LabeledExample>& validation,
                                         double tolerance = 1e-4) {
  detail::require(!validation.empty(), "fit_temperature: validation set must be nonempty");
  std::vector<Logits> logits;
  std::vector<int> labels;
  for (const auto& ex : validation) {
    logits.push_back(disc_logits(d, ex.features));
    labels.push_back(ex.label);
  }
  auto nll = [&](double log_t) {
    const double inv = std::exp(-log_t);
    double s = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) s += ce_loss(scaled(logits[i], inv), labels[i]);
    return s / static_cast<double>(logits.size());
  };
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double lo = std::log(0.05), hi = std::log(20.0);
  double x1 = hi - phi * (hi - lo), x2 = lo + phi * (hi - lo);
  double f1 = nll(x1), f2 = nll(x2);
  while (hi - lo > tolerance) {
    if (f1 <= f2) {
      hi = x2;
      x2 = x1;
      f2 = f1;
      x1 = hi - phi * (hi - lo);
      f1 = nll(x1);
    } else {
      lo = x1;
      x1 = x2;
      f1 = f2;
      x2 = lo + phi * (hi - lo);
      f2 = nll(x2);
    }
  }
  const double best = 0.5 * (lo + hi);
  if (nll(best) > nll(0.0)) return {1.0};
  return {std::exp(best)};
}

// Expected calibration error with `num_bins` equal-width confidence bins on
// [0, 1]; confidence is the max softmax of logits / T.
inline double ece(const LinearDiscriminator& d, const std::vector<LabeledExample>& data, int num_bins = 10,
                  double temperature = 1.0) {
  detail::require(num_bins >= 1, "ece: num_bins must be >= 1");
  detail::require(!data.empty(), "ece: data must be nonempty");
  detail::require(temperature > 0.0, "ece: temperature must be > 0");
  std::vector<double> conf_sum(static_cast<std::size_t>(num_bins), 0.0);
  std::vector<double> acc_sum(static_cast<std::size_t>(num_bins), 0.0);
  std::vector<double> count(static_cast<std::size_t>(num_bins), 0.0);
  for (const auto& ex : data) {
    const Vector p = softmax(scaled(disc_logits(d, ex.features), 1.0 / temperature));
    const std::size_t pred = argmax(p);
    const double conf = p[pred];
    auto bin = static_cast<std::size_t>(conf * num_bins);
    if (bin >= count.size()) bin = count.size() - 1;
    conf_sum[bin] += conf;
    acc_sum[bin] += (static_cast<int>(pred) == ex.label) ? 1.0 : 0.0;
    count[bin] += 1.0;
  }
  double out = 0.0;
  const auto n = static_cast<double>(data.size());
  for (std::size_t b = 0; b < count.size(); ++b) {
    if (count[b] == 0) continue;
    out += (count[b] / n) * std::abs(acc_sum[b] / count[b] - conf_sum[b] / count[b]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json to_json(const LinearDiscriminator& d) {
  nlohmann::json j = {{"format", "multistyle.linear_discriminator"},
                      {"version", 1},
                      {"axis_name", d.axis_name},
                      {"num_classes", d.num_classes},
                      {"feature_spec", to_json(d.feature_spec)},
                      {"shape", {d.weights.rows, d.weights.cols}},
                      {"weights", d.weights.data},
                      {"bias", d.bias}};
  if (d.temperature) j["temperature"] = *d.temperature;
  return j;
}

inline LinearDiscriminator discriminator_from_json(const nlohmann::json& j) {
  detail::require(j.value("format", "") == "multistyle.linear_discriminator",
                  "discriminator checkpoint: unexpected format tag");
  detail::require(j.at("version").get<int>() == 1, "discriminator checkpoint: unsupported version");
  auto d = LinearDiscriminator::zeros(j.at("axis_name").get<std::string>(), j.at("num_classes").get<int>(),
                                      feature_spec_from_json(j.at("feature_spec")));
  auto w = j.at("weights").get<Vector>();
  auto b = j.at("bias").get<Vector>();
  detail::require_dims(w.size() == d.weights.data.size(), "discriminator checkpoint: weights size mismatch");
  detail::require_dims(b.size() == d.bias.size(), "discriminator checkpoint: bias size mismatch");
  detail::require(all_finite(w) && all_finite(b), "discriminator checkpoint: parameters must be finite");
  d.weights.data = std::move(w);
  d.bias = std::move(b);
  if (j.contains("temperature")) {
    const double t = j.at("temperature").get<double>();
    detail::require(t > 0.0, "discriminator checkpoint: temperature must be > 0");
    d.temperature = t;
  }
  return d;
}

}  // namespace multistyle
