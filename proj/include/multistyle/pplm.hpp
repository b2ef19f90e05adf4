#pragma once

// Multi-discriminator steered decoding over a small tanh recurrent LM.
//
// At each step the final hidden state is pushed down the gradient of
//   lambda * KL(p || p'(h)) + sum_i CE(head_i(h), k_i)
// before the next token is sampled from the perturbed distribution.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "multistyle/corpus.hpp"
#include "multistyle/discriminator.hpp"
#include "multistyle/error.hpp"
#include "multistyle/math.hpp"
#include "multistyle/rng.hpp"

namespace multistyle {

struct RecurrentLm {
  int vocab_size = 0;
  int embed_dim = 0;
  int hidden_dim = 0;
  Matrix embedding;  // vocab x E
  Matrix w_h;        // H x H
  Matrix w_x;        // H x E
  Vector b;          // H
  Matrix head;       // vocab x H
  Vector head_bias;  // vocab

  static RecurrentLm random(int vocab, int embed, int hidden, std::uint64_t seed, double scale = 0.1) {
    detail::require(vocab >= 2, "RecurrentLm: vocab_size must be >= 2");
    detail::require(hidden >= 2, "RecurrentLm: hidden_dim must be >= 2");
    detail::require(embed >= 1, "RecurrentLm: embed_dim must be >= 1");
    RecurrentLm lm;
    lm.vocab_size = vocab;
    lm.embed_dim = embed;
    lm.hidden_dim = hidden;
    const auto v = static_cast<std::size_t>(vocab), e = static_cast<std::size_t>(embed),
               h = static_cast<std::size_t>(hidden);
    lm.embedding = Matrix(v, e);
    lm.w_h = Matrix(h, h);
    lm.w_x = Matrix(h, e);
    lm.b.assign(h, 0.0);
    lm.head = Matrix(v, h);
    lm.head_bias.assign(v, 0.0);
    Rng rng(seed);
    for (Matrix* m : {&lm.embedding, &lm.w_h, &lm.w_x, &lm.head}) {
      for (double& x : m->data) x = scale * (2.0 * uniform01(rng) - 1.0);
    }
    return lm;
  }

  // Every trainable block, in a fixed order.
  std::array<Vector*, 6> blocks() { return {&embedding.data, &w_h.data, &w_x.data, &b, &head.data, &head_bias}; }
  std::array<const Vector*, 6> blocks() const {
    return {&embedding.data, &w_h.data, &w_x.data, &b, &head.data, &head_bias};
  }
};

inline void check_tokens(const RecurrentLm& lm, std::span<const Token> tokens) {
  for (Token t : tokens) {
    if (t < 0 || t >= lm.vocab_size) throw ValidationError("rnn: token " + std::to_string(t) + " is out of vocabulary");
  }
}

// h' = tanh(W_h h + W_x emb(token) + b)
inline Vector rnn_step(const RecurrentLm& lm, std::span<const double> h, Token token) {
  Vector z = matvec(lm.w_h, h);
  const Vector x = matvec(lm.w_x, lm.embedding.row(static_cast<std::size_t>(token)));
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = std::tanh(z[i] + x[i] + lm.b[i]);
  return z;
}

inline Logits output_logits(const RecurrentLm& lm, std::span<const double> h) {
  Logits z = matvec(lm.head, h);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += lm.head_bias[i];
  return z;
}

struct RnnForward {
  std::vector<Vector> hidden;  // h_1 .. h_T
  Vector next_probs;           // distribution after h_T (h_0 = 0 for an empty input)
};

inline RnnForward rnn_forward(const RecurrentLm& lm, std::span<const Token> tokens) {
  check_tokens(lm, tokens);
  RnnForward out;
  Vector h(static_cast<std::size_t>(lm.hidden_dim), 0.0);
  for (Token t : tokens) {
    h = rnn_step(lm, h, t);
    out.hidden.push_back(h);
  }
  out.next_probs = softmax(output_logits(lm, h));
  return out;
}

// Mean next-token negative log-likelihood; position t is predicted from
// h_{t-1} with h_0 = 0.
inline double rnn_sequence_loss(const RecurrentLm& lm, std::span<const Token> tokens) {
  check_tokens(lm, tokens);
  if (tokens.empty()) return 0.0;
  Vector h(static_cast<std::size_t>(lm.hidden_dim), 0.0);
  double loss = 0.0;
  for (Token t : tokens) {
    loss += ce_loss(output_logits(lm, h), t);
    h = rnn_step(lm, h, t);
  }
  return loss / static_cast<double>(tokens.size());
}

inline double rnn_corpus_loss(const RecurrentLm& lm, const std::vector<LabeledSequence>& corpus) {
  double loss = 0.0, n = 0.0;
  for (const auto& s : corpus) {
    loss += rnn_sequence_loss(lm, s.tokens) * static_cast<double>(s.tokens.size());
    n += static_cast<double>(s.tokens.size());
  }
  return n > 0 ? loss / n : 0.0;
}

inline double rnn_perplexity(const RecurrentLm& lm, const std::vector<LabeledSequence>& corpus) {
  return std::exp(rnn_corpus_loss(lm, corpus));
}

// Accumulates `scale` times the gradient of rnn_sequence_loss into `grad`
// (same block layout as RecurrentLm::blocks). Backpropagation runs through
// at most `truncation` steps.
inline void rnn_accumulate_gradient(const RecurrentLm& lm, std::span<const Token> tokens, double scale,
                                    std::array<Vector, 6>& grad, int truncation = 1 << 30) {
  check_tokens(lm, tokens);
  const std::size_t T = tokens.size();
  if (T == 0) return;
  const auto H = static_cast<std::size_t>(lm.hidden_dim), E = static_cast<std::size_t>(lm.embed_dim),
             V = static_cast<std::size_t>(lm.vocab_size);
  auto& g_emb = grad[0];
  auto& g_wh = grad[1];
  auto& g_wx = grad[2];
  auto& g_b = grad[3];
  auto& g_head = grad[4];
  auto& g_hb = grad[5];
  std::vector<Vector> hs(T + 1, Vector(H, 0.0));
  for (std::size_t t = 0; t < T; ++t) hs[t + 1] = rnn_step(lm, hs[t], tokens[t]);
  const double inv = scale / static_cast<double>(T);
  // dh[t] = dLoss/dh_t from the output heads.
  std::vector<Vector> dh(T + 1, Vector(H, 0.0));
  for (std::size_t t = 0; t < T; ++t) {
    Vector dz = ce_grad_logits(output_logits(lm, hs[t]), tokens[t]);
    for (std::size_t v = 0; v < V; ++v) {
      const double d = dz[v] * inv;
      if (d == 0.0) continue;
      g_hb[v] += d;
      for (std::size_t i = 0; i < H; ++i) {
        g_head[v * H + i] += d * hs[t][i];
        dh[t][i] += d * lm.head(v, i);
      }
    }
  }
  // Backward through the recurrence; h_t = tanh(W_h h_{t-1} + W_x e(x_t) + b).
  Vector carry(H, 0.0);
  const std::size_t stop = T > static_cast<std::size_t>(truncation) ? T - static_cast<std::size_t>(truncation) : 0;
  for (std::size_t t = T; t >= 1 && t > stop; --t) {
    Vector dz(H);
    for (std::size_t i = 0; i < H; ++i) {
      const double total = dh[t][i] + carry[i];
      dz[i] = total * (1.0 - hs[t][i] * hs[t][i]);
    }
    const auto tok = static_cast<std::size_t>(tokens[t - 1]);
    Vector next_carry(H, 0.0);
    for (std::size_t i = 0; i < H; ++i) {
      if (dz[i] == 0.0) continue;
      g_b[i] += dz[i];
      for (std::size_t j = 0; j < H; ++j) {
        g_wh[i * H + j] += dz[i] * hs[t - 1][j];
        next_carry[j] += lm.w_h(i, j) * dz[i];
      }
      for (std::size_t e = 0; e < E; ++e) {
        g_wx[i * E + e] += dz[i] * lm.embedding(tok, e);
        g_emb[tok * E + e] += lm.w_x(i, e) * dz[i];
      }
    }
    carry = std::move(next_carry);
  }
}

struct RnnTrainConfig {
  double learning_rate = 0.01;  // Adam
  int epochs = 12;
  int batch_size = 16;
  int truncation = 64;
  int max_halvings = 10;
  std::uint64_t seed = 1;
};

// Mini-batch Adam on mean next-token NLL. An epoch that raises the training
// loss is undone and repeated at half the learning rate.
inline RecurrentLm train_rnn(RecurrentLm lm, const std::vector<LabeledSequence>& corpus, const RnnTrainConfig& cfg,
                             std::vector<double>* epoch_losses = nullptr) {
  detail::require(!corpus.empty(), "train_rnn: corpus must be nonempty");
  detail::require(cfg.epochs >= 1, "train_rnn: epochs must be >= 1");
  detail::require(cfg.learning_rate > 0.0, "train_rnn: learning_rate must be > 0");
  Rng rng(cfg.seed);
  std::vector<std::size_t> order(corpus.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::array<Adam, 6> adam;
  double lr = cfg.learning_rate;
  double loss = rnn_corpus_loss(lm, corpus);
  if (epoch_losses) epoch_losses->push_back(loss);
  std::array<Vector, 6> grad;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const RecurrentLm saved = lm;
    const auto saved_adam = adam;
    bool accepted = false;
    for (int attempt = 0; attempt <= cfg.max_halvings; ++attempt) {
      for (auto& a : adam) a.learning_rate = lr;
      shuffle(std::span<std::size_t>(order), rng);
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
        auto blocks = lm.blocks();
        for (std::size_t k = 0; k < grad.size(); ++k) grad[k].assign(blocks[k]->size(), 0.0);
        const double scale = 1.0 / static_cast<double>(end - start);
        for (std::size_t i = start; i < end; ++i) {
          rnn_accumulate_gradient(lm, corpus[order[i]].tokens, scale, grad, cfg.truncation);
        }
        for (std::size_t k = 0; k < grad.size(); ++k) adam[k].step(*blocks[k], grad[k]);
      }
      const double next = rnn_corpus_loss(lm, corpus);
      if (next <= loss) {
        loss = next;
        accepted = true;
        break;
      }
      lm = saved;
      adam = saved_adam;
      lr *= 0.5;
    }
    if (epoch_losses) epoch_losses->push_back(loss);
    if (!accepted) break;
  }
  return lm;
}

// Linear softmax head over mean-pooled hidden states.
struct HeadDiscriminator {
  std::string axis_name;
  int num_classes = 2;
  Matrix weights;  // num_classes x H
  Vector bias;
};

inline Vector pooled_hidden(const RecurrentLm& lm, std::span<const Token> tokens) {
  const auto fwd = rnn_forward(lm, tokens);
  Vector out(static_cast<std::size_t>(lm.hidden_dim), 0.0);
  if (fwd.hidden.empty()) return out;
  for (const auto& h : fwd.hidden)
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += h[i];
  for (double& x : out) x /= static_cast<double>(fwd.hidden.size());
  return out;
}

inline Logits head_logits(const HeadDiscriminator& head, std::span<const double> h) {
  Logits z = matvec(head.weights, h);
  for (std::size_t c = 0; c < z.size(); ++c) z[c] += head.bias[c];
  return z;
}

inline std::vector<LabeledExample> pooled_examples(const RecurrentLm& lm, const std::vector<LabeledSequence>& corpus,
                                                   const std::string& axis) {
  std::vector<LabeledExample> out;
  for (const auto& s : corpus) {
    auto it = s.labels.find(axis);
    if (it == s.labels.end()) throw ValidationError("pooled_examples: sequence has no label for axis '" + axis + "'");
    out.push_back({pooled_hidden(lm, s.tokens), it->second});
  }
  return out;
}

inline HeadDiscriminator train_head(const RecurrentLm& lm, const std::vector<LabeledSequence>& corpus,
                                    const std::string& axis, int num_classes, const DiscTrainConfig& cfg) {
  detail::require(!corpus.empty(), "train_head: data must be nonempty");
  HeadDiscriminator head{axis, num_classes, Matrix(static_cast<std::size_t>(num_classes),
                                                   static_cast<std::size_t>(lm.hidden_dim)),
                         Vector(static_cast<std::size_t>(num_classes), 0.0)};
  detail::train_softmax_regression(head.weights, head.bias, pooled_examples(lm, corpus, axis), cfg, nullptr);
  return head;
}

inline double head_macro_f1(const RecurrentLm& lm, const HeadDiscriminator& head,
                            const std::vector<LabeledSequence>& corpus) {
  std::vector<int> pred, gold;
  for (const auto& ex : pooled_examples(lm, corpus, head.axis_name)) {
    pred.push_back(predict(head_logits(head, ex.features)));
    gold.push_back(ex.label);
  }
  return macro_f1(pred, gold, head.num_classes);
}

struct PplmConfig {
  double kl_coef = 0.01;
  double step_size = 0.02;
  int steps_per_token = 3;
  double max_grad_norm = 1.0;
  std::uint64_t seed = 1;
};

inline void validate(const PplmConfig& c) {
  detail::require(c.kl_coef >= 0.0, "PplmConfig: kl_coef must be >= 0");
  detail::require(c.step_size >= 0.0, "PplmConfig: step_size must be >= 0");
  detail::require(c.steps_per_token >= 0, "PplmConfig: steps_per_token must be >= 0");
  detail::require(c.max_grad_norm > 0.0, "PplmConfig: max_grad_norm must be > 0");
}

// KL(p || q) over the vocabulary; terms with p = 0 contribute 0.
inline double kl_divergence(std::span<const double> p, std::span<const double> q) {
  detail::require_dims(p.size() == q.size(), "kl_divergence: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) s += p[i] * (std::log(p[i]) - std::log(q[i]));
  return s;
}

inline double total_variation(std::span<const double> p, std::span<const double> q) {
  detail::require_dims(p.size() == q.size(), "total_variation: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

namespace detail {
inline void check_heads(const RecurrentLm& lm, std::span<const HeadDiscriminator> heads,
                        std::span<const StyleTarget> targets) {
  require_dims(heads.size() == targets.size(), "pplm: need one head per target");
  for (std::size_t i = 0; i < heads.size(); ++i) {
    require_dims(heads[i].weights.cols == static_cast<std::size_t>(lm.hidden_dim), "pplm: head width mismatch");
    require(targets[i].target_class >= 0 && targets[i].target_class < heads[i].num_classes,
            "pplm: target class out of range");
  }
}
}  // namespace detail

// lambda KL(p || softmax(head(h))) + sum_i CE(head_i(h), k_i)
inline double pplm_loss(const RecurrentLm& lm, std::span<const double> h, std::span<const HeadDiscriminator> heads,
                        std::span<const StyleTarget> targets, std::span<const double> p, const PplmConfig& cfg) {
  detail::check_heads(lm, heads, targets);
  double loss = cfg.kl_coef * kl_divergence(p, softmax(output_logits(lm, h)));
  for (std::size_t i = 0; i < heads.size(); ++i) loss += ce_loss(head_logits(heads[i], h), targets[i].target_class);
  return loss;
}

// Analytic gradient of pplm_loss w.r.t. h:
// lambda * O^T (p' - p) + sum_i W_i^T (softmax(head_i(h)) - onehot(k_i)).
inline Vector pplm_gradient(const RecurrentLm& lm, std::span<const double> h, std::span<const HeadDiscriminator> heads,
                            std::span<const StyleTarget> targets, std::span<const double> p, const PplmConfig& cfg) {
  detail::check_heads(lm, heads, targets);
  Vector diff = softmax(output_logits(lm, h));
  detail::require_dims(diff.size() == p.size(), "pplm_gradient: distribution length mismatch");
  for (std::size_t i = 0; i < diff.size(); ++i) diff[i] = cfg.kl_coef * (diff[i] - p[i]);
  Vector g = matvec_transposed(lm.head, diff);
  for (std::size_t i = 0; i < heads.size(); ++i) {
    const Vector gi = matvec_transposed(heads[i].weights, ce_grad_logits(head_logits(heads[i], h), targets[i].target_class));
    for (std::size_t j = 0; j < g.size(); ++j) g[j] += gi[j];
  }
  return g;
}

// h' = h - eta * g / max(1, |g| / max_grad_norm)
inline Vector steer_step(const RecurrentLm& lm, std::span<const double> h, std::span<const HeadDiscriminator> heads,
                         std::span<const StyleTarget> targets, std::span<const double> p, const PplmConfig& cfg) {
  validate(cfg);
  Vector out(h.begin(), h.end());
  if (cfg.step_size == 0.0) return out;
  const Vector g = pplm_gradient(lm, h, heads, targets, p, cfg);
  const double scale = cfg.step_size / std::max(1.0, l2_norm(g) / cfg.max_grad_norm);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= scale * g[i];
  return out;
}

struct PplmTrace {
  TokenSeq tokens;                    // generated tokens only
  std::vector<double> tv_distances;   // per step, steered vs unsteered
};

// Per generated token: run the recurrence, apply steps_per_token steer steps
// to the final hidden state, sample from the perturbed distribution. The
// recurrence itself continues from the unperturbed state.
inline PplmTrace pplm_decode_trace(const RecurrentLm& lm, std::span<const HeadDiscriminator> heads,
                                   std::span<const StyleTarget> targets, std::span<const Token> prompt, int max_len,
                                   const PplmConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  detail::check_heads(lm, heads, targets);
  check_tokens(lm, prompt);
  detail::require(max_len >= 1, "pplm_decode: max_len must be >= 1");
  Rng rng(seed);
  Vector h(static_cast<std::size_t>(lm.hidden_dim), 0.0);
  for (Token t : prompt) h = rnn_step(lm, h, t);
  PplmTrace out;
  for (int step = 0; step < max_len; ++step) {
    const Vector p = softmax(output_logits(lm, h));
    Vector steered = h;
    for (int m = 0; m < cfg.steps_per_token; ++m) steered = steer_step(lm, steered, heads, targets, p, cfg);
    const Vector q = cfg.steps_per_token == 0 ? p : softmax(output_logits(lm, steered));
    out.tv_distances.push_back(total_variation(p, q));
    const auto a = static_cast<Token>(sample_categorical(q, uniform01(rng)));
    out.tokens.push_back(a);
    h = rnn_step(lm, h, a);
  }
  return out;
}

inline TokenSeq pplm_decode(const RecurrentLm& lm, std::span<const HeadDiscriminator> heads,
                            std::span<const StyleTarget> targets, std::span<const Token> prompt, int max_len,
                            const PplmConfig& cfg, std::uint64_t seed) {
  return pplm_decode_trace(lm, heads, targets, prompt, max_len, cfg, seed).tokens;
}

// ---------------------------------------------------------------------------
// Checkpoints

inline nlohmann::json to_json(const RecurrentLm& lm) {
  return {{"format", "multistyle.recurrent_lm"},
          {"version", 1},
          {"shape", {{"vocab_size", lm.vocab_size}, {"embed_dim", lm.embed_dim}, {"hidden_dim", lm.hidden_dim}}},
          {"embedding", lm.embedding.data},
          {"w_h", lm.w_h.data},
          {"w_x", lm.w_x.data},
          {"b", lm.b},
          {"head", lm.head.data},
          {"head_bias", lm.head_bias}};
}

inline RecurrentLm recurrent_lm_from_json(const nlohmann::json& j) {
  detail::require(j.value("format", "") == "multistyle.recurrent_lm", "rnn checkpoint: unexpected format tag");
  const auto& s = j.at("shape");
  auto lm = RecurrentLm::random(s.at("vocab_size").get<int>(), s.at("embed_dim").get<int>(),
                                s.at("hidden_dim").get<int>(), 0, 0.0);
  const char* names[] = {"embedding", "w_h", "w_x", "b", "head", "head_bias"};
  auto blocks = lm.blocks();
  for (std::size_t k = 0; k < blocks.size(); ++k) {
    auto v = j.at(names[k]).get<Vector>();
    detail::require_dims(v.size() == blocks[k]->size(), std::string("rnn checkpoint: size mismatch in ") + names[k]);
    *blocks[k] = std::move(v);
  }
  return lm;
}

inline nlohmann::json to_json(const HeadDiscriminator& h) {
  return {{"format", "multistyle.head_discriminator"},
          {"version", 1},
          {"axis_name", h.axis_name},
          {"num_classes", h.num_classes},
          {"shape", {h.weights.rows, h.weights.cols}},
          {"weights", h.weights.data},
          {"bias", h.bias}};
}

inline HeadDiscriminator head_from_json(const nlohmann::json& j) {
  detail::require(j.value("format", "") == "multistyle.head_discriminator", "head checkpoint: unexpected format tag");
  HeadDiscriminator h;
  h.axis_name = j.at("axis_name").get<std::string>();
  h.num_classes = j.at("num_classes").get<int>();
  const auto shape = j.at("shape").get<std::vector<std::size_t>>();
  detail::require_dims(shape.size() == 2, "head checkpoint: bad shape");
  h.weights = Matrix(shape[0], shape[1]);
  h.weights.data = j.at("weights").get<Vector>();
  h.bias = j.at("bias").get<Vector>();
  detail::require_dims(h.weights.data.size() == shape[0] * shape[1] && h.bias.size() == shape[0],
                       "head checkpoint: size mismatch");
  return h;
}

}  // namespace multistyle
