#include "abmll/lm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <numbers>
#include <random>

#include "abmll/errors.hpp"
#include "abmll/numerics/ops.hpp"
#include "abmll/numerics/optim.hpp"

namespace abmll::lm {

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_heads == 0 || d_ff == 0 || max_context == 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                      std::to_string(n_heads));
  }
  if (d_rank == 0 || d_rank >= d_model) {
    throw ConfigError("d_rank must be in [1, d_model)");
  }
}

namespace {

Tensor gaussian(num::Shape shape, double std, std::mt19937_64& rng, bool trainable) {
  std::normal_distribution<double> normal(0.0, std);
  std::vector<double> v(num::shape_numel(shape));
  for (auto& x : v) x = normal(rng);
  return trainable ? Tensor::parameter(std::move(shape), std::move(v))
                   : Tensor::from(std::move(shape), std::move(v));
}

Tensor ones(std::size_t n) { return Tensor::full({n}, 1.0); }

template <class Fn>
BaseWeights map_tensors(const BaseWeights& w, Fn fn) {
  BaseWeights out;
  out.config = w.config;
  out.tok_emb = fn(w.tok_emb);
  out.pos_emb = fn(w.pos_emb);
  for (const auto& b : w.blocks) {
    out.blocks.push_back({fn(b.norm1), fn(b.wq), fn(b.wk), fn(b.wv), fn(b.wo), fn(b.norm2),
                          fn(b.w1), fn(b.w2)});
  }
  out.norm_f = fn(w.norm_f);
  out.head = fn(w.head);
  return out;
}

const Tensor& pick(const Tensor& base, const std::string& name, const Overrides& overrides) {
  auto it = overrides.find(name);
  if (it == overrides.end()) return base;
  if (it->second.shape() != base.shape()) {
    throw DimensionError("override " + name + " has shape " + num::shape_string(it->second.shape()) +
                         ", expected " + num::shape_string(base.shape()));
  }
  return it->second;
}

}  // namespace

BaseWeights BaseWeights::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = config.d_model;
  const double proj_std = 1.0 / std::sqrt(static_cast<double>(d));
  const double resid_std = proj_std / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(1, config.n_layers)));
  BaseWeights w;
  w.config = config;
  w.tok_emb = gaussian({config.vocab_size, d}, 0.5, rng, false);
  w.pos_emb = gaussian({config.max_context, d}, 0.1, rng, false);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    BlockWeights b;
    b.norm1 = ones(d);
    b.wq = gaussian({d, d}, proj_std, rng, false);
    b.wk = gaussian({d, d}, proj_std, rng, false);
    b.wv = gaussian({d, d}, proj_std, rng, false);
    b.wo = gaussian({d, d}, resid_std, rng, false);
    b.norm2 = ones(d);
    b.w1 = gaussian({config.d_ff, d}, proj_std, rng, false);
    b.w2 = gaussian({d, config.d_ff}, resid_std / std::sqrt(static_cast<double>(config.d_ff) / d), rng, false);
    w.blocks.push_back(std::move(b));
  }
  w.norm_f = ones(d);
  w.head = gaussian({config.vocab_size, d}, proj_std, rng, false);
  return w;
}

std::vector<std::pair<std::string, Tensor>> BaseWeights::named_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out{{"tok_emb", tok_emb}, {"pos_emb", pos_emb}};
  for (std::size_t l = 0; l < blocks.size(); ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    const auto& b = blocks[l];
    out.insert(out.end(), {{p + "norm1", b.norm1}, {p + "wq", b.wq}, {p + "wk", b.wk},
                           {p + "wv", b.wv}, {p + "wo", b.wo}, {p + "norm2", b.norm2},
                           {p + "w1", b.w1}, {p + "w2", b.w2}});
  }
  out.emplace_back("norm_f", norm_f);
  out.emplace_back("head", head);
  return out;
}

const Tensor& BaseWeights::tensor(const std::string& name) const {
  if (name == "tok_emb") return tok_emb;
  if (name == "pos_emb") return pos_emb;
  if (name == "norm_f") return norm_f;
  if (name == "head") return head;
  const std::string prefix = "blocks.";
  if (name.rfind(prefix, 0) == 0) {
    const auto dot = name.find('.', prefix.size());
    if (dot != std::string::npos) {
      const std::size_t l = std::stoul(name.substr(prefix.size(), dot - prefix.size()));
      const std::string field = name.substr(dot + 1);
      if (l < blocks.size()) {
        const auto& b = blocks[l];
        if (field == "norm1") return b.norm1;
        if (field == "wq") return b.wq;
        if (field == "wk") return b.wk;
        if (field == "wv") return b.wv;
        if (field == "wo") return b.wo;
        if (field == "norm2") return b.norm2;
        if (field == "w1") return b.w1;
        if (field == "w2") return b.w2;
      }
    }
  }
  throw ConfigError("unknown base tensor " + name);
}

BaseWeights BaseWeights::trainable_copy() const {
  return map_tensors(*this, [](const Tensor& t) { return t.clone_parameter(); });
}

BaseWeights BaseWeights::frozen_copy() const {
  return map_tensors(*this, [](const Tensor& t) { return t.detach(); });
}

std::vector<std::string> adapted_layer_names(const ModelConfig& config) {
  std::vector<std::string> names;
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    names.push_back("blocks." + std::to_string(l) + ".wq");
    names.push_back("blocks." + std::to_string(l) + ".wv");
  }
  return names;
}

Tensor forward_logits(TokenSpan tokens, const BaseWeights& weights, const Overrides& overrides) {
  const auto& cfg = weights.config;
  if (tokens.empty()) throw LengthError("forward_logits on empty token sequence");
  if (tokens.size() > cfg.max_context) {
    throw LengthError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds context " +
                      std::to_string(cfg.max_context));
  }
  for (const auto& [name, t] : overrides) weights.tensor(name);  // rejects unknown names

  using namespace num;
  std::vector<std::size_t> positions(tokens.size());
  std::iota(positions.begin(), positions.end(), std::size_t{0});
  Tensor x = add(embedding(weights.tok_emb, tokens), embedding(weights.pos_emb, positions));
  for (std::size_t l = 0; l < weights.blocks.size(); ++l) {
    const auto& b = weights.blocks[l];
    const std::string p = "blocks." + std::to_string(l) + ".";
    Tensor h = rms_norm(x, b.norm1);
    Tensor q = linear(h, pick(b.wq, p + "wq", overrides));
    Tensor k = linear(h, pick(b.wk, p + "wk", overrides));
    Tensor v = linear(h, pick(b.wv, p + "wv", overrides));
    Tensor attn = causal_attention(q, k, v, cfg.n_heads);
    x = add(x, linear(attn, pick(b.wo, p + "wo", overrides)));
    Tensor h2 = rms_norm(x, b.norm2);
    Tensor ff = gelu(linear(h2, pick(b.w1, p + "w1", overrides)));
    x = add(x, linear(ff, pick(b.w2, p + "w2", overrides)));
  }
  return linear(rms_norm(x, weights.norm_f), weights.head);
}

Tensor sequence_log_prob(TokenSpan prompt, TokenSpan continuation, const BaseWeights& weights,
                         const Overrides& overrides) {
  if (continuation.empty()) return Tensor::scalar(0.0);
  if (prompt.empty()) throw ContractError("sequence_log_prob needs a non-empty prompt");
  const std::size_t total = prompt.size() + continuation.size();
  if (total > weights.config.max_context) {
    throw LengthError("prompt + continuation of " + std::to_string(total) +
                      " tokens exceeds context " + std::to_string(weights.config.max_context));
  }
  std::vector<std::size_t> tokens(prompt.begin(), prompt.end());
  tokens.insert(tokens.end(), continuation.begin(), continuation.end());
  tokens.pop_back();  // the last token is only ever a target
  Tensor logits = forward_logits(tokens, weights, overrides);
  Tensor rows = num::slice_rows(logits, prompt.size() - 1, tokens.size());
  const double m = static_cast<double>(continuation.size());
  return num::scale(num::softmax_cross_entropy(rows, continuation), -m);
}

std::vector<double> option_scores(TokenSpan prompt, std::span<const std::vector<std::size_t>> options,
                                  const BaseWeights& weights, const Overrides& overrides) {
  if (options.size() < 2) throw ContractError("option_scores needs at least two options");
  std::vector<double> scores;
  scores.reserve(options.size());
  for (const auto& opt : options) {
    if (opt.empty()) throw ContractError("empty answer option");
    scores.push_back(sequence_log_prob(prompt, opt, weights, overrides).item() /
                     static_cast<double>(opt.size()));
  }
  return scores;
}

double stream_loss(TokenSpan corpus, const BaseWeights& weights, std::size_t window) {
  window = std::min(window, weights.config.max_context);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t start = 0; start + 1 < corpus.size(); start += window) {
    const std::size_t len = std::min(window, corpus.size() - 1 - start);
    Tensor logits = forward_logits(corpus.subspan(start, len), weights);
    total += num::softmax_cross_entropy(logits, corpus.subspan(start + 1, len)).item() *
             static_cast<double>(len);
    count += len;
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

PretrainResult pretrain_base(TokenSpan corpus, const ModelConfig& config, const PretrainConfig& train) {
  if (corpus.size() < 2) throw DataError("pretraining corpus needs at least two tokens");
  config.validate();
  for (auto t : corpus) {
    if (t >= config.vocab_size) throw DataError("corpus token " + std::to_string(t) + " out of vocabulary");
  }
  const std::size_t window = std::min({train.window, config.max_context, corpus.size() - 1});

  BaseWeights weights = BaseWeights::init(config, train.seed).trainable_copy();
  std::vector<Tensor> params;
  for (const auto& [name, t] : weights.named_tensors()) params.push_back(t);
  num::AdamState adam = num::make_adam(params, train.lr);
  std::mt19937_64 rng(train.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<std::size_t> start_dist(0, corpus.size() - 1 - window);

  PretrainResult result{weights.frozen_copy(), {}, 0.0, 0.0};
  result.initial_loss = stream_loss(corpus, result.weights, window);
  const double batch = static_cast<double>(std::max<std::size_t>(1, train.batch));
  for (std::size_t step = 0; step < train.steps; ++step) {
    // Cosine decay from lr to lr / 10.
    const double progress = static_cast<double>(step) / static_cast<double>(train.steps);
    adam.lr = train.lr * (0.55 + 0.45 * std::cos(std::numbers::pi * progress));
    num::Tape tape;
    Tensor loss = Tensor::scalar(0.0);
    for (std::size_t b = 0; b < std::max<std::size_t>(1, train.batch); ++b) {
      const std::size_t start = start_dist(rng);
      Tensor logits = forward_logits(corpus.subspan(start, window), weights);
      loss = num::add(loss, num::softmax_cross_entropy(logits, corpus.subspan(start + 1, window)));
    }
    loss = num::scale(loss, 1.0 / batch);
    tape.backward(loss);
    result.losses.push_back(loss.item());
    auto grads = num::collect_grads(params);
    num::adam_step(adam, params, grads);
  }
  result.weights = weights.frozen_copy();
  result.final_loss = stream_loss(corpus, result.weights, window);
  return result;
}

}  // namespace abmll::lm
