#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "abmll/numerics/tensor.hpp"

namespace abmll::lm {

using num::Tensor;
using TokenSpan = std::span<const std::size_t>;

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t max_context = 64;
  std::size_t d_rank = 4;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct BlockWeights {
  Tensor norm1;  // [d_model]
  Tensor wq, wk, wv, wo;  // [d_model × d_model]
  Tensor norm2;  // [d_model]
  Tensor w1;  // [d_ff × d_model]
  Tensor w2;  // [d_model × d_ff]
};

// Pre-norm decoder-only transformer with learned absolute positions.
struct BaseWeights {
  ModelConfig config;
  Tensor tok_emb;  // [vocab × d_model]
  Tensor pos_emb;  // [max_context × d_model]
  std::vector<BlockWeights> blocks;
  Tensor norm_f;  // [d_model]
  Tensor head;  // [vocab × d_model]

  static BaseWeights init(const ModelConfig& config, std::uint64_t seed);

  // Every tensor with a stable name, in serialization order.
  std::vector<std::pair<std::string, Tensor>> named_tensors() const;
  const Tensor& tensor(const std::string& name) const;

  // Leaf copies participating in differentiation.
  BaseWeights trainable_copy() const;
  // Leaf copies detached from differentiation.
  BaseWeights frozen_copy() const;
};

// Weights replacing base matrices by name, e.g. "blocks.0.wq".
using Overrides = std::map<std::string, Tensor>;

// Query and value projections of every block.
std::vector<std::string> adapted_layer_names(const ModelConfig& config);

// Logits [n × vocab]; position t depends on tokens[0..t] only.
Tensor forward_logits(TokenSpan tokens, const BaseWeights& weights, const Overrides& overrides = {});

// Σ_t log p(continuation[t] | prompt, continuation[<t]).
Tensor sequence_log_prob(TokenSpan prompt, TokenSpan continuation, const BaseWeights& weights,
                         const Overrides& overrides = {});

// Length-normalized log-probability of each option, in option order.
std::vector<double> option_scores(TokenSpan prompt, std::span<const std::vector<std::size_t>> options,
                                  const BaseWeights& weights, const Overrides& overrides = {});

struct PretrainConfig {
  std::size_t steps = 1500;
  double lr = 3e-3;
  std::uint64_t seed = 1;
  std::size_t window = 32;
  std::size_t batch = 1;  // windows per step
};

struct PretrainResult {
  BaseWeights weights;
  std::vector<double> losses;  // training loss per step
  double initial_loss = 0.0;  // full-stream loss before training
  double final_loss = 0.0;  // full-stream loss after training
};

// Next-token training on random windows of `corpus` with Adam(0.9, 0.999, 1e-8)
// and a cosine learning-rate decay to lr / 10.
PretrainResult pretrain_base(TokenSpan corpus, const ModelConfig& config, const PretrainConfig& train);

// Mean next-token cross-entropy over consecutive windows covering `corpus`.
double stream_loss(TokenSpan corpus, const BaseWeights& weights, std::size_t window);

}  // namespace abmll::lm
