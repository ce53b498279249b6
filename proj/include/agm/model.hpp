// A small post-LN transformer encoder with a sequence-classification head and
// a masked-language-model head. Both heads read the same encoder parameters.

#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "agm/autodiff.hpp"

namespace agm {

namespace special {
inline constexpr int kPad = 0;
inline constexpr int kCls = 1;
inline constexpr int kMask = 2;
inline constexpr int kUnk = 3;
inline constexpr int kCount = 4;

inline bool is_special(int id) { return id >= 0 && id < kCount; }
}  // namespace special

struct ModelConfig {
  int vocab_size = 1000;
  int max_seq_len = 64;
  int hidden_dim = 64;
  int num_layers = 2;
  int num_heads = 4;
  int ffn_dim = 128;
  double dropout = 0.1;
  int num_labels = 2;

  // Throws ConfigError on any broken invariant.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct EncoderOutput {
  ad::Var hidden_states;  // L x hidden_dim, final layer
  // 1 x hidden_dim: mean of the final hidden states over attended positions.
  // This is what the classifier and the contrastive loss consume.
  ad::Var pooled;
};

// Dropout is active only when `train` is set; it then draws from `rng`.
struct ForwardMode {
  bool train = false;
  std::mt19937_64* rng = nullptr;

  static ForwardMode eval() { return {}; }
  static ForwardMode training(std::mt19937_64& r) { return {true, &r}; }
};

struct NamedParameter {
  std::string name;
  ad::Var var;
};

class Model {
 public:
  // Parameters drawn from N(0, 0.02) with `seed`; biases zero, LayerNorm
  // gain one.
  Model(const ModelConfig& config, std::uint64_t seed);
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  // Deep copy: the clone shares no parameter storage with `this`.
  Model clone() const;

  const ModelConfig& config() const { return config_; }

  // Throws LengthError / VocabularyError / ArgumentError on bad inputs.
  void check_input(std::span<const int> tokens,
                   std::span<const std::uint8_t> attention_mask) const;

  // Token-embedding lookup only (no positions). IG interpolates on this.
  ad::Var token_embeddings(std::span<const int> tokens) const;

  EncoderOutput encode(std::span<const int> tokens,
                       std::span<const std::uint8_t> attention_mask,
                       const ForwardMode& mode = ForwardMode::eval()) const;
  // Same as encode, starting from precomputed token embeddings.
  EncoderOutput encode_embeddings(const ad::Var& token_embeddings,
                                  std::span<const std::uint8_t> attention_mask,
                                  const ForwardMode& mode) const;

  // 1 x num_labels.
  ad::Var classifier_logits(const ad::Var& pooled) const;
  ad::Var classify(std::span<const int> tokens,
                   std::span<const std::uint8_t> attention_mask,
                   const ForwardMode& mode = ForwardMode::eval()) const;
  int predict(std::span<const int> tokens,
              std::span<const std::uint8_t> attention_mask) const;

  // |rows| x vocab_size logits for the selected rows of `hidden_states`.
  ad::Var mlm_logits(const ad::Var& hidden_states,
                     std::span<const int> rows) const;
  // Argmax token per position; ties go to the lowest id; ids in `excluded`
  // never win. Eval mode, no graph.
  std::vector<int> mlm_predict(std::span<const int> tokens,
                               std::span<const std::uint8_t> attention_mask,
                               std::span<const int> excluded = {}) const;
  // As mlm_predict, restricted to `positions` (result aligned with them).
  std::vector<int> mlm_predict_at(std::span<const int> tokens,
                                  std::span<const std::uint8_t> attention_mask,
                                  std::span<const int> positions,
                                  std::span<const int> excluded = {}) const;

  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  // Views by role. Indices into parameters().
  std::vector<ad::Var> encoder_parameters() const;
  std::vector<ad::Var> classifier_parameters() const;
  std::vector<ad::Var> mlm_parameters() const;
  std::vector<ad::Var> all_parameters() const;

  const ad::Var& parameter(const std::string& name) const;

  void zero_grad();

  // Snapshot / restore of parameter values in declaration order.
  std::vector<ad::Matrix> state() const;
  void load_state(const std::vector<ad::Matrix>& values);

  // Self-describing binary archive: magic, JSON header (config + tensor
  // names and shapes), then row-major float64 payload.
  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

 private:
  Model() = default;
  ad::Var add_param(const std::string& name, int rows, int cols,
                    std::mt19937_64* init_rng, double fill);

  struct Layer {
    ad::Var wq, bq, wk, bk, wv, bv, wo, bo;
    ad::Var ln1_g, ln1_b;
    ad::Var w1, b1, w2, b2;
    ad::Var ln2_g, ln2_b;
  };

  void bind();

  ModelConfig config_;
  std::vector<NamedParameter> params_;
  ad::Var tok_emb_, pos_emb_, emb_ln_g_, emb_ln_b_;
  std::vector<Layer> layers_;
  ad::Var cls_w_, cls_b_;
  ad::Var mlm_w_, mlm_b_;
};

// Convenience: all-ones attention mask of length n.
std::vector<std::uint8_t> full_mask(std::size_t n);
// Mask that is zero exactly at PAD tokens.
std::vector<std::uint8_t> mask_from_tokens(std::span<const int> tokens);

}  // namespace agm
