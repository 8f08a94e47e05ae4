#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "kore/checkpoint.hpp"
#include "kore/rng.hpp"
#include "kore/tensor.hpp"

namespace kore::toylm {

struct ToyLMConfig {
  std::size_t vocab_size = 512;  // capacity; the built vocabulary must fit
  std::size_t dim = 64;          // d_llm
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t context_length = 256;
  std::size_t placeholder_token_id = 3;

  void validate() const;
};

struct LoRAConfig {
  std::size_t rank = 4;
  double alpha = 8.0;
  double dropout = 0.2;
};

// Word-level vocabulary with the four specials at fixed ids.
class Vocabulary {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kBos = 1;
  static constexpr std::size_t kEos = 2;
  static constexpr std::size_t kPlaceholder = 3;

  static Vocabulary build(const std::vector<std::string>& lines);

  std::size_t size() const { return tokens_.size(); }
  bool contains(const std::string& token) const { return ids_.count(token) > 0; }
  std::size_t id(const std::string& token) const;
  const std::string& token(std::size_t id) const;

  // Whitespace tokenization; unknown words raise.
  std::vector<std::size_t> encode(const std::string& text) const;
  std::string decode(const std::vector<std::size_t>& ids) const;

  std::string to_json() const;
  static Vocabulary from_json(const std::string& text);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

// Low-rank adapter on one projection: effective update (alpha/r) * A * B with
// B zero-initialized, so a fresh adapter leaves the base model untouched.
struct LoRAAdapter {
  Tensor a;  // d x r
  Tensor b;  // r x d, zeros at init
  std::size_t rank = 0;
  double alpha = 0.0;
  double dropout = 0.0;
};

// Small causal transformer: frozen base weights after pretraining, LoRA on
// the query/key/value/output projections, pre-LN blocks, learned positions.
class ToyLM {
 public:
  ToyLM(const ToyLMConfig& config, const LoRAConfig& lora, Rng& rng);

  const ToyLMConfig& config() const { return config_; }

  // Token-content embeddings (no positions yet); rows of the frozen table.
  Tensor embed_tokens(const std::vector<std::size_t>& ids) const;
  const Tensor& token_embedding_table() const { return tok_emb_; }

  // Adds position rows, runs the causal stack, returns {T, vocab} logits.
  // dropout_rng enables LoRA input dropout (training only).
  Tensor forward_embeddings(const Tensor& content, Rng* dropout_rng = nullptr) const;
  Tensor forward_ids(const std::vector<std::size_t>& ids, Rng* dropout_rng = nullptr) const;

  // Greedy decoding from already-injected content embeddings; stops at EOS
  // or the budget. Ties resolve to the lowest token id.
  std::vector<std::size_t> generate(const Tensor& content, std::size_t max_new_tokens) const;

  // Base weights train only during pretraining; afterwards they freeze and
  // only the adapters remain trainable.
  void set_base_trainable(bool trainable);

  void collect_base_params(const std::string& prefix,
                           std::vector<std::pair<std::string, Tensor>>& out) const;
  void collect_lora_params(const std::string& prefix,
                           std::vector<std::pair<std::string, Tensor>>& out) const;

  void save_to(Checkpoint& ck, const std::string& prefix) const;
  void load_from(const Checkpoint& ck, const std::string& prefix);

 private:
  struct Block {
    Tensor ln1_gain, ln1_bias;
    Tensor w_q, w_k, w_v, w_o;  // dim x dim
    LoRAAdapter lora_q, lora_k, lora_v, lora_o;
    Tensor ln2_gain, ln2_bias;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;
  };

  Tensor project_with_lora(const Tensor& x, const Tensor& w, const LoRAAdapter& adapter,
                           Rng* dropout_rng) const;

  ToyLMConfig config_;
  LoRAConfig lora_config_;
  Tensor tok_emb_;  // vocab x dim
  Tensor pos_emb_;  // context x dim
  std::vector<Block> blocks_;
  Tensor lnf_gain_, lnf_bias_;
  Tensor w_out_;  // dim x vocab
};

// Mean cross-entropy over the answer span only; logits at other positions do
// not contribute. target_ids[t] is the token expected after position t.
Tensor lm_loss(const Tensor& logits, const std::vector<std::size_t>& target_ids,
               const std::vector<bool>& answer_mask);

}  // namespace kore::toylm
