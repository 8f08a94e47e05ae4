#include "kore/toylm.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <unordered_map>

#include <json.hpp>

#include "kore/errors.hpp"
#include "kore/gnn.hpp"
#include "kore/ops.hpp"

namespace kore::toylm {

using nlohmann::json;

void ToyLMConfig::validate() const {
  if (vocab_size < 5) throw config_error("toylm: vocabulary must hold the specials");
  if (dim % heads != 0) throw config_error("toylm: dim must be divisible by heads");
  if (placeholder_token_id >= vocab_size) {
    throw config_error("toylm: placeholder id outside the vocabulary");
  }
  if (context_length < 2) throw config_error("toylm: context too short");
}

Vocabulary Vocabulary::build(const std::vector<std::string>& lines) {
  Vocabulary v;
  v.tokens_ = {"<PAD>", "<BOS>", "<EOS>", "<KG_EMBEDDING>"};
  std::set<std::string> words;
  for (const std::string& line : lines) {
    std::istringstream is(line);
    std::string w;
    while (is >> w) {
      if (w == "<PAD>" || w == "<BOS>" || w == "<EOS>" || w == "<KG_EMBEDDING>") continue;
      words.insert(w);
    }
  }
  v.tokens_.insert(v.tokens_.end(), words.begin(), words.end());
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.ids_[v.tokens_[i]] = i;
  return v;
}

std::size_t Vocabulary::id(const std::string& token) const {
  auto it = ids_.find(token);
  if (it == ids_.end()) throw invalid_argument("vocabulary: unknown token '" + token + "'");
  return it->second;
}

const std::string& Vocabulary::token(std::size_t id) const {
  if (id >= tokens_.size()) throw invalid_argument("vocabulary: id out of range");
  return tokens_[id];
}

std::vector<std::size_t> Vocabulary::encode(const std::string& text) const {
  std::vector<std::size_t> out;
  std::istringstream is(text);
  std::string w;
  while (is >> w) out.push_back(id(w));
  return out;
}

std::string Vocabulary::decode(const std::vector<std::size_t>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out.push_back(' ');
    out += token(ids[i]);
  }
  return out;
}

std::string Vocabulary::to_json() const { return json{{"tokens", tokens_}}.dump(); }

Vocabulary Vocabulary::from_json(const std::string& text) {
  json j = json::parse(text);
  Vocabulary v;
  v.tokens_ = j.at("tokens").get<std::vector<std::string>>();
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.ids_[v.tokens_[i]] = i;
  if (v.tokens_.size() < 4 || v.tokens_[kPlaceholder] != "<KG_EMBEDDING>") {
    throw io_error("vocabulary: malformed specials");
  }
  return v;
}

namespace {

LoRAAdapter make_adapter(std::size_t dim, const LoRAConfig& cfg, Rng& rng) {
  LoRAAdapter a;
  a.rank = cfg.rank;
  a.alpha = cfg.alpha;
  a.dropout = cfg.dropout;
  a.a = gnn::glorot(dim, cfg.rank, rng);
  a.b = Tensor::zeros({cfg.rank, dim}, true);
  return a;
}

}  // namespace

ToyLM::ToyLM(const ToyLMConfig& config, const LoRAConfig& lora, Rng& rng)
    : config_(config), lora_config_(lora) {
  config.validate();
  const std::size_t d = config.dim;
  tok_emb_ = Tensor::zeros({config.vocab_size, d}, true);
  for (double& v : tok_emb_.value()) v = rng.normal(0.0, 0.08);
  pos_emb_ = Tensor::zeros({config.context_length, d}, true);
  for (double& v : pos_emb_.value()) v = rng.normal(0.0, 0.08);
  for (std::size_t l = 0; l < config.layers; ++l) {
    Block b;
    b.ln1_gain = Tensor::full({1, d}, 1.0, true);
    b.ln1_bias = Tensor::zeros({1, d}, true);
    b.w_q = gnn::glorot(d, d, rng);
    b.w_k = gnn::glorot(d, d, rng);
    b.w_v = gnn::glorot(d, d, rng);
    b.w_o = gnn::glorot(d, d, rng);
    b.lora_q = make_adapter(d, lora, rng);
    b.lora_k = make_adapter(d, lora, rng);
    b.lora_v = make_adapter(d, lora, rng);
    b.lora_o = make_adapter(d, lora, rng);
    b.ln2_gain = Tensor::full({1, d}, 1.0, true);
    b.ln2_bias = Tensor::zeros({1, d}, true);
    b.mlp_w1 = gnn::glorot(d, 4 * d, rng);
    b.mlp_b1 = Tensor::zeros({1, 4 * d}, true);
    b.mlp_w2 = gnn::glorot(4 * d, d, rng);
    b.mlp_b2 = Tensor::zeros({1, d}, true);
    blocks_.push_back(std::move(b));
  }
  lnf_gain_ = Tensor::full({1, d}, 1.0, true);
  lnf_bias_ = Tensor::zeros({1, d}, true);
  w_out_ = gnn::glorot(d, config.vocab_size, rng);
}

Tensor ToyLM::embed_tokens(const std::vector<std::size_t>& ids) const {
  for (std::size_t id : ids) {
    if (id >= config_.vocab_size) throw invalid_argument("toylm: token id out of range");
  }
  return gather_rows(tok_emb_, ids);
}

Tensor ToyLM::project_with_lora(const Tensor& x, const Tensor& w, const LoRAAdapter& adapter,
                                Rng* dropout_rng) const {
  Tensor out = matmul(x, w);
  Tensor adapter_in = x;
  if (dropout_rng != nullptr && adapter.dropout > 0.0) {
    adapter_in = dropout(x, adapter.dropout, *dropout_rng);
  }
  Tensor delta = matmul(matmul(adapter_in, adapter.a), adapter.b);
  return add(out, scale(delta, adapter.alpha / static_cast<double>(adapter.rank)));
}

Tensor ToyLM::forward_embeddings(const Tensor& content, Rng* dropout_rng) const {
  const std::size_t t = content.rows();
  if (t == 0) throw invalid_argument("toylm: empty sequence");
  if (t > config_.context_length) {
    throw invalid_argument("toylm: sequence length " + std::to_string(t) +
                           " overflows context " + std::to_string(config_.context_length));
  }
  const std::size_t d = config_.dim;
  const std::size_t heads = config_.heads;
  const std::size_t dh = d / heads;

  std::vector<std::size_t> pos_ids(t);
  for (std::size_t i = 0; i < t; ++i) pos_ids[i] = i;
  Tensor h = add(content, gather_rows(pos_emb_, pos_ids));

  // Additive causal mask: zero on and below the diagonal.
  Tensor causal = Tensor::zeros({t, t});
  for (std::size_t i = 0; i < t; ++i) {
    for (std::size_t j = i + 1; j < t; ++j) causal.at(i, j) = -1e30;
  }

  for (const Block& blk : blocks_) {
    Tensor a_in = layer_norm(h, blk.ln1_gain, blk.ln1_bias, 1e-5);
    Tensor q = project_with_lora(a_in, blk.w_q, blk.lora_q, dropout_rng);
    Tensor k = project_with_lora(a_in, blk.w_k, blk.lora_k, dropout_rng);
    Tensor v = project_with_lora(a_in, blk.w_v, blk.lora_v, dropout_rng);

    Tensor attn_out;
    for (std::size_t head = 0; head < heads; ++head) {
      Tensor qh = slice_cols(q, head * dh, dh);
      Tensor kh = slice_cols(k, head * dh, dh);
      Tensor vh = slice_cols(v, head * dh, dh);
      Tensor scores = add(scale(matmul(qh, transpose(kh)),
                                1.0 / std::sqrt(static_cast<double>(dh))),
                          causal);
      Tensor ctx = matmul(softmax(scores, -1), vh);

      // Output projection via row blocks of w_o / lora_o.a; summing the
      // per-head products equals projecting the concatenated heads.
      Tensor ctx_in = ctx;
      if (dropout_rng != nullptr && blk.lora_o.dropout > 0.0) {
        ctx_in = dropout(ctx, blk.lora_o.dropout, *dropout_rng);
      }
      Tensor base = matmul(ctx, slice_rows(blk.w_o, head * dh, dh));
      Tensor low = matmul(ctx_in, slice_rows(blk.lora_o.a, head * dh, dh));
      Tensor delta = scale(matmul(low, blk.lora_o.b),
                           blk.lora_o.alpha / static_cast<double>(blk.lora_o.rank));
      Tensor head_out = add(base, delta);
      attn_out = attn_out.defined() ? add(attn_out, head_out) : head_out;
    }
    h = add(h, attn_out);

    Tensor m_in = layer_norm(h, blk.ln2_gain, blk.ln2_bias, 1e-5);
    Tensor hidden = gelu(add(matmul(m_in, blk.mlp_w1), tile_rows(blk.mlp_b1, t)));
    Tensor mlp_out = add(matmul(hidden, blk.mlp_w2), tile_rows(blk.mlp_b2, t));
    h = add(h, mlp_out);
  }

  Tensor final_h = layer_norm(h, lnf_gain_, lnf_bias_, 1e-5);
  return matmul(final_h, w_out_);
}

Tensor ToyLM::forward_ids(const std::vector<std::size_t>& ids, Rng* dropout_rng) const {
  return forward_embeddings(embed_tokens(ids), dropout_rng);
}

std::vector<std::size_t> ToyLM::generate(const Tensor& content,
                                         std::size_t max_new_tokens) const {
  std::vector<std::size_t> out;
  Tensor seq = content;
  for (std::size_t step = 0; step < max_new_tokens; ++step) {
    Tensor logits = forward_embeddings(seq);
    const std::size_t last = logits.rows() - 1;
    std::size_t best = 0;
    double best_v = logits.at(last, 0);
    for (std::size_t v = 1; v < config_.vocab_size; ++v) {
      if (logits.at(last, v) > best_v) {
        best_v = logits.at(last, v);
        best = v;
      }
    }
    out.push_back(best);
    if (best == Vocabulary::kEos) break;
    seq = concat_rows({seq, embed_tokens({best})});
    if (seq.rows() >= config_.context_length) break;
  }
  return out;
}

void ToyLM::set_base_trainable(bool trainable) {
  std::vector<std::pair<std::string, Tensor>> base;
  collect_base_params("", base);
  for (auto& [name, t] : base) t.set_requires_grad(trainable);
}

void ToyLM::collect_base_params(const std::string& prefix,
                                std::vector<std::pair<std::string, Tensor>>& out) const {
  out.emplace_back(prefix + "tok_emb", tok_emb_);
  out.emplace_back(prefix + "pos_emb", pos_emb_);
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const std::string base = prefix + "layer" + std::to_string(l) + ".";
    const Block& b = blocks_[l];
    out.emplace_back(base + "ln1.gain", b.ln1_gain);
    out.emplace_back(base + "ln1.bias", b.ln1_bias);
    out.emplace_back(base + "w_q", b.w_q);
    out.emplace_back(base + "w_k", b.w_k);
    out.emplace_back(base + "w_v", b.w_v);
    out.emplace_back(base + "w_o", b.w_o);
    out.emplace_back(base + "ln2.gain", b.ln2_gain);
    out.emplace_back(base + "ln2.bias", b.ln2_bias);
    out.emplace_back(base + "mlp.w1", b.mlp_w1);
    out.emplace_back(base + "mlp.b1", b.mlp_b1);
    out.emplace_back(base + "mlp.w2", b.mlp_w2);
    out.emplace_back(base + "mlp.b2", b.mlp_b2);
  }
  out.emplace_back(prefix + "lnf.gain", lnf_gain_);
  out.emplace_back(prefix + "lnf.bias", lnf_bias_);
  out.emplace_back(prefix + "w_out", w_out_);
}

void ToyLM::collect_lora_params(const std::string& prefix,
                                std::vector<std::pair<std::string, Tensor>>& out) const {
  for (std::size_t l = 0; l < blocks_.size(); ++l) {
    const std::string base = prefix + "layer" + std::to_string(l) + ".";
    const Block& b = blocks_[l];
    out.emplace_back(base + "lora_q.a", b.lora_q.a);
    out.emplace_back(base + "lora_q.b", b.lora_q.b);
    out.emplace_back(base + "lora_k.a", b.lora_k.a);
    out.emplace_back(base + "lora_k.b", b.lora_k.b);
    out.emplace_back(base + "lora_v.a", b.lora_v.a);
    out.emplace_back(base + "lora_v.b", b.lora_v.b);
    out.emplace_back(base + "lora_o.a", b.lora_o.a);
    out.emplace_back(base + "lora_o.b", b.lora_o.b);
  }
}

void ToyLM::save_to(Checkpoint& ck, const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> params;
  collect_base_params(prefix, params);
  collect_lora_params(prefix, params);
  for (auto& [name, t] : params) ck.put(name, t);
}

void ToyLM::load_from(const Checkpoint& ck, const std::string& prefix) {
  std::vector<std::pair<std::string, Tensor>> params;
  collect_base_params(prefix, params);
  collect_lora_params(prefix, params);
  for (auto& [name, t] : params) {
    Tensor loaded = ck.get(name);
    if (loaded.shape() != t.shape()) {
      throw io_error("toylm: shape mismatch loading '" + name + "'");
    }
    t.value() = loaded.value();
  }
}

Tensor lm_loss(const Tensor& logits, const std::vector<std::size_t>& target_ids,
               const std::vector<bool>& answer_mask) {
  return masked_cross_entropy(logits, target_ids, answer_mask);
}

}  // namespace kore::toylm
