#include <algorithm>
#include <set>

#include "kore/errors.hpp"
#include "kore/ops.hpp"
#include "kore/pipeline.hpp"

namespace kore::pipeline {

namespace {

std::string serialize_triples(const graphio::StarGraph& graph) {
  std::string out;
  for (const auto& e : graph.neighbors) {
    if (!out.empty()) out += " ";
    out += e.triple.subject.label + " " + e.triple.relation.label + " " +
           e.triple.object.label + " .";
  }
  return out;
}

}  // namespace

KoreModel::KoreModel(const RunConfig& config, const toylm::Vocabulary& vocab,
                     const Checkpoint& pretrained_lm)
    : config_(config), vocab_(vocab) {
  init_components(&pretrained_lm);
}

KoreModel::KoreModel(const Checkpoint& ck)
    : config_(RunConfig::from_json(json::parse(ck.meta("config")))),
      vocab_(toylm::Vocabulary::from_json(ck.meta("vocab"))) {
  init_components(&ck);
}

void KoreModel::init_components(const Checkpoint* restore) {
  Rng rng(config_.seed ^ 0xA11C0DEull);
  toylm::ToyLMConfig lm_cfg = config_.lm;
  lm_cfg.vocab_size = vocab_.size();
  lm_ = std::make_unique<toylm::ToyLM>(lm_cfg, config_.lora, rng);
  encoder_ = std::make_unique<gnn::GraphEncoder>(config_.gnn, rng);
  codebook_ = std::make_unique<rvq::Codebook>(config_.rvq.num_stages,
                                              config_.rvq.codebook_size,
                                              config_.gnn.summary_dim, rng);

  const bool full_restore = restore != nullptr && restore->has_meta("config");
  if (restore != nullptr) lm_->load_from(*restore, "lm.");
  lm_->set_base_trainable(false);

  // sigma_text and the mean shift come from the frozen embedding table.
  const Tensor& table = lm_->token_embedding_table();
  double sigma = align::compute_sigma_text(table);
  std::vector<double> mu(config_.lm.dim, 0.0);
  for (std::size_t r = 0; r < table.rows(); ++r) {
    for (std::size_t c = 0; c < table.cols(); ++c) mu[c] += table.at(r, c);
  }
  for (double& v : mu) v /= static_cast<double>(table.rows());

  align::AlignConfig align_cfg{config_.gnn.summary_dim, config_.lm.dim,
                               config_.align_hidden_mult};
  aligner_ = std::make_unique<align::Aligner>(align_cfg, sigma, mu, rng);

  if (config_.embedding_table.empty()) {
    provider_ = std::make_unique<graphio::EmbeddingProvider>(
        graphio::EmbeddingProvider::hash_fallback(config_.gnn.feature_dim));
  } else {
    provider_ = std::make_unique<graphio::EmbeddingProvider>(
        graphio::EmbeddingProvider::from_table_file(config_.embedding_table));
    if (provider_->dimension() != config_.gnn.feature_dim) {
      throw config_error("embedding table dimension does not match gnn.feature_dim");
    }
  }

  if (full_restore) {
    std::vector<std::pair<std::string, Tensor>> params;
    encoder_->collect_params("gnn.", params);
    aligner_->collect_params("align.", params);
    for (auto& [name, t] : params) {
      Tensor loaded = restore->get(name);
      if (loaded.shape() != t.shape()) {
        throw io_error("model: shape mismatch restoring '" + name + "'");
      }
      t.value() = loaded.value();
    }
    *codebook_ = rvq::Codebook::load_from(*restore, "rvq.");
    aligner_->set_sigma_text(restore->get("align.sigma_text").item());
  }
}

void KoreModel::save(Checkpoint& ck) const {
  ck.put_meta("config", config_.to_json().dump());
  ck.put_meta("config_hash", config_.config_hash());
  ck.put_meta("vocab", vocab_.to_json());
  lm_->save_to(ck, "lm.");
  std::vector<std::pair<std::string, Tensor>> params;
  encoder_->collect_params("gnn.", params);
  aligner_->collect_params("align.", params);
  for (auto& [name, t] : params) ck.put(name, t);
  codebook_->save_to(ck, "rvq.");
  ck.put("align.sigma_text", Tensor::scalar(aligner_->sigma_text()));
}

const graphio::FeaturizedGraph& KoreModel::featurized(const graphio::StarGraph& graph) const {
  auto it = feature_cache_.find(&graph);
  if (it == feature_cache_.end()) {
    it = feature_cache_.emplace(&graph, graphio::featurize(graph, *provider_)).first;
  }
  return it->second;
}

std::vector<std::size_t> KoreModel::prompt_ids(const Instance& instance,
                                               const graphio::StarGraph& graph,
                                               EvalMode mode) const {
  switch (mode) {
    case EvalMode::kore:
      return vocab_.encode(instance.prompt_text);
    case EvalMode::vanilla:
    case EvalMode::lora_only:
      return vocab_.encode(instance.bare_prompt_text);
    case EvalMode::textualization: {
      const std::string text = "[CTX] " + serialize_triples(graph) + " " +
                               instance.bare_prompt_text;
      std::vector<std::size_t> ids = vocab_.encode(text);
      // The serialized context plus question must still fit.
      const std::size_t budget = config_.lm.context_length - 8;
      if (ids.size() > budget) {
        // Drop whole context sentences from the front until it fits.
        std::vector<std::size_t> bare = vocab_.encode(instance.bare_prompt_text);
        while (ids.size() > budget && ids.size() > bare.size() + 1) {
          std::size_t cut = 1;
          const std::size_t period = vocab_.id(".");
          while (cut < ids.size() && ids[cut] != period) ++cut;
          ids.erase(ids.begin() + 1, ids.begin() + cut + 1);
        }
      }
      return ids;
    }
  }
  throw invalid_argument("prompt_ids: bad mode");
}

KoreModel::Forward KoreModel::forward(const Instance& instance,
                                      const graphio::StarGraph& graph, EvalMode mode,
                                      Rng* dropout_rng,
                                      const std::vector<std::size_t>* answer_override) {
  Forward out;
  std::vector<std::size_t> answer;
  if (answer_override != nullptr) {
    answer = *answer_override;
  } else {
    answer = vocab_.encode(instance.answer_text);
    answer.push_back(toylm::Vocabulary::kEos);
  }
  if (answer.empty()) throw invalid_argument("forward: empty answer");

  std::vector<std::size_t> pids = prompt_ids(instance, graph, mode);
  Tensor content = lm_->embed_tokens(pids);

  if (mode == EvalMode::kore) {
    std::vector<std::size_t> placeholders;
    for (std::size_t i = 0; i < pids.size(); ++i) {
      if (pids[i] == toylm::Vocabulary::kPlaceholder) placeholders.push_back(i);
    }
    if (placeholders.size() != 1) {
      throw invalid_argument("forward: expected one placeholder, found " +
                             std::to_string(placeholders.size()));
    }
    const graphio::FeaturizedGraph& feat = featurized(graph);
    Tensor summary = encoder_->encode(feat);
    rvq::TapeQuantization tq = rvq::quantize_on_tape(summary, *codebook_, config_.rvq);
    Tensor aligned = aligner_->align(tq.tokens);
    align::InjectionResult inj = align::inject(content, placeholders, {aligned});
    content = inj.embeddings;
    out.rvq_loss = tq.loss;
    out.quantization = std::move(tq.result);
  } else {
    out.rvq_loss = Tensor::scalar(0.0);
  }

  const std::size_t prompt_rows = content.rows();
  out.prompt_rows = prompt_rows;

  Tensor input = content;
  if (answer.size() > 1) {
    std::vector<std::size_t> fed(answer.begin(), answer.end() - 1);
    input = concat_rows({content, lm_->embed_tokens(fed)});
  }
  out.logits = lm_->forward_embeddings(input, dropout_rng);

  out.target_ids.assign(input.rows(), 0);
  out.answer_mask.assign(input.rows(), false);
  for (std::size_t i = 0; i < answer.size(); ++i) {
    out.target_ids[prompt_rows - 1 + i] = answer[i];
    out.answer_mask[prompt_rows - 1 + i] = true;
  }
  out.lm_loss = toylm::lm_loss(out.logits, out.target_ids, out.answer_mask);
  return out;
}

eval::ScoredAnswer KoreModel::score_answer(const Instance& instance,
                                           const graphio::StarGraph& graph, EvalMode mode,
                                           const std::vector<std::size_t>& answer_ids) {
  Forward fwd = forward(instance, graph, mode, nullptr, &answer_ids);
  eval::ScoredAnswer scored;
  scored.prompt_token_count = fwd.prompt_rows;
  const std::size_t v = fwd.logits.cols();
  for (std::size_t i = 0; i < answer_ids.size(); ++i) {
    const std::size_t row = fwd.prompt_rows - 1 + i;
    std::vector<double> logits(v);
    for (std::size_t c = 0; c < v; ++c) logits[c] = fwd.logits.at(row, c);
    scored.logits_per_position.push_back(std::move(logits));
  }
  return scored;
}

std::vector<ParamGroup> KoreModel::trainable_parameters(EvalMode mode) const {
  ParamGroup lora{"lora", {}, config_.lr_lora, config_.weight_decay};
  lm_->collect_lora_params("lm.", lora.params);

  std::vector<ParamGroup> groups;
  if (mode == EvalMode::lora_only) {
    groups.push_back(std::move(lora));
  } else {
    ParamGroup enc{"encoder", {}, config_.lr_encoder, config_.weight_decay};
    encoder_->collect_params("gnn.", enc.params);
    aligner_->collect_params("align.", enc.params);
    groups.push_back(std::move(lora));
    groups.push_back(std::move(enc));
  }

  std::set<const void*> seen;
  for (const ParamGroup& g : groups) {
    for (const auto& [name, t] : g.params) {
      if (!seen.insert(t.id()).second) {
        throw config_error("param groups overlap on '" + name + "'");
      }
    }
  }
  return groups;
}

}  // namespace kore::pipeline
