#include <fstream>
#include <set>

#include "kore/errors.hpp"
#include "kore/pipeline.hpp"

namespace kore::pipeline {

namespace {

// FNV-1a over the canonical JSON dump.
std::string hash_string(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char out[17];
  std::snprintf(out, sizeof(out), "%016llx", static_cast<unsigned long long>(h));
  return std::string(out);
}

template <typename T>
void read_key(const json& j, std::set<std::string>& seen, const std::string& key, T& out) {
  if (j.contains(key)) {
    seen.insert(key);
    try {
      out = j.at(key).get<T>();
    } catch (const json::exception&) {
      throw config_error("config: bad value type for '" + key + "'");
    }
  }
}

}  // namespace

json RunConfig::to_json() const {
  json j;
  j["seed"] = seed;
  j["data_dir"] = data_dir;
  j["cache_dir"] = cache_dir;
  j["embedding.table"] = embedding_table;
  j["corpus.n_entities"] = corpus_entities;
  j["corpus.n_relations"] = corpus_relations;
  j["corpus.n_facts"] = corpus_facts;
  j["corpus.holdout_fraction"] = corpus_holdout;
  j["corpus.max_edges"] = corpus_max_edges;
  j["corpus.distractors"] = corpus_distractors;
  j["corpus.multi_answer_fraction"] = corpus_multi_answer;
  j["corpus.pretrain_frames"] = pretrain_frames;
  j["gnn.layers"] = gnn.layers;
  j["gnn.heads"] = gnn.heads;
  j["gnn.feature_dim"] = gnn.feature_dim;
  j["gnn.summary_dim"] = gnn.summary_dim;
  j["rvq.codebook_size"] = rvq.codebook_size;
  j["rvq.num_stages"] = rvq.num_stages;
  j["rvq.beta"] = rvq.beta;
  j["rvq.n_dead"] = rvq.n_dead;
  j["rvq.ema_decay"] = rvq.ema_decay;
  j["rvq.reset_pool"] = rvq.reset_pool_size;
  j["align.hidden_mult"] = align_hidden_mult;
  j["lm.vocab_size"] = lm.vocab_size;
  j["lm.dim"] = lm.dim;
  j["lm.layers"] = lm.layers;
  j["lm.heads"] = lm.heads;
  j["lm.context"] = lm.context_length;
  j["lora.rank"] = lora.rank;
  j["lora.alpha"] = lora.alpha;
  j["lora.dropout"] = lora.dropout;
  j["optim.lr_lora"] = lr_lora;
  j["optim.lr_encoder"] = lr_encoder;
  j["optim.weight_decay"] = weight_decay;
  j["optim.clip_norm"] = clip_norm;
  j["optim.beta1"] = adam_beta1;
  j["optim.beta2"] = adam_beta2;
  j["optim.eps"] = adam_eps;
  j["train.batch_size"] = batch_size;
  j["train.grad_accum"] = grad_accum;
  j["train.max_epochs"] = max_epochs;
  j["train.plateau_factor"] = plateau_factor;
  j["train.plateau_patience"] = plateau_patience;
  j["train.early_stop_patience"] = early_stop_patience;
  j["train.monitor"] = monitor;
  j["pretrain.epochs"] = pretrain_epochs;
  j["pretrain.lr"] = pretrain_lr;
  j["sparql.endpoint"] = sparql_endpoint;
  j["sparql.budget"] = sparql_budget;
  return j;
}

RunConfig RunConfig::from_json(const json& j) {
  if (!j.is_object()) throw config_error("config: expected a JSON object");
  RunConfig c;
  std::set<std::string> seen;
  read_key(j, seen, "seed", c.seed);
  read_key(j, seen, "data_dir", c.data_dir);
  read_key(j, seen, "cache_dir", c.cache_dir);
  read_key(j, seen, "embedding.table", c.embedding_table);
  read_key(j, seen, "corpus.n_entities", c.corpus_entities);
  read_key(j, seen, "corpus.n_relations", c.corpus_relations);
  read_key(j, seen, "corpus.n_facts", c.corpus_facts);
  read_key(j, seen, "corpus.holdout_fraction", c.corpus_holdout);
  read_key(j, seen, "corpus.max_edges", c.corpus_max_edges);
  read_key(j, seen, "corpus.distractors", c.corpus_distractors);
  read_key(j, seen, "corpus.multi_answer_fraction", c.corpus_multi_answer);
  read_key(j, seen, "corpus.pretrain_frames", c.pretrain_frames);
  read_key(j, seen, "gnn.layers", c.gnn.layers);
  read_key(j, seen, "gnn.heads", c.gnn.heads);
  read_key(j, seen, "gnn.feature_dim", c.gnn.feature_dim);
  read_key(j, seen, "gnn.summary_dim", c.gnn.summary_dim);
  read_key(j, seen, "rvq.codebook_size", c.rvq.codebook_size);
  read_key(j, seen, "rvq.num_stages", c.rvq.num_stages);
  read_key(j, seen, "rvq.beta", c.rvq.beta);
  read_key(j, seen, "rvq.n_dead", c.rvq.n_dead);
  read_key(j, seen, "rvq.ema_decay", c.rvq.ema_decay);
  read_key(j, seen, "rvq.reset_pool", c.rvq.reset_pool_size);
  read_key(j, seen, "align.hidden_mult", c.align_hidden_mult);
  read_key(j, seen, "lm.vocab_size", c.lm.vocab_size);
  read_key(j, seen, "lm.dim", c.lm.dim);
  read_key(j, seen, "lm.layers", c.lm.layers);
  read_key(j, seen, "lm.heads", c.lm.heads);
  read_key(j, seen, "lm.context", c.lm.context_length);
  read_key(j, seen, "lora.rank", c.lora.rank);
  read_key(j, seen, "lora.alpha", c.lora.alpha);
  read_key(j, seen, "lora.dropout", c.lora.dropout);
  read_key(j, seen, "optim.lr_lora", c.lr_lora);
  read_key(j, seen, "optim.lr_encoder", c.lr_encoder);
  read_key(j, seen, "optim.weight_decay", c.weight_decay);
  read_key(j, seen, "optim.clip_norm", c.clip_norm);
  read_key(j, seen, "optim.beta1", c.adam_beta1);
  read_key(j, seen, "optim.beta2", c.adam_beta2);
  read_key(j, seen, "optim.eps", c.adam_eps);
  read_key(j, seen, "train.batch_size", c.batch_size);
  read_key(j, seen, "train.grad_accum", c.grad_accum);
  read_key(j, seen, "train.max_epochs", c.max_epochs);
  read_key(j, seen, "train.plateau_factor", c.plateau_factor);
  read_key(j, seen, "train.plateau_patience", c.plateau_patience);
  read_key(j, seen, "train.early_stop_patience", c.early_stop_patience);
  read_key(j, seen, "train.monitor", c.monitor);
  read_key(j, seen, "pretrain.epochs", c.pretrain_epochs);
  read_key(j, seen, "pretrain.lr", c.pretrain_lr);
  read_key(j, seen, "sparql.endpoint", c.sparql_endpoint);
  read_key(j, seen, "sparql.budget", c.sparql_budget);
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!seen.count(it.key())) {
      throw config_error("config: unknown key '" + it.key() + "'");
    }
  }
  c.validate();
  return c;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw io_error("config: cannot open '" + path + "'");
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw config_error("config: parse failure in '" + path + "': " + e.what());
  }
  return from_json(j);
}

void RunConfig::validate() const {
  rvq.validate();
  lm.validate();
  if (corpus_entities < 12) throw config_error("config: need at least 12 entities");
  if (corpus_relations < 2) throw config_error("config: need at least 2 relations");
  if (corpus_holdout <= 0.0 || corpus_holdout >= 0.5) {
    throw config_error("config: holdout fraction must be in (0, 0.5)");
  }
  if (corpus_max_edges < 1) throw config_error("config: max_edges must be >= 1");
  if (corpus_multi_answer < 0.0 || corpus_multi_answer > 0.5) {
    throw config_error("config: multi-answer fraction must be in [0, 0.5]");
  }
  if (gnn.summary_dim == 0 || gnn.feature_dim == 0) {
    throw config_error("config: gnn dimensions must be positive");
  }
  if (lr_lora <= 0.0 || lr_encoder <= 0.0) {
    throw config_error("config: learning rates must be positive");
  }
  if (weight_decay < 0.0) throw config_error("config: weight decay must be >= 0");
  if (clip_norm <= 0.0) throw config_error("config: clip norm must be positive");
  if (batch_size < 1 || grad_accum < 1) {
    throw config_error("config: batch size and grad accumulation must be >= 1");
  }
  if (plateau_factor <= 0.0 || plateau_factor >= 1.0) {
    throw config_error("config: plateau factor must be in (0,1)");
  }
  if (monitor != "hit10") {
    throw config_error("config: unsupported monitor metric '" + monitor + "'");
  }
  if (lora.rank < 1) throw config_error("config: lora rank must be >= 1");
  if (lora.dropout < 0.0 || lora.dropout >= 1.0) {
    throw config_error("config: lora dropout must be in [0,1)");
  }
}

std::string RunConfig::config_hash() const { return hash_string(to_json().dump()); }

EvalMode parse_eval_mode(const std::string& name) {
  if (name == "kore") return EvalMode::kore;
  if (name == "vanilla") return EvalMode::vanilla;
  if (name == "textualization") return EvalMode::textualization;
  if (name == "lora-only" || name == "lora_only") return EvalMode::lora_only;
  throw invalid_argument("unknown eval mode '" + name + "'");
}

std::string eval_mode_name(EvalMode mode) {
  switch (mode) {
    case EvalMode::kore: return "kore";
    case EvalMode::vanilla: return "vanilla";
    case EvalMode::textualization: return "textualization";
    case EvalMode::lora_only: return "lora-only";
  }
  return "?";
}

}  // namespace kore::pipeline
