#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "kore/align.hpp"
#include "kore/checkpoint.hpp"
#include "kore/embedding.hpp"
#include "kore/eval.hpp"
#include "kore/gnn.hpp"
#include "kore/graph.hpp"
#include "kore/optim.hpp"
#include "kore/rng.hpp"
#include "kore/rvq.hpp"
#include "kore/toylm.hpp"

namespace kore::pipeline {

using nlohmann::json;

// Flat-JSON run configuration. Every key is validated on load and unknown
// keys are rejected; command-line flags override file values upstream.
struct RunConfig {
  std::uint64_t seed = 42;
  std::string data_dir = "data";
  std::string cache_dir = "cache";
  std::string embedding_table;  // empty: deterministic hash fallback

  // corpus
  std::size_t corpus_entities = 576;
  std::size_t corpus_relations = 8;
  std::size_t corpus_facts = 2400;
  double corpus_holdout = 0.15;  // val fraction and test fraction
  std::size_t corpus_max_edges = 100;
  std::size_t corpus_distractors = 3;
  double corpus_multi_answer = 0.05;
  std::size_t pretrain_frames = 3000;

  gnn::GnnConfig gnn{1, 4, 64, 64};
  rvq::RVQConfig rvq;
  std::size_t align_hidden_mult = 4;
  toylm::ToyLMConfig lm;
  toylm::LoRAConfig lora;

  // optimizer (paper values)
  double lr_lora = 1e-5;
  double lr_encoder = 5e-4;
  double weight_decay = 1e-2;
  double clip_norm = 1.0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  // schedule
  std::size_t batch_size = 8;
  std::size_t grad_accum = 2;
  std::size_t max_epochs = 40;
  double plateau_factor = 0.5;
  std::size_t plateau_patience = 1;
  std::size_t early_stop_patience = 2;
  std::string monitor = "hit10";

  // toy base pretraining (artifact plumbing, not a paper value)
  std::size_t pretrain_epochs = 6;
  double pretrain_lr = 3e-3;

  std::string sparql_endpoint;
  std::size_t sparql_budget = 100;

  static RunConfig from_json(const json& j);
  static RunConfig from_json_file(const std::string& path);
  json to_json() const;
  void validate() const;
  std::string config_hash() const;
};

// One training/evaluation item. Text fields are authoritative; token ids are
// derived through the vocabulary at load time.
struct Instance {
  std::string stage;             // "base" or "qa"
  std::string prompt_text;       // "[CTX] <KG_EMBEDDING> [Q] ... [A]"
  std::string bare_prompt_text;  // "[Q] ... [A]"
  std::string answer_text;       // object words, EOS appended on encode
  std::string object_label;
  std::vector<std::string> alt_answers;
  std::size_t graph_index = 0;
};

struct Corpus {
  toylm::Vocabulary vocab;
  std::vector<std::string> pretrain_lines;
  // keys: base_train, base_val, base_test, qa_train, qa_val, qa_test
  std::map<std::string, std::vector<Instance>> splits;
  // keys: train, val, test (graphs shared between the two stages)
  std::map<std::string, std::vector<graphio::StarGraph>> graphs;
};

// Synthetic Tri-REx-style corpus: invented two-word entity labels, pairwise
// disjoint train/val/test entity sets, answerable star graphs with
// distractor edges, and a fact-free pretraining stream that covers the whole
// lexicon and the prompt frame.
Corpus build_synthetic_corpus(const RunConfig& config);
void save_corpus(const Corpus& corpus, const std::string& dir);
Corpus load_corpus(const std::string& dir);

enum class EvalMode { kore, vanilla, textualization, lora_only };
EvalMode parse_eval_mode(const std::string& name);
std::string eval_mode_name(EvalMode mode);

// The assembled system: frozen toy LM + LoRA, graph encoder, directional
// quantizer, aligner, and the embedding provider.
class KoreModel {
 public:
  // Fresh encoder/quantizer/aligner on top of a pretrained LM checkpoint.
  KoreModel(const RunConfig& config, const toylm::Vocabulary& vocab,
            const Checkpoint& pretrained_lm);
  // Restore everything from a full checkpoint.
  explicit KoreModel(const Checkpoint& ck);

  void save(Checkpoint& ck) const;

  struct Forward {
    Tensor logits;
    Tensor lm_loss;
    Tensor rvq_loss;
    rvq::QuantizationResult quantization;
    std::size_t prompt_rows = 0;  // injected prompt length in rows
    std::vector<std::size_t> target_ids;
    std::vector<bool> answer_mask;
  };

  // Teacher-forced pass over prompt + answer (the answer defaults to the
  // instance's own). dropout_rng enables LoRA dropout for training.
  Forward forward(const Instance& instance, const graphio::StarGraph& graph, EvalMode mode,
                  Rng* dropout_rng = nullptr,
                  const std::vector<std::size_t>* answer_override = nullptr);

  eval::ScoredAnswer score_answer(const Instance& instance, const graphio::StarGraph& graph,
                                  EvalMode mode, const std::vector<std::size_t>& answer_ids);

  // Prompt token ids per mode; placeholders stay un-expanded.
  std::vector<std::size_t> prompt_ids(const Instance& instance,
                                      const graphio::StarGraph& graph, EvalMode mode) const;

  std::vector<ParamGroup> trainable_parameters(EvalMode mode) const;

  const RunConfig& config() const { return config_; }
  const toylm::Vocabulary& vocab() const { return vocab_; }
  toylm::ToyLM& lm() { return *lm_; }
  rvq::Codebook& codebook() { return *codebook_; }
  gnn::GraphEncoder& encoder() { return *encoder_; }
  align::Aligner& aligner() { return *aligner_; }
  const graphio::EmbeddingProvider& provider() const { return *provider_; }

  const graphio::FeaturizedGraph& featurized(const graphio::StarGraph& graph) const;

 private:
  void init_components(const Checkpoint* restore);

  RunConfig config_;
  toylm::Vocabulary vocab_;
  std::unique_ptr<toylm::ToyLM> lm_;
  std::unique_ptr<gnn::GraphEncoder> encoder_;
  std::unique_ptr<rvq::Codebook> codebook_;
  std::unique_ptr<align::Aligner> aligner_;
  std::unique_ptr<graphio::EmbeddingProvider> provider_;
  mutable std::map<const graphio::StarGraph*, graphio::FeaturizedGraph> feature_cache_;
};

// Plateau scheduler + early stopping on one watched metric (higher better).
// A first patience overrun halves the learning rates; if the metric still
// has not improved early_stop_patience validations later, training stops.
class PlateauController {
 public:
  PlateauController(std::size_t plateau_patience, std::size_t early_stop_patience);

  enum class Action { none, reduce, stop };
  Action observe(double metric);

  double best() const { return best_; }
  bool improved_last() const { return improved_last_; }

 private:
  std::size_t plateau_patience_;
  std::size_t early_stop_patience_;
  double best_ = -1e300;
  std::size_t bad_streak_ = 0;
  bool improved_last_ = false;
};

// Brief causal-LM pretraining of the toy backbone on the fact-free stream;
// the result is the frozen base every mode builds on.
Checkpoint pretrain_base(const RunConfig& config, const Corpus& corpus);

// Loads <data_dir>/pretrain.ckpt or runs pretraining and saves it.
Checkpoint ensure_pretrained(const RunConfig& config, const Corpus& corpus);

struct TrainResult {
  Checkpoint best;
  json history;
};

// Full two-group training of one curriculum stage ("base" or "qa"); the qa
// stage requires the base-stage checkpoint. lora_only mode trains adapters
// without any graph input.
TrainResult train_stage(const RunConfig& config, const Corpus& corpus,
                        const std::string& stage, const Checkpoint* start,
                        EvalMode mode = EvalMode::kore);

// Instance records reshaped for the rank harness; spans come from
// find_object_span against the instance's object label.
std::vector<eval::EvalInstance> to_eval_instances(const std::vector<Instance>& instances,
                                                  const toylm::Vocabulary& vocab);

std::vector<eval::RankReport> score_split(KoreModel& model,
                                          const std::vector<Instance>& instances,
                                          const std::vector<graphio::StarGraph>& graphs,
                                          EvalMode mode);

struct EvalReport {
  json document;
  std::string summary;
};

EvalReport evaluate_split(const RunConfig& config, const Corpus& corpus, KoreModel& model,
                          EvalMode mode, const std::string& stage, const std::string& split);

// vanilla/textualization evaluate the frozen base; lora_only trains first.
EvalReport run_baseline(const RunConfig& config, const Corpus& corpus, EvalMode mode,
                        const std::string& stage);

json quantize_graphs(KoreModel& model, const std::vector<graphio::StarGraph>& graphs);
json inspect_codebook(const KoreModel& model);
std::string merge_reports(const std::vector<json>& reports);

}  // namespace kore::pipeline
