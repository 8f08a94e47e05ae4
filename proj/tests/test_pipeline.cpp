#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>
#include <sstream>

#include "kore/errors.hpp"
#include "kore/ops.hpp"
#include "kore/pipeline.hpp"

using namespace kore;
using namespace kore::pipeline;

namespace {

// Small everything: fast corpus, fast training.
RunConfig tiny_config(std::uint64_t seed = 11) {
  RunConfig c;
  c.seed = seed;
  c.corpus_entities = 24;
  c.corpus_relations = 4;
  c.corpus_facts = 60;
  c.corpus_holdout = 0.2;
  c.corpus_distractors = 2;
  c.corpus_multi_answer = 0.2;
  c.pretrain_frames = 120;
  c.gnn = gnn::GnnConfig{1, 2, 16, 16};
  c.rvq.num_stages = 4;
  c.rvq.codebook_size = 16;
  c.lm.dim = 16;
  c.lm.layers = 1;
  c.lm.heads = 2;
  c.lm.context_length = 128;
  c.lm.vocab_size = 256;
  c.pretrain_epochs = 1;
  c.max_epochs = 1;
  return c;
}

struct TmpDir {
  explicit TmpDir(const std::string& name) : path(name) {
    std::filesystem::create_directories(path);
  }
  ~TmpDir() { std::filesystem::remove_all(path); }
  std::string path;
};

}  // namespace

TEST_SUITE_BEGIN("pipeline");

TEST_CASE("default config reproduces the published hyperparameters") {
  RunConfig c;
  CHECK(c.rvq.codebook_size == 128);
  CHECK(c.rvq.num_stages == 20);
  CHECK(c.rvq.n_dead == 4);
  CHECK(c.rvq.reset_threshold() == 512);
  CHECK(c.rvq.beta == doctest::Approx(0.25));
  CHECK(c.lora.rank == 4);
  CHECK(c.lora.alpha == doctest::Approx(8.0));
  CHECK(c.lora.dropout == doctest::Approx(0.2));
  CHECK(c.lr_lora == doctest::Approx(1e-5));
  CHECK(c.lr_encoder == doctest::Approx(5e-4));
  CHECK(c.weight_decay == doctest::Approx(1e-2));
  CHECK(c.clip_norm == doctest::Approx(1.0));
  CHECK(c.plateau_factor == doctest::Approx(0.5));
  CHECK(c.plateau_patience == 1);
  CHECK(c.early_stop_patience == 2);
  CHECK(c.monitor == "hit10");
  CHECK(c.batch_size == 8);
  CHECK(c.grad_accum == 2);
}

TEST_CASE("config json round trip, unknown keys, bad values") {
  RunConfig c = tiny_config();
  json j = c.to_json();
  RunConfig back = RunConfig::from_json(j);
  CHECK(back.to_json() == j);
  CHECK(back.config_hash() == c.config_hash());

  json unknown = j;
  unknown["sneaky_key"] = 1;
  CHECK_THROWS_WITH_AS(RunConfig::from_json(unknown), doctest::Contains("sneaky_key"),
                       config_error);

  json bad = j;
  bad["rvq.beta"] = -1.0;
  CHECK_THROWS_AS(RunConfig::from_json(bad), config_error);

  json bad_type = j;
  bad_type["train.batch_size"] = "eight";
  CHECK_THROWS_AS(RunConfig::from_json(bad_type), config_error);
}

TEST_CASE("synthetic corpus: disjointness, answerability, budgets, determinism") {
  RunConfig c = tiny_config();
  Corpus corpus = build_synthetic_corpus(c);

  // Split entity label sets are pairwise disjoint (subjects and objects).
  auto labels_of = [&](const std::string& split) {
    std::set<std::string> labels;
    for (const auto& g : corpus.graphs.at(split)) {
      labels.insert(g.center.label);
    }
    for (const Instance& inst : corpus.splits.at("base_" + split)) {
      labels.insert(inst.object_label);
    }
    return labels;
  };
  auto train_labels = labels_of("train");
  auto val_labels = labels_of("val");
  auto test_labels = labels_of("test");
  for (const auto& l : val_labels) CHECK(train_labels.count(l) == 0);
  for (const auto& l : test_labels) {
    CHECK(train_labels.count(l) == 0);
    CHECK(val_labels.count(l) == 0);
  }

  // Every instance's answer object sits in its star graph, and graphs stay
  // within the edge budget.
  for (const char* split : {"train", "val", "test"}) {
    const auto& graphs = corpus.graphs.at(split);
    for (const Instance& inst : corpus.splits.at(std::string("qa_") + split)) {
      const auto& g = graphs.at(inst.graph_index);
      CHECK(g.neighbors.size() <= c.corpus_max_edges);
      bool found = false;
      for (const auto& e : g.neighbors) {
        if (graphio::StarGraph::neighbor_of(e).label == inst.object_label) found = true;
      }
      CHECK(found);
    }
  }

  // Multi-answer instances exist in qa val/test with the configured fraction.
  std::size_t multi = 0;
  for (const Instance& inst : corpus.splits.at("qa_test")) {
    multi += inst.alt_answers.empty() ? 0 : 1;
  }
  CHECK(multi > 0);

  // Same seed, same corpus, bit for bit through serialization.
  TmpDir a("corpus_det_a"), b("corpus_det_b");
  save_corpus(corpus, a.path);
  save_corpus(build_synthetic_corpus(c), b.path);
  for (const auto& entry : std::filesystem::directory_iterator(a.path)) {
    const std::string name = entry.path().filename().string();
    CHECK(file_checksum(entry.path().string()) ==
          file_checksum(b.path + "/" + name));
  }
}

TEST_CASE("corpus save/load round trip") {
  RunConfig c = tiny_config();
  TmpDir tmp("corpus_io");
  Corpus corpus = build_synthetic_corpus(c);
  save_corpus(corpus, tmp.path);
  Corpus back = load_corpus(tmp.path);
  CHECK(back.vocab.size() == corpus.vocab.size());
  CHECK(back.pretrain_lines == corpus.pretrain_lines);
  for (const auto& [name, instances] : corpus.splits) {
    REQUIRE(back.splits.at(name).size() == instances.size());
    for (std::size_t i = 0; i < instances.size(); ++i) {
      CHECK(back.splits.at(name)[i].prompt_text == instances[i].prompt_text);
      CHECK(back.splits.at(name)[i].answer_text == instances[i].answer_text);
      CHECK(back.splits.at(name)[i].graph_index == instances[i].graph_index);
    }
  }
  CHECK(back.graphs.at("train").size() == corpus.graphs.at("train").size());
}

TEST_CASE("plateau controller: halve after two bad, stop two further later") {
  PlateauController ctl(1, 2);
  using A = PlateauController::Action;
  CHECK(ctl.observe(0.50) == A::none);    // first value improves on -inf
  CHECK(ctl.observe(0.48) == A::none);    // bad 1
  CHECK(ctl.observe(0.49) == A::reduce);  // bad 2 -> halve both LRs
  CHECK(ctl.observe(0.47) == A::none);    // bad 3
  CHECK(ctl.observe(0.46) == A::stop);    // bad 4 -> early stop

  // Improvement resets the streak.
  PlateauController ctl2(1, 2);
  CHECK(ctl2.observe(0.50) == A::none);
  CHECK(ctl2.observe(0.40) == A::none);
  CHECK(ctl2.observe(0.60) == A::none);  // recovery
  CHECK(ctl2.observe(0.55) == A::none);
  CHECK(ctl2.observe(0.55) == A::reduce);  // equal metric counts as non-improving
  CHECK(ctl2.best() == doctest::Approx(0.60));
}

TEST_CASE("pretrain, train one epoch, evaluate, checkpoint round trip") {
  RunConfig c = tiny_config(21);
  TmpDir tmp("pipeline_smoke");
  c.data_dir = tmp.path;
  Corpus corpus = build_synthetic_corpus(c);

  Checkpoint pretrained = ensure_pretrained(c, corpus);
  CHECK(std::filesystem::exists(tmp.path + "/pretrain.ckpt"));

  TrainResult result = train_stage(c, corpus, "base", &pretrained, EvalMode::kore);
  CHECK(result.history.size() == 1);
  CHECK(result.history[0].contains("val_hit10"));
  CHECK(result.best.has_meta("stage"));

  // Forward outputs are reproduced bit-exactly after save -> load.
  KoreModel model(result.best);
  const Instance& inst = corpus.splits.at("base_test")[0];
  const auto& graph = corpus.graphs.at("test")[inst.graph_index];
  auto before = model.forward(inst, graph, EvalMode::kore);

  const std::string path = tmp.path + "/roundtrip.ckpt";
  result.best.save(path);
  Checkpoint loaded = Checkpoint::load(path);
  KoreModel restored(loaded);
  auto after = restored.forward(inst, graph, EvalMode::kore);
  REQUIRE(before.logits.numel() == after.logits.numel());
  for (std::size_t i = 0; i < before.logits.numel(); ++i) {
    CHECK(before.logits.value()[i] == after.logits.value()[i]);
  }
  CHECK(before.rvq_loss.item() == after.rvq_loss.item());

  // Evaluation runs across all four modes on the test split.
  for (EvalMode mode : {EvalMode::kore, EvalMode::vanilla, EvalMode::textualization}) {
    EvalReport report = evaluate_split(c, corpus, model, mode, "base", "test");
    CHECK(report.document.at("hit_at_k").contains("10"));
    CHECK(report.document.at("avg_tokens").get<double>() > 0.0);
  }

  // Injection prompts cost fewer tokens than textualized ones here.
  EvalReport kore_report = evaluate_split(c, corpus, model, EvalMode::kore, "base", "test");
  EvalReport text_report =
      evaluate_split(c, corpus, model, EvalMode::textualization, "base", "test");
  CHECK(text_report.document.at("avg_tokens").get<double>() >
        kore_report.document.at("avg_tokens").get<double>());

  // quantize / inspect-codebook documents.
  json q = quantize_graphs(model, {corpus.graphs.at("test")[0]});
  REQUIRE(q.size() == 1);
  CHECK(q[0].at("indices").size() == c.rvq.num_stages);
  json cb = inspect_codebook(model);
  CHECK(cb.at("stages").size() == c.rvq.num_stages);
  CHECK(cb.at("unit_norm_error").get<double>() < 1e-9);

  // Merged comparison table mentions both configurations.
  std::string table = merge_reports({kore_report.document, text_report.document});
  CHECK(table.find("kore") != std::string::npos);
  CHECK(table.find("textualization") != std::string::npos);
}

TEST_CASE("gradient accumulation matches a single larger batch") {
  RunConfig c = tiny_config(31);
  c.corpus_facts = 24;
  c.pretrain_frames = 40;
  TmpDir tmp("accum_check");
  c.data_dir = tmp.path;
  Corpus corpus = build_synthetic_corpus(c);
  Checkpoint pretrained = ensure_pretrained(c, corpus);

  RunConfig accum = c;
  accum.batch_size = 2;
  accum.grad_accum = 2;
  RunConfig single = c;
  single.batch_size = 4;
  single.grad_accum = 1;

  TrainResult ra = train_stage(accum, corpus, "base", &pretrained, EvalMode::kore);
  TrainResult rb = train_stage(single, corpus, "base", &pretrained, EvalMode::kore);

  for (const char* name : {"gnn.layer0.w_q", "align.w1", "lm.layer0.lora_q.a"}) {
    Tensor ta = ra.best.get(name);
    Tensor tb = rb.best.get(name);
    REQUIRE(ta.numel() == tb.numel());
    for (std::size_t i = 0; i < ta.numel(); ++i) {
      CHECK(std::fabs(ta.value()[i] - tb.value()[i]) < 1e-10);
    }
  }
}

TEST_CASE("qa stage requires a base checkpoint") {
  RunConfig c = tiny_config(41);
  TmpDir tmp("qa_guard");
  c.data_dir = tmp.path;
  Corpus corpus = build_synthetic_corpus(c);
  Checkpoint pretrained = ensure_pretrained(c, corpus);
  CHECK_THROWS_AS(train_stage(c, corpus, "qa", &pretrained, EvalMode::kore), config_error);
  CHECK_THROWS_AS(train_stage(c, corpus, "base", nullptr, EvalMode::kore), config_error);
  CHECK_THROWS_AS(train_stage(c, corpus, "warmup", &pretrained, EvalMode::kore),
                  invalid_argument);
}

TEST_SUITE_END();
