#include <algorithm>
#include <cstdio>
#include <sstream>

#include "kore/errors.hpp"
#include "kore/pipeline.hpp"

namespace kore::pipeline {

std::vector<eval::EvalInstance> to_eval_instances(const std::vector<Instance>& instances,
                                                  const toylm::Vocabulary& vocab) {
  std::vector<eval::EvalInstance> out;
  out.reserve(instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) {
    const Instance& inst = instances[i];
    eval::EvalInstance e;
    e.query_text = inst.bare_prompt_text;
    e.answer_ids = vocab.encode(inst.answer_text);
    e.answer_ids.push_back(toylm::Vocabulary::kEos);
    bool fallback = false;
    e.object_span = eval::find_object_span(e.answer_ids, inst.object_label, vocab, &fallback);
    e.span_fallback = fallback;
    for (const std::string& alt : inst.alt_answers) {
      eval::EvalInstance::Alternative a;
      a.answer_ids = vocab.encode(alt);
      a.answer_ids.push_back(toylm::Vocabulary::kEos);
      bool alt_fallback = false;
      a.object_span = eval::find_object_span(a.answer_ids, alt, vocab, &alt_fallback);
      e.alternatives.push_back(std::move(a));
    }
    e.graph_index = i;  // positional link back to the instance list
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<eval::RankReport> score_split(KoreModel& model,
                                          const std::vector<Instance>& instances,
                                          const std::vector<graphio::StarGraph>& graphs,
                                          EvalMode mode) {
  std::vector<eval::EvalInstance> eval_instances = to_eval_instances(instances,
                                                                     model.vocab());
  eval::TeacherForcedScorer scorer =
      [&](const eval::EvalInstance& e, const std::vector<std::size_t>& answer_ids) {
        const Instance& inst = instances[e.graph_index];
        return model.score_answer(inst, graphs.at(inst.graph_index), mode, answer_ids);
      };
  return eval::evaluate_instances(eval_instances, scorer);
}

EvalReport evaluate_split(const RunConfig& config, const Corpus& corpus, KoreModel& model,
                          EvalMode mode, const std::string& stage, const std::string& split) {
  const auto& instances = corpus.splits.at(stage + "_" + split);
  const auto& graphs = corpus.graphs.at(split);
  std::vector<eval::RankReport> reports = score_split(model, instances, graphs, mode);
  auto fractions = eval::hit_at_k(reports);

  std::vector<std::vector<std::size_t>> prompts;
  prompts.reserve(instances.size());
  for (const Instance& inst : instances) {
    prompts.push_back(model.prompt_ids(inst, graphs.at(inst.graph_index), mode));
  }
  const double avg = eval::avg_tokens(prompts, config.rvq.num_stages,
                                      toylm::Vocabulary::kPlaceholder);

  json per_instance = json::array();
  json flagged = json::array();
  for (std::size_t i = 0; i < reports.size(); ++i) {
    per_instance.push_back({{"index", i},
                            {"sequence_rank", reports[i].sequence_rank},
                            {"ranks", reports[i].per_position_ranks},
                            {"prompt_tokens", reports[i].token_count},
                            {"span_fallback", reports[i].span_fallback}});
    if (reports[i].span_fallback) flagged.push_back(i);
  }
  json hits;
  for (auto& [k, v] : fractions) hits[std::to_string(k)] = v;

  EvalReport report;
  report.document = json{{"mode", eval_mode_name(mode)},
                         {"stage", stage},
                         {"split", split},
                         {"instances", per_instance},
                         {"hit_at_k", hits},
                         {"avg_tokens", avg},
                         {"flagged_instances", flagged},
                         {"config_hash", config.config_hash()}};

  char line[160];
  std::snprintf(line, sizeof(line), "%-24s %6.1f %6.1f %6.1f %6.1f %10.1f",
                (eval_mode_name(mode) + " (" + stage + "/" + split + ")").c_str(),
                100.0 * fractions.at(1), 100.0 * fractions.at(3), 100.0 * fractions.at(5),
                100.0 * fractions.at(10), avg);
  report.summary = std::string("Configuration             Hit@1  Hit@3  Hit@5 Hit@10  AvgTokens\n") +
                   line + "\n";
  return report;
}

EvalReport run_baseline(const RunConfig& config, const Corpus& corpus, EvalMode mode,
                        const std::string& stage) {
  Checkpoint pretrained = ensure_pretrained(config, corpus);
  if (mode == EvalMode::lora_only) {
    TrainResult trained = train_stage(config, corpus, stage, &pretrained,
                                      EvalMode::lora_only);
    KoreModel model(trained.best);
    return evaluate_split(config, corpus, model, mode, stage, "test");
  }
  KoreModel model(config, corpus.vocab, pretrained);
  return evaluate_split(config, corpus, model, mode, stage, "test");
}

json quantize_graphs(KoreModel& model, const std::vector<graphio::StarGraph>& graphs) {
  json out = json::array();
  for (const graphio::StarGraph& g : graphs) {
    Tensor summary = model.encoder().encode(model.featurized(g));
    rvq::QuantizationResult res = rvq::quantize(summary.value(), model.codebook(),
                                                model.config().rvq);
    double final_norm = 0.0;
    for (double x : res.residual_trace.back()) final_norm += x * x;
    out.push_back({{"center", g.center.id},
                   {"indices", res.indices},
                   {"cosines", res.cosines},
                   {"rvq_loss", res.rvq_loss},
                   {"final_residual_sq", final_norm},
                   {"degenerate", res.degenerate}});
  }
  return out;
}

json inspect_codebook(const KoreModel& model) {
  json stages = json::array();
  const rvq::Codebook& cb = const_cast<KoreModel&>(model).codebook();
  for (std::size_t t = 0; t < cb.num_stages(); ++t) {
    rvq::CodebookStats stats = rvq::codebook_stats(cb.stage(t).usage);
    stages.push_back({{"stage", t},
                      {"perplexity", stats.perplexity},
                      {"entropy", stats.entropy},
                      {"dead_fraction", stats.dead_fraction},
                      {"usage", cb.stage(t).usage}});
  }
  return json{{"codebook_size", cb.size()},
              {"num_stages", cb.num_stages()},
              {"unit_norm_error", cb.max_unit_norm_error()},
              {"stages", stages}};
}

std::string merge_reports(const std::vector<json>& reports) {
  std::ostringstream os;
  os << "Configuration             Hit@1  Hit@3  Hit@5 Hit@10  AvgTokens\n";
  for (const json& r : reports) {
    const auto& hits = r.at("hit_at_k");
    char line[160];
    std::snprintf(line, sizeof(line), "%-24s %6.1f %6.1f %6.1f %6.1f %10.1f",
                  (r.at("mode").get<std::string>() + " (" +
                   r.at("stage").get<std::string>() + "/" +
                   r.at("split").get<std::string>() + ")")
                      .c_str(),
                  100.0 * hits.at("1").get<double>(), 100.0 * hits.at("3").get<double>(),
                  100.0 * hits.at("5").get<double>(), 100.0 * hits.at("10").get<double>(),
                  r.at("avg_tokens").get<double>());
    os << line << "\n";
  }
  return os.str();
}

}  // namespace kore::pipeline
