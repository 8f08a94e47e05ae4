#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "kore/errors.hpp"
#include "kore/ops.hpp"
#include "kore/pipeline.hpp"

namespace kore::pipeline {

PlateauController::PlateauController(std::size_t plateau_patience,
                                     std::size_t early_stop_patience)
    : plateau_patience_(plateau_patience), early_stop_patience_(early_stop_patience) {}

PlateauController::Action PlateauController::observe(double metric) {
  if (metric > best_) {
    best_ = metric;
    bad_streak_ = 0;
    improved_last_ = true;
    return Action::none;
  }
  improved_last_ = false;
  ++bad_streak_;
  if (bad_streak_ == plateau_patience_ + 1) return Action::reduce;
  if (bad_streak_ == plateau_patience_ + 1 + early_stop_patience_) return Action::stop;
  return Action::none;
}

Checkpoint pretrain_base(const RunConfig& config, const Corpus& corpus) {
  Rng rng(config.seed ^ 0xBA5Eull);
  toylm::ToyLMConfig lm_cfg = config.lm;
  lm_cfg.vocab_size = corpus.vocab.size();
  toylm::ToyLM lm(lm_cfg, config.lora, rng);
  lm.set_base_trainable(true);

  ParamGroup group{"pretrain", {}, config.pretrain_lr, 0.0};
  lm.collect_base_params("lm.", group.params);
  AdamW opt({group}, config.adam_beta1, config.adam_beta2, config.adam_eps);

  const std::size_t batch = 16;
  json history = json::array();
  std::vector<std::size_t> order(corpus.pretrain_lines.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < config.pretrain_epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t seen = 0;
    opt.zero_grad();
    for (std::size_t p = 0; p < order.size(); ++p) {
      const std::string& line = corpus.pretrain_lines[order[p]];
      std::vector<std::size_t> ids = corpus.vocab.encode(line);
      if (ids.size() < 2) continue;
      if (ids.size() >= config.lm.context_length) {
        ids.resize(config.lm.context_length - 1);
      }
      std::vector<std::size_t> targets(ids.size());
      for (std::size_t t = 0; t + 1 < ids.size(); ++t) targets[t] = ids[t + 1];
      targets.back() = toylm::Vocabulary::kEos;
      std::vector<bool> mask(ids.size(), true);

      Tape tape;
      {
        Tape::Scope scope(tape);
        Tensor logits = lm.forward_ids(ids);
        Tensor loss = toylm::lm_loss(logits, targets, mask);
        epoch_loss += loss.item();
        tape.backward(scale(loss, 1.0 / static_cast<double>(batch)));
      }
      ++seen;
      if (seen % batch == 0 || p + 1 == order.size()) {
        opt.clip(config.clip_norm);
        opt.step();
        opt.zero_grad();
      }
    }
    history.push_back({{"epoch", epoch},
                       {"loss", epoch_loss / std::max<std::size_t>(1, seen)}});
  }

  lm.set_base_trainable(false);
  Checkpoint ck;
  lm.save_to(ck, "lm.");
  ck.put_meta("vocab", corpus.vocab.to_json());
  ck.put_meta("pretrain_history", history.dump());
  ck.put_meta("config_hash", config.config_hash());
  return ck;
}

Checkpoint ensure_pretrained(const RunConfig& config, const Corpus& corpus) {
  const std::string path = config.data_dir + "/pretrain.ckpt";
  if (std::filesystem::exists(path)) return Checkpoint::load(path);
  Checkpoint ck = pretrain_base(config, corpus);
  std::filesystem::create_directories(config.data_dir);
  ck.save(path);
  return ck;
}

namespace {

double hit10_on_split(KoreModel& model, const std::vector<Instance>& instances,
                      const std::vector<graphio::StarGraph>& graphs, EvalMode mode) {
  auto reports = score_split(model, instances, graphs, mode);
  return eval::hit_at_k(reports, {10}).at(10);
}

}  // namespace

TrainResult train_stage(const RunConfig& config, const Corpus& corpus,
                        const std::string& stage, const Checkpoint* start, EvalMode mode) {
  if (stage != "base" && stage != "qa") {
    throw invalid_argument("train: stage must be 'base' or 'qa', got '" + stage + "'");
  }
  if (start == nullptr) {
    throw config_error("train: the " + stage + " stage needs a starting checkpoint");
  }
  if (stage == "qa" && !start->has_meta("stage")) {
    throw config_error("train: the qa stage requires a base-stage checkpoint");
  }
  if (mode != EvalMode::kore && mode != EvalMode::lora_only) {
    throw invalid_argument("train: only kore and lora-only modes are trainable");
  }

  // base starts from the pretrained backbone; qa restores the full model.
  std::unique_ptr<KoreModel> model;
  if (start->has_meta("config")) {
    model = std::make_unique<KoreModel>(*start);
  } else {
    model = std::make_unique<KoreModel>(config, corpus.vocab, *start);
  }

  const auto& train_set = corpus.splits.at(stage + "_train");
  const auto& val_set = corpus.splits.at(stage + "_val");
  const auto& train_graphs = corpus.graphs.at("train");
  const auto& val_graphs = corpus.graphs.at("val");

  std::vector<ParamGroup> groups = model->trainable_parameters(mode);
  AdamW opt(std::move(groups), config.adam_beta1, config.adam_beta2, config.adam_eps);
  PlateauController controller(config.plateau_patience, config.early_stop_patience);
  rvq::ResidualPool pool(config.rvq.reset_pool_size);

  Rng train_rng(config.seed ^ (stage == "base" ? 0xB0ull : 0x9Aull) ^
                (mode == EvalMode::lora_only ? 0x7077ull : 0ull));
  Rng dropout_rng = train_rng.fork();

  const std::size_t step_span = config.batch_size * config.grad_accum;
  json history = json::array();
  Checkpoint best;
  double best_metric = -1.0;

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    train_rng.shuffle(order);
    const std::size_t usable = order.size() - order.size() % step_span;

    double epoch_loss = 0.0;
    std::vector<rvq::Assignment> batch_assignments;
    std::size_t graphs_in_batch = 0;
    opt.zero_grad();

    for (std::size_t p = 0; p < usable; ++p) {
      const Instance& inst = train_set[order[p]];
      const graphio::StarGraph& graph = train_graphs[inst.graph_index];

      Tape tape;
      {
        Tape::Scope scope(tape);
        KoreModel::Forward fwd = model->forward(inst, graph, mode, &dropout_rng);
        const double loss_value = fwd.lm_loss.item() + fwd.rvq_loss.item();
        if (!std::isfinite(loss_value)) {
          throw numeric_error("train: non-finite loss at epoch " + std::to_string(epoch) +
                              ", instance " + std::to_string(order[p]) + ", prompt '" +
                              inst.prompt_text + "'");
        }
        epoch_loss += loss_value;
        Tensor total = add(fwd.lm_loss, fwd.rvq_loss);
        tape.backward(scale(total, 1.0 / static_cast<double>(step_span)));

        if (mode == EvalMode::kore) {
          for (std::size_t t = 0; t < config.rvq.num_stages; ++t) {
            const auto& residual = fwd.quantization.residual_trace[t];
            if (l2_norm(residual) < 1e-12) continue;
            batch_assignments.push_back({t, fwd.quantization.indices[t], residual});
            pool.push(residual);
          }
        }
      }
      ++graphs_in_batch;

      if ((p + 1) % step_span == 0) {
        clip_grad_norm(opt.groups(), config.clip_norm);
        opt.step();
        opt.zero_grad();
        if (mode == EvalMode::kore) {
          rvq::ema_update(model->codebook(), batch_assignments, graphs_in_batch, config.rvq);
          rvq::dead_code_reset(model->codebook(), config.rvq, pool, train_rng);
          batch_assignments.clear();
        }
        graphs_in_batch = 0;
      }
    }

    const double hit10 = hit10_on_split(*model, val_set, val_graphs, mode);
    history.push_back({{"epoch", epoch},
                       {"train_loss", usable ? epoch_loss / static_cast<double>(usable) : 0.0},
                       {"val_hit10", hit10},
                       {"lr_lora", opt.groups()[0].learning_rate},
                       {"lr_encoder",
                        opt.groups().size() > 1 ? opt.groups()[1].learning_rate : 0.0}});

    PlateauController::Action action = controller.observe(hit10);
    if (controller.improved_last() || best_metric < 0.0) {
      best_metric = hit10;
      best = Checkpoint();
      model->save(best);
      best.put_meta("stage", stage);
      best.put_meta("mode", eval_mode_name(mode));
      best.put_meta("best_val_hit10", std::to_string(hit10));
      for (auto& slot : opt.slots()) {
        best.put("opt.m." + slot.name, slot.m);
        best.put("opt.v." + slot.name, slot.v);
      }
      best.put("opt.step", Tensor::scalar(static_cast<double>(opt.step_count())));
      best.put_meta("rng_state", train_rng.save_state());
    }
    if (action == PlateauController::Action::reduce) {
      for (ParamGroup& g : opt.groups()) g.learning_rate *= config.plateau_factor;
    } else if (action == PlateauController::Action::stop) {
      break;
    }
  }

  best.put_meta("metric_history", history.dump());
  return TrainResult{std::move(best), std::move(history)};
}

}  // namespace kore::pipeline
