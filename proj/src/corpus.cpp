#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "kore/errors.hpp"
#include "kore/pipeline.hpp"

namespace kore::pipeline {

namespace {

const char* kSplits[3] = {"train", "val", "test"};

// Pronounceable invented words, two consonant-vowel syllables plus a coda.
std::string invent_word(Rng& rng) {
  static const char* consonants = "bdfgklmnprstvz";
  static const char* vowels = "aeiou";
  std::string w;
  const std::size_t syllables = 2 + rng.below(2);
  for (std::size_t s = 0; s < syllables; ++s) {
    w.push_back(consonants[rng.below(14)]);
    w.push_back(vowels[rng.below(5)]);
  }
  return w;
}

std::vector<std::string> invent_words(std::size_t count, Rng& rng,
                                      std::set<std::string>& taken) {
  std::vector<std::string> out;
  while (out.size() < count) {
    std::string w = invent_word(rng);
    if (taken.insert(w).second) out.push_back(std::move(w));
  }
  return out;
}

struct Fact {
  std::size_t subject;
  std::size_t relation;
  std::size_t object;
  std::vector<std::size_t> alt_objects;  // extra valid answers (val/test only)
};

struct EntityPool {
  std::vector<std::string> ids;
  std::vector<std::string> labels;
};

std::string question_text(const std::string& stage, const std::string& subject_label,
                          const std::string& relation_label) {
  if (stage == "base") return subject_label + " 's " + relation_label + " is";
  return "what is the " + relation_label + " of " + subject_label + " ?";
}

}  // namespace

Corpus build_synthetic_corpus(const RunConfig& config) {
  Rng rng(config.seed);
  Corpus corpus;

  // Lexicon. Template words are reserved so invented words cannot collide.
  std::set<std::string> taken = {"is", "a", "name", "what", "the", "of"};
  const std::size_t n_adj =
      static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(config.corpus_entities))));
  const std::size_t n_noun =
      (config.corpus_entities + n_adj - 1) / n_adj;
  std::vector<std::string> adjectives = invent_words(n_adj, rng, taken);
  std::vector<std::string> nouns = invent_words(n_noun, rng, taken);
  std::vector<std::string> relations = invent_words(config.corpus_relations, rng, taken);

  // Entities: shuffled two-word combinations, then a disjoint three-way
  // partition so test facts can never be answered from training parameters.
  std::vector<std::pair<std::size_t, std::size_t>> combos;
  for (std::size_t i = 0; i < n_adj; ++i) {
    for (std::size_t j = 0; j < n_noun; ++j) combos.emplace_back(i, j);
  }
  rng.shuffle(combos);
  combos.resize(config.corpus_entities);

  EntityPool all;
  for (std::size_t e = 0; e < combos.size(); ++e) {
    all.ids.push_back("E" + std::to_string(e));
    all.labels.push_back(adjectives[combos[e].first] + " " + nouns[combos[e].second]);
  }

  const std::size_t n_test = std::max<std::size_t>(
      4, static_cast<std::size_t>(config.corpus_holdout * config.corpus_entities));
  const std::size_t n_val = n_test;
  if (2 * n_test + 4 > config.corpus_entities) {
    throw config_error("corpus: holdout leaves too few training entities");
  }
  std::map<std::string, std::vector<std::size_t>> split_entities;
  for (std::size_t e = 0; e < config.corpus_entities; ++e) {
    if (e < n_test) {
      split_entities["test"].push_back(e);
    } else if (e < n_test + n_val) {
      split_entities["val"].push_back(e);
    } else {
      split_entities["train"].push_back(e);
    }
  }

  // Facts per split, at most one object per (subject, relation) in train.
  std::map<std::string, std::vector<Fact>> split_facts;
  std::set<std::tuple<std::size_t, std::size_t, std::size_t>> all_triples;
  for (const char* split : kSplits) {
    const auto& pool = split_entities[split];
    const double frac = split == std::string("train") ? 1.0 - 2.0 * config.corpus_holdout
                                                      : config.corpus_holdout;
    const std::size_t want = std::max<std::size_t>(
        2, static_cast<std::size_t>(frac * static_cast<double>(config.corpus_facts)));
    std::set<std::pair<std::size_t, std::size_t>> used;
    std::vector<Fact>& facts = split_facts[split];
    std::size_t guard = 0;
    while (facts.size() < want && guard++ < want * 50) {
      Fact f;
      f.subject = pool[rng.below(pool.size())];
      f.relation = rng.below(config.corpus_relations);
      f.object = pool[rng.below(pool.size())];
      if (f.object == f.subject) continue;
      if (!used.insert({f.subject, f.relation}).second) continue;
      all_triples.insert({f.subject, f.relation, f.object});
      facts.push_back(f);
    }
    if (facts.size() < want) {
      throw config_error("corpus: could not place " + std::to_string(want) +
                         " facts; increase entities or relations");
    }
    // A slice of val/test facts gets a second valid object (multi-answer).
    if (split != std::string("train") && config.corpus_multi_answer > 0.0) {
      const std::size_t extra =
          static_cast<std::size_t>(config.corpus_multi_answer *
                                   static_cast<double>(facts.size()));
      for (std::size_t i = 0; i < extra; ++i) {
        Fact& f = facts[i];
        std::size_t o2 = pool[rng.below(pool.size())];
        if (o2 == f.subject || o2 == f.object) continue;
        f.alt_objects.push_back(o2);
        all_triples.insert({f.subject, f.relation, o2});
      }
    }
  }

  // Graphs + instances per split; one graph per fact, shared by the base and
  // qa instance derived from it.
  for (const char* split : kSplits) {
    const auto& pool = split_entities[split];
    const auto& facts = split_facts[split];

    // PageRank over the split's fact graph.
    std::vector<std::pair<std::string, std::string>> edges;
    std::vector<std::string> nodes;
    for (std::size_t e : pool) nodes.push_back(all.ids[e]);
    for (const Fact& f : facts) {
      edges.emplace_back(all.ids[f.subject], all.ids[f.object]);
      for (std::size_t o2 : f.alt_objects) edges.emplace_back(all.ids[f.subject], all.ids[o2]);
    }
    auto scores = graphio::pagerank(nodes, edges, 0.85, 100);

    auto entity = [&](std::size_t e) {
      return graphio::EntityId{all.ids[e], all.labels[e]};
    };
    auto rel = [&](std::size_t r) {
      return graphio::Relation{"R" + std::to_string(r), relations[r]};
    };

    std::vector<graphio::StarGraph>& graphs = corpus.graphs[split];
    for (std::size_t fi = 0; fi < facts.size(); ++fi) {
      const Fact& f = facts[fi];
      std::vector<graphio::Triple> triples;
      triples.push_back({entity(f.subject), rel(f.relation), entity(f.object)});
      for (std::size_t o2 : f.alt_objects) {
        triples.push_back({entity(f.subject), rel(f.relation), entity(o2)});
      }
      // Other facts touching this subject stay in the graph.
      for (const Fact& g : facts) {
        if (&g == &f) continue;
        if (g.subject == f.subject || g.object == f.subject) {
          triples.push_back({entity(g.subject), rel(g.relation), entity(g.object)});
        }
      }
      // Distractor edges: relations this subject does not otherwise use,
      // alternating outgoing and incoming, capped by the graph budget.
      std::set<std::size_t> used_relations;
      for (const graphio::Triple& t : triples) {
        if (t.subject.id == all.ids[f.subject]) {
          used_relations.insert(std::stoul(t.relation.id.substr(1)));
        }
      }
      const std::size_t room = config.corpus_max_edges > triples.size()
                                   ? config.corpus_max_edges - triples.size()
                                   : 0;
      const std::size_t n_distract = std::min(config.corpus_distractors, room);
      std::size_t placed = 0, guard = 0;
      while (placed < n_distract && guard++ < 50 * (n_distract + 1)) {
        const std::size_t r = rng.below(config.corpus_relations);
        const std::size_t other = pool[rng.below(pool.size())];
        if (other == f.subject) continue;
        if (placed % 2 == 0) {
          if (used_relations.count(r)) continue;  // keep the gold relation unambiguous
          used_relations.insert(r);
          triples.push_back({entity(f.subject), rel(r), entity(other)});
        } else {
          triples.push_back({entity(other), rel(r), entity(f.subject)});
        }
        ++placed;
      }

      graphio::StarGraph graph = graphio::build_star_graph(
          entity(f.subject), triples, scores, config.corpus_max_edges);

      // Answerability: the gold object (and every alternative) must survive.
      auto contains = [&](const std::string& id) {
        for (const auto& e : graph.neighbors) {
          if (graphio::StarGraph::neighbor_of(e).id == id) return true;
        }
        return false;
      };
      if (!contains(all.ids[f.object])) {
        throw config_error("corpus: gold object pruned from its star graph");
      }
      graphs.push_back(std::move(graph));

      for (const char* stage : {"base", "qa"}) {
        Instance inst;
        inst.stage = stage;
        const std::string q = question_text(stage, all.labels[f.subject],
                                            relations[f.relation]);
        inst.prompt_text = "[CTX] <KG_EMBEDDING> [Q] " + q + " [A]";
        inst.bare_prompt_text = "[Q] " + q + " [A]";
        inst.answer_text = all.labels[f.object];
        inst.object_label = all.labels[f.object];
        if (stage == std::string("qa")) {
          for (std::size_t o2 : f.alt_objects) inst.alt_answers.push_back(all.labels[o2]);
        }
        inst.graph_index = fi;
        corpus.splits[std::string(stage) + "_" + split].push_back(std::move(inst));
      }
    }
  }

  // Fact-free pretraining stream: every label mentioned, frame lines filled
  // with random non-fact triples so nothing factual is memorizable.
  for (std::size_t e = 0; e < config.corpus_entities; ++e) {
    corpus.pretrain_lines.push_back(all.labels[e] + " is a name .");
  }
  std::size_t guard = 0;
  while (corpus.pretrain_lines.size() < config.corpus_entities + config.pretrain_frames &&
         guard++ < config.pretrain_frames * 20) {
    const std::size_t k = 1 + rng.below(3);
    std::vector<std::tuple<std::size_t, std::size_t, std::size_t>> pseudo;
    bool clean = true;
    for (std::size_t i = 0; i < k && clean; ++i) {
      const std::size_t s = rng.below(config.corpus_entities);
      const std::size_t r = rng.below(config.corpus_relations);
      std::size_t o = rng.below(config.corpus_entities);
      if (o == s) o = (o + 1) % config.corpus_entities;
      if (all_triples.count({s, r, o})) {
        clean = false;  // never leak a real fact into pretraining
        break;
      }
      pseudo.emplace_back(s, r, o);
    }
    if (!clean || pseudo.empty()) continue;
    std::string ctx = "[CTX]";
    for (auto& [s, r, o] : pseudo) {
      ctx += " " + all.labels[s] + " " + relations[r] + " " + all.labels[o] + " .";
    }
    const auto& [qs, qr, qo] = pseudo[rng.below(pseudo.size())];
    const char* stage = rng.below(2) == 0 ? "base" : "qa";
    corpus.pretrain_lines.push_back(ctx + " [Q] " + question_text(stage, all.labels[qs],
                                                                  relations[qr]) +
                                    " [A] " + all.labels[qo]);
  }

  // Vocabulary over every text surface the pipeline can produce.
  std::vector<std::string> lines = corpus.pretrain_lines;
  for (const auto& [name, instances] : corpus.splits) {
    for (const Instance& inst : instances) {
      lines.push_back(inst.prompt_text);
      lines.push_back(inst.bare_prompt_text);
      lines.push_back(inst.answer_text);
      for (const std::string& alt : inst.alt_answers) lines.push_back(alt);
    }
  }
  corpus.vocab = toylm::Vocabulary::build(lines);
  if (corpus.vocab.size() > config.lm.vocab_size) {
    throw config_error("corpus: vocabulary of " + std::to_string(corpus.vocab.size()) +
                       " words exceeds lm.vocab_size " +
                       std::to_string(config.lm.vocab_size));
  }

  // Entity disjointness: construction already guarantees it, verified here.
  for (const char* a : {"train", "val"}) {
    for (const char* b : {"val", "test"}) {
      if (a == std::string(b)) continue;
      std::set<std::size_t> sa(split_entities[a].begin(), split_entities[a].end());
      for (std::size_t e : split_entities[b]) {
        if (sa.count(e)) throw config_error("corpus: split entity overlap");
      }
    }
  }
  return corpus;
}

void save_corpus(const Corpus& corpus, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream os(dir + "/vocab.json");
    os << corpus.vocab.to_json() << "\n";
  }
  {
    std::ofstream os(dir + "/pretrain.txt");
    for (const std::string& line : corpus.pretrain_lines) os << line << "\n";
  }
  for (const auto& [name, instances] : corpus.splits) {
    std::ofstream os(dir + "/" + name + ".jsonl");
    for (const Instance& inst : instances) {
      os << json{{"stage", inst.stage},
                 {"prompt", inst.prompt_text},
                 {"bare_prompt", inst.bare_prompt_text},
                 {"answer", inst.answer_text},
                 {"object", inst.object_label},
                 {"alt_answers", inst.alt_answers},
                 {"graph", inst.graph_index}}
                .dump()
         << "\n";
    }
  }
  for (const auto& [split, graphs] : corpus.graphs) {
    graphio::save_star_graphs_jsonl(dir + "/graphs_" + split + ".jsonl", graphs);
    // Raw triples for the extract/quantize subcommands.
    std::vector<graphio::Triple> triples;
    for (const auto& g : graphs) {
      for (const auto& e : g.neighbors) triples.push_back(e.triple);
    }
    graphio::save_triples_jsonl(dir + "/triples_" + split + ".jsonl", triples);
  }
}

Corpus load_corpus(const std::string& dir) {
  Corpus corpus;
  {
    std::ifstream is(dir + "/vocab.json");
    if (!is) throw io_error("corpus: cannot open '" + dir + "/vocab.json'");
    std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    corpus.vocab = toylm::Vocabulary::from_json(text);
  }
  {
    std::ifstream is(dir + "/pretrain.txt");
    if (!is) throw io_error("corpus: cannot open '" + dir + "/pretrain.txt'");
    std::string line;
    while (std::getline(is, line)) {
      if (!line.empty()) corpus.pretrain_lines.push_back(line);
    }
  }
  for (const char* stage : {"base", "qa"}) {
    for (const char* split : kSplits) {
      const std::string name = std::string(stage) + "_" + split;
      std::ifstream is(dir + "/" + name + ".jsonl");
      if (!is) throw io_error("corpus: cannot open '" + dir + "/" + name + ".jsonl'");
      std::string line;
      while (std::getline(is, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        Instance inst;
        inst.stage = j.at("stage");
        inst.prompt_text = j.at("prompt");
        inst.bare_prompt_text = j.at("bare_prompt");
        inst.answer_text = j.at("answer");
        inst.object_label = j.at("object");
        inst.alt_answers = j.at("alt_answers").get<std::vector<std::string>>();
        inst.graph_index = j.at("graph");
        corpus.splits[name].push_back(std::move(inst));
      }
    }
  }
  for (const char* split : kSplits) {
    corpus.graphs[split] = graphio::load_star_graphs_jsonl(dir + "/graphs_" +
                                                           split + ".jsonl");
  }
  return corpus;
}

}  // namespace kore::pipeline
