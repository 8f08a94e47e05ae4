#pragma once

#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "kore/toylm.hpp"

namespace kore::eval {

struct EvalInstance {
  std::string query_text;
  std::vector<std::size_t> answer_ids;
  std::pair<std::size_t, std::size_t> object_span;  // [start, end) inside the answer
  struct Alternative {
    std::vector<std::size_t> answer_ids;
    std::pair<std::size_t, std::size_t> object_span;
  };
  std::vector<Alternative> alternatives;
  std::size_t graph_index = 0;
  bool span_fallback = false;  // object span fell back to the whole answer

  void validate() const;
};

struct RankReport {
  std::vector<std::size_t> per_position_ranks;
  std::size_t sequence_rank = 0;
  std::map<std::size_t, bool> hits;
  std::size_t token_count = 0;  // full teacher-forced prompt length
  bool span_fallback = false;
};

// 1 + the number of strictly greater logits; ties never worsen the rank.
std::size_t token_rank(const std::vector<double>& logits, std::size_t true_token_id);

// Conservative sequence rank: the maximum rank across the object span.
std::size_t sequence_rank(const std::vector<std::size_t>& per_position_ranks,
                          std::pair<std::size_t, std::size_t> object_span);

// First exact contiguous match of the tokenized object inside the answer;
// candidate variants are tried in order and the first hit wins. A miss falls
// back to the full answer span and sets *fallback.
std::pair<std::size_t, std::size_t> find_object_span(
    const std::vector<std::size_t>& answer_ids, const std::string& object_label,
    const toylm::Vocabulary& vocab, bool* fallback);

// Teacher-forced scorer: logits row for every answer position, conditioned
// on the gold prefix of the given answer variant, plus the evaluated prompt
// length in tokens.
struct ScoredAnswer {
  std::vector<std::vector<double>> logits_per_position;
  std::size_t prompt_token_count = 0;
};
using TeacherForcedScorer = std::function<ScoredAnswer(
    const EvalInstance&, const std::vector<std::size_t>& answer_ids)>;

// Per-instance ranks under teacher forcing; multi-answer instances score as
// the minimum sequence rank over the gold answer and every alternative.
RankReport evaluate_instance(const EvalInstance& instance, const TeacherForcedScorer& scorer,
                             const std::set<std::size_t>& k_set = {1, 3, 5, 10});

std::vector<RankReport> evaluate_instances(const std::vector<EvalInstance>& instances,
                                           const TeacherForcedScorer& scorer,
                                           const std::set<std::size_t>& k_set = {1, 3, 5, 10});

// Fraction of instances with sequence rank <= k, per k.
std::map<std::size_t, double> hit_at_k(const std::vector<RankReport>& reports,
                                       const std::set<std::size_t>& k_set = {1, 3, 5, 10});

// Mean prompt length in tokens; each placeholder occurrence counts as
// tokens_per_placeholder spliced rows instead of itself.
double avg_tokens(const std::vector<std::vector<std::size_t>>& prompts,
                  std::size_t tokens_per_placeholder, std::size_t placeholder_id);

}  // namespace kore::eval
