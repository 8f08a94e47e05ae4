#include "kore/eval.hpp"

#include <algorithm>

#include "kore/errors.hpp"

namespace kore::eval {

void EvalInstance::validate() const {
  auto check_span = [](const std::vector<std::size_t>& ids,
                       std::pair<std::size_t, std::size_t> span) {
    if (span.first >= span.second || span.second > ids.size()) {
      throw invalid_argument("eval instance: object span empty or outside the answer");
    }
  };
  if (answer_ids.empty()) throw invalid_argument("eval instance: empty answer");
  check_span(answer_ids, object_span);
  for (const Alternative& alt : alternatives) check_span(alt.answer_ids, alt.object_span);
}

std::size_t token_rank(const std::vector<double>& logits, std::size_t true_token_id) {
  if (true_token_id >= logits.size()) {
    throw invalid_argument("token_rank: true token outside the vocabulary");
  }
  const double target = logits[true_token_id];
  std::size_t greater = 0;
  for (double v : logits) {
    if (v > target) ++greater;
  }
  return 1 + greater;
}

std::size_t sequence_rank(const std::vector<std::size_t>& per_position_ranks,
                          std::pair<std::size_t, std::size_t> object_span) {
  if (object_span.first >= object_span.second ||
      object_span.second > per_position_ranks.size()) {
    throw invalid_argument("sequence_rank: span out of bounds");
  }
  std::size_t worst = 0;
  for (std::size_t t = object_span.first; t < object_span.second; ++t) {
    worst = std::max(worst, per_position_ranks[t]);
  }
  return worst;
}

std::pair<std::size_t, std::size_t> find_object_span(
    const std::vector<std::size_t>& answer_ids, const std::string& object_label,
    const toylm::Vocabulary& vocab, bool* fallback) {
  if (fallback) *fallback = false;

  // Variant list: the label as written, then lowercased. The first variant
  // with a contiguous match wins.
  std::vector<std::string> variants = {object_label};
  std::string lower = object_label;
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  if (lower != object_label) variants.push_back(lower);

  for (const std::string& variant : variants) {
    std::vector<std::size_t> needle;
    try {
      needle = vocab.encode(variant);
    } catch (const invalid_argument&) {
      continue;  // words outside the vocabulary cannot match
    }
    if (needle.empty() || needle.size() > answer_ids.size()) continue;
    for (std::size_t start = 0; start + needle.size() <= answer_ids.size(); ++start) {
      if (std::equal(needle.begin(), needle.end(), answer_ids.begin() + start)) {
        return {start, start + needle.size()};
      }
    }
  }
  if (fallback) *fallback = true;
  return {0, answer_ids.size()};
}

namespace {

std::size_t score_one_answer(const EvalInstance& instance,
                             const std::vector<std::size_t>& answer_ids,
                             std::pair<std::size_t, std::size_t> span,
                             const TeacherForcedScorer& scorer, RankReport* report) {
  ScoredAnswer scored = scorer(instance, answer_ids);
  if (scored.logits_per_position.size() != answer_ids.size()) {
    throw invalid_argument("eval: scorer returned " +
                           std::to_string(scored.logits_per_position.size()) +
                           " rows for " + std::to_string(answer_ids.size()) + " tokens");
  }
  std::vector<std::size_t> ranks(answer_ids.size());
  for (std::size_t t = 0; t < answer_ids.size(); ++t) {
    ranks[t] = token_rank(scored.logits_per_position[t], answer_ids[t]);
  }
  const std::size_t seq = sequence_rank(ranks, span);
  if (report) {
    report->per_position_ranks = ranks;
    report->token_count = scored.prompt_token_count;
  }
  return seq;
}

}  // namespace

RankReport evaluate_instance(const EvalInstance& instance, const TeacherForcedScorer& scorer,
                             const std::set<std::size_t>& k_set) {
  instance.validate();
  RankReport report;
  report.span_fallback = instance.span_fallback;
  std::size_t best = score_one_answer(instance, instance.answer_ids, instance.object_span,
                                      scorer, &report);
  // Any matching ground-truth answer counts: keep the minimum sequence rank.
  for (const auto& alt : instance.alternatives) {
    best = std::min(best,
                    score_one_answer(instance, alt.answer_ids, alt.object_span, scorer,
                                     nullptr));
  }
  report.sequence_rank = best;
  for (std::size_t k : k_set) report.hits[k] = best <= k;
  return report;
}

std::vector<RankReport> evaluate_instances(const std::vector<EvalInstance>& instances,
                                           const TeacherForcedScorer& scorer,
                                           const std::set<std::size_t>& k_set) {
  if (instances.empty()) throw invalid_argument("eval: empty instance set");
  std::vector<RankReport> reports;
  reports.reserve(instances.size());
  for (const EvalInstance& inst : instances) {
    reports.push_back(evaluate_instance(inst, scorer, k_set));
  }
  return reports;
}

std::map<std::size_t, double> hit_at_k(const std::vector<RankReport>& reports,
                                       const std::set<std::size_t>& k_set) {
  if (reports.empty()) throw invalid_argument("hit_at_k: empty report set");
  std::map<std::size_t, double> out;
  for (std::size_t k : k_set) {
    std::size_t hits = 0;
    for (const RankReport& r : reports) hits += r.sequence_rank <= k ? 1 : 0;
    out[k] = static_cast<double>(hits) / static_cast<double>(reports.size());
  }
  return out;
}

double avg_tokens(const std::vector<std::vector<std::size_t>>& prompts,
                  std::size_t tokens_per_placeholder, std::size_t placeholder_id) {
  if (prompts.empty()) return 0.0;
  double total = 0.0;
  for (const auto& prompt : prompts) {
    for (std::size_t id : prompt) {
      total += id == placeholder_id ? static_cast<double>(tokens_per_placeholder) : 1.0;
    }
  }
  return total / static_cast<double>(prompts.size());
}

}  // namespace kore::eval
