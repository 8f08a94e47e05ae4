#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "kore/errors.hpp"
#include "kore/eval.hpp"
#include "kore/rng.hpp"

using namespace kore;
using namespace kore::eval;
using kore::toylm::Vocabulary;

namespace {

// Sort-based oracle: position of the true logit after sorting descending,
// counting only strictly greater values.
std::size_t rank_oracle(const std::vector<double>& logits, std::size_t id) {
  std::size_t greater = 0;
  for (double v : logits) {
    if (v > logits[id]) ++greater;
  }
  return greater + 1;
}

// Scorer stub returning fixed logits rows per answer variant.
TeacherForcedScorer stub_scorer(
    std::map<std::vector<std::size_t>, std::vector<std::vector<double>>> table,
    std::size_t prompt_tokens = 10) {
  return [table = std::move(table), prompt_tokens](
             const EvalInstance&, const std::vector<std::size_t>& answer) {
    ScoredAnswer s;
    s.logits_per_position = table.at(answer);
    s.prompt_token_count = prompt_tokens;
    return s;
  };
}

}  // namespace

TEST_SUITE_BEGIN("eval");

TEST_CASE("token_rank follows the strict-inequality formula") {
  CHECK(token_rank({0.1, 5.0, 0.3}, 1) == 1);  // unique max
  CHECK(token_rank({2.0, 2.0, 2.0}, 1) == 1);  // all tied: nothing strictly greater
  CHECK(token_rank({3.0, 1.0, 2.0}, 1) == 3);
  CHECK(token_rank({3.0, 1.0, 1.0}, 2) == 2);  // tie with another non-max

  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> logits(16);
    for (double& v : logits) v = rng.uniform(-3, 3);
    const std::size_t id = rng.below(16);
    CHECK(token_rank(logits, id) == rank_oracle(logits, id));
  }
}

TEST_CASE("token_rank equals brute force exhaustively over small vocabularies") {
  Rng rng(9);
  for (std::size_t vocab = 1; vocab <= 32; ++vocab) {
    for (int trial = 0; trial < 40; ++trial) {
      std::vector<double> logits(vocab);
      // Values drawn from a three-point set so ties are common.
      for (double& v : logits) v = static_cast<double>(rng.below(3));
      for (std::size_t id = 0; id < vocab; ++id) {
        CHECK(token_rank(logits, id) == rank_oracle(logits, id));
      }
    }
  }
}

TEST_CASE("sequence_rank is the max over the object span") {
  CHECK(sequence_rank({4}, {0, 1}) == 4);
  CHECK(sequence_rank({1, 7, 2}, {0, 3}) == 7);
  CHECK(sequence_rank({1, 7, 2}, {2, 3}) == 2);
  CHECK_THROWS_AS(sequence_rank({1, 2}, {1, 1}), invalid_argument);
}

TEST_CASE("find_object_span locates the tokenized object") {
  Vocabulary v = Vocabulary::build({"the nile river is long", "Nile"});
  bool fallback = false;

  auto answer = v.encode("the nile river");
  auto span = find_object_span(answer, "nile", v, &fallback);
  CHECK(span == std::pair<std::size_t, std::size_t>{1, 2});
  CHECK_FALSE(fallback);

  // Case variant: "Nile" exists in the vocabulary but does not appear in the
  // answer; the lowercased variant matches instead.
  span = find_object_span(answer, "Nile", v, &fallback);
  CHECK(span == std::pair<std::size_t, std::size_t>{1, 2});
  CHECK_FALSE(fallback);

  // Char-offset oracle: the span's decoded text appears at the character
  // offset of the object inside the decoded answer.
  const std::string decoded = v.decode(answer);
  const std::size_t char_pos = decoded.find("nile");
  std::size_t chars_before = 0;
  for (std::size_t t = 0; t < span.first; ++t) {
    chars_before += v.token(answer[t]).size() + 1;
  }
  CHECK(chars_before == char_pos);

  // Object equal to the entire answer.
  span = find_object_span(answer, "the nile river", v, &fallback);
  CHECK(span == std::pair<std::size_t, std::size_t>{0, 3});

  // Absent object falls back to the full answer with a flag.
  span = find_object_span(answer, "amazon", v, &fallback);
  CHECK(fallback);
  CHECK(span == std::pair<std::size_t, std::size_t>{0, 3});
}

TEST_CASE("evaluate_instance ranks against the gold prefix and alternatives") {
  // Vocab of 4; answer "2 3": position ranks derived from stub logits.
  EvalInstance inst;
  inst.answer_ids = {2, 3};
  inst.object_span = {0, 2};

  std::map<std::vector<std::size_t>, std::vector<std::vector<double>>> table;
  table[{2, 3}] = {{0, 0, 3, 0}, {5, 4, 3, 2}};  // ranks 1 and 4 -> seq 4
  auto report = evaluate_instance(inst, stub_scorer(table));
  CHECK(report.per_position_ranks == std::vector<std::size_t>{1, 4});
  CHECK(report.sequence_rank == 4);
  CHECK(report.hits.at(1) == false);
  CHECK(report.hits.at(3) == false);
  CHECK(report.hits.at(5) == true);
  CHECK(report.hits.at(10) == true);
  CHECK(report.token_count == 10);

  // A better-ranked alternative lowers the sequence rank to its own.
  EvalInstance multi = inst;
  multi.alternatives.push_back({{1}, {0, 1}});
  table[{1}] = {{0, 9, 0, 0}};  // rank 1
  auto multi_report = evaluate_instance(multi, stub_scorer(table));
  CHECK(multi_report.sequence_rank == 1);

  // Multi-answer rank is never worse than any single alternative.
  CHECK(multi_report.sequence_rank <= report.sequence_rank);
}

TEST_CASE("hit_at_k fractions and monotonicity") {
  auto make_report = [](std::size_t rank) {
    RankReport r;
    r.sequence_rank = rank;
    return r;
  };
  std::vector<RankReport> reports = {make_report(1), make_report(4), make_report(11)};
  auto h = hit_at_k(reports);
  CHECK(h[1] == doctest::Approx(1.0 / 3.0));
  CHECK(h[3] == doctest::Approx(1.0 / 3.0));
  CHECK(h[5] == doctest::Approx(2.0 / 3.0));
  CHECK(h[10] == doctest::Approx(2.0 / 3.0));

  // Monotone in k for any rank multiset.
  Rng rng(31);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<RankReport> rs;
    for (int i = 0; i < 20; ++i) rs.push_back(make_report(1 + rng.below(15)));
    auto curve = hit_at_k(rs);
    double prev = 0.0;
    for (auto& [k, frac] : curve) {
      CHECK(frac >= prev);
      prev = frac;
    }
  }

  CHECK_THROWS_AS(hit_at_k({}), invalid_argument);
}

TEST_CASE("avg_tokens counts placeholders as Q rows") {
  const std::size_t kg = 3;
  // 30 tokens, one of them the placeholder: 29 + 20 = 49.
  std::vector<std::size_t> prompt(30, 7);
  prompt[4] = kg;
  CHECK(avg_tokens({prompt}, 20, kg) == doctest::Approx(49.0));

  // Vanilla prompts count verbatim.
  std::vector<std::size_t> vanilla(12, 7);
  CHECK(avg_tokens({vanilla}, 20, kg) == doctest::Approx(12.0));

  // Textualization is vanilla plus serialized triples: never shorter.
  std::vector<std::size_t> textualized(40, 7);
  CHECK(avg_tokens({textualized}, 20, kg) >= avg_tokens({vanilla}, 20, kg));
}

TEST_SUITE_END();
