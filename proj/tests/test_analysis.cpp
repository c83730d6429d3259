#include <gtest/gtest.h>

#include "capt/analysis.hpp"
#include "capt/trace_io.hpp"

using namespace capt;

namespace {

using Cats = std::map<std::string, std::set<std::string>>;

// A step whose chosen token carries `offset`; a runner-up candidate with a
// different text sits next to it and must never be counted.
StepRecord step(const std::string& text, double offset, std::int32_t id = 1, bool changed = false) {
  StepRecord s;
  CandidateScore chosen;
  chosen.token = TokenId{id};
  chosen.text = text;
  chosen.logp_new = -1.0;
  chosen.offset = offset;
  chosen.total = chosen.logp_new + offset;
  CandidateScore other;
  other.token = TokenId{id + 1000};
  other.text = "decoy";
  other.logp_new = changed ? -0.5 : -2.0;
  other.offset = 9.0;
  other.total = other.logp_new - 10.0;
  s.candidates = {chosen, other};
  s.chosen = chosen.token;
  s.top_choice_changed = changed;
  return s;
}

std::vector<StepRecord> fixture_steps() {
  std::vector<StepRecord> v;
  for (int i = 0; i < 4; ++i) v.push_back(step("Keep", 0.5));
  for (int i = 0; i < 4; ++i) v.push_back(step(" Keep", 0.25));
  for (int i = 0; i < 7; ++i) v.push_back(step("likely", -0.125));
  for (int i = 0; i < 6; ++i) v.push_back(step(" MRI", 1.0));
  for (int i = 0; i < 5; ++i) v.push_back(step("bone\n", 2.0));
  for (int i = 0; i < 3; ++i) v.push_back(step("fever", 0.75));
  for (const char* q : {"qa", "qb", "qc"}) v.push_back(step(q, 4.0));
  for (int i = 0; i < 20; ++i) v.push_back(step(" \n", 3.0));  // whitespace only: skipped
  return v;
}

TokenCategoryMap fixture_map() {
  return TokenCategoryMap(Cats{{"action", {"Keep"}},
                           {"hedge", {"likely"}},
                           {"imaging", {"MRI"}},
                           {"anatomy", {"bone"}},
                           {"symptom", {"fever"}}});
}

}  // namespace

TEST(Analysis, HandArithmeticSingleCategory) {
  const TokenCategoryMap map(Cats{{"procedure", {"graft"}}});
  const std::vector<StepRecord> steps = {step("graft", 0.2), step(" graft", 0.4)};
  const auto r = aggregate_by_category(std::span<const StepRecord>(steps), map, 1, 1.0);
  ASSERT_EQ(r.per_category.size(), 1u);
  EXPECT_NEAR(r.per_category.at("procedure").mean_offset, 0.3, 1e-15);
  EXPECT_EQ(r.per_category.at("procedure").occurrence_count, 2u);
  EXPECT_EQ(r.per_category.at("procedure").token_count, 1u);
}

TEST(Analysis, DefaultFiltersKeepFrequentTokens) {
  const auto steps = fixture_steps();
  const auto r = aggregate_by_category(std::span<const StepRecord>(steps), fixture_map());
  EXPECT_EQ(r.kept_token_count, 2u);
  ASSERT_EQ(r.per_category.size(), 2u);
  EXPECT_DOUBLE_EQ(r.per_category.at("action").mean_offset, 0.375);
  EXPECT_EQ(r.per_category.at("action").occurrence_count, 8u);
  EXPECT_DOUBLE_EQ(r.per_category.at("hedge").mean_offset, -0.125);
  EXPECT_EQ(r.uncategorized_count, 0u);
}

TEST(Analysis, TopFractionAndMinFrequencyCombine) {
  const auto steps = fixture_steps();
  // top half of 8 distinct tokens: Keep, likely, MRI, bone; bone has 5 < 6
  const auto r = aggregate_by_category(std::span<const StepRecord>(steps), fixture_map(), 6, 0.5);
  EXPECT_EQ(r.kept_token_count, 3u);
  EXPECT_EQ(r.per_category.count("anatomy"), 0u);
  EXPECT_DOUBLE_EQ(r.per_category.at("imaging").mean_offset, 1.0);

  const auto all = aggregate_by_category(std::span<const StepRecord>(steps), fixture_map(), 1, 1.0);
  EXPECT_EQ(all.kept_token_count, 8u);
  EXPECT_EQ(all.per_category.size(), 5u);
  EXPECT_DOUBLE_EQ(all.per_category.at("anatomy").mean_offset, 2.0);
  EXPECT_DOUBLE_EQ(all.per_category.at("symptom").mean_offset, 0.75);
  EXPECT_EQ(all.uncategorized_count, 3u);
}

TEST(Analysis, CutoffRoundsUp) {
  std::vector<StepRecord> steps;
  for (const char* t : {"a", "b", "c"}) {
    for (int i = 0; i < 6; ++i) steps.push_back(step(t, 1.0));
  }
  const TokenCategoryMap map(Cats{{"x", {"a", "b", "c"}}});
  // ceil(0.25 * 3) = 1; ties rank by string so "a" survives
  const auto r = aggregate_by_category(std::span<const StepRecord>(steps), map);
  EXPECT_EQ(r.kept_token_count, 1u);
  EXPECT_EQ(r.per_category.at("x").token_count, 1u);
  // 0.5 * 4 is exactly 2 distinct tokens, not 3
  steps.clear();
  for (const char* t : {"a", "b", "c", "d"}) steps.push_back(step(t, 1.0));
  EXPECT_EQ(aggregate_by_category(std::span<const StepRecord>(steps), map, 1, 0.5).kept_token_count, 2u);
}

TEST(Analysis, ScalingOffsetsScalesMeans) {
  auto steps = fixture_steps();
  const auto before = aggregate_by_category(std::span<const StepRecord>(steps), fixture_map(), 1, 1.0);
  for (auto& s : steps) {
    for (auto& c : s.candidates) c.offset *= 3.0;
  }
  const auto after = aggregate_by_category(std::span<const StepRecord>(steps), fixture_map(), 1, 1.0);
  for (const auto& [name, st] : before.per_category) {
    EXPECT_NEAR(after.per_category.at(name).mean_offset, 3.0 * st.mean_offset, 1e-12) << name;
  }
}

TEST(Analysis, ParameterValidation) {
  const std::vector<StepRecord> steps;
  const auto span = std::span<const StepRecord>(steps);
  EXPECT_THROW(aggregate_by_category(span, fixture_map(), 0, 0.5), InvalidArgument);
  EXPECT_THROW(aggregate_by_category(span, fixture_map(), 1, 0.0), InvalidArgument);
  EXPECT_THROW(aggregate_by_category(span, fixture_map(), 1, 1.5), InvalidArgument);
  EXPECT_EQ(aggregate_by_category(span, fixture_map()).kept_token_count, 0u);
}

TEST(Analysis, CategoryMapRejectsOverlap) {
  EXPECT_THROW(TokenCategoryMap(Cats{{"a", {"x"}}, {"b", {"x"}}}), MalformedSpec);
  EXPECT_THROW(TokenCategoryMap::from_json({{"cats", {}}}), MalformedSpec);
  const auto m = TokenCategoryMap::from_json({{"categories", {{"a", {"x", "y"}}}}});
  EXPECT_EQ(m.category_of("y"), "a");
  EXPECT_FALSE(m.category_of("z"));
}

TEST(Analysis, ShippedCategoryMapLoads) {
  const auto m = TokenCategoryMap::load(std::string(CAPT_CONFIG_DIR) + "/../data/token_categories.json");
  std::size_t tokens = 0;
  for (const auto& [_, set] : m.categories()) tokens += set.size();
  EXPECT_EQ(m.categories().size(), 26u);
  EXPECT_EQ(tokens, 278u);
}

TEST(Analysis, AnnotationMarksFlipsAndSigns) {
  GenerationResult r;
  r.method = Method::capt;
  r.steps = {step("up", 0.5, 1), step("flip", 1.5, 2, true), step("down", -0.25, 3), step("flat", 0.0, 4)};
  for (std::size_t i = 0; i < r.steps.size(); ++i) r.steps[i].step_index = i;
  const auto a = annotate_output(r);
  ASSERT_EQ(a.spans.size(), 4u);
  EXPECT_EQ(a.change_count(), 1u);
  EXPECT_EQ(a.spans[0].sign, 1);
  EXPECT_EQ(a.spans[2].sign, -1);
  EXPECT_EQ(a.spans[2].magnitude, 0.25);
  EXPECT_EQ(a.spans[3].sign, 0);
  ASSERT_TRUE(a.spans[1].displaced);
  EXPECT_EQ(a.spans[1].displaced->value, 1002);
  EXPECT_EQ(a.spans[1].displaced_text, "decoy");
  EXPECT_FALSE(a.spans[0].displaced);

  const auto html = render_html(a);
  EXPECT_NE(html.find("rgba(230,159,0,0.800000)\"><s>decoy"), std::string::npos);
  EXPECT_NE(html.find("<s>decoy</s><b>flip</b>"), std::string::npos);
  EXPECT_NE(html.find("rgba(86,180,233,"), std::string::npos);
  EXPECT_NE(html.find("<span title=\"offset 0.000000\">flat</span>"), std::string::npos);
  EXPECT_EQ(html, render_html(annotate_output(read_trace_jsonl(write_trace_jsonl(r)))));
}

TEST(Analysis, AnnotationEscapesHtml) {
  GenerationResult r;
  r.steps = {step("<b>&", 1.0)};
  EXPECT_NE(render_html(annotate_output(r)).find("&lt;b&gt;&amp;"), std::string::npos);
}

TEST(Analysis, AnnotationRequiresCapt) {
  GenerationResult r;
  r.method = Method::unite;
  r.steps = {step("x", 1.0)};
  EXPECT_THROW(annotate_output(r), MethodMismatch);
}

TEST(Analysis, AggregatesAcrossResults) {
  std::vector<GenerationResult> results(2);
  results[0].steps = {step("graft", 0.2)};
  results[1].steps = {step("graft", 0.4), step("x", 1.0)};
  const TokenCategoryMap map(Cats{{"procedure", {"graft"}}});
  const auto r = aggregate_by_category(std::span<const GenerationResult>(results), map, 1, 1.0);
  EXPECT_NEAR(r.per_category.at("procedure").mean_offset, 0.3, 1e-15);
  EXPECT_EQ(r.uncategorized_count, 1u);
}
