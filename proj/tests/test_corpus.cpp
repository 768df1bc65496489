#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "frametrace/corpus.hpp"

using namespace frametrace;

namespace {

std::filesystem::path temp_file(const char* name) {
  auto dir = std::filesystem::temp_directory_path() / "ft_corpus";
  std::filesystem::create_directories(dir);
  return dir / name;
}

StoryRecord story(const std::string& id, const std::string& frame,
                  const std::string& source, const std::string& generator,
                  bool evokes, std::optional<bool> faithful = std::nullopt) {
  StoryRecord r;
  r.id = id;
  r.frame_label = frame;
  r.source = source;
  r.generator = generator;
  r.text = "text for " + id;
  Annotation a;
  a.coherent = true;
  a.evokes_frame = evokes;
  a.faithful = faithful;
  r.annotation = a;
  return r;
}

}  // namespace

TEST(Registry, TenFramesWithCounterPairs) {
  const auto& frames = frame_registry();
  ASSERT_EQ(frames.size(), 10u);
  for (const auto& f : frames) {
    ASSERT_TRUE(f.counter_frame.has_value()) << f.name;
    bool found = false;
    for (const auto& g : frames)
      if (g.name == *f.counter_frame) {
        EXPECT_EQ(g.counter_frame.value(), f.name);
        found = true;
      }
    EXPECT_TRUE(found) << f.name;
    EXPECT_FALSE(f.description.empty());
  }
  EXPECT_TRUE(is_registered_frame("Strict Father"));
  EXPECT_FALSE(is_registered_frame("strict father"));
}

TEST(Rounding, HalfAwayFromZero) {
  EXPECT_EQ(round_half_away(100.0 * 5 / 16), 31);
  EXPECT_EQ(round_half_away(100.0 * 17 / 120), 14);
  EXPECT_EQ(round_half_away(0.5), 1);
  EXPECT_EQ(round_half_away(-0.5), -1);
  EXPECT_EQ(round_half_away(2.4), 2);
}

TEST(Stories, RoundTripAndValidation) {
  std::vector<StoryRecord> stories = {
      story("a1", "Strict Father", "original", "gpt", true),
      story("a2", "Nurturing Parent", "bible", "gpt", true, true),
  };
  stories[1].rephrased = true;
  auto path = temp_file("stories.jsonl").string();
  save_stories(stories, path);
  auto back = load_stories(path);
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[0].id, "a1");
  EXPECT_EQ(back[1].frame_label, "Nurturing Parent");
  EXPECT_TRUE(back[1].rephrased);
  ASSERT_TRUE(back[1].annotation.has_value());
  EXPECT_EQ(back[1].annotation->faithful, std::optional<bool>(true));

  stories.push_back(story("a1", "Strict Father", "original", "gpt", true));
  EXPECT_THROW(save_stories(stories, path), Error);

  StoryRecord bad = story("b1", "Not A Frame", "original", "gpt", true);
  EXPECT_THROW(validate_story(bad), Error);
  bad = story("b2", "Strict Father", "podcast", "gpt", true);
  EXPECT_THROW(validate_story(bad), Error);
  // faithfulness only applies to quoted sources
  bad = story("b3", "Strict Father", "original", "gpt", true, true);
  EXPECT_THROW(validate_story(bad), Error);
}

TEST(Agreement, FixtureGives88Percent) {
  // 25 original stories, 2 judged fields each; 6 mismatches -> 44/50 = 88%
  AnnotationFile a, b;
  for (int i = 0; i < 25; ++i) {
    std::string id = "s" + std::to_string(i);
    Annotation ann;
    ann.coherent = true;
    ann.evokes_frame = true;
    a[id] = ann;
    Annotation other = ann;
    if (i < 6) other.evokes_frame = false;
    b[id] = other;
  }
  EXPECT_EQ(agreement(a, b), 88);
  EXPECT_EQ(agreement(b, a), 88);
}

TEST(Agreement, AlignmentErrors) {
  AnnotationFile a, b;
  a["x"] = {true, true, std::nullopt};
  EXPECT_THROW(agreement(a, b), Error);
  b["y"] = {true, true, std::nullopt};
  EXPECT_THROW(agreement(a, b), Error);
  b.clear();
  b["x"] = {true, true, true};  // covers a field the other annotator lacks
  EXPECT_THROW(agreement(a, b), Error);
}

TEST(Correctness, ReproducesPublishedTable) {
  struct Row {
    const char* model;
    const char* source;
    int correct, total, faithful, fdenom;
  };
  const Row table[] = {
      {"GPT-4", "original", 10, 10, 0, 0},
      {"GPT-4", "bible", 9, 10, 9, 9},
      {"GPT-4", "scifi", 8, 10, 5, 8},
      {"Mistral-7B", "original", 19, 20, 0, 0},
      {"Mistral-7B", "bible", 15, 20, 13, 15},
      {"Mistral-7B", "scifi", 13, 20, 6, 13},
      {"Llama-2-7B", "original", 18, 20, 0, 0},
      {"Llama-2-7B", "bible", 14, 20, 5, 14},
      {"Llama-2-7B", "scifi", 11, 20, 8, 11},
      {"Yi-6B", "original", 16, 20, 0, 0},
      {"Yi-6B", "bible", 7, 20, 6, 7},
      {"Yi-6B", "scifi", 16, 20, 10, 16},
      {"Vicuna-7B", "original", 16, 20, 0, 0},
      {"Vicuna-7B", "bible", 9, 20, 8, 9},
      {"Vicuna-7B", "scifi", 8, 20, 5, 8},
  };
  std::vector<StoryRecord> stories;
  int uid = 0;
  for (const auto& row : table) {
    bool quoted = std::string(row.source) != "original";
    for (int i = 0; i < row.total; ++i) {
      bool evokes = i < row.correct;
      std::optional<bool> faithful;
      if (quoted) faithful = evokes && i < row.faithful;
      stories.push_back(story("t" + std::to_string(uid++), "Strict Father",
                              row.source, row.model, evokes, faithful));
    }
  }
  auto rows = correctness_report(stories);
  ASSERT_EQ(rows.size(), 15u);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    EXPECT_EQ(rows[i].generator, table[i].model);
    EXPECT_EQ(rows[i].source, table[i].source);
    EXPECT_EQ(rows[i].correct, static_cast<std::size_t>(table[i].correct));
    EXPECT_EQ(rows[i].total, static_cast<std::size_t>(table[i].total));
    EXPECT_EQ(rows[i].faithful, static_cast<std::size_t>(table[i].faithful));
    EXPECT_EQ(rows[i].faithful_denom,
              static_cast<std::size_t>(table[i].fdenom));
  }
  std::string csv = correctness_csv(rows);
  EXPECT_NE(csv.find("GPT-4,Original,10/10,-"), std::string::npos);
  EXPECT_NE(csv.find("GPT-4,Bible,9/10,9/9"), std::string::npos);
  EXPECT_NE(csv.find("Vicuna-7B,Sci-fi,8/20,5/8"), std::string::npos);
}

TEST(Correctness, RequiresAnnotations) {
  StoryRecord r = story("u1", "Strict Father", "original", "gpt", true);
  r.annotation.reset();
  EXPECT_THROW(correctness_report({r}), Error);
}

namespace {

// reconstruction of the published zero-shot tally column
std::pair<std::vector<ZeroShotRecord>, std::map<std::string, std::string>>
zeroshot_fixture() {
  std::vector<ZeroShotRecord> records;
  std::map<std::string, std::string> group_of;
  auto add_group = [&](const std::string& group, int size, int sf_high,
                       int np_high) {
    for (int i = 0; i < size; ++i) {
      std::string id = group + "-" + std::to_string(i);
      group_of[id] = group;
      records.push_back({id, "Strict Father", i < sf_high ? 80 : 79, "m"});
      records.push_back({id, "Nurturing Parent", i < np_high ? 95 : 0, "m"});
    }
  };
  add_group("SF texts", 16, 16, 5);
  add_group("NP texts", 20, 3, 20);
  add_group("control", 120, 17, 18);
  return {records, group_of};
}

}  // namespace

TEST(ZeroShot, ReproducesPublishedTally) {
  auto [records, group_of] = zeroshot_fixture();
  TallyTable t = tally_zeroshot(records, group_of, 80);
  ASSERT_EQ(t.cells.size(), 6u);
  const std::size_t counts[6] = {16, 5, 3, 20, 17, 18};
  const long pcts[6] = {100, 31, 15, 100, 14, 15};
  const std::size_t sizes[6] = {16, 16, 20, 20, 120, 120};
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(t.cells[i].count, counts[i]) << i;
    EXPECT_EQ(t.cells[i].percentage, pcts[i]) << i;
    EXPECT_EQ(t.cells[i].group_size, sizes[i]) << i;
    EXPECT_LE(t.cells[i].count, t.cells[i].group_size);
  }
  std::string csv = tally_csv(t);
  EXPECT_NE(csv.find("SF texts,Strict Father,16,16,100"), std::string::npos);
  EXPECT_NE(csv.find("control,Strict Father,17,120,14"), std::string::npos);
}

TEST(ZeroShot, ThresholdIsInclusive) {
  std::vector<ZeroShotRecord> records = {{"s0", "Strict Father", 80, "m"},
                                         {"s1", "Strict Father", 79, "m"}};
  std::map<std::string, std::string> groups = {{"s0", "g"}, {"s1", "g"}};
  TallyTable t = tally_zeroshot(records, groups, 80);
  ASSERT_EQ(t.cells.size(), 1u);
  EXPECT_EQ(t.cells[0].count, 1u);
  EXPECT_EQ(t.cells[0].percentage, 50);
}

TEST(ZeroShot, RecordValidationAndIo) {
  ZeroShotRecord bad{"s", "f", 101, "m"};
  EXPECT_THROW(validate_zeroshot(bad), Error);
  auto path = temp_file("records.jsonl").string();
  {
    std::ofstream out(path);
    out << R"({"story_id":"s0","frame_asked":"Strict Father","percent":85})"
        << "\n";
  }
  auto records = load_zeroshot(path);
  ASSERT_EQ(records.size(), 1u);
  EXPECT_EQ(records[0].percent, 85);
  std::map<std::string, std::string> none;
  EXPECT_THROW(tally_zeroshot(records, none, 80), Error);
}

TEST(ZeroShot, ControlGroupPredicate) {
  std::vector<ZeroShotRecord> records = {
      {"s0", "Strict Father", 85, "m"},
      {"s0", "Nurturing Parent", 10, "m"},
      {"s1", "Strict Father", 10, "m"},
      {"s1", "Nurturing Parent", 10, "m"},
      {"s1", "Us vs. Them", 95, "m"},
  };
  EXPECT_FALSE(evokes_neither(records, "s0"));
  EXPECT_TRUE(evokes_neither(records, "s1"));
}

TEST(Giveaway, FindsWordsCaseInsensitively) {
  auto hits = giveaway_scan("The STRICT rules were strictly kept.",
                            "Strict Father");
  ASSERT_EQ(hits.size(), 2u);
  EXPECT_EQ(hits[0].offset, 4u);
  EXPECT_EQ(hits[0].word, "STRICT");
  EXPECT_EQ(hits[1].offset, 22u);

  auto np = giveaway_scan("A nurturing home, ever Nurtured.",
                          "Nurturing Parent");
  ASSERT_EQ(np.size(), 2u);
  EXPECT_EQ(np[0].offset, 2u);

  EXPECT_TRUE(giveaway_scan("gentle guidance", "Nurturing Parent").empty());
  EXPECT_THROW(giveaway_scan("text", "Us vs. Them"), Error);
}
