#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "frametrace/error.hpp"

namespace frametrace {

struct FrameSpec {
  std::string name;
  std::string description;
  std::optional<std::string> counter_frame;
};

// The ten socio-political frames with their model-written descriptions and
// the five counter-frame pairings.
inline const std::vector<FrameSpec>& frame_registry() {
  static const std::vector<FrameSpec> frames = {
      {"Nurturing Parent",
       "Views authorities as caring, protective, and guiding, with the goal "
       "of nurturing and empowering individuals",
       "Strict Father"},
      {"Strict Father",
       "Views authorities as strong, disciplinary, and responsible for "
       "maintaining order and discipline, often with a sense of moral "
       "authority",
       "Nurturing Parent"},
      {"We Are All in This Together",
       "Emphasizes collective responsibility, shared goals, and mutual "
       "support among individuals in a community",
       "Us vs. Them"},
      {"Us vs. Them",
       "Divides the world into opposing groups, often with a sense of "
       "competition, conflict, or mistrust between them",
       "We Are All in This Together"},
      {"Illusions to Enlightenment",
       "Sees knowledge and understanding as a process of revealing hidden "
       "truths and dispelling misconceptions",
       "Society of the Spectacle"},
      {"Society of the Spectacle",
       "Views modern society as a system of manipulation, where images and "
       "appearances shape people's perceptions and desires",
       "Illusions to Enlightenment"},
      {"Nature Cannot Be Controlled",
       "Sees nature as unpredictable, uncontrollable, and potentially "
       "threatening, requiring humility and adaptation",
       "Mastery Over Nature"},
      {"Mastery Over Nature",
       "Sees humans as capable of controlling and dominating nature through "
       "science, technology, and human ingenuity",
       "Nature Cannot Be Controlled"},
      {"Info. Spreads Like a Virus",
       "Views information as contagious, spreading rapidly and "
       "unpredictably through social networks",
       "Info. Follows Indiv. Disposi."},
      {"Info. Follows Indiv. Disposi.",
       "Sees people as filtering and interpreting information based on "
       "their existing beliefs, values, and personality traits",
       "Info. Spreads Like a Virus"},
  };
  return frames;
}

inline bool is_registered_frame(const std::string& name) {
  for (const auto& f : frame_registry())
    if (f.name == name) return true;
  return false;
}

// half-away-from-zero, matching the paper's table style (5/16 -> 31%)
inline long round_half_away(double x) {
  return static_cast<long>(x >= 0 ? std::floor(x + 0.5) : std::ceil(x - 0.5));
}

struct Annotation {
  bool coherent = false;
  bool evokes_frame = false;
  std::optional<bool> faithful;
};

struct StoryRecord {
  std::string id;
  std::string frame_label;
  std::string source;     // original | bible | scifi | synthetic
  std::string generator;  // model name
  std::string text;
  std::optional<Annotation> annotation;
  bool rephrased = false;
};

inline const std::set<std::string>& story_sources() {
  static const std::set<std::string> s = {"original", "bible", "scifi",
                                          "synthetic"};
  return s;
}

inline void validate_story(const StoryRecord& r) {
  if (r.id.empty())
    throw Error(ErrorCategory::validation, "story with empty id");
  if (!is_registered_frame(r.frame_label))
    throw Error(ErrorCategory::validation,
                "story " + r.id + ": unknown frame '" + r.frame_label + "'");
  if (!story_sources().count(r.source))
    throw Error(ErrorCategory::validation,
                "story " + r.id + ": unknown source '" + r.source + "'");
  // faithfulness only applies to quoted sources
  if (r.annotation && r.annotation->faithful &&
      r.source != "bible" && r.source != "scifi")
    throw Error(ErrorCategory::validation,
                "story " + r.id + ": faithful set for source " + r.source);
}

inline nlohmann::json story_to_json(const StoryRecord& r) {
  nlohmann::json j;
  j["id"] = r.id;
  j["frame_label"] = r.frame_label;
  j["source"] = r.source;
  j["generator"] = r.generator;
  j["text"] = r.text;
  j["rephrased"] = r.rephrased;
  if (r.annotation) {
    nlohmann::json a;
    a["coherent"] = r.annotation->coherent;
    a["evokes_frame"] = r.annotation->evokes_frame;
    if (r.annotation->faithful) a["faithful"] = *r.annotation->faithful;
    j["annotation"] = a;
  }
  return j;
}

inline StoryRecord story_from_json(const nlohmann::json& j) {
  StoryRecord r;
  r.id = j.at("id").get<std::string>();
  r.frame_label = j.at("frame_label").get<std::string>();
  r.source = j.at("source").get<std::string>();
  r.generator = j.value("generator", "");
  r.text = j.at("text").get<std::string>();
  r.rephrased = j.value("rephrased", false);
  if (j.contains("annotation") && !j["annotation"].is_null()) {
    Annotation a;
    const auto& ja = j["annotation"];
    a.coherent = ja.at("coherent").get<bool>();
    a.evokes_frame = ja.at("evokes_frame").get<bool>();
    if (ja.contains("faithful") && !ja["faithful"].is_null())
      a.faithful = ja["faithful"].get<bool>();
    r.annotation = a;
  }
  validate_story(r);
  return r;
}

inline std::vector<StoryRecord> load_stories(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::io, "cannot open stories: " + path);
  std::vector<StoryRecord> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCategory::parse,
                  path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    StoryRecord r = story_from_json(j);
    if (!seen.insert(r.id).second)
      throw Error(ErrorCategory::validation,
                  path + ":" + std::to_string(lineno) + ": duplicate id '" +
                      r.id + "'");
    out.push_back(std::move(r));
  }
  return out;
}

// whole-file atomic: write temp then rename
inline void save_stories(const std::vector<StoryRecord>& stories,
                         const std::string& path) {
  std::set<std::string> seen;
  for (const auto& r : stories) {
    validate_story(r);
    if (!seen.insert(r.id).second)
      throw Error(ErrorCategory::validation, "duplicate id '" + r.id + "'");
  }
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error(ErrorCategory::io, "cannot write: " + tmp);
    for (const auto& r : stories) out << story_to_json(r).dump() << "\n";
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw Error(ErrorCategory::io, "rename failed: " + path);
}

// ---- intercoder agreement ----

using AnnotationFile = std::map<std::string, Annotation>;  // story id -> ann

inline AnnotationFile load_annotations(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::io, "cannot open annotations: " + path);
  AnnotationFile out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCategory::parse,
                  path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    Annotation a;
    a.coherent = j.at("coherent").get<bool>();
    a.evokes_frame = j.at("evokes_frame").get<bool>();
    if (j.contains("faithful") && !j["faithful"].is_null())
      a.faithful = j["faithful"].get<bool>();
    out[j.at("story_id").get<std::string>()] = a;
  }
  return out;
}

// Percentage of (story, field) judgments identical between the two
// annotators, rounded to the nearest integer.
inline long agreement(const AnnotationFile& a, const AnnotationFile& b) {
  if (a.size() != b.size())
    throw Error(ErrorCategory::alignment, "annotation files differ in ids");
  std::size_t total = 0, match = 0;
  for (const auto& [id, ann_a] : a) {
    auto it = b.find(id);
    if (it == b.end())
      throw Error(ErrorCategory::alignment, "story " + id + " missing");
    const Annotation& ann_b = it->second;
    if (ann_a.faithful.has_value() != ann_b.faithful.has_value())
      throw Error(ErrorCategory::alignment,
                  "story " + id + ": annotators cover different fields");
    total += 2;
    match += (ann_a.coherent == ann_b.coherent) ? 1 : 0;
    match += (ann_a.evokes_frame == ann_b.evokes_frame) ? 1 : 0;
    if (ann_a.faithful) {
      total += 1;
      match += (*ann_a.faithful == *ann_b.faithful) ? 1 : 0;
    }
  }
  if (total == 0)
    throw Error(ErrorCategory::insufficient_data, "no judgments to compare");
  return round_half_away(100.0 * static_cast<double>(match) /
                         static_cast<double>(total));
}

// ---- correctness report (generator x source) ----

struct CorrectnessRow {
  std::string generator;
  std::string source;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::size_t faithful = 0;
  std::size_t faithful_denom = 0;  // correct quoted texts
  bool has_faithful = false;
};

inline std::vector<CorrectnessRow> correctness_report(
    const std::vector<StoryRecord>& stories) {
  std::vector<std::string> generator_order;
  std::map<std::pair<std::string, std::string>, CorrectnessRow> rows;
  for (const auto& r : stories) {
    if (!r.annotation)
      throw Error(ErrorCategory::completeness,
                  "story " + r.id + " is not annotated");
    auto key = std::make_pair(r.generator, r.source);
    auto it = rows.find(key);
    if (it == rows.end()) {
      if (std::find(generator_order.begin(), generator_order.end(),
                    r.generator) == generator_order.end())
        generator_order.push_back(r.generator);
      it = rows.emplace(key, CorrectnessRow{r.generator, r.source}).first;
    }
    CorrectnessRow& row = it->second;
    row.total += 1;
    bool quoted = r.source == "bible" || r.source == "scifi";
    row.has_faithful = row.has_faithful || quoted;
    if (r.annotation->evokes_frame) {
      row.correct += 1;
      if (quoted) {
        row.faithful_denom += 1;
        if (r.annotation->faithful && *r.annotation->faithful)
          row.faithful += 1;
      }
    }
  }
  // generators by first appearance, sources in the table's fixed order
  static const std::vector<std::string> source_order = {"original", "bible",
                                                        "scifi", "synthetic"};
  std::vector<CorrectnessRow> out;
  for (const auto& g : generator_order)
    for (const auto& s : source_order) {
      auto it = rows.find({g, s});
      if (it != rows.end()) out.push_back(it->second);
    }
  return out;
}

inline std::string correctness_csv(const std::vector<CorrectnessRow>& rows) {
  auto display_source = [](const std::string& s) -> std::string {
    if (s == "original") return "Original";
    if (s == "bible") return "Bible";
    if (s == "scifi") return "Sci-fi";
    return "Synthetic";
  };
  std::ostringstream out;
  out << "model,source,correct,faithful\n";
  for (const auto& r : rows) {
    out << r.generator << "," << display_source(r.source) << "," << r.correct
        << "/" << r.total << ",";
    if (r.has_faithful)
      out << r.faithful << "/" << r.faithful_denom;
    else
      out << "-";
    out << "\n";
  }
  return out.str();
}

// ---- zero-shot tally ----

struct ZeroShotRecord {
  std::string story_id;
  std::string frame_asked;
  int percent = 0;  // 0..100
  std::string model;
};

inline void validate_zeroshot(const ZeroShotRecord& r) {
  if (r.percent < 0 || r.percent > 100)
    throw Error(ErrorCategory::range,
                "zero-shot record " + r.story_id + ": percent out of range");
}

inline std::vector<ZeroShotRecord> load_zeroshot(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCategory::io, "cannot open records: " + path);
  std::vector<ZeroShotRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCategory::parse,
                  path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    ZeroShotRecord r{j.at("story_id").get<std::string>(),
                     j.at("frame_asked").get<std::string>(),
                     j.at("percent").get<int>(), j.value("model", "")};
    validate_zeroshot(r);
    out.push_back(std::move(r));
  }
  return out;
}

struct TallyCell {
  std::string group;
  std::string frame_asked;
  std::size_t count = 0;
  std::size_t group_size = 0;
  long percentage = 0;
};

struct TallyTable {
  std::vector<TallyCell> cells;
  int threshold = 80;
};

// Counts responses with percent >= threshold (inclusive) per
// (label group, asked frame); percentage over the group size.
inline TallyTable tally_zeroshot(
    const std::vector<ZeroShotRecord>& records,
    const std::map<std::string, std::string>& group_of, int threshold = 80) {
  TallyTable t;
  t.threshold = threshold;
  std::map<std::string, std::set<std::string>> group_members;
  std::vector<std::string> group_order, frame_order;
  for (const auto& r : records) {
    validate_zeroshot(r);
    auto it = group_of.find(r.story_id);
    if (it == group_of.end())
      throw Error(ErrorCategory::alignment,
                  "story " + r.story_id + " has no group");
    group_members[it->second].insert(r.story_id);
    if (std::find(group_order.begin(), group_order.end(), it->second) ==
        group_order.end())
      group_order.push_back(it->second);
    if (std::find(frame_order.begin(), frame_order.end(), r.frame_asked) ==
        frame_order.end())
      frame_order.push_back(r.frame_asked);
  }
  for (const auto& g : group_order)
    for (const auto& f : frame_order) {
      TallyCell cell;
      cell.group = g;
      cell.frame_asked = f;
      cell.group_size = group_members[g].size();
      for (const auto& r : records)
        if (group_of.at(r.story_id) == g && r.frame_asked == f &&
            r.percent >= threshold)
          cell.count += 1;
      cell.percentage = cell.group_size == 0
                            ? 0
                            : round_half_away(100.0 *
                                              static_cast<double>(cell.count) /
                                              static_cast<double>(
                                                  cell.group_size));
      t.cells.push_back(std::move(cell));
    }
  return t;
}

inline std::string tally_csv(const TallyTable& t) {
  std::ostringstream out;
  out << "group,frame_asked,count,group_size,percentage\n";
  for (const auto& c : t.cells)
    out << c.group << "," << c.frame_asked << "," << c.count << ","
        << c.group_size << "," << c.percentage << "\n";
  return out.str();
}

// Flags stories whose SF and NP zero-shot percents are both below the
// threshold, i.e. candidates for the control group.
inline bool evokes_neither(const std::vector<ZeroShotRecord>& records,
                           const std::string& story_id, int threshold = 80) {
  for (const auto& r : records) {
    if (r.story_id != story_id) continue;
    if ((r.frame_asked == "Strict Father" ||
         r.frame_asked == "Nurturing Parent") &&
        r.percent >= threshold)
      return false;
  }
  return true;
}

// ---- giveaway scanning ----

struct GiveawayMatch {
  std::size_t offset = 0;  // byte offset
  std::string word;
};

// Case-insensitive scan for "strict" (SF) or the prefix "nurtur" (NP).
// An empty result means the text passes the giveaway filter.
inline std::vector<GiveawayMatch> giveaway_scan(const std::string& text,
                                                const std::string& frame_label) {
  std::string needle;
  if (frame_label == "Strict Father")
    needle = "strict";
  else if (frame_label == "Nurturing Parent")
    needle = "nurtur";
  else
    throw Error(ErrorCategory::unsupported,
                "giveaway words are defined only for SF/NP, got '" +
                    frame_label + "'");
  std::string lower(text.size(), '\0');
  std::transform(text.begin(), text.end(), lower.begin(), [](unsigned char c) {
    return static_cast<char>(std::tolower(c));
  });
  std::vector<GiveawayMatch> out;
  std::size_t pos = 0;
  while ((pos = lower.find(needle, pos)) != std::string::npos) {
    out.push_back({pos, text.substr(pos, needle.size())});
    pos += 1;
  }
  return out;
}

}  // namespace frametrace
