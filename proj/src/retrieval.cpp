#include "idmkit/retrieval.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <set>

#include "idmkit/errors.hpp"
#include "idmkit/http.hpp"

namespace idm {
using nlohmann::json;
namespace fs = std::filesystem;

extern const char* const kShippedAppCatalog;

const std::vector<std::string>& app_categories() {
  static const std::vector<std::string> categories = {
      "Productivity",     "Programming",      "Design",        "Screen Editing",
      "Audio Production", "System Utilities", "Science & Data"};
  return categories;
}

void validate_category(const std::string& category) {
  const auto& all = app_categories();
  if (std::find(all.begin(), all.end(), category) == all.end()) {
    throw ValidationError("unknown category '" + category + "'");
  }
}

// ---------------------------------------------------------------------------
// Search

void validate(const VideoMeta& m) {
  if (m.video_id.empty()) throw ValidationError("video_id must be non-empty");
  if (m.title.empty()) throw ValidationError("video " + m.video_id + ": title must be non-empty");
  validate_category(m.category);
  if (!(m.duration_s >= 0.0)) throw ValidationError("video " + m.video_id + ": duration_s must be >= 0");
}

json video_meta_to_json(const VideoMeta& m) {
  return {{"video_id", m.video_id},   {"title", m.title},
          {"app", m.app},             {"category", m.category},
          {"frame_dir", m.frame_dir.generic_string()}, {"duration_s", m.duration_s}};
}

VideoMeta video_meta_from_json(const json& j) {
  VideoMeta m;
  try {
    m.video_id = j.at("video_id").get<std::string>();
    m.title = j.at("title").get<std::string>();
    m.app = j.value("app", "");
    m.category = j.at("category").get<std::string>();
    m.frame_dir = j.at("frame_dir").get<std::string>();
    m.duration_s = j.value("duration_s", 0.0);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("video entry: ") + e.what());
  }
  validate(m);
  return m;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (const char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u)) {
      cur.push_back(static_cast<char>(std::tolower(u)));
    } else if (!cur.empty()) {
      out.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

SearchIndex build_index(std::vector<VideoMeta> entries) {
  SearchIndex index;
  std::set<std::string> ids;
  for (const auto& e : entries) {
    validate(e);
    if (!ids.insert(e.video_id).second) throw ValidationError("duplicate video_id " + e.video_id);
  }
  index.entries = std::move(entries);
  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    std::set<std::string> tokens;
    for (auto& t : tokenize(index.entries[i].title)) tokens.insert(std::move(t));
    for (auto& t : tokenize(index.entries[i].app)) tokens.insert(std::move(t));
    for (const auto& t : tokens) index.inverted[t].push_back(i);
  }
  return index;
}

SearchIndex load_index(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read index " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("index " + path.string() + ": " + e.what());
  }
  if (!j.is_array()) throw ValidationError("index " + path.string() + " must be a JSON array");
  std::vector<VideoMeta> entries;
  for (const auto& e : j) {
    VideoMeta m = video_meta_from_json(e);
    if (m.frame_dir.is_relative()) m.frame_dir = path.parent_path() / m.frame_dir;
    entries.push_back(std::move(m));
  }
  return build_index(std::move(entries));
}

std::vector<SearchHit> search(const SearchIndex& index, const std::string& query, int k) {
  if (k < 1) throw ValidationError("search: k must be >= 1");
  std::vector<int> score(index.entries.size(), 0);
  std::set<std::string> seen;
  for (const auto& t : tokenize(query)) {
    if (!seen.insert(t).second) continue;
    const auto it = index.inverted.find(t);
    if (it == index.inverted.end()) continue;
    for (std::size_t i : it->second) ++score[i];
  }
  std::vector<SearchHit> hits;
  for (std::size_t i = 0; i < index.entries.size(); ++i) {
    if (score[i] > 0) hits.push_back({&index.entries[i], score[i]});
  }
  std::sort(hits.begin(), hits.end(), [](const SearchHit& a, const SearchHit& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.meta->video_id < b.meta->video_id;
  });
  if (hits.size() > static_cast<std::size_t>(k)) hits.resize(static_cast<std::size_t>(k));
  for (const auto& h : hits) {
    if (!fs::is_directory(h.meta->frame_dir)) {
      throw IoError("video " + h.meta->video_id + ": frame_dir " + h.meta->frame_dir.string() +
                    " does not exist");
    }
  }
  return hits;
}

// ---------------------------------------------------------------------------
// Query refinement

namespace {

const std::set<std::string>& stop_words() {
  static const std::set<std::string> words = {
      "a",     "about", "an",    "and",   "any",   "are",   "as",     "at",    "be",
      "by",    "can",   "could", "do",    "does",  "for",   "from",   "help",  "how",
      "i",     "if",    "in",    "into",  "is",    "it",    "its",    "me",    "my",
      "of",    "on",    "or",    "please", "should", "so",  "some",   "that",  "the",
      "their", "them",  "then",  "there", "these", "this",  "to",     "using", "via",
      "want",  "we",    "what",  "when",  "where", "which", "while",  "who",   "why",
      "will",  "with",  "would", "you",   "your"};
  return words;
}

// Low-information words kept after the specific terms so truncation drops them first.
const std::set<std::string>& generic_words() {
  static const std::set<std::string> words = {"video", "videos", "file", "files", "screen",
                                              "window", "app", "application", "program"};
  return words;
}

}  // namespace

std::string TemplateRefiner::refine(const std::string& instruction, const std::string& app) const {
  if (tokenize(instruction).empty()) throw ValidationError("instruction must be non-empty");
  const auto app_tokens = tokenize(app);
  const std::set<std::string> app_set(app_tokens.begin(), app_tokens.end());
  std::vector<std::string> specific, generic;
  std::set<std::string> seen(app_set);
  for (const auto& t : tokenize(instruction)) {
    if (stop_words().contains(t) || !seen.insert(t).second) continue;
    (generic_words().contains(t) ? generic : specific).push_back(t);
  }
  std::vector<std::string> out = app_tokens;
  out.insert(out.end(), specific.begin(), specific.end());
  out.insert(out.end(), generic.begin(), generic.end());
  if (out.size() > static_cast<std::size_t>(kMaxQueryTokens)) out.resize(kMaxQueryTokens);
  std::string q;
  for (const auto& t : out) q += (q.empty() ? "" : " ") + t;
  return q;
}

QueryResult make_query(const std::string& instruction, const std::string& app,
                       const QueryRefiner* refiner) {
  if (tokenize(instruction).empty()) throw ValidationError("instruction must be non-empty");
  const TemplateRefiner fallback;
  QueryResult r;
  if (refiner) {
    try {
      r.query = refiner->refine(instruction, app);
      r.refiner = refiner->name();
      if (tokenize(r.query).empty()) throw TransportError("refiner returned an empty query");
      return r;
    } catch (const TransportError& e) {
      r.fallback = true;
      r.fallback_reason = e.what();
    }
  }
  r.query = fallback.refine(instruction, app);
  r.refiner = fallback.name();
  return r;
}

std::string HttpRefiner::refine(const std::string& instruction, const std::string& app) const {
  const json reply = post_json(url_, {{"instruction", instruction}, {"app", app}}, timeout_);
  if (!reply.contains("query") || !reply["query"].is_string()) {
    throw TransportError("refiner reply has no string 'query'");
  }
  return reply["query"].get<std::string>();
}

// ---------------------------------------------------------------------------
// Candidate selection

Selection select_for_inference(const std::vector<SearchHit>& candidates,
                               const FrameClassifier& classifier, const ActionPredictor& predictor,
                               const VideoOptions& options) {
  Selection sel;
  for (std::size_t rank = 0; rank < candidates.size() && sel.kept.size() < kMaxSelected; ++rank) {
    const VideoMeta& meta = *candidates[rank].meta;
    try {
      VideoResult r = process_video(meta.frame_dir, predictor, classifier, meta.title, options);
      if (r.status != "kept") {
        sel.skipped.push_back({meta.video_id, rank + 1, r.reason});
        continue;
      }
      r.source_id = meta.video_id;
      sel.kept.push_back(std::move(r));
      sel.kept_ranks.push_back(rank + 1);
    } catch (const std::exception& e) {
      sel.skipped.push_back({meta.video_id, rank + 1, e.what()});
    }
  }
  return sel;
}

// ---------------------------------------------------------------------------
// Exemplars

namespace {

constexpr std::array<std::string_view, 3> kVariantNames = {"frames_only", "frames_actions",
                                                           "frames_actions_reasoning"};

bool single_line(const std::string& s) { return s.find_first_of("\r\n") == std::string::npos; }

}  // namespace

std::string_view to_string(ExemplarVariant v) { return kVariantNames[static_cast<std::size_t>(v)]; }

ExemplarVariant parse_exemplar_variant(std::string_view name) {
  for (std::size_t i = 0; i < kVariantNames.size(); ++i) {
    if (kVariantNames[i] == name) return static_cast<ExemplarVariant>(i);
  }
  throw ValidationError("unknown exemplar variant '" + std::string(name) + "'");
}

std::string TemplateReasoner::explain(const std::string&, const std::vector<Action>& actions,
                                      std::size_t step) const {
  const Action& a = actions.at(step);
  char buf[256];
  switch (a.kind) {
    case ActionKind::click:
      std::snprintf(buf, sizeof buf, "Click at (%d, %d) to activate the control that advances the task.",
                    *a.x_bin, *a.y_bin);
      break;
    case ActionKind::type:
      std::snprintf(buf, sizeof buf, "Type \"%s\" at (%d, %d) to enter the text the task needs.",
                    a.text->c_str(), *a.x_bin, *a.y_bin);
      break;
    case ActionKind::scroll:
      std::snprintf(buf, sizeof buf, "Scroll %s to bring the relevant part of the page into view.",
                    std::string(to_string(*a.scroll_dir)).c_str());
      break;
    case ActionKind::move:
      std::snprintf(buf, sizeof buf, "Move the pointer to (%d, %d) to reach the next target.",
                    *a.x_bin, *a.y_bin);
      break;
    case ActionKind::wait:
      std::snprintf(buf, sizeof buf, "Wait for the interface to finish updating.");
      break;
  }
  return buf;
}

std::string HttpReasoner::explain(const std::string& task, const std::vector<Action>& actions,
                                  std::size_t step) const {
  json list = json::array();
  for (const auto& a : actions) list.push_back(action_to_json(a));
  const json reply = post_json(url_, {{"task", task}, {"actions", list}, {"step", step}}, timeout_);
  if (!reply.contains("reasoning") || !reply["reasoning"].is_string()) {
    throw TransportError("reasoner reply has no string 'reasoning'");
  }
  return reply["reasoning"].get<std::string>();
}

Exemplar build_exemplars(const TrajectoryFile& trajectory, ExemplarVariant variant,
                         const Reasoner* reasoner, const std::string& frame_prefix) {
  if (trajectory.actions.empty()) throw ValidationError("exemplar: trajectory has no actions");
  if (trajectory.frame_refs.size() != trajectory.actions.size() + 1) {
    throw ValidationError("exemplar: expected one more frame than actions");
  }
  for (const auto& a : trajectory.actions) validate(a);
  Exemplar ex;
  ex.task = trajectory.task;
  ex.variant = variant;
  const TemplateReasoner fallback;
  ex.reasoner = reasoner ? reasoner->name() : fallback.name();
  for (std::size_t i = 0; i < trajectory.actions.size(); ++i) {
    ExemplarStep step{frame_prefix + trajectory.frame_refs[i], trajectory.actions[i], std::nullopt};
    if (variant == ExemplarVariant::frames_actions_reasoning) {
      std::string text;
      if (reasoner && !ex.reasoner_fallback) {
        try {
          text = reasoner->explain(trajectory.task, trajectory.actions, i);
          if (text.empty() || !single_line(text)) throw TransportError("reasoning must be one non-empty line");
        } catch (const TransportError&) {
          ex.reasoner_fallback = true;
        }
      }
      if (!reasoner || ex.reasoner_fallback) text = fallback.explain(trajectory.task, trajectory.actions, i);
      step.reasoning = std::move(text);
    }
    ex.steps.push_back(std::move(step));
  }
  if (ex.reasoner_fallback) {
    // Keep the exemplar internally consistent: every step from the template.
    for (std::size_t i = 0; i < ex.steps.size(); ++i) {
      ex.steps[i].reasoning = fallback.explain(trajectory.task, trajectory.actions, i);
    }
  }
  return ex;
}

PromptDocument format_icl_prompt(const std::vector<Exemplar>& exemplars, const std::string& task,
                                 bool allow_fewer) {
  const std::size_t n = exemplars.size();
  if (n > kMaxExemplars || n == 0 || (n < kMinExemplars && !allow_fewer)) {
    throw ValidationError("format_icl_prompt: expected 3 to 5 exemplars, got " + std::to_string(n));
  }
  if (task.empty() || !single_line(task)) throw ValidationError("prompt task must be one non-empty line");
  std::string out = "# Task: " + task + "\n# Demonstrations: " + std::to_string(n) + "\n";
  if (n < kMinExemplars) out += "# Note: permissive count\n";
  json frames = json::array();
  for (std::size_t i = 0; i < n; ++i) {
    const Exemplar& ex = exemplars[i];
    if (ex.steps.empty()) throw ValidationError("exemplar " + std::to_string(i + 1) + " has no steps");
    if (!single_line(ex.task)) throw ValidationError("exemplar task must be one line");
    out += "\n## Demonstration " + std::to_string(i + 1) + ": " + ex.task + "\n";
    out += "Variant: " + std::string(to_string(ex.variant)) + "\n";
    for (std::size_t j = 0; j < ex.steps.size(); ++j) {
      const ExemplarStep& s = ex.steps[j];
      if (!single_line(s.obs_ref)) throw ValidationError("frame reference must be one line");
      out += "Step " + std::to_string(j + 1) + "\nFrame: " + s.obs_ref + "\n";
      frames.push_back({{"demonstration", i + 1}, {"step", j + 1}, {"frame", s.obs_ref}});
      if (ex.variant != ExemplarVariant::frames_only) out += "Action: " + format_action(s.action) + "\n";
      if (ex.variant == ExemplarVariant::frames_actions_reasoning) {
        if (!s.reasoning || !single_line(*s.reasoning)) {
          throw ValidationError("reasoning variant needs one line of reasoning per step");
        }
        out += "Reasoning: " + *s.reasoning + "\n";
      }
    }
  }
  out += "\n## Query\nTask: " + task + "\n";
  json variants = json::array();
  for (const auto& ex : exemplars) variants.push_back(std::string(to_string(ex.variant)));
  return {out,
          {{"task", task},
           {"demonstrations", n},
           {"permissive_count", n < kMinExemplars},
           {"variants", variants},
           {"frames", frames}}};
}

// ---------------------------------------------------------------------------
// SFT export

json sft_record_to_json(const SftRecord& r) {
  json turns = json::array();
  for (const auto& t : r.turns) turns.push_back({{"obs", t.obs_ref}, {"action", action_to_json(t.action)}});
  return {{"task", r.task}, {"source_video", r.source_video}, {"turns", turns}};
}

SftRecord sft_record_from_json(const json& j) {
  SftRecord r;
  try {
    r.task = j.at("task").get<std::string>();
    r.source_video = j.value("source_video", "");
    for (const auto& t : j.at("turns")) {
      r.turns.push_back({t.at("obs").get<std::string>(), action_from_json(t.at("action"))});
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("sft record: ") + e.what());
  }
  return r;
}

SftRecord to_sft_record(const TrajectoryFile& trajectory, const std::string& frame_prefix) {
  if (trajectory.frame_refs.size() != trajectory.actions.size() + 1) {
    throw ValidationError("sft: expected one more frame than actions");
  }
  SftRecord r{trajectory.task, {}, trajectory.source_video};
  for (std::size_t i = 0; i < trajectory.actions.size(); ++i) {
    r.turns.push_back({frame_prefix + trajectory.frame_refs[i], trajectory.actions[i]});
  }
  return r;
}

void export_sft(const std::vector<SftRecord>& records, const fs::path& path) {
  std::string text;
  for (const auto& r : records) text += sft_record_to_json(r).dump() + "\n";
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed for " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::vector<SftRecord> read_sft(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<SftRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(sft_record_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      throw ValidationError(path.string() + " line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training-time index

std::vector<AppEntry> app_catalog_from_json(const json& j) {
  if (!j.is_array()) throw ValidationError("app catalog must be a JSON array");
  std::vector<AppEntry> out;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& e : j) {
    AppEntry a;
    try {
      a.app = e.at("app").get<std::string>();
      a.category = e.at("category").get<std::string>();
      a.query_templates = e.at("query_templates").get<std::vector<std::string>>();
    } catch (const json::exception& ex) {
      throw ValidationError(std::string("app catalog entry: ") + ex.what());
    }
    if (a.app.empty()) throw ValidationError("app catalog entry with empty app name");
    validate_category(a.category);
    if (!seen.insert({a.app, a.category}).second) {
      throw ValidationError("duplicate app catalog entry " + a.app + " / " + a.category);
    }
    out.push_back(std::move(a));
  }
  if (out.empty()) throw ValidationError("app catalog is empty");
  return out;
}

std::vector<AppEntry> load_app_catalog(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read app catalog " + path.string());
  try {
    return app_catalog_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ValidationError("app catalog " + path.string() + ": " + e.what());
  }
}

const std::vector<AppEntry>& shipped_app_catalog() {
  static const std::vector<AppEntry> catalog = app_catalog_from_json(json::parse(kShippedAppCatalog));
  return catalog;
}

std::vector<std::string> TemplateQueryGenerator::queries(const AppEntry& entry) const {
  std::vector<std::string> out;
  for (std::string t : entry.query_templates) {
    for (std::size_t pos; (pos = t.find("{app}")) != std::string::npos;) t.replace(pos, 5, entry.app);
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<AppQuery> build_training_index(const std::vector<AppEntry>& catalog,
                                           const QueryGenerator* generator) {
  if (catalog.empty()) throw ValidationError("app catalog is empty");
  const TemplateQueryGenerator fallback;
  const QueryGenerator& g = generator ? *generator : fallback;
  std::vector<AppQuery> out;
  for (const auto& entry : catalog) {
    validate_category(entry.category);
    for (auto& q : g.queries(entry)) out.push_back({entry.app, entry.category, std::move(q)});
  }
  return out;
}

}  // namespace idm
