#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "idmkit/action.hpp"
#include "idmkit/corpus.hpp"
#include "idmkit/video_pipeline.hpp"
#include "json.hpp"

namespace idm {

/// The seven application categories, in catalog order.
const std::vector<std::string>& app_categories();
/// Throws ValidationError for anything outside app_categories().
void validate_category(const std::string& category);

// ---------------------------------------------------------------------------
// Search

struct VideoMeta {
  std::string video_id;
  std::string title;
  std::string app;
  std::string category;
  std::filesystem::path frame_dir;
  double duration_s = 0.0;
};

void validate(const VideoMeta& meta);
nlohmann::json video_meta_to_json(const VideoMeta& meta);
VideoMeta video_meta_from_json(const nlohmann::json& j);

/// Lower-case alphanumeric runs.
std::vector<std::string> tokenize(const std::string& text);

struct SearchIndex {
  std::vector<VideoMeta> entries;
  /// token -> entry positions (ascending), over title and app tokens.
  std::map<std::string, std::vector<std::size_t>> inverted;
};

SearchIndex build_index(std::vector<VideoMeta> entries);
/// JSON array of VideoMeta; relative frame_dir paths resolve against the
/// index file's directory.
SearchIndex load_index(const std::filesystem::path& path);

struct SearchHit {
  const VideoMeta* meta = nullptr;
  int score = 0;
};

/// Entries sharing at least one token with the query, ranked by the number of
/// distinct matched query tokens (descending), ties by video_id. Throws
/// IoError if a hit's frame_dir does not exist.
std::vector<SearchHit> search(const SearchIndex& index, const std::string& query, int k = 15);

// ---------------------------------------------------------------------------
// Query refinement

class QueryRefiner {
 public:
  virtual ~QueryRefiner() = default;
  virtual std::string name() const = 0;
  /// May throw TransportError.
  virtual std::string refine(const std::string& instruction, const std::string& app) const = 0;
};

/// Lower-cases, strips punctuation, question framing and stop-words, drops
/// repeats and the app's own tokens, moves generic media words to the end,
/// prepends the app token and caps the result at 10 tokens.
class TemplateRefiner : public QueryRefiner {
 public:
  std::string name() const override { return "template"; }
  std::string refine(const std::string& instruction, const std::string& app) const override;
};

inline constexpr int kMaxQueryTokens = 10;

struct QueryResult {
  std::string query;
  std::string refiner;
  bool fallback = false;
  std::string fallback_reason;
};

/// Falls back to the template refiner when `refiner` fails; the result says so.
QueryResult make_query(const std::string& instruction, const std::string& app,
                       const QueryRefiner* refiner = nullptr);

// ---------------------------------------------------------------------------
// Candidate selection

struct Skip {
  std::string video_id;
  std::size_t rank = 0;
  std::string reason;
};

struct Selection {
  std::vector<VideoResult> kept;  // rank order
  std::vector<std::size_t> kept_ranks;
  std::vector<Skip> skipped;
};

inline constexpr std::size_t kMaxSelected = 3;

/// Walks candidates in rank order and keeps the first three that pass
/// filtering. Per-video failures become skips.
Selection select_for_inference(const std::vector<SearchHit>& candidates,
                               const FrameClassifier& classifier, const ActionPredictor& predictor,
                               const VideoOptions& options = {});

// ---------------------------------------------------------------------------
// Exemplars

enum class ExemplarVariant : std::uint8_t { frames_only, frames_actions, frames_actions_reasoning };

std::string_view to_string(ExemplarVariant variant);
ExemplarVariant parse_exemplar_variant(std::string_view name);

class Reasoner {
 public:
  virtual ~Reasoner() = default;
  virtual std::string name() const = 0;
  /// Rationale for actions[step]; may throw TransportError.
  virtual std::string explain(const std::string& task, const std::vector<Action>& actions,
                              std::size_t step) const = 0;
};

/// One sentence per action kind, filled with the action's arguments.
class TemplateReasoner : public Reasoner {
 public:
  std::string name() const override { return "template"; }
  std::string explain(const std::string& task, const std::vector<Action>& actions,
                      std::size_t step) const override;
};

struct ExemplarStep {
  std::string obs_ref;
  Action action;
  std::optional<std::string> reasoning;
};

struct Exemplar {
  std::string task;
  ExemplarVariant variant = ExemplarVariant::frames_actions_reasoning;
  std::vector<ExemplarStep> steps;
  std::string reasoner;
  bool reasoner_fallback = false;
};

/// One step per action; step i references the observation before action i.
/// `frame_prefix` is prepended to every frame reference.
Exemplar build_exemplars(const TrajectoryFile& trajectory, ExemplarVariant variant,
                         const Reasoner* reasoner = nullptr, const std::string& frame_prefix = "");

inline constexpr std::size_t kMinExemplars = 3;
inline constexpr std::size_t kMaxExemplars = 5;

struct PromptDocument {
  std::string text;
  nlohmann::json sidecar;
};

/// Serialization grammar, one item per line:
///   # Task: <task>
///   # Demonstrations: <n>            (then "# Note: permissive count" if allowed below 3)
///   ## Demonstration <i>: <task>
///   Variant: <variant>
///   Step <j>
///   Frame: <ref>
///   Action: <format_action>          (frames_actions, frames_actions_reasoning)
///   Reasoning: <text>                (frames_actions_reasoning)
///   ## Query
///   Task: <task>
/// Demonstration blocks are separated by blank lines.
PromptDocument format_icl_prompt(const std::vector<Exemplar>& exemplars, const std::string& task,
                                 bool allow_fewer = false);

// ---------------------------------------------------------------------------
// SFT export

struct SftTurn {
  std::string obs_ref;
  Action action;
};

struct SftRecord {
  std::string task;
  std::vector<SftTurn> turns;
  std::string source_video;
};

nlohmann::json sft_record_to_json(const SftRecord& record);
SftRecord sft_record_from_json(const nlohmann::json& j);

/// One turn per action, in trajectory order.
SftRecord to_sft_record(const TrajectoryFile& trajectory, const std::string& frame_prefix = "");
void export_sft(const std::vector<SftRecord>& records, const std::filesystem::path& path);
std::vector<SftRecord> read_sft(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Training-time index

struct AppEntry {
  std::string app;
  std::string category;
  std::vector<std::string> query_templates;
};

std::vector<AppEntry> app_catalog_from_json(const nlohmann::json& j);
std::vector<AppEntry> load_app_catalog(const std::filesystem::path& path);
/// The 69-entry catalog shipped with the library (data/app_catalog.json).
const std::vector<AppEntry>& shipped_app_catalog();

struct AppQuery {
  std::string app;
  std::string category;
  std::string query;
};

class QueryGenerator {
 public:
  virtual ~QueryGenerator() = default;
  virtual std::vector<std::string> queries(const AppEntry& entry) const = 0;
};

/// Substitutes the app name for "{app}" in each template.
class TemplateQueryGenerator : public QueryGenerator {
 public:
  std::vector<std::string> queries(const AppEntry& entry) const override;
};

std::vector<AppQuery> build_training_index(const std::vector<AppEntry>& catalog,
                                           const QueryGenerator* generator = nullptr);

// ---------------------------------------------------------------------------
// External clients

class HttpRefiner : public QueryRefiner {
 public:
  explicit HttpRefiner(std::string url, int timeout_seconds = 30)
      : url_(std::move(url)), timeout_(timeout_seconds) {}
  std::string name() const override { return "http"; }
  std::string refine(const std::string& instruction, const std::string& app) const override;

 private:
  std::string url_;
  int timeout_;
};

class HttpReasoner : public Reasoner {
 public:
  explicit HttpReasoner(std::string url, int timeout_seconds = 30)
      : url_(std::move(url)), timeout_(timeout_seconds) {}
  std::string name() const override { return "http"; }
  std::string explain(const std::string& task, const std::vector<Action>& actions,
                      std::size_t step) const override;

 private:
  std::string url_;
  int timeout_;
};

}  // namespace idm
