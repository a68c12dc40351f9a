#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "idmkit/action.hpp"
#include "idmkit/image.hpp"
#include "json.hpp"

namespace idm {

/// (O_t, a_t, O_{t+1}).
struct Transition {
  Observation obs_before;
  Action action;
  Observation obs_after;
};

enum class TrajectorySource : std::uint8_t { synthetic, video, imported };

std::string_view to_string(TrajectorySource source);
TrajectorySource parse_trajectory_source(std::string_view name);

/// Alternating observation/action sequence: observations.size() == actions.size() + 1.
struct Trajectory {
  std::string task;
  std::vector<Observation> observations;
  std::vector<Action> actions;
  TrajectorySource source = TrajectorySource::synthetic;
};

inline constexpr const char* kCorpusSchemaVersion = "1";

struct Manifest {
  std::string schema_version = kCorpusSchemaVersion;
  std::uint64_t seed = 0;
  std::string generator_config_digest;
  std::size_t count = 0;
};

struct TransitionCorpus {
  std::vector<Transition> transitions;
  Manifest manifest;

  std::size_t size() const { return transitions.size(); }
  bool empty() const { return transitions.empty(); }
};

void validate(const Transition& t);
void validate(const Trajectory& trajectory);
void validate(const TransitionCorpus& corpus);

/// `<source_id>_<frame_index>.png`
std::string frame_file_name(const Observation& obs);

/// Content hash of a transition: action fields plus both frames' pixels.
std::string transition_digest(const Transition& t);

/// Writes manifest.json, transitions.jsonl and frames/ under `dir`. Frames
/// shared between transitions are written once. Returns the SHA-256 of
/// transitions.jsonl.
std::string write_corpus(const TransitionCorpus& corpus, const std::filesystem::path& dir);

/// Reads and validates a corpus directory. Every record's action is validated,
/// every referenced frame is checked against its recorded SHA-256, and the
/// manifest count must match the number of records.
TransitionCorpus read_corpus(const std::filesystem::path& dir);

/// Digest a written corpus would have, without touching the filesystem.
std::string corpus_metadata_digest(const TransitionCorpus& corpus);

/// Field correspondences for importing an externally annotated transition set
/// (one JSON record per transition plus screenshot files).
struct MappingSpec {
  std::string records_file = "records.jsonl";
  std::string before_field;
  std::string after_field;
  std::string kind_field;
  /// External kind name -> internal kind. Scroll directions map via
  /// `scroll_up_kinds` / `scroll_down_kinds` instead.
  std::map<std::string, ActionKind> kind_map;
  std::vector<std::string> scroll_up_kinds;
  std::vector<std::string> scroll_down_kinds;
  std::string x_field;
  std::string y_field;
  std::string text_field;
  /// Optional per-record source resolution fields; when absent the before
  /// screenshot's dimensions are used.
  std::string width_field;
  std::string height_field;
  std::string source_id = "imported";
};

MappingSpec mapping_spec_from_json(const nlohmann::json& j);

struct ImportReport {
  TransitionCorpus corpus;
  std::size_t dropped = 0;
  std::map<std::string, std::size_t> dropped_by_kind;
};

ImportReport import_external(const std::filesystem::path& dir, const MappingSpec& mapping);

struct CorpusSplit {
  TransitionCorpus train;
  TransitionCorpus val;
  TransitionCorpus test;
};

/// Seeded shuffle, then floor allocation for val and test with the remainder
/// going to train.
CorpusSplit split_corpus(const TransitionCorpus& corpus, std::array<double, 3> ratios,
                         std::uint64_t seed);

// Trajectory files (trajectory.json) shared by the video pipeline and exporters.
nlohmann::json trajectory_to_json(const Trajectory& trajectory,
                                  const std::vector<std::string>& frame_refs);

struct TrajectoryFile {
  std::string task;
  std::vector<Action> actions;
  std::vector<std::string> frame_refs;
  TrajectorySource source = TrajectorySource::video;
  std::string source_video;
};

TrajectoryFile trajectory_file_from_json(const nlohmann::json& j);
TrajectoryFile read_trajectory_file(const std::filesystem::path& path);

}  // namespace idm
