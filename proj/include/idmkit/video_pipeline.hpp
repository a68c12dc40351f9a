#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "idmkit/corpus.hpp"
#include "idmkit/errors.hpp"
#include "idmkit/image.hpp"
#include "idmkit/training.hpp"
#include "json.hpp"

namespace idm {

struct TimedFrame {
  double timestamp = 0.0;
  Observation obs;
};

/// Frames in strictly increasing timestamp order.
struct FrameStream {
  std::string source_id;
  std::vector<TimedFrame> frames;
};

void validate(const FrameStream& stream);

/// Keeps the earliest frame of every interval [k / rate, (k + 1) / rate).
FrameStream sample_frames(const FrameStream& stream, double rate_hz = 1.0);

enum class FrameCategory : std::uint8_t {
  clean_screencast,
  zoomed_screencast,
  animated_transition,
  talking_head,
  slide_presentation,
  other
};

std::string_view to_string(FrameCategory category);
FrameCategory parse_frame_category(std::string_view name);

struct FilterVerdict {
  FrameCategory category = FrameCategory::other;
  double quality = 0.0;
  std::string reason;
};

nlohmann::json verdict_to_json(const FilterVerdict& verdict);

/// Per-frame statistics the heuristic classifier decides on. Luma is in [0, 1].
struct FrameFeatures {
  double luma_mean = 0.0;
  double luma_std = 0.0;
  /// Mean absolute 4-neighbour Laplacian over interior pixels.
  double sharpness = 0.0;
  /// Fraction of pixels whose horizontal or vertical step exceeds the edge
  /// threshold.
  double edge_density = 0.0;
  /// Fraction of the outer frame band that matches the band's dominant colour.
  double border_uniformity = 0.0;
  /// Luma standard deviation inside the band-stripped interior.
  double interior_std = 0.0;
  /// Mean per-pixel chroma (max - min channel), in [0, 1].
  double saturation = 0.0;
};


/// Versioned thresholds for the heuristic classifier, shipped as
/// data/filter_rules.json. Rules are checked in order; the first match wins:
///   luma_std < uniform_luma_std                          -> other
///   border_uniformity >= letterbox_uniformity and
///     interior_std >= letterbox_interior_std             -> zoomed_screencast
///   luma_mean < transition_luma_mean                     -> animated_transition
///   saturation > talking_head_saturation and
///     edge_density < talking_head_edge_density           -> talking_head
///   edge_density < slide_edge_density and
///     sharpness >= sharp_low                             -> slide_presentation
///   otherwise clean_screencast, quality from sharpness.
struct FilterRules {
  std::string version;
  double edge_threshold = 0.1;
  double band_fraction = 0.08;
  double uniform_luma_std = 0.02;
  double uniform_quality = 0.1;
  double letterbox_uniformity = 0.97;
  double letterbox_interior_std = 0.08;
  double zoomed_quality = 0.55;
  double transition_luma_mean = 0.12;
  double transition_quality = 0.3;
  double talking_head_saturation = 0.35;
  double talking_head_edge_density = 0.02;
  double talking_head_quality = 0.2;
  double slide_edge_density = 0.01;
  double slide_quality = 0.4;
  /// quality = clamp((sharpness - sharp_low) / (sharp_high - sharp_low), 0, 1)
  double sharp_low = 0.005;
  double sharp_high = 0.05;
  double clean_min_quality = 0.5;
};

void validate(const FilterRules& rules);
FilterRules filter_rules_from_json(const nlohmann::json& j);
nlohmann::json filter_rules_to_json(const FilterRules& rules);
FilterRules load_filter_rules(const std::filesystem::path& path);

/// Uses the rules' edge threshold and border band width.
FrameFeatures frame_features(const Image& image, const FilterRules& rules);
/// The rule table shipped with the library.
FilterRules default_filter_rules();

class FrameClassifier {
 public:
  virtual ~FrameClassifier() = default;
  /// May throw TransportError for external clients.
  virtual FilterVerdict classify(const Image& frame, std::size_t frame_index) const = 0;
};

class HeuristicClassifier : public FrameClassifier {
 public:
  explicit HeuristicClassifier(FilterRules rules = default_filter_rules());
  FilterVerdict classify(const Image& frame, std::size_t frame_index) const override;
  const FilterRules& rules() const { return rules_; }

 private:
  FilterRules rules_;
};

/// Client for a remote classifier: POSTs {"frame_index", "png_base64"} as JSON
/// to `url` and expects {"category", "quality", "reason"} back.
class HttpClassifier : public FrameClassifier {
 public:
  HttpClassifier(std::string url, int timeout_seconds = 30);
  FilterVerdict classify(const Image& frame, std::size_t frame_index) const override;

 private:
  std::string url_;
  int timeout_seconds_;
};

/// A classifier failure on one frame, with the verdicts produced before it.
class FrameScoringError : public TransportError {
 public:
  FrameScoringError(const std::string& what, std::size_t frame_index,
                    std::vector<FilterVerdict> partial)
      : TransportError(what), frame_index_(frame_index), partial_(std::move(partial)) {}
  std::size_t frame_index() const { return frame_index_; }
  const std::vector<FilterVerdict>& partial() const { return partial_; }

 private:
  std::size_t frame_index_;
  std::vector<FilterVerdict> partial_;
};

struct ScoringPolicy {
  /// Score a frame with the heuristic when the classifier fails instead of
  /// propagating the failure.
  bool fallback_to_heuristic = false;
  int workers = 1;
};

FilterVerdict score_frame(const Image& frame, const FrameClassifier& classifier,
                          std::size_t frame_index = 0, const ScoringPolicy& policy = {});

inline constexpr double kKeepThreshold = 0.8;
inline constexpr double kRetainQuality = 0.6;
inline constexpr double kWaitDiffFraction = 1e-4;

struct VideoDecision {
  bool keep = false;
  double mean_quality = 0.0;
  std::vector<std::size_t> retained_frames;
  std::vector<FilterVerdict> per_frame;
};

nlohmann::json decision_to_json(const VideoDecision& decision);

/// keep iff mean quality > 0.8; retained frames are clean screencasts with
/// quality >= 0.6. Throws FrameScoringError on classifier failure.
VideoDecision decide(std::vector<FilterVerdict> per_frame);
VideoDecision filter_video(const FrameStream& stream, const FrameClassifier& classifier,
                           const ScoringPolicy& policy = {});

/// actions[i] labels frames[i] -> frames[i + 1]. Pairs differing in fewer
/// than 1e-4 of their pixels are labeled wait without querying the predictor.
Trajectory label_trajectory(const ActionPredictor& predictor, const FrameStream& stream,
                            const std::string& task);

/// Looks transitions up by pixel content; used to check the labeling plumbing
/// against environment ground truth.
class OraclePredictor : public ActionPredictor {
 public:
  explicit OraclePredictor(const std::vector<Transition>& transitions);
  Action predict(const Image& before, const Image& after) const override;
  std::size_t size() const { return table_.size(); }

 private:
  std::map<std::string, Action> table_;
};

/// `frames/<seconds>.<millis>.png`, seconds zero-padded to six digits.
std::string frame_dir_name(double timestamp);
/// Reads `dir/frames/*.png` ordered by file name.
FrameStream read_frame_dir(const std::filesystem::path& dir);
void write_frame_dir(const FrameStream& stream, const std::filesystem::path& dir);

struct VideoResult {
  VideoDecision decision;
  /// Present iff the video was kept and at least two frames were retained.
  std::optional<Trajectory> trajectory;
  std::vector<std::string> frame_refs;
  std::string source_id;
  std::string status;  // "kept" or "rejected"
  std::string reason;
};

struct VideoOptions {
  double rate_hz = 1.0;
  ScoringPolicy scoring;
};

/// Sample, filter and (when kept) label the retained frames.
VideoResult process_video(const std::filesystem::path& dir, const ActionPredictor& predictor,
                          const FrameClassifier& classifier, const std::string& task,
                          const VideoOptions& options = {});

/// trajectory.json plus the retained frames, or rejected.json.
void write_video_result(const VideoResult& result, const std::filesystem::path& out_dir);

}  // namespace idm
