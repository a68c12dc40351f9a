#include "idmkit/video_pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <thread>

#include "idmkit/digest.hpp"
#include "idmkit/http.hpp"
#include "idmkit/png_io.hpp"

namespace idm {
using nlohmann::json;

extern const char* const kShippedFilterRules;

void validate(const FrameStream& stream) {
  for (std::size_t i = 0; i < stream.frames.size(); ++i) {
    const auto& f = stream.frames[i];
    if (!f.obs.pixels) throw ValidationError("frame " + std::to_string(i) + ": missing pixels");
    if (!std::isfinite(f.timestamp) || f.timestamp < 0.0) {
      throw ValidationError("frame " + std::to_string(i) + ": timestamp must be finite and >= 0");
    }
    if (i > 0 && !(f.timestamp > stream.frames[i - 1].timestamp)) {
      throw ValidationError("frame " + std::to_string(i) + ": timestamps must strictly increase");
    }
  }
}

FrameStream sample_frames(const FrameStream& stream, double rate_hz) {
  if (!(rate_hz > 0.0) || !std::isfinite(rate_hz)) {
    throw ValidationError("sample_frames: rate_hz must be > 0");
  }
  validate(stream);
  FrameStream out;
  out.source_id = stream.source_id;
  std::optional<long long> last_interval;
  for (const auto& f : stream.frames) {
    const auto k = static_cast<long long>(std::floor(f.timestamp * rate_hz));
    if (last_interval && k == *last_interval) continue;
    last_interval = k;
    out.frames.push_back(f);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Frame classification

namespace {

constexpr std::array<std::string_view, 6> kCategoryNames = {
    "clean_screencast", "zoomed_screencast", "animated_transition",
    "talking_head",     "slide_presentation", "other"};

double luma(Rgb c) { return (0.299 * c.r + 0.587 * c.g + 0.114 * c.b) / 255.0; }

}  // namespace

std::string_view to_string(FrameCategory category) {
  return kCategoryNames[static_cast<std::size_t>(category)];
}

FrameCategory parse_frame_category(std::string_view name) {
  for (std::size_t i = 0; i < kCategoryNames.size(); ++i) {
    if (kCategoryNames[i] == name) return static_cast<FrameCategory>(i);
  }
  throw ValidationError("unknown frame category '" + std::string(name) + "'");
}

json verdict_to_json(const FilterVerdict& v) {
  return {{"category", std::string(to_string(v.category))},
          {"quality", v.quality},
          {"reason", v.reason}};
}

FrameFeatures frame_features(const Image& image, const FilterRules& rules) {
  const int w = image.width(), h = image.height();
  if (w < 3 || h < 3) throw ValidationError("frame_features: frame must be at least 3x3");
  std::vector<double> y(static_cast<std::size_t>(w) * h);
  double sat = 0.0;
  for (int yy = 0; yy < h; ++yy) {
    for (int xx = 0; xx < w; ++xx) {
      const Rgb c = image.at(xx, yy);
      y[static_cast<std::size_t>(yy) * w + xx] = luma(c);
      sat += (std::max({c.r, c.g, c.b}) - std::min({c.r, c.g, c.b})) / 255.0;
    }
  }
  const auto at = [&](int xx, int yy) { return y[static_cast<std::size_t>(yy) * w + xx]; };
  const double n = static_cast<double>(w) * h;

  FrameFeatures f;
  f.saturation = sat / n;
  double sum = 0.0, sq = 0.0;
  for (double v : y) sum += v, sq += v * v;
  f.luma_mean = sum / n;
  f.luma_std = std::sqrt(std::max(0.0, sq / n - f.luma_mean * f.luma_mean));

  double lap = 0.0;
  for (int yy = 1; yy < h - 1; ++yy) {
    for (int xx = 1; xx < w - 1; ++xx) {
      lap += std::abs(4 * at(xx, yy) - at(xx - 1, yy) - at(xx + 1, yy) - at(xx, yy - 1) -
                      at(xx, yy + 1));
    }
  }
  f.sharpness = lap / (static_cast<double>(w - 2) * (h - 2));

  std::size_t edges = 0;
  for (int yy = 0; yy < h - 1; ++yy) {
    for (int xx = 0; xx < w - 1; ++xx) {
      const double v = at(xx, yy);
      if (std::abs(at(xx + 1, yy) - v) > rules.edge_threshold ||
          std::abs(at(xx, yy + 1) - v) > rules.edge_threshold) {
        ++edges;
      }
    }
  }
  f.edge_density = static_cast<double>(edges) / (static_cast<double>(w - 1) * (h - 1));

  const int bx = std::max(1, static_cast<int>(std::lround(rules.band_fraction * w)));
  const int by = std::max(1, static_cast<int>(std::lround(rules.band_fraction * h)));
  std::map<std::array<std::uint8_t, 3>, std::size_t> band;
  std::size_t band_n = 0;
  double in_sum = 0.0, in_sq = 0.0;
  std::size_t in_n = 0;
  for (int yy = 0; yy < h; ++yy) {
    for (int xx = 0; xx < w; ++xx) {
      const bool in_band = xx < bx || xx >= w - bx || yy < by || yy >= h - by;
      if (in_band) {
        const Rgb c = image.at(xx, yy);
        ++band[{c.r, c.g, c.b}];
        ++band_n;
      } else {
        const double v = at(xx, yy);
        in_sum += v, in_sq += v * v, ++in_n;
      }
    }
  }
  std::size_t dominant = 0;
  for (const auto& [_, count] : band) dominant = std::max(dominant, count);
  f.border_uniformity = band_n ? static_cast<double>(dominant) / band_n : 0.0;
  if (in_n > 0) {
    const double m = in_sum / in_n;
    f.interior_std = std::sqrt(std::max(0.0, in_sq / in_n - m * m));
  }
  return f;
}

void validate(const FilterRules& r) {
  const auto unit = [](double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError(std::string("filter rules: ") + name + " must be in [0, 1]");
  };
  unit(r.edge_threshold, "edge_threshold");
  unit(r.band_fraction, "band_fraction");
  unit(r.uniform_quality, "uniform_quality");
  unit(r.zoomed_quality, "zoomed_quality");
  unit(r.transition_quality, "transition_quality");
  unit(r.talking_head_quality, "talking_head_quality");
  unit(r.slide_quality, "slide_quality");
  unit(r.clean_min_quality, "clean_min_quality");
  if (!(r.band_fraction < 0.5)) throw ValidationError("filter rules: band_fraction must be < 0.5");
  if (!(r.sharp_high > r.sharp_low)) throw ValidationError("filter rules: sharp_high must exceed sharp_low");
  if (r.version.empty()) throw ValidationError("filter rules: version is required");
}

#define IDMKIT_FILTER_FIELDS(X)                                                              \
  X(edge_threshold) X(band_fraction) X(uniform_luma_std) X(uniform_quality)                  \
  X(letterbox_uniformity) X(letterbox_interior_std) X(zoomed_quality) X(transition_luma_mean) \
  X(transition_quality) X(talking_head_saturation) X(talking_head_edge_density)              \
  X(talking_head_quality) X(slide_edge_density) X(slide_quality) X(sharp_low) X(sharp_high)  \
  X(clean_min_quality)

FilterRules filter_rules_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("filter rules must be a JSON object");
  static const std::set<std::string> known = {
#define X(name) #name,
      IDMKIT_FILTER_FIELDS(X)
#undef X
      "version"};
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ValidationError("unknown filter rule '" + key + "'");
  }
  FilterRules r;
  try {
    r.version = j.at("version").get<std::string>();
#define X(name) \
  if (j.contains(#name)) r.name = j[#name].get<double>();
    IDMKIT_FILTER_FIELDS(X)
#undef X
  } catch (const json::exception& e) {
    throw ValidationError(std::string("filter rules: ") + e.what());
  }
  validate(r);
  return r;
}

json filter_rules_to_json(const FilterRules& r) {
  json j = {{"version", r.version}};
#define X(name) j[#name] = r.name;
  IDMKIT_FILTER_FIELDS(X)
#undef X
  return j;
}

FilterRules load_filter_rules(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read filter rules " + path.string());
  try {
    return filter_rules_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ValidationError("filter rules " + path.string() + ": " + e.what());
  }
}

FilterRules default_filter_rules() {
  static const FilterRules rules = filter_rules_from_json(json::parse(kShippedFilterRules));
  return rules;
}

HeuristicClassifier::HeuristicClassifier(FilterRules rules) : rules_(std::move(rules)) {
  validate(rules_);
}

FilterVerdict HeuristicClassifier::classify(const Image& frame, std::size_t) const {
  const FrameFeatures f = frame_features(frame, rules_);
  const FilterRules& r = rules_;
  char buf[160];
  if (f.luma_std < r.uniform_luma_std) {
    std::snprintf(buf, sizeof buf, "uniform frame (luma std %.4f)", f.luma_std);
    return {FrameCategory::other, r.uniform_quality, buf};
  }
  if (f.border_uniformity >= r.letterbox_uniformity && f.interior_std >= r.letterbox_interior_std) {
    std::snprintf(buf, sizeof buf, "uniform border band (%.3f)", f.border_uniformity);
    return {FrameCategory::zoomed_screencast, r.zoomed_quality, buf};
  }
  if (f.luma_mean < r.transition_luma_mean) {
    std::snprintf(buf, sizeof buf, "dark frame (luma mean %.3f)", f.luma_mean);
    return {FrameCategory::animated_transition, r.transition_quality, buf};
  }
  if (f.saturation > r.talking_head_saturation && f.edge_density < r.talking_head_edge_density) {
    std::snprintf(buf, sizeof buf, "saturated, few edges (sat %.3f, edges %.4f)", f.saturation,
                  f.edge_density);
    return {FrameCategory::talking_head, r.talking_head_quality, buf};
  }
  if (f.edge_density < r.slide_edge_density && f.sharpness >= r.sharp_low) {
    std::snprintf(buf, sizeof buf, "few edges (%.4f)", f.edge_density);
    return {FrameCategory::slide_presentation, r.slide_quality, buf};
  }
  const double q = std::clamp((f.sharpness - r.sharp_low) / (r.sharp_high - r.sharp_low), 0.0, 1.0);
  std::snprintf(buf, sizeof buf, "sharpness %.4f", f.sharpness);
  return {FrameCategory::clean_screencast, q, buf};
}

namespace {

std::string base64(const std::string& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

}  // namespace

HttpClassifier::HttpClassifier(std::string url, int timeout_seconds)
    : url_(std::move(url)), timeout_seconds_(timeout_seconds) {
  if (url_.find("://") == std::string::npos) {
    throw ValidationError("classifier url needs a scheme: " + url_);
  }
}

FilterVerdict HttpClassifier::classify(const Image& frame, std::size_t frame_index) const {
  const json reply = post_json(
      url_, {{"frame_index", frame_index}, {"png_base64", base64(encode_png(frame))}},
      timeout_seconds_);
  try {
    FilterVerdict v;
    v.category = parse_frame_category(reply.at("category").get<std::string>());
    v.quality = reply.at("quality").get<double>();
    v.reason = reply.value("reason", "");
    if (!(v.quality >= 0.0 && v.quality <= 1.0)) throw ValidationError("quality outside [0, 1]");
    return v;
  } catch (const std::exception& e) {
    throw TransportError(std::string("malformed classifier reply: ") + e.what());
  }
}

FilterVerdict score_frame(const Image& frame, const FrameClassifier& classifier,
                          std::size_t frame_index, const ScoringPolicy& policy) {
  try {
    FilterVerdict v = classifier.classify(frame, frame_index);
    if (!(v.quality >= 0.0 && v.quality <= 1.0)) {
      throw TransportError("classifier quality outside [0, 1]");
    }
    return v;
  } catch (const TransportError& e) {
    if (!policy.fallback_to_heuristic) throw;
    FilterVerdict v = HeuristicClassifier().classify(frame, frame_index);
    v.reason = "heuristic fallback (" + std::string(e.what()) + "): " + v.reason;
    return v;
  }
}

json decision_to_json(const VideoDecision& d) {
  json frames = json::array();
  for (const auto& v : d.per_frame) frames.push_back(verdict_to_json(v));
  return {{"keep", d.keep},
          {"mean_quality", d.mean_quality},
          {"retained_frames", d.retained_frames},
          {"per_frame", frames}};
}

VideoDecision decide(std::vector<FilterVerdict> per_frame) {
  VideoDecision d;
  double sum = 0.0;
  for (std::size_t i = 0; i < per_frame.size(); ++i) {
    const auto& v = per_frame[i];
    sum += v.quality;
    if (v.category == FrameCategory::clean_screencast && v.quality >= kRetainQuality) {
      d.retained_frames.push_back(i);
    }
  }
  d.mean_quality = per_frame.empty() ? 0.0 : sum / static_cast<double>(per_frame.size());
  d.keep = d.mean_quality > kKeepThreshold;
  d.per_frame = std::move(per_frame);
  return d;
}

VideoDecision filter_video(const FrameStream& stream, const FrameClassifier& classifier,
                           const ScoringPolicy& policy) {
  validate(stream);
  const std::size_t n = stream.frames.size();
  std::vector<std::optional<FilterVerdict>> out(n);
  std::vector<std::optional<std::string>> errors(n);
  const auto work = [&](std::size_t begin, std::size_t step) {
    for (std::size_t i = begin; i < n; i += step) {
      try {
        out[i] = score_frame(stream.frames[i].obs.image(), classifier, i, policy);
      } catch (const TransportError& e) {
        errors[i] = e.what();
      }
    }
  };
  const auto workers = static_cast<std::size_t>(std::max(1, policy.workers));
  if (workers == 1 || n < 2) {
    work(0, 1);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w) pool.emplace_back(work, w, workers);
  }
  std::vector<FilterVerdict> verdicts;
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i]) {
      throw FrameScoringError("frame " + std::to_string(i) + ": " + *errors[i], i,
                              std::move(verdicts));
    }
    verdicts.push_back(std::move(*out[i]));
  }
  return decide(std::move(verdicts));
}

// ---------------------------------------------------------------------------
// Labeling

Trajectory label_trajectory(const ActionPredictor& predictor, const FrameStream& stream,
                            const std::string& task) {
  validate(stream);
  if (stream.frames.size() < 2) {
    throw ValidationError("label_trajectory: need at least 2 frames, got " +
                          std::to_string(stream.frames.size()));
  }
  Trajectory t;
  t.task = task;
  t.source = TrajectorySource::video;
  for (std::size_t i = 0; i < stream.frames.size(); ++i) {
    Observation obs = stream.frames[i].obs;
    obs.frame_index = static_cast<int>(i);
    if (obs.source_id.empty()) obs.source_id = stream.source_id;
    t.observations.push_back(std::move(obs));
  }
  std::vector<std::size_t> queried;
  std::vector<const Image*> before, after;
  t.actions.assign(stream.frames.size() - 1, Action::wait());
  for (std::size_t i = 0; i + 1 < stream.frames.size(); ++i) {
    const Image& a = stream.frames[i].obs.image();
    const Image& b = stream.frames[i + 1].obs.image();
    const bool same_size = a.width() == b.width() && a.height() == b.height();
    if (same_size && diff_fraction(a, b) < kWaitDiffFraction) continue;
    queried.push_back(i);
    before.push_back(&a);
    after.push_back(&b);
  }
  if (!queried.empty()) {
    const auto predicted = predictor.predict_batch(before, after);
    for (std::size_t k = 0; k < queried.size(); ++k) {
      validate(predicted[k]);
      t.actions[queried[k]] = predicted[k];
    }
  }
  validate(t);
  return t;
}

namespace {

std::string pair_key(const Image& before, const Image& after) {
  return sha256_hex(before.bytes()) + sha256_hex(after.bytes());
}

}  // namespace

OraclePredictor::OraclePredictor(const std::vector<Transition>& transitions) {
  for (const auto& t : transitions) {
    const auto key = pair_key(t.obs_before.image(), t.obs_after.image());
    const auto [it, inserted] = table_.emplace(key, t.action);
    if (!inserted && it->second != t.action) {
      throw ValidationError("oracle: one frame pair carries two different actions");
    }
  }
}

Action OraclePredictor::predict(const Image& before, const Image& after) const {
  const auto it = table_.find(pair_key(before, after));
  if (it == table_.end()) throw ValidationError("oracle: frame pair not in the ground-truth table");
  return it->second;
}

// ---------------------------------------------------------------------------
// Frame directories

std::string frame_dir_name(double timestamp) {
  if (!(timestamp >= 0.0) || timestamp >= 1e6) {
    throw ValidationError("frame timestamp must be in [0, 1e6)");
  }
  const auto millis = static_cast<long long>(std::llround(timestamp * 1000.0));
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06lld.%03lld.png", millis / 1000, millis % 1000);
  return buf;
}

namespace {

std::optional<double> parse_frame_name(const std::string& name) {
  long long s = 0, ms = 0;
  int consumed = 0;
  if (std::sscanf(name.c_str(), "%lld.%3lld.png%n", &s, &ms, &consumed) != 2) return std::nullopt;
  if (consumed != static_cast<int>(name.size()) || s < 0 || ms < 0) return std::nullopt;
  return static_cast<double>(s) + static_cast<double>(ms) / 1000.0;
}

}  // namespace

FrameStream read_frame_dir(const std::filesystem::path& dir) {
  const auto frames_dir = dir / "frames";
  if (!std::filesystem::is_directory(frames_dir)) {
    throw ValidationError("no frames/ directory under " + dir.string());
  }
  std::vector<std::string> names;
  for (const auto& entry : std::filesystem::directory_iterator(frames_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") {
      names.push_back(entry.path().filename().string());
    }
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw ValidationError("frame directory " + frames_dir.string() + " is empty");
  FrameStream stream;
  stream.source_id = dir.filename().string();
  if (stream.source_id.empty()) stream.source_id = dir.parent_path().filename().string();
  for (std::size_t i = 0; i < names.size(); ++i) {
    const auto ts = parse_frame_name(names[i]);
    if (!ts) throw ValidationError("frame file '" + names[i] + "' is not named <seconds>.<millis>.png");
    Observation obs;
    obs.pixels = std::make_shared<const Image>(read_png(frames_dir / names[i]));
    obs.frame_index = static_cast<int>(i);
    obs.source_id = stream.source_id;
    stream.frames.push_back({*ts, std::move(obs)});
  }
  validate(stream);
  return stream;
}

void write_frame_dir(const FrameStream& stream, const std::filesystem::path& dir) {
  validate(stream);
  std::error_code ec;
  std::filesystem::create_directories(dir / "frames", ec);
  if (ec) throw IoError("cannot create " + (dir / "frames").string() + ": " + ec.message());
  for (const auto& f : stream.frames) write_png(dir / "frames" / frame_dir_name(f.timestamp), f.obs.image());
}

VideoResult process_video(const std::filesystem::path& dir, const ActionPredictor& predictor,
                          const FrameClassifier& classifier, const std::string& task,
                          const VideoOptions& options) {
  const FrameStream raw = read_frame_dir(dir);
  const FrameStream sampled = sample_frames(raw, options.rate_hz);
  VideoResult result;
  result.source_id = raw.source_id;
  result.decision = filter_video(sampled, classifier, options.scoring);
  if (!result.decision.keep) {
    result.status = "rejected";
    char buf[96];
    std::snprintf(buf, sizeof buf, "mean quality %.4f does not exceed %.1f",
                  result.decision.mean_quality, kKeepThreshold);
    result.reason = buf;
    return result;
  }
  if (result.decision.retained_frames.size() < 2) {
    result.status = "rejected";
    result.reason = "fewer than 2 retained frames";
    return result;
  }
  FrameStream kept;
  kept.source_id = sampled.source_id;
  for (std::size_t i : result.decision.retained_frames) {
    kept.frames.push_back(sampled.frames[i]);
    result.frame_refs.push_back("frames/" + frame_dir_name(sampled.frames[i].timestamp));
  }
  result.trajectory = label_trajectory(predictor, kept, task);
  result.status = "kept";
  return result;
}

void write_video_result(const VideoResult& result, const std::filesystem::path& out_dir) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
  const auto write_json = [&](const std::filesystem::path& path, const json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed for " + path.string());
  };
  if (!result.trajectory) {
    write_json(out_dir / "rejected.json", {{"status", "rejected"},
                                           {"source_video", result.source_id},
                                           {"reason", result.reason},
                                           {"decision", decision_to_json(result.decision)}});
    return;
  }
  std::filesystem::create_directories(out_dir / "frames", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "frames").string() + ": " + ec.message());
  const auto& traj = *result.trajectory;
  for (std::size_t i = 0; i < traj.observations.size(); ++i) {
    write_png(out_dir / result.frame_refs[i], traj.observations[i].image());
  }
  json j = trajectory_to_json(traj, result.frame_refs);
  j["source_video"] = result.source_id;
  j["mean_quality"] = result.decision.mean_quality;
  write_json(out_dir / "trajectory.json", j);
}

}  // namespace idm
