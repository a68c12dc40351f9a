#include "idmkit/corpus.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <unordered_map>

#include "idmkit/coords.hpp"
#include "idmkit/digest.hpp"
#include "idmkit/errors.hpp"
#include "idmkit/png_io.hpp"
#include "idmkit/rng.hpp"

namespace idm {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << content;
  out.flush();
  if (!out) throw IoError("write failed: " + path.string());
}

std::string read_text_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json parse_json(const std::string& text, const std::string& what) {
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError("malformed JSON in " + what + ": " + e.what());
  }
}

json observation_ref(const Observation& obs, const std::string& sha) {
  return {{"file", frame_file_name(obs)},
          {"source_id", obs.source_id},
          {"frame_index", obs.frame_index},
          {"sha256", sha}};
}

std::string pixel_digest(const Image& img) {
  std::string header = std::to_string(img.width()) + "x" + std::to_string(img.height()) + ":";
  std::string buf = header;
  buf.append(reinterpret_cast<const char*>(img.bytes().data()), img.bytes().size());
  return sha256_hex(buf);
}

// Builds the jsonl body; `file_sha` maps frame file name -> PNG digest.
std::string metadata_lines(const TransitionCorpus& corpus,
                           const std::unordered_map<std::string, std::string>& file_sha) {
  std::string out;
  for (std::size_t i = 0; i < corpus.transitions.size(); ++i) {
    const Transition& t = corpus.transitions[i];
    const json rec = {{"idx", i},
                      {"action", action_to_json(t.action)},
                      {"obs_before", observation_ref(t.obs_before,
                                                     file_sha.at(frame_file_name(t.obs_before)))},
                      {"obs_after", observation_ref(t.obs_after,
                                                    file_sha.at(frame_file_name(t.obs_after)))}};
    out += rec.dump();
    out += '\n';
  }
  return out;
}

}  // namespace

std::string_view to_string(TrajectorySource source) {
  switch (source) {
    case TrajectorySource::synthetic: return "synthetic";
    case TrajectorySource::video: return "video";
    case TrajectorySource::imported: return "imported";
  }
  return "?";
}

TrajectorySource parse_trajectory_source(std::string_view name) {
  if (name == "synthetic") return TrajectorySource::synthetic;
  if (name == "video") return TrajectorySource::video;
  if (name == "imported") return TrajectorySource::imported;
  throw ValidationError("unknown trajectory source '" + std::string(name) + "'");
}

void validate(const Transition& t) {
  validate(t.action);
  if (!t.obs_before.pixels || !t.obs_after.pixels) {
    throw ValidationError("transition: missing observation pixels");
  }
  if (t.obs_before.frame_index >= t.obs_after.frame_index) {
    throw ValidationError("transition: obs_before.frame_index must be < obs_after.frame_index");
  }
}

void validate(const Trajectory& trajectory) {
  if (trajectory.observations.size() != trajectory.actions.size() + 1) {
    throw ValidationError("trajectory: expected " + std::to_string(trajectory.actions.size() + 1) +
                          " observations, got " + std::to_string(trajectory.observations.size()));
  }
  for (std::size_t i = 1; i < trajectory.observations.size(); ++i) {
    if (trajectory.observations[i].frame_index <= trajectory.observations[i - 1].frame_index) {
      throw ValidationError("trajectory: frame indices must be strictly increasing");
    }
  }
  for (const auto& a : trajectory.actions) validate(a);
}

void validate(const TransitionCorpus& corpus) {
  if (corpus.manifest.count != corpus.transitions.size()) {
    throw IntegrityError("manifest count " + std::to_string(corpus.manifest.count) +
                         " != " + std::to_string(corpus.transitions.size()) + " transitions");
  }
  for (std::size_t i = 0; i < corpus.transitions.size(); ++i) {
    try {
      validate(corpus.transitions[i]);
    } catch (const ValidationError& e) {
      throw ValidationError("record " + std::to_string(i) + ": " + e.what());
    }
  }
}

std::string frame_file_name(const Observation& obs) {
  return obs.source_id + "_" + std::to_string(obs.frame_index) + ".png";
}

std::string transition_digest(const Transition& t) {
  const json j = {{"action", action_to_json(t.action)},
                  {"before", pixel_digest(t.obs_before.image())},
                  {"after", pixel_digest(t.obs_after.image())}};
  return sha256_hex(j.dump());
}

std::string corpus_metadata_digest(const TransitionCorpus& corpus) {
  validate(corpus);
  std::unordered_map<std::string, std::string> file_sha;
  const auto add = [&](const Observation& obs) {
    const std::string name = frame_file_name(obs);
    if (!file_sha.contains(name)) file_sha.emplace(name, sha256_hex(encode_png(obs.image())));
  };
  for (const auto& t : corpus.transitions) {
    add(t.obs_before);
    add(t.obs_after);
  }
  return sha256_hex(metadata_lines(corpus, file_sha));
}

std::string write_corpus(const TransitionCorpus& corpus, const fs::path& dir) {
  validate(corpus);
  std::error_code ec;
  fs::create_directories(dir / "frames", ec);
  if (ec) throw IoError("cannot create " + (dir / "frames").string() + ": " + ec.message());

  std::unordered_map<std::string, std::string> file_sha;
  const auto emit = [&](const Observation& obs) {
    const std::string name = frame_file_name(obs);
    if (file_sha.contains(name)) return;
    const fs::path path = dir / "frames" / name;
    write_png(path, obs.image());
    file_sha.emplace(name, sha256_file(path));
  };
  for (const auto& t : corpus.transitions) {
    emit(t.obs_before);
    emit(t.obs_after);
  }

  const std::string lines = metadata_lines(corpus, file_sha);
  write_text_file(dir / "transitions.jsonl", lines);
  // Manifest last: a crash before this point leaves a detectable partial write.
  const json manifest = {{"schema_version", corpus.manifest.schema_version},
                         {"seed", corpus.manifest.seed},
                         {"generator_config_digest", corpus.manifest.generator_config_digest},
                         {"count", corpus.transitions.size()}};
  write_text_file(dir / "manifest.json", manifest.dump(2) + "\n");
  return sha256_hex(lines);
}

TransitionCorpus read_corpus(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("corpus directory not found: " + dir.string());
  const json manifest = parse_json(read_text_file(dir / "manifest.json"), "manifest.json");
  TransitionCorpus corpus;
  try {
    corpus.manifest.schema_version = manifest.at("schema_version").get<std::string>();
    corpus.manifest.seed = manifest.at("seed").get<std::uint64_t>();
    corpus.manifest.generator_config_digest =
        manifest.at("generator_config_digest").get<std::string>();
    corpus.manifest.count = manifest.at("count").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("manifest.json: ") + e.what());
  }
  if (corpus.manifest.schema_version != kCorpusSchemaVersion) {
    throw ValidationError("unsupported corpus schema_version '" +
                          corpus.manifest.schema_version + "'");
  }

  std::ifstream in(dir / "transitions.jsonl", std::ios::binary);
  if (!in) throw IoError("cannot read " + (dir / "transitions.jsonl").string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty()) lines.push_back(std::move(line));
  }
  if (lines.size() != corpus.manifest.count) {
    throw IntegrityError("manifest count " + std::to_string(corpus.manifest.count) +
                         " does not match " + std::to_string(lines.size()) +
                         " records in transitions.jsonl");
  }

  std::unordered_map<std::string, std::shared_ptr<const Image>> frames;
  const auto load = [&](const json& ref, std::size_t idx) {
    Observation obs;
    const std::string file = ref.at("file").get<std::string>();
    obs.source_id = ref.at("source_id").get<std::string>();
    obs.frame_index = ref.at("frame_index").get<int>();
    if (obs.frame_index < 0) {
      throw ValidationError("record " + std::to_string(idx) + ": negative frame_index");
    }
    if (file != frame_file_name(obs)) {
      throw ValidationError("record " + std::to_string(idx) + ": frame file name '" + file +
                            "' does not match source_id/frame_index");
    }
    auto it = frames.find(file);
    if (it == frames.end()) {
      const fs::path path = dir / "frames" / file;
      if (!fs::exists(path)) throw IntegrityError("missing frame file " + file);
      if (sha256_file(path) != ref.at("sha256").get<std::string>()) {
        throw IntegrityError("frame file " + file + " does not match its recorded sha256");
      }
      Image img;
      try {
        img = read_png(path);
      } catch (const IntegrityError& e) {
        throw IntegrityError("frame file " + file + ": " + e.what());
      }
      it = frames.emplace(file, std::make_shared<const Image>(std::move(img))).first;
    }
    obs.pixels = it->second;
    return obs;
  };

  corpus.transitions.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const json rec = parse_json(lines[i], "transitions.jsonl record " + std::to_string(i));
    Transition t;
    try {
      if (rec.at("idx").get<std::size_t>() != i) {
        throw ValidationError("record " + std::to_string(i) + ": idx out of sequence");
      }
      t.action = action_from_json(rec.at("action"));
      t.obs_before = load(rec.at("obs_before"), i);
      t.obs_after = load(rec.at("obs_after"), i);
      validate(t);
    } catch (const ValidationError& e) {
      const std::string msg = e.what();
      if (msg.rfind("record ", 0) == 0) throw;
      throw ValidationError("record " + std::to_string(i) + ": " + msg);
    } catch (const json::exception& e) {
      throw ValidationError("record " + std::to_string(i) + ": " + e.what());
    }
    corpus.transitions.push_back(std::move(t));
  }
  return corpus;
}

MappingSpec mapping_spec_from_json(const json& j) {
  MappingSpec m;
  const auto str = [&](const char* key, std::string& dst, bool required) {
    if (j.contains(key)) {
      dst = j[key].get<std::string>();
    } else if (required) {
      throw ValidationError(std::string("mapping spec: missing mandatory field '") + key + "'");
    }
  };
  try {
    str("records_file", m.records_file, false);
    str("before_field", m.before_field, true);
    str("after_field", m.after_field, true);
    str("kind_field", m.kind_field, true);
    str("x_field", m.x_field, false);
    str("y_field", m.y_field, false);
    str("text_field", m.text_field, false);
    str("width_field", m.width_field, false);
    str("height_field", m.height_field, false);
    str("source_id", m.source_id, false);
    if (!j.contains("kind_map")) throw ValidationError("mapping spec: missing 'kind_map'");
    for (const auto& [external, internal] : j["kind_map"].items()) {
      const std::string name = internal.get<std::string>();
      if (name == "scroll_up") {
        m.scroll_up_kinds.push_back(external);
      } else if (name == "scroll_down") {
        m.scroll_down_kinds.push_back(external);
      } else {
        const ActionKind kind = parse_kind(name);
        if (kind == ActionKind::scroll) {
          throw ValidationError("mapping spec: map scroll kinds to scroll_up or scroll_down");
        }
        m.kind_map[external] = kind;
      }
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("mapping spec: ") + e.what());
  }
  return m;
}

ImportReport import_external(const fs::path& dir, const MappingSpec& m) {
  ImportReport report;
  std::ifstream in(dir / m.records_file, std::ios::binary);
  if (!in) throw IoError("cannot read " + (dir / m.records_file).string());

  std::unordered_map<std::string, std::shared_ptr<const Image>> cache;
  const auto load = [&](const std::string& rel) {
    auto it = cache.find(rel);
    if (it != cache.end()) return it->second;
    const fs::path path = dir / rel;
    if (!fs::exists(path)) throw IoError("unreadable screenshot " + path.string());
    auto img = std::make_shared<const Image>(read_png(path));
    cache.emplace(rel, img);
    return img;
  };
  const auto require = [&](const json& rec, const std::string& field, std::size_t line) {
    if (field.empty() || !rec.contains(field)) {
      throw ValidationError("record " + std::to_string(line) + ": unmapped mandatory field '" +
                            field + "'");
    }
    return rec[field];
  };

  std::size_t line_no = 0;
  int frame = 0;
  for (std::string line; std::getline(in, line); ++line_no) {
    if (line.empty()) continue;
    const json rec = parse_json(line, m.records_file + " line " + std::to_string(line_no));
    const std::string ext_kind = require(rec, m.kind_field, line_no).get<std::string>();

    Action action;
    const bool up = std::find(m.scroll_up_kinds.begin(), m.scroll_up_kinds.end(), ext_kind) !=
                    m.scroll_up_kinds.end();
    const bool down = std::find(m.scroll_down_kinds.begin(), m.scroll_down_kinds.end(),
                                ext_kind) != m.scroll_down_kinds.end();
    const auto mapped = m.kind_map.find(ext_kind);
    if (!up && !down && mapped == m.kind_map.end()) {
      ++report.dropped;
      ++report.dropped_by_kind[ext_kind];
      continue;
    }

    const auto before = load(require(rec, m.before_field, line_no).get<std::string>());
    const auto after = load(require(rec, m.after_field, line_no).get<std::string>());

    if (up || down) {
      action = Action::scroll(up ? ScrollDir::up : ScrollDir::down);
    } else if (mapped->second == ActionKind::wait) {
      action = Action::wait();
    } else {
      const double width = m.width_field.empty()
                               ? before->width()
                               : require(rec, m.width_field, line_no).get<double>();
      const double height = m.height_field.empty()
                                ? before->height()
                                : require(rec, m.height_field, line_no).get<double>();
      const double px = require(rec, m.x_field, line_no).get<double>();
      const double py = require(rec, m.y_field, line_no).get<double>();
      const int xb = discretize_coord(std::clamp(px, 0.0, width), width);
      const int yb = discretize_coord(std::clamp(py, 0.0, height), height);
      if (mapped->second == ActionKind::type) {
        action = Action::type(xb, yb, require(rec, m.text_field, line_no).get<std::string>());
      } else if (mapped->second == ActionKind::click) {
        action = Action::click(xb, yb);
      } else {
        action = Action::move(xb, yb);
      }
    }
    validate(action);
    Transition t{{before, frame, m.source_id}, action, {after, frame + 1, m.source_id}};
    frame += 2;
    report.corpus.transitions.push_back(std::move(t));
  }
  report.corpus.manifest.count = report.corpus.transitions.size();
  report.corpus.manifest.generator_config_digest =
      sha256_hex(json{{"import", dir.filename().string()}, {"records", m.records_file}}.dump());
  validate(report.corpus);
  return report;
}

CorpusSplit split_corpus(const TransitionCorpus& corpus, std::array<double, 3> ratios,
                         std::uint64_t seed) {
  for (double r : ratios) {
    if (!(r > 0.0)) throw ValidationError("split ratios must be positive");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) {
    throw ValidationError("split ratios must sum to 1");
  }
  const std::size_t n = corpus.size();
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(mix_seed(seed, 0x5B117));
  rng.shuffle(order);

  // A small epsilon keeps exact products like 10 * 0.1 from flooring to 0.
  const auto floor_count = [&](double r) {
    return static_cast<std::size_t>(std::floor(static_cast<double>(n) * r + 1e-9));
  };
  const std::size_t n_val = floor_count(ratios[1]);
  const std::size_t n_test = floor_count(ratios[2]);
  const std::size_t n_train = n - n_val - n_test;

  CorpusSplit split;
  for (TransitionCorpus* part : {&split.train, &split.val, &split.test}) {
    part->manifest = corpus.manifest;
  }
  for (std::size_t i = 0; i < n; ++i) {
    TransitionCorpus& dst = i < n_train ? split.train : (i < n_train + n_val ? split.val : split.test);
    dst.transitions.push_back(corpus.transitions[order[i]]);
  }
  for (TransitionCorpus* part : {&split.train, &split.val, &split.test}) {
    part->manifest.count = part->transitions.size();
  }
  return split;
}

json trajectory_to_json(const Trajectory& trajectory, const std::vector<std::string>& frame_refs) {
  validate(trajectory);
  if (frame_refs.size() != trajectory.observations.size()) {
    throw ValidationError("trajectory_to_json: one frame reference per observation required");
  }
  json actions = json::array();
  for (const auto& a : trajectory.actions) actions.push_back(action_to_json(a));
  return {{"task", trajectory.task},
          {"source", std::string(to_string(trajectory.source))},
          {"actions", actions},
          {"frames", frame_refs}};
}

TrajectoryFile trajectory_file_from_json(const json& j) {
  TrajectoryFile f;
  try {
    f.task = j.at("task").get<std::string>();
    if (j.contains("source")) f.source = parse_trajectory_source(j["source"].get<std::string>());
    if (j.contains("source_video")) f.source_video = j["source_video"].get<std::string>();
    for (const auto& a : j.at("actions")) f.actions.push_back(action_from_json(a));
    f.frame_refs = j.at("frames").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed trajectory: ") + e.what());
  }
  if (f.frame_refs.size() != f.actions.size() + 1) {
    throw ValidationError("trajectory: expected " + std::to_string(f.actions.size() + 1) +
                          " frame references, got " + std::to_string(f.frame_refs.size()));
  }
  return f;
}

TrajectoryFile read_trajectory_file(const fs::path& path) {
  return trajectory_file_from_json(parse_json(read_text_file(path), path.string()));
}

}  // namespace idm
