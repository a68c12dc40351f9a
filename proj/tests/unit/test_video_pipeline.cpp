#include <atomic>
#include <fstream>
#include <thread>

#include "doctest.h"
#include "idmkit/env.hpp"
#include "idmkit/errors.hpp"
#include "idmkit/png_io.hpp"
#include "idmkit/video_pipeline.hpp"
#include "test_support.hpp"
// After Eigen: resolv.h, pulled in here, defines a _res macro.
#include "httplib.h"

using namespace idm;
using idm::testing::TempDir;
namespace fs = std::filesystem;

namespace {

Observation obs_of(Image img, int index = 0) {
  return {std::make_shared<const Image>(std::move(img)), index, "v"};
}

Image env_frame(std::uint64_t seed) {
  ScreenSpec s;
  s.rng_seed = seed;
  return render(new_env(s));
}

FrameStream stream_of(const std::vector<Image>& images, double dt = 1.0) {
  FrameStream s;
  s.source_id = "v";
  for (std::size_t i = 0; i < images.size(); ++i) {
    s.frames.push_back({dt * static_cast<double>(i), obs_of(images[i], static_cast<int>(i))});
  }
  return s;
}

FilterVerdict verdict(double q, FrameCategory c = FrameCategory::clean_screencast) {
  return {c, q, ""};
}

class FailingClassifier : public FrameClassifier {
 public:
  explicit FailingClassifier(std::size_t fail_at) : fail_at_(fail_at) {}
  FilterVerdict classify(const Image& frame, std::size_t i) const override {
    if (i == fail_at_) throw TransportError("unreachable");
    return HeuristicClassifier().classify(frame, i);
  }

 private:
  std::size_t fail_at_;
};

class CountingPredictor : public ActionPredictor {
 public:
  Action predict(const Image&, const Image&) const override {
    ++calls;
    return Action::click(1, 1);
  }
  mutable std::atomic<int> calls{0};
};

}  // namespace

TEST_CASE("sample_frames keeps the earliest frame per interval") {
  std::vector<Image> imgs(7, Image(4, 4));
  FrameStream s;
  const double ts[] = {0.0, 0.4, 0.99, 1.0, 2.5, 2.6, 4.0};
  for (int i = 0; i < 7; ++i) s.frames.push_back({ts[i], obs_of(imgs[static_cast<std::size_t>(i)], i)});
  const FrameStream out = sample_frames(s, 1.0);
  REQUIRE(out.frames.size() == 4);
  CHECK(out.frames[0].timestamp == 0.0);
  CHECK(out.frames[1].timestamp == 1.0);
  CHECK(out.frames[2].timestamp == 2.5);
  CHECK(out.frames[3].timestamp == 4.0);
  CHECK(sample_frames(s, 2.0).frames.size() == 5);
  CHECK_THROWS_AS(sample_frames(s, 0.0), ValidationError);
  s.frames[2].timestamp = 0.3;
  CHECK_THROWS_AS(validate(s), ValidationError);
}

TEST_CASE("keep rule is a strict inequality on the mean") {
  CHECK_FALSE(decide({verdict(0.8), verdict(0.8)}).keep);
  const VideoDecision d = decide({verdict(0.9), verdict(0.85), verdict(0.7)});
  CHECK(d.keep);
  CHECK(d.mean_quality == doctest::Approx(0.8167).epsilon(1e-4));
  CHECK(d.retained_frames == std::vector<std::size_t>{0, 1, 2});
  const VideoDecision e = decide({verdict(0.95), verdict(0.55), verdict(1.0, FrameCategory::talking_head)});
  CHECK(e.keep);
  CHECK(e.retained_frames == std::vector<std::size_t>{0});
  CHECK_FALSE(decide({}).keep);
}

TEST_CASE("heuristic classifier on calibration fixtures") {
  const HeuristicClassifier h;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Image sharp = env_frame(seed);
    const FilterVerdict v = h.classify(sharp, 0);
    CHECK(v.category == FrameCategory::clean_screencast);
    CHECK(v.quality >= 0.8);
    CHECK(h.classify(gaussian_blur(sharp, 4.0), 0).quality <= 0.5);
  }
  CHECK(h.classify(Image(128, 96, {200, 200, 200}), 0).category == FrameCategory::other);

  Image letterbox(128, 96, {0, 0, 0});
  const Image inner = env_frame(1);
  for (int y = 12; y < 84; ++y) {
    for (int x = 16; x < 112; ++x) letterbox.set(x, y, inner.at(x, y));
  }
  CHECK(h.classify(letterbox, 0).category == FrameCategory::zoomed_screencast);

  Image dark(128, 96, {0, 0, 0});
  dark.fill_rect(0, 0, 40, 30, {120, 120, 120});
  CHECK(h.classify(dark, 0).category == FrameCategory::animated_transition);

  Image face(128, 96);
  for (int y = 0; y < 96; ++y) {
    for (int x = 0; x < 128; ++x) {
      face.set(x, y, {static_cast<std::uint8_t>(150 + x / 2), static_cast<std::uint8_t>(40 + y / 3), 30});
    }
  }
  CHECK(h.classify(face, 0).category == FrameCategory::talking_head);

  Image slide(128, 96, {240, 240, 240});
  slide.fill_rect(40, 40, 70, 41, {20, 20, 20});
  CHECK(h.classify(slide, 0).category == FrameCategory::slide_presentation);
}

TEST_CASE("filter rules json") {
  const FilterRules r = default_filter_rules();
  CHECK(r.version == "1");
  const FilterRules back = filter_rules_from_json(filter_rules_to_json(r));
  CHECK(back.sharp_high == r.sharp_high);
  auto j = filter_rules_to_json(r);
  j["mystery"] = 1;
  CHECK_THROWS_AS(filter_rules_from_json(j), ValidationError);
  j = filter_rules_to_json(r);
  j["sharp_low"] = 0.5;
  CHECK_THROWS_AS(filter_rules_from_json(j), ValidationError);
}

TEST_CASE("classifier failures propagate with partial verdicts or fall back") {
  const FrameStream s = stream_of({env_frame(1), env_frame(2), env_frame(3), env_frame(4)});
  const FailingClassifier bad(2);
  try {
    filter_video(s, bad);
    FAIL("expected FrameScoringError");
  } catch (const FrameScoringError& e) {
    CHECK(e.frame_index() == 2);
    CHECK(e.partial().size() == 2);
  }
  ScoringPolicy p;
  p.fallback_to_heuristic = true;
  const VideoDecision d = filter_video(s, bad, p);
  REQUIRE(d.per_frame.size() == 4);
  CHECK(d.per_frame[2].reason.rfind("heuristic fallback", 0) == 0);
}

TEST_CASE("filter_video is independent of the worker count") {
  std::vector<Image> imgs;
  for (std::uint64_t i = 0; i < 9; ++i) imgs.push_back(i % 3 ? env_frame(i) : gaussian_blur(env_frame(i), 3.0));
  const FrameStream s = stream_of(imgs);
  const HeuristicClassifier h;
  ScoringPolicy p;
  const VideoDecision one = filter_video(s, h, p);
  p.workers = 4;
  const VideoDecision four = filter_video(s, h, p);
  CHECK(decision_to_json(one) == decision_to_json(four));
}

TEST_CASE("labeling: length invariant, wait fast path, oracle reproduces ground truth") {
  const Episode ep = run_episode(GeneratorConfig{}, 11, 0, kEpisodeLength);
  std::vector<Image> imgs;
  for (const auto& f : ep.frames) imgs.push_back(f.image());
  std::vector<Transition> truth;
  for (std::size_t i = 0; i < ep.actions.size(); ++i) truth.push_back({ep.frames[i], ep.actions[i], ep.frames[i + 1]});
  const OraclePredictor oracle(truth);
  const Trajectory t = label_trajectory(oracle, stream_of(imgs), "task");
  CHECK(t.observations.size() == t.actions.size() + 1);
  CHECK(t.actions == ep.actions);

  const CountingPredictor counting;
  const Trajectory w = label_trajectory(counting, stream_of(std::vector<Image>(5, imgs[0])), "idle");
  CHECK(counting.calls == 0);
  CHECK(w.actions == std::vector<Action>(4, Action::wait()));
  CHECK_THROWS_AS(label_trajectory(counting, stream_of({imgs[0]}), "x"), ValidationError);
}

TEST_CASE("frame directory naming and round-trip") {
  CHECK(frame_dir_name(0.0) == "000000.000.png");
  CHECK(frame_dir_name(12.3456) == "000012.346.png");
  CHECK_THROWS_AS(frame_dir_name(-1.0), ValidationError);
  TempDir dir("frames");
  const FrameStream s = stream_of({env_frame(1), env_frame(2)}, 0.5);
  write_frame_dir(s, dir.path() / "vid");
  const FrameStream r = read_frame_dir(dir.path() / "vid");
  REQUIRE(r.frames.size() == 2);
  CHECK(r.frames[1].timestamp == doctest::Approx(0.5));
  CHECK(r.frames[1].obs.image() == s.frames[1].obs.image());
  CHECK(r.source_id == "vid");
  CHECK_THROWS_AS(read_frame_dir(dir.path() / "none"), ValidationError);
}

TEST_CASE("process_video keeps clean streams and rejects blurred ones") {
  const Episode ep = run_episode(GeneratorConfig{}, 4, 0, kEpisodeLength);
  std::vector<Image> clean, blurred;
  std::vector<Transition> truth;
  for (const auto& f : ep.frames) {
    clean.push_back(f.image());
    blurred.push_back(gaussian_blur(f.image(), 4.0));
  }
  for (std::size_t i = 0; i < ep.actions.size(); ++i) truth.push_back({ep.frames[i], ep.actions[i], ep.frames[i + 1]});
  const OraclePredictor oracle(truth);
  const HeuristicClassifier h;
  TempDir dir("process");
  write_frame_dir(stream_of(clean), dir.path() / "clean");
  write_frame_dir(stream_of(blurred), dir.path() / "blurred");

  const VideoResult kept = process_video(dir.path() / "clean", oracle, h, "demo");
  CHECK(kept.status == "kept");
  REQUIRE(kept.trajectory.has_value());
  CHECK(kept.trajectory->actions == ep.actions);
  write_video_result(kept, dir.path() / "out_clean");
  const TrajectoryFile f = read_trajectory_file(dir.path() / "out_clean" / "trajectory.json");
  CHECK(f.actions == ep.actions);
  CHECK(f.source_video == "clean");
  for (const auto& ref : f.frame_refs) CHECK(fs::exists(dir.path() / "out_clean" / ref));

  const VideoResult rejected = process_video(dir.path() / "blurred", oracle, h, "demo");
  CHECK(rejected.status == "rejected");
  CHECK_FALSE(rejected.trajectory.has_value());
  write_video_result(rejected, dir.path() / "out_blurred");
  CHECK(fs::exists(dir.path() / "out_blurred" / "rejected.json"));
  CHECK_FALSE(fs::exists(dir.path() / "out_blurred" / "trajectory.json"));
}

TEST_CASE("http classifier against a local server") {
  httplib::Server server;
  std::atomic<int> hits{0};
  server.Post("/ok", [&](const httplib::Request& req, httplib::Response& res) {
    ++hits;
    const auto body = nlohmann::json::parse(req.body);
    CHECK(body.contains("png_base64"));
    res.set_content(nlohmann::json{{"category", "clean_screencast"}, {"quality", 0.9}, {"reason", "remote"}}.dump(),
                    "application/json");
  });
  server.Post("/bad", [&](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"category":"nonsense","quality":2})", "application/json");
  });
  server.Post("/err", [&](const httplib::Request&, httplib::Response& res) { res.status = 500; });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread thread([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  const std::string base = "http://127.0.0.1:" + std::to_string(port);

  const Image frame = env_frame(1);
  const FilterVerdict v = HttpClassifier(base + "/ok").classify(frame, 3);
  CHECK(v.category == FrameCategory::clean_screencast);
  CHECK(v.quality == doctest::Approx(0.9));
  CHECK(hits == 1);
  CHECK_THROWS_AS(HttpClassifier(base + "/bad").classify(frame, 0), TransportError);
  CHECK_THROWS_AS(HttpClassifier(base + "/err").classify(frame, 0), TransportError);
  ScoringPolicy p;
  p.fallback_to_heuristic = true;
  CHECK(score_frame(frame, HttpClassifier(base + "/err"), 0, p).category == FrameCategory::clean_screencast);
  CHECK_THROWS_AS(HttpClassifier("no-scheme"), ValidationError);

  server.stop();
  thread.join();
  CHECK_THROWS_AS(HttpClassifier(base + "/ok", 1).classify(frame, 0), TransportError);
}
