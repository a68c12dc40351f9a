#include <fstream>

#include "doctest.h"
#include "idmkit/corpus.hpp"
#include "idmkit/env.hpp"
#include "idmkit/errors.hpp"
#include "idmkit/png_io.hpp"
#include "test_support.hpp"

using namespace idm;
using idm::testing::TempDir;
namespace fs = std::filesystem;

namespace {

TransitionCorpus small_corpus(std::size_t n = 25, std::uint64_t seed = 4) {
  return generate_corpus(GeneratorConfig{}, n, seed);
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  for (const auto& l : lines) out << l << "\n";
}

}  // namespace

TEST_CASE("png encode/decode round-trip") {
  Rng rng(2);
  const Image img = testing::random_image(17, 9, rng);
  TempDir dir("png");
  write_png(dir.path() / "a.png", img);
  CHECK(read_png(dir.path() / "a.png") == img);
  CHECK(encode_png(img) == encode_png(img));
  CHECK_THROWS_AS(read_png(dir.path() / "missing.png"), IoError);
  write_lines(dir.path() / "bad.png", {"not a png"});
  CHECK_THROWS_AS(read_png(dir.path() / "bad.png"), IntegrityError);
}

TEST_CASE("corpus write/read round-trip preserves content and digest") {
  const TransitionCorpus c = small_corpus();
  TempDir dir("corpus");
  const std::string digest = write_corpus(c, dir.path());
  CHECK(digest == corpus_metadata_digest(c));
  const TransitionCorpus r = read_corpus(dir.path());
  REQUIRE(r.size() == c.size());
  CHECK(r.manifest.seed == c.manifest.seed);
  CHECK(r.manifest.generator_config_digest == c.manifest.generator_config_digest);
  for (std::size_t i = 0; i < c.size(); ++i) {
    CHECK(r.transitions[i].action == c.transitions[i].action);
    CHECK(transition_digest(r.transitions[i]) == transition_digest(c.transitions[i]));
  }
  TempDir again("corpus2");
  CHECK(write_corpus(r, again.path()) == digest);
}

TEST_CASE("shared frames are written once") {
  const TransitionCorpus c = small_corpus(20);
  TempDir dir("shared");
  write_corpus(c, dir.path());
  std::size_t files = 0;
  for ([[maybe_unused]] const auto& e : fs::directory_iterator(dir.path() / "frames")) ++files;
  // two episodes of ten actions share interior frames: 2 * 11 files.
  CHECK(files == 22);
}

TEST_CASE("read_corpus detects tampering") {
  const TransitionCorpus c = small_corpus(12);
  TempDir dir("tamper");
  write_corpus(c, dir.path());

  SUBCASE("modified frame") {
    const fs::path frame = fs::directory_iterator(dir.path() / "frames")->path();
    Image img = read_png(frame);
    img.set(0, 0, {1, 2, 3});
    write_png(frame, img);
    CHECK_THROWS_AS(read_corpus(dir.path()), IntegrityError);
  }
  SUBCASE("missing frame") {
    fs::remove(fs::directory_iterator(dir.path() / "frames")->path());
    CHECK_THROWS_AS(read_corpus(dir.path()), IntegrityError);
  }
  SUBCASE("count mismatch") {
    std::ifstream in(dir.path() / "manifest.json");
    auto j = nlohmann::json::parse(in);
    in.close();
    j["count"] = 13;
    std::ofstream(dir.path() / "manifest.json") << j.dump();
    CHECK_THROWS_AS(read_corpus(dir.path()), IntegrityError);
  }
  SUBCASE("invalid action") {
    std::ifstream in(dir.path() / "transitions.jsonl");
    std::vector<std::string> lines;
    for (std::string l; std::getline(in, l);) lines.push_back(l);
    in.close();
    auto rec = nlohmann::json::parse(lines[0]);
    rec["action"] = {{"kind", "click"}, {"x_bin", 2000}, {"y_bin", 0}};
    lines[0] = rec.dump();
    write_lines(dir.path() / "transitions.jsonl", lines);
    CHECK_THROWS_AS(read_corpus(dir.path()), ValidationError);
  }
  SUBCASE("missing directory") {
    CHECK_THROWS_AS(read_corpus(dir.path() / "nope"), IoError);
  }
}

TEST_CASE("split_corpus allocates by floor and is seed-stable") {
  const TransitionCorpus c = small_corpus(120);
  const CorpusSplit s = split_corpus(c, {10.0 / 12, 1.0 / 12, 1.0 / 12}, 3);
  CHECK(s.train.size() == 100);
  CHECK(s.val.size() == 10);
  CHECK(s.test.size() == 10);
  CHECK(s.test.manifest.count == 10);
  const CorpusSplit t = split_corpus(c, {10.0 / 12, 1.0 / 12, 1.0 / 12}, 3);
  CHECK(corpus_metadata_digest(s.test) == corpus_metadata_digest(t.test));
  const CorpusSplit u = split_corpus(c, {0.8, 0.1, 0.1}, 3);
  CHECK(u.val.size() == 12);
  CHECK_THROWS_AS(split_corpus(c, {0.5, 0.5, 0.5}, 0), ValidationError);
  CHECK_THROWS_AS(split_corpus(c, {1.0, 0.0, 0.0}, 0), ValidationError);
}

TEST_CASE("import_external maps kinds, scales coordinates and drops unmapped kinds") {
  TempDir dir("import");
  Image a(200, 100, {10, 10, 10});
  Image b(200, 100, {20, 20, 20});
  write_png(dir.path() / "a.png", a);
  write_png(dir.path() / "b.png", b);
  write_lines(dir.path() / "records.jsonl",
              {R"({"op":"CLICK","pre":"a.png","post":"b.png","cx":100,"cy":25})",
               R"({"op":"TYPE","pre":"a.png","post":"b.png","cx":0,"cy":100,"val":"hi"})",
               R"({"op":"SCROLL_DOWN","pre":"a.png","post":"b.png"})",
               R"({"op":"HOVER","pre":"a.png","post":"b.png","cx":1,"cy":1})",
               R"({"op":"SELECT","pre":"a.png","post":"b.png"})"});
  const MappingSpec m = mapping_spec_from_json({{"before_field", "pre"},
                                                {"after_field", "post"},
                                                {"kind_field", "op"},
                                                {"x_field", "cx"},
                                                {"y_field", "cy"},
                                                {"text_field", "val"},
                                                {"kind_map",
                                                 {{"CLICK", "click"},
                                                  {"TYPE", "type"},
                                                  {"SCROLL_DOWN", "scroll_down"},
                                                  {"HOVER", "move"}}}});
  const ImportReport r = import_external(dir.path(), m);
  REQUIRE(r.corpus.size() == 4);
  CHECK(r.corpus.transitions[0].action == Action::click(500, 250));
  CHECK(r.corpus.transitions[1].action == Action::type(0, 1000, "hi"));
  CHECK(r.corpus.transitions[2].action == Action::scroll(ScrollDir::down));
  CHECK(r.corpus.transitions[3].action == Action::move(5, 10));
  CHECK(r.dropped == 1);
  CHECK(r.dropped_by_kind.at("SELECT") == 1);
  CHECK_THROWS_AS(mapping_spec_from_json({{"before_field", "pre"}}), ValidationError);
}

TEST_CASE("trajectory json round-trip and length invariant") {
  const TransitionCorpus c = small_corpus(3);
  Trajectory t;
  t.task = "demo";
  t.source = TrajectorySource::video;
  t.observations = {c.transitions[0].obs_before, c.transitions[1].obs_before,
                    c.transitions[2].obs_before};
  t.actions = {c.transitions[0].action, c.transitions[1].action};
  const auto j = trajectory_to_json(t, {"f0", "f1", "f2"});
  const TrajectoryFile f = trajectory_file_from_json(j);
  CHECK(f.task == "demo");
  CHECK(f.actions == t.actions);
  CHECK(f.frame_refs.size() == 3);
  CHECK_THROWS_AS(trajectory_to_json(t, {"f0"}), ValidationError);
  t.actions.push_back(Action::wait());
  CHECK_THROWS_AS(validate(t), ValidationError);
}
