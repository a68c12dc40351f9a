#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "idmkit/env.hpp"
#include "idmkit/errors.hpp"
#include "idmkit/retrieval.hpp"
#include "test_support.hpp"
// After Eigen: resolv.h, pulled in here, defines a _res macro.
#include "httplib.h"

using namespace idm;
using idm::testing::TempDir;
namespace fs = std::filesystem;

namespace {

std::vector<VideoMeta> fixture_entries(const fs::path& frames) {
  const char* titles[] = {
      "vlc increase volume tutorial",   "vlc max volume above 100",
      "gimp crop image",                "gimp remove background",
      "excel pivot table basics",       "excel conditional formatting",
      "vscode python debugging",        "vscode extensions tour",
      "audacity noise removal",         "audacity export mp3",
      "obs studio scene setup",         "vlc subtitles sync",
      "blender modeling basics",        "inkscape trace bitmap",
      "jupyter notebook shortcuts",     "rstudio install packages",
      "vlc volume boost 200 percent",   "libreoffice writer styles",
      "terminal ssh keys",              "davinci resolve color grading"};
  std::vector<VideoMeta> out;
  for (int i = 0; i < 20; ++i) {
    char id[8];
    std::snprintf(id, sizeof id, "v%02d", 19 - i);
    out.push_back({id, titles[i], "", "Productivity", frames, 60.0});
  }
  return out;
}

TrajectoryFile sample_trajectory(const std::string& task) {
  TrajectoryFile t;
  t.task = task;
  t.actions = {Action::click(100, 200), Action::type(300, 400, "hello"),
               Action::scroll(ScrollDir::down), Action::wait()};
  t.frame_refs = {"frames/000000.000.png", "frames/000001.000.png", "frames/000002.000.png",
                  "frames/000003.000.png", "frames/000004.000.png"};
  t.source_video = "vid";
  return t;
}

long count_matches(const std::string& text, const std::regex& re) {
  return std::distance(std::sregex_iterator(text.begin(), text.end(), re), std::sregex_iterator());
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("tokenize lower-cases alphanumeric runs") {
  CHECK(tokenize("VLC: Max-Volume 200%!") == std::vector<std::string>{"vlc", "max", "volume", "200"});
  CHECK(tokenize("  ").empty());
}

TEST_CASE("search ranking is non-increasing and tie-stable") {
  TempDir dir("search");
  const SearchIndex index = build_index(fixture_entries(dir.path()));
  const auto hits = search(index, "vlc increase max volume 200", 15);
  REQUIRE(hits.size() >= 4);
  for (std::size_t i = 1; i < hits.size(); ++i) {
    CHECK(hits[i - 1].score >= hits[i].score);
    if (hits[i - 1].score == hits[i].score) CHECK(hits[i - 1].meta->video_id < hits[i].meta->video_id);
  }
  CHECK(hits[0].score == 3);
  const auto again = search(index, "vlc increase max volume 200", 15);
  REQUIRE(again.size() == hits.size());
  for (std::size_t i = 0; i < hits.size(); ++i) CHECK(again[i].meta == hits[i].meta);
  CHECK(search(index, "vlc", 2).size() == 2);
  CHECK(search(index, "nothing matches", 15).empty());
  CHECK_THROWS_AS(search(index, "vlc", 0), ValidationError);
}

TEST_CASE("search reports hits with a missing frame directory") {
  TempDir dir("search_missing");
  auto entries = fixture_entries(dir.path());
  entries[0].frame_dir = dir.path() / "gone";
  const SearchIndex index = build_index(entries);
  CHECK_THROWS_AS(search(index, "vlc", 15), IoError);
  CHECK(search(index, "gimp", 15).size() == 2);
}

TEST_CASE("index loading resolves relative frame directories") {
  TempDir dir("index");
  fs::create_directories(dir.path() / "videos" / "a");
  nlohmann::json j = nlohmann::json::array();
  j.push_back({{"video_id", "a"}, {"title", "gimp crop"}, {"category", "Design"}, {"frame_dir", "videos/a"}});
  std::ofstream(dir.path() / "index.json") << j.dump();
  const SearchIndex index = load_index(dir.path() / "index.json");
  CHECK(search(index, "gimp", 5).size() == 1);
  j.push_back({{"video_id", "a"}, {"title", "dup"}, {"category", "Design"}, {"frame_dir", "videos/a"}});
  std::ofstream(dir.path() / "dup.json") << j.dump();
  CHECK_THROWS_AS(load_index(dir.path() / "dup.json"), ValidationError);
  CHECK_THROWS_AS(video_meta_from_json({{"video_id", "x"}, {"title", "t"}, {"category", "Games"}, {"frame_dir", "."}}),
                  ValidationError);
}

TEST_CASE("template refiner") {
  const TemplateRefiner r;
  CHECK(r.refine("Can you increase the max volume of the video to 200% of the original?", "VLC") ==
        "vlc increase max volume 200 original video");
  const std::string q = r.refine("one two three four five six seven eight nine ten eleven twelve", "app x");
  CHECK(tokenize(q).size() == kMaxQueryTokens);
  CHECK(tokenize(q)[0] == "app");
  CHECK_THROWS_AS(r.refine("?!", "vlc"), ValidationError);
}

TEST_CASE("make_query falls back when the refiner fails") {
  struct Broken : QueryRefiner {
    std::string name() const override { return "broken"; }
    std::string refine(const std::string&, const std::string&) const override { throw TransportError("down"); }
  } broken;
  struct Fixed : QueryRefiner {
    std::string name() const override { return "fixed"; }
    std::string refine(const std::string&, const std::string&) const override { return "gimp crop"; }
  } fixed;
  const QueryResult a = make_query("crop an image", "GIMP", &broken);
  CHECK(a.fallback);
  CHECK(a.refiner == "template");
  CHECK(a.fallback_reason == "down");
  const QueryResult b = make_query("crop an image", "GIMP", &fixed);
  CHECK_FALSE(b.fallback);
  CHECK(b.query == "gimp crop");
  CHECK(make_query("crop an image", "GIMP").query == "gimp crop image");
}

TEST_CASE("select_for_inference keeps at most three in rank order") {
  TempDir dir("select");
  const Episode ep = run_episode(GeneratorConfig{}, 2, 0, kEpisodeLength);
  std::vector<Transition> truth;
  for (std::size_t i = 0; i < ep.actions.size(); ++i) truth.push_back({ep.frames[i], ep.actions[i], ep.frames[i + 1]});
  const OraclePredictor oracle(truth);

  std::vector<VideoMeta> metas;
  for (int i = 0; i < 6; ++i) {
    FrameStream s;
    s.source_id = "v" + std::to_string(i);
    for (std::size_t f = 0; f < ep.frames.size(); ++f) {
      Image img = i == 1 ? gaussian_blur(ep.frames[f].image(), 4.0) : ep.frames[f].image();
      s.frames.push_back({static_cast<double>(f), {std::make_shared<const Image>(std::move(img)), static_cast<int>(f), s.source_id}});
    }
    const fs::path d = dir.path() / s.source_id;
    if (i != 2) write_frame_dir(s, d);
    metas.push_back({s.source_id, "demo video", "", "Productivity", d, 10.0});
  }
  std::vector<SearchHit> hits;
  for (const auto& m : metas) hits.push_back({&m, 1});
  const Selection sel = select_for_inference(hits, HeuristicClassifier(), oracle);
  REQUIRE(sel.kept.size() == 3);
  CHECK(sel.kept_ranks == std::vector<std::size_t>{1, 4, 5});
  CHECK(sel.kept[0].source_id == "v0");
  REQUIRE(sel.skipped.size() == 2);
  CHECK(sel.skipped[0].video_id == "v1");
  CHECK(sel.skipped[1].video_id == "v2");
  for (const auto& k : sel.kept) CHECK(k.trajectory->actions == ep.actions);
}

TEST_CASE("exemplar variants follow the serialization grammar") {
  const std::regex header(R"(# Task: [^\n]+\n# Demonstrations: [3-5]\n)");
  const std::regex step_only(R"(Step \d+\nFrame: [^\n]+\n)");
  const std::regex step_act(R"(Step \d+\nFrame: [^\n]+\nAction: (click|move)\(\d+, \d+\)\n|Step \d+\nFrame: [^\n]+\nAction: type\(\d+, \d+, "[^"\n]*"\)\n|Step \d+\nFrame: [^\n]+\nAction: scroll\((up|down)\)\n|Step \d+\nFrame: [^\n]+\nAction: wait\(\d+ms\)\n)");
  for (auto variant : {ExemplarVariant::frames_only, ExemplarVariant::frames_actions,
                       ExemplarVariant::frames_actions_reasoning}) {
    std::vector<Exemplar> ex;
    for (int i = 0; i < 3; ++i) ex.push_back(build_exemplars(sample_trajectory("task " + std::to_string(i)), variant));
    const PromptDocument doc = format_icl_prompt(ex, "do the thing");
    CHECK(std::regex_search(doc.text, header));
    CHECK(doc.text.ends_with("\n## Query\nTask: do the thing\n"));
    const long steps = count_matches(doc.text, std::regex("\nStep "));
    CHECK(steps == 12);
    const long actions = count_matches(doc.text, std::regex("\nAction: "));
    const long reasons = count_matches(doc.text, std::regex("\nReasoning: [^\n]+"));
    CHECK(actions == (variant == ExemplarVariant::frames_only ? 0 : 12));
    CHECK(reasons == (variant == ExemplarVariant::frames_actions_reasoning ? 12 : 0));
    if (variant == ExemplarVariant::frames_only) CHECK(std::regex_search(doc.text, step_only));
    if (variant != ExemplarVariant::frames_only) {
      CHECK(count_matches(doc.text, step_act) == 12);
    }
    CHECK(doc.sidecar["demonstrations"] == 3);
    CHECK(doc.sidecar["frames"].size() == 12);
  }
}

TEST_CASE("prompt matches the golden file") {
  std::vector<Exemplar> ex;
  for (int i = 0; i < 3; ++i) {
    ex.push_back(build_exemplars(sample_trajectory("demo task " + std::to_string(i + 1)),
                                 ExemplarVariant::frames_actions_reasoning, nullptr, "videos/v" + std::to_string(i + 1) + "/"));
  }
  const PromptDocument doc = format_icl_prompt(ex, "increase the volume");
  const fs::path golden = fs::path(IDMKIT_TEST_DIR) / "golden" / "prompt_reasoning.txt";
  if (std::getenv("IDMKIT_UPDATE_GOLDEN") != nullptr) std::ofstream(golden, std::ios::binary) << doc.text;
  CHECK(doc.text == read_file(golden));
}

TEST_CASE("prompt exemplar count limits") {
  std::vector<Exemplar> ex(6, build_exemplars(sample_trajectory("t"), ExemplarVariant::frames_actions));
  CHECK_THROWS_AS(format_icl_prompt(ex, "q"), ValidationError);
  ex.resize(2);
  CHECK_THROWS_AS(format_icl_prompt(ex, "q"), ValidationError);
  const PromptDocument doc = format_icl_prompt(ex, "q", true);
  CHECK(doc.text.find("# Note: permissive count\n") != std::string::npos);
  CHECK(doc.sidecar["permissive_count"] == true);
  CHECK_THROWS_AS(format_icl_prompt(ex, "two\nlines", true), ValidationError);
}

TEST_CASE("reasoner failure falls back to the template for the whole exemplar") {
  struct Flaky : Reasoner {
    std::string name() const override { return "flaky"; }
    std::string explain(const std::string&, const std::vector<Action>&, std::size_t step) const override {
      if (step == 2) throw TransportError("timeout");
      return "remote reasoning";
    }
  } flaky;
  const Exemplar ex = build_exemplars(sample_trajectory("t"), ExemplarVariant::frames_actions_reasoning, &flaky);
  CHECK(ex.reasoner_fallback);
  const TemplateReasoner tmpl;
  for (std::size_t i = 0; i < ex.steps.size(); ++i) {
    CHECK(*ex.steps[i].reasoning == tmpl.explain("t", sample_trajectory("t").actions, i));
  }
}

TEST_CASE("http refiner and reasoner") {
  httplib::Server server;
  server.Post("/refine", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"query":"vlc volume"})", "application/json");
  });
  server.Post("/reason", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"reasoning":"because"})", "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread thread([&] { server.listen_after_bind(); });
  server.wait_until_ready();
  const std::string base = "http://127.0.0.1:" + std::to_string(port);
  const HttpRefiner refiner(base + "/refine");
  CHECK(make_query("louder please", "vlc", &refiner).query == "vlc volume");
  const HttpRefiner missing(base + "/nothing");
  CHECK(make_query("louder please", "vlc", &missing).fallback);
  const HttpReasoner reasoner(base + "/reason");
  const Exemplar ex = build_exemplars(sample_trajectory("t"), ExemplarVariant::frames_actions_reasoning, &reasoner);
  CHECK_FALSE(ex.reasoner_fallback);
  CHECK(*ex.steps[0].reasoning == "because");
  server.stop();
  thread.join();
}

TEST_CASE("sft export round-trips") {
  TempDir dir("sft");
  std::vector<SftRecord> records = {to_sft_record(sample_trajectory("a"), "x/"), to_sft_record(sample_trajectory("b"))};
  export_sft(records, dir.path() / "out.jsonl");
  const auto back = read_sft(dir.path() / "out.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[0].task == "a");
  CHECK(back[0].turns.size() == 4);
  CHECK(back[0].turns[0].obs_ref == "x/frames/000000.000.png");
  CHECK(back[1].turns[1].action == Action::type(300, 400, "hello"));
  CHECK(back[1].source_video == "vid");
  CHECK(sft_record_to_json(back[0]) == sft_record_to_json(records[0]));
  std::ofstream(dir.path() / "bad.jsonl") << "{\"task\": 1}\n";
  CHECK_THROWS_AS(read_sft(dir.path() / "bad.jsonl"), ValidationError);
}

TEST_CASE("shipped app catalog per-category counts") {
  const auto& catalog = shipped_app_catalog();
  std::map<std::string, int> counts;
  for (const auto& e : catalog) ++counts[e.category];
  const std::vector<int> expected = {11, 12, 9, 8, 8, 11, 10};
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(counts[app_categories()[i]] == expected[i]);
  CHECK(catalog.size() == 69);
  const auto queries = build_training_index(catalog);
  CHECK(queries.size() == 3 * 69);
  for (const auto& q : queries) CHECK(q.query.find("{app}") == std::string::npos);
  CHECK_THROWS_AS(app_catalog_from_json(nlohmann::json::array({{{"app", "x"}, {"category", "Games"}, {"query_templates", {"a"}}}})),
                  ValidationError);
}
