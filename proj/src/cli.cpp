#include "idmkit/cli.hpp"

#include <glob.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <set>

#include "CLI11.hpp"
#include "idmkit/digest.hpp"
#include "idmkit/errors.hpp"
#include "idmkit/retrieval.hpp"

namespace idm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ValidationError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ValidationError("unknown " + where + " key '" + key + "'");
  }
}

template <class V>
json optional_json(const std::optional<V>& v) {
  if (!v) return nullptr;
  if constexpr (std::is_same_v<V, fs::path>) {
    return v->string();
  } else {
    return *v;
  }
}

template <class V>
void read_optional(const json& j, const char* key, std::optional<V>& dst) {
  if (!j.contains(key) || j[key].is_null()) return;
  dst = V(j[key].get<std::string>());
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

void write_text_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed: " + path.string());
  }
  fs::rename(tmp, path);
}

fs::path resolve_out(const std::string& value, const std::string& fallback) {
  if (!value.empty()) return value;
  return output_root() / fallback;
}

std::vector<fs::path> expand_globs(const std::vector<std::string>& patterns) {
  std::vector<fs::path> paths;
  for (const auto& pattern : patterns) {
    glob_t g{};
    const int rc = ::glob(pattern.c_str(), 0, nullptr, &g);
    if (rc == 0) {
      for (std::size_t i = 0; i < g.gl_pathc; ++i) paths.emplace_back(g.gl_pathv[i]);
    }
    globfree(&g);
    if (rc == GLOB_NOMATCH) throw IoError("no files match '" + pattern + "'");
    if (rc != 0) throw IoError("cannot expand '" + pattern + "'");
  }
  return paths;
}

/// Frame references inside a trajectory file resolve against its directory.
std::string frame_prefix_for(const fs::path& trajectory_path) {
  const fs::path dir = trajectory_path.parent_path();
  return dir.empty() ? "" : dir.string() + "/";
}

std::unique_ptr<FrameClassifier> make_classifier(const PipelineConfig& config) {
  if (config.classifier_url) return std::make_unique<HttpClassifier>(*config.classifier_url);
  const FilterRules rules =
      config.filter_rules ? load_filter_rules(*config.filter_rules) : default_filter_rules();
  return std::make_unique<HeuristicClassifier>(rules);
}

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> workers;
};

PipelineConfig resolve_config(const Common& common) {
  PipelineConfig config =
      common.config_path.empty() ? PipelineConfig{} : load_pipeline_config(common.config_path);
  if (common.seed) config.train.seed = *common.seed;
  if (common.workers) {
    if (*common.workers < 1) throw ValidationError("--workers must be >= 1");
    config.generator.workers = *common.workers;
  }
  return config;
}

template <class T>
TrainResult train_and_save(const PipelineConfig& config, const CorpusSplit& split,
                           const fs::path& run_dir, std::ostream& out, EvalReport& test_report) {
  ModelConfig mc = config.model;
  mc.init_seed = config.train.seed;
  IdmModel<T> model(mc);
  TrainOptions options;
  options.out_dir = run_dir;
  options.on_epoch = [&](const EpochRecord& r) {
    out << epoch_record_to_json(r).dump() << std::endl;
  };
  TrainResult result = train(model, split.train, split.val, config.train, options);
  const IdmModel<float> best = load_checkpoint(run_dir / "best.ckpt");
  test_report = evaluate(IdmPredictor<float>(best), split.test, config.train.tolerance_bins);
  return result;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_generate(const Common& common, std::size_t n, const std::string& out_arg,
                 std::ostream& out) {
  const PipelineConfig config = resolve_config(common);
  const std::uint64_t seed = common.seed.value_or(0);
  const fs::path dir = resolve_out(out_arg, "corpus");
  const TransitionCorpus corpus = generate_corpus(config.generator, n, seed);
  const std::string digest = write_corpus(corpus, dir);
  out << json{{"corpus", dir.string()},
              {"count", corpus.size()},
              {"seed", seed},
              {"transitions_sha256", digest}}
             .dump()
      << "\n";
  return 0;
}

int cmd_train(const Common& common, const std::string& corpus_dir, const std::string& out_arg,
              std::optional<int> epochs, std::optional<double> lr, std::ostream& out) {
  PipelineConfig config = resolve_config(common);
  if (epochs) config.train.epochs = *epochs;
  if (lr) config.train.learning_rate = *lr;
  validate(config.train);
  const fs::path run_dir = resolve_out(out_arg, "run");
  fs::create_directories(run_dir);
  write_text_file(run_dir / "config.json", pipeline_config_to_json(config).dump(2) + "\n");

  const TransitionCorpus corpus = read_corpus(corpus_dir);
  const CorpusSplit split = split_corpus(corpus, config.split, config.train.seed);
  write_corpus(split.test, run_dir / "test");

  const auto t0 = std::chrono::steady_clock::now();
  EvalReport test_report;
  const TrainResult result =
      config.train.precision == Precision::single
          ? train_and_save<float>(config, split, run_dir, out, test_report)
          : train_and_save<double>(config, split, run_dir, out, test_report);
  const double seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const EvalReport baseline =
      evaluate(baseline_majority(split.train), split.test, config.train.tolerance_bins);

  const json report = {{"config_digest", pipeline_config_digest(config)},
                       {"corpus_seed", corpus.manifest.seed},
                       {"split", {split.train.size(), split.val.size(), split.test.size()}},
                       {"best_epoch", result.best_epoch},
                       {"steps", result.steps},
                       {"train_seconds", seconds},
                       {"test", eval_report_to_json(test_report)},
                       {"baseline_majority", eval_report_to_json(baseline)}};
  write_text_file(run_dir / "report.json", report.dump(2) + "\n");
  out << json{{"run_dir", run_dir.string()},
              {"test_action_accuracy", test_report.action_accuracy},
              {"test_kind_accuracy", test_report.kind_accuracy},
              {"baseline_action_accuracy", baseline.action_accuracy}}
             .dump()
      << "\n";
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& corpus_dir, int tol,
             bool oracle_stub, bool with_baseline, std::ostream& out) {
  if (tol < 0) throw ValidationError("--tol must be >= 0");
  const TransitionCorpus corpus = read_corpus(corpus_dir);
  json result;
  if (oracle_stub) {
    const OraclePredictor oracle(corpus.transitions);
    result["predictor"] = "oracle_stub";
    result["report"] = eval_report_to_json(evaluate(oracle, corpus, tol));
  } else {
    if (checkpoint.empty()) throw ValidationError("--checkpoint is required");
    if (!fs::exists(checkpoint)) throw ValidationError("checkpoint not found: " + checkpoint);
    const IdmModel<float> model = load_checkpoint(checkpoint);
    result["predictor"] = "idm";
    result["checkpoint"] = checkpoint;
    result["report"] = eval_report_to_json(evaluate(IdmPredictor<float>(model), corpus, tol));
  }
  if (with_baseline) {
    result["baseline_majority"] = eval_report_to_json(evaluate(baseline_majority(corpus), corpus, tol));
  }
  result["tolerance_bins"] = tol;
  out << result.dump(2) << "\n";
  return 0;
}

int cmd_label(const Common& common, const std::string& video_dir, const std::string& task,
              const std::string& checkpoint, const std::string& oracle_corpus,
              const std::string& out_arg, std::optional<double> rate, std::ostream& out) {
  const PipelineConfig config = resolve_config(common);
  if (checkpoint.empty() == oracle_corpus.empty()) {
    throw ValidationError("exactly one of --checkpoint and --oracle-corpus is required");
  }
  std::optional<IdmModel<float>> model;
  std::unique_ptr<ActionPredictor> predictor;
  TransitionCorpus oracle_source;
  if (!checkpoint.empty()) {
    if (!fs::exists(checkpoint)) throw ValidationError("checkpoint not found: " + checkpoint);
    model.emplace(load_checkpoint(checkpoint));
    predictor = std::make_unique<IdmPredictor<float>>(*model);
  } else {
    oracle_source = read_corpus(oracle_corpus);
    predictor = std::make_unique<OraclePredictor>(oracle_source.transitions);
  }
  const auto classifier = make_classifier(config);
  VideoOptions options;
  options.rate_hz = rate.value_or(config.sample_rate_hz);
  options.scoring.fallback_to_heuristic = config.classifier_fallback;
  options.scoring.workers = config.generator.workers;
  const VideoResult result = process_video(video_dir, *predictor, *classifier, task, options);
  const fs::path dir = resolve_out(out_arg, "labeled/" + fs::path(video_dir).filename().string());
  write_video_result(result, dir);
  out << json{{"status", result.status},
              {"reason", result.reason},
              {"mean_quality", result.decision.mean_quality},
              {"retained", result.decision.retained_frames.size()},
              {"actions", result.trajectory ? result.trajectory->actions.size() : 0},
              {"out", dir.string()}}
             .dump()
      << "\n";
  return 0;
}

int cmd_search(const Common& common, const std::string& index_arg, std::string query,
               const std::string& instruction, const std::string& app, std::optional<int> k,
               std::ostream& out) {
  const PipelineConfig config = resolve_config(common);
  std::optional<fs::path> index_path = config.search_index;
  if (!index_arg.empty()) index_path = index_arg;
  if (!index_path) throw ValidationError("--index is required");
  if (query.empty() == instruction.empty()) {
    throw ValidationError("exactly one of --query and --instruction is required");
  }
  json result;
  if (!instruction.empty()) {
    std::unique_ptr<QueryRefiner> refiner;
    if (config.refiner_url) refiner = std::make_unique<HttpRefiner>(*config.refiner_url);
    const QueryResult q = make_query(instruction, app, refiner.get());
    query = q.query;
    result["refiner"] = q.refiner;
    result["fallback"] = q.fallback;
    if (q.fallback) result["fallback_reason"] = q.fallback_reason;
  }
  const SearchIndex index = load_index(*index_path);
  const auto hits = search(index, query, k.value_or(config.search_k));
  result["query"] = query;
  result["hits"] = json::array();
  for (const auto& hit : hits) {
    json h = video_meta_to_json(*hit.meta);
    h["score"] = hit.score;
    result["hits"].push_back(std::move(h));
  }
  out << result.dump(2) << "\n";
  return 0;
}

int cmd_exemplars(const Common& common, const std::vector<std::string>& trajectories,
                  const std::string& task, const std::string& variant_name, bool allow_fewer,
                  const std::string& out_arg, std::ostream& out) {
  const PipelineConfig config = resolve_config(common);
  const ExemplarVariant variant = parse_exemplar_variant(variant_name);
  std::unique_ptr<Reasoner> reasoner;
  if (config.reasoner_url) reasoner = std::make_unique<HttpReasoner>(*config.reasoner_url);
  std::vector<Exemplar> exemplars;
  for (const auto& path : expand_globs(trajectories)) {
    exemplars.push_back(build_exemplars(read_trajectory_file(path), variant, reasoner.get(),
                                        frame_prefix_for(path)));
  }
  const PromptDocument doc = format_icl_prompt(exemplars, task, allow_fewer);
  const fs::path path = resolve_out(out_arg, "prompt.txt");
  write_text_file(path, doc.text);
  fs::path sidecar = path;
  sidecar += ".json";
  write_text_file(sidecar, doc.sidecar.dump(2) + "\n");
  out << json{{"prompt", path.string()}, {"sidecar", sidecar.string()}, {"exemplars", exemplars.size()}}
             .dump()
      << "\n";
  return 0;
}

int cmd_export_sft(const std::vector<std::string>& patterns, const std::string& out_arg,
                   std::ostream& out) {
  std::vector<SftRecord> records;
  for (const auto& path : expand_globs(patterns)) {
    records.push_back(to_sft_record(read_trajectory_file(path), frame_prefix_for(path)));
  }
  const fs::path path = resolve_out(out_arg, "sft.jsonl");
  export_sft(records, path);
  out << json{{"out", path.string()}, {"records", records.size()}}.dump() << "\n";
  return 0;
}

int cmd_queries(const std::string& catalog_path, std::ostream& out) {
  const auto catalog =
      catalog_path.empty() ? shipped_app_catalog() : load_app_catalog(catalog_path);
  for (const auto& q : build_training_index(catalog)) {
    out << json{{"app", q.app}, {"category", q.category}, {"query", q.query}}.dump() << "\n";
  }
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

ModelConfig PipelineConfig::default_pipeline_model() {
  ModelConfig m;
  m.input_height = 96;
  m.input_width = 128;
  return m;
}

json pipeline_config_to_json(const PipelineConfig& c) {
  return {{"generator",
           {{"screen", screen_spec_to_json(c.generator.screen)},
            {"policy", policy_to_json(c.generator.policy)},
            {"episode_length", c.generator.episode_length},
            {"workers", c.generator.workers}}},
          {"model", model_config_to_json(c.model)},
          {"train", train_config_to_json(c.train)},
          {"split", c.split},
          {"filter",
           {{"rules", optional_json(c.filter_rules)},
            {"classifier_url", optional_json(c.classifier_url)},
            {"fallback_to_heuristic", c.classifier_fallback},
            {"sample_rate_hz", c.sample_rate_hz}}},
          {"retrieval",
           {{"index", optional_json(c.search_index)},
            {"k", c.search_k},
            {"refiner_url", optional_json(c.refiner_url)},
            {"reasoner_url", optional_json(c.reasoner_url)}}}};
}

PipelineConfig pipeline_config_from_json(const json& j) {
  reject_unknown(j, {"generator", "model", "train", "split", "filter", "retrieval"}, "config");
  PipelineConfig c;
  try {
    if (j.contains("generator")) {
      const json& g = j["generator"];
      reject_unknown(g, {"screen", "policy", "episode_length", "workers"}, "generator");
      if (g.contains("screen")) c.generator.screen = screen_spec_from_json(g["screen"]);
      if (g.contains("policy")) c.generator.policy = policy_from_json(g["policy"]);
      if (g.contains("episode_length")) c.generator.episode_length = g["episode_length"].get<int>();
      if (g.contains("workers")) c.generator.workers = g["workers"].get<int>();
      if (c.generator.episode_length < 1) throw ValidationError("episode_length must be >= 1");
      if (c.generator.workers < 1) throw ValidationError("workers must be >= 1");
    }
    if (j.contains("model")) c.model = model_config_from_json(j["model"]);
    if (j.contains("train")) c.train = train_config_from_json(j["train"]);
    if (j.contains("split")) {
      c.split = j["split"].get<std::array<double, 3>>();
      double sum = 0.0;
      for (double r : c.split) {
        if (!(r > 0.0)) throw ValidationError("split ratios must be positive");
        sum += r;
      }
      if (std::abs(sum - 1.0) > 1e-9) throw ValidationError("split ratios must sum to 1");
    }
    if (j.contains("filter")) {
      const json& f = j["filter"];
      reject_unknown(f, {"rules", "classifier_url", "fallback_to_heuristic", "sample_rate_hz"},
                     "filter");
      read_optional(f, "rules", c.filter_rules);
      read_optional(f, "classifier_url", c.classifier_url);
      if (f.contains("fallback_to_heuristic")) c.classifier_fallback = f["fallback_to_heuristic"].get<bool>();
      if (f.contains("sample_rate_hz")) c.sample_rate_hz = f["sample_rate_hz"].get<double>();
      if (!(c.sample_rate_hz > 0.0)) throw ValidationError("sample_rate_hz must be positive");
    }
    if (j.contains("retrieval")) {
      const json& r = j["retrieval"];
      reject_unknown(r, {"index", "k", "refiner_url", "reasoner_url"}, "retrieval");
      read_optional(r, "index", c.search_index);
      if (r.contains("k")) c.search_k = r["k"].get<int>();
      read_optional(r, "refiner_url", c.refiner_url);
      read_optional(r, "reasoner_url", c.reasoner_url);
      if (c.search_k < 1) throw ValidationError("retrieval k must be >= 1");
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed config: ") + e.what());
  }
  return c;
}

PipelineConfig load_pipeline_config(const fs::path& path) {
  PipelineConfig c = pipeline_config_from_json(read_json_file(path));
  const fs::path base = path.parent_path();
  if (c.filter_rules && c.filter_rules->is_relative()) c.filter_rules = base / *c.filter_rules;
  if (c.search_index && c.search_index->is_relative()) c.search_index = base / *c.search_index;
  return c;
}

std::string pipeline_config_digest(const PipelineConfig& config) {
  json j = pipeline_config_to_json(config);
  j["generator"].erase("workers");
  return sha256_hex(j.dump());
}

fs::path output_root() {
  for (const char* name : {"W&L_HOME", "WL_HOME"}) {
    if (const char* v = std::getenv(name); v != nullptr && *v != '\0') return v;
  }
  return "wl_out";
}

// ---------------------------------------------------------------------------
// Entry point

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Inverse dynamics labeling toolkit", "idmkit"};
  app.require_subcommand(1);

  Common common;
  const auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "Pipeline config JSON")->check(CLI::ExistingFile);
    sub->add_option("--seed", common.seed, "Seed");
    sub->add_option("--workers", common.workers, "Worker threads");
  };

  auto* gen = app.add_subcommand("generate", "Generate a synthetic transition corpus");
  add_common(gen);
  std::size_t gen_n = 0;
  std::string gen_out;
  gen->add_option("-n,--count", gen_n, "Number of transitions")->required();
  gen->add_option("-o,--out", gen_out, "Corpus directory");

  auto* tr = app.add_subcommand("train", "Train the inverse dynamics model");
  add_common(tr);
  std::string tr_corpus, tr_out;
  std::optional<int> tr_epochs;
  std::optional<double> tr_lr;
  tr->add_option("--corpus", tr_corpus, "Corpus directory")->required();
  tr->add_option("-o,--out", tr_out, "Run directory");
  tr->add_option("--epochs", tr_epochs, "Override train.epochs");
  tr->add_option("--lr", tr_lr, "Override train.learning_rate");

  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus");
  std::string ev_ckpt, ev_corpus;
  int ev_tol = 10;
  bool ev_oracle = false, ev_baseline = false;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file");
  ev->add_option("--corpus", ev_corpus, "Corpus directory")->required();
  ev->add_option("--tol", ev_tol, "Coordinate match tolerance in bins");
  ev->add_flag("--oracle-stub", ev_oracle, "Score the ground-truth lookup predictor instead");
  ev->add_flag("--baseline", ev_baseline, "Also score the majority baseline");

  auto* lb = app.add_subcommand("label", "Filter and label a frame directory");
  add_common(lb);
  std::string lb_video, lb_task, lb_ckpt, lb_oracle, lb_out;
  std::optional<double> lb_rate;
  lb->add_option("--video", lb_video, "Directory holding frames/")->required();
  lb->add_option("--task", lb_task, "Task description")->required();
  lb->add_option("--checkpoint", lb_ckpt, "Checkpoint file");
  lb->add_option("--oracle-corpus", lb_oracle, "Label by lookup in a corpus");
  lb->add_option("--rate", lb_rate, "Sampling rate in Hz");
  lb->add_option("-o,--out", lb_out, "Output directory");

  auto* se = app.add_subcommand("search", "Search a video index");
  add_common(se);
  std::string se_index, se_query, se_instruction, se_app;
  std::optional<int> se_k;
  se->add_option("--index", se_index, "Index JSON");
  se->add_option("--query", se_query, "Literal query");
  se->add_option("--instruction", se_instruction, "Task instruction to refine into a query");
  se->add_option("--app", se_app, "Application name for refinement");
  se->add_option("-k", se_k, "Number of hits");

  auto* ex = app.add_subcommand("exemplars", "Format labeled trajectories as a prompt");
  add_common(ex);
  std::vector<std::string> ex_in;
  std::string ex_task, ex_variant = "frames_actions_reasoning", ex_out;
  bool ex_allow = false;
  ex->add_option("trajectories", ex_in, "trajectory.json files or globs")->required();
  ex->add_option("--task", ex_task, "Query task")->required();
  ex->add_option("--variant", ex_variant, "frames_only, frames_actions or frames_actions_reasoning");
  ex->add_flag("--allow-fewer", ex_allow, "Accept fewer than three demonstrations");
  ex->add_option("-o,--out", ex_out, "Prompt file; the sidecar gets a .json suffix");

  auto* sft = app.add_subcommand("export-sft", "Export trajectories as supervised fine-tuning records");
  std::vector<std::string> sft_in;
  std::string sft_out;
  sft->add_option("trajectories", sft_in, "trajectory.json files or globs")->required();
  sft->add_option("-o,--out", sft_out, "JSONL output");

  auto* qs = app.add_subcommand("queries", "List training-time search queries for the app catalog");
  std::string qs_catalog;
  qs->add_option("--catalog", qs_catalog, "Catalog JSON (defaults to the shipped one)");

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(std::move(argv_rev));
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_generate(common, gen_n, gen_out, out);
    if (tr->parsed()) return cmd_train(common, tr_corpus, tr_out, tr_epochs, tr_lr, out);
    if (ev->parsed()) return cmd_eval(ev_ckpt, ev_corpus, ev_tol, ev_oracle, ev_baseline, out);
    if (lb->parsed()) {
      return cmd_label(common, lb_video, lb_task, lb_ckpt, lb_oracle, lb_out, lb_rate, out);
    }
    if (se->parsed()) {
      return cmd_search(common, se_index, se_query, se_instruction, se_app, se_k, out);
    }
    if (ex->parsed()) return cmd_exemplars(common, ex_in, ex_task, ex_variant, ex_allow, ex_out, out);
    if (sft->parsed()) return cmd_export_sft(sft_in, sft_out, out);
    if (qs->parsed()) return cmd_queries(qs_catalog, out);
  } catch (const ValidationError& e) {
    err << "validation error: " << e.what() << "\n";
    return 2;
  } catch (const IntegrityError& e) {
    err << "integrity error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    err << "numeric error at step " << e.step() << ": " << e.what() << "\n";
    return 3;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return 1;
  } catch (const TransportError& e) {
    err << "transport error: " << e.what() << "\n";
    return 1;
  } catch (const fs::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace idm
