#include "idmkit/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>

#include "idmkit/errors.hpp"
#include "idmkit/rng.hpp"

namespace idm {
using nlohmann::json;

void validate(const TrainConfig& c) {
  if (c.epochs < 1) throw ValidationError("epochs must be >= 1");
  if (c.batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (!(c.learning_rate >= 0.0) || !std::isfinite(c.learning_rate)) {
    throw ValidationError("learning_rate must be finite and >= 0");
  }
  if (!(c.grad_clip_norm > 0.0)) throw ValidationError("grad_clip_norm must be > 0");
  if (!(c.weight_decay >= 0.0)) throw ValidationError("weight_decay must be >= 0");
  if (c.tolerance_bins < 0) throw ValidationError("tolerance_bins must be >= 0");
}

json train_config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"schedule", c.schedule == LrSchedule::cosine ? "cosine" : "constant"},
          {"grad_clip_norm", c.grad_clip_norm},
          {"weight_decay", c.weight_decay},
          {"seed", c.seed},
          {"precision", c.precision == Precision::single ? "single" : "double"},
          {"tolerance_bins", c.tolerance_bins}};
}

TrainConfig train_config_from_json(const json& j) {
  static const std::set<std::string> known = {"epochs",         "batch_size",   "learning_rate",
                                              "schedule",       "grad_clip_norm", "weight_decay",
                                              "seed",           "precision",    "tolerance_bins"};
  if (!j.is_object()) throw ValidationError("train config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ValidationError("unknown train config key '" + key + "'");
  }
  TrainConfig c;
  try {
    const auto get = [&](const char* key, auto& dst) {
      if (j.contains(key)) dst = j[key].get<std::decay_t<decltype(dst)>>();
    };
    get("epochs", c.epochs);
    get("batch_size", c.batch_size);
    get("learning_rate", c.learning_rate);
    get("grad_clip_norm", c.grad_clip_norm);
    get("weight_decay", c.weight_decay);
    get("seed", c.seed);
    get("tolerance_bins", c.tolerance_bins);
    if (j.contains("schedule")) {
      const auto s = j["schedule"].get<std::string>();
      if (s != "cosine" && s != "constant") throw ValidationError("unknown schedule '" + s + "'");
      c.schedule = s == "cosine" ? LrSchedule::cosine : LrSchedule::constant;
    }
    if (j.contains("precision")) {
      const auto s = j["precision"].get<std::string>();
      if (s != "single" && s != "double") throw ValidationError("unknown precision '" + s + "'");
      c.precision = s == "single" ? Precision::single : Precision::double_precision;
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("train config: ") + e.what());
  }
  validate(c);
  return c;
}

json eval_report_to_json(const EvalReport& r) {
  json per = json::object();
  for (const auto& [kind, score] : r.per_kind) {
    per[std::string(to_string(kind))] = {{"n", score.n},
                                         {"action_acc", score.action_accuracy},
                                         {"kind_acc", score.kind_accuracy}};
  }
  return {{"action_accuracy", r.action_accuracy},
          {"kind_accuracy", r.kind_accuracy},
          {"n_examples", r.n_examples},
          {"match_tolerance_bins", r.match_tolerance_bins},
          {"per_kind", per}};
}

namespace {

std::string trim(const std::string& s) {
  const auto* ws = " \t\n\r\f\v";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(ws) - b + 1);
}

}  // namespace

bool action_match(const Action& pred, const Action& gold, int tolerance_bins) {
  if (pred.kind != gold.kind) return false;
  if (is_location_based(gold.kind)) {
    if (std::abs(*pred.x_bin - *gold.x_bin) > tolerance_bins) return false;
    if (std::abs(*pred.y_bin - *gold.y_bin) > tolerance_bins) return false;
  }
  if (gold.kind == ActionKind::type && trim(*pred.text) != trim(*gold.text)) return false;
  if (gold.kind == ActionKind::scroll && pred.scroll_dir != gold.scroll_dir) return false;
  return true;
}

std::vector<Action> ActionPredictor::predict_batch(const std::vector<const Image*>& before,
                                                   const std::vector<const Image*>& after) const {
  std::vector<Action> out;
  out.reserve(before.size());
  for (std::size_t i = 0; i < before.size(); ++i) out.push_back(predict(*before[i], *after[i]));
  return out;
}

template <class T>
Action IdmPredictor<T>::predict(const Image& before, const Image& after) const {
  return model_.predict_action(before, after);
}

template <class T>
std::vector<Action> IdmPredictor<T>::predict_batch(const std::vector<const Image*>& before,
                                                   const std::vector<const Image*>& after) const {
  std::vector<Action> out;
  out.reserve(before.size());
  const std::size_t bs = static_cast<std::size_t>(std::max(1, batch_size_));
  for (std::size_t i = 0; i < before.size(); i += bs) {
    const std::size_t n = std::min(bs, before.size() - i);
    const std::vector<const Image*> b(before.begin() + static_cast<std::ptrdiff_t>(i),
                                      before.begin() + static_cast<std::ptrdiff_t>(i + n));
    const std::vector<const Image*> a(after.begin() + static_cast<std::ptrdiff_t>(i),
                                      after.begin() + static_cast<std::ptrdiff_t>(i + n));
    const auto preds = model_.forward(b, a, std::vector<const Action*>(n, nullptr), nullptr, true);
    for (const auto& p : preds) out.push_back(decode_prediction(p));
  }
  return out;
}

template class IdmPredictor<float>;
template class IdmPredictor<double>;

ConstantPredictor::ConstantPredictor(Action action) : action_(std::move(action)) {
  validate(action_);
}

ConstantPredictor baseline_majority(const TransitionCorpus& corpus) {
  if (corpus.empty()) throw ValidationError("baseline_majority: corpus is empty");
  std::array<std::size_t, kNumKinds> counts{};
  for (const auto& t : corpus.transitions) ++counts[static_cast<std::size_t>(t.action.kind)];
  std::size_t best = 0;
  for (std::size_t k = 1; k < counts.size(); ++k) {
    if (counts[k] > counts[best]) best = k;
  }
  const auto kind = static_cast<ActionKind>(best);
  std::vector<int> xs, ys;
  std::map<std::string, std::size_t> texts;
  std::array<std::size_t, 2> dirs{};
  for (const auto& t : corpus.transitions) {
    if (t.action.kind != kind) continue;
    if (t.action.x_bin) xs.push_back(*t.action.x_bin);
    if (t.action.y_bin) ys.push_back(*t.action.y_bin);
    if (t.action.text) ++texts[*t.action.text];
    if (t.action.scroll_dir) ++dirs[static_cast<std::size_t>(*t.action.scroll_dir)];
  }
  const auto median = [](std::vector<int> v) {
    std::sort(v.begin(), v.end());
    return v[(v.size() - 1) / 2];
  };
  switch (kind) {
    case ActionKind::wait: return ConstantPredictor(Action::wait());
    case ActionKind::scroll:
      return ConstantPredictor(Action::scroll(dirs[1] > dirs[0] ? ScrollDir::down : ScrollDir::up));
    case ActionKind::click: return ConstantPredictor(Action::click(median(xs), median(ys)));
    case ActionKind::move: return ConstantPredictor(Action::move(median(xs), median(ys)));
    case ActionKind::type: {
      // std::map iteration order makes ties resolve to the smallest string.
      auto top = texts.begin();
      for (auto it = texts.begin(); it != texts.end(); ++it) {
        if (it->second > top->second) top = it;
      }
      return ConstantPredictor(Action::type(median(xs), median(ys), top->first));
    }
  }
  return ConstantPredictor(Action::wait());
}

EvalReport evaluate_actions(const std::vector<Action>& predicted, const TransitionCorpus& corpus,
                            int tolerance_bins) {
  if (corpus.empty()) throw ValidationError("evaluate: corpus is empty");
  if (predicted.size() != corpus.size()) {
    throw ValidationError("evaluate: one prediction per transition required");
  }
  EvalReport r;
  r.n_examples = corpus.size();
  r.match_tolerance_bins = tolerance_bins;
  std::size_t action_ok = 0, kind_ok = 0;
  std::map<ActionKind, std::array<std::size_t, 3>> per;  // n, action, kind
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const Action& gold = corpus.transitions[i].action;
    const bool k = predicted[i].kind == gold.kind;
    const bool a = action_match(predicted[i], gold, tolerance_bins);
    kind_ok += k;
    action_ok += a;
    auto& cell = per[gold.kind];
    ++cell[0];
    cell[1] += a;
    cell[2] += k;
  }
  const auto n = static_cast<double>(corpus.size());
  r.action_accuracy = static_cast<double>(action_ok) / n;
  r.kind_accuracy = static_cast<double>(kind_ok) / n;
  for (const auto& [kind, cell] : per) {
    r.per_kind[kind] = {cell[0], static_cast<double>(cell[1]) / static_cast<double>(cell[0]),
                        static_cast<double>(cell[2]) / static_cast<double>(cell[0])};
  }
  return r;
}

EvalReport evaluate(const ActionPredictor& predictor, const TransitionCorpus& corpus,
                    int tolerance_bins) {
  if (corpus.empty()) throw ValidationError("evaluate: corpus is empty");
  std::vector<const Image*> before, after;
  for (const auto& t : corpus.transitions) {
    before.push_back(t.obs_before.pixels.get());
    after.push_back(t.obs_after.pixels.get());
  }
  return evaluate_actions(predictor.predict_batch(before, after), corpus, tolerance_bins);
}

json epoch_record_to_json(const EpochRecord& rec) {
  json per = json::object();
  for (const auto& [kind, score] : rec.val.per_kind) {
    per[std::string(to_string(kind))] = score.action_accuracy;
  }
  return {{"epoch", rec.epoch},
          {"train_loss", rec.train_loss},
          {"val_action_acc", rec.val.action_accuracy},
          {"val_kind_acc", rec.val.kind_accuracy},
          {"per_kind", per}};
}

namespace {

template <class T>
struct AdamW {
  std::vector<nn::Mat<T>> m, v;
  std::size_t t = 0;
  static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  explicit AdamW(const nn::ParamSet<T>& ps) {
    for (const auto& p : ps.all()) {
      m.push_back(nn::Mat<T>::Zero(p.value.rows(), p.value.cols()));
      v.push_back(nn::Mat<T>::Zero(p.value.rows(), p.value.cols()));
    }
  }

  void step(nn::ParamSet<T>& ps, double lr, double weight_decay) {
    ++t;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t));
    std::size_t i = 0;
    for (auto& p : ps.all()) {
      auto& mi = m[i];
      auto& vi = v[i];
      ++i;
      mi = T(kBeta1) * mi + T(1 - kBeta1) * p.grad;
      vi = T(kBeta2) * vi + T(1 - kBeta2) * p.grad.cwiseProduct(p.grad);
      if (p.decay && weight_decay > 0.0) p.value *= T(1.0 - lr * weight_decay);
      const T step_size = static_cast<T>(lr / c1);
      const T root_c2 = static_cast<T>(std::sqrt(c2));
      p.value.array() -= step_size * mi.array() / (vi.array().sqrt() / root_c2 + T(kEps));
    }
  }
};

template <class T>
double grad_norm(const nn::ParamSet<T>& ps) {
  double s = 0.0;
  for (const auto& p : ps.all()) s += static_cast<double>(p.grad.squaredNorm());
  return std::sqrt(s);
}

template <class T>
std::vector<nn::Mat<T>> snapshot(const nn::ParamSet<T>& ps) {
  std::vector<nn::Mat<T>> out;
  for (const auto& p : ps.all()) out.push_back(p.value);
  return out;
}

template <class T>
void restore(nn::ParamSet<T>& ps, const std::vector<nn::Mat<T>>& values) {
  std::size_t i = 0;
  for (auto& p : ps.all()) p.value = values[i++];
}

}  // namespace

namespace {

template <class T>
bool params_finite(const nn::ParamSet<T>& params) {
  for (const auto& p : params.all()) {
    if (!p.value.allFinite()) return false;
  }
  return true;
}

}  // namespace

template <class T>
TrainResult train(IdmModel<T>& model, const TransitionCorpus& train_corpus,
                  const TransitionCorpus& val_corpus, const TrainConfig& config,
                  const TrainOptions& options) {
  validate(config);
  if (train_corpus.empty()) throw ValidationError("train: training corpus is empty");
  if (val_corpus.empty()) throw ValidationError("train: validation corpus is empty");
  const bool is_double = std::is_same_v<T, double>;
  if (is_double != (config.precision == Precision::double_precision)) {
    throw ValidationError("train: model precision does not match TrainConfig.precision");
  }
  std::ofstream history;
  if (options.out_dir) {
    std::filesystem::create_directories(*options.out_dir);
    history.open(*options.out_dir / "history.jsonl", std::ios::trunc);
    if (!history) throw IoError("cannot write " + (*options.out_dir / "history.jsonl").string());
  }

  const std::size_t n = train_corpus.size();
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  const std::size_t steps_per_epoch = (n + bs - 1) / bs;
  const std::size_t total_steps = steps_per_epoch * static_cast<std::size_t>(config.epochs);
  AdamW<T> opt(model.params());
  auto cache = model.make_cache();
  TrainResult result;
  double best_acc = -1.0;
  std::vector<nn::Mat<T>> best_weights;

  std::size_t step = 0;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);

    double loss_sum = 0.0;
    for (std::size_t s = 0; s < steps_per_epoch; ++s) {
      std::vector<const Image*> before, after;
      std::vector<Action> targets;
      std::vector<const Action*> teacher;
      for (std::size_t i = s * bs; i < std::min(n, (s + 1) * bs); ++i) {
        const Transition& t = train_corpus.transitions[order[i]];
        before.push_back(t.obs_before.pixels.get());
        after.push_back(t.obs_after.pixels.get());
        targets.push_back(t.action);
      }
      for (const auto& t : targets) teacher.push_back(&t);

      const auto preds = model.forward(before, after, teacher, cache.get());
      std::vector<BasicPrediction<T>> grads;
      const LossBreakdown loss = batch_loss(preds, targets, model.config(), &grads);
      if (!std::isfinite(loss.total)) {
        std::string where;
        if (options.out_dir && params_finite(model.params())) {
          const auto path = *options.out_dir / "last_good.ckpt";
          save_checkpoint(model, path);
          where = "; last good weights saved to " + path.string();
        }
        throw NumericError("non-finite loss at step " + std::to_string(step) + where, step);
      }
      model.params().zero_grad();
      model.backward(grads, *cache);
      const double norm = grad_norm(model.params());
      if (!std::isfinite(norm)) {
        throw NumericError("non-finite gradient at step " + std::to_string(step), step);
      }
      if (norm > config.grad_clip_norm) {
        const T scale = static_cast<T>(config.grad_clip_norm / (norm + 1e-6));
        for (auto& p : model.params().all()) p.grad *= scale;
      }
      double lr = config.learning_rate;
      if (config.schedule == LrSchedule::cosine) {
        lr *= 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) /
                                    static_cast<double>(total_steps)));
      }
      opt.step(model.params(), lr, config.weight_decay);
      loss_sum += loss.total;
      ++step;
      if (options.on_step) options.on_step(step, loss.total);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(steps_per_epoch);
    rec.val = evaluate(IdmPredictor<T>(model), val_corpus, config.tolerance_bins);
    result.history.push_back(rec);
    if (history) {
      history << epoch_record_to_json(rec).dump() << '\n';
      history.flush();
    }
    if (rec.val.action_accuracy > best_acc) {
      best_acc = rec.val.action_accuracy;
      result.best_epoch = epoch;
      best_weights = snapshot(model.params());
      if (options.out_dir) {
        result.best_checkpoint = *options.out_dir / "best.ckpt";
        save_checkpoint(model, *result.best_checkpoint);
      }
    }
    if (options.on_epoch) options.on_epoch(rec);
  }
  result.steps = step;
  if (options.out_dir) {
    result.final_checkpoint = *options.out_dir / "final.ckpt";
    save_checkpoint(model, *result.final_checkpoint);
  }
  restore(model.params(), best_weights);
  return result;
}

template TrainResult train<float>(IdmModel<float>&, const TransitionCorpus&,
                                  const TransitionCorpus&, const TrainConfig&,
                                  const TrainOptions&);
template TrainResult train<double>(IdmModel<double>&, const TransitionCorpus&,
                                   const TransitionCorpus&, const TrainConfig&,
                                   const TrainOptions&);

}  // namespace idm
