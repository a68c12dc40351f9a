#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "idmkit/corpus.hpp"
#include "idmkit/idm_core.hpp"
#include "json.hpp"

namespace idm {

enum class LrSchedule : std::uint8_t { cosine, constant };
enum class Precision : std::uint8_t { single, double_precision };

struct TrainConfig {
  int epochs = 5;
  int batch_size = 32;
  double learning_rate = 1e-3;
  LrSchedule schedule = LrSchedule::cosine;
  double grad_clip_norm = 1.0;
  double weight_decay = 0.01;
  std::uint64_t seed = 0;
  Precision precision = Precision::single;
  int tolerance_bins = 10;
};

void validate(const TrainConfig& config);
nlohmann::json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct KindScore {
  std::size_t n = 0;
  double action_accuracy = 0.0;
  double kind_accuracy = 0.0;
};

struct EvalReport {
  /// Conditioned on the gold kind; kinds absent from the corpus are omitted.
  std::map<ActionKind, KindScore> per_kind;
  double action_accuracy = 0.0;
  double kind_accuracy = 0.0;
  std::size_t n_examples = 0;
  int match_tolerance_bins = 10;
};

nlohmann::json eval_report_to_json(const EvalReport& report);

/// Kinds equal, and per kind: both bins within `tolerance_bins`, text equal
/// after trimming surrounding whitespace, scroll directions equal.
bool action_match(const Action& pred, const Action& gold, int tolerance_bins);

/// Anything that labels a transition.
class ActionPredictor {
 public:
  virtual ~ActionPredictor() = default;
  virtual Action predict(const Image& before, const Image& after) const = 0;
  virtual std::vector<Action> predict_batch(const std::vector<const Image*>& before,
                                            const std::vector<const Image*>& after) const;
};

template <class T>
class IdmPredictor : public ActionPredictor {
 public:
  explicit IdmPredictor(const IdmModel<T>& model, int batch_size = 32)
      : model_(model), batch_size_(batch_size) {}
  Action predict(const Image& before, const Image& after) const override;
  std::vector<Action> predict_batch(const std::vector<const Image*>& before,
                                    const std::vector<const Image*>& after) const override;

 private:
  const IdmModel<T>& model_;
  int batch_size_;
};

class ConstantPredictor : public ActionPredictor {
 public:
  explicit ConstantPredictor(Action action);
  Action predict(const Image&, const Image&) const override { return action_; }
  const Action& action() const { return action_; }

 private:
  Action action_;
};

/// Most frequent gold kind (ties in ActionKind order) with the median gold
/// bins for location-based kinds; type uses the most frequent text and
/// scroll the most frequent direction.
ConstantPredictor baseline_majority(const TransitionCorpus& corpus);

EvalReport evaluate_actions(const std::vector<Action>& predicted, const TransitionCorpus& corpus,
                            int tolerance_bins);
EvalReport evaluate(const ActionPredictor& predictor, const TransitionCorpus& corpus,
                    int tolerance_bins = 10);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  EvalReport val;
};

nlohmann::json epoch_record_to_json(const EpochRecord& record);

struct TrainResult {
  std::vector<EpochRecord> history;
  int best_epoch = 0;
  std::size_t steps = 0;
  std::optional<std::filesystem::path> best_checkpoint;
  std::optional<std::filesystem::path> final_checkpoint;
};

struct TrainOptions {
  /// When set: history.jsonl, best.ckpt, final.ckpt and (on failure)
  /// last_good.ckpt (only when the weights are still finite) are written here.
  std::optional<std::filesystem::path> out_dir;
  /// Called after every optimization step with (step, loss).
  std::function<void(std::size_t, double)> on_step;
  /// Called after each epoch.
  std::function<void(const EpochRecord&)> on_epoch;
};

/// AdamW with gradient-norm clipping. On return the model holds the weights
/// with the best validation action accuracy. Throws NumericError (carrying
/// the step index) on a non-finite loss after saving the last good weights.
template <class T>
TrainResult train(IdmModel<T>& model, const TransitionCorpus& train_corpus,
                  const TransitionCorpus& val_corpus, const TrainConfig& config,
                  const TrainOptions& options = {});

extern template TrainResult train<float>(IdmModel<float>&, const TransitionCorpus&,
                                         const TransitionCorpus&, const TrainConfig&,
                                         const TrainOptions&);
extern template TrainResult train<double>(IdmModel<double>&, const TransitionCorpus&,
                                          const TransitionCorpus&, const TrainConfig&,
                                          const TrainOptions&);

}  // namespace idm
