#pragma once

#include <array>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "idmkit/action.hpp"
#include "idmkit/image.hpp"
#include "idmkit/nn.hpp"
#include "json.hpp"

namespace idm {

enum class EncoderKind : std::uint8_t { small_conv, pluggable_pretrained };

struct ModelConfig {
  int input_height = 224;
  int input_width = 224;
  EncoderKind encoder = EncoderKind::small_conv;
  int trunk_layers = 4;
  int trunk_width = 64;
  int attention_heads = 4;
  /// Channels of the full-resolution feature map the coordinate head reads.
  int fine_channels = 16;
  /// Outputs of the first three stride-2 blocks; the fourth emits trunk_width.
  std::array<int, 3> encoder_channels{16, 32, 64};
  int coord_bins = kCoordBins;
  /// Word reader feeding the text head: two stride-2 stages at these widths.
  std::array<int, 2> text_reader_channels{32, 64};
  std::string text_vocab = "printable_ascii";
  int text_embed = 32;
  /// Longest decodable text, EOS excluded.
  int max_text_len = 16;
  std::array<double, 3> head_loss_weights{1.0, 1.0, 1.0};
  std::uint64_t init_seed = 0;
};

void validate(const ModelConfig& config);
nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);
std::string model_config_digest(const ModelConfig& config);

// Character vocabulary: printable ASCII (95 symbols), one unknown symbol, then
// the specials.
inline constexpr int kVocabUnknown = 95;
inline constexpr int kVocabBos = 96;
inline constexpr int kVocabEos = 97;
inline constexpr int kVocabPad = 98;
inline constexpr int kVocabSize = 99;

int encode_char(char c);
char decode_char(int id);
/// Token targets for `text` (truncated to max_len characters) followed by EOS.
std::vector<int> encode_text(const std::string& text, int max_len);

/// Internal kind-head classes: the scroll kind is split by direction.
enum class KindClass : std::uint8_t { click, scroll_up, scroll_down, type, wait, move };
inline constexpr int kNumKindClasses = 6;
KindClass kind_class(const Action& action);

template <class T>
struct BasicPrediction {
  nn::Vec<T> kind_logits;        // 5, in ActionKind order
  nn::Vec<T> scroll_dir_logits;  // 2: up, down
  nn::Vec<T> x_logits;           // coord_bins
  nn::Vec<T> y_logits;           // coord_bins
  /// One row per decoding step (teacher-forced or greedy); empty when the
  /// text head was not run.
  std::vector<nn::Vec<T>> text_logits;
};

using ActionPrediction = BasicPrediction<float>;

struct LossBreakdown {
  double kind_loss = 0.0;
  double coord_loss = 0.0;
  double text_loss = 0.0;
  double total = 0.0;
  /// Examples each head was applied to: kind, coord, text.
  std::array<std::size_t, 3> mask_counts{0, 0, 0};
};

/// Per-example loss. `pred.text_logits` must be teacher-forced on the target
/// text when the target is a type action.
template <class T>
LossBreakdown compute_loss(const BasicPrediction<T>& pred, const Action& target,
                           const ModelConfig& config);

/// Mean of each head's loss over the examples it applies to, combined with
/// the head weights. When `grads` is non-null it receives d(total)/d(logits)
/// for every prediction; heads that do not apply get exactly zero gradient.
template <class T>
LossBreakdown batch_loss(const std::vector<BasicPrediction<T>>& preds,
                         const std::vector<Action>& targets, const ModelConfig& config,
                         std::vector<BasicPrediction<T>>* grads);

/// Decodes logits into an action. Kind ties resolve in ActionKind order.
/// Text is read from `pred.text_logits` up to the first EOS.
template <class T>
Action decode_prediction(const BasicPrediction<T>& pred);

/// Bilinear resize with half-pixel centres, RGB scaled to [0, 1].
nn::Mat<float> resize_to_input(const Image& image, int height, int width);

template <class T>
class IdmModel {
 public:
  explicit IdmModel(const ModelConfig& config);
  ~IdmModel();
  IdmModel(IdmModel&&) noexcept;
  IdmModel& operator=(IdmModel&&) noexcept;

  const ModelConfig& config() const { return config_; }
  nn::ParamSet<T>& params() { return params_; }
  const nn::ParamSet<T>& params() const { return params_; }

  struct Cache;
  struct CacheDeleter {
    void operator()(Cache* cache) const;
  };
  using CachePtr = std::unique_ptr<Cache, CacheDeleter>;

  /// Batched forward pass. `teacher` holds one entry per example: the target
  /// action for teacher-forced text logits, or nullptr. With `greedy_text`,
  /// examples without a teacher whose decoded kind is type get greedy text.
  std::vector<BasicPrediction<T>> forward(const std::vector<const Image*>& before,
                                          const std::vector<const Image*>& after,
                                          const std::vector<const Action*>& teacher,
                                          Cache* cache, bool greedy_text = false) const;

  /// Accumulates parameter gradients for the logit gradients of the batch
  /// last run through forward with this cache.
  void backward(const std::vector<BasicPrediction<T>>& grads, Cache& cache);

  /// Logits for one pair with greedy text decoding.
  BasicPrediction<T> predict_logits(const Image& before, const Image& after) const;
  Action predict_action(const Image& before, const Image& after) const;

  CachePtr make_cache() const;

 private:
  struct Layers;
  ModelConfig config_;
  nn::ParamSet<T> params_;
  std::unique_ptr<Layers> layers_;
};

extern template class IdmModel<float>;
extern template class IdmModel<double>;

// Checkpoints: a small binary container holding the model config as canonical
// JSON plus named float32 tensors. Double-precision models are narrowed.
template <class T>
void save_checkpoint(const IdmModel<T>& model, const std::filesystem::path& path);

/// Throws IntegrityError when the stored config digest differs from
/// `expected`'s unless `allow_config_mismatch` is set.
IdmModel<float> load_checkpoint(const std::filesystem::path& path,
                                const std::optional<ModelConfig>& expected = std::nullopt,
                                bool allow_config_mismatch = false);

}  // namespace idm
