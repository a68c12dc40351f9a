#include "idmkit/idm_core.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>

#include "idmkit/digest.hpp"
#include "idmkit/errors.hpp"

namespace idm {
using nlohmann::json;
using nn::Mat;
using nn::Vec;

// ---------------------------------------------------------------------------
// Config

void validate(const ModelConfig& c) {
  if (c.input_height < 8 || c.input_width < 8) {
    throw ValidationError("input_resolution must be at least 8x8");
  }
  if (c.encoder != EncoderKind::small_conv) {
    throw ValidationError("encoder 'pluggable_pretrained' has no weights available; use small_conv");
  }
  if (c.trunk_layers < 1) throw ValidationError("trunk_layers must be >= 1");
  if (c.trunk_width < 2) throw ValidationError("trunk_width must be >= 2");
  if (c.attention_heads < 1 || c.trunk_width % c.attention_heads != 0) {
    throw ValidationError("trunk_width must be divisible by attention_heads");
  }
  if (c.fine_channels < 1) throw ValidationError("fine_channels must be >= 1");
  for (int ch : c.encoder_channels) {
    if (ch < 1) throw ValidationError("encoder_channels must be positive");
  }
  if (c.coord_bins != kCoordBins) throw ValidationError("coord_bins must be 1001");
  if (c.text_vocab != "printable_ascii") {
    throw ValidationError("unsupported text_vocab '" + c.text_vocab + "'");
  }
  for (int ch : c.text_reader_channels) {
    if (ch < 1) throw ValidationError("text_reader_channels must be positive");
  }
  if (c.text_embed < 1) throw ValidationError("text_embed must be >= 1");
  if (c.max_text_len < 1) throw ValidationError("max_text_len must be >= 1");
  bool any = false;
  for (double w : c.head_loss_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw ValidationError("head_loss_weights must be finite and >= 0");
    }
    any = any || w > 0.0;
  }
  if (!any) throw ValidationError("head_loss_weights must not all be 0");
}

json model_config_to_json(const ModelConfig& c) {
  return {{"input_resolution", {c.input_height, c.input_width}},
          {"encoder", c.encoder == EncoderKind::small_conv ? "small_conv" : "pluggable_pretrained"},
          {"trunk_layers", c.trunk_layers},
          {"trunk_width", c.trunk_width},
          {"attention_heads", c.attention_heads},
          {"fine_channels", c.fine_channels},
          {"encoder_channels", c.encoder_channels},
          {"coord_bins", c.coord_bins},
          {"text_reader_channels", c.text_reader_channels},
          {"text_vocab", c.text_vocab},
          {"text_embed", c.text_embed},
          {"max_text_len", c.max_text_len},
          {"head_loss_weights", c.head_loss_weights},
          {"init_seed", c.init_seed}};
}

ModelConfig model_config_from_json(const json& j) {
  static const std::set<std::string> known = {
      "input_resolution", "encoder",    "trunk_layers", "trunk_width",  "attention_heads",
      "fine_channels",    "encoder_channels", "coord_bins", "text_vocab", "text_embed", "text_reader_channels",
      "max_text_len",     "head_loss_weights", "init_seed"};
  if (!j.is_object()) throw ValidationError("model config must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ValidationError("unknown model config key '" + key + "'");
  }
  ModelConfig c;
  try {
    if (j.contains("input_resolution")) {
      const auto r = j["input_resolution"].get<std::array<int, 2>>();
      c.input_height = r[0];
      c.input_width = r[1];
    }
    if (j.contains("encoder")) {
      const std::string e = j["encoder"].get<std::string>();
      if (e == "small_conv") {
        c.encoder = EncoderKind::small_conv;
      } else if (e == "pluggable_pretrained") {
        c.encoder = EncoderKind::pluggable_pretrained;
      } else {
        throw ValidationError("unknown encoder '" + e + "'");
      }
    }
    const auto get = [&](const char* key, auto& dst) {
      if (j.contains(key)) dst = j[key].get<std::decay_t<decltype(dst)>>();
    };
    get("trunk_layers", c.trunk_layers);
    get("trunk_width", c.trunk_width);
    get("attention_heads", c.attention_heads);
    get("fine_channels", c.fine_channels);
    get("encoder_channels", c.encoder_channels);
    get("coord_bins", c.coord_bins);
    get("text_reader_channels", c.text_reader_channels);
    get("text_vocab", c.text_vocab);
    get("text_embed", c.text_embed);
    get("max_text_len", c.max_text_len);
    get("head_loss_weights", c.head_loss_weights);
    get("init_seed", c.init_seed);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("model config: ") + e.what());
  }
  validate(c);
  return c;
}

std::string model_config_digest(const ModelConfig& config) {
  return sha256_hex(model_config_to_json(config).dump());
}

// ---------------------------------------------------------------------------
// Vocabulary

int encode_char(char c) {
  const auto u = static_cast<unsigned char>(c);
  return (u >= 0x20 && u < 0x7F) ? static_cast<int>(u) - 0x20 : kVocabUnknown;
}

char decode_char(int id) { return id >= 0 && id < 95 ? static_cast<char>(id + 0x20) : '?'; }

std::vector<int> encode_text(const std::string& text, int max_len) {
  std::vector<int> ids;
  for (std::size_t i = 0; i < text.size() && static_cast<int>(i) < max_len; ++i) {
    ids.push_back(encode_char(text[i]));
  }
  ids.push_back(kVocabEos);
  return ids;
}

KindClass kind_class(const Action& a) {
  switch (a.kind) {
    case ActionKind::click: return KindClass::click;
    case ActionKind::scroll:
      return a.scroll_dir == ScrollDir::down ? KindClass::scroll_down : KindClass::scroll_up;
    case ActionKind::type: return KindClass::type;
    case ActionKind::wait: return KindClass::wait;
    case ActionKind::move: return KindClass::move;
  }
  return KindClass::wait;
}

// ---------------------------------------------------------------------------
// Loss and decoding

namespace {

template <class T>
double log_sum_exp(const Vec<T>& v) {
  const double m = static_cast<double>(v.maxCoeff());
  double s = 0.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) s += std::exp(static_cast<double>(v(i)) - m);
  return m + std::log(s);
}

/// Cross-entropy of `logits` against `target`; adds scale * dCE/dlogits to
/// `grad` when non-null.
template <class T>
double cross_entropy(const Vec<T>& logits, int target, double scale, Vec<T>* grad) {
  const double lse = log_sum_exp(logits);
  if (grad) {
    if (grad->size() != logits.size()) *grad = Vec<T>::Zero(logits.size());
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
      const double p = std::exp(static_cast<double>(logits(i)) - lse);
      (*grad)(i) += static_cast<T>(scale * (p - (i == target ? 1.0 : 0.0)));
    }
  }
  return lse - static_cast<double>(logits(target));
}

template <class T>
int argmax_first(const Vec<T>& v) {
  int best = 0;
  for (Eigen::Index i = 1; i < v.size(); ++i) {
    if (v(i) > v(best)) best = static_cast<int>(i);
  }
  return best;
}

struct HeadScales {
  double kind = 0.0, coord = 0.0, text = 0.0;
};

template <class T>
void example_loss(const BasicPrediction<T>& pred, const Action& target, const ModelConfig& config,
                  const HeadScales& scales, LossBreakdown& out, BasicPrediction<T>* grad) {
  const auto w = config.head_loss_weights;
  if (pred.kind_logits.size() != kNumKinds || pred.scroll_dir_logits.size() != 2) {
    throw ValidationError("prediction: kind logits must have 5 entries and scroll logits 2");
  }
  double kl = cross_entropy(pred.kind_logits, static_cast<int>(target.kind), w[0] * scales.kind,
                            grad ? &grad->kind_logits : nullptr);
  if (target.kind == ActionKind::scroll) {
    kl += cross_entropy(pred.scroll_dir_logits, static_cast<int>(*target.scroll_dir),
                        w[0] * scales.kind, grad ? &grad->scroll_dir_logits : nullptr);
  }
  out.kind_loss += kl * scales.kind;
  ++out.mask_counts[0];

  if (is_location_based(target.kind)) {
    if (pred.x_logits.size() != kCoordBins || pred.y_logits.size() != kCoordBins) {
      throw ValidationError("prediction: coordinate logits must have 1001 entries");
    }
    const double half = 0.5 * w[1] * scales.coord;
    const double cx = cross_entropy(pred.x_logits, *target.x_bin, half,
                                    grad ? &grad->x_logits : nullptr);
    const double cy = cross_entropy(pred.y_logits, *target.y_bin, half,
                                    grad ? &grad->y_logits : nullptr);
    out.coord_loss += 0.5 * (cx + cy) * scales.coord;
    ++out.mask_counts[1];
  }

  if (target.kind == ActionKind::type) {
    const std::vector<int> ids = encode_text(*target.text, config.max_text_len);
    if (pred.text_logits.size() < ids.size()) {
      throw ValidationError("prediction: text logits are not teacher-forced on the target text");
    }
    const double per_token = scales.text / static_cast<double>(ids.size());
    if (grad) grad->text_logits.resize(ids.size());
    double tl = 0.0;
    for (std::size_t t = 0; t < ids.size(); ++t) {
      tl += cross_entropy(pred.text_logits[t], ids[t], w[2] * per_token,
                          grad ? &grad->text_logits[t] : nullptr);
    }
    out.text_loss += tl * per_token;
    ++out.mask_counts[2];
  }
}

}  // namespace

template <class T>
LossBreakdown compute_loss(const BasicPrediction<T>& pred, const Action& target,
                           const ModelConfig& config) {
  validate(target);
  LossBreakdown out;
  example_loss(pred, target, config, {1.0, 1.0, 1.0}, out, static_cast<BasicPrediction<T>*>(nullptr));
  const auto& w = config.head_loss_weights;
  out.total = w[0] * out.kind_loss + w[1] * out.coord_loss + w[2] * out.text_loss;
  return out;
}

template <class T>
LossBreakdown batch_loss(const std::vector<BasicPrediction<T>>& preds,
                         const std::vector<Action>& targets, const ModelConfig& config,
                         std::vector<BasicPrediction<T>>* grads) {
  if (preds.size() != targets.size() || preds.empty()) {
    throw ValidationError("batch_loss: need one target per prediction");
  }
  std::size_t n_coord = 0, n_text = 0;
  for (const auto& t : targets) {
    validate(t);
    n_coord += is_location_based(t.kind) ? 1 : 0;
    n_text += t.kind == ActionKind::type ? 1 : 0;
  }
  const HeadScales scales{1.0 / static_cast<double>(preds.size()),
                          n_coord ? 1.0 / static_cast<double>(n_coord) : 0.0,
                          n_text ? 1.0 / static_cast<double>(n_text) : 0.0};
  if (grads) grads->assign(preds.size(), BasicPrediction<T>{});
  LossBreakdown out;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    example_loss(preds[i], targets[i], config, scales, out, grads ? &(*grads)[i] : nullptr);
  }
  const auto& w = config.head_loss_weights;
  out.total = w[0] * out.kind_loss + w[1] * out.coord_loss + w[2] * out.text_loss;
  return out;
}

template <class T>
Action decode_prediction(const BasicPrediction<T>& pred) {
  const auto kind = static_cast<ActionKind>(argmax_first(pred.kind_logits));
  switch (kind) {
    case ActionKind::wait: return Action::wait();
    case ActionKind::scroll:
      return Action::scroll(pred.scroll_dir_logits.size() == 2 &&
                                    pred.scroll_dir_logits(1) > pred.scroll_dir_logits(0)
                                ? ScrollDir::down
                                : ScrollDir::up);
    default: break;
  }
  const int x = argmax_first(pred.x_logits);
  const int y = argmax_first(pred.y_logits);
  if (kind == ActionKind::click) return Action::click(x, y);
  if (kind == ActionKind::move) return Action::move(x, y);

  std::string text;
  for (std::size_t t = 0; t < pred.text_logits.size(); ++t) {
    const Vec<T>& row = pred.text_logits[t];
    int id = argmax_first(row);
    if (t == 0 && id >= kVocabBos) {
      // An action needs non-empty text: take the best character symbol.
      id = argmax_first(Vec<T>(row.head(kVocabBos)));
    }
    if (id >= kVocabBos) break;
    text.push_back(decode_char(id));
  }
  if (text.empty()) text = "?";
  return Action::type(x, y, text);
}

template LossBreakdown compute_loss<float>(const BasicPrediction<float>&, const Action&,
                                           const ModelConfig&);
template LossBreakdown compute_loss<double>(const BasicPrediction<double>&, const Action&,
                                            const ModelConfig&);
template LossBreakdown batch_loss<float>(const std::vector<BasicPrediction<float>>&,
                                         const std::vector<Action>&, const ModelConfig&,
                                         std::vector<BasicPrediction<float>>*);
template LossBreakdown batch_loss<double>(const std::vector<BasicPrediction<double>>&,
                                          const std::vector<Action>&, const ModelConfig&,
                                          std::vector<BasicPrediction<double>>*);
template Action decode_prediction<float>(const BasicPrediction<float>&);
template Action decode_prediction<double>(const BasicPrediction<double>&);

// ---------------------------------------------------------------------------
// Input

Mat<float> resize_to_input(const Image& image, int height, int width) {
  if (image.empty()) throw ValidationError("cannot encode an empty image");
  Mat<float> out(3, static_cast<Eigen::Index>(height) * width);
  const auto bytes = image.bytes();
  const int sw = image.width(), sh = image.height();
  if (sw == width && sh == height) {
    for (Eigen::Index i = 0; i < out.cols(); ++i) {
      for (int c = 0; c < 3; ++c) out(c, i) = bytes[static_cast<std::size_t>(i) * 3 + c] / 255.0f;
    }
    return out;
  }
  const auto src = [&](double pos, int in, int outn) {
    return std::clamp((pos + 0.5) * in / outn - 0.5, 0.0, static_cast<double>(in - 1));
  };
  for (int y = 0; y < height; ++y) {
    const double fy = src(y, sh, height);
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, sh - 1);
    const double wy = fy - y0;
    for (int x = 0; x < width; ++x) {
      const double fx = src(x, sw, width);
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, sw - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const auto px = [&](int xx, int yy) {
          return static_cast<double>(bytes[(static_cast<std::size_t>(yy) * sw + xx) * 3 + c]);
        };
        const double v = (1 - wy) * ((1 - wx) * px(x0, y0) + wx * px(x1, y0)) +
                         wy * ((1 - wx) * px(x0, y1) + wx * px(x1, y1));
        out(c, static_cast<Eigen::Index>(y) * width + x) = static_cast<float>(v / 255.0);
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model

namespace {

/// Linear interpolation of per-pixel logits onto coordinate bins defined on
/// the original frame extent.
struct BinMap {
  std::vector<int> i0, i1;
  std::vector<double> w;
};

BinMap make_bin_map(int original, int resized) {
  BinMap m;
  m.i0.resize(kCoordBins);
  m.i1.resize(kCoordBins);
  m.w.resize(kCoordBins);
  const double scale = static_cast<double>(resized) / original;
  for (int b = 0; b < kCoordBins; ++b) {
    double u = b * static_cast<double>(resized) / kMaxBin + 0.5 * scale - 0.5;
    u = std::clamp(u, 0.0, static_cast<double>(resized - 1));
    const int i0 = static_cast<int>(std::floor(u));
    m.i0[static_cast<std::size_t>(b)] = i0;
    m.i1[static_cast<std::size_t>(b)] = std::min(i0 + 1, resized - 1);
    m.w[static_cast<std::size_t>(b)] = u - i0;
  }
  return m;
}

template <class T>
Vec<T> interpolate(const Vec<T>& pix, const BinMap& m) {
  Vec<T> out(kCoordBins);
  for (int b = 0; b < kCoordBins; ++b) {
    const auto k = static_cast<std::size_t>(b);
    out(b) = static_cast<T>((1.0 - m.w[k]) * pix(m.i0[k]) + m.w[k] * pix(m.i1[k]));
  }
  return out;
}

template <class T>
void interpolate_backward(const Vec<T>& dbins, const BinMap& m, Vec<T>& dpix) {
  for (int b = 0; b < kCoordBins; ++b) {
    const auto k = static_cast<std::size_t>(b);
    dpix(m.i0[k]) += static_cast<T>((1.0 - m.w[k]) * dbins(b));
    dpix(m.i1[k]) += static_cast<T>(m.w[k] * dbins(b));
  }
}

template <class T>
T lse_span(const T* v, Eigen::Index n, Eigen::Index stride) {
  T m = v[0];
  for (Eigen::Index i = 1; i < n; ++i) m = std::max(m, v[i * stride]);
  T s = 0;
  for (Eigen::Index i = 0; i < n; ++i) s += std::exp(v[i * stride] - m);
  return m + std::log(s);
}

}  // namespace

constexpr int kReaderConvs = 6;

template <class T>
struct IdmModel<T>::Layers {
  nn::Conv3x3<T> fine;
  std::array<nn::Conv3x3<T>, 4> down;
  nn::LayerNorm<T> token_ln;
  nn::Param<T>* pos = nullptr;
  nn::Param<T>* frame_embed = nullptr;  // before, after, difference
  nn::Param<T>* cls = nullptr;
  std::vector<nn::TransformerBlock<T>> blocks;
  nn::LayerNorm<T> final_ln;
  nn::Linear<T> kind_head;
  nn::Linear<T> coord_gate;
  // Word reader over [F_after; F_after - F_before], max-pooled to r.
  std::array<nn::Conv3x3<T>, kReaderConvs> reader;
  nn::LayerNorm<T> reader_ln;
  // Character decoder: h0 = tanh(W0 [c; r] + b0); h' = tanh(Wx e + Wh h + Wr r + bh);
  // logits = Wo h' + bo.
  nn::Param<T>* w0 = nullptr;
  nn::Param<T>* wr = nullptr;
  nn::Param<T>* b0 = nullptr;
  nn::Param<T>* embed = nullptr;
  nn::Param<T>* wx = nullptr;
  nn::Param<T>* wh = nullptr;
  nn::Param<T>* bh = nullptr;
  nn::Param<T>* wo = nullptr;
  nn::Param<T>* bo = nullptr;
  int grid_h = 0, grid_w = 0;
};

template <class T>
struct IdmModel<T>::Cache {
  int batch = 0;
  typename nn::Conv3x3<T>::Cache fine;
  Mat<T> fine_pre, fine_out;
  std::array<typename nn::Conv3x3<T>::Cache, 4> down;
  std::array<Mat<T>, 4> down_pre;
  std::array<std::array<int, 2>, 4> down_in_hw{};
  typename nn::LayerNorm<T>::Cache token_ln;
  std::vector<typename nn::TransformerBlock<T>::Cache> blocks;
  typename nn::LayerNorm<T>::Cache final_ln;
  typename nn::Linear<T>::Cache kind_in, gate_in;
  Mat<T> cls_out;  // final CLS features, D x B
  Mat<T> gate;     // 2*fine x B
  std::vector<Mat<T>> score;  // per example, H x W
  std::vector<BinMap> xmap, ymap;
  Mat<T> kind6;
  struct Text {
    std::vector<int> inputs;
    std::vector<Vec<T>> hidden;  // hidden[0] = h0, hidden[t+1] after step t
  };
  std::vector<std::optional<Text>> text;
  // Word reader, run on the examples listed in reader_examples.
  std::vector<int> reader_examples;
  std::vector<int> reader_slot;  // per example: column in reader_out, or -1
  std::array<typename nn::Conv3x3<T>::Cache, kReaderConvs> reader;
  std::array<Mat<T>, kReaderConvs> reader_pre;
  Eigen::Index reader_hw = 0;
  Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic> reader_argmax;
  typename nn::LayerNorm<T>::Cache reader_ln;
  Mat<T> reader_out;
};

template <class T>
IdmModel<T>::IdmModel(const ModelConfig& config) : config_(config), layers_(std::make_unique<Layers>()) {
  validate(config_);
  Rng rng(mix_seed(config_.init_seed, 0x1D3));
  Layers& l = *layers_;
  const int d = config_.trunk_width;
  const int cf = config_.fine_channels;
  const auto& ch = config_.encoder_channels;
  l.fine = nn::Conv3x3<T>(params_, "encoder.fine", 3, cf, 1, rng);
  const std::array<int, 5> widths{cf, ch[0], ch[1], ch[2], d};
  for (int i = 0; i < 4; ++i) {
    l.down[static_cast<std::size_t>(i)] = nn::Conv3x3<T>(
        params_, "encoder.down" + std::to_string(i), widths[static_cast<std::size_t>(i)],
        widths[static_cast<std::size_t>(i) + 1], 2, rng);
  }
  int gh = config_.input_height, gw = config_.input_width;
  for (int i = 0; i < 4; ++i) {
    gh = nn::Conv3x3<T>::out_size(gh, 2);
    gw = nn::Conv3x3<T>::out_size(gw, 2);
  }
  l.grid_h = gh;
  l.grid_w = gw;
  l.token_ln = nn::LayerNorm<T>(params_, "trunk.token_ln", d);
  l.pos = &params_.add("trunk.pos", d, gh * gw, false);
  l.frame_embed = &params_.add("trunk.frame_embed", d, 3, false);
  l.cls = &params_.add("trunk.cls", d, 1, false);
  nn::init_normal(l.pos->value, 0.02, rng);
  nn::init_normal(l.frame_embed->value, 0.02, rng);
  nn::init_normal(l.cls->value, 0.02, rng);
  for (int i = 0; i < config_.trunk_layers; ++i) {
    l.blocks.emplace_back(params_, "trunk.block" + std::to_string(i), d, config_.attention_heads,
                          rng);
  }
  l.final_ln = nn::LayerNorm<T>(params_, "trunk.final_ln", d);
  l.kind_head = nn::Linear<T>(params_, "head.kind", d, kNumKindClasses, rng);
  l.coord_gate = nn::Linear<T>(params_, "head.coord_gate", d, 2 * cf, rng);

  const auto& rc = config_.text_reader_channels;
  const std::array<std::array<int, 3>, kReaderConvs> reader_shape{{{2 * cf, rc[0], 2},
                                                                   {rc[0], rc[0], 1},
                                                                   {rc[0], rc[1], 2},
                                                                   {rc[1], rc[1], 1},
                                                                   {rc[1], rc[1], 1},
                                                                   {rc[1], rc[1], 1}}};
  for (std::size_t i = 0; i < reader_shape.size(); ++i) {
    const auto [in, out, stride] = reader_shape[i];
    l.reader[i] = nn::Conv3x3<T>(params_, "head.text.reader" + std::to_string(i), in, out, stride, rng);
  }
  l.reader_ln = nn::LayerNorm<T>(params_, "head.text.reader_ln", rc[1]);

  const int e = config_.text_embed;
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));
  const double bound_in = 1.0 / std::sqrt(static_cast<double>(d + rc[1]));
  l.w0 = &params_.add("head.text.w0", d, d + rc[1], true);
  l.wr = &params_.add("head.text.wr", d, rc[1], true);
  l.b0 = &params_.add("head.text.b0", d, 1, false);
  l.embed = &params_.add("head.text.embed", e, kVocabSize, true);
  l.wx = &params_.add("head.text.wx", d, e, true);
  l.wh = &params_.add("head.text.wh", d, d, true);
  l.bh = &params_.add("head.text.bh", d, 1, false);
  l.wo = &params_.add("head.text.wo", kVocabSize, d, true);
  l.bo = &params_.add("head.text.bo", kVocabSize, 1, false);
  nn::init_uniform(l.w0->value, bound_in, rng);
  nn::init_uniform(l.b0->value, bound_in, rng);
  nn::init_uniform(l.wr->value, 1.0 / std::sqrt(static_cast<double>(rc[1])), rng);
  nn::init_normal(l.embed->value, 1.0, rng);
  nn::init_uniform(l.wx->value, 1.0 / std::sqrt(static_cast<double>(e)), rng);
  nn::init_uniform(l.wh->value, bound, rng);
  nn::init_uniform(l.bh->value, bound, rng);
  nn::init_uniform(l.wo->value, bound, rng);
  nn::init_uniform(l.bo->value, bound, rng);
}

template <class T>
IdmModel<T>::~IdmModel() = default;
template <class T>
IdmModel<T>::IdmModel(IdmModel&&) noexcept = default;
template <class T>
IdmModel<T>& IdmModel<T>::operator=(IdmModel&&) noexcept = default;

template <class T>
void IdmModel<T>::CacheDeleter::operator()(Cache* cache) const {
  delete cache;
}

template <class T>
typename IdmModel<T>::CachePtr IdmModel<T>::make_cache() const {
  return CachePtr(new Cache());
}

template <class T>
std::vector<BasicPrediction<T>> IdmModel<T>::forward(const std::vector<const Image*>& before,
                                                     const std::vector<const Image*>& after,
                                                     const std::vector<const Action*>& teacher,
                                                     Cache* cache, bool greedy_text) const {
  const Layers& l = *layers_;
  const int batch = static_cast<int>(before.size());
  if (batch == 0 || after.size() != before.size() || teacher.size() != before.size()) {
    throw ValidationError("forward: before, after and teacher must have the same non-zero size");
  }
  Cache local;
  Cache& c = cache ? *cache : local;
  const bool keep = cache != nullptr;
  c.batch = batch;
  const int hr = config_.input_height, wr = config_.input_width;
  const Eigen::Index hw = static_cast<Eigen::Index>(hr) * wr;
  const int d = config_.trunk_width;
  const int cf = config_.fine_channels;

  // Frames: before images first, then after images.
  Mat<T> input(3, hw * 2 * batch);
  for (int i = 0; i < 2 * batch; ++i) {
    const Image& img = i < batch ? *before[static_cast<std::size_t>(i)]
                                 : *after[static_cast<std::size_t>(i - batch)];
    const Mat<float> x = resize_to_input(img, hr, wr);
    if (x.cols() != hw) throw std::logic_error("resize produced the wrong resolution");
    input.block(0, i * hw, 3, hw) = ((x.array() - 0.5f) * 4.0f).matrix().template cast<T>();
  }
  c.xmap.clear();
  c.ymap.clear();
  for (int i = 0; i < batch; ++i) {
    const Image& b = *before[static_cast<std::size_t>(i)];
    const Image& a = *after[static_cast<std::size_t>(i)];
    if (a.width() != b.width() || a.height() != b.height()) {
      throw ValidationError("forward: before and after frames differ in size");
    }
    c.xmap.push_back(make_bin_map(b.width(), wr));
    c.ymap.push_back(make_bin_map(b.height(), hr));
  }

  Mat<T> fine_pre = l.fine.forward(input, hr, wr, 2 * batch, keep ? &c.fine : nullptr);
  Mat<T> fine = nn::gelu(fine_pre);
  Mat<T> h = fine;
  int ih = hr, iw = wr;
  for (std::size_t i = 0; i < 4; ++i) {
    c.down_in_hw[i] = {ih, iw};
    Mat<T> pre = l.down[i].forward(h, ih, iw, 2 * batch, keep ? &c.down[i] : nullptr);
    h = nn::gelu(pre);
    if (keep) c.down_pre[i] = std::move(pre);
    ih = nn::Conv3x3<T>::out_size(ih, 2);
    iw = nn::Conv3x3<T>::out_size(iw, 2);
  }
  const int p = l.grid_h * l.grid_w;
  const int tokens = 1 + 3 * p;
  const Eigen::Index pb = static_cast<Eigen::Index>(p) * batch;

  Mat<T> z(d, 3 * pb);
  z.leftCols(pb) = h.leftCols(pb);
  z.middleCols(pb, pb) = h.rightCols(pb);
  z.rightCols(pb) = h.rightCols(pb) - h.leftCols(pb);
  const Mat<T> zn = l.token_ln.forward(z, keep ? &c.token_ln : nullptr);

  Mat<T> x(d, static_cast<Eigen::Index>(tokens) * batch);
  for (int e = 0; e < batch; ++e) {
    const Eigen::Index base = static_cast<Eigen::Index>(e) * tokens;
    x.col(base) = l.cls->value.col(0);
    for (int part = 0; part < 3; ++part) {
      auto dst = x.middleCols(base + 1 + part * p, p);
      dst = zn.middleCols(part * pb + static_cast<Eigen::Index>(e) * p, p) + l.pos->value;
      dst.colwise() += l.frame_embed->value.col(part);
    }
  }
  if (keep) c.blocks.resize(l.blocks.size());
  for (std::size_t i = 0; i < l.blocks.size(); ++i) {
    x = l.blocks[i].forward(x, tokens, keep ? &c.blocks[i] : nullptr);
  }
  Mat<T> cls_in(d, batch);
  for (int e = 0; e < batch; ++e) cls_in.col(e) = x.col(static_cast<Eigen::Index>(e) * tokens);
  const Mat<T> cls = l.final_ln.forward(cls_in, keep ? &c.final_ln : nullptr);
  const Mat<T> kind6 = l.kind_head.forward(cls, keep ? &c.kind_in : nullptr);
  const Mat<T> gate = l.coord_gate.forward(cls, keep ? &c.gate_in : nullptr);

  std::vector<BasicPrediction<T>> preds(static_cast<std::size_t>(batch));
  c.score.assign(static_cast<std::size_t>(batch), Mat<T>());
  c.text.assign(static_cast<std::size_t>(batch), std::nullopt);
  for (int e = 0; e < batch; ++e) {
    auto& pred = preds[static_cast<std::size_t>(e)];
    const auto k = kind6.col(e);
    pred.kind_logits.resize(kNumKinds);
    pred.kind_logits << k(0), static_cast<T>(log_sum_exp(Vec<T>(k.segment(1, 2)))), k(3), k(4), k(5);
    pred.scroll_dir_logits = k.segment(1, 2);

    // Score map S(y, x) = gate_after . F_after + gate_before . F_before.
    const Vec<T> s_flat =
        (gate.col(e).head(cf).transpose() * fine.middleCols((batch + e) * hw, hw) +
         gate.col(e).tail(cf).transpose() * fine.middleCols(static_cast<Eigen::Index>(e) * hw, hw))
            .transpose();
    // s_flat index y*W + x; map to H x W column-major.
    Mat<T> s(hr, wr);
    for (int yy = 0; yy < hr; ++yy) {
      for (int xx = 0; xx < wr; ++xx) s(yy, xx) = s_flat(static_cast<Eigen::Index>(yy) * wr + xx);
    }
    Vec<T> lx(wr), ly(hr);
    for (int xx = 0; xx < wr; ++xx) lx(xx) = lse_span(s.col(xx).data(), hr, 1);
    for (int yy = 0; yy < hr; ++yy) ly(yy) = lse_span(s.data() + yy, wr, hr);
    pred.x_logits = interpolate(lx, c.xmap[static_cast<std::size_t>(e)]);
    pred.y_logits = interpolate(ly, c.ymap[static_cast<std::size_t>(e)]);
    if (keep) c.score[static_cast<std::size_t>(e)] = std::move(s);
  }

  // Text: teacher-forced on type targets; greedy where the kind decodes to type.
  std::vector<int> text_examples;
  std::vector<int> slot(static_cast<std::size_t>(batch), -1);
  std::vector<std::vector<int>> targets(static_cast<std::size_t>(batch));
  for (int e = 0; e < batch; ++e) {
    const auto ue = static_cast<std::size_t>(e);
    const Action* target = teacher[ue];
    const bool forced = target != nullptr && target->kind == ActionKind::type && target->text;
    const bool greedy = target == nullptr && greedy_text &&
                        argmax_first(preds[ue].kind_logits) == static_cast<int>(ActionKind::type);
    if (!forced && !greedy) continue;
    if (forced) targets[ue] = encode_text(*target->text, config_.max_text_len);
    slot[ue] = static_cast<int>(text_examples.size());
    text_examples.push_back(e);
  }
  Mat<T> reader_out;
  if (!text_examples.empty()) {
    const int nt = static_cast<int>(text_examples.size());
    Mat<T> g(2 * cf, hw * nt);
    for (int j = 0; j < nt; ++j) {
      const Eigen::Index e = text_examples[static_cast<std::size_t>(j)];
      const auto fa = fine.middleCols((batch + e) * hw, hw);
      g.block(0, j * hw, cf, hw) = fa;
      g.block(cf, j * hw, cf, hw) = fa - fine.middleCols(e * hw, hw);
    }
    int gh = hr, gw = wr;
    for (std::size_t i = 0; i < l.reader.size(); ++i) {
      Mat<T> pre = l.reader[i].forward(g, gh, gw, nt, keep ? &c.reader[i] : nullptr);
      g = nn::gelu(pre);
      if (keep) c.reader_pre[i] = std::move(pre);
      gh = nn::Conv3x3<T>::out_size(gh, l.reader[i].stride());
      gw = nn::Conv3x3<T>::out_size(gw, l.reader[i].stride());
    }
    const Eigen::Index ghw = static_cast<Eigen::Index>(gh) * gw;
    Mat<T> pooled(g.rows(), nt);
    Eigen::Matrix<Eigen::Index, Eigen::Dynamic, Eigen::Dynamic> arg(g.rows(), nt);
    for (int j = 0; j < nt; ++j) {
      for (Eigen::Index ch = 0; ch < g.rows(); ++ch) {
        Eigen::Index best = 0;
        pooled(ch, j) = g.row(ch).segment(j * ghw, ghw).maxCoeff(&best);
        arg(ch, j) = j * ghw + best;
      }
    }
    reader_out = l.reader_ln.forward(pooled, keep ? &c.reader_ln : nullptr);
    if (keep) {
      c.reader_hw = ghw;
      c.reader_argmax = std::move(arg);
    }
  }

  for (int j = 0; j < static_cast<int>(text_examples.size()); ++j) {
    const int e = text_examples[static_cast<std::size_t>(j)];
    const auto ue = static_cast<std::size_t>(e);
    auto& pred = preds[ue];
    const bool forced = !targets[ue].empty();
    const auto r = reader_out.col(j);
    typename Cache::Text text;
    Vec<T> hcur = (l.w0->value.leftCols(d) * cls.col(e) + l.w0->value.rightCols(r.size()) * r +
                   l.b0->value.col(0))
                      .array()
                      .tanh()
                      .matrix();
    const Vec<T> bias = l.wr->value * r + l.bh->value.col(0);
    text.hidden.push_back(hcur);
    const int steps = forced ? static_cast<int>(targets[ue].size()) : config_.max_text_len + 1;
    int prev = kVocabBos;
    for (int t = 0; t < steps; ++t) {
      text.inputs.push_back(prev);
      hcur = (l.wx->value * l.embed->value.col(prev) + l.wh->value * hcur + bias)
                 .array()
                 .tanh()
                 .matrix();
      text.hidden.push_back(hcur);
      Vec<T> logits = l.wo->value * hcur + l.bo->value.col(0);
      if (forced) {
        prev = targets[ue][static_cast<std::size_t>(t)];
      } else {
        // Greedy: the first symbol may not end the string.
        prev = t == 0 ? argmax_first(Vec<T>(logits.head(kVocabBos))) : argmax_first(logits);
      }
      pred.text_logits.push_back(std::move(logits));
      if (!forced && prev >= kVocabBos) break;
    }
    if (keep) c.text[ue] = std::move(text);
  }

  if (keep) {
    c.fine_pre = std::move(fine_pre);
    c.fine_out = std::move(fine);
    c.cls_out = cls;
    c.gate = gate;
    c.kind6 = kind6;
    c.reader_examples = std::move(text_examples);
    c.reader_slot = std::move(slot);
    c.reader_out = std::move(reader_out);
  }
  return preds;
}

template <class T>
void IdmModel<T>::backward(const std::vector<BasicPrediction<T>>& grads, Cache& c) {
  Layers& l = *layers_;
  const int batch = c.batch;
  if (static_cast<int>(grads.size()) != batch) {
    throw ValidationError("backward: gradient count does not match the cached batch");
  }
  const int hr = config_.input_height, wr = config_.input_width;
  const Eigen::Index hw = static_cast<Eigen::Index>(hr) * wr;
  const int d = config_.trunk_width;
  const int cf = config_.fine_channels;

  Mat<T> dkind6 = Mat<T>::Zero(kNumKindClasses, batch);
  Mat<T> dgate = Mat<T>::Zero(2 * cf, batch);
  Mat<T> dcls = Mat<T>::Zero(d, batch);
  Mat<T> dfine = Mat<T>::Zero(cf, c.fine_out.cols());
  Mat<T> dreader;
  bool any_coord = false, any_kind = false, any_text = false;

  for (int e = 0; e < batch; ++e) {
    const auto& g = grads[static_cast<std::size_t>(e)];
    if (g.kind_logits.size() == kNumKinds) {
      any_kind = true;
      const auto k = c.kind6.col(e);
      const T up = k(1), down = k(2);
      const T m = std::max(up, down);
      const T eu = std::exp(up - m), ed = std::exp(down - m);
      dkind6(0, e) += g.kind_logits(0);
      dkind6(1, e) += g.kind_logits(1) * eu / (eu + ed);
      dkind6(2, e) += g.kind_logits(1) * ed / (eu + ed);
      dkind6(3, e) += g.kind_logits(2);
      dkind6(4, e) += g.kind_logits(3);
      dkind6(5, e) += g.kind_logits(4);
    }
    if (g.scroll_dir_logits.size() == 2) {
      any_kind = true;
      dkind6(1, e) += g.scroll_dir_logits(0);
      dkind6(2, e) += g.scroll_dir_logits(1);
    }

    if (g.x_logits.size() == kCoordBins || g.y_logits.size() == kCoordBins) {
      any_coord = true;
      const Mat<T>& s = c.score[static_cast<std::size_t>(e)];
      Vec<T> dlx = Vec<T>::Zero(wr), dly = Vec<T>::Zero(hr);
      if (g.x_logits.size() == kCoordBins) {
        interpolate_backward(g.x_logits, c.xmap[static_cast<std::size_t>(e)], dlx);
      }
      if (g.y_logits.size() == kCoordBins) {
        interpolate_backward(g.y_logits, c.ymap[static_cast<std::size_t>(e)], dly);
      }
      Mat<T> ds(hr, wr);
      Vec<T> lse_row(hr);
      for (int yy = 0; yy < hr; ++yy) lse_row(yy) = lse_span(s.data() + yy, wr, hr);
      for (int xx = 0; xx < wr; ++xx) {
        const T lse_col = lse_span(s.col(xx).data(), hr, 1);
        for (int yy = 0; yy < hr; ++yy) {
          ds(yy, xx) = dlx(xx) * std::exp(s(yy, xx) - lse_col) +
                       dly(yy) * std::exp(s(yy, xx) - lse_row(yy));
        }
      }
      // Back to the y*W + x layout used by the feature maps.
      Eigen::Matrix<T, 1, Eigen::Dynamic> ds_flat(hw);
      for (int yy = 0; yy < hr; ++yy) {
        for (int xx = 0; xx < wr; ++xx) ds_flat(static_cast<Eigen::Index>(yy) * wr + xx) = ds(yy, xx);
      }
      const auto fa = c.fine_out.middleCols((batch + e) * hw, hw);
      const auto fb = c.fine_out.middleCols(static_cast<Eigen::Index>(e) * hw, hw);
      dgate.col(e).head(cf) += fa * ds_flat.transpose();
      dgate.col(e).tail(cf) += fb * ds_flat.transpose();
      dfine.middleCols((batch + e) * hw, hw).noalias() += c.gate.col(e).head(cf) * ds_flat;
      dfine.middleCols(static_cast<Eigen::Index>(e) * hw, hw).noalias() +=
          c.gate.col(e).tail(cf) * ds_flat;
    }

    const auto& text = c.text[static_cast<std::size_t>(e)];
    if (!g.text_logits.empty() && text) {
      any_text = true;
      const int j = c.reader_slot[static_cast<std::size_t>(e)];
      const auto r = c.reader_out.col(j);
      const Eigen::Index rw = r.size();
      Vec<T> dh = Vec<T>::Zero(d);
      Vec<T> dbias = Vec<T>::Zero(d);
      const int steps = static_cast<int>(std::min(g.text_logits.size(), text->inputs.size()));
      for (int t = steps - 1; t >= 0; --t) {
        const Vec<T>& hcur = text->hidden[static_cast<std::size_t>(t) + 1];
        const Vec<T>& hprev = text->hidden[static_cast<std::size_t>(t)];
        const Vec<T>& dlog = g.text_logits[static_cast<std::size_t>(t)];
        if (dlog.size() == kVocabSize) {
          l.wo->grad.noalias() += dlog * hcur.transpose();
          l.bo->grad.col(0) += dlog;
          dh.noalias() += l.wo->value.transpose() * dlog;
        }
        const Vec<T> da = (dh.array() * (T(1) - hcur.array().square())).matrix();
        const int in = text->inputs[static_cast<std::size_t>(t)];
        l.wx->grad.noalias() += da * l.embed->value.col(in).transpose();
        l.embed->grad.col(in).noalias() += l.wx->value.transpose() * da;
        l.wh->grad.noalias() += da * hprev.transpose();
        dbias += da;
        dh = l.wh->value.transpose() * da;
      }
      l.bh->grad.col(0) += dbias;
      l.wr->grad.noalias() += dbias * r.transpose();
      const Vec<T>& h0 = text->hidden[0];
      const Vec<T> da0 = (dh.array() * (T(1) - h0.array().square())).matrix();
      l.w0->grad.leftCols(d).noalias() += da0 * c.cls_out.col(e).transpose();
      l.w0->grad.rightCols(rw).noalias() += da0 * r.transpose();
      l.b0->grad.col(0) += da0;
      dcls.col(e).noalias() += l.w0->value.leftCols(d).transpose() * da0;
      if (dreader.size() == 0) dreader = Mat<T>::Zero(rw, c.reader_out.cols());
      dreader.col(j).noalias() +=
          l.w0->value.rightCols(rw).transpose() * da0 + l.wr->value.transpose() * dbias;
    }
  }

  if (any_text) {
    const int nt = static_cast<int>(c.reader_examples.size());
    const Mat<T> dpooled = l.reader_ln.backward(dreader, c.reader_ln);
    Mat<T> dg = Mat<T>::Zero(dpooled.rows(), c.reader_hw * nt);
    for (int j = 0; j < nt; ++j) {
      for (Eigen::Index ch = 0; ch < dpooled.rows(); ++ch) dg(ch, c.reader_argmax(ch, j)) += dpooled(ch, j);
    }
    for (std::size_t i = l.reader.size(); i-- > 0;) {
      dg = l.reader[i].backward(nn::gelu_backward(c.reader_pre[i], dg), c.reader[i]);
    }
    for (int j = 0; j < nt; ++j) {
      const Eigen::Index e = c.reader_examples[static_cast<std::size_t>(j)];
      const auto da = dg.block(0, j * hw, cf, hw);
      const auto dd = dg.block(cf, j * hw, cf, hw);
      dfine.middleCols((batch + e) * hw, hw) += da + dd;
      dfine.middleCols(e * hw, hw) -= dd;
    }
  }

  if (any_kind) dcls += l.kind_head.backward(dkind6, c.kind_in);
  if (any_coord) dcls += l.coord_gate.backward(dgate, c.gate_in);
  if (!any_kind && !any_coord && !any_text) return;

  const int p = l.grid_h * l.grid_w;
  const int tokens = 1 + 3 * p;
  const Eigen::Index pb = static_cast<Eigen::Index>(p) * batch;
  const Mat<T> dcls_in = l.final_ln.backward(dcls, c.final_ln);
  Mat<T> dx = Mat<T>::Zero(d, static_cast<Eigen::Index>(tokens) * batch);
  for (int e = 0; e < batch; ++e) dx.col(static_cast<Eigen::Index>(e) * tokens) = dcls_in.col(e);
  for (std::size_t i = l.blocks.size(); i-- > 0;) dx = l.blocks[i].backward(dx, c.blocks[i]);

  Mat<T> dzn(d, 3 * pb);
  for (int e = 0; e < batch; ++e) {
    const Eigen::Index base = static_cast<Eigen::Index>(e) * tokens;
    l.cls->grad.col(0) += dx.col(base);
    for (int part = 0; part < 3; ++part) {
      const auto src = dx.middleCols(base + 1 + part * p, p);
      dzn.middleCols(part * pb + static_cast<Eigen::Index>(e) * p, p) = src;
      l.pos->grad += src;
      l.frame_embed->grad.col(part) += src.rowwise().sum();
    }
  }
  const Mat<T> dz = l.token_ln.backward(dzn, c.token_ln);
  Mat<T> dh(d, 2 * pb);
  dh.leftCols(pb) = dz.leftCols(pb) - dz.rightCols(pb);
  dh.rightCols(pb) = dz.middleCols(pb, pb) + dz.rightCols(pb);

  for (std::size_t i = 4; i-- > 0;) {
    const Mat<T> dpre = nn::gelu_backward(c.down_pre[i], dh);
    dh = l.down[i].backward(dpre, c.down[i]);
  }
  dfine += dh;
  l.fine.backward(nn::gelu_backward(c.fine_pre, dfine), c.fine, false);
}

template <class T>
BasicPrediction<T> IdmModel<T>::predict_logits(const Image& before, const Image& after) const {
  return forward({&before}, {&after}, {nullptr}, nullptr, true).front();
}

template <class T>
Action IdmModel<T>::predict_action(const Image& before, const Image& after) const {
  return decode_prediction(predict_logits(before, after));
}

template class IdmModel<float>;
template class IdmModel<double>;

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'I', 'D', 'M', 'K', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <class V>
void put(std::string& buf, V v) {
  buf.append(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <class V>
V take(const std::string& buf, std::size_t& pos) {
  if (pos + sizeof(V) > buf.size()) throw IntegrityError("checkpoint truncated");
  V v;
  std::memcpy(&v, buf.data() + pos, sizeof(V));
  pos += sizeof(V);
  return v;
}

std::string take_bytes(const std::string& buf, std::size_t& pos, std::size_t n) {
  if (pos + n > buf.size()) throw IntegrityError("checkpoint truncated");
  std::string s = buf.substr(pos, n);
  pos += n;
  return s;
}

}  // namespace

template <class T>
void save_checkpoint(const IdmModel<T>& model, const std::filesystem::path& path) {
  std::string buf(kMagic, sizeof(kMagic));
  put(buf, kCheckpointVersion);
  const std::string cfg = model_config_to_json(model.config()).dump();
  put(buf, static_cast<std::uint64_t>(cfg.size()));
  buf += cfg;
  put(buf, static_cast<std::uint32_t>(model.params().all().size()));
  for (const auto& p : model.params().all()) {
    put(buf, static_cast<std::uint32_t>(p.name.size()));
    buf += p.name;
    put(buf, static_cast<std::uint64_t>(p.value.rows()));
    put(buf, static_cast<std::uint64_t>(p.value.cols()));
    const Mat<float> narrowed = p.value.template cast<float>();
    buf.append(reinterpret_cast<const char*>(narrowed.data()),
               static_cast<std::size_t>(narrowed.size()) * sizeof(float));
  }
  buf += sha256_hex(buf);
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move checkpoint into place: " + ec.message());
}

template void save_checkpoint<float>(const IdmModel<float>&, const std::filesystem::path&);
template void save_checkpoint<double>(const IdmModel<double>&, const std::filesystem::path&);

IdmModel<float> load_checkpoint(const std::filesystem::path& path,
                                const std::optional<ModelConfig>& expected,
                                bool allow_config_mismatch) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  const std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < sizeof(kMagic) + 64 || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    throw IntegrityError("not a checkpoint file: " + path.string());
  }
  const std::string body = buf.substr(0, buf.size() - 64);
  if (sha256_hex(body) != buf.substr(buf.size() - 64)) {
    throw IntegrityError("checkpoint checksum mismatch: " + path.string());
  }
  std::size_t pos = sizeof(kMagic);
  if (take<std::uint32_t>(body, pos) != kCheckpointVersion) {
    throw IntegrityError("unsupported checkpoint version");
  }
  const auto cfg_len = take<std::uint64_t>(body, pos);
  json cfg_json;
  try {
    cfg_json = json::parse(take_bytes(body, pos, cfg_len));
  } catch (const json::exception& e) {
    throw IntegrityError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  const ModelConfig stored = model_config_from_json(cfg_json);
  if (expected && !allow_config_mismatch &&
      model_config_digest(*expected) != model_config_digest(stored)) {
    throw IntegrityError("checkpoint config digest " + model_config_digest(stored).substr(0, 12) +
                         " does not match the requested config " +
                         model_config_digest(*expected).substr(0, 12));
  }
  IdmModel<float> model(stored);
  const auto n = take<std::uint32_t>(body, pos);
  std::size_t loaded = 0;
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto name_len = take<std::uint32_t>(body, pos);
    const std::string name = take_bytes(body, pos, name_len);
    const auto rows = take<std::uint64_t>(body, pos);
    const auto cols = take<std::uint64_t>(body, pos);
    nn::Param<float>* p = model.params().find(name);
    if (p == nullptr || static_cast<std::uint64_t>(p->value.rows()) != rows ||
        static_cast<std::uint64_t>(p->value.cols()) != cols) {
      throw IntegrityError("checkpoint tensor '" + name + "' does not fit the model");
    }
    const std::string data = take_bytes(body, pos, rows * cols * sizeof(float));
    std::memcpy(p->value.data(), data.data(), data.size());
    ++loaded;
  }
  if (loaded != model.params().all().size() || pos != body.size()) {
    throw IntegrityError("checkpoint tensor set does not match the model");
  }
  return model;
}

}  // namespace idm
