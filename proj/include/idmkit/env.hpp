#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "idmkit/action.hpp"
#include "idmkit/corpus.hpp"
#include "idmkit/image.hpp"
#include "idmkit/rng.hpp"
#include "json.hpp"

namespace idm {

inline constexpr int kScrollStride = 40;
inline constexpr int kEpisodeLength = 10;
inline constexpr int kToolbarHeight = 16;
/// The page is this many pixels taller than the screen.
inline constexpr int kPageOverscroll = 3 * kScrollStride;

struct ScreenSpec {
  int width = 128;
  int height = 96;
  std::uint64_t rng_seed = 0;
  int min_widgets = 3;
  int max_widgets = 8;

  int virtual_height() const { return height + kPageOverscroll; }
};

void validate(const ScreenSpec& spec);
nlohmann::json screen_spec_to_json(const ScreenSpec& spec);
ScreenSpec screen_spec_from_json(const nlohmann::json& j);

enum class WidgetKind : std::uint8_t { button, text_field, scroll_region, label };
enum class VisualState : std::uint8_t { default_state, clicked, focused, filled };

std::string_view to_string(WidgetKind kind);
std::string_view to_string(VisualState state);

struct Point {
  int x = 0;
  int y = 0;
  friend bool operator==(const Point&, const Point&) = default;
};

/// Half-open pixel rectangle [x0, x1) x [y0, y1).
struct Box {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  bool contains(Point p) const { return p.x >= x0 && p.x < x1 && p.y >= y0 && p.y < y1; }
  friend bool operator==(const Box&, const Box&) = default;
};

/// Pinned widgets live in the toolbar and use screen coordinates; all others
/// use page coordinates and move with the scroll offset.
struct Widget {
  int id = 0;
  WidgetKind kind = WidgetKind::button;
  Box bbox;
  VisualState visual_state = VisualState::default_state;
  bool pinned = false;
  std::string caption;
  /// Last press location (page coordinates for unpinned widgets); drawn as a
  /// small mark inside the widget.
  std::optional<Point> press_point;

  friend bool operator==(const Widget&, const Widget&) = default;
};

struct EnvState {
  ScreenSpec spec;
  std::vector<Widget> widgets;
  int scroll_offset = 0;
  std::map<int, std::string> text_buffers;
  std::optional<Point> cursor;
  int step_index = 0;

  int max_scroll() const { return spec.virtual_height() - spec.height; }
  const Widget& widget(int id) const;
  Widget& widget(int id);
};

/// Checks widget ids, bounding boxes and the scroll bound.
void validate(const EnvState& state);

/// Sampling weights per action kind.
struct ActionPolicy {
  std::map<ActionKind, double> weights;

  /// click 3, type 1, scroll 1, move 0.5, wait 0.5.
  static ActionPolicy defaults();
};

void validate(const ActionPolicy& policy);
nlohmann::json policy_to_json(const ActionPolicy& policy);
ActionPolicy policy_from_json(const nlohmann::json& j);

/// Fixed vocabulary typed by `sample_action`.
const std::vector<std::string>& typing_words();

EnvState new_env(const ScreenSpec& spec);
Image render(const EnvState& state);

/// Screen pixel addressed by a coordinate bin.
Point bin_to_pixel(int x_bin, int y_bin, const ScreenSpec& spec);

/// Screen-space rectangle a widget currently occupies (unclipped).
Box screen_box(const EnvState& state, const Widget& widget);

EnvState apply_action(const EnvState& state, const Action& action);

/// Draws the action kind from the policy weights, before any fallback.
ActionKind sample_kind(const ActionPolicy& policy, Rng& rng);
/// Samples a kind and arguments. Kinds without a feasible target (no visible
/// text field for type, nothing to scroll, ...) fall back to wait. Every
/// non-wait action produced here changes the rendered screen.
Action sample_action(const EnvState& state, const ActionPolicy& policy, Rng& rng);

/// Everything `generate_corpus` needs besides the seed.
struct GeneratorConfig {
  ScreenSpec screen;
  ActionPolicy policy = ActionPolicy::defaults();
  int episode_length = kEpisodeLength;
  /// Parallel episode workers; the output does not depend on this.
  int workers = 1;
};

std::string generator_config_digest(const GeneratorConfig& config);

/// One environment rollout of `config.episode_length` actions.
struct Episode {
  std::vector<Observation> frames;
  std::vector<Action> actions;
  std::vector<EnvState> states;
};

Episode run_episode(const GeneratorConfig& config, std::uint64_t seed,
                    std::size_t episode_index, int length);

/// Exactly `n_transitions` triples from consecutive fresh episodes. Episode e
/// uses seeds derived from (seed, e) only, so shards can be produced in any
/// order and merged by episode index.
TransitionCorpus generate_corpus(const GeneratorConfig& config, std::size_t n_transitions,
                                 std::uint64_t seed);

}  // namespace idm
