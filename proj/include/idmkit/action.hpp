#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "json.hpp"

namespace idm {

/// The five action primitives. Declaration order is the tie-break order used
/// when decoding predictions.
enum class ActionKind : std::uint8_t { click = 0, scroll, type, wait, move };
enum class ScrollDir : std::uint8_t { up = 0, down };

inline constexpr int kNumKinds = 5;
inline constexpr int kMaxBin = 1000;
inline constexpr int kCoordBins = kMaxBin + 1;
inline constexpr int kWaitMs = 500;

inline constexpr std::array<ActionKind, kNumKinds> kAllKinds = {
    ActionKind::click, ActionKind::scroll, ActionKind::type, ActionKind::wait,
    ActionKind::move};

std::string_view to_string(ActionKind kind);
std::string_view to_string(ScrollDir dir);
ActionKind parse_kind(std::string_view name);
ScrollDir parse_scroll_dir(std::string_view name);

/// click, move and type carry a screen location.
constexpr bool is_location_based(ActionKind kind) {
  return kind == ActionKind::click || kind == ActionKind::move ||
         kind == ActionKind::type;
}

/// Tagged union over the primitives. Which optional fields are engaged is
/// fully determined by `kind`; `validate` enforces that.
struct Action {
  ActionKind kind = ActionKind::wait;
  std::optional<int> x_bin;
  std::optional<int> y_bin;
  std::optional<std::string> text;
  std::optional<ScrollDir> scroll_dir;
  std::optional<int> wait_ms;

  static Action click(int x_bin, int y_bin);
  static Action move(int x_bin, int y_bin);
  static Action type(int x_bin, int y_bin, std::string text);
  static Action scroll(ScrollDir dir);
  static Action wait();

  friend bool operator==(const Action&, const Action&) = default;
};

/// Throws ValidationError when argument presence does not match the kind or a
/// bin is outside [0, 1000].
void validate(const Action& action);

/// Compact human-readable form, e.g. `click(500, 250)` or `type(812, 40, "hello")`.
std::string format_action(const Action& action);

nlohmann::json action_to_json(const Action& action);
/// Parses and validates.
Action action_from_json(const nlohmann::json& j);

}  // namespace idm
