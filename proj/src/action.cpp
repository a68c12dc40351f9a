#include "idmkit/action.hpp"

#include <sstream>

#include "idmkit/errors.hpp"

namespace idm {

std::string_view to_string(ActionKind kind) {
  switch (kind) {
    case ActionKind::click: return "click";
    case ActionKind::scroll: return "scroll";
    case ActionKind::type: return "type";
    case ActionKind::wait: return "wait";
    case ActionKind::move: return "move";
  }
  return "?";
}

std::string_view to_string(ScrollDir dir) {
  return dir == ScrollDir::up ? "up" : "down";
}

ActionKind parse_kind(std::string_view name) {
  for (ActionKind k : kAllKinds) {
    if (to_string(k) == name) return k;
  }
  throw ValidationError("unknown action kind '" + std::string(name) + "'");
}

ScrollDir parse_scroll_dir(std::string_view name) {
  if (name == "up") return ScrollDir::up;
  if (name == "down") return ScrollDir::down;
  throw ValidationError("unknown scroll direction '" + std::string(name) + "'");
}

Action Action::click(int x_bin, int y_bin) {
  Action a;
  a.kind = ActionKind::click;
  a.x_bin = x_bin;
  a.y_bin = y_bin;
  return a;
}

Action Action::move(int x_bin, int y_bin) {
  Action a = click(x_bin, y_bin);
  a.kind = ActionKind::move;
  return a;
}

Action Action::type(int x_bin, int y_bin, std::string text) {
  Action a = click(x_bin, y_bin);
  a.kind = ActionKind::type;
  a.text = std::move(text);
  return a;
}

Action Action::scroll(ScrollDir dir) {
  Action a;
  a.kind = ActionKind::scroll;
  a.scroll_dir = dir;
  return a;
}

Action Action::wait() {
  Action a;
  a.kind = ActionKind::wait;
  a.wait_ms = kWaitMs;
  return a;
}

void validate(const Action& a) {
  const bool loc = is_location_based(a.kind);
  const auto fail = [&](const std::string& why) {
    throw ValidationError(std::string(to_string(a.kind)) + " action: " + why);
  };
  if (a.x_bin.has_value() != loc || a.y_bin.has_value() != loc) {
    fail(loc ? "missing coordinates" : "unexpected coordinates");
  }
  if (loc) {
    if (*a.x_bin < 0 || *a.x_bin > kMaxBin) fail("x_bin out of [0, 1000]");
    if (*a.y_bin < 0 || *a.y_bin > kMaxBin) fail("y_bin out of [0, 1000]");
  }
  const bool is_type = a.kind == ActionKind::type;
  if (a.text.has_value() != is_type) fail(is_type ? "missing text" : "unexpected text");
  if (is_type && a.text->empty()) fail("empty text");
  if (a.scroll_dir.has_value() != (a.kind == ActionKind::scroll)) {
    fail("scroll_dir present iff kind is scroll");
  }
  const bool is_wait = a.kind == ActionKind::wait;
  if (a.wait_ms.has_value() != is_wait) fail("wait_ms present iff kind is wait");
  if (is_wait && *a.wait_ms != kWaitMs) fail("wait_ms must be 500");
}

std::string format_action(const Action& a) {
  std::ostringstream os;
  os << to_string(a.kind) << '(';
  switch (a.kind) {
    case ActionKind::click:
    case ActionKind::move:
      os << *a.x_bin << ", " << *a.y_bin;
      break;
    case ActionKind::type:
      os << *a.x_bin << ", " << *a.y_bin << ", " << nlohmann::json(*a.text).dump();
      break;
    case ActionKind::scroll:
      os << to_string(*a.scroll_dir);
      break;
    case ActionKind::wait:
      os << *a.wait_ms << "ms";
      break;
  }
  os << ')';
  return os.str();
}

nlohmann::json action_to_json(const Action& a) {
  nlohmann::json j;
  j["kind"] = std::string(to_string(a.kind));
  if (a.x_bin) j["x_bin"] = *a.x_bin;
  if (a.y_bin) j["y_bin"] = *a.y_bin;
  if (a.text) j["text"] = *a.text;
  if (a.scroll_dir) j["scroll_dir"] = std::string(to_string(*a.scroll_dir));
  if (a.wait_ms) j["wait_ms"] = *a.wait_ms;
  return j;
}

Action action_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("action must be a JSON object");
  static constexpr std::array<std::string_view, 6> kKeys = {
      "kind", "x_bin", "y_bin", "text", "scroll_dir", "wait_ms"};
  for (const auto& [key, _] : j.items()) {
    bool known = false;
    for (auto k : kKeys) known = known || key == k;
    if (!known) throw ValidationError("unknown action field '" + key + "'");
  }
  Action a;
  try {
    a.kind = parse_kind(j.at("kind").get<std::string>());
    if (j.contains("x_bin")) a.x_bin = j["x_bin"].get<int>();
    if (j.contains("y_bin")) a.y_bin = j["y_bin"].get<int>();
    if (j.contains("text")) a.text = j["text"].get<std::string>();
    if (j.contains("scroll_dir")) {
      a.scroll_dir = parse_scroll_dir(j["scroll_dir"].get<std::string>());
    }
    if (j.contains("wait_ms")) a.wait_ms = j["wait_ms"].get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed action: ") + e.what());
  }
  validate(a);
  return a;
}

}  // namespace idm
