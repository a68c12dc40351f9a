#include "idmkit/env.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <thread>

#include "idmkit/coords.hpp"
#include "idmkit/digest.hpp"
#include "idmkit/errors.hpp"
#include "idmkit/font.hpp"

namespace idm {
namespace {

// Palette.
constexpr Rgb kStripeA{240, 240, 244};
constexpr Rgb kStripeB{226, 228, 234};
constexpr int kStripePeriod = 12;
constexpr Rgb kToolbar{198, 204, 216};
constexpr Rgb kToolbarEdge{140, 146, 160};
constexpr Rgb kButtonDefault{66, 120, 220};
constexpr Rgb kButtonClicked{236, 142, 38};
constexpr Rgb kButtonBorder{28, 32, 64};
constexpr Rgb kButtonText{255, 255, 255};
constexpr Rgb kFieldFill{255, 255, 255};
constexpr Rgb kFieldFilled{255, 246, 196};
constexpr Rgb kFieldBorder{128, 128, 128};
constexpr Rgb kFieldFocusBorder{40, 90, 220};
constexpr Rgb kText{20, 20, 20};
constexpr Rgb kLabelText{70, 70, 80};
constexpr Rgb kListFill{250, 250, 250};
constexpr Rgb kListAlt{232, 238, 248};
constexpr Rgb kListBorder{150, 150, 150};
constexpr Rgb kListBar{120, 130, 150};
constexpr Rgb kPressMark{214, 24, 56};
constexpr Rgb kCursor{255, 0, 255};

const std::vector<std::string>& button_captions() {
  static const std::vector<std::string> kCaptions = {"Go",   "OK",   "Run",  "Save",
                                                     "Next", "Send", "Find", "Add"};
  return kCaptions;
}

const std::vector<std::string>& label_captions() {
  static const std::vector<std::string> kCaptions = {"Name", "Email", "Notes", "Title",
                                                     "Query", "Items", "Status"};
  return kCaptions;
}

void fill_clipped(Image& img, Box r, Rgb c, const Box& clip) {
  img.fill_rect(std::max(r.x0, clip.x0), std::max(r.y0, clip.y0), std::min(r.x1, clip.x1),
                std::min(r.y1, clip.y1), c);
}

void stroke_clipped(Image& img, Box r, Rgb c, const Box& clip) {
  fill_clipped(img, {r.x0, r.y0, r.x1, r.y0 + 1}, c, clip);
  fill_clipped(img, {r.x0, r.y1 - 1, r.x1, r.y1}, c, clip);
  fill_clipped(img, {r.x0, r.y0, r.x0 + 1, r.y1}, c, clip);
  fill_clipped(img, {r.x1 - 1, r.y0, r.x1, r.y1}, c, clip);
}

Box intersect(const Box& a, const Box& b) {
  return {std::max(a.x0, b.x0), std::max(a.y0, b.y0), std::min(a.x1, b.x1),
          std::min(a.y1, b.y1)};
}

bool is_empty(const Box& b) { return b.x0 >= b.x1 || b.y0 >= b.y1; }

Box inflate(const Box& b, int m) { return {b.x0 - m, b.y0 - m, b.x1 + m, b.y1 + m}; }

bool overlaps(const Box& a, const Box& b) { return !is_empty(intersect(a, b)); }

// Screen rows a widget may occupy: the toolbar for pinned widgets, the
// scrolling viewport otherwise.
Box clip_region(const ScreenSpec& spec, bool pinned) {
  return pinned ? Box{0, 0, spec.width, kToolbarHeight}
                : Box{0, kToolbarHeight, spec.width, spec.height};
}

void draw_widget(Image& img, const EnvState& state, const Widget& w) {
  const Box box = screen_box(state, w);
  const Box clip = intersect(clip_region(state.spec, w.pinned), box);
  if (is_empty(clip)) return;
  const int dy = box.y0 - w.bbox.y0;

  switch (w.kind) {
    case WidgetKind::button: {
      const Rgb fill =
          w.visual_state == VisualState::clicked ? kButtonClicked : kButtonDefault;
      fill_clipped(img, box, fill, clip);
      stroke_clipped(img, box, kButtonBorder, clip);
      const int text_w = static_cast<int>(w.caption.size()) * kGlyphAdvance - 1;
      const int tx = box.x0 + std::max(2, (box.x1 - box.x0 - text_w) / 2);
      const int ty = box.y0 + std::max(2, (box.y1 - box.y0 - kGlyphHeight) / 2);
      draw_text(img, tx, ty, w.caption, kButtonText, std::max(clip.x0, box.x0 + 2), clip.y0,
                std::min(clip.x1, box.x1 - 2), clip.y1);
      break;
    }
    case WidgetKind::text_field: {
      const Rgb fill = w.visual_state == VisualState::filled ? kFieldFilled : kFieldFill;
      const Rgb border =
          w.visual_state == VisualState::default_state ? kFieldBorder : kFieldFocusBorder;
      fill_clipped(img, box, fill, clip);
      stroke_clipped(img, box, border, clip);
      const auto it = state.text_buffers.find(w.id);
      if (it != state.text_buffers.end() && !it->second.empty()) {
        const int fit = std::max(0, (box.x1 - box.x0 - 4 + 1) / kGlyphAdvance);
        const std::string& buf = it->second;
        const std::string tail =
            buf.size() > static_cast<std::size_t>(fit) ? buf.substr(buf.size() - fit) : buf;
        draw_text(img, box.x0 + 2, box.y0 + 2, tail, kText, std::max(clip.x0, box.x0 + 1),
                  clip.y0, std::min(clip.x1, box.x1 - 1), clip.y1);
      }
      break;
    }
    case WidgetKind::label:
      draw_text(img, box.x0, box.y0, w.caption, kLabelText, clip.x0, clip.y0, clip.x1,
                clip.y1);
      break;
    case WidgetKind::scroll_region: {
      fill_clipped(img, box, kListFill, clip);
      constexpr int kRow = 8;
      int row = 0;
      for (int y = box.y0 + 1; y < box.y1 - 1; y += kRow, ++row) {
        const Box line{box.x0 + 1, y, box.x1 - 1, std::min(y + kRow, box.y1 - 1)};
        if (row % 2 == 1) fill_clipped(img, line, kListAlt, clip);
        const int bar = 6 + ((w.id * 7 + row * 13) % std::max(1, box.x1 - box.x0 - 12));
        fill_clipped(img, {box.x0 + 3, y + 3, std::min(box.x0 + 3 + bar, box.x1 - 3), y + 5},
                     kListBar, clip);
      }
      stroke_clipped(img, box, kListBorder, clip);
      break;
    }
  }

  if (w.press_point) {
    const Point p{w.press_point->x, w.press_point->y + dy};
    fill_clipped(img, {p.x - 1, p.y - 1, p.x + 2, p.y + 2}, kPressMark, clip);
  }
}

void draw_cursor(Image& img, Point p) {
  const Box clip{0, 0, img.width(), img.height()};
  fill_clipped(img, {p.x - 2, p.y, p.x + 3, p.y + 1}, kCursor, clip);
  fill_clipped(img, {p.x, p.y - 2, p.x + 1, p.y + 3}, kCursor, clip);
}

// Topmost widget under a screen point, if any.
Widget* hit_test(EnvState& state, Point p) {
  const bool in_toolbar = p.y < kToolbarHeight;
  for (auto it = state.widgets.rbegin(); it != state.widgets.rend(); ++it) {
    if (it->pinned != in_toolbar) continue;
    if (screen_box(state, *it).contains(p)) return &*it;
  }
  return nullptr;
}

// Screen-space rectangle where a widget is visible, shrunk by `margin`.
Box visible_interior(const EnvState& state, const Widget& w, int margin) {
  const Box b = inflate(screen_box(state, w), -margin);
  return intersect(b, clip_region(state.spec, w.pinned));
}

// Widget-local storage coordinates for a screen point.
Point to_widget_space(const EnvState& state, const Widget& w, Point screen) {
  return w.pinned ? screen : Point{screen.x, screen.y + state.scroll_offset};
}

// Uniform point in `region` that survives the bin round trip, different from
// `avoid` when possible.
std::optional<Action> pick_location(const EnvState& state, const Box& region,
                                    std::optional<Point> avoid, Rng& rng, ActionKind kind,
                                    const std::string& text) {
  if (is_empty(region)) return std::nullopt;
  const ScreenSpec& spec = state.spec;
  for (int attempt = 0; attempt < 64; ++attempt) {
    const Point p{static_cast<int>(rng.uniform_int(region.x0, region.x1 - 1)),
                  static_cast<int>(rng.uniform_int(region.y0, region.y1 - 1))};
    const int xb = discretize_coord(p.x, spec.width);
    const int yb = discretize_coord(p.y, spec.height);
    const Point q = bin_to_pixel(xb, yb, spec);
    if (!region.contains(q)) continue;
    if (avoid && *avoid == q) continue;
    switch (kind) {
      case ActionKind::click: return Action::click(xb, yb);
      case ActionKind::move: return Action::move(xb, yb);
      default: return Action::type(xb, yb, text);
    }
  }
  return std::nullopt;
}

std::string episode_source_id(std::size_t episode) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ep%06zu", episode);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(WidgetKind kind) {
  switch (kind) {
    case WidgetKind::button: return "button";
    case WidgetKind::text_field: return "text_field";
    case WidgetKind::scroll_region: return "scroll_region";
    case WidgetKind::label: return "label";
  }
  return "?";
}

std::string_view to_string(VisualState state) {
  switch (state) {
    case VisualState::default_state: return "default";
    case VisualState::clicked: return "clicked";
    case VisualState::focused: return "focused";
    case VisualState::filled: return "filled";
  }
  return "?";
}

void validate(const ScreenSpec& spec) {
  if (spec.width < 64 || spec.height < 64) {
    throw ValidationError("screen spec: width and height must be >= 64 (got " +
                          std::to_string(spec.width) + "x" + std::to_string(spec.height) + ")");
  }
  if (spec.min_widgets < 1 || spec.min_widgets > spec.max_widgets) {
    throw ValidationError("screen spec: widget_count_range must satisfy 1 <= min <= max");
  }
}

nlohmann::json screen_spec_to_json(const ScreenSpec& spec) {
  return {{"width", spec.width},
          {"height", spec.height},
          {"rng_seed", spec.rng_seed},
          {"widget_count_range", {spec.min_widgets, spec.max_widgets}}};
}

ScreenSpec screen_spec_from_json(const nlohmann::json& j) {
  ScreenSpec spec;
  for (const auto& [key, value] : j.items()) {
    if (key == "width") {
      spec.width = value.get<int>();
    } else if (key == "height") {
      spec.height = value.get<int>();
    } else if (key == "rng_seed") {
      spec.rng_seed = value.get<std::uint64_t>();
    } else if (key == "widget_count_range") {
      if (!value.is_array() || value.size() != 2) {
        throw ValidationError("widget_count_range must be [min, max]");
      }
      spec.min_widgets = value[0].get<int>();
      spec.max_widgets = value[1].get<int>();
    } else {
      throw ValidationError("unknown screen key '" + key + "'");
    }
  }
  validate(spec);
  return spec;
}

const Widget& EnvState::widget(int id) const {
  for (const auto& w : widgets) {
    if (w.id == id) return w;
  }
  throw ValidationError("no widget with id " + std::to_string(id));
}

Widget& EnvState::widget(int id) {
  return const_cast<Widget&>(static_cast<const EnvState&>(*this).widget(id));
}

void validate(const EnvState& state) {
  validate(state.spec);
  const int vh = state.spec.virtual_height();
  for (std::size_t i = 0; i < state.widgets.size(); ++i) {
    const Widget& w = state.widgets[i];
    if (w.bbox.x0 >= w.bbox.x1 || w.bbox.y0 >= w.bbox.y1) {
      throw ValidationError("widget " + std::to_string(w.id) + ": degenerate bbox");
    }
    if (w.bbox.x0 < 0 || w.bbox.x1 > state.spec.width || w.bbox.y0 < 0 || w.bbox.y1 > vh) {
      throw ValidationError("widget " + std::to_string(w.id) + ": bbox outside page");
    }
    for (std::size_t j = 0; j < i; ++j) {
      if (state.widgets[j].id == w.id) {
        throw ValidationError("duplicate widget id " + std::to_string(w.id));
      }
    }
  }
  if (state.scroll_offset < 0 || state.scroll_offset > state.max_scroll()) {
    throw ValidationError("scroll_offset out of bounds");
  }
}

ActionPolicy ActionPolicy::defaults() {
  return ActionPolicy{{{ActionKind::click, 3.0},
                       {ActionKind::type, 1.0},
                       {ActionKind::scroll, 1.0},
                       {ActionKind::move, 0.5},
                       {ActionKind::wait, 0.5}}};
}

void validate(const ActionPolicy& policy) {
  bool any_positive = false;
  for (const auto& [kind, w] : policy.weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) {
      throw ValidationError("policy weight for " + std::string(to_string(kind)) +
                            " must be a non-negative finite number");
    }
    any_positive = any_positive || w > 0.0;
  }
  if (!any_positive) throw ValidationError("policy needs at least one positive weight");
}

nlohmann::json policy_to_json(const ActionPolicy& policy) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [kind, w] : policy.weights) j[std::string(to_string(kind))] = w;
  return j;
}

ActionPolicy policy_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("policy must be an object of kind -> weight");
  ActionPolicy policy;
  for (const auto& [key, value] : j.items()) {
    if (!value.is_number()) throw ValidationError("policy weight for " + key + " must be numeric");
    policy.weights[parse_kind(key)] = value.get<double>();
  }
  validate(policy);
  return policy;
}

const std::vector<std::string>& typing_words() {
  static const std::vector<std::string> kWords = {
      "hello", "world", "search", "login", "submit", "cat",   "data",  "open",
      "save",  "file",  "name",   "email", "query",  "text",  "home",  "news",
      "play",  "stop",  "next",   "back",  "mail",   "code",  "test",  "menu"};
  return kWords;
}

Point bin_to_pixel(int x_bin, int y_bin, const ScreenSpec& spec) {
  const auto to_px = [](int bin, int extent) {
    const long v = std::lround(undiscretize_coord(bin, extent));
    return static_cast<int>(std::clamp<long>(v, 0, extent - 1));
  };
  return {to_px(x_bin, spec.width), to_px(y_bin, spec.height)};
}

Box screen_box(const EnvState& state, const Widget& w) {
  if (w.pinned) return w.bbox;
  return {w.bbox.x0, w.bbox.y0 - state.scroll_offset, w.bbox.x1,
          w.bbox.y1 - state.scroll_offset};
}

EnvState new_env(const ScreenSpec& spec) {
  validate(spec);
  Rng rng(mix_seed(spec.rng_seed, 0x5C4EE7));
  EnvState state;
  state.spec = spec;
  const int count = static_cast<int>(rng.uniform_int(spec.min_widgets, spec.max_widgets));
  const int width = spec.width;
  const auto& captions = button_captions();
  const auto pick = [&](const std::vector<std::string>& v) {
    return v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(v.size()) - 1))];
  };

  // Toolbar: a text field and a button when there is room for two widgets.
  int next_id = 0;
  int toolbar_x = 3;
  if (count >= 2) {
    const int field_w = std::max(24, width * 55 / 100);
    Widget field{next_id++, WidgetKind::text_field, {3, 3, 3 + field_w, 14}};
    field.pinned = true;
    state.text_buffers[field.id] = "";
    state.widgets.push_back(field);
    toolbar_x = field.bbox.x1 + 5;
  }
  {
    const int button_w = std::min(40, width - toolbar_x - 3);
    Widget button{next_id++, WidgetKind::button, {toolbar_x, 2, toolbar_x + button_w, 14}};
    button.pinned = true;
    button.caption = pick(captions);
    state.widgets.push_back(button);
  }

  // Page widgets at non-overlapping positions below the toolbar.
  const int page_top = kToolbarHeight + 3;
  const int page_bottom = spec.virtual_height() - 3;
  while (static_cast<int>(state.widgets.size()) < count) {
    const double r = rng.uniform();
    WidgetKind kind = r < 0.35   ? WidgetKind::button
                      : r < 0.65 ? WidgetKind::text_field
                      : r < 0.80 ? WidgetKind::label
                                 : WidgetKind::scroll_region;
    Widget w{next_id, kind, {}};
    int min_w = 0, max_w = 0, min_h = 0, max_h = 0;
    switch (kind) {
      case WidgetKind::button:
        w.caption = pick(captions);
        min_w = 20, max_w = 44, min_h = 11, max_h = 15;
        break;
      case WidgetKind::text_field:
        min_w = 44, max_w = 76, min_h = 11, max_h = 11;
        break;
      case WidgetKind::label:
        w.caption = pick(label_captions());
        min_w = max_w = static_cast<int>(w.caption.size()) * kGlyphAdvance - 1;
        min_h = max_h = kGlyphHeight;
        break;
      case WidgetKind::scroll_region:
        min_w = 36, max_w = 80, min_h = 24, max_h = 48;
        break;
    }
    max_w = std::min(max_w, width - 6);
    min_w = std::min(min_w, max_w);
    bool placed = false;
    for (int attempt = 0; attempt < 400 && !placed; ++attempt) {
      // Later attempts use the smallest size.
      const bool shrink = attempt >= 200;
      const int ww = shrink ? min_w : static_cast<int>(rng.uniform_int(min_w, max_w));
      const int hh = shrink ? min_h : static_cast<int>(rng.uniform_int(min_h, max_h));
      if (page_bottom - hh < page_top || width - 3 - ww < 3) break;
      const int x0 = static_cast<int>(rng.uniform_int(3, width - 3 - ww));
      const int y0 = static_cast<int>(rng.uniform_int(page_top, page_bottom - hh));
      const Box candidate{x0, y0, x0 + ww, y0 + hh};
      bool clear = true;
      for (const auto& other : state.widgets) {
        if (!other.pinned && overlaps(inflate(candidate, 3), other.bbox)) {
          clear = false;
          break;
        }
      }
      if (clear) {
        w.bbox = candidate;
        placed = true;
      }
    }
    if (!placed) {
      throw ValidationError("screen " + std::to_string(spec.width) + "x" +
                            std::to_string(spec.height) + " cannot fit " +
                            std::to_string(count) + " widgets");
    }
    if (kind == WidgetKind::text_field) state.text_buffers[w.id] = "";
    state.widgets.push_back(w);
    ++next_id;
  }
  return state;
}

Image render(const EnvState& state) {
  const ScreenSpec& spec = state.spec;
  Image img(spec.width, spec.height);
  for (int y = kToolbarHeight; y < spec.height; ++y) {
    const int page_y = y + state.scroll_offset;
    const Rgb c = (page_y / kStripePeriod) % 2 == 0 ? kStripeA : kStripeB;
    img.fill_rect(0, y, spec.width, y + 1, c);
  }
  for (const auto& w : state.widgets) {
    if (!w.pinned) draw_widget(img, state, w);
  }
  img.fill_rect(0, 0, spec.width, kToolbarHeight - 1, kToolbar);
  img.fill_rect(0, kToolbarHeight - 1, spec.width, kToolbarHeight, kToolbarEdge);
  for (const auto& w : state.widgets) {
    if (w.pinned) draw_widget(img, state, w);
  }
  if (state.cursor) draw_cursor(img, *state.cursor);
  return img;
}

EnvState apply_action(const EnvState& state, const Action& action) {
  validate(action);
  EnvState next = state;
  ++next.step_index;
  switch (action.kind) {
    case ActionKind::click: {
      const Point p = bin_to_pixel(*action.x_bin, *action.y_bin, next.spec);
      Widget* w = hit_test(next, p);
      if (w == nullptr) break;
      if (w->kind == WidgetKind::button) {
        w->visual_state = w->visual_state == VisualState::clicked ? VisualState::default_state
                                                                   : VisualState::clicked;
        w->press_point = to_widget_space(next, *w, p);
      } else if (w->kind == WidgetKind::text_field) {
        if (w->visual_state == VisualState::default_state) w->visual_state = VisualState::focused;
        w->press_point = to_widget_space(next, *w, p);
      }
      break;
    }
    case ActionKind::type: {
      const Point p = bin_to_pixel(*action.x_bin, *action.y_bin, next.spec);
      Widget* w = hit_test(next, p);
      if (w == nullptr || w->kind != WidgetKind::text_field) break;
      next.text_buffers[w->id] += *action.text;
      w->visual_state = VisualState::filled;
      w->press_point = to_widget_space(next, *w, p);
      break;
    }
    case ActionKind::move:
      next.cursor = bin_to_pixel(*action.x_bin, *action.y_bin, next.spec);
      break;
    case ActionKind::scroll: {
      const int delta = *action.scroll_dir == ScrollDir::down ? kScrollStride : -kScrollStride;
      next.scroll_offset = std::clamp(next.scroll_offset + delta, 0, next.max_scroll());
      break;
    }
    case ActionKind::wait:
      break;
  }
  return next;
}

ActionKind sample_kind(const ActionPolicy& policy, Rng& rng) {
  std::vector<double> weights(kNumKinds, 0.0);
  for (const auto& [kind, w] : policy.weights) weights[static_cast<std::size_t>(kind)] = w;
  return kAllKinds[rng.weighted_index(weights)];
}

Action sample_action(const EnvState& state, const ActionPolicy& policy, Rng& rng) {
  const ActionKind kind = sample_kind(policy, rng);
  const auto choose = [&](const std::vector<const Widget*>& v) {
    return v[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(v.size()) - 1))];
  };

  switch (kind) {
    case ActionKind::click:
    case ActionKind::type: {
      std::vector<const Widget*> targets;
      for (const auto& w : state.widgets) {
        const bool ok = kind == ActionKind::click
                            ? (w.kind == WidgetKind::button || w.kind == WidgetKind::text_field)
                            : w.kind == WidgetKind::text_field;
        if (ok && !is_empty(visible_interior(state, w, 2))) targets.push_back(&w);
      }
      if (targets.empty()) return Action::wait();
      const Widget* w = choose(targets);
      std::optional<Point> avoid;
      if (w->press_point) {
        avoid = w->pinned ? *w->press_point
                          : Point{w->press_point->x, w->press_point->y - state.scroll_offset};
      }
      std::string text;
      if (kind == ActionKind::type) {
        const auto& words = typing_words();
        text = words[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(words.size()) - 1))];
      }
      auto action = pick_location(state, visible_interior(state, *w, 2), avoid, rng, kind, text);
      return action ? *action : Action::wait();
    }
    case ActionKind::move: {
      std::vector<const Widget*> targets;
      for (const auto& w : state.widgets) {
        if (!is_empty(visible_interior(state, w, 1))) targets.push_back(&w);
      }
      if (targets.empty()) return Action::wait();
      const Widget* w = choose(targets);
      auto action =
          pick_location(state, visible_interior(state, *w, 1), state.cursor, rng, kind, {});
      return action ? *action : Action::wait();
    }
    case ActionKind::scroll: {
      const int max = state.max_scroll();
      if (max == 0) return Action::wait();
      if (state.scroll_offset == 0) return Action::scroll(ScrollDir::down);
      if (state.scroll_offset >= max) return Action::scroll(ScrollDir::up);
      return Action::scroll(rng.uniform() < 0.5 ? ScrollDir::up : ScrollDir::down);
    }
    case ActionKind::wait:
      break;
  }
  return Action::wait();
}

std::string generator_config_digest(const GeneratorConfig& config) {
  ScreenSpec screen = config.screen;
  screen.rng_seed = 0;  // per-episode seeds are derived from the corpus seed
  const nlohmann::json j = {{"screen", screen_spec_to_json(screen)},
                            {"policy", policy_to_json(config.policy)},
                            {"episode_length", config.episode_length}};
  return sha256_hex(j.dump());
}

Episode run_episode(const GeneratorConfig& config, std::uint64_t seed,
                    std::size_t episode_index, int length) {
  ScreenSpec spec = config.screen;
  spec.rng_seed = mix_seed(seed, 2 * episode_index);
  Rng rng(mix_seed(seed, 2 * episode_index + 1));
  const std::string source = episode_source_id(episode_index);

  Episode ep;
  ep.states.push_back(new_env(spec));
  ep.frames.push_back({std::make_shared<const Image>(render(ep.states.back())), 0, source});
  for (int t = 0; t < length; ++t) {
    const EnvState& current = ep.states.back();
    Action a = sample_action(current, config.policy, rng);
    EnvState next = apply_action(current, a);
    ep.frames.push_back({std::make_shared<const Image>(render(next)), t + 1, source});
    ep.actions.push_back(std::move(a));
    ep.states.push_back(std::move(next));
  }
  return ep;
}

TransitionCorpus generate_corpus(const GeneratorConfig& config, std::size_t n_transitions,
                                 std::uint64_t seed) {
  if (n_transitions == 0) throw ValidationError("generate_corpus: n_transitions must be > 0");
  if (config.episode_length < 1) throw ValidationError("episode_length must be >= 1");
  validate(config.screen);
  validate(config.policy);
  const std::size_t len = static_cast<std::size_t>(config.episode_length);
  const std::size_t episodes = (n_transitions + len - 1) / len;

  std::vector<std::vector<Transition>> shards(episodes);
  std::atomic<std::size_t> next{0};
  const auto worker = [&] {
    for (std::size_t e = next++; e < episodes; e = next++) {
      const std::size_t remaining = n_transitions - e * len;
      const int steps = static_cast<int>(std::min(len, remaining));
      Episode ep = run_episode(config, seed, e, steps);
      auto& shard = shards[e];
      for (int t = 0; t < steps; ++t) {
        shard.push_back({ep.frames[static_cast<std::size_t>(t)], ep.actions[static_cast<std::size_t>(t)],
                         ep.frames[static_cast<std::size_t>(t) + 1]});
      }
    }
  };
  const int workers = std::max(1, config.workers);
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (int i = 0; i < workers; ++i) pool.emplace_back(worker);
  }

  TransitionCorpus corpus;
  corpus.transitions.reserve(n_transitions);
  for (auto& shard : shards) {
    for (auto& t : shard) corpus.transitions.push_back(std::move(t));
  }
  corpus.manifest.seed = seed;
  corpus.manifest.generator_config_digest = generator_config_digest(config);
  corpus.manifest.count = corpus.transitions.size();
  return corpus;
}

}  // namespace idm
