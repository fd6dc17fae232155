#include "stmixer/run_config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>

namespace stmx {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("bad value for " + key + ": '" + value + "'");
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("bad value for " + key + ": '" + value + "' (expected true/false)");
}

std::string fmt(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

std::string fmt_scales(const std::vector<int>& scales) {
  std::string s;
  for (std::size_t i = 0; i < scales.size(); ++i) s += (i ? "," : "") + std::to_string(scales[i]);
  return s;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

template <typename S, typename M>
Field member(S RunConfig::*outer, M S::*inner) {
  if constexpr (std::is_same_v<M, double>) {
    return {[=](const RunConfig& c) { return fmt((c.*outer).*inner); },
            [=](RunConfig& c, const std::string& k, const std::string& v) { (c.*outer).*inner = parse_number<double>(k, v); }};
  } else if constexpr (std::is_same_v<M, bool>) {
    return {[=](const RunConfig& c) { return std::string((c.*outer).*inner ? "true" : "false"); },
            [=](RunConfig& c, const std::string& k, const std::string& v) { (c.*outer).*inner = parse_bool(k, v); }};
  } else if constexpr (std::is_same_v<M, std::string>) {
    return {[=](const RunConfig& c) { return (c.*outer).*inner; },
            [=](RunConfig& c, const std::string&, const std::string& v) { (c.*outer).*inner = v; }};
  } else {
    return {[=](const RunConfig& c) { return std::to_string((c.*outer).*inner); },
            [=](RunConfig& c, const std::string& k, const std::string& v) { (c.*outer).*inner = parse_number<M>(k, v); }};
  }
}

Field double_field(double RunConfig::*m) {
  return {[m](const RunConfig& c) { return fmt(c.*m); },
          [m](RunConfig& c, const std::string& k, const std::string& v) { c.*m = parse_number<double>(k, v); }};
}

template <typename E>
Field enum_field(E DecoderConfig::*m, E (*parse)(const std::string&), std::string (*name)(E)) {
  return {[=](const RunConfig& c) { return name(c.decoder.*m); },
          [=](RunConfig& c, const std::string&, const std::string& v) { c.decoder.*m = parse(v); }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = [] {
    using R = RunConfig;
    std::vector<std::pair<std::string, Field>> t;
    t.push_back({"mode", enum_field(&DecoderConfig::mode, parse_mode, mode_name)});
    t.push_back({"queries", member(&R::decoder, &DecoderConfig::queries)});
    t.push_back({"dim", member(&R::decoder, &DecoderConfig::dim)});
    t.push_back({"points", member(&R::decoder, &DecoderConfig::points)});
    t.push_back({"groups", member(&R::decoder, &DecoderConfig::groups)});
    t.push_back({"heads", member(&R::decoder, &DecoderConfig::heads)});
    t.push_back({"modules", member(&R::decoder, &DecoderConfig::modules)});
    t.push_back({"classes", member(&R::decoder, &DecoderConfig::classes)});
    t.push_back({"frames", member(&R::decoder, &DecoderConfig::frames)});
    t.push_back({"point_ratio", member(&R::decoder, &DecoderConfig::point_ratio)});
    t.push_back({"frame_ratio", member(&R::decoder, &DecoderConfig::frame_ratio)});
    t.push_back({"sampling",
                 {[](const R& c) { return std::string(c.decoder.sampling == SamplingKind::kAdaptive ? "adaptive" : "fixed_grid"); },
                  [](R& c, const std::string& k, const std::string& v) {
                    if (v == "adaptive") c.decoder.sampling = SamplingKind::kAdaptive;
                    else if (v == "fixed_grid") c.decoder.sampling = SamplingKind::kFixedGrid;
                    else throw ConfigError("bad value for " + k + ": '" + v + "' (adaptive|fixed_grid)");
                  }}});
    t.push_back({"grid_side", member(&R::decoder, &DecoderConfig::grid_side)});
    t.push_back({"mixing", enum_field(&DecoderConfig::mixing, parse_mixing, mixing_name)});
    t.push_back({"fixed_mixing", member(&R::decoder, &DecoderConfig::fixed_mixing)});
    t.push_back({"classifier", enum_field(&DecoderConfig::classifier, parse_classifier, classifier_name)});
    t.push_back({"bank_rows", member(&R::decoder, &DecoderConfig::bank_rows)});
    t.push_back({"bank_window", member(&R::decoder, &DecoderConfig::bank_window)});
    t.push_back({"cross_layers", member(&R::decoder, &DecoderConfig::cross_layers)});
    t.push_back({"loss.cls", member(&R::weights, &LossWeights::cls)});
    t.push_back({"loss.l1", member(&R::weights, &LossWeights::l1)});
    t.push_back({"loss.giou", member(&R::weights, &LossWeights::giou)});
    t.push_back({"loss.action", member(&R::weights, &LossWeights::action)});
    t.push_back({"focal.gamma", member(&R::focal, &FocalParams::gamma)});
    t.push_back({"focal.alpha", member(&R::focal, &FocalParams::alpha)});
    t.push_back({"optimizer",
                 {[](const R& c) { return optimizer_name(c.optim.kind); },
                  [](R& c, const std::string&, const std::string& v) { c.optim.kind = parse_optimizer(v); }}});
    t.push_back({"lr", member(&R::optim, &OptimConfig::lr)});
    t.push_back({"momentum", member(&R::optim, &OptimConfig::momentum)});
    t.push_back({"beta1", member(&R::optim, &OptimConfig::beta1)});
    t.push_back({"beta2", member(&R::optim, &OptimConfig::beta2)});
    t.push_back({"eps", member(&R::optim, &OptimConfig::eps)});
    t.push_back({"weight_decay", member(&R::optim, &OptimConfig::weight_decay)});
    t.push_back({"grad_clip", member(&R::optim, &OptimConfig::grad_clip)});
    t.push_back({"iterations", member(&R::optim, &OptimConfig::iterations)});
    t.push_back({"cosine", member(&R::optim, &OptimConfig::cosine)});
    t.push_back({"warmup", member(&R::optim, &OptimConfig::warmup)});
    t.push_back({"backbone",
                 {[](const R& c) { return backbone_name(c.backbone); },
                  [](R& c, const std::string&, const std::string& v) { c.backbone = parse_backbone(v); }}});
    t.push_back({"scales",
                 {[](const R& c) { return fmt_scales(c.scales); },
                  [](R& c, const std::string& k, const std::string& v) {
                    std::vector<int> out;
                    std::stringstream in(v);
                    std::string item;
                    while (std::getline(in, item, ',')) out.push_back(parse_number<int>(k, trim(item)));
                    c.scales = out;
                  }}});
    t.push_back({"bg_threshold", double_field(&R::bg_threshold)});
    t.push_back({"link_tau", double_field(&R::link_tau)});
    t.push_back({"eval_iou", double_field(&R::eval_iou)});
    t.push_back({"seed",
                 {[](const R& c) { return std::to_string(c.seed); },
                  [](R& c, const std::string& k, const std::string& v) { c.seed = parse_number<std::uint64_t>(k, v); }}});
    t.push_back({"out", {[](const R& c) { return c.out; }, [](R& c, const std::string&, const std::string& v) { c.out = v; }}});
    t.push_back({"scenario", member(&R::scenario, &ScenarioConfig::preset)});
    t.push_back({"width", member(&R::scenario, &ScenarioConfig::width)});
    t.push_back({"height", member(&R::scenario, &ScenarioConfig::height)});
    t.push_back({"clips", member(&R::scenario, &ScenarioConfig::clips)});
    t.push_back({"actors_min", member(&R::scenario, &ScenarioConfig::actors_min)});
    t.push_back({"actors_max", member(&R::scenario, &ScenarioConfig::actors_max)});
    t.push_back({"actor_min_size", member(&R::scenario, &ScenarioConfig::actor_min_size)});
    t.push_back({"actor_max_size", member(&R::scenario, &ScenarioConfig::actor_max_size)});
    t.push_back({"speed", member(&R::scenario, &ScenarioConfig::speed)});
    t.push_back({"jump", member(&R::scenario, &ScenarioConfig::jump)});
    t.push_back({"noise", member(&R::scenario, &ScenarioConfig::noise)});
    return t;
  }();
  return table;
}

}  // namespace

BackboneKind parse_backbone(const std::string& text) {
  if (text == "hierarchy") return BackboneKind::kHierarchy;
  if (text == "plain") return BackboneKind::kPlain;
  throw ConfigError("unknown backbone '" + text + "' (hierarchy|plain)");
}

std::string backbone_name(BackboneKind kind) { return kind == BackboneKind::kPlain ? "plain" : "hierarchy"; }

OptimizerKind parse_optimizer(const std::string& text) {
  if (text == "sgd") return OptimizerKind::kSgd;
  if (text == "adamw") return OptimizerKind::kAdamW;
  throw ConfigError("unknown optimizer '" + text + "' (sgd|adamw)");
}

std::string optimizer_name(OptimizerKind kind) { return kind == OptimizerKind::kSgd ? "sgd" : "adamw"; }

RunConfig RunConfig::defaults(DetectorMode mode) {
  RunConfig c;
  c.decoder = DecoderConfig::defaults(mode);
  c.bg_threshold = mode == DetectorMode::kKeyframe ? 0.3 : 0.7;
  c.scenario.width = 256;
  c.scenario.height = 256;
  c.scenario.actor_min_size = 48;
  c.scenario.actor_max_size = 120;
  c.scenario.jump = 112;
  return c;
}

RunConfig RunConfig::desk(DetectorMode mode) {
  RunConfig c;
  c.decoder = DecoderConfig::defaults(mode);
  c.decoder.queries = 10;
  c.decoder.dim = 32;
  c.decoder.points = 8;
  c.decoder.groups = 4;
  c.decoder.heads = 4;
  c.decoder.modules = 2;
  c.decoder.classes = 3;
  c.decoder.frames = mode == DetectorMode::kKeyframe ? 2 : 4;
  c.decoder.point_ratio = 2;
  c.decoder.frame_ratio = 2;
  c.bg_threshold = mode == DetectorMode::kKeyframe ? 0.3 : 0.7;
  c.optim.lr = 1e-3;
  c.optim.cosine = true;
  c.optim.warmup = 20;
  c.optim.iterations = mode == DetectorMode::kKeyframe ? 500 : 800;
  c.out = "desk";
  return c;
}

void RunConfig::validate() const {
  decoder.validate();
  if (scales.empty()) throw ConfigError("scales: at least one scale");
  for (std::size_t i = 0; i < scales.size(); ++i) {
    if (scales[i] < 2 || scales[i] > 5) throw ConfigError("scales: values must lie in 2..5");
    if (i > 0 && scales[i] <= scales[i - 1]) throw ConfigError("scales: must be strictly ascending");
  }
  if (backbone == BackboneKind::kPlain && scales != std::vector<int>{2, 3, 4, 5}) {
    throw ConfigError("plain backbone builds all four scales; scales must be 2,3,4,5");
  }
  if (scenario.width % 32 != 0 || scenario.height % 32 != 0 || scenario.width == 0 || scenario.height == 0) {
    throw ConfigError("frame width and height must be positive multiples of 32");
  }
  if (scenario.clips == 0) throw ConfigError("clips must be positive");
  if (scenario.actors_min > scenario.actors_max) throw ConfigError("actors_min exceeds actors_max");
  if (scenario.actors_max > decoder.queries) throw ConfigError("more actors than queries");
  if (!(scenario.actor_min_size > 0) || scenario.actor_min_size > scenario.actor_max_size) {
    throw ConfigError("actor sizes must satisfy 0 < min <= max");
  }
  if (scenario.noise < 0) throw ConfigError("noise must be non-negative");
  if (optim.lr < 0 || optim.weight_decay < 0 || optim.grad_clip < 0) throw ConfigError("lr, weight_decay, grad_clip >= 0");
  if (optim.momentum < 0 || optim.momentum >= 1) throw ConfigError("momentum must lie in [0, 1)");
  if (optim.beta1 < 0 || optim.beta1 >= 1 || optim.beta2 < 0 || optim.beta2 >= 1) throw ConfigError("betas in [0, 1)");
  if (!(optim.eps > 0)) throw ConfigError("eps must be positive");
  if (bg_threshold < 0 || bg_threshold > 1) throw ConfigError("bg_threshold must lie in [0, 1]");
  if (link_tau < 0 || link_tau > 1 || eval_iou < 0 || eval_iou > 1) throw ConfigError("IoU thresholds lie in [0, 1]");
  if (weights.cls < 0 || weights.l1 < 0 || weights.giou < 0 || weights.action < 0) throw ConfigError("negative loss weight");
}

std::map<std::string, std::string> RunConfig::to_map() const {
  std::map<std::string, std::string> m;
  for (const auto& [key, field] : fields()) m[key] = field.get(*this);
  return m;
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& [key, field] : fields()) s += key + "=" + field.get(*this) + "\n";
  return s;
}

void apply_setting(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& [name, field] : fields()) {
    if (name == key) {
      field.set(config, key, value);
      return;
    }
  }
  throw ConfigError("unknown config key '" + key + "'");
}

RunConfig parse_run_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    apply_setting(base, key, value);
  }
  return base;
}

RunConfig load_run_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), std::move(base));
}

std::vector<std::string> run_config_keys() {
  std::vector<std::string> keys;
  for (const auto& [key, field] : fields()) keys.push_back(key);
  return keys;
}

}  // namespace stmx
