#include "stmixer/model.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "stmixer/tensor_io.hpp"

namespace stmx {

namespace {

constexpr const char* kCheckpointFormat = "stmixer-checkpoint/1";

Parameter& uniform_param(ParameterStore& store, const std::string& name, Shape dims, double bound, Rng& rng) {
  return store.add(name, rng.uniform_tensor(std::move(dims), -bound, bound));
}

nlohmann::json read_manifest(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw LoadError("missing manifest.json in " + dir.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw LoadError(std::string("unreadable manifest: ") + e.what());
  }
  if (j.value("format", "") != kCheckpointFormat) throw LoadError("manifest format is not " + std::string(kCheckpointFormat));
  return j;
}

}  // namespace

Backbone Backbone::create(ParameterStore& store, const RunConfig& config, std::size_t in_channels, Rng& rng) {
  Backbone b;
  b.kind = config.backbone;
  b.scales = config.scales;
  const std::size_t d = config.decoder.dim;
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_channels));
  if (b.kind == BackboneKind::kHierarchy) {
    for (int z : b.scales) {
      const std::string name = "backbone.lateral" + std::to_string(z);
      Parameter& w = uniform_param(store, name + ".weight", {in_channels, d}, bound, rng);
      Parameter& bias = store.add(name + ".bias", Tensor({d}));
      b.lateral.push_back({w.var(), bias.var()});
    }
  } else {
    const struct {
      PlainHead::Kind kind;
      std::size_t factor;
    } specs[4] = {{PlainHead::Kind::kDeconv, 4}, {PlainHead::Kind::kDeconv, 2}, {PlainHead::Kind::kConv, 1}, {PlainHead::Kind::kConv, 2}};
    for (std::size_t i = 0; i < 4; ++i) {
      const std::string name = "backbone.plain" + std::to_string(i);
      const std::size_t k = specs[i].factor;
      const double fan_in = static_cast<double>(specs[i].kind == PlainHead::Kind::kConv ? k * k * in_channels : in_channels);
      Parameter& kernel = uniform_param(store, name + ".kernel", {k, k, in_channels, d}, 1.0 / std::sqrt(fan_in), rng);
      Parameter& bias = store.add(name + ".bias", Tensor({d}));
      b.heads.push_back({specs[i].kind, k, kernel.var(), bias.var()});
    }
  }
  return b;
}

FeatureSpace4D Backbone::operator()(const SyntheticClip& clip) const {
  if (kind == BackboneKind::kPlain) {
    for (const auto& s : clip.stages)
      if (s.stage == 4) return build_from_plain(s.data, heads);
    throw InputError("plain backbone needs the stride-16 map");
  }
  std::vector<StageFeatureMap> chosen;
  for (int z : scales) {
    auto it = std::find_if(clip.stages.begin(), clip.stages.end(), [z](const StageFeatureMap& s) { return s.stage == z; });
    if (it == clip.stages.end()) throw InputError("clip lacks stage " + std::to_string(z));
    chosen.push_back(*it);
  }
  return build_from_hierarchy(chosen, lateral);
}

std::unique_ptr<Model> Model::create(const RunConfig& config, std::uint64_t seed) {
  config.validate();
  std::unique_ptr<Model> m(new Model(config));
  Rng rng(seed);
  m->backbone = Backbone::create(m->store, config, paint_channels(config.decoder.classes), rng);
  m->decoder = Decoder::create(m->store, config.decoder, rng);
  return m;
}

DecoderOutput Model::forward(const SyntheticClip& clip, const Tensor* bank_window) const {
  return decoder_forward(decoder, features(clip), bank_window);
}

void save_checkpoint(const Model& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "params");
  nlohmann::json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["config"] = model.config.to_map();
  nlohmann::json params = nlohmann::json::array();
  std::size_t index = 0;
  for (const auto& p : model.store.all()) {
    const std::string file = "params/" + std::to_string(index++) + ".stmx";
    save_stmx(dir / file, p.value());
    params.push_back({{"name", p.name()}, {"shape", p.value().dims()}, {"file", file}});
  }
  manifest["parameters"] = params;
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << "\n";
  if (!out) throw LoadError("cannot write " + (dir / "manifest.json").string());
}

void load_parameters(Model& model, const std::filesystem::path& dir) {
  const nlohmann::json manifest = read_manifest(dir);
  const auto& params = manifest.at("parameters");
  if (params.size() != model.store.size()) {
    throw LoadError("checkpoint has " + std::to_string(params.size()) + " parameters, model expects " +
                    std::to_string(model.store.size()));
  }
  for (const auto& entry : params) {
    const std::string name = entry.at("name");
    if (!model.store.contains(name)) throw LoadError("checkpoint parameter '" + name + "' is not in the model");
    Parameter& p = model.store.get(name);
    const Shape shape = entry.at("shape").get<Shape>();
    if (shape != p.value().dims()) {
      throw LoadError("shape mismatch for '" + name + "': checkpoint " + shape_str(shape) + ", model " +
                      shape_str(p.value().dims()));
    }
    Tensor value;
    try {
      value = load_stmx(dir / entry.at("file").get<std::string>());
    } catch (const std::exception& e) {
      throw LoadError("parameter '" + name + "': " + e.what());
    }
    if (value.dims() != shape) throw LoadError("tensor file for '" + name + "' disagrees with the manifest");
    p.value() = value;
  }
}

std::unique_ptr<Model> load_checkpoint(const std::filesystem::path& dir) {
  const nlohmann::json manifest = read_manifest(dir);
  RunConfig config;
  try {
    for (const auto& [key, value] : manifest.at("config").items()) apply_setting(config, key, value.get<std::string>());
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint config: ") + e.what());
  }
  auto model = Model::create(config, config.seed);
  load_parameters(*model, dir);
  return model;
}

}  // namespace stmx
