#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "stmixer/gradcheck.hpp"
#include "stmixer/inference.hpp"
#include "stmixer/tensor_io.hpp"
#include "stmixer/training.hpp"

namespace fs = std::filesystem;
using namespace stmx;

namespace {

struct Common {
  std::string mode = "keyframe";
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::vector<std::string> settings;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--mode", c.mode, "keyframe or tubelet")->check(CLI::IsMember({"keyframe", "tubelet"}));
  app->add_option("--config", c.config, "key=value config file")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "scenario and initialisation seed");
  app->add_option("--out", c.out, "output directory");
  app->add_option("--set", c.settings, "extra key=value setting, applied last");
}

RunConfig resolve(const Common& c, std::optional<RunConfig> base = std::nullopt) {
  RunConfig cfg = base ? *base : RunConfig::desk(parse_mode(c.mode));
  if (!c.config.empty()) cfg = load_run_config(c.config, cfg);
  for (const auto& s : c.settings) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out.empty()) cfg.out = c.out;
  cfg.validate();
  return cfg;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw InputError("cannot write " + path.string());
}

void save_bank(const QueryBank& bank, const fs::path& dir) {
  fs::create_directories(dir);
  for (std::size_t c = 0; c < bank.clips.size(); ++c) save_stmx(dir / ("clip" + std::to_string(c) + ".stmx"), bank.clips[c]);
  write_json(dir / "bank.json", {{"rows", bank.rows}, {"row_dim", bank.row_dim}, {"clips", bank.clips.size()}});
}

QueryBank load_bank(const fs::path& dir) {
  const auto j = read_json(dir / "bank.json");
  QueryBank bank;
  bank.rows = j.at("rows").get<std::size_t>();
  bank.row_dim = j.at("row_dim").get<std::size_t>();
  const auto n = j.at("clips").get<std::size_t>();
  for (std::size_t c = 0; c < n; ++c) {
    Tensor t = load_stmx(dir / ("clip" + std::to_string(c) + ".stmx"));
    if (t.rank() != 2 || t.dim(0) != bank.rows || t.dim(1) != bank.row_dim)
      throw LoadError("bank clip " + std::to_string(c) + " has the wrong shape");
    bank.clips.push_back(std::move(t));
  }
  return bank;
}

bool needs_bank(const RunConfig& c) {
  return c.decoder.mode == DetectorMode::kKeyframe && c.decoder.classifier == ClassifierKind::kLongTerm;
}

void print_report(const EvalReport& r, DetectorMode mode) {
  std::printf("%-12s %10s\n", "metric", "value");
  std::printf("%-12s %10.4f\n", "frame_map", r.frame_map);
  if (mode == DetectorMode::kTubelet) {
    std::printf("%-12s %10.4f\n", "video_map", r.video_map);
    std::printf("%-12s %10zu\n", "tubes", r.tubes);
  }
  std::printf("%-12s %10zu\n", "detections", r.detections);
}

nlohmann::json tubes_json(const std::vector<ActionTube>& tubes) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& t : tubes) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : t.boxes) boxes.push_back({b.x1, b.y1, b.x2, b.y2});
    arr.push_back({{"start", t.start}, {"end", t.end()}, {"class", t.label}, {"score", t.score}, {"boxes", boxes},
                   {"members", t.members}});
  }
  return arr;
}

int cmd_gen(const Common& common) {
  const RunConfig cfg = resolve(common);
  const DetectorMode mode = cfg.decoder.mode;
  const Scenario s = gen_scenario(cfg, cfg.seed);
  const fs::path out = cfg.out;
  write_json(out / "ground_truth.json", scenario_ground_truth_json(s, mode));
  for (std::size_t c = 0; c < s.clips.size(); ++c) {
    const fs::path dir = out / "clips" / ("clip" + std::to_string(c));
    fs::create_directories(dir);
    for (const auto& stage : s.clips[c].stages)
      save_stmx(dir / ("stage" + std::to_string(stage.stage) + ".stmx"), stage.data);
  }
  write_run_manifest(out / "manifest.json", cfg,
                     {{"clips", static_cast<double>(s.clips.size())}, {"actors", static_cast<double>(s.actors.size())}});
  std::printf("scenario: %zu clips, %zu actors -> %s\n", s.clips.size(), s.actors.size(), out.c_str());
  return 0;
}

int cmd_train(const Common& common, const std::string& bank_dir, std::size_t log_every) {
  const RunConfig cfg = resolve(common);
  const Scenario s = gen_scenario(cfg, cfg.seed);
  auto model = Model::create(cfg, cfg.seed);
  std::optional<QueryBank> bank;
  if (needs_bank(cfg)) {
    if (bank_dir.empty()) throw ConfigError("long-term classifier needs --bank");
    bank = load_bank(bank_dir);
  }
  const auto t0 = std::chrono::steady_clock::now();
  const auto trace = train_toy(
      *model, s,
      [&](std::size_t it, const Model&) {
        if (log_every > 0 && it > 0 && it % log_every == 0) std::fprintf(stderr, "iteration %zu\n", it);
      },
      bank ? &*bank : nullptr);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const fs::path out = cfg.out;
  fs::create_directories(out);
  save_checkpoint(*model, out / "checkpoint");
  std::ofstream loss(out / "loss.csv");
  loss << "iteration,cls,l1,giou,action,total\n";
  for (const auto& r : trace)
    loss << r.iteration << ',' << r.cls << ',' << r.l1 << ',' << r.giou << ',' << r.action << ',' << r.total << '\n';

  const auto dets = infer(*model, s, cfg.bg_threshold, bank ? &*bank : nullptr);
  const EvalReport report = evaluate(dets, s, cfg.decoder.mode, cfg.eval_iou, cfg.link_tau);
  auto metrics = report.as_map();
  metrics["seconds"] = seconds;
  if (!trace.empty()) {
    metrics["loss_first"] = trace.front().total;
    metrics["loss_last"] = trace.back().total;
  }
  write_run_manifest(out / "manifest.json", cfg, metrics);
  std::printf("trained %zu iterations in %.1f s, loss %.4f -> %.4f\n", trace.size(), seconds,
              trace.empty() ? 0.0 : trace.front().total, trace.empty() ? 0.0 : trace.back().total);
  print_report(report, cfg.decoder.mode);
  return 0;
}

int cmd_infer(const Common& common, const std::string& checkpoint, std::optional<double> threshold,
              const std::string& bank_dir) {
  auto model = load_checkpoint(checkpoint);
  const RunConfig cfg = resolve(common, model->config);
  const Scenario s = gen_scenario(cfg, cfg.seed);
  std::optional<QueryBank> bank;
  if (needs_bank(model->config)) {
    if (bank_dir.empty()) throw ConfigError("long-term classifier needs --bank");
    bank = load_bank(bank_dir);
  }
  const auto dets = infer(*model, s, threshold.value_or(cfg.bg_threshold), bank ? &*bank : nullptr);
  const fs::path out = fs::path(cfg.out) / "detections.json";
  write_json(out, detections_to_json(dets, model->config.decoder.mode));
  std::size_t n = 0;
  for (const auto& d : dets) n += d.size();
  std::printf("%zu detections over %zu clips -> %s\n", n, dets.size(), out.c_str());
  return 0;
}

int cmd_link(const Common& common, const std::string& detections, double tau) {
  const auto j = read_json(detections);
  const auto per_clip = detections_from_json(j);
  std::vector<ActionTube> tubes;
  if (j.value("mode", std::string("tubelet")) == "keyframe") {
    std::vector<std::vector<FrameDetection>> frames;
    for (const auto& d : as_frame_detections(per_clip)) {
      if (frames.size() <= d.frame) frames.resize(d.frame + 1);
      frames[d.frame].push_back(d);
    }
    tubes = link_keyframe_boxes(frames, tau);
  } else {
    tubes = link_tubelets(as_tubelets(per_clip), tau);
  }
  const fs::path out = fs::path(common.out.empty() ? "run" : common.out) / "tubes.json";
  write_json(out, {{"tau", tau}, {"tubes", tubes_json(tubes)}});
  std::printf("%zu tubes -> %s\n", tubes.size(), out.c_str());
  return 0;
}

int cmd_eval(const Common& common, const std::string& detections, const std::string& checkpoint) {
  std::optional<RunConfig> base;
  if (!checkpoint.empty()) base = load_checkpoint(checkpoint)->config;
  const RunConfig cfg = resolve(common, base);
  const auto j = read_json(detections);
  const DetectorMode mode = parse_mode(j.value("mode", mode_name(cfg.decoder.mode)));
  const Scenario s = gen_scenario(cfg, cfg.seed);
  const EvalReport report = evaluate(detections_from_json(j), s, mode, cfg.eval_iou, cfg.link_tau);
  write_json(fs::path(cfg.out) / "eval.json", report.as_map());
  print_report(report, mode);
  return 0;
}

int cmd_gradcheck(const Common& common, double h, double tol, double scale) {
  const RunConfig cfg = resolve(common);
  const Scenario s = gen_scenario(cfg, cfg.seed);
  auto model = Model::create(cfg, cfg.seed);
  Rng rng(cfg.seed + 1);
  for (auto& p : model->store.all()) p.value() = rng.normal_tensor(p.value().dims(), scale);
  std::optional<QueryBank> bank;
  Tensor window;
  if (needs_bank(cfg)) {
    Rng brng(cfg.seed + 2);
    window = brng.normal_tensor({cfg.decoder.bank_window * cfg.decoder.bank_rows, 2 * cfg.decoder.dim}, 1.0);
  }
  const auto t0 = std::chrono::steady_clock::now();
  const GradCheckReport r = check_gradients(
      [&] { return clip_loss(*model, s, 0, needs_bank(cfg) ? &window : nullptr).total; }, model->store, h, tol);
  const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("checked %zu coordinates in %.1f s, max error %.3g, %zu above %.1g\n", r.checked, seconds, r.max_error,
              r.failures.size(), tol);
  for (std::size_t i = 0; i < std::min<std::size_t>(r.failures.size(), 10); ++i) {
    const auto& f = r.failures[i];
    std::printf("  %s[%zu] analytic %.8g numeric %.8g\n", f.name.c_str(), f.index, f.analytic, f.numeric);
  }
  return r.passed() ? 0 : 1;
}

int cmd_bank(const Common& common, const std::string& checkpoint) {
  auto model = load_checkpoint(checkpoint);
  const RunConfig cfg = resolve(common, model->config);
  const Scenario s = gen_scenario(cfg, cfg.seed);
  const QueryBank bank = build_bank(*model, s);
  const fs::path out = fs::path(cfg.out) / "bank";
  save_bank(bank, out);
  std::printf("bank of %zu clips x %zu rows -> %s\n", bank.clips.size(), bank.rows, out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Spatio-temporal query mixer: synthetic scenarios, toy training and evaluation"};
  app.require_subcommand(1);

  Common gen_c, train_c, infer_c, link_c, eval_c, grad_c, bank_c;
  auto* gen = app.add_subcommand("gen", "generate a synthetic scenario");
  add_common(gen, gen_c);

  auto* train = app.add_subcommand("train", "train on a synthetic scenario and write a checkpoint");
  add_common(train, train_c);
  std::string train_bank;
  std::size_t log_every = 0;
  train->add_option("--bank", train_bank, "query bank directory (long-term classifier)");
  train->add_option("--log-every", log_every, "progress interval in iterations");

  auto* inf = app.add_subcommand("infer", "run a checkpoint on the scenario of its config");
  add_common(inf, infer_c);
  std::string infer_ckpt, infer_bank;
  std::optional<double> threshold;
  inf->add_option("--checkpoint", infer_ckpt, "checkpoint directory")->required();
  inf->add_option("--threshold", threshold, "background threshold override");
  inf->add_option("--bank", infer_bank, "query bank directory");

  auto* link = app.add_subcommand("link", "link detections into action tubes");
  add_common(link, link_c);
  std::string link_dets;
  double tau = 0.5;
  link->add_option("--detections", link_dets, "detections JSON")->required()->check(CLI::ExistingFile);
  link->add_option("--tau", tau, "linking IoU threshold");

  auto* ev = app.add_subcommand("eval", "score detections against the regenerated scenario");
  add_common(ev, eval_c);
  std::string eval_dets, eval_ckpt;
  ev->add_option("--detections", eval_dets, "detections JSON")->required()->check(CLI::ExistingFile);
  ev->add_option("--checkpoint", eval_ckpt, "take the config from this checkpoint");

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of the training loss");
  add_common(gc, grad_c);
  double h = 1e-5, tol = 1e-4, scale = 0.1;
  gc->add_option("--step", h, "central difference step");
  gc->add_option("--tol", tol, "error tolerance");
  gc->add_option("--scale", scale, "std of the random parameter values");

  auto* bk = app.add_subcommand("bank", "build a query bank from a short-term checkpoint");
  add_common(bk, bank_c);
  std::string bank_ckpt;
  bk->add_option("--checkpoint", bank_ckpt, "checkpoint directory")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (gen->parsed()) return cmd_gen(gen_c);
    if (train->parsed()) return cmd_train(train_c, train_bank, log_every);
    if (inf->parsed()) return cmd_infer(infer_c, infer_ckpt, threshold, infer_bank);
    if (link->parsed()) return cmd_link(link_c, link_dets, tau);
    if (ev->parsed()) return cmd_eval(eval_c, eval_dets, eval_ckpt);
    if (gc->parsed()) return cmd_gradcheck(grad_c, h, tol, scale);
    if (bk->parsed()) return cmd_bank(bank_c, bank_ckpt);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const LoadError& e) {
    std::fprintf(stderr, "load error: %s\n", e.what());
    return 3;
  } catch (const InputError& e) {
    std::fprintf(stderr, "input error: %s\n", e.what());
    return 4;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return 5;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
