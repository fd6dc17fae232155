#include "stmixer/inference.hpp"

#include <fstream>

namespace stmx {

namespace {

nlohmann::json box_json(const Box& b) { return {b.x1, b.y1, b.x2, b.y2}; }

Box box_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw InputError("box must be [x1, y1, x2, y2]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

}  // namespace

std::vector<Detection> detect(const DetectionOutput& out, DetectorMode mode, std::size_t clip_start,
                              std::size_t keyframe, double bg_threshold) {
  std::vector<Detection> dets;
  const Tensor& boxes = out.boxes.value();
  const std::size_t n = boxes.dim(0);
  if (mode == DetectorMode::kKeyframe) {
    const Tensor& human = out.human.value();
    const Tensor& action = out.action.value();
    const std::size_t c = action.dim(1);
    for (std::size_t i = 0; i < n; ++i) {
      const double p_human = human[2 * i];
      if (!(1.0 - p_human < bg_threshold)) continue;
      const Box b{boxes[4 * i], boxes[4 * i + 1], boxes[4 * i + 2], boxes[4 * i + 3]};
      for (std::size_t k = 0; k < c; ++k) dets.push_back({clip_start, keyframe, {b}, k, p_human * action[i * c + k], i});
    }
    return dets;
  }
  const Tensor& probs = out.classes.value();
  const std::size_t c1 = probs.dim(1), t = boxes.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(probs[i * c1 + c1 - 1] < bg_threshold)) continue;
    std::size_t best = 0;
    for (std::size_t k = 1; k + 1 < c1; ++k)
      if (probs[i * c1 + k] > probs[i * c1 + best]) best = k;
    Detection d{clip_start, clip_start, {}, best, probs[i * c1 + best], i};
    for (std::size_t f = 0; f < t; ++f) {
      const std::size_t o = (i * t + f) * 4;
      d.boxes.push_back({boxes[o], boxes[o + 1], boxes[o + 2], boxes[o + 3]});
    }
    dets.push_back(std::move(d));
  }
  return dets;
}

std::vector<std::vector<Detection>> infer(const Model& model, const Scenario& scenario, double bg_threshold,
                                          const QueryBank* bank) {
  const DecoderConfig& cfg = model.config.decoder;
  const bool long_term = cfg.mode == DetectorMode::kKeyframe && cfg.classifier == ClassifierKind::kLongTerm;
  if (long_term && bank == nullptr) throw ConfigError("long-term classifier needs a query bank");
  NoGradGuard no_grad;
  std::vector<std::vector<Detection>> out;
  for (std::size_t c = 0; c < scenario.clips.size(); ++c) {
    Tensor window;
    if (long_term) window = bank->window(c, cfg.bank_window);
    const DecoderOutput o = model.forward(scenario.clips[c], long_term ? &window : nullptr);
    out.push_back(detect(o.final(), cfg.mode, scenario.clips[c].start, scenario.keyframe(c), bg_threshold));
  }
  return out;
}

QueryBank build_bank(const Model& model, const Scenario& scenario) {
  std::vector<FeatureSpace4D> spaces;
  for (const auto& clip : scenario.clips) spaces.push_back(model.features(clip));
  return build_query_bank(model.decoder, spaces, model.config.decoder.bank_rows);
}

nlohmann::json detections_to_json(const std::vector<std::vector<Detection>>& per_clip, DetectorMode mode) {
  nlohmann::json clips = nlohmann::json::array();
  for (const auto& dets : per_clip) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& d : dets) {
      nlohmann::json boxes = nlohmann::json::array();
      for (const auto& b : d.boxes) boxes.push_back(box_json(b));
      arr.push_back({{"clip_start", d.clip_start},
                     {"frame", d.frame},
                     {"boxes", boxes},
                     {"class", d.label},
                     {"score", d.score},
                     {"query", d.query}});
    }
    clips.push_back(arr);
  }
  return {{"mode", mode_name(mode)}, {"clips", clips}};
}

std::vector<std::vector<Detection>> detections_from_json(const nlohmann::json& j) {
  std::vector<std::vector<Detection>> out;
  try {
    for (const auto& clip : j.at("clips")) {
      std::vector<Detection> dets;
      for (const auto& d : clip) {
        Detection det;
        det.clip_start = d.at("clip_start").get<std::size_t>();
        det.frame = d.value("frame", det.clip_start);
        for (const auto& b : d.at("boxes")) det.boxes.push_back(box_from_json(b));
        det.label = d.at("class").get<std::size_t>();
        det.score = d.at("score").get<double>();
        det.query = d.value("query", std::size_t{0});
        dets.push_back(std::move(det));
      }
      out.push_back(std::move(dets));
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("detections JSON: ") + e.what());
  }
  return out;
}

std::vector<FrameDetection> as_frame_detections(const std::vector<std::vector<Detection>>& per_clip) {
  std::vector<FrameDetection> out;
  for (const auto& dets : per_clip)
    for (const auto& d : dets) out.push_back({0, d.frame, d.boxes.at(0), d.label, d.score});
  return out;
}

std::vector<std::vector<Tubelet>> as_tubelets(const std::vector<std::vector<Detection>>& per_clip) {
  std::vector<std::vector<Tubelet>> out;
  for (const auto& dets : per_clip) {
    std::vector<Tubelet> clip;
    for (const auto& d : dets) clip.push_back({0, d.clip_start, d.boxes, d.label, d.score});
    out.push_back(std::move(clip));
  }
  return out;
}

std::map<std::string, double> EvalReport::as_map() const {
  return {{"frame_map", frame_map},
          {"video_map", video_map},
          {"detections", static_cast<double>(detections)},
          {"tubes", static_cast<double>(tubes)}};
}

EvalReport evaluate(const std::vector<std::vector<Detection>>& per_clip, const Scenario& scenario, DetectorMode mode,
                    double iou_threshold, double link_tau) {
  EvalReport r;
  for (const auto& dets : per_clip) r.detections += dets.size();
  if (mode == DetectorMode::kKeyframe) {
    r.frame_map = frame_map(as_frame_detections(per_clip), scenario.keyframe_ground_truth(), iou_threshold);
    return r;
  }
  const std::vector<ActionTube> tubes = link_tubelets(as_tubelets(per_clip), link_tau);
  r.tubes = tubes.size();
  r.video_map = video_map(tubes, scenario.tube_ground_truth(), iou_threshold);
  std::vector<FrameDetection> frames, truth;
  for (const auto& t : tubes)
    for (std::size_t f = t.start; f < t.end(); ++f) frames.push_back({0, f, t.boxes[f - t.start], t.label, t.score});
  for (const auto& t : scenario.tube_ground_truth())
    for (std::size_t f = t.start; f < t.end(); ++f) truth.push_back({0, f, t.boxes[f - t.start], t.label, 1.0});
  r.frame_map = frame_map(frames, truth, iou_threshold);
  return r;
}

nlohmann::json scenario_ground_truth_json(const Scenario& scenario, DetectorMode mode) {
  nlohmann::json clips = nlohmann::json::array();
  for (std::size_t c = 0; c < scenario.clips.size(); ++c) {
    nlohmann::json arr = nlohmann::json::array();
    const std::size_t start = scenario.clips[c].start;
    for (const auto& a : scenario.actors) {
      nlohmann::json boxes = nlohmann::json::array();
      if (mode == DetectorMode::kKeyframe) {
        boxes.push_back(box_json(a.track[scenario.keyframe(c)]));
      } else {
        for (std::size_t f = 0; f < scenario.frames_per_clip; ++f) boxes.push_back(box_json(a.track[start + f]));
      }
      arr.push_back({{"clip_start", start},
                     {"frame", mode == DetectorMode::kKeyframe ? scenario.keyframe(c) : start},
                     {"boxes", boxes},
                     {"class", a.label},
                     {"score", 1.0}});
    }
    clips.push_back(arr);
  }
  return {{"mode", mode_name(mode)},
          {"width", scenario.width},
          {"height", scenario.height},
          {"frames_per_clip", scenario.frames_per_clip},
          {"seed", scenario.seed},
          {"clips", clips}};
}

void write_run_manifest(const std::filesystem::path& path, const RunConfig& config,
                        const std::map<std::string, double>& metrics) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  nlohmann::json j{{"config", config.to_map()}, {"seed", config.seed}, {"metrics", metrics}};
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw InputError("cannot write " + path.string());
}

}  // namespace stmx
