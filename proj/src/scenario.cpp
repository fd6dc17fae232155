#include "stmixer/scenario.hpp"

#include <algorithm>
#include <cmath>

#include "stmixer/rng.hpp"

namespace stmx {

namespace {

void check_inside(const Box& b, std::size_t width, std::size_t height) {
  if (b.x1 < 0 || b.y1 < 0 || b.x2 > static_cast<double>(width) || b.y2 > static_cast<double>(height) ||
      !(b.x2 > b.x1) || !(b.y2 > b.y1)) {
    throw ConfigError("actor leaves the frame: box (" + std::to_string(b.x1) + ", " + std::to_string(b.y1) + ", " +
                      std::to_string(b.x2) + ", " + std::to_string(b.y2) + ")");
  }
}

// Start coordinate range keeping [x, x + size] + v * f inside [0, extent] for
// every frame f < frames.
std::pair<double, double> feasible_start(double extent, double size, double v, std::size_t frames) {
  const double travel = v * static_cast<double>(frames - 1);
  return {std::max(0.0, -travel), extent - size - std::max(0.0, travel)};
}

Actor random_actor(const ScenarioConfig& sc, std::size_t frames, std::size_t classes, Rng& rng) {
  Actor a;
  a.label = static_cast<std::size_t>(rng.below(classes));
  const double w = rng.uniform(sc.actor_min_size, sc.actor_max_size);
  const double h = rng.uniform(sc.actor_min_size, sc.actor_max_size);
  const double angle = rng.uniform(0, 2 * M_PI);
  const double vx = sc.speed * std::cos(angle), vy = sc.speed * std::sin(angle);
  const auto [xlo, xhi] = feasible_start(static_cast<double>(sc.width), w, vx, frames);
  const auto [ylo, yhi] = feasible_start(static_cast<double>(sc.height), h, vy, frames);
  if (xlo > xhi || ylo > yhi) throw ConfigError("actor leaves the frame: speed and size exceed the frame extent");
  const double x0 = rng.uniform(xlo, xhi), y0 = rng.uniform(ylo, yhi);
  for (std::size_t f = 0; f < frames; ++f) {
    const double x = x0 + vx * static_cast<double>(f), y = y0 + vy * static_cast<double>(f);
    a.track.push_back({x, y, x + w, y + h});
  }
  return a;
}

void paint(Scenario& s, double noise, Rng& rng) {
  const std::size_t channels = paint_channels(s.classes), t_len = s.frames_per_clip;
  for (auto& clip : s.clips) {
    for (int z = 2; z <= 5; ++z) {
      const double stride = std::ldexp(1.0, z);
      const std::size_t gh = s.height >> z, gw = s.width >> z;
      Tensor map({channels, t_len, gh, gw});
      for (double& v : map.data()) v = rng.normal(0.0, noise);
      for (std::size_t t = 0; t < t_len; ++t) {
        const std::size_t frame = clip.start + t;
        for (const auto& actor : s.actors) {
          if (actor.dropout.count(frame)) continue;
          const Box& b = actor.track[frame];
          const double cx = 0.5 * (b.x1 + b.x2), cy = 0.5 * (b.y1 + b.y2);
          const double bw = b.width(), bh = b.height();
          for (std::size_t i = 0; i < gh; ++i) {
            for (std::size_t j = 0; j < gw; ++j) {
              const double x = (static_cast<double>(j) + 0.5) * stride, y = (static_cast<double>(i) + 0.5) * stride;
              if (x < b.x1 || x >= b.x2 || y < b.y1 || y >= b.y2) continue;
              const double code[kPaintExtraChannels] = {1.0, (cx - x) / bw, (cy - y) / bh,
                                                        std::log(bw / static_cast<double>(s.width)),
                                                        std::log(bh / static_cast<double>(s.height))};
              auto at = [&](std::size_t c) -> double& { return map[((c * t_len + t) * gh + i) * gw + j]; };
              for (std::size_t c = 0; c < s.classes; ++c) at(c) = (c == actor.label ? 1.0 : 0.0) + rng.normal(0.0, noise);
              for (std::size_t k = 0; k < kPaintExtraChannels; ++k) at(s.classes + k) = code[k] + rng.normal(0.0, noise);
            }
          }
        }
      }
      clip.stages.push_back({z, std::move(map)});
    }
  }
}

}  // namespace

std::size_t paint_channels(std::size_t classes) { return classes + kPaintExtraChannels; }

KeyframeTarget Scenario::keyframe_target(std::size_t clip) const {
  KeyframeTarget gt;
  const std::size_t f = keyframe(clip);
  gt.actions = Tensor({actors.size(), classes});
  for (std::size_t k = 0; k < actors.size(); ++k) {
    gt.boxes.push_back(actors[k].track[f]);
    gt.actions[k * classes + actors[k].label] = 1.0;
  }
  return gt;
}

TubeletTarget Scenario::tubelet_target(std::size_t clip) const {
  TubeletTarget gt;
  const std::size_t start = clips[clip].start;
  for (const auto& a : actors) {
    gt.boxes.emplace_back(a.track.begin() + static_cast<long>(start),
                          a.track.begin() + static_cast<long>(start + frames_per_clip));
    gt.labels.push_back(a.label);
  }
  return gt;
}

std::vector<FrameDetection> Scenario::keyframe_ground_truth() const {
  std::vector<FrameDetection> out;
  for (std::size_t c = 0; c < clips.size(); ++c)
    for (const auto& a : actors) out.push_back({0, keyframe(c), a.track[keyframe(c)], a.label, 1.0});
  return out;
}

std::vector<ActionTube> Scenario::tube_ground_truth() const {
  std::vector<ActionTube> out;
  for (const auto& a : actors) {
    ActionTube t;
    t.start = 0;
    t.boxes.assign(a.track.begin(), a.track.begin() + static_cast<long>(video_frames()));
    t.label = a.label;
    t.score = 1.0;
    out.push_back(t);
  }
  return out;
}

std::vector<std::vector<FrameDetection>> Scenario::ideal_frame_detections() const {
  std::vector<std::vector<FrameDetection>> frames(video_frames());
  for (std::size_t f = 0; f < frames.size(); ++f)
    for (const auto& a : actors)
      if (!a.dropout.count(f)) frames[f].push_back({0, f, a.track[f], a.label, 1.0});
  return frames;
}

std::vector<std::vector<Tubelet>> Scenario::ideal_tubelets() const {
  std::vector<std::vector<Tubelet>> out;
  for (const auto& clip : clips) {
    std::vector<Tubelet> tubelets;
    for (const auto& a : actors) {
      Tubelet t;
      t.start = clip.start;
      t.boxes.assign(a.track.begin() + static_cast<long>(clip.start),
                     a.track.begin() + static_cast<long>(clip.start + frames_per_clip));
      t.label = a.label;
      t.score = 1.0;
      tubelets.push_back(t);
    }
    out.push_back(tubelets);
  }
  return out;
}

Scenario gen_scenario(const RunConfig& config, std::uint64_t seed) {
  config.validate();
  const ScenarioConfig& sc = config.scenario;
  Scenario s;
  s.width = sc.width;
  s.height = sc.height;
  s.frames_per_clip = config.decoder.frames;
  s.classes = config.decoder.classes;
  s.seed = seed;
  for (std::size_t c = 0; c < sc.clips; ++c) s.clips.push_back({c, {}});
  const std::size_t frames = s.video_frames();
  const double fw = static_cast<double>(sc.width), fh = static_cast<double>(sc.height);
  Rng rng(seed);

  if (sc.preset == "random") {
    const std::size_t n = sc.actors_min + static_cast<std::size_t>(rng.below(sc.actors_max - sc.actors_min + 1));
    for (std::size_t k = 0; k < n; ++k) s.actors.push_back(random_actor(sc, frames, s.classes, rng));
  } else if (sc.preset == "fast-motion") {
    // Still, one jump of `jump` pixels halfway through, still again.
    Actor a;
    a.label = static_cast<std::size_t>(rng.below(s.classes));
    const double size = sc.actor_min_size;
    const double x0 = 0.5 * (fw - size - sc.jump), y0 = 0.5 * (fh - size);
    for (std::size_t f = 0; f < frames; ++f) {
      const double x = x0 + (f >= frames / 2 ? sc.jump : 0.0);
      a.track.push_back({x, y0, x + size, y0 + size});
    }
    s.actors.push_back(a);
  } else if (sc.preset == "dropout") {
    Actor a;
    a.label = static_cast<std::size_t>(rng.below(s.classes));
    const double size = sc.actor_min_size;
    const double x0 = 0.5 * (fw - size), y0 = 0.5 * (fh - size);
    for (std::size_t f = 0; f < frames; ++f) a.track.push_back({x0, y0, x0 + size, y0 + size});
    a.dropout.insert(frames / 2);
    s.actors.push_back(a);
  } else if (sc.preset != "empty") {
    throw ConfigError("unknown scenario preset '" + sc.preset + "' (random|fast-motion|dropout|empty)");
  }

  for (const auto& a : s.actors)
    for (const auto& b : a.track) check_inside(b, s.width, s.height);
  paint(s, sc.noise, rng);
  return s;
}

}  // namespace stmx
