#include "stableflow/fixtures.hpp"

#include "stableflow/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace stableflow::fixtures {

std::string to_string(Shape shape) {
  switch (shape) {
    case Shape::kSine:
      return "sine";
    case Shape::kLine:
      return "line";
    case Shape::kCurve:
      return "curve";
  }
  return "?";
}

Shape shape_from_string(const std::string& name) {
  for (Shape s : all_shapes()) {
    if (to_string(s) == name) return s;
  }
  throw ValidationError("unknown task shape '" + name + "' (expected sine, line or curve)");
}

const std::vector<Shape>& all_shapes() {
  static const std::vector<Shape> shapes{Shape::kSine, Shape::kLine, Shape::kCurve};
  return shapes;
}

Trajectory linear_demo(const LinearDemoOptions& o) {
  Trajectory traj;
  traj.dt = o.dt;
  traj.label = "linear";
  for (std::size_t k = 0; k < o.samples; ++k) {
    const double t = static_cast<double>(k) * o.dt;
    traj.states.emplace_back(Vector(o.goal + (o.start - o.goal) * std::exp(-o.rate * t)));
  }
  return traj;
}

Vector shape_point(Shape shape, double s, const ShapedDemoOptions& o) {
  const Vector along = o.goal - o.start;
  Vector normal(2);
  normal << -along(1), along(0);
  normal /= along.norm();
  double offset = 0.0;
  switch (shape) {
    case Shape::kSine:
      offset = o.sine_amplitude * (1.0 - s) * std::sin(2.0 * std::numbers::pi * s);
      break;
    case Shape::kLine:
      break;
    case Shape::kCurve:
      offset = -o.curve_depth * s * (1.0 - s);
      break;
  }
  return o.start + s * along + offset * normal;
}

Trajectory shaped_demo(Shape shape, const ShapedDemoOptions& o) {
  if (o.start.size() != 2 || o.goal.size() != 2) throw ValidationError("shaped demos are planar");
  Trajectory traj;
  traj.dt = o.dt;
  traj.label = to_string(shape);
  const double horizon = o.dt * static_cast<double>(o.samples - 1);
  auto phase = [&o](double t) { return o.profile_linear * t + o.profile_cubic * t * t * t; };
  const double norm = 1.0 - std::exp(-phase(horizon));
  for (std::size_t k = 0; k < o.samples; ++k) {
    const double t = static_cast<double>(k) * o.dt;
    const double s = k + 1 == o.samples ? 1.0 : (1.0 - std::exp(-phase(t))) / norm;
    traj.states.emplace_back(shape_point(shape, s, o));
  }
  return traj;
}

Vector one_hot(Shape shape) {
  Vector v = Vector::Zero(3);
  v(static_cast<Eigen::Index>(shape)) = 1.0;
  return v;
}

namespace {

double segment_distance(double px, double py, double ax, double ay, double bx, double by) {
  const double dx = bx - ax;
  const double dy = by - ay;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((px - ax) * dx + (py - ay) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - (ax + t * dx), py - (ay + t * dy));
}

}  // namespace

ImagePtr sign_image(Shape shape, std::size_t height, std::size_t width) {
  // Glyph drawn in unit coordinates (u right, v down) as a polyline.
  std::vector<std::pair<double, double>> path;
  constexpr int kPoints = 96;
  for (int i = 0; i <= kPoints; ++i) {
    const double s = static_cast<double>(i) / kPoints;
    const double u = 0.15 + 0.7 * s;
    switch (shape) {
      case Shape::kLine:
        path.emplace_back(u, 0.5);
        break;
      case Shape::kSine:
        path.emplace_back(u, 0.5 - 0.25 * std::sin(2.0 * std::numbers::pi * s));
        break;
      case Shape::kCurve: {
        const double angle = std::numbers::pi * (1.0 + s);
        path.emplace_back(0.5 + 0.32 * std::cos(angle), 0.65 + 0.32 * std::sin(angle));
        break;
      }
    }
  }
  const double half_width = 1.0;  // pixels
  std::vector<double> px(height * width, 0.0);
  for (std::size_t r = 0; r < height; ++r) {
    for (std::size_t c = 0; c < width; ++c) {
      const double x = static_cast<double>(c) + 0.5;
      const double y = static_cast<double>(r) + 0.5;
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t i = 1; i < path.size(); ++i) {
        best = std::min(best, segment_distance(x, y, path[i - 1].first * static_cast<double>(width),
                                               path[i - 1].second * static_cast<double>(height),
                                               path[i].first * static_cast<double>(width),
                                               path[i].second * static_cast<double>(height)));
      }
      // Linear coverage falloff over one pixel past the stroke edge.
      px[r * width + c] = std::clamp(half_width + 0.5 - best, 0.0, 1.0);
    }
  }
  return std::make_shared<const Image>(height, width, std::move(px));
}

Trajectory with_observation(Trajectory traj, const Observation& obs) {
  for (auto& s : traj.states) s.non_controllable = obs;
  return traj;
}

std::vector<Trajectory> multitask_onehot(const ShapedDemoOptions& options) {
  std::vector<Trajectory> out;
  for (Shape s : all_shapes()) out.push_back(with_observation(shaped_demo(s, options), one_hot(s)));
  return out;
}

std::vector<Trajectory> multitask_images(const ShapedDemoOptions& options, std::size_t image_size) {
  std::vector<Trajectory> out;
  for (Shape s : all_shapes()) {
    out.push_back(with_observation(shaped_demo(s, options), sign_image(s, image_size, image_size)));
  }
  return out;
}

}  // namespace stableflow::fixtures
