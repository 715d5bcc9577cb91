#pragma once

#include "stableflow/dataset.hpp"

#include <cstddef>
#include <string>
#include <vector>

namespace stableflow::fixtures {

/// Task shapes of the multi-task scenario.
enum class Shape { kSine, kLine, kCurve };

std::string to_string(Shape shape);
Shape shape_from_string(const std::string& name);
const std::vector<Shape>& all_shapes();

/// Straight approach x(t) = x* + (x0 - x*) exp(-rate t): an exact solution of
/// the linear field rate * (x* - x). `start - goal` has unit length.
struct LinearDemoOptions {
  Vector goal = Vector::Constant(2, 0.5);
  Vector start = (Vector(2) << -0.3, -0.1).finished();
  double rate = 4.0;
  std::size_t samples = 200;
  double dt = 0.01;
};

Trajectory linear_demo(const LinearDemoOptions& options = {});

/// Planar path from `start` to `goal` with a shape-dependent sideways offset,
/// traversed with progress s(t) = (1 - exp(-phi(t))) / (1 - exp(-phi(T))),
/// phi(t) = a t + c t^3, so the motion slows smoothly into the goal and ends
/// exactly there. Every shape keeps the distance to the goal decreasing.
struct ShapedDemoOptions {
  Vector start = (Vector(2) << -0.5, 0.5).finished();
  Vector goal = Vector::Constant(2, 0.5);
  double sine_amplitude = 0.6;
  double curve_depth = 0.8;
  double profile_linear = 0.2;     ///< a
  double profile_cubic = 0.6;      ///< c
  std::size_t samples = 200;
  double dt = 0.01;
};

/// Demo with an empty vector observation.
Trajectory shaped_demo(Shape shape, const ShapedDemoOptions& options = {});

/// Position on the shape's path at progress s in [0, 1].
Vector shape_point(Shape shape, double progress, const ShapedDemoOptions& options = {});

/// One-hot observation for a task (d_nc = 3, order sine/line/curve).
Vector one_hot(Shape shape);

/// Anti-aliased 32x32 (by default) glyph of a task's sign: a horizontal
/// stroke, one sine period, or a circular arc. Pixels in [0, 1].
ImagePtr sign_image(Shape shape, std::size_t height = 32, std::size_t width = 32);

/// Sine/line/curve demos sharing start and goal, keyed by one-hot x_nc.
std::vector<Trajectory> multitask_onehot(const ShapedDemoOptions& options = {});
/// Same demos keyed by their sign images.
std::vector<Trajectory> multitask_images(const ShapedDemoOptions& options = {}, std::size_t image_size = 32);

/// Copy of `traj` with every observation replaced by `obs`.
Trajectory with_observation(Trajectory traj, const Observation& obs);

}  // namespace stableflow::fixtures
