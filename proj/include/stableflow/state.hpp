#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <memory>
#include <variant>
#include <vector>

namespace stableflow {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Grayscale image, row-major, pixels in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::vector<double> px);

  double at(std::size_t row, std::size_t col) const { return pixels[row * width + col]; }
  bool operator==(const Image&) const = default;
};

using ImagePtr = std::shared_ptr<const Image>;

enum class ObservationKind { kVector, kImage };

/// Non-controllable part of the state. Images are shared because a whole
/// demonstration usually sees the same frame at every sample.
using Observation = std::variant<Vector, ImagePtr>;

ObservationKind kind_of(const Observation& obs);
bool same_payload(const Observation& a, const Observation& b);

/// Full state x = [x_c; x_nc].
struct StateVector {
  Vector controllable;
  Observation non_controllable = Vector{};

  StateVector() = default;
  StateVector(Vector xc, Observation xnc = Vector{});

  std::size_t dim_controllable() const { return static_cast<std::size_t>(controllable.size()); }
  ObservationKind obs_kind() const { return kind_of(non_controllable); }
};

/// Throws ValidationError unless every entry is finite, d_c >= 1 and image
/// pixels lie in [0, 1].
void validate_state(const StateVector& state);

}  // namespace stableflow
