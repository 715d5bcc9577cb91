#include "stableflow/state.hpp"

#include "stableflow/error.hpp"

#include <cmath>
#include <string>

namespace stableflow {

Image::Image(std::size_t h, std::size_t w, std::vector<double> px)
    : height(h), width(w), pixels(std::move(px)) {
  if (h == 0 || w == 0) throw ValidationError("image must have H, W >= 1");
  if (pixels.size() != h * w) {
    throw ValidationError("image has " + std::to_string(pixels.size()) + " pixels, expected " +
                          std::to_string(h * w));
  }
}

ObservationKind kind_of(const Observation& obs) {
  return std::holds_alternative<ImagePtr>(obs) ? ObservationKind::kImage : ObservationKind::kVector;
}

bool same_payload(const Observation& a, const Observation& b) {
  if (kind_of(a) != kind_of(b)) return false;
  if (const auto* va = std::get_if<Vector>(&a)) {
    const auto& vb = std::get<Vector>(b);
    return va->size() == vb.size() && *va == vb;
  }
  const auto& ia = std::get<ImagePtr>(a);
  const auto& ib = std::get<ImagePtr>(b);
  if (ia == ib) return true;
  return ia && ib && *ia == *ib;
}

StateVector::StateVector(Vector xc, Observation xnc)
    : controllable(std::move(xc)), non_controllable(std::move(xnc)) {}

void validate_state(const StateVector& state) {
  if (state.controllable.size() < 1) throw ValidationError("d_c must be >= 1");
  if (!state.controllable.allFinite()) throw ValidationError("controllable state is not finite");
  if (const auto* v = std::get_if<Vector>(&state.non_controllable)) {
    if (!v->allFinite()) throw ValidationError("non-controllable state is not finite");
    return;
  }
  const auto& img = std::get<ImagePtr>(state.non_controllable);
  if (!img) throw ValidationError("image payload is null");
  if (img->height == 0 || img->width == 0) throw ValidationError("image must have H, W >= 1");
  for (double p : img->pixels) {
    if (!std::isfinite(p) || p < 0.0 || p > 1.0) throw ValidationError("image pixel outside [0, 1]");
  }
}

}  // namespace stableflow
