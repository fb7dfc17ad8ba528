#pragma once

#include <cmath>
#include <span>
#include <string>

#include "epee/errors.hpp"

namespace epee {

/// Shannon entropy of `p` divided by log|K|, so 1 is uniform and 0 is one-hot.
/// Zero-probability classes contribute nothing.
inline double normalized_entropy(std::span<const double> p) {
  if (p.size() < 2) {
    throw InputError("normalized_entropy: need at least 2 classes, got " + std::to_string(p.size()));
  }
  double total = 0.0;
  double h = 0.0;
  for (double pk : p) {
    if (!(pk >= 0.0)) throw InputError("normalized_entropy: negative or NaN probability");
    total += pk;
    if (pk > 0.0) h -= pk * std::log(pk);
  }
  if (std::abs(total - 1.0) > 1e-6) {
    throw InputError("normalized_entropy: distribution sums to " + std::to_string(total));
  }
  const double normalized = h / std::log(static_cast<double>(p.size()));
  // Rounding can leave uniform rows a hair above 1.
  return normalized < 0.0 ? 0.0 : (normalized > 1.0 ? 1.0 : normalized);
}

}  // namespace epee
