#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tempseg/error.hpp"

namespace tempseg {

// A multichannel recording with one activity label per sample.
struct SensorSequence {
  std::size_t dim = 0;            // channels per sample
  std::vector<double> features;   // row-major, length() x dim
  std::vector<int> labels;        // one per sample
  std::optional<int> subject_id;

  std::size_t length() const noexcept { return labels.size(); }

  std::span<const double> row(std::size_t t) const {
    return std::span<const double>(features).subspan(t * dim, dim);
  }

  void validate() const {
    if (dim == 0) throw ValidationError("sequence has zero feature channels");
    if (features.size() != labels.size() * dim) {
      throw ValidationError("sequence has " + std::to_string(features.size()) +
                            " feature values for " + std::to_string(labels.size()) +
                            " samples of dimension " + std::to_string(dim));
    }
    for (double v : features) {
      if (!std::isfinite(v)) throw ValidationError("sequence contains a non-finite feature value");
    }
  }
};

}  // namespace tempseg
