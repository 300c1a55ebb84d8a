#pragma once

#include <cstddef>
#include <vector>

namespace bodyloop {

// Uniformly sampled time series; value i belongs to start_time + i * step.
struct Series {
  double start_time = 0.0;
  double step = 0.0;
  std::vector<double> values;

  double time_at(std::size_t i) const { return start_time + static_cast<double>(i) * step; }
  std::size_t size() const { return values.size(); }
};

}  // namespace bodyloop
