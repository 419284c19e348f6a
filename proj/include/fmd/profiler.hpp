#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "fmd/model.hpp"

namespace fmd {

struct LayerProfile {
  std::string name;
  std::string kind;
  std::uint64_t params = 0;
  std::uint64_t macs = 0;
};

/// Per-layer parameter and multiply-accumulate counts. `height`/`width` are 0
/// for a params-only report.
struct ProfileReport {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<LayerProfile> layers;
  std::uint64_t total_params = 0;
  std::uint64_t total_macs = 0;
};

/// Weighted layers only; norms and activations carry no parameters.
template <typename T>
ProfileReport count_params(const LayerGraph<T>& graph);

/// Propagates the spatial size through the graph. Convolutions cost
/// weight_count * H_out * W_out; transposed layers are costed at their output
/// resolution. Bias adds, norms and activations are not counted.
template <typename T>
ProfileReport count_macs(const LayerGraph<T>& graph, std::size_t height, std::size_t width);

/// Stable JSON: resolution, then layers in graph order, totals last.
std::string report_json(const ProfileReport& report);
ProfileReport parse_report_json(std::string_view text);

}  // namespace fmd
