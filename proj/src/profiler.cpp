#include "fmd/profiler.hpp"

#include <json.hpp>
#include <stdexcept>

namespace fmd {

namespace {

template <typename T>
std::uint64_t weight_count(const Layer<T>& l) {
  const std::uint64_t k2 = l.conv.kernel_size * l.conv.kernel_size;
  switch (l.kind) {
    case LayerKind::Conv:
    case LayerKind::ConvTranspose:
      return l.conv.in_channels * l.conv.out_channels * k2;
    case LayerKind::DepthwiseConv:
    case LayerKind::DepthwiseConvTranspose:
      return l.conv.in_channels * k2;
    case LayerKind::InstanceNorm:
    case LayerKind::ReLU:
    case LayerKind::LeakyReLU:
    case LayerKind::Tanh:
    case LayerKind::Dropout:
    case LayerKind::MaxPool:
    case LayerKind::ResidualBegin:
    case LayerKind::ResidualEnd:
      return 0;
  }
  throw std::invalid_argument("profiler: unknown kind for layer '" + l.name + "'");
}

template <typename T>
std::uint64_t bias_count(const Layer<T>& l) {
  return has_weights(l.kind) && l.conv.bias ? l.conv.out_channels : 0;
}

template <typename T>
ProfileReport profile(const LayerGraph<T>& graph, std::size_t height, std::size_t width, bool with_macs) {
  ProfileReport r;
  r.height = height;
  r.width = width;
  std::size_t h = height, w = width;
  for (const auto& l : graph.layers) {
    LayerProfile p{l.name, kind_name(l.kind), weight_count(l) + bias_count(l), 0};
    if (with_macs) {
      switch (l.kind) {
        case LayerKind::Conv:
        case LayerKind::DepthwiseConv:
          h = l.conv.output_size(h);
          w = l.conv.output_size(w);
          break;
        case LayerKind::ConvTranspose:
        case LayerKind::DepthwiseConvTranspose:
          h *= l.conv.stride;
          w *= l.conv.stride;
          break;
        case LayerKind::MaxPool: {
          const auto k = static_cast<std::size_t>(l.param);
          h = (h - k) / k + 1;
          w = (w - k) / k + 1;
          break;
        }
        default:
          break;
      }
      p.macs = weight_count(l) * h * w;
    }
    r.total_params += p.params;
    r.total_macs += p.macs;
    r.layers.push_back(std::move(p));
  }
  return r;
}

}  // namespace

template <typename T>
ProfileReport count_params(const LayerGraph<T>& graph) {
  return profile(graph, 0, 0, false);
}

template <typename T>
ProfileReport count_macs(const LayerGraph<T>& graph, std::size_t height, std::size_t width) {
  if (graph.role == "generator" && (height % 4 != 0 || width % 4 != 0)) {
    throw std::invalid_argument("profiler: generator resolution must be divisible by 4");
  }
  return profile(graph, height, width, true);
}

std::string report_json(const ProfileReport& report) {
  nlohmann::ordered_json j;
  j["resolution"] = {{"height", report.height}, {"width", report.width}};
  j["layers"] = nlohmann::ordered_json::array();
  for (const auto& l : report.layers) {
    j["layers"].push_back({{"name", l.name}, {"kind", l.kind}, {"params", l.params}, {"macs", l.macs}});
  }
  j["total_params"] = report.total_params;
  j["total_macs"] = report.total_macs;
  return j.dump(2) + "\n";
}

ProfileReport parse_report_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  ProfileReport r;
  r.height = j.at("resolution").at("height").get<std::size_t>();
  r.width = j.at("resolution").at("width").get<std::size_t>();
  for (const auto& l : j.at("layers")) {
    r.layers.push_back({l.at("name").get<std::string>(), l.at("kind").get<std::string>(),
                        l.at("params").get<std::uint64_t>(), l.at("macs").get<std::uint64_t>()});
  }
  r.total_params = j.at("total_params").get<std::uint64_t>();
  r.total_macs = j.at("total_macs").get<std::uint64_t>();
  return r;
}

template ProfileReport count_params(const LayerGraph<float>&);
template ProfileReport count_params(const LayerGraph<double>&);
template ProfileReport count_macs(const LayerGraph<float>&, std::size_t, std::size_t);
template ProfileReport count_macs(const LayerGraph<double>&, std::size_t, std::size_t);

}  // namespace fmd
