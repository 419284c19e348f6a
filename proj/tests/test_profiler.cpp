#include <doctest.h>

#include <cmath>

#include "fmd/profiler.hpp"
#include "oracles.hpp"

using namespace fmd;

TEST_CASE("parameter counts") {
  SUBCASE("single 7x7 conv with bias") {
    LayerGraph<float> g;
    g.layers.push_back(make_conv<float>("c", LayerKind::Conv, ConvSpec{3, 64, 7, 1, PaddingMode::Reflect, 3, true}));
    g.layers.push_back(make_simple<float>("n", LayerKind::InstanceNorm, 1e-5));
    const auto r = count_params(g);
    CHECK(r.total_params == 9472u);
    CHECK(r.layers[1].params == 0u);
  }
  SUBCASE("generators") {
    CHECK(count_params(build_generator<float>(GeneratorConfig{64})).total_params == 1987075u);
    CHECK(count_params(build_generator<float>(GeneratorConfig{96})).total_params == 4418307u);
  }
  SUBCASE("matches the optimizer-visible scalar count") {
    for (auto d : {Decomposition::ResOnly, Decomposition::DownAndRes, Decomposition::UpAndRes}) {
      const auto g = build_generator<float>(GeneratorConfig{16, 3, d, 0.0});
      std::uint64_t scalars = 0;
      for (const auto& [name, t] : g.named_parameters()) scalars += t.numel();
      CHECK(count_params(g).total_params == scalars);
    }
    const auto disc = build_discriminator<float>(8);
    std::uint64_t scalars = 0;
    for (const auto& [name, t] : disc.named_parameters()) scalars += t.numel();
    CHECK(count_params(disc).total_params == scalars);
  }
}

TEST_CASE("MAC counts") {
  struct Case {
    std::size_t ngf;
    double published;
  };
  for (const Case c : {Case{64, 18.36e9}, Case{48, 10.60e9}, Case{96, 40.23e9}}) {
    CAPTURE(c.ngf);
    const auto r = count_macs(build_generator<float>(GeneratorConfig{c.ngf}), 256, 256);
    CHECK(r.total_macs == oracle::generator_counts(c.ngf, 9, false, false, 256, 256).macs);
    CHECK(std::abs(static_cast<double>(r.total_macs) / c.published - 1.0) < 0.005);
  }
  CHECK(count_macs(build_generator<float>(GeneratorConfig{64}), 256, 256).total_macs == 18314428416ull);
  for (auto d : {Decomposition::DownAndRes, Decomposition::UpAndRes}) {
    const auto r = count_macs(build_generator<float>(GeneratorConfig{64, 9, d, 0.0}), 256, 256);
    CHECK(r.total_macs ==
          oracle::generator_counts(64, 9, d == Decomposition::DownAndRes, d == Decomposition::UpAndRes, 256, 256).macs);
  }
}

TEST_CASE("MACs scale with pixel count and totals are layer sums") {
  const auto g = build_generator<float>(GeneratorConfig{32, 4, Decomposition::UpAndRes, 0.0});
  const auto small = count_macs(g, 64, 96), big = count_macs(g, 128, 192);
  CHECK(big.total_macs == 4 * small.total_macs);
  CHECK(big.total_params == small.total_params);
  std::uint64_t p = 0, m = 0;
  for (const auto& l : big.layers) {
    p += l.params;
    m += l.macs;
  }
  CHECK(p == big.total_params);
  CHECK(m == big.total_macs);
  CHECK_THROWS(count_macs(g, 66, 64));
}

TEST_CASE("JSON report") {
  const auto empty = count_macs(LayerGraph<float>{}, 8, 8);
  CHECK(empty.total_params == 0u);
  CHECK(empty.total_macs == 0u);
  CHECK(report_json(empty).find("\"total_macs\": 0") != std::string::npos);

  const auto r = count_macs(build_generator<float>(GeneratorConfig{64, 9, Decomposition::DownAndRes, 0.0}), 256, 256);
  const std::string a = report_json(r), b = report_json(r);
  CHECK(a == b);
  CHECK(a.find("\"resolution\"") < a.find("\"layers\""));
  CHECK(a.find("\"layers\"") < a.find("\"total_params\""));
  CHECK(a.find("\"total_params\"") < a.find("\"total_macs\""));
  const auto back = parse_report_json(a);
  CHECK(back.height == 256);
  CHECK(back.width == 256);
  CHECK(back.total_params == r.total_params);
  CHECK(back.total_macs == r.total_macs);
  REQUIRE(back.layers.size() == r.layers.size());
  for (std::size_t i = 0; i < r.layers.size(); ++i) {
    CHECK(back.layers[i].name == r.layers[i].name);
    CHECK(back.layers[i].kind == r.layers[i].kind);
    CHECK(back.layers[i].params == r.layers[i].params);
    CHECK(back.layers[i].macs == r.layers[i].macs);
  }
}
