#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>

#include "doctest.h"
#include "latentmap/networks/networks.hpp"
#include "support/oracles.hpp"

using namespace latentmap;
using latentmap::testing::naive_conv3d;
using latentmap::testing::naive_conv_transpose3d;
using latentmap::testing::naive_trilinear;
using latentmap::testing::random_tensor;

namespace {

NetworkConfig small_config() {
  NetworkConfig c;
  c.grid_res = 8;
  c.latent_res = 2;
  c.latent_channels = 4;
  c.depth = 2;
  c.point_hidden = 5;
  c.encoder_channels = {3, 4, 5};
  c.decoder_channels = {3, 4, 5};
  c.decoder_hidden = 6;
  c.fusion_hidden = 3;
  return c;
}

Tensor<double> naive_linear(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                            bool relu) {
  const int n = x.dim(0), in = x.dim(1), out = w.dim(0);
  Tensor<double> y(Shape{n, out});
  for (int r = 0; r < n; ++r)
    for (int o = 0; o < out; ++o) {
      double s = b[o];
      for (int i = 0; i < in; ++i) s += w.at(o, i) * x.at(r, i);
      y.at(r, o) = relu ? std::max(s, 0.0) : s;
    }
  return y;
}

Tensor<double> relu_all(Tensor<double> t) {
  for (auto& v : t.values()) v = std::max(v, 0.0);
  return t;
}

/// Encoder rebuilt from the reference kernels, step by step.
Tensor<double> naive_encode(const ParamSet<double>& p, const NetworkConfig& c, const Tensor<double>& pts) {
  Tensor<double> f = naive_linear(pts, p.value("encoder.pn.fc0.weight"), p.value("encoder.pn.fc0.bias"), true);
  f = naive_linear(f, p.value("encoder.pn.fc1.weight"), p.value("encoder.pn.fc1.bias"), false);
  const int r = c.grid_res, fch = f.dim(1);
  Tensor<double> grid(Shape{fch, r, r, r});
  Tensor<double> count(Shape{r, r, r});
  for (int n = 0; n < pts.dim(0); ++n) {
    int cell[3];
    for (int a = 0; a < 3; ++a) cell[a] = std::min(static_cast<int>(pts.at(n, a) * r), r - 1);
    count.at(cell[0], cell[1], cell[2]) += 1;
    for (int ch = 0; ch < fch; ++ch) grid.at(ch, cell[0], cell[1], cell[2]) += f.at(n, ch);
  }
  for (int ch = 0; ch < fch; ++ch)
    for (int i = 0; i < r * r * r; ++i) {
      const double k = count[static_cast<std::size_t>(i)];
      if (k > 0) grid[static_cast<std::size_t>(ch * r * r * r + i)] /= k;
    }
  auto cv = [&](const Tensor<double>& x, const std::string& name, int stride, int pad) {
    return naive_conv3d(x, p.value(name + ".weight"), p.value(name + ".bias"), stride, pad);
  };
  Tensor<double> h = relu_all(cv(grid, "encoder.conv_in", 1, 1));
  for (int l = 0; l < c.depth; ++l) {
    const std::string pre = "encoder.down" + std::to_string(l);
    h = relu_all(cv(h, pre + ".conv_s2", 2, 1));
    h = relu_all(cv(h, pre + ".conv", 1, 1));
  }
  return cv(h, "encoder.out", 1, 0);
}

std::vector<double> naive_logits(const ParamSet<double>& p, const NetworkConfig& c, const Tensor<double>& code,
                                 const Tensor<double>& q) {
  auto cv = [&](const Tensor<double>& x, const std::string& name) {
    return naive_conv3d(x, p.value(name + ".weight"), p.value(name + ".bias"), 1, 1);
  };
  Tensor<double> h = relu_all(cv(code, "decoder.conv_in"));
  for (int l = c.depth - 1; l >= 0; --l) {
    const std::string pre = "decoder.up" + std::to_string(l);
    h = relu_all(naive_conv_transpose3d(h, p.value(pre + ".tconv.weight"), p.value(pre + ".tconv.bias"), 2, 0));
    h = cv(h, pre + ".conv");
    if (l > 0) h = relu_all(h);
  }
  std::vector<double> out;
  for (int m = 0; m < q.dim(0); ++m) {
    std::vector<double> feat = naive_trilinear(h, q.at(m, 0), q.at(m, 1), q.at(m, 2));
    for (int a = 0; a < 3; ++a) feat.push_back(q.at(m, a));
    Tensor<double> x(Shape{1, static_cast<int>(feat.size())}, feat);
    x = naive_linear(x, p.value("decoder.mlp.fc0.weight"), p.value("decoder.mlp.fc0.bias"), true);
    x = naive_linear(x, p.value("decoder.mlp.fc1.weight"), p.value("decoder.mlp.fc1.bias"), true);
    x = naive_linear(x, p.value("decoder.mlp.fc2.weight"), p.value("decoder.mlp.fc2.bias"), false);
    out.push_back(x[0]);
  }
  return out;
}

/// Non-zero biases so the oracles exercise every term.
template <typename T>
void randomize_biases(ParamSet<T>& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  for (auto& [name, e] : p.entries()) {
    if (name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0) {
      for (auto& v : e.value.values()) v = static_cast<T>(u(rng));
    }
  }
}

}  // namespace

TEST_CASE("config validation") {
  CHECK_NOTHROW(NetworkConfig{}.validate());
  CHECK_NOTHROW(NetworkConfig::paper().validate());
  CHECK_NOTHROW(NetworkConfig::from_grid(GridSpec::desk()).validate());
  NetworkConfig c;
  c.grid_res = 12;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = NetworkConfig{};
  c.encoder_channels = {16, 32};
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("encoder") {
  const NetworkConfig cfg = small_config();
  std::mt19937_64 rng(1);
  Encoder<double> enc(cfg, 11);
  randomize_biases(enc.params(), rng);

  SUBCASE("output shape") {
    const Tensor<double> z = enc.encode(random_tensor({40, 3}, rng, 0, 1));
    CHECK(z.shape() == cfg.latent_shape());
  }
  SUBCASE("permutation gives a bit-identical code") {
    Encoder<float> encf(NetworkConfig{}, 3);
    for (int t = 0; t < 10; ++t) {
      const int n = 200 + 37 * t;
      Tensor<float> pts = random_tensor({n, 3}, rng, 0, 1).cast<float>();
      std::vector<int> perm(static_cast<std::size_t>(n));
      std::iota(perm.begin(), perm.end(), 0);
      std::shuffle(perm.begin(), perm.end(), rng);
      Tensor<float> shuffled(Shape{n, 3});
      for (int i = 0; i < n; ++i)
        for (int a = 0; a < 3; ++a) shuffled.at(i, a) = pts.at(perm[static_cast<std::size_t>(i)], a);
      const Tensor<float> a = encf.encode(pts), b = encf.encode(shuffled);
      CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
    }
  }
  SUBCASE("empty cloud gives a deterministic code") {
    const Tensor<double> a = enc.encode(Tensor<double>(Shape{0, 3}));
    const Tensor<double> b = enc.encode(Tensor<double>(Shape{0, 3}));
    CHECK(a.shape() == cfg.latent_shape());
    CHECK(std::equal(a.values().begin(), a.values().end(), b.values().begin()));
    for (double v : a.values()) CHECK(std::isfinite(v));
  }
  SUBCASE("matches the step-by-step reference pipeline") {
    for (int t = 0; t < 5; ++t) {
      Tensor<double> pts = random_tensor({60, 3}, rng, 0, 1);
      const Tensor<double> got = enc.encode(pts);
      const Tensor<double> ref = naive_encode(enc.params(), cfg, pts);
      REQUIRE(got.shape() == ref.shape());
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(got[i] - ref[i]) < 1e-9);
      // Moving one point inside its scatter cell changes the code exactly as
      // the reference predicts.
      pts.at(0, 0) = (std::floor(pts.at(0, 0) * cfg.grid_res) + 0.25) / cfg.grid_res;
      const Tensor<double> got2 = enc.encode(pts);
      const Tensor<double> ref2 = naive_encode(enc.params(), cfg, pts);
      for (std::size_t i = 0; i < ref2.size(); ++i) CHECK(std::abs(got2[i] - ref2[i]) < 1e-9);
    }
  }
  SUBCASE("unnormalized coordinates are rejected") {
    Tensor<double> pts(Shape{1, 3}, {0.5, 1.5, 0.5});
    CHECK_THROWS_AS(enc.encode(pts), std::domain_error);
  }
}

TEST_CASE("decoder") {
  const NetworkConfig cfg = small_config();
  std::mt19937_64 rng(2);
  Decoder<double> dec(cfg, 12);
  randomize_biases(dec.params(), rng);
  const Tensor<double> code = random_tensor(cfg.latent_shape(), rng);

  SUBCASE("probabilities lie in [0, 1] and repeat exactly") {
    Tensor<double> q = random_tensor({100, 3}, rng, 0, 1);
    for (int a = 0; a < 3; ++a) q.at(1, a) = q.at(0, a);
    const Tensor<double> big = random_tensor(cfg.latent_shape(), rng, -50, 50);
    for (const auto& c : {code, big}) {
      const auto p = dec.decode(c, q);
      REQUIRE(p.size() == 100);
      for (double v : p) CHECK((v >= 0.0 && v <= 1.0));
      CHECK(p[0] == p[1]);
    }
  }
  SUBCASE("matches an independent arithmetic re-implementation") {
    const Tensor<double> q = random_tensor({50, 3}, rng, 0, 1);
    const auto p = dec.decode(code, q);
    const auto ref = naive_logits(dec.params(), cfg, code, q);
    for (std::size_t m = 0; m < p.size(); ++m) {
      const double s = 1.0 / (1.0 + std::exp(-ref[m]));
      CHECK(std::abs(p[m] - s) < 1e-5);
    }
  }
  SUBCASE("Lipschitz in the query point") {
    const Tensor<double> grid = dec.expand(code);
    double kappa = 0;
    for (int t = 0; t < 500; ++t) {
      Tensor<double> q = random_tensor({2, 3}, rng, 0.01, 0.99);
      const Vec3 d = Vec3::Random().normalized() * 1e-4;
      for (int a = 0; a < 3; ++a) q.at(1, a) = q.at(0, a) + d[a];
      const Tensor<double> z = dec.query_logits(grid, q);
      const double p0 = 1 / (1 + std::exp(-z[0])), p1 = 1 / (1 + std::exp(-z[1]));
      kappa = std::max(kappa, std::abs(p1 - p0) / 1e-4);
    }
    MESSAGE("empirical Lipschitz constant " << kappa);
    CHECK(std::isfinite(kappa));
    // A fine sweep across the whole volume never jumps by more than the
    // measured slope allows.
    const int steps = 2000;
    Tensor<double> line(Shape{steps, 3});
    for (int s = 0; s < steps; ++s) {
      const double u = static_cast<double>(s) / (steps - 1);
      line.at(s, 0) = u;
      line.at(s, 1) = 0.3 + 0.4 * u;
      line.at(s, 2) = 1 - u;
    }
    const auto p = dec.decode(code, line);
    const double step = std::sqrt(1 + 0.16 + 1) / (steps - 1);
    for (int s = 1; s < steps; ++s) CHECK(std::abs(p[s] - p[s - 1]) <= 2 * kappa * step + 1e-9);
  }
  SUBCASE("wrong code shape") {
    CHECK_THROWS_AS(dec.expand(Tensor<double>(Shape{4, 3, 3, 3})), ShapeError);
  }
}

TEST_CASE("fusion network") {
  std::mt19937_64 rng(3);
  SUBCASE("zero input with zero biases gives zero") {
    FusionNet<float> f(NetworkConfig{}, 4);
    const Tensor<float> out = f.fuse(Tensor<float>(NetworkConfig{}.latent_shape()));
    for (float v : out.values()) CHECK(v == 0.0f);
  }
  SUBCASE("shape preserved at full size") {
    const NetworkConfig paper = NetworkConfig::paper();
    FusionNet<float> f(paper, 5);
    const Tensor<float> out = f.fuse(random_tensor(paper.latent_shape(), rng).cast<float>());
    CHECK(out.shape() == Shape{128, 6, 6, 6});
  }
  SUBCASE("initialization is close to identity") {
    FusionNet<double> f(NetworkConfig{}, 6);
    const Tensor<double> x = random_tensor(NetworkConfig{}.latent_shape(), rng);
    const Tensor<double> y = f.fuse(x);
    double worst = 0;
    for (std::size_t i = 0; i < x.size(); ++i) worst = std::max(worst, std::abs(y[i] - x[i]));
    CHECK(worst < 0.1);
  }
  SUBCASE("matches the loop reference, with and without the skip") {
    for (bool skip : {true, false}) {
      NetworkConfig cfg = small_config();
      cfg.fusion_identity_skip = skip;
      cfg.fusion_init_std = 0.3;
      FusionNet<double> f(cfg, 7);
      randomize_biases(f.params(), rng);
      const Tensor<double> x = random_tensor(cfg.latent_shape(), rng);
      const Tensor<double> y = f.fuse(x);
      const auto& p = f.params();
      Tensor<double> h = relu_all(naive_conv3d(x, p.value("fusion.conv0.weight"), p.value("fusion.conv0.bias"), 1, 1));
      Tensor<double> ref = naive_conv3d(h, p.value("fusion.conv1.weight"), p.value("fusion.conv1.bias"), 1, 1);
      if (skip) {
        for (std::size_t i = 0; i < ref.size(); ++i) ref[i] += x[i];
      }
      for (std::size_t i = 0; i < ref.size(); ++i) CHECK(std::abs(y[i] - ref[i]) < 1e-9);
    }
  }
  SUBCASE("shape mismatch") {
    FusionNet<double> f(small_config(), 8);
    CHECK_THROWS_AS(f.fuse(Tensor<double>(Shape{4, 3, 3, 3})), ShapeError);
  }
}

TEST_CASE("32-bit and 64-bit forwards agree") {
  std::mt19937_64 rng(4);
  const NetworkConfig cfg;
  Networks<double> nd(cfg, 21);
  const Networks<float> nf = nd.cast<float>();
  for (int t = 0; t < 3; ++t) {
    const Tensor<double> pts = random_tensor({300, 3}, rng, 0, 1);
    const Tensor<double> zd = nd.encoder.encode(pts);
    const Tensor<float> zf = nf.encoder.encode(pts.cast<float>());
    for (std::size_t i = 0; i < zd.size(); ++i) CHECK(std::abs(zd[i] - zf[i]) < 1e-3);
    const Tensor<double> fd = nd.fusion.fuse(zd);
    const Tensor<float> ff = nf.fusion.fuse(zd.cast<float>());
    for (std::size_t i = 0; i < fd.size(); ++i) CHECK(std::abs(fd[i] - ff[i]) < 1e-3);
    const Tensor<double> q = random_tensor({200, 3}, rng, 0, 1);
    const auto pd = nd.decoder.decode(zd, q);
    const auto pf = nf.decoder.decode(zd.cast<float>(), q.cast<float>());
    for (std::size_t i = 0; i < pd.size(); ++i) CHECK(std::abs(pd[i] - pf[i]) < 1e-3);
  }
}

TEST_CASE("network checkpoints") {
  const NetworkConfig cfg = small_config();
  Networks<float> n(cfg, 31);
  const auto path = std::filesystem::temp_directory_path() / "latentmap_nets.ckpt";
  n.save(path);
  std::vector<std::string> loaded;
  const Networks<float> back = Networks<float>::load(path, cfg, &loaded);
  CHECK(loaded == std::vector<std::string>{"encoder", "decoder", "fusion"});
  for (const auto& [name, e] : n.decoder.params().entries()) {
    const auto& b = back.decoder.params().value(name);
    CHECK(std::equal(b.values().begin(), b.values().end(), e.value.values().begin()));
  }
  NetworkConfig other = cfg;
  other.point_hidden = 7;
  CHECK_THROWS_AS(Networks<float>::load(path, other), ShapeError);
  std::filesystem::remove(path);
}
