#include "latentmap/networks/networks.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

namespace latentmap {

NetworkConfig NetworkConfig::from_grid(const GridSpec& spec) {
  NetworkConfig c;
  c.grid_res = spec.encoder_grid_res;
  c.latent_res = spec.latent_res;
  c.latent_channels = spec.latent_channels;
  c.depth = spec.depth;
  c.fusion_hidden = spec.latent_channels;
  c.encoder_channels.assign(static_cast<std::size_t>(spec.depth + 1), 32);
  c.encoder_channels[0] = 16;
  c.decoder_channels = c.encoder_channels;
  return c;
}

NetworkConfig NetworkConfig::paper() {
  NetworkConfig c;
  c.grid_res = 24;
  c.latent_res = 6;
  c.latent_channels = 128;
  c.depth = 2;
  c.point_hidden = 32;
  c.encoder_channels = {32, 64, 128};
  c.decoder_channels = {32, 64, 128};
  c.decoder_hidden = 32;
  c.fusion_hidden = 128;
  return c;
}

void NetworkConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("network: " + m); };
  if (depth < 0 || depth > 6) fail("depth out of range");
  if (latent_res < 1 || latent_channels < 1) fail("latent shape must be positive");
  if (grid_res != latent_res * (1 << depth)) fail("grid_res must equal latent_res * 2^depth");
  if (encoder_channels.size() != static_cast<std::size_t>(depth + 1)) {
    fail("encoder_channels needs depth + 1 entries");
  }
  if (decoder_channels.size() != static_cast<std::size_t>(depth + 1)) {
    fail("decoder_channels needs depth + 1 entries");
  }
  for (int c : encoder_channels) {
    if (c < 1) fail("encoder_channels must be positive");
  }
  for (int c : decoder_channels) {
    if (c < 1) fail("decoder_channels must be positive");
  }
  if (point_hidden < 1 || decoder_hidden < 1 || fusion_hidden < 1) fail("widths must be positive");
  if (!(fusion_init_std >= 0)) fail("fusion_init_std must be non-negative");
}

namespace {

template <typename T>
void add_normal(ParamSet<T>& p, const std::string& name, Shape shape, double stddev,
                std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, stddev);
  Tensor<T> t(std::move(shape));
  if (stddev > 0) {
    for (auto& v : t.values()) v = static_cast<T>(n(rng));
  }
  p.add(name, std::move(t));
}

template <typename T>
void add_zeros(ParamSet<T>& p, const std::string& name, Shape shape) {
  p.add(name, Tensor<T>(std::move(shape)));
}

template <typename T>
void add_linear(ParamSet<T>& p, const std::string& name, int in, int out, bool relu_follows,
                std::mt19937_64& rng) {
  add_normal(p, name + ".weight", {out, in}, std::sqrt((relu_follows ? 2.0 : 1.0) / in), rng);
  add_zeros(p, name + ".bias", {out});
}

template <typename T>
void add_conv(ParamSet<T>& p, const std::string& name, int in, int out, int k, bool relu_follows,
              std::mt19937_64& rng) {
  const double fan_in = static_cast<double>(in) * k * k * k;
  add_normal(p, name + ".weight", {out, in, k, k, k}, std::sqrt((relu_follows ? 2.0 : 1.0) / fan_in), rng);
  add_zeros(p, name + ".bias", {out});
}

template <typename T>
void add_tconv(ParamSet<T>& p, const std::string& name, int in, int out, std::mt19937_64& rng) {
  // k = 2, stride 2: each output sees exactly one input site per channel.
  add_normal(p, name + ".weight", {in, out, 2, 2, 2}, std::sqrt(2.0 / in), rng);
  add_zeros(p, name + ".bias", {out});
}

/// Binds name.weight / name.bias of `p` into `g`.
template <typename T>
struct Bound {
  Var w, b;
};

template <typename T>
Bound<T> bind_layer(const ParamSet<T>& p, Graph<T>& g, const std::string& name, bool rg) {
  return {p.bind(g, name + ".weight", rg), p.bind(g, name + ".bias", rg)};
}

template <typename T>
Var conv(Graph<T>& g, const ParamSet<T>& p, const std::string& name, Var x, int stride, int pad,
         bool rg) {
  auto b = bind_layer(p, g, name, rg);
  return conv3d(g, x, b.w, b.b, stride, pad);
}

}  // namespace

template <typename T>
Encoder<T>::Encoder(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const auto& ch = cfg_.encoder_channels;
  add_linear(params_, "encoder.pn.fc0", 3, cfg_.point_hidden, true, rng);
  add_linear(params_, "encoder.pn.fc1", cfg_.point_hidden, cfg_.point_hidden, false, rng);
  add_conv(params_, "encoder.conv_in", cfg_.point_hidden, ch[0], 3, true, rng);
  for (int l = 0; l < cfg_.depth; ++l) {
    const std::string pre = "encoder.down" + std::to_string(l);
    add_conv(params_, pre + ".conv_s2", ch[l], ch[l + 1], 3, true, rng);
    add_conv(params_, pre + ".conv", ch[l + 1], ch[l + 1], 3, true, rng);
  }
  add_conv(params_, "encoder.out", ch[cfg_.depth], cfg_.latent_channels, 1, false, rng);
}

template <typename T>
Var Encoder<T>::forward(Graph<T>& g, const Tensor<T>& points, bool rg) const {
  if (points.rank() != 2 || points.dim(1) != 3) {
    throw ShapeError("encoder: points must be [N, 3], got " + to_string(points.shape()));
  }
  auto fc0 = bind_layer(params_, g, "encoder.pn.fc0", rg);
  auto fc1 = bind_layer(params_, g, "encoder.pn.fc1", rg);
  Var x = g.constant(points);
  Var f = linear(g, relu(g, linear(g, x, fc0.w, fc0.b)), fc1.w, fc1.b);
  Var grid = scatter_pool(g, points, f, cfg_.grid_res, cfg_.pool);
  Var h = relu(g, conv(g, params_, "encoder.conv_in", grid, 1, 1, rg));
  for (int l = 0; l < cfg_.depth; ++l) {
    const std::string pre = "encoder.down" + std::to_string(l);
    h = relu(g, conv(g, params_, pre + ".conv_s2", h, 2, 1, rg));
    h = relu(g, conv(g, params_, pre + ".conv", h, 1, 1, rg));
  }
  return conv(g, params_, "encoder.out", h, 1, 0, rg);
}

template <typename T>
Tensor<T> Encoder<T>::encode(const Tensor<T>& points) const {
  Graph<T> g;
  return g.value(forward(g, points, false));
}

template <typename T>
Decoder<T>::Decoder(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const auto& ch = cfg_.decoder_channels;
  add_conv(params_, "decoder.conv_in", cfg_.latent_channels, ch[cfg_.depth], 3, true, rng);
  for (int l = cfg_.depth - 1; l >= 0; --l) {
    const std::string pre = "decoder.up" + std::to_string(l);
    add_tconv(params_, pre + ".tconv", ch[l + 1], ch[l], rng);
    add_conv(params_, pre + ".conv", ch[l], ch[l], 3, l > 0, rng);
  }
  const int in = ch[0] + 3;
  add_linear(params_, "decoder.mlp.fc0", in, cfg_.decoder_hidden, true, rng);
  add_linear(params_, "decoder.mlp.fc1", cfg_.decoder_hidden, cfg_.decoder_hidden, true, rng);
  add_linear(params_, "decoder.mlp.fc2", cfg_.decoder_hidden, 1, false, rng);
}

template <typename T>
Var Decoder<T>::feature_grid(Graph<T>& g, Var code, bool rg) const {
  const Shape expect = cfg_.latent_shape();
  if (g.value(code).shape() != expect) {
    throw ShapeError("decoder: code shape " + to_string(g.value(code).shape()) + " != " +
                     to_string(expect));
  }
  Var h = relu(g, conv(g, params_, "decoder.conv_in", code, 1, 1, rg));
  for (int l = cfg_.depth - 1; l >= 0; --l) {
    const std::string pre = "decoder.up" + std::to_string(l);
    auto t = bind_layer(params_, g, pre + ".tconv", rg);
    h = relu(g, conv_transpose3d(g, h, t.w, t.b, 2, 0));
    h = conv(g, params_, pre + ".conv", h, 1, 1, rg);
    if (l > 0) h = relu(g, h);
  }
  return h;
}

template <typename T>
Var Decoder<T>::logits_from_grid(Graph<T>& g, Var grid, const Tensor<T>& queries, bool rg) const {
  if (queries.rank() != 2 || queries.dim(1) != 3) {
    throw ShapeError("decoder: queries must be [M, 3], got " + to_string(queries.shape()));
  }
  Var feat = trilinear_sample(g, grid, queries);
  Var x = concat_columns(g, feat, g.constant(queries));
  auto fc0 = bind_layer(params_, g, "decoder.mlp.fc0", rg);
  auto fc1 = bind_layer(params_, g, "decoder.mlp.fc1", rg);
  auto fc2 = bind_layer(params_, g, "decoder.mlp.fc2", rg);
  Var h = relu(g, linear(g, x, fc0.w, fc0.b));
  h = relu(g, linear(g, h, fc1.w, fc1.b));
  return linear(g, h, fc2.w, fc2.b);
}

template <typename T>
Var Decoder<T>::logits(Graph<T>& g, Var code, const Tensor<T>& queries, bool rg) const {
  return logits_from_grid(g, feature_grid(g, code, rg), queries, rg);
}

template <typename T>
Tensor<T> Decoder<T>::expand(const Tensor<T>& code) const {
  Graph<T> g;
  return g.value(feature_grid(g, g.constant(code), false));
}

template <typename T>
Tensor<T> Decoder<T>::query_logits(const Tensor<T>& grid, const Tensor<T>& queries) const {
  Graph<T> g;
  return g.value(logits_from_grid(g, g.constant(grid), queries, false));
}

template <typename T>
std::vector<T> Decoder<T>::decode(const Tensor<T>& code, const Tensor<T>& queries) const {
  const Tensor<T> z = query_logits(expand(code), queries);
  std::vector<T> p(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) {
    const T v = z[i];
    p[i] = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  }
  return p;
}

template <typename T>
FusionNet<T>::FusionNet(const NetworkConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const int c = cfg_.latent_channels, h = cfg_.fusion_hidden;
  add_conv(params_, "fusion.conv0", c, h, 3, true, rng);
  add_normal(params_, "fusion.conv1.weight", {c, h, 3, 3, 3}, cfg_.fusion_init_std, rng);
  add_zeros(params_, "fusion.conv1.bias", {c});
}

template <typename T>
Var FusionNet<T>::forward(Graph<T>& g, Var mean_code, bool rg) const {
  const Shape expect = cfg_.latent_shape();
  if (g.value(mean_code).shape() != expect) {
    throw ShapeError("fusion: code shape " + to_string(g.value(mean_code).shape()) + " != " +
                     to_string(expect));
  }
  Var h = relu(g, conv(g, params_, "fusion.conv0", mean_code, 1, 1, rg));
  Var out = conv(g, params_, "fusion.conv1", h, 1, 1, rg);
  return cfg_.fusion_identity_skip ? add(g, out, mean_code) : out;
}

template <typename T>
Tensor<T> FusionNet<T>::fuse(const Tensor<T>& mean_code) const {
  Graph<T> g;
  return g.value(forward(g, g.constant(mean_code), false));
}

template <typename T>
Networks<T>::Networks(const NetworkConfig& cfg, std::uint64_t seed)
    : config(cfg), encoder(cfg, seed), decoder(cfg, seed + 1), fusion(cfg, seed + 2) {}

template <typename T>
void Networks<T>::save(const std::filesystem::path& path) const {
  ParamSet<T> all;
  for (const ParamSet<T>* p : {&encoder.params(), &decoder.params(), &fusion.params()}) {
    for (const auto& [name, e] : p->entries()) {
      all.add(name, e.value);
      auto& dst = all.entries().at(name);
      dst.m = e.m;
      dst.v = e.v;
    }
  }
  save_checkpoint(path, all);
}

template <typename T>
Networks<T> Networks<T>::load(const std::filesystem::path& path, const NetworkConfig& cfg,
                              std::vector<std::string>* loaded) {
  Networks<T> n(cfg, 0);
  const ParamSet<T> file = load_checkpoint<T>(path);
  struct Part {
    const char* prefix;
    ParamSet<T>* params;
  };
  for (Part part : {Part{"encoder.", &n.encoder.params()}, Part{"decoder.", &n.decoder.params()},
                    Part{"fusion.", &n.fusion.params()}}) {
    const std::size_t got = copy_prefixed(file, *part.params, part.prefix);
    if (got == 0) continue;
    if (got != part.params->size()) {
      throw std::runtime_error(std::string("checkpoint holds an incomplete set of ") + part.prefix +
                               "* parameters");
    }
    if (loaded) loaded->push_back(std::string(part.prefix).substr(0, std::string(part.prefix).size() - 1));
  }
  return n;
}

template <typename T>
std::size_t copy_prefixed(const ParamSet<T>& src, ParamSet<T>& dst, const std::string& prefix) {
  std::size_t n = 0;
  for (const auto& [name, e] : src.entries()) {
    if (name.compare(0, prefix.size(), prefix) != 0) continue;
    if (!dst.contains(name)) throw std::runtime_error("unexpected parameter '" + name + "'");
    auto& d = dst.entries().at(name);
    if (d.value.shape() != e.value.shape()) {
      throw ShapeError("parameter '" + name + "' has shape " + to_string(e.value.shape()) +
                       ", config expects " + to_string(d.value.shape()));
    }
    d.value = e.value;
    d.m = e.m;
    d.v = e.v;
    ++n;
  }
  return n;
}

template <typename T>
Tensor<T> points_tensor(const PointCloud& cloud) {
  Tensor<T> t(Shape{static_cast<int>(cloud.size()), 3});
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    for (int a = 0; a < 3; ++a) t[3 * i + static_cast<std::size_t>(a)] = static_cast<T>(cloud.points[i][a]);
  }
  return t;
}

#define LATENTMAP_INSTANTIATE_NETWORKS(T)                                                   \
  template class Encoder<T>;                                                                \
  template class Decoder<T>;                                                                \
  template class FusionNet<T>;                                                              \
  template struct Networks<T>;                                                              \
  template std::size_t copy_prefixed<T>(const ParamSet<T>&, ParamSet<T>&, const std::string&); \
  template Tensor<T> points_tensor<T>(const PointCloud&);

LATENTMAP_INSTANTIATE_NETWORKS(float)
LATENTMAP_INSTANTIATE_NETWORKS(double)

}  // namespace latentmap
