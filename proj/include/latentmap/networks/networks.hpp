#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "latentmap/geometry/grid.hpp"
#include "latentmap/tensor/graph.hpp"
#include "latentmap/tensor/param_set.hpp"

namespace latentmap {

/// Shapes and widths of the three networks.
struct NetworkConfig {
  int grid_res = 16;         // R, scatter grid and decoder feature grid
  int latent_res = 4;        // L
  int latent_channels = 32;  // C
  int depth = 2;             // R = L * 2^depth
  int point_hidden = 16;     // per-point MLP width
  std::vector<int> encoder_channels{16, 32, 32};  // one entry per level 0..depth
  std::vector<int> decoder_channels{16, 32, 32};
  int decoder_hidden = 16;   // occupancy MLP width
  PoolMode pool = PoolMode::Mean;
  int fusion_hidden = 32;
  bool fusion_identity_skip = true;
  double fusion_init_std = 1e-3;

  static NetworkConfig from_grid(const GridSpec& spec);
  /// R=24, L=6, C=128, hidden 32.
  static NetworkConfig paper();

  void validate() const;
  Shape latent_shape() const { return {latent_channels, latent_res, latent_res, latent_res}; }
};

/// Point cloud in [0,1]^3 -> latent code [C, L, L, L].
///
/// Per-point MLP, pooling into an R^3 grid, then a strided convolution
/// stack without skip connections.
template <typename T>
class Encoder {
 public:
  Encoder() = default;
  Encoder(const NetworkConfig& cfg, std::uint64_t seed);

  /// points: [N, 3]. N may be zero.
  Var forward(Graph<T>& g, const Tensor<T>& points, bool requires_grad) const;
  Tensor<T> encode(const Tensor<T>& points) const;

  const NetworkConfig& config() const noexcept { return cfg_; }
  ParamSet<T>& params() noexcept { return params_; }
  const ParamSet<T>& params() const noexcept { return params_; }

 private:
  NetworkConfig cfg_;
  ParamSet<T> params_;
};

/// Latent code + query points -> occupancy logits.
///
/// The code is first expanded by transposed convolutions to an R^3 feature
/// grid, which is sampled trilinearly at each query; a small MLP maps the
/// sampled feature and the query coordinates to a logit.
template <typename T>
class Decoder {
 public:
  Decoder() = default;
  Decoder(const NetworkConfig& cfg, std::uint64_t seed);

  /// code: [C, L, L, L] -> feature grid [F, R, R, R].
  Var feature_grid(Graph<T>& g, Var code, bool requires_grad) const;
  /// queries: [M, 3] in the input-volume frame -> logits [M, 1].
  Var logits_from_grid(Graph<T>& g, Var grid, const Tensor<T>& queries, bool requires_grad) const;
  Var logits(Graph<T>& g, Var code, const Tensor<T>& queries, bool requires_grad) const;

  /// Expanded grid for repeated querying of one code.
  Tensor<T> expand(const Tensor<T>& code) const;
  Tensor<T> query_logits(const Tensor<T>& grid, const Tensor<T>& queries) const;
  /// Probabilities in [0, 1], one per query row.
  std::vector<T> decode(const Tensor<T>& code, const Tensor<T>& queries) const;

  const NetworkConfig& config() const noexcept { return cfg_; }
  ParamSet<T>& params() noexcept { return params_; }
  const ParamSet<T>& params() const noexcept { return params_; }

 private:
  NetworkConfig cfg_;
  ParamSet<T> params_;
};

/// Shape-preserving correction of an averaged code:
/// conv3d(k3) -> ReLU -> conv3d(k3), plus the input when the identity skip
/// is enabled.
template <typename T>
class FusionNet {
 public:
  FusionNet() = default;
  FusionNet(const NetworkConfig& cfg, std::uint64_t seed);

  Var forward(Graph<T>& g, Var mean_code, bool requires_grad) const;
  Tensor<T> fuse(const Tensor<T>& mean_code) const;

  const NetworkConfig& config() const noexcept { return cfg_; }
  ParamSet<T>& params() noexcept { return params_; }
  const ParamSet<T>& params() const noexcept { return params_; }

 private:
  NetworkConfig cfg_;
  ParamSet<T> params_;
};

/// All three networks with a shared config.
template <typename T>
struct Networks {
  NetworkConfig config;
  Encoder<T> encoder;
  Decoder<T> decoder;
  FusionNet<T> fusion;

  Networks() = default;
  Networks(const NetworkConfig& cfg, std::uint64_t seed);

  /// Writes every parameter into one checkpoint under its prefixed name.
  void save(const std::filesystem::path& path) const;
  /// Loads parameters whose names and shapes match `cfg`. Networks absent
  /// from the file keep their seeded initialization; `loaded` reports which
  /// prefixes were found.
  static Networks load(const std::filesystem::path& path, const NetworkConfig& cfg,
                       std::vector<std::string>* loaded = nullptr);

  template <typename U>
  Networks<U> cast() const;
};

/// Copies every entry of `src` whose name starts with `prefix` into `dst`,
/// replacing existing values after checking shapes. Returns the count.
template <typename T>
std::size_t copy_prefixed(const ParamSet<T>& src, ParamSet<T>& dst, const std::string& prefix);

/// Points of a local cloud as an [N, 3] tensor.
template <typename T>
Tensor<T> points_tensor(const PointCloud& cloud);

template <typename T>
template <typename U>
Networks<U> Networks<T>::cast() const {
  Networks<U> out(config, 0);
  out.encoder.params() = encoder.params().template cast<U>();
  out.decoder.params() = decoder.params().template cast<U>();
  out.fusion.params() = fusion.params().template cast<U>();
  return out;
}

}  // namespace latentmap
