#pragma once

#include <array>
#include <climits>
#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "latentmap/geometry/mesh.hpp"
#include "latentmap/map/latent_map.hpp"

namespace latentmap {

enum class BlendSpace { Probability, Logit };
std::string to_string(BlendSpace b);
BlendSpace blend_space_from_string(const std::string& s);

struct ExtractionConfig {
  double tau_occ = 0.05;
  double query_density = 20.0;  // lattice nodes per meter per axis
  bool interpolate_boundaries = true;
  BlendSpace blend = BlendSpace::Probability;
  /// Decode mean codes directly instead of passing them through the fusion
  /// network (stage-1-only ablation).
  bool use_fusion = true;

  void validate(const GridSpec& spec) const;
  double spacing() const { return 1.0 / query_density; }
};

/// Lattice nodes along one query-volume edge, e.g. 60 for d_q = 0.6 m at 100/m.
int queries_per_voxel_edge(const GridSpec& spec, double query_density);

enum class NodeState : std::uint8_t { Unknown = 0, Free = 1, Occupied = 2 };
std::string to_string(NodeState s);

struct QueryResult {
  NodeState state = NodeState::Unknown;
  float probability = 0.0f;  // 0 for unknown and for rule-free nodes
};

/// Blend weight of owner `v` at world point p: product over axes of a tent
/// that is 1 inside the core cube (side 2 d_V - d_q) and falls linearly to 0
/// at the query-volume face (side d_q). Zero outside the query volume.
double blend_weight(const Vec3& p, const VoxelIndex& v, const GridSpec& spec);

/// Allocated voxels with positive blend weight at p (or just the home voxel
/// when interpolation is off), in VoxelIndex order.
std::vector<VoxelIndex> owners(const NeuralMap& map, const Vec3& p, bool interpolate);

/// Decodes a map. Expanded decoder feature grids are cached per voxel; the
/// cache is filled lazily and never invalidated, so build a new one after
/// further integration.
class MapDecoder {
 public:
  MapDecoder(const NeuralMap& map, const Decoder<float>& decoder, const FusionNet<float>& fusion,
             const ExtractionConfig& cfg);

  QueryResult query(const Vec3& p) const;
  /// Batched version of query(); same results, grouped per voxel.
  std::vector<QueryResult> query(const std::vector<Vec3>& points) const;

  /// Probability decoded under a single allocated, observed voxel.
  float decode_in_voxel(const VoxelIndex& v, const Vec3& p) const;

  const ExtractionConfig& config() const noexcept { return cfg_; }
  const NeuralMap& map() const noexcept { return map_; }
  void clear_cache() const { cache_.clear(); }
  /// Drops cached grids of voxels with index i below `i`.
  void evict_below(int i) const { cache_.erase(cache_.begin(), cache_.lower_bound(VoxelIndex{i, INT_MIN, INT_MIN})); }

 private:
  const Tensor<float>& grid_for(const VoxelIndex& v) const;
  std::vector<float> decode_batch(const VoxelIndex& v, const std::vector<Vec3>& pts) const;

  const NeuralMap& map_;
  const Decoder<float>& decoder_;
  const FusionNet<float>& fusion_;
  ExtractionConfig cfg_;
  mutable std::map<VoxelIndex, Tensor<float>> cache_;
};

struct OccupancyGrid {
  Vec3 origin = Vec3::Zero();
  double spacing = 0.05;
  std::array<int, 3> dims{0, 0, 0};
  std::vector<NodeState> states;
  std::vector<float> probabilities;

  std::size_t size() const { return states.size(); }
  bool empty() const { return states.empty(); }
  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(i) * dims[1] + j) * dims[2] + k;
  }
  Vec3 position(int i, int j, int k) const { return origin + spacing * Vec3(i, j, k); }
  std::size_t count(NodeState s) const;
};

/// Lattice from lo with the configured spacing covering [lo, hi]. A box of
/// zero volume gives an empty grid.
OccupancyGrid extract_grid(const MapDecoder& dec, const Vec3& lo, const Vec3& hi);

/// Bounding box of every allocated voxel's core.
void map_bounds(const NeuralMap& map, Vec3& lo, Vec3& hi);

/// Surface at `iso` (normally tau_occ). Unknown nodes count as
/// below iso and any cell touching one is skipped. Vertices are shared
/// between cells; triangles face away from the occupied side.
TriangleMesh marching_cubes(const OccupancyGrid& grid, double iso);

/// Reconstruct a mesh straight from a map.
TriangleMesh extract_mesh(const MapDecoder& dec);

/// "LMGRID01" | u32 version | origin | spacing | dims | 2-bit states packed
/// four per byte | u16 probabilities (p * 65535, rounded).
void write_grid(const std::filesystem::path& path, const OccupancyGrid& grid);
OccupancyGrid read_grid(const std::filesystem::path& path);

}  // namespace latentmap
