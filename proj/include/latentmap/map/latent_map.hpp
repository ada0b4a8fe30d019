#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <vector>

#include "latentmap/geometry/sensor.hpp"
#include "latentmap/networks/networks.hpp"

namespace latentmap {

struct IntegrationPolicy {
  double min_update_fraction = 0.01;
  double input_subsample_fraction = 0.10;
  std::uint64_t seed = 0;
  /// Allocate every voxel the sensor could see, not only those with points.
  bool allocate_frustum = true;

  void validate() const;
};

/// Running sum of codes and the number of scans that contributed.
struct VoxelCell {
  Tensor<float> z_sum;
  std::int64_t count = 0;
};

struct MapStats {
  std::int64_t scans_integrated = 0;
  std::int64_t voxels_updated = 0;  // summed over scans
};

struct NeuralMap {
  GridSpec spec;
  Shape latent_shape;
  std::map<VoxelIndex, VoxelCell> cells;
  MapStats stats;

  NeuralMap() = default;
  NeuralMap(const GridSpec& spec, Shape latent_shape);

  bool allocated(const VoxelIndex& v) const { return cells.count(v) != 0; }
  const VoxelCell* find(const VoxelIndex& v) const;
  std::size_t observed_count() const;
  VoxelCell& allocate(const VoxelIndex& v);
};

struct IntegrationReport {
  int frame_index = 0;
  std::size_t input_points = 0;
  std::size_t used_points = 0;
  std::size_t gate_points = 0;  // minimum local points for an update
  std::vector<VoxelIndex> updated;
  std::vector<VoxelIndex> skipped;  // held points but fell below the gate
  std::size_t newly_allocated = 0;
  double encode_seconds = 0;
  double total_seconds = 0;
};

/// Indices of the points kept by the subsampling step, ascending. The draw
/// depends only on (seed, frame_index, n, fraction).
std::vector<std::size_t> subsample_indices(std::size_t n, double fraction, std::uint64_t seed,
                                           int frame_index);

/// World-frame, subsampled cloud exactly as integrate() sees it.
PointCloud prepare_scan(const ScanFrame& frame, const IntegrationPolicy& policy);

/// Smallest local point count that passes the update gate.
std::size_t gate_threshold(double min_update_fraction, std::size_t scan_points);

/// Encodes every voxel of `frame` that passes the gate into the running sums.
IntegrationReport integrate(NeuralMap& map, const ScanFrame& frame, const Encoder<float>& encoder,
                            const IntegrationPolicy& policy);

/// z_sum / count, or nothing for unknown and never-updated voxels.
std::optional<Tensor<float>> mean_code(const NeuralMap& map, const VoxelIndex& v);

/// fuse(z_sum / count), or nothing for unknown and never-updated voxels.
std::optional<Tensor<float>> fused_code(const NeuralMap& map, const VoxelIndex& v,
                                        const FusionNet<float>& fusion);

/// Versioned binary: "LMMAP001" | u32 version | GridSpec | latent shape |
/// stats | u64 cell count | per cell: i32 i, j, k | i64 count | f32 z_sum[].
void save_snapshot(const std::filesystem::path& path, const NeuralMap& map);
/// Throws on version mismatch or truncation; never returns a partial map.
NeuralMap load_snapshot(const std::filesystem::path& path);

}  // namespace latentmap
