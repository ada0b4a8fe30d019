#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "latentmap/extract/extract.hpp"
#include "latentmap/sim/scene.hpp"

namespace latentmap {

// ---- metrics --------------------------------------------------------------

struct MetricConfig {
  int n_samples = 10000;
  double tau_r = 0.05;
  bool exclude_floor = true;
  double floor_z = 0.0;         // ground-truth samples below floor_z + floor_margin are cropped
  double floor_margin = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Empty prediction: accuracy is NaN (undefined), completeness +inf,
/// recall 0.
struct MetricsReport {
  double accuracy = 0;       // pred -> gt mean distance, m
  double completeness = 0;   // gt -> pred mean distance, m
  double recall = 0;         // fraction of gt samples within tau_r of pred
  double recall_no_floor = 0;
  bool prediction_empty = false;
  std::size_t pred_samples = 0, gt_samples = 0, gt_samples_no_floor = 0;
  double seconds = 0;
};

/// Area-weighted uniform samples, deterministic in seed.
PointCloud sample_surface(const TriangleMesh& mesh, int n, std::uint64_t seed);

/// Exact Euclidean distance from p to the closed triangle abc. Degenerate
/// triangles reduce to their longest edge or a point.
double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c);

/// Bounding-volume hierarchy over the triangles of a mesh. distance() returns
/// exactly the minimum of point_triangle_distance over all triangles.
class MeshDistance {
 public:
  explicit MeshDistance(const TriangleMesh& mesh);
  double distance(const Vec3& p) const;
  std::vector<double> distances(const std::vector<Vec3>& points) const;

 private:
  struct Node {
    Vec3 lo, hi;
    int left = -1, right = -1;  // children, or -1 for a leaf
    int first = 0, count = 0;   // leaf range in order_
  };
  int build(int first, int count, int depth);
  const TriangleMesh& mesh_;
  std::vector<int> order_;
  std::vector<Node> nodes_;
};

std::vector<double> point_to_mesh_distance(const PointCloud& points, const TriangleMesh& mesh);

/// Distances below this are reported as exactly zero.
inline constexpr double kOnSurface = 1e-12;

/// Metrics from already computed sample distances.
MetricsReport metrics_from_distances(const std::vector<double>& pred_to_gt, const std::vector<double>& gt_to_pred,
                                     const std::vector<char>& gt_is_floor, const MetricConfig& cfg);

MetricsReport compute_metrics(const TriangleMesh& pred, const TriangleMesh& gt, const MetricConfig& cfg);

// ---- TSDF baseline --------------------------------------------------------

struct TsdfConfig {
  double voxel_size = 0.02;
  double truncation = 0.0;  // 0 means 4 * voxel_size
  float weight = 1.0f;

  double trunc() const { return truncation > 0 ? truncation : 4 * voxel_size; }
  void validate() const;
};

/// Sparse voxel-hashed TSDF; blocks of 8^3 voxels. Voxel (i, j, k) has its
/// center at (i + 0.5, j + 0.5, k + 0.5) * voxel_size.
class TsdfMap {
 public:
  static constexpr int kBlock = 8;
  struct Block {
    std::array<float, kBlock * kBlock * kBlock> sdf{};
    std::array<float, kBlock * kBlock * kBlock> weight{};
  };
  using Key = std::array<int, 3>;

  explicit TsdfMap(const TsdfConfig& cfg);

  const TsdfConfig& config() const noexcept { return cfg_; }
  /// Signed distance and weight at a voxel; weight 0 when never updated.
  std::pair<float, float> at(int i, int j, int k) const;
  void update(int i, int j, int k, float sdf, float weight);
  const std::map<Key, Block>& blocks() const noexcept { return blocks_; }
  std::size_t voxel_count() const;

 private:
  TsdfConfig cfg_;
  std::map<Key, Block> blocks_;
};

/// Curless-Levoy projective update along every ray, within +-truncation of
/// the hit.
void tsdf_integrate(TsdfMap& map, const ScanFrame& frame);
TriangleMesh tsdf_mesh(const TsdfMap& map);

// ---- static fusion ablation -----------------------------------------------

/// Accumulates every (subsampled) scan in world space, then encodes each
/// voxel once. Voxels get count 1, so the fusion network is never involved.
NeuralMap static_fusion_map(const std::vector<ScanFrame>& frames, const Encoder<float>& encoder,
                            const GridSpec& spec, const IntegrationPolicy& policy);
TriangleMesh static_fusion_baseline(const std::vector<ScanFrame>& frames, const Networks<float>& nets,
                                    const GridSpec& spec, const IntegrationPolicy& policy,
                                    const ExtractionConfig& extraction);

// ---- tau calibration ------------------------------------------------------

struct TauSweepRow {
  double tau = 0;
  MetricsReport metrics;
};

struct TauCalibration {
  double best_tau = 0;
  std::vector<TauSweepRow> sweep;
};

/// Picks the tau with the highest recall among those whose accuracy is at
/// most 1.5x the best accuracy in the sweep. Ties go to the smaller tau.
TauCalibration calibrate_tau(const MapDecoder& dec, const TriangleMesh& gt, const std::vector<double>& taus,
                             const MetricConfig& metrics);

// ---- compare ---------------------------------------------------------------

struct CompareConfig {
  std::string scene = "apartment";  // apartment | room
  std::uint64_t scene_seed = 1;
  int scans = 32;
  TrajectoryOptions trajectory;
  std::uint64_t trajectory_seed = 0;
  SensorModel sensor = desk_sensor();
  std::vector<double> sigmas{0.0, 0.025, 0.05, 0.075};
  double sigma_Tz_ratio = 0.0;  // sigma_Tz = ratio * sigma
  std::uint64_t noise_seed = 0;
  std::vector<std::string> methods{"ours", "tsdf", "static"};
  double gt_trim_radius = 0.1;  // drop ground truth farther than this from any true hit; 0 keeps all
  GridSpec spec = GridSpec::desk();
  IntegrationPolicy policy;
  ExtractionConfig extraction;
  TsdfConfig tsdf;
  MetricConfig metrics;

  void validate() const;
};

struct CompareRow {
  std::string scene;
  double sigma = 0;
  std::string method;
  double voxel_size = 0;
  MetricsReport metrics;
  std::size_t triangles = 0;
  int frames = 0;
  double integrate_seconds = 0;  // all frames
  double extract_seconds = 0;
};

struct CompareInputs {
  Scene scene;
  TriangleMesh ground_truth;
  std::vector<ScanFrame> frames;  // true poses
};

CompareInputs make_compare_inputs(const CompareConfig& cfg);

using MeshSink = std::function<void(const CompareRow&, const TriangleMesh&)>;

/// Every method on the same frames, for every sigma. Rows are ordered by
/// sigma, then method in config order.
std::vector<CompareRow> run_compare(const CompareConfig& cfg, const Networks<float>& nets,
                                    const MeshSink& sink = {});
std::vector<CompareRow> run_compare(const CompareConfig& cfg, const CompareInputs& in, const Networks<float>& nets,
                                    const MeshSink& sink = {});

/// Deterministic columns only (no wall-clock).
void write_compare_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows);
/// Wall-clock per row.
void write_compare_timing_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows);

/// Fixed-precision number formatting used by all CSV reports.
std::string format_number(double v);

}  // namespace latentmap
