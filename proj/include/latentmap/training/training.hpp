#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "latentmap/map/latent_map.hpp"
#include "latentmap/sim/scene.hpp"

namespace latentmap {

// ---- stage 1 data ---------------------------------------------------------

/// One training example in the input-volume frame ([0,1]^3).
struct ShapeSample {
  std::string kind;
  PointCloud surface_points;      // encoder input
  std::vector<Vec3> queries;      // inside the query volume
  std::vector<float> labels;      // 1 inside a solid
  std::size_t uniform_queries = 0;  // the first this many are uniform, the rest near-surface
};

struct ShapeDataOptions {
  GridSpec spec = GridSpec::desk();
  int shapes = 200;
  int views_per_shape = 6;
  int queries = 1024;
  double near_surface_fraction = 0.5;
  double near_surface_sigma = 0.03;  // meters
  int min_points = 16;
  int max_points = 400;
  /// Share of samples whose encoder input is one ray-cast view; the rest see
  /// points drawn from the whole surface inside the input volume.
  double partial_view_fraction = 0.0;
  /// Restrict to these kinds (empty = all): box, sphere, cylinder, wall,
  /// corner, thin, compound.
  std::vector<std::string> kinds;
};

/// Small scene of analytic solids around the input volume [0, d_I]^3.
Scene make_local_shape(std::uint64_t seed, const GridSpec& spec, const std::string& kind);

/// One training sample of `shape`. The input cloud is either a ray-cast
/// view from a random outside viewpoint or area-weighted samples of the
/// whole surface (see partial_view_fraction), clipped to the input volume
/// and subsampled. Returns false when too few points fall inside.
bool sample_view(const Scene& shape, const std::string& kind, std::uint64_t seed, const ShapeDataOptions& opt,
                 ShapeSample& out);

/// opt.shapes shapes x opt.views_per_shape views, deterministic in seed.
std::vector<ShapeSample> make_shape_dataset(const ShapeDataOptions& opt, std::uint64_t seed);

// ---- reports --------------------------------------------------------------

struct TrainReport {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;
  double seconds = 0;
  std::uint64_t seed = 0;
  std::string config_hash;

  void add(std::vector<double> row) { rows.push_back(std::move(row)); }
  void write_csv(const std::filesystem::path& path) const;
};

struct TrainingDiverged : std::runtime_error {
  TrainReport report;
  TrainingDiverged(const std::string& what, TrainReport r) : std::runtime_error(what), report(std::move(r)) {}
};

/// 64-bit FNV-1a of a string, as 16 hex digits. Stable across platforms.
std::string stable_hash(const std::string& text);

// ---- stage 1 --------------------------------------------------------------

struct Stage1Options {
  int steps = 9000;
  int batch = 4;
  AdamOptions adam{2e-3};
  double final_lr_fraction = 0.05;  // cosine decay to lr * this
  /// Linear ramp from lr / warmup_steps; without it some seeds lose most
  /// decoder ReLUs in the first steps and never leave the all-empty answer.
  int warmup_steps = 300;
  std::uint64_t seed = 0;
  int log_every = 100;
  /// Each drawn sample gets a random z-preserving symmetry of the input cube.
  bool augment = true;
  std::string config_hash;
};

/// One of the 8 symmetries of the unit cube that keep z up: k % 4 quarter
/// turns about the vertical axis, then a mirror in x when k >= 4.
Vec3 cube_symmetry(const Vec3& p, int k);

/// Mean BCE over queries of a batch of samples, as a graph node.
template <typename T>
Var stage1_loss(Graph<T>& g, const Encoder<T>& enc, const Decoder<T>& dec,
                const std::vector<const ShapeSample*>& batch, bool requires_grad);

/// Trains encoder and decoder jointly. Columns: step, bce, lr.
TrainReport train_stage1(Networks<float>& nets, const std::vector<ShapeSample>& data, const Stage1Options& opt);

struct AccuracyReport {
  double accuracy = 0;          // uniform queries, threshold 0.5
  double near_accuracy = 0;     // near-surface queries
  double bce = 0;
  std::size_t queries = 0;
};

AccuracyReport evaluate_stage1(const Networks<float>& nets, const std::vector<ShapeSample>& data);

// ---- stage 2 --------------------------------------------------------------

/// Scans of one procedural room along a short arc with alternating small and
/// large steps.
struct FusionSequence {
  Scene scene;
  std::vector<ScanFrame> scans;
};

struct FusionDataOptions {
  GridSpec spec = GridSpec::desk();
  int scans = 8;
  int queries_per_voxel = 512;
  double alt_step = 3.0;       // large step / small step
  int orbit_frames = 32;       // the arc is cut from an orbit of this many poses
  SensorModel sensor;
  IntegrationPolicy policy;
};

FusionSequence make_fusion_sequence(std::uint64_t seed, const FusionDataOptions& opt);

/// Encodes the concatenation of all local clouds in one pass.
template <typename T>
Tensor<T> compute_target_code(const std::vector<PointCloud>& local_clouds, const Encoder<T>& enc);

/// Per-voxel training pair after t scans.
template <typename T>
struct FusionExample {
  VoxelIndex voxel;
  std::int64_t count = 0;
  Tensor<T> mean_code;    // z_sum / count
  Tensor<T> target_code;  // z*
  Tensor<T> queries;      // [P, 3] uniform in the query volume, input-volume frame
  Tensor<T> target_logits;  // decoder logits under z*, [P, 1]
};

/// Integrates the sequence, keeps every gated local cloud and builds one
/// example per updated voxel.
std::vector<FusionExample<float>> fusion_examples(const FusionSequence& seq, const Networks<float>& nets,
                                                  const FusionDataOptions& opt, std::uint64_t seed);

template <typename T>
struct FusionLoss {
  Var fea, rec, total;
};

/// L_fea = mean over voxels of ||z* - z_hat||_1; L_rec = mean over voxels and
/// queries of |g(p, z*) - g(p, z_hat)| on logits; total = L_fea + L_rec.
/// Encoder and decoder enter as constants; only fusion parameters can carry
/// gradients.
template <typename T>
FusionLoss<T> fusion_loss(Graph<T>& g, const std::vector<const FusionExample<T>*>& batch, const FusionNet<T>& fusion,
                          const Decoder<T>& dec, bool requires_grad);

struct FusionEval {
  double fea = 0, rec = 0;            // fusion network
  double fea_identity = 0, rec_identity = 0;  // z_hat = mean code
  std::size_t voxels = 0;
};

FusionEval evaluate_fusion(const Networks<float>& nets, const std::vector<FusionExample<float>>& data);

struct Stage2Options {
  int steps = 600;
  int batch = 8;
  AdamOptions adam{1e-3};
  double final_lr_fraction = 0.1;
  std::uint64_t seed = 0;
  int log_every = 25;
  std::string config_hash;
};

/// Trains the fusion network only. Throws std::logic_error if any encoder or
/// decoder gradient slot is ever non-zero. Columns: step, l_fea, l_rec, total, lr.
TrainReport train_stage2(Networks<float>& nets, const std::vector<FusionExample<float>>& data,
                         const Stage2Options& opt);

}  // namespace latentmap
