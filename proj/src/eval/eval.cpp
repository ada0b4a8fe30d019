#include "latentmap/eval/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace latentmap {

namespace {

using clock_type = std::chrono::steady_clock;

double seconds_since(clock_type::time_point t0) {
  return std::chrono::duration<double>(clock_type::now() - t0).count();
}

double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 == 0) return (p - a).norm();
  const double t = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

}  // namespace

void MetricConfig::validate() const {
  if (n_samples < 100) throw std::invalid_argument("metrics.n_samples must be >= 100");
  if (!(tau_r > 0)) throw std::invalid_argument("metrics.tau_r must be > 0");
  if (!(floor_margin >= 0)) throw std::invalid_argument("metrics.floor_margin must be >= 0");
}

PointCloud sample_surface(const TriangleMesh& mesh, int n, std::uint64_t seed) {
  if (mesh.empty()) throw std::invalid_argument("sample_surface: empty mesh");
  if (n < 0) throw std::invalid_argument("sample_surface: negative sample count");
  std::vector<double> cum(mesh.triangles.size());
  double total = 0;
  for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
    const auto& f = mesh.triangles[t];
    total += triangle_area(mesh.vertices[f[0]], mesh.vertices[f[1]], mesh.vertices[f[2]]);
    cum[t] = total;
  }
  if (!(total > 0)) throw std::invalid_argument("sample_surface: mesh has zero area");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  PointCloud out;
  out.points.reserve(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    const double pick = u(rng) * total;
    auto it = std::upper_bound(cum.begin(), cum.end(), pick);
    if (it == cum.end()) --it;
    const auto& f = mesh.triangles[static_cast<std::size_t>(it - cum.begin())];
    const double r1 = std::sqrt(u(rng)), r2 = u(rng);
    const Vec3& a = mesh.vertices[f[0]];
    const Vec3& b = mesh.vertices[f[1]];
    const Vec3& c = mesh.vertices[f[2]];
    out.points.push_back((1 - r1) * a + r1 * (1 - r2) * b + r1 * r2 * c);
  }
  return out;
}

// Closest point by Voronoi regions (Ericson, Real-Time Collision Detection 5.1.5).
double point_triangle_distance(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  if (ab.cross(ac).squaredNorm() == 0) {
    return std::min({point_segment_distance(p, a, b), point_segment_distance(p, b, c), point_segment_distance(p, a, c)});
  }
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return ap.norm();
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return bp.norm();
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) return (p - (a + d1 / (d1 - d3) * ab)).norm();
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return cp.norm();
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) return (p - (a + d2 / (d2 - d6) * ac)).norm();
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0) {
    return (p - (b + (d4 - d3) / ((d4 - d3) + (d5 - d6)) * (c - b))).norm();
  }
  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom, w = vc * denom;
  return (p - (a + ab * v + ac * w)).norm();
}

MeshDistance::MeshDistance(const TriangleMesh& mesh) : mesh_(mesh) {
  if (mesh.empty()) throw std::invalid_argument("mesh distance: empty mesh");
  order_.resize(mesh.triangles.size());
  std::iota(order_.begin(), order_.end(), 0);
  nodes_.reserve(2 * order_.size() / 4 + 2);
  build(0, static_cast<int>(order_.size()), 0);
}

int MeshDistance::build(int first, int count, int depth) {
  Node node;
  node.lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  node.hi = -node.lo;
  Vec3 clo = node.lo, chi = node.hi;
  for (int i = first; i < first + count; ++i) {
    const auto& f = mesh_.triangles[static_cast<std::size_t>(order_[static_cast<std::size_t>(i)])];
    Vec3 centroid = Vec3::Zero();
    for (int k = 0; k < 3; ++k) {
      const Vec3& v = mesh_.vertices[static_cast<std::size_t>(f[k])];
      node.lo = node.lo.cwiseMin(v);
      node.hi = node.hi.cwiseMax(v);
      centroid += v / 3;
    }
    clo = clo.cwiseMin(centroid);
    chi = chi.cwiseMax(centroid);
  }
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(node);
  if (count <= 4 || depth > 48) {
    nodes_[id].first = first;
    nodes_[id].count = count;
    return id;
  }
  int axis = 0;
  (chi - clo).maxCoeff(&axis);
  auto centroid_of = [&](int t) {
    const auto& f = mesh_.triangles[static_cast<std::size_t>(t)];
    return mesh_.vertices[f[0]][axis] + mesh_.vertices[f[1]][axis] + mesh_.vertices[f[2]][axis];
  };
  const int mid = first + count / 2;
  std::nth_element(order_.begin() + first, order_.begin() + mid, order_.begin() + first + count,
                   [&](int a, int b) { return centroid_of(a) < centroid_of(b) || (centroid_of(a) == centroid_of(b) && a < b); });
  const int l = build(first, mid - first, depth + 1);
  const int r = build(mid, first + count - mid, depth + 1);
  nodes_[id].left = l;
  nodes_[id].right = r;
  return id;
}

double MeshDistance::distance(const Vec3& p) const {
  auto box_distance = [&](const Node& n) {
    const Vec3 d = (n.lo - p).cwiseMax(p - n.hi).cwiseMax(0.0);
    return d.norm();
  };
  double best = std::numeric_limits<double>::infinity();
  // A box is pruned only when clearly farther than the best triangle, so
  // rounding in the bound can never hide the true minimum.
  auto prune = [&](double bound) { return bound > best * (1 + 1e-9) + 1e-12; };
  std::vector<std::pair<double, int>> stack;
  stack.reserve(64);
  stack.emplace_back(box_distance(nodes_[0]), 0);
  while (!stack.empty()) {
    const auto [bound, id] = stack.back();
    stack.pop_back();
    if (prune(bound)) continue;
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.left < 0) {
      for (int i = n.first; i < n.first + n.count; ++i) {
        const auto& f = mesh_.triangles[static_cast<std::size_t>(order_[static_cast<std::size_t>(i)])];
        best = std::min(best, point_triangle_distance(p, mesh_.vertices[f[0]], mesh_.vertices[f[1]], mesh_.vertices[f[2]]));
      }
      continue;
    }
    const double dl = box_distance(nodes_[static_cast<std::size_t>(n.left)]);
    const double dr = box_distance(nodes_[static_cast<std::size_t>(n.right)]);
    // Nearer child on top.
    if (dl <= dr) {
      stack.emplace_back(dr, n.right);
      stack.emplace_back(dl, n.left);
    } else {
      stack.emplace_back(dl, n.left);
      stack.emplace_back(dr, n.right);
    }
  }
  return best;
}

std::vector<double> MeshDistance::distances(const std::vector<Vec3>& points) const {
  std::vector<double> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) out[i] = distance(points[i]);
  return out;
}

std::vector<double> point_to_mesh_distance(const PointCloud& points, const TriangleMesh& mesh) {
  return MeshDistance(mesh).distances(points.points);
}

MetricsReport metrics_from_distances(const std::vector<double>& pred_to_gt, const std::vector<double>& gt_to_pred,
                                     const std::vector<char>& gt_is_floor, const MetricConfig& cfg) {
  MetricsReport r;
  r.pred_samples = pred_to_gt.size();
  r.gt_samples = gt_to_pred.size();
  if (gt_is_floor.size() != gt_to_pred.size()) throw std::invalid_argument("metrics: floor mask size mismatch");
  for (char f : gt_is_floor) r.gt_samples_no_floor += f ? 0 : 1;
  if (pred_to_gt.empty()) {
    r.prediction_empty = true;
    r.accuracy = std::numeric_limits<double>::quiet_NaN();
    r.completeness = std::numeric_limits<double>::infinity();
    r.recall = 0;
    r.recall_no_floor = 0;
    return r;
  }
  // Sampled points sit on their triangle only up to rounding (~1e-17 m);
  // anything below a picometre counts as on the surface.
  auto snap = [](double d) { return d < kOnSurface ? 0.0 : d; };
  double acc = 0;
  for (double d : pred_to_gt) acc += snap(d);
  r.accuracy = acc / static_cast<double>(pred_to_gt.size());
  double comp = 0;
  std::size_t hit = 0, hit_nf = 0;
  for (std::size_t i = 0; i < gt_to_pred.size(); ++i) {
    comp += snap(gt_to_pred[i]);
    const bool within = gt_to_pred[i] <= cfg.tau_r;
    hit += within;
    if (!gt_is_floor[i]) hit_nf += within;
  }
  r.completeness = gt_to_pred.empty() ? 0 : comp / static_cast<double>(gt_to_pred.size());
  r.recall = gt_to_pred.empty() ? 0 : static_cast<double>(hit) / static_cast<double>(gt_to_pred.size());
  r.recall_no_floor =
      r.gt_samples_no_floor ? static_cast<double>(hit_nf) / static_cast<double>(r.gt_samples_no_floor) : 0;
  return r;
}

MetricsReport compute_metrics(const TriangleMesh& pred, const TriangleMesh& gt, const MetricConfig& cfg) {
  cfg.validate();
  if (gt.empty()) throw std::invalid_argument("compute_metrics: empty ground truth");
  const auto t0 = clock_type::now();
  // Each mesh is sampled with the same seed whatever its role, so swapping
  // the arguments swaps accuracy and completeness exactly.
  const PointCloud gs = sample_surface(gt, cfg.n_samples, cfg.seed);
  std::vector<char> floor(gs.size(), 0);
  if (cfg.exclude_floor)
    for (std::size_t i = 0; i < gs.size(); ++i) floor[i] = gs.points[i].z() < cfg.floor_z + cfg.floor_margin;
  MetricsReport r;
  if (pred.empty()) {
    r = metrics_from_distances({}, std::vector<double>(gs.size(), std::numeric_limits<double>::infinity()), floor, cfg);
  } else {
    const PointCloud ps = sample_surface(pred, cfg.n_samples, cfg.seed);
    r = metrics_from_distances(point_to_mesh_distance(ps, gt), point_to_mesh_distance(gs, pred), floor, cfg);
  }
  if (!cfg.exclude_floor) r.recall_no_floor = r.recall;
  r.seconds = seconds_since(t0);
  return r;
}

// ---- TSDF -----------------------------------------------------------------

void TsdfConfig::validate() const {
  if (!(voxel_size > 0)) throw std::invalid_argument("tsdf.voxel_size must be > 0");
  if (truncation != 0 && truncation < voxel_size) throw std::invalid_argument("tsdf.truncation must be >= voxel_size");
  if (!(weight > 0)) throw std::invalid_argument("tsdf.weight must be > 0");
}

TsdfMap::TsdfMap(const TsdfConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

namespace {

int floor_div(int a, int b) { return a >= 0 ? a / b : -((-a + b - 1) / b); }

}  // namespace

std::pair<float, float> TsdfMap::at(int i, int j, int k) const {
  const Key key{floor_div(i, kBlock), floor_div(j, kBlock), floor_div(k, kBlock)};
  auto it = blocks_.find(key);
  if (it == blocks_.end()) return {0.0f, 0.0f};
  const int li = i - key[0] * kBlock, lj = j - key[1] * kBlock, lk = k - key[2] * kBlock;
  const std::size_t idx = static_cast<std::size_t>((li * kBlock + lj) * kBlock + lk);
  return {it->second.sdf[idx], it->second.weight[idx]};
}

void TsdfMap::update(int i, int j, int k, float sdf, float weight) {
  const Key key{floor_div(i, kBlock), floor_div(j, kBlock), floor_div(k, kBlock)};
  Block& b = blocks_[key];
  const int li = i - key[0] * kBlock, lj = j - key[1] * kBlock, lk = k - key[2] * kBlock;
  const std::size_t idx = static_cast<std::size_t>((li * kBlock + lj) * kBlock + lk);
  const float w = b.weight[idx];
  b.sdf[idx] = (w * b.sdf[idx] + weight * sdf) / (w + weight);
  b.weight[idx] = w + weight;
}

std::size_t TsdfMap::voxel_count() const {
  std::size_t n = 0;
  for (const auto& [_, b] : blocks_)
    for (float w : b.weight) n += w > 0;
  return n;
}

void tsdf_integrate(TsdfMap& map, const ScanFrame& frame) {
  require_valid(frame.pose);
  const double vs = map.config().voxel_size;
  const double tr = map.config().trunc();
  const Vec3 o = frame.pose.t;
  for (const Vec3& ps : frame.points.points) {
    const Vec3 x = frame.pose.apply(ps);
    const double depth = (x - o).norm();
    if (!(depth > 0) || !std::isfinite(depth)) continue;
    const Vec3 d = (x - o) / depth;
    const double t0 = std::max(0.0, depth - tr), t1 = depth + tr;
    // Voxel walk (Amanatides and Woo) over [t0, t1].
    const Vec3 start = (o + t0 * d) / vs;
    int cell[3], step[3];
    double t_max[3], t_delta[3];
    for (int a = 0; a < 3; ++a) {
      cell[a] = static_cast<int>(std::floor(start[a]));
      if (d[a] > 0) {
        step[a] = 1;
        t_max[a] = t0 + ((cell[a] + 1) * vs - (o[a] + t0 * d[a])) / d[a];
        t_delta[a] = vs / d[a];
      } else if (d[a] < 0) {
        step[a] = -1;
        t_max[a] = t0 + (cell[a] * vs - (o[a] + t0 * d[a])) / d[a];
        t_delta[a] = -vs / d[a];
      } else {
        step[a] = 0;
        t_max[a] = t_delta[a] = std::numeric_limits<double>::infinity();
      }
    }
    for (int guard = 0; guard < 100000; ++guard) {
      const Vec3 c = (Vec3(cell[0], cell[1], cell[2]) + Vec3::Constant(0.5)) * vs;
      const double sdf = std::clamp(depth - (c - o).dot(d), -tr, tr);
      map.update(cell[0], cell[1], cell[2], static_cast<float>(sdf), map.config().weight);
      int a = 0;
      if (t_max[1] < t_max[a]) a = 1;
      if (t_max[2] < t_max[a]) a = 2;
      if (t_max[a] > t1) break;
      cell[a] += step[a];
      t_max[a] += t_delta[a];
    }
  }
}

TriangleMesh tsdf_mesh(const TsdfMap& map) {
  constexpr int B = TsdfMap::kBlock;
  const double vs = map.config().voxel_size;
  TriangleMesh out;
  // Each block is meshed on its own 9^3 lattice (one node of overlap), so
  // vertices on block faces are duplicated but no cell is missed or doubled.
  OccupancyGrid grid;
  grid.spacing = vs;
  grid.dims = {B + 1, B + 1, B + 1};
  grid.states.resize(static_cast<std::size_t>((B + 1) * (B + 1) * (B + 1)));
  grid.probabilities.resize(grid.states.size());
  for (const auto& [key, _] : map.blocks()) {
    const int i0 = key[0] * B, j0 = key[1] * B, k0 = key[2] * B;
    grid.origin = (Vec3(i0, j0, k0) + Vec3::Constant(0.5)) * vs;
    for (int i = 0; i <= B; ++i)
      for (int j = 0; j <= B; ++j)
        for (int k = 0; k <= B; ++k) {
          const auto [s, w] = map.at(i0 + i, j0 + j, k0 + k);
          const std::size_t n = grid.index(i, j, k);
          grid.probabilities[n] = -s;
          grid.states[n] = w > 0 ? (s <= 0 ? NodeState::Occupied : NodeState::Free) : NodeState::Unknown;
        }
    out.append(marching_cubes(grid, 0.0));
  }
  return out;
}

// ---- static fusion ----------------------------------------------------------

NeuralMap static_fusion_map(const std::vector<ScanFrame>& frames, const Encoder<float>& encoder, const GridSpec& spec,
                            const IntegrationPolicy& policy) {
  policy.validate();
  NeuralMap map(spec, encoder.config().latent_shape());
  PointCloud all;
  for (const auto& f : frames) {
    require_valid(f.pose);
    if (policy.allocate_frustum)
      for (const VoxelIndex& v : frustum_voxels(f.pose, f.sensor, f.sensor.max_range, spec)) map.allocate(v);
    const PointCloud w = prepare_scan(f, policy);
    all.points.insert(all.points.end(), w.points.begin(), w.points.end());
  }
  if (frames.empty() || all.empty()) return map;
  // The update gate scales with a single scan, not the whole accumulation.
  const std::size_t gate =
      gate_threshold(policy.min_update_fraction, all.size() / frames.size());
  for (const auto& [v, local] : partition_scan(all, spec)) {
    VoxelCell& cell = map.allocate(v);
    if (local.size() < gate) continue;
    cell.z_sum = encoder.encode(points_tensor<float>(local));
    cell.count = 1;
    map.stats.voxels_updated += 1;
  }
  map.stats.scans_integrated = static_cast<std::int64_t>(frames.size());
  return map;
}

TriangleMesh static_fusion_baseline(const std::vector<ScanFrame>& frames, const Networks<float>& nets,
                                    const GridSpec& spec, const IntegrationPolicy& policy,
                                    const ExtractionConfig& extraction) {
  const NeuralMap map = static_fusion_map(frames, nets.encoder, spec, policy);
  ExtractionConfig cfg = extraction;
  cfg.use_fusion = false;
  return extract_mesh(MapDecoder(map, nets.decoder, nets.fusion, cfg));
}

// ---- tau calibration --------------------------------------------------------

TauCalibration calibrate_tau(const MapDecoder& dec, const TriangleMesh& gt, const std::vector<double>& taus,
                             const MetricConfig& metrics) {
  if (taus.empty()) throw std::invalid_argument("calibrate_tau: no candidate taus");
  for (double t : taus)
    if (!(t > 0 && t < 1)) throw std::invalid_argument("calibrate_tau: candidates must lie in (0, 1)");
  TauCalibration out;
  OccupancyGrid grid;
  if (!dec.map().cells.empty()) {
    Vec3 lo, hi;
    map_bounds(dec.map(), lo, hi);
    grid = extract_grid(dec, lo, hi);
  }
  for (double tau : taus) out.sweep.push_back({tau, compute_metrics(marching_cubes(grid, tau), gt, metrics)});
  if (taus.size() == 1) {
    out.best_tau = taus[0];
    return out;
  }
  double best_acc = std::numeric_limits<double>::infinity();
  for (const auto& r : out.sweep)
    if (!r.metrics.prediction_empty) best_acc = std::min(best_acc, r.metrics.accuracy);
  if (!std::isfinite(best_acc)) throw std::runtime_error("no occupied predictions at any tau");
  double best_recall = -1;
  for (const auto& r : out.sweep) {
    if (r.metrics.prediction_empty || r.metrics.accuracy > 1.5 * best_acc) continue;
    if (r.metrics.recall > best_recall || (r.metrics.recall == best_recall && r.tau < out.best_tau)) {
      best_recall = r.metrics.recall;
      out.best_tau = r.tau;
    }
  }
  return out;
}

// ---- compare ----------------------------------------------------------------

void CompareConfig::validate() const {
  if (scene != "apartment" && scene != "room") throw std::invalid_argument("compare.scene must be apartment or room");
  if (scans < 0) throw std::invalid_argument("compare.scans must be >= 0");
  if (sigmas.empty()) throw std::invalid_argument("compare.sigmas must not be empty");
  for (double s : sigmas)
    if (!(s >= 0)) throw std::invalid_argument("compare.sigmas must be >= 0");
  if (!(sigma_Tz_ratio >= 0)) throw std::invalid_argument("compare.sigma_Tz_ratio must be >= 0");
  if (methods.empty()) throw std::invalid_argument("compare.methods must not be empty");
  for (const auto& m : methods)
    if (m != "ours" && m != "tsdf" && m != "static")
      throw std::invalid_argument("compare.methods: unknown method '" + m + "'");
  if (!(gt_trim_radius >= 0)) throw std::invalid_argument("compare.gt_trim_radius must be >= 0");
  sensor.validate();
  spec.validate();
  policy.validate();
  extraction.validate(spec);
  tsdf.validate();
  metrics.validate();
}

CompareInputs make_compare_inputs(const CompareConfig& cfg) {
  cfg.validate();
  CompareInputs in;
  in.scene = cfg.scene == "apartment" ? make_apartment_scene(cfg.scene_seed) : make_room_scene(cfg.scene_seed);
  const auto poses = cfg.scans > 0 ? generate_trajectory(in.scene, cfg.scans, cfg.trajectory, cfg.trajectory_seed)
                                   : std::vector<Pose>{};
  in.frames = simulate_scans(in.scene, poses, cfg.sensor);
  in.ground_truth = in.scene.ground_truth_mesh(0.05);
  if (cfg.gt_trim_radius > 0) {
    std::vector<Vec3> hits;
    for (const auto& f : in.frames)
      for (const auto& p : f.points.points) hits.push_back(f.pose.apply(p));
    in.ground_truth = trim_to_points(in.ground_truth, hits, cfg.gt_trim_radius);
  }
  return in;
}

std::vector<CompareRow> run_compare(const CompareConfig& cfg, const Networks<float>& nets, const MeshSink& sink) {
  return run_compare(cfg, make_compare_inputs(cfg), nets, sink);
}

std::vector<CompareRow> run_compare(const CompareConfig& cfg, const CompareInputs& in, const Networks<float>& nets,
                                    const MeshSink& sink) {
  cfg.validate();
  if (in.ground_truth.empty()) throw std::runtime_error("compare: ground truth is empty (no scans saw the scene?)");
  MetricConfig mc = cfg.metrics;
  mc.floor_z = in.scene.floor_z;
  std::vector<CompareRow> rows;
  for (double sigma : cfg.sigmas) {
    NoiseConfig noise;
    noise.sigma_T = sigma;
    noise.sigma_Tz = sigma * cfg.sigma_Tz_ratio;
    noise.seed = cfg.noise_seed;
    const auto frames = with_pose_noise(in.frames, noise);
    for (const auto& method : cfg.methods) {
      CompareRow row;
      row.scene = cfg.scene;
      row.sigma = sigma;
      row.method = method;
      row.frames = static_cast<int>(frames.size());
      TriangleMesh mesh;
      if (method == "tsdf") {
        row.voxel_size = cfg.tsdf.voxel_size;
        TsdfMap tsdf(cfg.tsdf);
        auto t0 = clock_type::now();
        for (const auto& f : frames) tsdf_integrate(tsdf, f);
        row.integrate_seconds = seconds_since(t0);
        t0 = clock_type::now();
        mesh = tsdf_mesh(tsdf);
        row.extract_seconds = seconds_since(t0);
      } else if (method == "ours") {
        row.voxel_size = cfg.spec.d_V;
        NeuralMap map(cfg.spec, nets.config.latent_shape());
        auto t0 = clock_type::now();
        for (const auto& f : frames) integrate(map, f, nets.encoder, cfg.policy);
        row.integrate_seconds = seconds_since(t0);
        t0 = clock_type::now();
        mesh = extract_mesh(MapDecoder(map, nets.decoder, nets.fusion, cfg.extraction));
        row.extract_seconds = seconds_since(t0);
      } else {
        row.voxel_size = cfg.spec.d_V;
        auto t0 = clock_type::now();
        const NeuralMap map = static_fusion_map(frames, nets.encoder, cfg.spec, cfg.policy);
        row.integrate_seconds = seconds_since(t0);
        t0 = clock_type::now();
        ExtractionConfig ec = cfg.extraction;
        ec.use_fusion = false;
        mesh = extract_mesh(MapDecoder(map, nets.decoder, nets.fusion, ec));
        row.extract_seconds = seconds_since(t0);
      }
      row.triangles = mesh.triangles.size();
      row.metrics = compute_metrics(mesh, in.ground_truth, mc);
      if (sink) sink(row, mesh);
      rows.push_back(row);
    }
  }
  return rows;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  // Avoid "-0.000000".
  if (std::string(buf) == "-0.000000") return "0.000000";
  return buf;
}

void write_compare_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "scene,sigma_T,method,voxel_size,accuracy,completeness,recall,recall_no_floor,triangles\n";
  for (const auto& r : rows) {
    os << r.scene << ',' << format_number(r.sigma) << ',' << r.method << ',' << format_number(r.voxel_size) << ','
       << format_number(r.metrics.accuracy) << ',' << format_number(r.metrics.completeness) << ','
       << format_number(r.metrics.recall) << ',' << format_number(r.metrics.recall_no_floor) << ',' << r.triangles
       << '\n';
  }
}

void write_compare_timing_csv(const std::filesystem::path& path, const std::vector<CompareRow>& rows) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "scene,sigma_T,method,frames,integrate_seconds,frames_per_second,extract_seconds,metric_seconds\n";
  for (const auto& r : rows) {
    const double fps = r.integrate_seconds > 0 ? r.frames / r.integrate_seconds : 0;
    os << r.scene << ',' << format_number(r.sigma) << ',' << r.method << ',' << r.frames << ','
       << format_number(r.integrate_seconds) << ',' << format_number(fps) << ',' << format_number(r.extract_seconds)
       << ',' << format_number(r.metrics.seconds) << '\n';
  }
}

}  // namespace latentmap
