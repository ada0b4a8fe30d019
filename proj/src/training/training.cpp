#include "latentmap/training/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

namespace latentmap {

namespace {

using Rng = std::mt19937_64;

double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

Rng seeded(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq sq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                   static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return Rng(sq);
}

Mat3 random_yaw_tilt(Rng& rng, double tilt) {
  return (Eigen::AngleAxisd(uniform(rng, -std::numbers::pi, std::numbers::pi), Vec3::UnitZ()) *
          Eigen::AngleAxisd(uniform(rng, -tilt, tilt), Vec3::UnitX()))
      .toRotationMatrix();
}

Primitive box(const Vec3& center, const Mat3& R, const Vec3& half) {
  Primitive p{Primitive::Type::Box, Pose::identity(), half};
  p.pose.R = R;
  p.pose.t = center;
  return p;
}

// Large slab whose near face passes at signed offset `offset` from `c`
// along `normal` (pointing out of the solid).
Primitive slab(const Vec3& c, const Vec3& normal, double offset, double thickness, double yaw) {
  const Vec3 n = normal.normalized();
  // Local z is the thin axis.
  Vec3 a = n.cross(Vec3::UnitZ());
  if (a.norm() < 1e-6) a = Vec3::UnitX();
  a.normalize();
  const Vec3 b = n.cross(a);
  Mat3 R;
  R.col(0) = a;
  R.col(1) = b;
  R.col(2) = n;
  R = Eigen::AngleAxisd(yaw, n).toRotationMatrix() * R;
  return box(c + (offset - thickness / 2) * n, R, Vec3(3.0, 3.0, thickness / 2));
}

const std::vector<std::string>& all_kinds() {
  static const std::vector<std::string> k = {"box", "sphere", "cylinder", "wall", "corner", "thin", "compound"};
  return k;
}

}  // namespace

Scene make_local_shape(std::uint64_t seed, const GridSpec& spec, const std::string& kind) {
  Rng rng = seeded(seed, 0x5a);
  const double s = spec.d_I;
  const Vec3 c = Vec3::Constant(s / 2);
  auto jitter = [&](double f) -> Vec3 { return Vec3(uniform(rng, -f, f), uniform(rng, -f, f), uniform(rng, -f, f)) * s; };
  auto axis_normal = [&]() {
    static const Vec3 dirs[6] = {Vec3::UnitX(), -Vec3::UnitX(), Vec3::UnitY(), -Vec3::UnitY(), Vec3::UnitZ(), -Vec3::UnitZ()};
    return dirs[std::uniform_int_distribution<int>(0, 5)(rng)];
  };
  Scene sc;
  sc.name = kind;
  if (kind == "box") {
    const Vec3 half(uniform(rng, 0.08, 0.35) * s, uniform(rng, 0.08, 0.35) * s, uniform(rng, 0.08, 0.35) * s);
    sc.primitives.push_back(box(c + jitter(0.2), random_yaw_tilt(rng, 0.3), half));
  } else if (kind == "sphere") {
    Primitive p{Primitive::Type::Sphere, Pose::from_translation(c + jitter(0.2)), Vec3::Constant(uniform(rng, 0.1, 0.4) * s)};
    sc.primitives.push_back(p);
  } else if (kind == "cylinder") {
    Primitive p{Primitive::Type::Cylinder, Pose::identity(), Vec3(uniform(rng, 0.06, 0.3) * s, uniform(rng, 0.2, 1.0) * s, 0)};
    p.pose.R = random_yaw_tilt(rng, 0.2);
    p.pose.t = c + jitter(0.2);
    sc.primitives.push_back(p);
  } else if (kind == "wall") {
    // Both faces inside the volume: from one face alone the solid side is a
    // coin flip.
    const double off = uniform(rng, -0.25, 0.3) * s;
    sc.primitives.push_back(slab(c, axis_normal(), off, uniform(rng, 0.05, std::min(0.3, off + 0.4 * s)),
                                 uniform(rng, -0.3, 0.3)));
  } else if (kind == "corner") {
    // Floor (solid below, may be one-sided) meeting a two-faced wall.
    const double yaw = uniform(rng, -std::numbers::pi, std::numbers::pi);
    sc.primitives.push_back(slab(c, Vec3::UnitZ(), uniform(rng, -0.3, 0.3) * s, uniform(rng, 0.05, 0.3), 0));
    const Vec3 n(std::cos(yaw), std::sin(yaw), 0);
    const double off = uniform(rng, -0.2, 0.25) * s;
    sc.primitives.push_back(slab(c, n, off, uniform(rng, 0.05, std::min(0.25, off + 0.3 * s)), 0));
  } else if (kind == "thin") {
    const double r = uniform(rng, 0.012, 0.045);
    const Vec3 long_axis = axis_normal();
    Vec3 half = Vec3::Constant(r);
    for (int a = 0; a < 3; ++a) {
      if (std::abs(long_axis[a]) > 0.5) half[a] = uniform(rng, 0.3, 1.5);
    }
    if (uniform(rng, 0, 1) < 0.5) {
      // Board: thin along one axis only.
      const int thin_axis = std::uniform_int_distribution<int>(0, 2)(rng);
      for (int a = 0; a < 3; ++a) half[a] = a == thin_axis ? r : uniform(rng, 0.1, 0.6);
    }
    sc.primitives.push_back(box(c + jitter(0.25), Eigen::AngleAxisd(uniform(rng, -0.4, 0.4), Vec3::UnitZ()).toRotationMatrix(), half));
  } else if (kind == "compound") {
    const double floor = uniform(rng, -0.35, 0.0) * s;
    sc.primitives.push_back(slab(c, Vec3::UnitZ(), floor, 0.2, 0));
    const double h = uniform(rng, 0.1, 0.3) * s;
    const Vec3 base = c + Vec3(uniform(rng, -0.25, 0.25) * s, uniform(rng, -0.25, 0.25) * s, floor + h);
    if (uniform(rng, 0, 1) < 0.5) {
      sc.primitives.push_back(box(base, random_yaw_tilt(rng, 0.0),
                                  Vec3(uniform(rng, 0.08, 0.3) * s, uniform(rng, 0.08, 0.3) * s, h)));
    } else {
      sc.primitives.push_back({Primitive::Type::Sphere, Pose::from_translation(base), Vec3::Constant(h)});
    }
  } else {
    throw std::invalid_argument("unknown shape kind '" + kind + "'");
  }
  return sc;
}

namespace {

// Subsamples the input cloud and draws labelled queries.
bool finish_sample(const Scene& shape, const std::string& kind, const std::vector<Vec3>& hits, const GridSpec& spec,
                   const ShapeDataOptions& opt, Rng& rng, ShapeSample& out) {
  if (static_cast<int>(hits.size()) < opt.min_points) return false;
  const double s = spec.d_I;

  out = ShapeSample{};
  out.kind = kind;
  const double lmin = std::log(static_cast<double>(opt.min_points)), lmax = std::log(static_cast<double>(opt.max_points));
  const auto want = static_cast<std::size_t>(std::lround(std::exp(uniform(rng, lmin, lmax))));
  std::vector<std::size_t> idx(hits.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (want < hits.size()) {
    for (std::size_t i = 0; i < want; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng() % (hits.size() - i));
      std::swap(idx[i], idx[j]);
    }
    idx.resize(want);
    std::sort(idx.begin(), idx.end());
  }
  for (std::size_t i : idx) out.surface_points.points.push_back(hits[i]);

  const double m = (spec.d_I - spec.d_q) / (2 * spec.d_I);
  const auto nq = static_cast<std::size_t>(opt.queries);
  out.uniform_queries = static_cast<std::size_t>(std::lround((1 - opt.near_surface_fraction) * opt.queries));
  std::normal_distribution<double> noise(0.0, opt.near_surface_sigma / s);
  for (std::size_t q = 0; q < nq; ++q) {
    Vec3 l;
    if (q < out.uniform_queries) {
      l = Vec3(uniform(rng, m, 1 - m), uniform(rng, m, 1 - m), uniform(rng, m, 1 - m));
    } else {
      l = hits[static_cast<std::size_t>(rng() % hits.size())] + Vec3(noise(rng), noise(rng), noise(rng));
      l = l.cwiseMax(Vec3::Constant(m)).cwiseMin(Vec3::Constant(1 - m));
    }
    out.queries.push_back(l);
    out.labels.push_back(shape.sdf(l * s) < 0 ? 1.0f : 0.0f);
  }
  return true;
}

}  // namespace

bool sample_view(const Scene& shape, const std::string& kind, std::uint64_t seed, const ShapeDataOptions& opt,
                 ShapeSample& out) {
  Rng rng = seeded(seed, 0x71e3);
  const GridSpec& spec = opt.spec;
  const double s = spec.d_I;
  const Vec3 c = Vec3::Constant(s / 2);
  SensorModel cam;
  cam.width = 96;
  cam.height = 72;
  cam.hfov = 1.2;
  cam.vfov = 0.9;
  cam.max_range = 4.0;

  // Whole-surface input: area-weighted samples of the faces near the volume.
  if (uniform(rng, 0, 1) >= opt.partial_view_fraction) {
    const TriangleMesh mesh = shape.ground_truth_mesh(0.05);
    std::vector<double> cdf;
    std::vector<std::size_t> tris;
    double total = 0;
    for (std::size_t t = 0; t < mesh.triangles.size(); ++t) {
      const auto& tri = mesh.triangles[t];
      const Vec3 ctr = (mesh.vertices[tri[0]] + mesh.vertices[tri[1]] + mesh.vertices[tri[2]]) / 3.0;
      if ((ctr.array() < -0.05).any() || (ctr.array() > s + 0.05).any()) continue;
      total += triangle_area(mesh.vertices[tri[0]], mesh.vertices[tri[1]], mesh.vertices[tri[2]]);
      cdf.push_back(total);
      tris.push_back(t);
    }
    std::vector<Vec3> hits;
    if (total > 0) {
      for (int k = 0; k < 4 * opt.max_points; ++k) {
        const auto it = std::lower_bound(cdf.begin(), cdf.end(), uniform(rng, 0, total));
        const auto& tri = mesh.triangles[tris[std::min<std::size_t>(it - cdf.begin(), tris.size() - 1)]];
        double a = uniform(rng, 0, 1), b = uniform(rng, 0, 1);
        if (a + b > 1) {
          a = 1 - a;
          b = 1 - b;
        }
        const Vec3& p0 = mesh.vertices[tri[0]];
        const Vec3 w = p0 + a * (mesh.vertices[tri[1]] - p0) + b * (mesh.vertices[tri[2]] - p0);
        if ((w.array() >= 0).all() && (w.array() < s).all()) hits.push_back(w / s);
      }
    }
    return finish_sample(shape, kind, hits, spec, opt, rng, out);
  }

  for (int attempt = 0; attempt < 24; ++attempt) {
    // Viewpoint on a shell around the volume, mostly from above the horizon.
    const double az = uniform(rng, -std::numbers::pi, std::numbers::pi);
    const double el = uniform(rng, -0.35, 1.2);
    const double dist = uniform(rng, 0.8, 2.6);
    const Vec3 dir(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
    const Vec3 origin = c + dist * dir;
    if (shape.sdf(origin) < 0.05) continue;
    const Vec3 target = c + Vec3(uniform(rng, -0.15, 0.15), uniform(rng, -0.15, 0.15), uniform(rng, -0.15, 0.15)) * s;
    const Vec3 f = (target - origin).normalized();
    Vec3 left = Vec3::UnitZ().cross(f);
    if (left.norm() < 1e-6) left = Vec3::UnitY();
    left.normalize();
    Pose pose;
    pose.R.col(0) = f;
    pose.R.col(1) = left;
    pose.R.col(2) = f.cross(left);
    pose.t = origin;

    std::vector<Vec3> hits;
    for (const Vec3& p : raycast_scan(shape, pose, cam).points) {
      const Vec3 w = pose.apply(p);
      if ((w.array() >= 0).all() && (w.array() < s).all()) hits.push_back(w / s);
    }
    if (static_cast<int>(hits.size()) < opt.min_points) continue;
    return finish_sample(shape, kind, hits, spec, opt, rng, out);
  }
  return false;
}

std::vector<ShapeSample> make_shape_dataset(const ShapeDataOptions& opt, std::uint64_t seed) {
  const auto& kinds = opt.kinds.empty() ? all_kinds() : opt.kinds;
  std::vector<ShapeSample> out;
  for (int i = 0; i < opt.shapes; ++i) {
    const std::string& kind = kinds[static_cast<std::size_t>(i) % kinds.size()];
    const std::uint64_t shape_seed = seed * 1000003ull + static_cast<std::uint64_t>(i);
    const Scene sc = make_local_shape(shape_seed, opt.spec, kind);
    for (int v = 0; v < opt.views_per_shape; ++v) {
      ShapeSample smp;
      if (sample_view(sc, kind, shape_seed * 31ull + static_cast<std::uint64_t>(v), opt, smp)) out.push_back(std::move(smp));
    }
  }
  return out;
}

void TrainReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  for (std::size_t c = 0; c < columns.size(); ++c) os << (c ? "," : "") << columns[c];
  os << "\n";
  os << std::setprecision(9);
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) os << (c ? "," : "") << r[c];
    os << "\n";
  }
}

std::string stable_hash(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

namespace {

template <typename T>
Tensor<T> queries_tensor(const std::vector<Vec3>& q) {
  Tensor<T> t({static_cast<int>(q.size()), 3});
  for (std::size_t i = 0; i < q.size(); ++i)
    for (int a = 0; a < 3; ++a) t[i * 3 + a] = static_cast<T>(q[i][a]);
  return t;
}

double cosine_lr(double base, double final_fraction, int step, int steps) {
  const double t = steps > 1 ? static_cast<double>(step) / (steps - 1) : 1.0;
  return base * (final_fraction + (1 - final_fraction) * 0.5 * (1 + std::cos(std::numbers::pi * t)));
}

bool all_finite(const ParamSet<float>& p) {
  for (const auto& [_, e] : p.entries())
    for (float v : e.value.values())
      if (!std::isfinite(v)) return false;
  return true;
}

}  // namespace

template <typename T>
Var stage1_loss(Graph<T>& g, const Encoder<T>& enc, const Decoder<T>& dec,
                const std::vector<const ShapeSample*>& batch, bool rg) {
  if (batch.empty()) throw std::invalid_argument("stage1_loss: empty batch");
  Var total;
  for (const ShapeSample* s : batch) {
    Var code = enc.forward(g, points_tensor<T>(s->surface_points), rg);
    Var logits = dec.logits(g, code, queries_tensor<T>(s->queries), rg);
    Tensor<T> labels({static_cast<int>(s->labels.size()), 1});
    for (std::size_t i = 0; i < s->labels.size(); ++i) labels[i] = static_cast<T>(s->labels[i]);
    Var l = bce_with_logits(g, logits, labels);
    total = total.valid() ? add(g, total, l) : l;
  }
  return scale(g, total, static_cast<T>(1.0 / static_cast<double>(batch.size())));
}

Vec3 cube_symmetry(const Vec3& p, int k) {
  Vec3 q = p - Vec3::Constant(0.5);
  for (int r = 0; r < k % 4; ++r) q = Vec3(-q.y(), q.x(), q.z());
  if (k >= 4) q.x() = -q.x();
  return q + Vec3::Constant(0.5);
}

namespace {

ShapeSample symmetric_copy(const ShapeSample& s, int k) {
  ShapeSample out = s;
  for (auto& p : out.surface_points.points) p = cube_symmetry(p, k);
  for (auto& q : out.queries) q = cube_symmetry(q, k);
  return out;
}

}  // namespace

TrainReport train_stage1(Networks<float>& nets, const std::vector<ShapeSample>& data, const Stage1Options& opt) {
  if (data.empty()) throw std::invalid_argument("train_stage1: empty dataset");
  if (opt.steps < 0 || opt.batch < 1) throw std::invalid_argument("train_stage1: steps >= 0 and batch >= 1 required");
  const auto t0 = std::chrono::steady_clock::now();
  TrainReport rep;
  rep.columns = {"step", "bce", "lr"};
  rep.seed = opt.seed;
  rep.config_hash = opt.config_hash;

  Rng rng = seeded(opt.seed, 0x57a9e1);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  double running = 0;
  int running_n = 0;
  std::uniform_int_distribution<int> pick_symmetry(0, 7);
  std::vector<ShapeSample> augmented;
  for (int step = 0; step < opt.steps; ++step) {
    std::vector<const ShapeSample*> batch;
    augmented.clear();
    augmented.reserve(opt.batch);
    while (static_cast<int>(batch.size()) < opt.batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const ShapeSample& s = data[order[cursor++]];
      if (opt.augment) {
        augmented.push_back(symmetric_copy(s, pick_symmetry(rng)));
        batch.push_back(&augmented.back());
      } else {
        batch.push_back(&s);
      }
    }
    nets.encoder.params().zero_grad();
    nets.decoder.params().zero_grad();
    Graph<float> g;
    Var loss = stage1_loss(g, nets.encoder, nets.decoder, batch, true);
    const double value = g.value(loss)[0];
    if (!std::isfinite(value)) {
      rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      throw TrainingDiverged("stage 1 loss is not finite at step " + std::to_string(step), rep);
    }
    g.backward(loss);
    nets.encoder.params().accumulate_gradients(g);
    nets.decoder.params().accumulate_gradients(g);
    AdamOptions a = opt.adam;
    a.lr = cosine_lr(opt.adam.lr, opt.final_lr_fraction, step, opt.steps);
    if (step < opt.warmup_steps) a.lr *= static_cast<double>(step + 1) / opt.warmup_steps;
    adam_step(nets.encoder.params(), a);
    adam_step(nets.decoder.params(), a);
    running += value;
    ++running_n;
    if ((step + 1) % opt.log_every == 0 || step + 1 == opt.steps) {
      rep.add({static_cast<double>(step + 1), running / running_n, a.lr});
      running = 0;
      running_n = 0;
    }
  }
  if (!all_finite(nets.encoder.params()) || !all_finite(nets.decoder.params())) {
    throw TrainingDiverged("stage 1 produced non-finite weights", rep);
  }
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

AccuracyReport evaluate_stage1(const Networks<float>& nets, const std::vector<ShapeSample>& data) {
  AccuracyReport r;
  std::size_t uni = 0, uni_ok = 0, near = 0, near_ok = 0;
  double bce = 0;
  for (const auto& s : data) {
    const Tensor<float> code = nets.encoder.encode(points_tensor<float>(s.surface_points));
    const Tensor<float> z = nets.decoder.query_logits(nets.decoder.expand(code), queries_tensor<float>(s.queries));
    for (std::size_t q = 0; q < s.queries.size(); ++q) {
      const bool ok = (z[q] >= 0) == (s.labels[q] > 0.5f);
      if (q < s.uniform_queries) {
        ++uni;
        uni_ok += ok;
      } else {
        ++near;
        near_ok += ok;
      }
      bce += bce_with_logits_value<double>(z[q], s.labels[q]);
    }
  }
  r.queries = uni + near;
  r.accuracy = uni ? static_cast<double>(uni_ok) / static_cast<double>(uni) : 0;
  r.near_accuracy = near ? static_cast<double>(near_ok) / static_cast<double>(near) : 0;
  r.bce = r.queries ? bce / static_cast<double>(r.queries) : 0;
  return r;
}

FusionSequence make_fusion_sequence(std::uint64_t seed, const FusionDataOptions& opt) {
  Rng rng = seeded(seed, 0xf05e);
  FusionSequence seq;
  const Vec3 size(uniform(rng, 3.0, 5.0), uniform(rng, 2.8, 4.5), uniform(rng, 2.3, 2.8));
  seq.scene = make_room_scene(seed, size);
  TrajectoryOptions to;
  to.height = uniform(rng, 1.0, 1.6);
  to.pitch = uniform(rng, 0.1, 0.5);
  to.radius_fraction = uniform(rng, 0.3, 0.7);
  to.alt_step = opt.alt_step;
  const int total = std::max(opt.orbit_frames, opt.scans);
  const auto poses = generate_trajectory(seq.scene, total, to, seed);
  const int start = static_cast<int>(rng() % static_cast<std::uint64_t>(total));
  std::vector<Pose> arc;
  for (int i = 0; i < opt.scans; ++i) arc.push_back(poses[static_cast<std::size_t>((start + i) % total)]);
  seq.scans = simulate_scans(seq.scene, arc, opt.sensor);
  return seq;
}

template <typename T>
Tensor<T> compute_target_code(const std::vector<PointCloud>& local_clouds, const Encoder<T>& enc) {
  PointCloud all;
  for (const auto& c : local_clouds) all.points.insert(all.points.end(), c.points.begin(), c.points.end());
  if (all.empty()) throw std::invalid_argument("compute_target_code: no accumulated points for this voxel");
  return enc.encode(points_tensor<T>(all));
}

std::vector<FusionExample<float>> fusion_examples(const FusionSequence& seq, const Networks<float>& nets,
                                                  const FusionDataOptions& opt, std::uint64_t seed) {
  NeuralMap map(opt.spec, nets.config.latent_shape());
  std::map<VoxelIndex, std::vector<PointCloud>> clouds;
  for (const auto& f : seq.scans) {
    const IntegrationReport rep = integrate(map, f, nets.encoder, opt.policy);
    if (rep.updated.empty()) continue;
    const VoxelClouds parts = partition_scan(prepare_scan(f, opt.policy), opt.spec);
    for (const auto& v : rep.updated) clouds[v].push_back(parts.at(v));
  }
  std::vector<FusionExample<float>> out;
  const double m = (opt.spec.d_I - opt.spec.d_q) / (2 * opt.spec.d_I);
  for (const auto& [v, cl] : clouds) {
    FusionExample<float> ex;
    ex.voxel = v;
    ex.count = map.cells.at(v).count;
    if (ex.count != static_cast<std::int64_t>(cl.size())) throw std::logic_error("fusion_examples: count mismatch");
    ex.mean_code = *mean_code(map, v);
    ex.target_code = compute_target_code(cl, nets.encoder);
    Rng rng = seeded(seed, (static_cast<std::uint64_t>(static_cast<std::uint32_t>(v.i)) << 42) ^
                               (static_cast<std::uint64_t>(static_cast<std::uint32_t>(v.j)) << 21) ^
                               static_cast<std::uint32_t>(v.k));
    ex.queries = Tensor<float>({opt.queries_per_voxel, 3});
    for (auto& q : ex.queries.values()) q = static_cast<float>(uniform(rng, m, 1 - m));
    ex.target_logits = nets.decoder.query_logits(nets.decoder.expand(ex.target_code), ex.queries);
    out.push_back(std::move(ex));
  }
  return out;
}

template <typename T>
FusionLoss<T> fusion_loss(Graph<T>& g, const std::vector<const FusionExample<T>*>& batch, const FusionNet<T>& fusion,
                          const Decoder<T>& dec, bool rg) {
  if (batch.empty()) throw std::invalid_argument("fusion_loss: empty batch");
  Var fea, rec;
  for (const FusionExample<T>* ex : batch) {
    if (ex->count < 1) throw std::invalid_argument("fusion_loss: voxel without measurements");
    Var zhat = fusion.forward(g, g.constant(ex->mean_code), rg);
    Var f = l1_loss(g, g.constant(ex->target_code), zhat, Reduction::Sum);
    Var r = l1_loss(g, g.constant(ex->target_logits), dec.logits(g, zhat, ex->queries, false), Reduction::Mean);
    fea = fea.valid() ? add(g, fea, f) : f;
    rec = rec.valid() ? add(g, rec, r) : r;
  }
  const T inv = static_cast<T>(1.0 / static_cast<double>(batch.size()));
  FusionLoss<T> out;
  out.fea = scale(g, fea, inv);
  out.rec = scale(g, rec, inv);
  out.total = add(g, out.fea, out.rec);
  return out;
}

FusionEval evaluate_fusion(const Networks<float>& nets, const std::vector<FusionExample<float>>& data) {
  FusionEval e;
  for (const auto& ex : data) {
    for (bool identity : {false, true}) {
      const Tensor<float> zhat = identity ? ex.mean_code : nets.fusion.fuse(ex.mean_code);
      double fea = 0;
      for (std::size_t i = 0; i < zhat.size(); ++i) fea += std::abs(static_cast<double>(ex.target_code[i]) - zhat[i]);
      const Tensor<float> z = nets.decoder.query_logits(nets.decoder.expand(zhat), ex.queries);
      double rec = 0;
      for (std::size_t i = 0; i < z.size(); ++i) rec += std::abs(static_cast<double>(ex.target_logits[i]) - z[i]);
      rec /= static_cast<double>(z.size());
      (identity ? e.fea_identity : e.fea) += fea;
      (identity ? e.rec_identity : e.rec) += rec;
    }
  }
  e.voxels = data.size();
  if (e.voxels) {
    const double n = static_cast<double>(e.voxels);
    e.fea /= n;
    e.rec /= n;
    e.fea_identity /= n;
    e.rec_identity /= n;
  }
  return e;
}

namespace {

void require_zero_grads(const ParamSet<float>& p, const char* who) {
  for (const auto& [name, e] : p.entries())
    for (float v : e.grad.values())
      if (v != 0.0f) throw std::logic_error(std::string("stage 2 touched a frozen ") + who + " gradient: " + name);
}

}  // namespace

TrainReport train_stage2(Networks<float>& nets, const std::vector<FusionExample<float>>& data, const Stage2Options& opt) {
  if (data.empty()) throw std::invalid_argument("train_stage2: empty dataset");
  if (opt.steps < 0 || opt.batch < 1) throw std::invalid_argument("train_stage2: steps >= 0 and batch >= 1 required");
  const auto t0 = std::chrono::steady_clock::now();
  TrainReport rep;
  rep.columns = {"step", "l_fea", "l_rec", "total", "lr"};
  rep.seed = opt.seed;
  rep.config_hash = opt.config_hash;
  const ParamSet<float> enc_before = nets.encoder.params(), dec_before = nets.decoder.params();

  Rng rng = seeded(opt.seed, 0xf1);
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::size_t cursor = order.size();
  double acc[3] = {0, 0, 0};
  int acc_n = 0;
  for (int step = 0; step < opt.steps; ++step) {
    std::vector<const FusionExample<float>*> batch;
    while (static_cast<int>(batch.size()) < opt.batch) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(&data[order[cursor++]]);
    }
    nets.encoder.params().zero_grad();
    nets.decoder.params().zero_grad();
    nets.fusion.params().zero_grad();
    Graph<float> g;
    const FusionLoss<float> L = fusion_loss(g, batch, nets.fusion, nets.decoder, true);
    const double total = g.value(L.total)[0];
    if (!std::isfinite(total)) throw TrainingDiverged("stage 2 loss is not finite at step " + std::to_string(step), rep);
    g.backward(L.total);
    nets.fusion.params().accumulate_gradients(g);
    nets.encoder.params().accumulate_gradients(g);
    nets.decoder.params().accumulate_gradients(g);
    require_zero_grads(nets.encoder.params(), "encoder");
    require_zero_grads(nets.decoder.params(), "decoder");
    AdamOptions a = opt.adam;
    a.lr = cosine_lr(opt.adam.lr, opt.final_lr_fraction, step, opt.steps);
    adam_step(nets.fusion.params(), a);
    acc[0] += g.value(L.fea)[0];
    acc[1] += g.value(L.rec)[0];
    acc[2] += total;
    ++acc_n;
    if ((step + 1) % opt.log_every == 0 || step + 1 == opt.steps) {
      rep.add({static_cast<double>(step + 1), acc[0] / acc_n, acc[1] / acc_n, acc[2] / acc_n, a.lr});
      acc[0] = acc[1] = acc[2] = 0;
      acc_n = 0;
    }
  }
  for (const auto& [name, e] : enc_before.entries())
    if (e.value.storage() != nets.encoder.params().value(name).storage()) throw std::logic_error("stage 2 changed " + name);
  for (const auto& [name, e] : dec_before.entries())
    if (e.value.storage() != nets.decoder.params().value(name).storage()) throw std::logic_error("stage 2 changed " + name);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

template Var stage1_loss<float>(Graph<float>&, const Encoder<float>&, const Decoder<float>&,
                                const std::vector<const ShapeSample*>&, bool);
template Var stage1_loss<double>(Graph<double>&, const Encoder<double>&, const Decoder<double>&,
                                 const std::vector<const ShapeSample*>&, bool);
template Tensor<float> compute_target_code<float>(const std::vector<PointCloud>&, const Encoder<float>&);
template Tensor<double> compute_target_code<double>(const std::vector<PointCloud>&, const Encoder<double>&);
template FusionLoss<float> fusion_loss<float>(Graph<float>&, const std::vector<const FusionExample<float>*>&,
                                              const FusionNet<float>&, const Decoder<float>&, bool);
template FusionLoss<double> fusion_loss<double>(Graph<double>&, const std::vector<const FusionExample<double>*>&,
                                                const FusionNet<double>&, const Decoder<double>&, bool);

}  // namespace latentmap
