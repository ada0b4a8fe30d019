#include "latentmap/map/latent_map.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <random>
#include <stdexcept>

namespace latentmap {

static_assert(std::endian::native == std::endian::little, "snapshot I/O assumes a little-endian host");

void IntegrationPolicy::validate() const {
  if (!(min_update_fraction >= 0 && min_update_fraction <= 1)) {
    throw std::invalid_argument("integration: min_update_fraction must lie in [0, 1]");
  }
  if (!(input_subsample_fraction >= 0 && input_subsample_fraction <= 1)) {
    throw std::invalid_argument("integration: input_subsample_fraction must lie in [0, 1]");
  }
}

NeuralMap::NeuralMap(const GridSpec& s, Shape shape) : spec(s), latent_shape(std::move(shape)) {}

const VoxelCell* NeuralMap::find(const VoxelIndex& v) const {
  auto it = cells.find(v);
  return it == cells.end() ? nullptr : &it->second;
}

std::size_t NeuralMap::observed_count() const {
  std::size_t n = 0;
  for (const auto& [_, c] : cells) n += c.count > 0;
  return n;
}

VoxelCell& NeuralMap::allocate(const VoxelIndex& v) {
  auto [it, fresh] = cells.try_emplace(v);
  if (fresh) it->second.z_sum = Tensor<float>(latent_shape);
  return it->second;
}

std::vector<std::size_t> subsample_indices(std::size_t n, double fraction, std::uint64_t seed,
                                           int frame_index) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (fraction >= 1.0) return idx;
  const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
  std::seed_seq sq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                   static_cast<std::uint32_t>(frame_index), 0x5eedu};
  std::mt19937_64 rng(sq);
  // Partial Fisher-Yates with an explicit draw so the result does not depend
  // on the standard library's distribution implementation.
  for (std::size_t i = 0; i < keep; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(keep);
  std::sort(idx.begin(), idx.end());
  return idx;
}

PointCloud prepare_scan(const ScanFrame& frame, const IntegrationPolicy& policy) {
  const auto keep = subsample_indices(frame.points.size(), policy.input_subsample_fraction, policy.seed,
                                      frame.index);
  PointCloud out;
  out.points.reserve(keep.size());
  for (std::size_t i : keep) out.points.push_back(frame.pose.apply(frame.points.points[i]));
  return out;
}

std::size_t gate_threshold(double min_update_fraction, std::size_t scan_points) {
  const double g = min_update_fraction * static_cast<double>(scan_points);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(g)));
}

IntegrationReport integrate(NeuralMap& map, const ScanFrame& frame, const Encoder<float>& encoder,
                            const IntegrationPolicy& policy) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  require_valid(frame.pose);
  policy.validate();
  if (encoder.params().empty()) throw std::runtime_error("integrate: encoder has no parameters");
  if (encoder.config().latent_shape() != map.latent_shape) {
    throw ShapeError("integrate: encoder latent shape " + to_string(encoder.config().latent_shape()) +
                     " does not match the map's " + to_string(map.latent_shape));
  }

  IntegrationReport rep;
  rep.frame_index = frame.index;
  rep.input_points = frame.points.size();
  const std::size_t before = map.cells.size();

  if (policy.allocate_frustum) {
    for (const VoxelIndex& v : frustum_voxels(frame.pose, frame.sensor, frame.sensor.max_range, map.spec)) {
      map.allocate(v);
    }
  }
  const PointCloud world = prepare_scan(frame, policy);
  rep.used_points = world.size();
  rep.gate_points = gate_threshold(policy.min_update_fraction, world.size());

  double encode_s = 0;
  for (const auto& [v, local] : partition_scan(world, map.spec)) {
    VoxelCell& cell = map.allocate(v);
    if (local.size() < rep.gate_points) {
      rep.skipped.push_back(v);
      continue;
    }
    const auto e0 = clock::now();
    const Tensor<float> z = encoder.encode(points_tensor<float>(local));
    encode_s += std::chrono::duration<double>(clock::now() - e0).count();
    float* dst = cell.z_sum.data();
    for (std::size_t i = 0; i < z.size(); ++i) dst[i] += z[i];
    cell.count += 1;
    rep.updated.push_back(v);
  }
  rep.newly_allocated = map.cells.size() - before;
  map.stats.scans_integrated += 1;
  map.stats.voxels_updated += static_cast<std::int64_t>(rep.updated.size());
  rep.encode_seconds = encode_s;
  rep.total_seconds = std::chrono::duration<double>(clock::now() - t0).count();
  return rep;
}

std::optional<Tensor<float>> mean_code(const NeuralMap& map, const VoxelIndex& v) {
  const VoxelCell* c = map.find(v);
  if (!c || c->count == 0) return std::nullopt;
  Tensor<float> m = c->z_sum;
  const auto n = static_cast<float>(c->count);
  for (auto& x : m.values()) x /= n;
  return m;
}

std::optional<Tensor<float>> fused_code(const NeuralMap& map, const VoxelIndex& v,
                                        const FusionNet<float>& fusion) {
  auto m = mean_code(map, v);
  if (!m) return std::nullopt;
  return fusion.fuse(*m);
}

namespace {

constexpr char kMagic[8] = {'L', 'M', 'M', 'A', 'P', '0', '0', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw std::runtime_error("snapshot truncated");
  return v;
}

}  // namespace

void save_snapshot(const std::filesystem::path& path, const NeuralMap& map) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open snapshot for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  const GridSpec& s = map.spec;
  for (double d : {s.d_V, s.d_I, s.d_q, s.query_density}) put<double>(os, d);
  for (int i : {s.encoder_grid_res, s.latent_res, s.latent_channels, s.depth}) put<std::int32_t>(os, i);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(map.latent_shape.size()));
  for (int d : map.latent_shape) put<std::int32_t>(os, d);
  put<std::int64_t>(os, map.stats.scans_integrated);
  put<std::int64_t>(os, map.stats.voxels_updated);
  put<std::uint64_t>(os, map.cells.size());
  for (const auto& [v, c] : map.cells) {
    put<std::int32_t>(os, v.i);
    put<std::int32_t>(os, v.j);
    put<std::int32_t>(os, v.k);
    put<std::int64_t>(os, c.count);
    os.write(reinterpret_cast<const char*>(c.z_sum.data()),
             static_cast<std::streamsize>(c.z_sum.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("failed writing snapshot: " + path.string());
}

NeuralMap load_snapshot(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open snapshot: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("not a map snapshot: " + path.string());
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion) {
    throw std::runtime_error("unsupported snapshot version " + std::to_string(version) + " (expected " +
                             std::to_string(kVersion) + ")");
  }
  GridSpec s;
  s.d_V = get<double>(is);
  s.d_I = get<double>(is);
  s.d_q = get<double>(is);
  s.query_density = get<double>(is);
  s.encoder_grid_res = get<std::int32_t>(is);
  s.latent_res = get<std::int32_t>(is);
  s.latent_channels = get<std::int32_t>(is);
  s.depth = get<std::int32_t>(is);
  s.validate();
  const auto rank = get<std::uint32_t>(is);
  if (rank > 8) throw std::runtime_error("snapshot latent rank implausible");
  Shape shape;
  for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(get<std::int32_t>(is));
  NeuralMap map(s, shape);
  map.stats.scans_integrated = get<std::int64_t>(is);
  map.stats.voxels_updated = get<std::int64_t>(is);
  const auto n = get<std::uint64_t>(is);
  const std::size_t per = numel(shape);
  for (std::uint64_t c = 0; c < n; ++c) {
    VoxelIndex v;
    v.i = get<std::int32_t>(is);
    v.j = get<std::int32_t>(is);
    v.k = get<std::int32_t>(is);
    VoxelCell cell;
    cell.count = get<std::int64_t>(is);
    if (cell.count < 0) throw std::runtime_error("snapshot has a negative count");
    std::vector<float> buf(per);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(per * sizeof(float)));
    if (!is) throw std::runtime_error("snapshot truncated");
    cell.z_sum = Tensor<float>(shape, std::move(buf));
    map.cells.emplace(v, std::move(cell));
  }
  return map;
}

}  // namespace latentmap
