#include "latentmap/extract/extract.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <unordered_map>

#include "mc_tables.hpp"

namespace latentmap {

std::string to_string(BlendSpace b) { return b == BlendSpace::Probability ? "probability" : "logit"; }

BlendSpace blend_space_from_string(const std::string& s) {
  if (s == "probability") return BlendSpace::Probability;
  if (s == "logit") return BlendSpace::Logit;
  throw std::invalid_argument("unknown blend space '" + s + "' (expected probability or logit)");
}

std::string to_string(NodeState s) {
  switch (s) {
    case NodeState::Unknown: return "unknown";
    case NodeState::Free: return "free";
    case NodeState::Occupied: return "occupied";
  }
  return "?";
}

void ExtractionConfig::validate(const GridSpec& spec) const {
  if (!(tau_occ > 0 && tau_occ < 1)) throw std::invalid_argument("extraction: tau_occ must lie in (0, 1)");
  if (!(query_density > 0) || !std::isfinite(query_density)) {
    throw std::invalid_argument("extraction: query_density must be positive");
  }
  if (query_density * spec.d_V < 2) {
    throw std::invalid_argument("extraction: query_density must give at least 2 nodes per voxel edge");
  }
}

int queries_per_voxel_edge(const GridSpec& spec, double query_density) {
  return static_cast<int>(std::lround(spec.d_q * query_density));
}

double blend_weight(const Vec3& p, const VoxelIndex& v, const GridSpec& spec) {
  const Vec3 c = index_to_center(v, spec.d_V);
  const double core = spec.d_V - spec.d_q / 2;  // half side of the core cube
  const double face = spec.d_q / 2;
  double w = 1;
  for (int a = 0; a < 3; ++a) {
    const double d = std::abs(p[a] - c[a]);
    if (d >= face) return 0;
    if (d > core) w *= (face - d) / (face - core);
  }
  return w;
}

std::vector<VoxelIndex> owners(const NeuralMap& map, const Vec3& p, bool interpolate) {
  const VoxelIndex home = world_to_index(p, map.spec.d_V);
  if (!interpolate) return map.allocated(home) ? std::vector<VoxelIndex>{home} : std::vector<VoxelIndex>{};
  std::vector<VoxelIndex> out;
  for (int di = -1; di <= 1; ++di)
    for (int dj = -1; dj <= 1; ++dj)
      for (int dk = -1; dk <= 1; ++dk) {
        const VoxelIndex v{home.i + di, home.j + dj, home.k + dk};
        if (map.allocated(v) && blend_weight(p, v, map.spec) > 0) out.push_back(v);
      }
  std::sort(out.begin(), out.end());
  return out;
}

MapDecoder::MapDecoder(const NeuralMap& map, const Decoder<float>& decoder, const FusionNet<float>& fusion,
                       const ExtractionConfig& cfg)
    : map_(map), decoder_(decoder), fusion_(fusion), cfg_(cfg) {
  cfg_.validate(map.spec);
  if (decoder.params().empty()) throw std::runtime_error("decoder has no parameters");
  if (cfg_.use_fusion && fusion.params().empty()) throw std::runtime_error("fusion network has no parameters");
}

const Tensor<float>& MapDecoder::grid_for(const VoxelIndex& v) const {
  auto it = cache_.find(v);
  if (it != cache_.end()) return it->second;
  auto code = cfg_.use_fusion ? fused_code(map_, v, fusion_) : mean_code(map_, v);
  if (!code) throw std::logic_error("decode requested for an unobserved voxel " + to_string(v));
  return cache_.emplace(v, decoder_.expand(*code)).first->second;
}

std::vector<float> MapDecoder::decode_batch(const VoxelIndex& v, const std::vector<Vec3>& pts) const {
  const Tensor<float>& grid = grid_for(v);
  std::vector<float> out(pts.size());
  constexpr std::size_t kChunk = 4096;
  for (std::size_t s = 0; s < pts.size(); s += kChunk) {
    const std::size_t n = std::min(kChunk, pts.size() - s);
    Tensor<float> q({static_cast<int>(n), 3});
    for (std::size_t r = 0; r < n; ++r) {
      const Vec3 l = to_local(pts[s + r], v, map_.spec);
      for (int a = 0; a < 3; ++a) q[r * 3 + a] = static_cast<float>(l[a]);
    }
    const Tensor<float> logits = decoder_.query_logits(grid, q);
    for (std::size_t r = 0; r < n; ++r) out[s + r] = logits[r];
  }
  return out;
}

namespace {

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

}  // namespace

float MapDecoder::decode_in_voxel(const VoxelIndex& v, const Vec3& p) const {
  return sigmoid(decode_batch(v, {p})[0]);
}

QueryResult MapDecoder::query(const Vec3& p) const { return query(std::vector<Vec3>{p})[0]; }

std::vector<QueryResult> MapDecoder::query(const std::vector<Vec3>& points) const {
  struct Pending {
    std::size_t node;
    double weight;
  };
  std::vector<QueryResult> out(points.size());
  std::vector<double> acc(points.size(), 0.0), wsum(points.size(), 0.0);
  std::map<VoxelIndex, std::pair<std::vector<Pending>, std::vector<Vec3>>> work;

  for (std::size_t n = 0; n < points.size(); ++n) {
    const auto own = owners(map_, points[n], cfg_.interpolate_boundaries);
    if (own.empty()) continue;  // unknown
    out[n].state = NodeState::Free;
    for (const auto& v : own) {
      if (map_.cells.at(v).count == 0) continue;
      const double w = cfg_.interpolate_boundaries ? blend_weight(points[n], v, map_.spec) : 1.0;
      auto& [pend, pts] = work[v];
      pend.push_back({n, w});
      pts.push_back(points[n]);
    }
  }
  for (const auto& [v, job] : work) {
    const auto logits = decode_batch(v, job.second);
    for (std::size_t r = 0; r < logits.size(); ++r) {
      const auto& [n, w] = job.first[r];
      const double val = cfg_.blend == BlendSpace::Probability ? sigmoid(logits[r]) : logits[r];
      acc[n] += w * val;
      wsum[n] += w;
    }
  }
  for (std::size_t n = 0; n < points.size(); ++n) {
    if (wsum[n] <= 0) continue;  // unknown, or free by rule
    double v = acc[n] / wsum[n];
    if (cfg_.blend == BlendSpace::Logit) v = 1.0 / (1.0 + std::exp(-v));
    out[n].probability = static_cast<float>(v);
    out[n].state = out[n].probability >= cfg_.tau_occ ? NodeState::Occupied : NodeState::Free;
  }
  return out;
}

std::size_t OccupancyGrid::count(NodeState s) const { return static_cast<std::size_t>(std::count(states.begin(), states.end(), s)); }

OccupancyGrid extract_grid(const MapDecoder& dec, const Vec3& lo, const Vec3& hi) {
  if (!lo.allFinite() || !hi.allFinite()) throw std::invalid_argument("extract_grid: region must be finite");
  OccupancyGrid g;
  g.origin = lo;
  g.spacing = dec.config().spacing();
  for (int a = 0; a < 3; ++a) {
    const double ext = hi[a] - lo[a];
    if (!(ext > 0)) {
      g.dims = {0, 0, 0};
      return g;
    }
    g.dims[a] = static_cast<int>(std::floor(ext / g.spacing + 1e-9)) + 1;
  }
  // One x-slab at a time keeps the per-voxel batches large while bounding
  // memory.
  g.states.resize(static_cast<std::size_t>(g.dims[0]) * g.dims[1] * g.dims[2]);
  g.probabilities.resize(g.states.size());
  const int slab = std::max(1, static_cast<int>(std::lround(dec.map().spec.d_V / g.spacing)));
  std::vector<Vec3> pts;
  for (int i0 = 0; i0 < g.dims[0]; i0 += slab) {
    const int i1 = std::min(g.dims[0], i0 + slab);
    pts.clear();
    for (int i = i0; i < i1; ++i)
      for (int j = 0; j < g.dims[1]; ++j)
        for (int k = 0; k < g.dims[2]; ++k) pts.push_back(g.position(i, j, k));
    dec.evict_below(world_to_index(g.position(i0, 0, 0), dec.map().spec.d_V).i - 1);
    const auto res = dec.query(pts);
    const std::size_t base = g.index(i0, 0, 0);
    for (std::size_t r = 0; r < res.size(); ++r) {
      g.states[base + r] = res[r].state;
      g.probabilities[base + r] = res[r].probability;
    }
  }
  return g;
}

void map_bounds(const NeuralMap& map, Vec3& lo, Vec3& hi) {
  lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  hi = -lo;
  for (const auto& [v, _] : map.cells) {
    const Vec3 c = index_to_center(v, map.spec.d_V);
    lo = lo.cwiseMin(c - Vec3::Constant(map.spec.d_V / 2));
    hi = hi.cwiseMax(c + Vec3::Constant(map.spec.d_V / 2));
  }
}

TriangleMesh marching_cubes(const OccupancyGrid& grid, double iso) {
  TriangleMesh mesh;
  const auto [nx, ny, nz] = grid.dims;
  if (nx < 2 || ny < 2 || nz < 2) return mesh;

  // Corner offsets in the table's numbering.
  static constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0},
                                        {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
  static constexpr int kEdge[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6},
                                       {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

  // A lattice edge is keyed by its lower node and axis so neighbouring cells
  // share vertices.
  std::unordered_map<std::uint64_t, int> edge_vertex;
  auto vertex_on = [&](const int a[3], const int b[3], float va, float vb) -> int {
    int lo[3] = {std::min(a[0], b[0]), std::min(a[1], b[1]), std::min(a[2], b[2])};
    const int axis = a[0] != b[0] ? 0 : a[1] != b[1] ? 1 : 2;
    const std::uint64_t key = grid.index(lo[0], lo[1], lo[2]) * 3 + axis;
    double t = std::clamp((iso - va) / (static_cast<double>(vb) - va), 0.0, 1.0);
    // Crossings within a hair of a node are snapped onto it and shared by
    // every edge at that node; otherwise they would leave slivers that the
    // area filter removes, opening holes.
    std::uint64_t id = key;
    constexpr double kSnap = 1e-3;
    if (t < kSnap || t > 1 - kSnap) {
      const int* n = t < kSnap ? a : b;
      id = grid.size() * 3 + grid.index(n[0], n[1], n[2]);
      t = t < kSnap ? 0.0 : 1.0;
    }
    auto [it, fresh] = edge_vertex.try_emplace(id, static_cast<int>(mesh.vertices.size()));
    if (fresh) {
      const Vec3 pa = grid.position(a[0], a[1], a[2]), pb = grid.position(b[0], b[1], b[2]);
      mesh.vertices.push_back(pa + t * (pb - pa));
    }
    return it->second;
  };

  for (int i = 0; i + 1 < nx; ++i)
    for (int j = 0; j + 1 < ny; ++j)
      for (int k = 0; k + 1 < nz; ++k) {
        float val[8];
        int node[8][3];
        int cube = 0;
        bool unknown = false;
        for (int c = 0; c < 8; ++c) {
          node[c][0] = i + kCorner[c][0];
          node[c][1] = j + kCorner[c][1];
          node[c][2] = k + kCorner[c][2];
          const std::size_t idx = grid.index(node[c][0], node[c][1], node[c][2]);
          if (grid.states[idx] == NodeState::Unknown) {
            unknown = true;
            break;
          }
          val[c] = grid.probabilities[idx];
          if (val[c] < iso) cube |= 1 << c;
        }
        if (unknown || mc::kEdgeTable[cube] == 0) continue;
        int vid[12];
        for (int e = 0; e < 12; ++e) {
          if (mc::kEdgeTable[cube] & (1 << e)) {
            const int a = kEdge[e][0], b = kEdge[e][1];
            vid[e] = vertex_on(node[a], node[b], val[a], val[b]);
          }
        }
        for (int t = 0; mc::kTriTable[cube][t] != -1; t += 3) {
          // With the below-iso bit convention the table's winding already
          // faces away from the occupied side.
          const int a = vid[mc::kTriTable[cube][t]], b = vid[mc::kTriTable[cube][t + 1]],
                    c = vid[mc::kTriTable[cube][t + 2]];
          if (a == b || b == c || a == c) continue;
          if (triangle_area(mesh.vertices[a], mesh.vertices[b], mesh.vertices[c]) <= 1e-12) continue;
          mesh.triangles.push_back({a, b, c});
        }
      }
  return mesh;
}

TriangleMesh extract_mesh(const MapDecoder& dec) {
  if (dec.map().cells.empty()) return {};
  Vec3 lo, hi;
  map_bounds(dec.map(), lo, hi);
  return marching_cubes(extract_grid(dec, lo, hi), dec.config().tau_occ);
}

namespace {

constexpr char kGridMagic[8] = {'L', 'M', 'G', 'R', 'I', 'D', '0', '1'};
constexpr std::uint32_t kGridVersion = 1;

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw std::runtime_error("grid file truncated");
  return v;
}

}  // namespace

void write_grid(const std::filesystem::path& path, const OccupancyGrid& grid) {
  static_assert(std::endian::native == std::endian::little);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open grid for writing: " + path.string());
  os.write(kGridMagic, 8);
  put<std::uint32_t>(os, kGridVersion);
  for (int a = 0; a < 3; ++a) put<double>(os, grid.origin[a]);
  put<double>(os, grid.spacing);
  for (int a = 0; a < 3; ++a) put<std::int32_t>(os, grid.dims[a]);
  std::vector<std::uint8_t> packed((grid.size() + 3) / 4, 0);
  for (std::size_t n = 0; n < grid.size(); ++n) {
    packed[n / 4] |= static_cast<std::uint8_t>(static_cast<unsigned>(grid.states[n]) << (2 * (n % 4)));
  }
  os.write(reinterpret_cast<const char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
  for (float p : grid.probabilities) {
    put<std::uint16_t>(os, static_cast<std::uint16_t>(std::lround(std::clamp(p, 0.0f, 1.0f) * 65535.0f)));
  }
  if (!os) throw std::runtime_error("failed writing grid: " + path.string());
}

OccupancyGrid read_grid(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open grid: " + path.string());
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kGridMagic, 8) != 0) throw std::runtime_error("not an occupancy grid: " + path.string());
  if (get<std::uint32_t>(is) != kGridVersion) throw std::runtime_error("unsupported grid version");
  OccupancyGrid g;
  for (int a = 0; a < 3; ++a) g.origin[a] = get<double>(is);
  g.spacing = get<double>(is);
  for (int a = 0; a < 3; ++a) {
    g.dims[a] = get<std::int32_t>(is);
    if (g.dims[a] < 0) throw std::runtime_error("grid has negative dimensions");
  }
  const std::size_t n = static_cast<std::size_t>(g.dims[0]) * g.dims[1] * g.dims[2];
  std::vector<std::uint8_t> packed((n + 3) / 4);
  is.read(reinterpret_cast<char*>(packed.data()), static_cast<std::streamsize>(packed.size()));
  if (!is) throw std::runtime_error("grid file truncated");
  g.states.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned s = (packed[i / 4] >> (2 * (i % 4))) & 3u;
    if (s > 2) throw std::runtime_error("grid has an invalid node state");
    g.states[i] = static_cast<NodeState>(s);
  }
  g.probabilities.resize(n);
  for (auto& p : g.probabilities) p = static_cast<float>(get<std::uint16_t>(is)) / 65535.0f;
  return g;
}

}  // namespace latentmap
