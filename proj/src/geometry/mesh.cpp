#include "latentmap/geometry/mesh.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>

namespace latentmap {

static_assert(std::endian::native == std::endian::little, "PLY I/O assumes a little-endian host");

double triangle_area(const Vec3& a, const Vec3& b, const Vec3& c) {
  return 0.5 * (b - a).cross(c - a).norm();
}

double TriangleMesh::area() const {
  double s = 0;
  for (const auto& t : triangles) s += triangle_area(vertices[t[0]], vertices[t[1]], vertices[t[2]]);
  return s;
}

double TriangleMesh::volume() const {
  double s = 0;
  for (const auto& t : triangles) {
    s += vertices[t[0]].dot(vertices[t[1]].cross(vertices[t[2]]));
  }
  return s / 6.0;
}

void TriangleMesh::append(const TriangleMesh& other) {
  const int base = static_cast<int>(vertices.size());
  vertices.insert(vertices.end(), other.vertices.begin(), other.vertices.end());
  for (const auto& t : other.triangles) triangles.push_back({t[0] + base, t[1] + base, t[2] + base});
}

namespace {

void write_impl(const std::filesystem::path& path, const std::vector<Vec3>& verts,
                const std::vector<std::array<int, 3>>* faces, PlyFormat format) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << "ply\nformat " << (format == PlyFormat::Ascii ? "ascii" : "binary_little_endian")
     << " 1.0\nelement vertex " << verts.size()
     << "\nproperty float x\nproperty float y\nproperty float z\n";
  if (faces) os << "element face " << faces->size() << "\nproperty list uchar int vertex_indices\n";
  os << "end_header\n";
  if (format == PlyFormat::Ascii) {
    os << std::setprecision(std::numeric_limits<float>::max_digits10);
    for (const auto& v : verts) {
      os << static_cast<float>(v.x()) << ' ' << static_cast<float>(v.y()) << ' '
         << static_cast<float>(v.z()) << '\n';
    }
    if (faces) {
      for (const auto& f : *faces) os << "3 " << f[0] << ' ' << f[1] << ' ' << f[2] << '\n';
    }
  } else {
    for (const auto& v : verts) {
      const float xyz[3] = {static_cast<float>(v.x()), static_cast<float>(v.y()),
                            static_cast<float>(v.z())};
      os.write(reinterpret_cast<const char*>(xyz), sizeof(xyz));
    }
    if (faces) {
      for (const auto& f : *faces) {
        const std::uint8_t n = 3;
        os.write(reinterpret_cast<const char*>(&n), 1);
        const std::int32_t idx[3] = {f[0], f[1], f[2]};
        os.write(reinterpret_cast<const char*>(idx), sizeof(idx));
      }
    }
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

enum class Scalar { I8, U8, I16, U16, I32, U32, F32, F64 };

Scalar parse_scalar(const std::string& s) {
  if (s == "char" || s == "int8") return Scalar::I8;
  if (s == "uchar" || s == "uint8") return Scalar::U8;
  if (s == "short" || s == "int16") return Scalar::I16;
  if (s == "ushort" || s == "uint16") return Scalar::U16;
  if (s == "int" || s == "int32") return Scalar::I32;
  if (s == "uint" || s == "uint32") return Scalar::U32;
  if (s == "float" || s == "float32") return Scalar::F32;
  if (s == "double" || s == "float64") return Scalar::F64;
  throw std::runtime_error("ply: unknown scalar type '" + s + "'");
}

template <typename V>
double read_as(std::istream& is) {
  V v;
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  return static_cast<double>(v);
}

double read_binary(std::istream& is, Scalar s) {
  switch (s) {
    case Scalar::I8: return read_as<std::int8_t>(is);
    case Scalar::U8: return read_as<std::uint8_t>(is);
    case Scalar::I16: return read_as<std::int16_t>(is);
    case Scalar::U16: return read_as<std::uint16_t>(is);
    case Scalar::I32: return read_as<std::int32_t>(is);
    case Scalar::U32: return read_as<std::uint32_t>(is);
    case Scalar::F32: return read_as<float>(is);
    case Scalar::F64: return read_as<double>(is);
  }
  return 0;
}

struct Property {
  std::string name;
  Scalar type;
  bool is_list = false;
  Scalar count_type = Scalar::U8;
};

struct Element {
  std::string name;
  std::size_t count = 0;
  std::vector<Property> props;
};

TriangleMesh read_impl(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  std::getline(is, line);
  if (line != "ply" && line != "ply\r") throw std::runtime_error("not a PLY file: " + path.string());
  bool ascii = false;
  std::vector<Element> elements;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::istringstream ls(line);
    std::string kw;
    ls >> kw;
    if (kw == "format") {
      std::string f;
      ls >> f;
      if (f == "ascii") ascii = true;
      else if (f != "binary_little_endian") throw std::runtime_error("ply: unsupported format " + f);
    } else if (kw == "element") {
      Element e;
      ls >> e.name >> e.count;
      elements.push_back(e);
    } else if (kw == "property") {
      if (elements.empty()) throw std::runtime_error("ply: property before element");
      Property p;
      std::string t;
      ls >> t;
      if (t == "list") {
        std::string ct, it;
        ls >> ct >> it >> p.name;
        p.is_list = true;
        p.count_type = parse_scalar(ct);
        p.type = parse_scalar(it);
      } else {
        p.type = parse_scalar(t);
        ls >> p.name;
      }
      elements.back().props.push_back(p);
    } else if (kw == "end_header") {
      break;
    }
  }

  TriangleMesh mesh;
  for (const Element& e : elements) {
    const bool is_vertex = e.name == "vertex";
    const bool is_face = e.name == "face";
    for (std::size_t n = 0; n < e.count; ++n) {
      std::istringstream row;
      if (ascii) {
        if (!std::getline(is, line)) throw std::runtime_error("ply: unexpected end of file");
        row.str(line);
      }
      std::istream& src = ascii ? static_cast<std::istream&>(row) : is;
      auto scalar = [&](Scalar s) {
        if (ascii) {
          double v;
          if (!(row >> v)) throw std::runtime_error("ply: malformed row");
          return v;
        }
        return read_binary(src, s);
      };
      Vec3 v = Vec3::Zero();
      for (const Property& p : e.props) {
        if (p.is_list) {
          const int count = static_cast<int>(scalar(p.count_type));
          std::vector<int> idx(static_cast<std::size_t>(std::max(count, 0)));
          for (auto& x : idx) x = static_cast<int>(scalar(p.type));
          if (is_face && (p.name == "vertex_indices" || p.name == "vertex_index")) {
            for (std::size_t k = 2; k < idx.size(); ++k) mesh.triangles.push_back({idx[0], idx[k - 1], idx[k]});
          }
        } else {
          const double x = scalar(p.type);
          if (is_vertex) {
            if (p.name == "x") v.x() = x;
            else if (p.name == "y") v.y() = x;
            else if (p.name == "z") v.z() = x;
          }
        }
      }
      if (!ascii && !is) throw std::runtime_error("ply: truncated binary body");
      if (is_vertex) mesh.vertices.push_back(v);
    }
  }
  const int nv = static_cast<int>(mesh.vertices.size());
  for (const auto& t : mesh.triangles) {
    for (int k : t) {
      if (k < 0 || k >= nv) throw std::runtime_error("ply: face index out of range");
    }
  }
  return mesh;
}

}  // namespace

void write_ply(const std::filesystem::path& path, const TriangleMesh& mesh, PlyFormat format) {
  write_impl(path, mesh.vertices, &mesh.triangles, format);
}

void write_ply(const std::filesystem::path& path, const PointCloud& cloud, PlyFormat format) {
  write_impl(path, cloud.points, nullptr, format);
}

TriangleMesh read_ply_mesh(const std::filesystem::path& path) { return read_impl(path); }

PointCloud read_ply_points(const std::filesystem::path& path) {
  PointCloud c;
  c.points = read_impl(path).vertices;
  return c;
}

void write_trajectory(const std::filesystem::path& path, const std::vector<Pose>& poses) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  os << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (const Pose& p : poses) {
    for (int r = 0; r < 3; ++r) {
      os << p.R(r, 0) << ' ' << p.R(r, 1) << ' ' << p.R(r, 2) << ' ' << p.t[r];
      os << (r == 2 ? '\n' : ' ');
    }
  }
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

std::vector<Pose> read_trajectory(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::vector<Pose> poses;
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos || line[0] == '#') continue;
    std::istringstream ls(line);
    double v[12];
    for (double& x : v) {
      if (!(ls >> x)) {
        throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": expected 12 numbers");
      }
    }
    Pose p;
    for (int r = 0; r < 3; ++r) {
      p.R(r, 0) = v[4 * r];
      p.R(r, 1) = v[4 * r + 1];
      p.R(r, 2) = v[4 * r + 2];
      p.t[r] = v[4 * r + 3];
    }
    if (!p.valid()) {
      throw InvalidPose(path.string() + ":" + std::to_string(lineno) + ": rotation is not a proper rotation");
    }
    poses.push_back(p);
  }
  return poses;
}

}  // namespace latentmap
