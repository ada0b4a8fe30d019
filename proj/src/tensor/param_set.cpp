#include "latentmap/tensor/param_set.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace latentmap {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename T>
void ParamSet<T>::add(const std::string& name, Tensor<T> value) {
  if (entries_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  Entry e;
  e.grad = Tensor<T>(value.shape());
  e.value = std::move(value);
  entries_.emplace(name, std::move(e));
}

template <typename T>
std::size_t ParamSet<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.size();
  return n;
}

template <typename T>
const typename ParamSet<T>::Entry& ParamSet<T>::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

template <typename T>
const Tensor<T>& ParamSet<T>::value(const std::string& name) const {
  return entry(name).value;
}

template <typename T>
Tensor<T>& ParamSet<T>::value(const std::string& name) {
  return const_cast<Entry&>(entry(name)).value;
}

template <typename T>
const Tensor<T>& ParamSet<T>::grad(const std::string& name) const {
  return entry(name).grad;
}

template <typename T>
Var ParamSet<T>::bind(Graph<T>& g, const std::string& name, bool requires_grad) const {
  return g.parameter(entry(name).value, name, requires_grad);
}

template <typename T>
void ParamSet<T>::accumulate_gradients(const Graph<T>& g) {
  for (const auto& ref : g.parameters()) {
    auto it = entries_.find(ref.name);
    if (it == entries_.end()) continue;
    // Only leaves bound to this set's storage count.
    if (&g.value(ref.var) != &it->second.value) continue;
    if (!g.has_grad(ref.var)) continue;
    const Tensor<T> gr = g.grad(ref.var);
    Tensor<T>& dst = it->second.grad;
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += gr[i];
  }
}

template <typename T>
void ParamSet<T>::zero_grad() {
  for (auto& [_, e] : entries_) e.grad.fill(T(0));
}

template <typename T>
void adam_step(ParamSet<T>& params, const AdamOptions& o) {
  const std::int64_t t = params.step() + 1;
  const double bc1 = 1.0 - std::pow(o.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(o.beta2, static_cast<double>(t));
  for (auto& [_, e] : params.entries()) {
    if (e.m.empty()) e.m = Tensor<T>(e.value.shape());
    if (e.v.empty()) e.v = Tensor<T>(e.value.shape());
    if (e.grad.empty()) e.grad = Tensor<T>(e.value.shape());
    for (std::size_t i = 0; i < e.value.size(); ++i) {
      const double gi = static_cast<double>(e.grad[i]);
      const double m = o.beta1 * static_cast<double>(e.m[i]) + (1.0 - o.beta1) * gi;
      const double v = o.beta2 * static_cast<double>(e.v[i]) + (1.0 - o.beta2) * gi * gi;
      e.m[i] = static_cast<T>(m);
      e.v[i] = static_cast<T>(v);
      const double mhat = m / bc1;
      const double vhat = v / bc2;
      e.value[i] = static_cast<T>(static_cast<double>(e.value[i]) -
                                  o.lr * mhat / (std::sqrt(vhat) + o.eps));
    }
  }
  params.set_step(t);
}

namespace {

constexpr char kMagic[8] = {'L', 'M', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kVersion = 1;

template <typename V>
void put(std::ostream& os, V v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V get(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw std::runtime_error("checkpoint truncated");
  return v;
}

void put_string(std::ostream& os, const std::string& s) {
  put<std::uint32_t>(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::string get_string(std::istream& is) {
  const auto n = get<std::uint32_t>(is);
  if (n > (1u << 20)) throw std::runtime_error("checkpoint name length implausible");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw std::runtime_error("checkpoint truncated");
  return s;
}

template <typename T>
constexpr std::uint8_t dtype_tag() {
  return sizeof(T) == 4 ? 1 : 2;
}

template <typename T>
void put_raw(std::ostream& os, const Tensor<T>& t) {
  os.write(reinterpret_cast<const char*>(t.data()),
           static_cast<std::streamsize>(t.size() * sizeof(T)));
}

template <typename T>
Tensor<T> get_raw(std::istream& is, const Shape& shape, std::uint8_t tag) {
  const std::size_t n = numel(shape);
  std::vector<T> out(n);
  if (tag == 1) {
    std::vector<float> buf(n);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(float)));
    std::copy(buf.begin(), buf.end(), out.begin());
  } else if (tag == 2) {
    std::vector<double> buf(n);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n * sizeof(double)));
    std::copy(buf.begin(), buf.end(), out.begin());
  } else {
    throw std::runtime_error("checkpoint has unknown dtype tag " + std::to_string(tag));
  }
  if (!is) throw std::runtime_error("checkpoint truncated");
  return Tensor<T>(shape, std::move(out));
}

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamSet<T>& params) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path.string());
  os.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(os, kVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, e] : params.entries()) {
    put_string(os, name);
    put<std::uint8_t>(os, dtype_tag<T>());
    put<std::uint32_t>(os, static_cast<std::uint32_t>(e.value.rank()));
    for (int d : e.value.shape()) put<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    put_raw(os, e.value);
  }
  put<std::int64_t>(os, params.step());
  put<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, e] : params.entries()) {
    put_string(os, name);
    const bool has = !e.m.empty() && !e.v.empty();
    put<std::uint8_t>(os, has ? 1 : 0);
    if (has) {
      put_raw(os, e.m);
      put_raw(os, e.v);
    }
  }
  if (!os) throw std::runtime_error("failed writing checkpoint: " + path.string());
}

template <typename T>
ParamSet<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path.string());
  char magic[8];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path.string());
  }
  const auto version = get<std::uint32_t>(is);
  if (version != kVersion) {
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  }
  ParamSet<T> params;
  std::map<std::string, std::uint8_t> tags;
  const auto count = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = get_string(is);
    const auto tag = get<std::uint8_t>(is);
    const auto rank = get<std::uint32_t>(is);
    if (rank > 8) throw std::runtime_error("checkpoint tensor rank implausible");
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int>(get<std::uint32_t>(is)));
    params.add(name, get_raw<T>(is, shape, tag));
    tags[name] = tag;
  }
  params.set_step(get<std::int64_t>(is));
  const auto opt_count = get<std::uint32_t>(is);
  for (std::uint32_t i = 0; i < opt_count; ++i) {
    std::string name = get_string(is);
    const auto has = get<std::uint8_t>(is);
    if (!params.contains(name)) throw std::runtime_error("optimizer state for unknown tensor " + name);
    if (has) {
      auto& e = params.entries().at(name);
      e.m = get_raw<T>(is, e.value.shape(), tags.at(name));
      e.v = get_raw<T>(is, e.value.shape(), tags.at(name));
    }
  }
  return params;
}

template class ParamSet<float>;
template class ParamSet<double>;
template void adam_step<float>(ParamSet<float>&, const AdamOptions&);
template void adam_step<double>(ParamSet<double>&, const AdamOptions&);
template void save_checkpoint<float>(const std::filesystem::path&, const ParamSet<float>&);
template void save_checkpoint<double>(const std::filesystem::path&, const ParamSet<double>&);
template ParamSet<float> load_checkpoint<float>(const std::filesystem::path&);
template ParamSet<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace latentmap
