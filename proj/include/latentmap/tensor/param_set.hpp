#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "latentmap/tensor/graph.hpp"

namespace latentmap {

/// Named learnable tensors plus their gradient slots and Adam moments.
template <typename T>
class ParamSet {
 public:
  struct Entry {
    Tensor<T> value;
    Tensor<T> grad;
    Tensor<T> m;  // first moment
    Tensor<T> v;  // second moment
  };

  void add(const std::string& name, Tensor<T> value);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  bool empty() const noexcept { return entries_.empty(); }
  std::size_t size() const noexcept { return entries_.size(); }
  std::size_t scalar_count() const;

  const Tensor<T>& value(const std::string& name) const;
  Tensor<T>& value(const std::string& name);
  const Tensor<T>& grad(const std::string& name) const;

  /// Binds the named tensor as a leaf of `g`.
  Var bind(Graph<T>& g, const std::string& name, bool requires_grad) const;

  /// Adds the gradients of every parameter leaf in `g` that belongs to this
  /// set. Leaves from other sets are ignored.
  void accumulate_gradients(const Graph<T>& g);
  void zero_grad();

  std::int64_t step() const noexcept { return step_; }
  void set_step(std::int64_t s) noexcept { step_ = s; }

  const std::map<std::string, Entry>& entries() const noexcept { return entries_; }
  std::map<std::string, Entry>& entries() noexcept { return entries_; }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [name, e] : entries_) {
      out.add(name, e.value.template cast<U>());
      auto& oe = out.entries().at(name);
      oe.m = e.m.template cast<U>();
      oe.v = e.v.template cast<U>();
    }
    out.set_step(step_);
    return out;
  }

 private:
  const Entry& entry(const std::string& name) const;

  std::map<std::string, Entry> entries_;
  std::int64_t step_ = 0;
};

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update over every entry of `params`. A parameter
/// that received no gradient is updated as if its gradient were zero.
template <typename T>
void adam_step(ParamSet<T>& params, const AdamOptions& options);

/// Little-endian checkpoint:
///   "LMCKPT01" | u32 version | u32 tensor count
///   per tensor: u32 name length | name | u8 dtype (1 = f32, 2 = f64) |
///               u32 rank | u32 extents[rank] | raw values
///   optimizer:  i64 step | u32 count | per entry: u32 name length | name |
///               u8 has moments | raw m | raw v
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ParamSet<T>& params);

/// Values stored at either precision are converted to T on load.
template <typename T>
ParamSet<T> load_checkpoint(const std::filesystem::path& path);

}  // namespace latentmap
