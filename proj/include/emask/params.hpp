#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace emask {

// Ordered collection of named parameter tensors. Forward passes take a
// ParamSet instead of owning their weights.
class ParamSet {
 public:
  using Entry = std::pair<std::string, torch::Tensor>;

  ParamSet() = default;

  void add(std::string name, torch::Tensor value);

  const torch::Tensor& at(const std::string& name) const;
  torch::Tensor& at(const std::string& name);
  bool contains(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  int64_t numel() const;

  const std::vector<Entry>& entries() const { return entries_; }
  std::vector<torch::Tensor> tensors() const;

  // Deep copy, detached from any autograd graph. Leaves keep the
  // requires_grad flag of the source.
  ParamSet clone() const;

  // Same names, tensors replaced positionally.
  ParamSet with_tensors(const std::vector<torch::Tensor>& values) const;

  void set_requires_grad(bool flag);

  // Copy values in place (shapes and names must match).
  void copy_from(const ParamSet& other);

  ParamSet to(torch::Dtype dtype) const;

  // Prefix every name, e.g. "enc." + "conv0.w".
  ParamSet prefixed(const std::string& prefix) const;
  // Entries whose name starts with prefix, prefix stripped.
  ParamSet extract(const std::string& prefix) const;
  // Append entries of other.
  void merge(const ParamSet& other);

 private:
  std::vector<Entry> entries_;
};

// Exact equality of names, shapes, dtypes and raw bytes.
bool bitwise_equal(const ParamSet& a, const ParamSet& b);

// Largest absolute elementwise difference (shapes must match).
double max_abs_diff(const ParamSet& a, const ParamSet& b);

// Seeded generator for parameter initialisation and sampling.
torch::Generator make_generator(uint64_t seed);

}  // namespace emask
