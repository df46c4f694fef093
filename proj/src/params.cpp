#include "emask/params.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <algorithm>
#include <cstring>

#include "emask/error.hpp"

namespace emask {

void ParamSet::add(std::string name, torch::Tensor value) {
  if (contains(name)) {
    throw ValueError("duplicate parameter name: " + name);
  }
  entries_.emplace_back(std::move(name), std::move(value));
}

const torch::Tensor& ParamSet::at(const std::string& name) const {
  for (const auto& [key, value] : entries_) {
    if (key == name) return value;
  }
  throw ValueError("unknown parameter: " + name);
}

torch::Tensor& ParamSet::at(const std::string& name) {
  for (auto& [key, value] : entries_) {
    if (key == name) return value;
  }
  throw ValueError("unknown parameter: " + name);
}

bool ParamSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return e.first == name; });
}

int64_t ParamSet::numel() const {
  int64_t total = 0;
  for (const auto& e : entries_) total += e.second.numel();
  return total;
}

std::vector<torch::Tensor> ParamSet::tensors() const {
  std::vector<torch::Tensor> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.second);
  return out;
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (const auto& [name, value] : entries_) {
    auto copy = value.detach().clone();
    copy.set_requires_grad(value.requires_grad());
    out.add(name, std::move(copy));
  }
  return out;
}

ParamSet ParamSet::with_tensors(const std::vector<torch::Tensor>& values) const {
  if (values.size() != entries_.size()) {
    throw ShapeError("with_tensors: expected " + std::to_string(entries_.size()) +
                     " tensors, got " + std::to_string(values.size()));
  }
  ParamSet out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!values[i].sizes().equals(entries_[i].second.sizes())) {
      throw ShapeError("with_tensors: shape mismatch for " + entries_[i].first);
    }
    out.add(entries_[i].first, values[i]);
  }
  return out;
}

void ParamSet::set_requires_grad(bool flag) {
  for (auto& e : entries_) e.second.set_requires_grad(flag);
}

void ParamSet::copy_from(const ParamSet& other) {
  if (other.size() != size()) throw ShapeError("copy_from: size mismatch");
  torch::NoGradGuard no_grad;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first != other.entries_[i].first ||
        !entries_[i].second.sizes().equals(other.entries_[i].second.sizes())) {
      throw ShapeError("copy_from: layout mismatch at " + entries_[i].first);
    }
    entries_[i].second.copy_(other.entries_[i].second);
  }
}

ParamSet ParamSet::to(torch::Dtype dtype) const {
  ParamSet out;
  for (const auto& [name, value] : entries_) {
    auto converted = value.detach().to(dtype).clone();
    converted.set_requires_grad(value.requires_grad());
    out.add(name, std::move(converted));
  }
  return out;
}

ParamSet ParamSet::prefixed(const std::string& prefix) const {
  ParamSet out;
  for (const auto& [name, value] : entries_) out.add(prefix + name, value);
  return out;
}

ParamSet ParamSet::extract(const std::string& prefix) const {
  ParamSet out;
  for (const auto& [name, value] : entries_) {
    if (name.rfind(prefix, 0) == 0) out.add(name.substr(prefix.size()), value);
  }
  return out;
}

void ParamSet::merge(const ParamSet& other) {
  for (const auto& [name, value] : other.entries_) add(name, value);
}

bool bitwise_equal(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& [na, ta] = a.entries()[i];
    const auto& [nb, tb] = b.entries()[i];
    if (na != nb || ta.scalar_type() != tb.scalar_type() || !ta.sizes().equals(tb.sizes())) {
      return false;
    }
    auto ca = ta.detach().contiguous();
    auto cb = tb.detach().contiguous();
    if (std::memcmp(ca.data_ptr(), cb.data_ptr(), ca.nbytes()) != 0) return false;
  }
  return true;
}

double max_abs_diff(const ParamSet& a, const ParamSet& b) {
  if (a.size() != b.size()) throw ShapeError("max_abs_diff: size mismatch");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const auto& ta = a.entries()[i].second;
    const auto& tb = b.entries()[i].second;
    if (!ta.sizes().equals(tb.sizes())) throw ShapeError("max_abs_diff: shape mismatch");
    if (ta.numel() == 0) continue;
    worst = std::max(worst, (ta.detach().to(torch::kFloat64) - tb.detach().to(torch::kFloat64))
                                .abs()
                                .max()
                                .item<double>());
  }
  return worst;
}

torch::Generator make_generator(uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

}  // namespace emask
