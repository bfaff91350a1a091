#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "retrodesk/config.hpp"
#include "retrodesk/tensor.hpp"

namespace retrodesk {

// Named parameter tensors with a per-name freeze mask. Iteration follows
// insertion order, which is what the checkpoint format and the optimizer
// rely on for determinism.
template <typename S>
class ParameterStore {
 public:
  Tensor<S>& add(const std::string& name, Tensor<S> t) {
    if (lookup_.count(name))
      throw std::invalid_argument("ParameterStore: duplicate name " + name);
    t.requires_grad = true;
    t.ensure_grad();
    lookup_[name] = names_.size();
    names_.push_back(name);
    tensors_.push_back(std::move(t));
    frozen_.push_back(0);
    return tensors_.back();
  }

  bool has(const std::string& name) const { return lookup_.count(name) > 0; }

  Tensor<S>& get(const std::string& name) {
    auto it = lookup_.find(name);
    if (it == lookup_.end())
      throw std::invalid_argument("ParameterStore: unknown name " + name);
    return tensors_[it->second];
  }
  const Tensor<S>& get(const std::string& name) const {
    auto it = lookup_.find(name);
    if (it == lookup_.end())
      throw std::invalid_argument("ParameterStore: unknown name " + name);
    return tensors_[it->second];
  }

  void set_frozen(const std::string& name, bool frozen) {
    frozen_[lookup_.at(name)] = frozen ? 1 : 0;
  }
  void freeze_all(bool frozen) {
    for (auto& f : frozen_) f = frozen ? 1 : 0;
  }
  bool is_frozen(const std::string& name) const {
    return frozen_[lookup_.at(name)] != 0;
  }
  bool is_frozen(size_t i) const { return frozen_[i] != 0; }

  size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  Tensor<S>& at(size_t i) { return tensors_[i]; }
  const Tensor<S>& at(size_t i) const { return tensors_[i]; }

  void zero_grads() {
    for (auto& t : tensors_) t.zero_grad();
  }

  int64_t total_params() const {
    int64_t n = 0;
    for (const auto& t : tensors_) n += t.numel();
    return n;
  }

  // Deep copy (fresh buffers).
  ParameterStore clone() const {
    ParameterStore out;
    for (size_t i = 0; i < names_.size(); ++i) {
      Tensor<S> t;
      t.ndim = tensors_[i].ndim;
      t.dims = tensors_[i].dims;
      t.data = std::make_shared<std::vector<S>>(*tensors_[i].data);
      out.add(names_[i], std::move(t));
      out.frozen_[i] = frozen_[i];
    }
    return out;
  }

  template <typename S2>
  ParameterStore<S2> convert() const {
    ParameterStore<S2> out;
    for (size_t i = 0; i < names_.size(); ++i) {
      Tensor<S2> t = make_tensor<S2>({tensors_[i].numel()});
      t.ndim = tensors_[i].ndim;
      t.dims = tensors_[i].dims;
      const auto& src = *tensors_[i].data;
      for (size_t j = 0; j < src.size(); ++j)
        (*t.data)[j] = static_cast<S2>(src[j]);
      out.add(names_[i], std::move(t));
      if (frozen_[i]) out.set_frozen(names_[i], true);
    }
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::unordered_map<std::string, size_t> lookup_;
  std::vector<Tensor<S>> tensors_;
  std::vector<char> frozen_;

  template <typename>
  friend class ParameterStore;
};

// Checkpoint `model.rckp`: magic, version, config JSON blob, then
// (name, frozen flag, shape, f32 data) records in store order.
void save_checkpoint(const std::string& path, const ModelConfig& config,
                     const ParameterStore<float>& params);
std::pair<ModelConfig, ParameterStore<float>> load_checkpoint(
    const std::string& path);

}  // namespace retrodesk
