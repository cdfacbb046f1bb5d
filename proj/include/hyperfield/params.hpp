// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "hyperfield/tensor.hpp"

#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace hyperfield {

/// Insertion-ordered collection of named parameters.
template <class S>
class ParamStore {
 public:
  using Entry = std::pair<std::string, Tensor<S>>;

  Tensor<S>& add(const std::string& name, Tensor<S> value, bool trainable = true) {
    if (name.empty()) throw std::invalid_argument("parameter name is empty");
    if (index_.count(name) != 0) throw std::invalid_argument("duplicate parameter name: " + name);
    value.set_requires_grad(trainable);
    index_[name] = entries_.size();
    entries_.emplace_back(name, std::move(value));
    return entries_.back().second;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const Tensor<S>& at(const std::string& name) const { return entries_[lookup(name)].second; }
  Tensor<S>& at(const std::string& name) { return entries_[lookup(name)].second; }

  std::size_t size() const { return entries_.size(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  Index element_count() const {
    Index n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : entries_) t.zero_grad();
  }

 private:
  std::size_t lookup(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("unknown parameter: " + name);
    return it->second;
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

}  // namespace hyperfield
