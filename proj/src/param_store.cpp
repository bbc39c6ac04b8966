#include "af/param_store.hpp"

#include "af/error.hpp"

namespace af {

Tensor& ParameterStore::create(const std::string& name, Tensor init) {
  if (index_.count(name)) throw UsageError("duplicate parameter name: " + name);
  init.set_requires_grad(true);
  order_.push_back(name);
  return index_.emplace(name, std::move(init)).first->second;
}

Tensor& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("unknown parameter: " + name);
  return it->second;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("unknown parameter: " + name);
  return it->second;
}

std::int64_t ParameterStore::total_elements() const {
  std::int64_t n = 0;
  for (const auto& name : order_) n += index_.at(name).size();
  return n;
}

void ParameterStore::zero_grads() {
  for (const auto& name : order_) index_.at(name).zero_grad();
}

}  // namespace af
