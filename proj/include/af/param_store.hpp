#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "af/tensor.hpp"

namespace af {

// Named trainable parameters with deterministic iteration order (insertion
// order), so optimizer traversal and serialization replay exactly.
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t rng_seed = 0) : rng_seed_(rng_seed) {}

  Tensor& create(const std::string& name, Tensor init);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  const std::vector<std::string>& names() const { return order_; }
  std::size_t size() const { return order_.size(); }
  std::int64_t total_elements() const;

  void zero_grads();

  std::uint64_t rng_seed() const { return rng_seed_; }
  void set_rng_seed(std::uint64_t s) { rng_seed_ = s; }

 private:
  std::uint64_t rng_seed_;
  std::vector<std::string> order_;
  std::unordered_map<std::string, Tensor> index_;
};

}  // namespace af
