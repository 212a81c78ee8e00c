#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>

#include "ccm/autograd.hpp"

namespace ccm {

enum class Role { DmPhi, CmTheta, ControlNetPsi, AdapterDeltaPsi, Teacher, Other };

std::string_view role_name(Role r) noexcept;

// Named leaf tensors for one network role. Iteration is in name order, so
// checkpoints, hashes, and optimizer sweeps are deterministic.
template <class T>
class BasicParameterSet {
 public:
  using Map = std::map<std::string, BasicVar<T>>;

  explicit BasicParameterSet(Role role = Role::Other) : role_(role) {}

  BasicVar<T> add(const std::string& name, BasicTensor<T> init);

  const BasicVar<T>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  size_t size() const noexcept { return params_.size(); }
  int64_t numel() const;
  typename Map::const_iterator begin() const { return params_.begin(); }
  typename Map::const_iterator end() const { return params_.end(); }

  Role role() const noexcept { return role_; }
  void set_role(Role r);

  // Frozen sets still pass gradients through to their inputs, but their own
  // leaves never accumulate one. Teacher sets are always frozen.
  void set_trainable(bool on);
  bool trainable() const noexcept { return trainable_; }

  void zero_grad();
  bool any_grad() const;

  // Copies values for every local name under dst_prefix from src, where the
  // source name is src_prefix + (name without dst_prefix). Throws
  // StructuralError on a missing name or shape mismatch.
  void copy_values_from(const BasicParameterSet& src, std::string_view src_prefix = "",
                        std::string_view dst_prefix = "");

  // Sets every value under prefix to zero.
  void zero_values(std::string_view prefix = "");

  // FNV-1a over names, shapes, and raw bytes.
  uint64_t hash() const;

  std::map<std::string, BasicTensor<T>> snapshot() const;
  // Loads values by name; the name sets must be identical.
  void load(const std::map<std::string, BasicTensor<T>>& values);

 private:
  Role role_;
  bool trainable_ = true;
  Map params_;
};

using ParameterSet = BasicParameterSet<float>;

// Throws InvariantViolation naming the first parameter that carries a gradient.
template <class T>
void require_no_grad(const BasicParameterSet<T>& ps, std::string_view what);

}  // namespace ccm
