#include "ccm/parameters.hpp"

#include <cstring>

namespace ccm {

std::string_view role_name(Role r) noexcept {
  switch (r) {
    case Role::DmPhi: return "dm-phi";
    case Role::CmTheta: return "cm-theta";
    case Role::ControlNetPsi: return "controlnet-psi";
    case Role::AdapterDeltaPsi: return "adapter-dpsi";
    case Role::Teacher: return "teacher";
    case Role::Other: break;
  }
  return "other";
}

template <class T>
BasicVar<T> BasicParameterSet<T>::add(const std::string& name, BasicTensor<T> init) {
  if (params_.count(name)) throw StructuralError("duplicate parameter name: " + name);
  BasicVar<T> v(std::move(init), trainable_);
  params_.emplace(name, v);
  return v;
}

template <class T>
const BasicVar<T>& BasicParameterSet<T>::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw StructuralError("unknown parameter: " + name);
  return it->second;
}

template <class T>
int64_t BasicParameterSet<T>::numel() const {
  int64_t n = 0;
  for (const auto& [_, v] : params_) n += v.numel();
  return n;
}

template <class T>
void BasicParameterSet<T>::set_role(Role r) {
  role_ = r;
  if (r == Role::Teacher) set_trainable(false);
}

template <class T>
void BasicParameterSet<T>::set_trainable(bool on) {
  if (on && role_ == Role::Teacher) throw UsageError("teacher parameter sets cannot be trainable");
  trainable_ = on;
  for (auto& [_, v] : params_) {
    v.node()->requires_grad = on;
    if (!on) v.node()->grad = BasicTensor<T>();
  }
}

template <class T>
void BasicParameterSet<T>::zero_grad() {
  for (auto& [_, v] : params_) v.node()->grad = BasicTensor<T>();
}

template <class T>
bool BasicParameterSet<T>::any_grad() const {
  for (const auto& [_, v] : params_)
    if (v.has_grad()) return true;
  return false;
}

template <class T>
void BasicParameterSet<T>::copy_values_from(const BasicParameterSet& src,
                                            std::string_view src_prefix,
                                            std::string_view dst_prefix) {
  for (auto& [name, v] : params_) {
    if (name.compare(0, dst_prefix.size(), dst_prefix) != 0) continue;
    const std::string src_name = std::string(src_prefix) + name.substr(dst_prefix.size());
    if (!src.contains(src_name))
      throw StructuralError("architecture mismatch: source lacks parameter " + src_name);
    const auto& sv = src.at(src_name);
    if (sv.shape() != v.shape())
      throw StructuralError("architecture mismatch: shape of " + src_name + " is " +
                            shape_str(sv.shape()) + ", expected " + shape_str(v.shape()));
    v.node()->value = sv.value();
  }
}

template <class T>
void BasicParameterSet<T>::zero_values(std::string_view prefix) {
  for (auto& [name, v] : params_)
    if (name.compare(0, prefix.size(), prefix) == 0) v.node()->value.fill(T{0});
}

template <class T>
uint64_t BasicParameterSet<T>::hash() const {
  uint64_t h = 1469598103934665603ull;
  auto feed = [&h](const void* p, size_t n) {
    const auto* b = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) {
      h ^= b[i];
      h *= 1099511628211ull;
    }
  };
  for (const auto& [name, v] : params_) {
    feed(name.data(), name.size());
    for (int64_t d : v.shape()) feed(&d, sizeof d);
    feed(v.value().ptr(), sizeof(T) * static_cast<size_t>(v.numel()));
  }
  return h;
}

template <class T>
std::map<std::string, BasicTensor<T>> BasicParameterSet<T>::snapshot() const {
  std::map<std::string, BasicTensor<T>> out;
  for (const auto& [name, v] : params_) out.emplace(name, v.value());
  return out;
}

template <class T>
void BasicParameterSet<T>::load(const std::map<std::string, BasicTensor<T>>& values) {
  if (values.size() != params_.size())
    throw StructuralError("checkpoint has " + std::to_string(values.size()) +
                          " tensors, network expects " + std::to_string(params_.size()));
  for (auto& [name, v] : params_) {
    auto it = values.find(name);
    if (it == values.end()) throw StructuralError("checkpoint lacks parameter " + name);
    if (it->second.shape() != v.shape())
      throw StructuralError("checkpoint shape mismatch for " + name + ": " +
                            shape_str(it->second.shape()) + " vs " + shape_str(v.shape()));
    v.node()->value = it->second;
  }
}

template <class T>
void require_no_grad(const BasicParameterSet<T>& ps, std::string_view what) {
  for (const auto& [name, v] : ps)
    if (v.has_grad())
      throw InvariantViolation("gradient reached frozen " + std::string(what) + " parameter " +
                               name);
}

template class BasicParameterSet<float>;
template class BasicParameterSet<double>;
template void require_no_grad(const BasicParameterSet<float>&, std::string_view);
template void require_no_grad(const BasicParameterSet<double>&, std::string_view);

}  // namespace ccm
