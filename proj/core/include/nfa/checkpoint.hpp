#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "nfa/tensor.hpp"

namespace nfa {

/// Checkpoint container: "NFA1" magic inside a one-line JSON header followed
/// by the little-endian float32 parameter payload in declared order.
struct Checkpoint {
  std::string architecture;
  nlohmann::json config;       ///< architecture constants (L, C, width, omega0, ...)
  std::uint64_t seed = 0;
  std::vector<std::string> names;
  std::vector<TensorF> params;
};

void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

/// SHA-256 of the float32 payload exactly as serialized; the freeze checksum
/// used to prove inference never touches shared weights.
std::string params_sha256(const std::vector<TensorF>& params);

template <typename S>
std::vector<TensorF> to_f32(const std::vector<Tensor<S>>& params) {
  std::vector<TensorF> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.template cast<float>());
  return out;
}

template <typename S>
std::vector<Tensor<S>> from_f32(const std::vector<TensorF>& params) {
  std::vector<Tensor<S>> out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back(p.template cast<S>());
  return out;
}

}  // namespace nfa
