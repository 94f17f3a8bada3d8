#pragma once

#include <string>

#include "msgt/arch.hpp"

namespace msgt {

// Layout: "MSGT", u32 version (1), u32 tensor count, then per tensor a u16
// name length, the UTF-8 name, a u8 rank, u32 extents and float32 values.
// Integers and floats are little-endian.
inline constexpr std::uint32_t kCheckpointVersion = 1;

template <typename Scalar>
void save_checkpoint(const ModelParams<Scalar>& model, const std::string& path);

// Overwrites the parameters of `model` in place. Names, order and shapes must
// match its configuration exactly.
template <typename Scalar>
void load_checkpoint(ModelParams<Scalar>& model, const std::string& path);

template <typename Scalar>
ModelParams<Scalar> load_checkpoint(const ArchConfig& cfg, const std::string& path);

// Independent copy with the same values.
template <typename Scalar>
ModelParams<Scalar> clone_model(const ModelParams<Scalar>& model);

}  // namespace msgt
