#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>

#include "fever/train/trainer.hpp"

namespace fever::train {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Layout, all integers little-endian:
//   "FEVR" | u32 version | u32 n + n bytes of ModelConfig::to_text()
//   | u32 array count | per array: u32 n + name, u8 dtype (1 f32, 2 f64, 3 u64, 4 u8),
//     u32 rank, u64 dims[rank], row-major payload
// Array names: param/<p>, buffer/<b>, and for resumable checkpoints velocity/<p>,
// state/step, state/epoch, state/dropout_rng, state/<stream>/{order,cursor,passes,rng}.
struct Checkpoint {
    models::ModelConfig config;
    NamedArrays<float> params;
    NamedArrays<float> buffers;
    std::optional<TrainState> train;
};

void save_checkpoint(const std::filesystem::path& path, const Network<float>& model,
                     const TrainState* state = nullptr);

// Throws FormatError on bad magic, unsupported version, truncation or unknown arrays.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Rebuilds the network; throws FormatError when arrays disagree with the config.
Network<float> network_from_checkpoint(const Checkpoint& checkpoint);
Network<float> load_network(const std::filesystem::path& path);

}  // namespace fever::train
