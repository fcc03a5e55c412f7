#pragma once

#include "bitseg/run_config.hpp"
#include "bitseg/training.hpp"

#include <filesystem>

namespace bitseg {

// "BPCK" file: magic, u32 version, u32 length + JSON blob (run config, step),
// u32 tensor count, then per tensor: u32 name length, name, u8 dtype
// (0 = f32, 1 = f64), u32 rank, u32 dims, raw little-endian values.
// Tensors are named param/<p>, ema/<p>, adam_m/<p> and adam_v/<p>.

template <typename T>
struct Checkpoint {
    RunConfig config; // net and train sections describe the saved state
    TrainState<T> state;
};

/// Writes atomically (temporary file + rename).
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const TrainState<T>& state, const RunConfig& run);

/// Throws CheckpointError on a malformed file or a precision mismatch.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

/// Precision the checkpoint was saved at.
Precision checkpoint_precision(const std::filesystem::path& path);

/// The run config embedded in a checkpoint.
RunConfig load_checkpoint_config(const std::filesystem::path& path);

class CheckpointError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace bitseg
