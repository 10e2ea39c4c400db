#pragma once

// Binary checkpoint, little-endian throughout:
//   "TFNCKPT\0"  u32 version
//   u32 count, then count x (string key, string value)      config snapshot
//   u64 step, string rng_state
//   u32 count, then count x tensor                            parameters
//   u64 optimizer steps, u32 count, then count x tensor       Adam m, then v
// string = u32 length + bytes; tensor = string name, u32 rank, rank x u64 dim,
// prod(dims) x f32.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "teaforn/optimizer.h"
#include "teaforn/transformer.h"

namespace teaforn {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TensorRecord {
    std::string name;
    Shape shape;
    std::vector<float> values;

    bool operator==(const TensorRecord &) const = default;
};

struct Checkpoint {
    std::uint32_t version = kCheckpointVersion;
    std::map<std::string, std::string> config;
    std::uint64_t step = 0;
    std::string rng_state;
    std::vector<TensorRecord> parameters;
    std::uint64_t optimizer_steps = 0;
    std::vector<TensorRecord> optimizer_state;  // "<name>.m" for all parameters, then "<name>.v"

    const TensorRecord *find(std::string_view name) const;
};

std::vector<TensorRecord> snapshot_parameters(const Seq2Seq<float> &model);
// Copies values into the model's parameters. Names, count and shapes must match.
void restore_parameters(Seq2Seq<float> &model, std::span<const TensorRecord> records);

std::vector<TensorRecord> snapshot_optimizer(const Adam &adam, const Seq2Seq<float> &model);
void restore_optimizer(Adam &adam, std::uint64_t steps, std::span<const TensorRecord> records,
                       const Seq2Seq<float> &model);

void save_checkpoint(const std::filesystem::path &path, const Checkpoint &checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path &path);

std::string serialize_checkpoint(const Checkpoint &checkpoint);
Checkpoint deserialize_checkpoint(std::string_view bytes);

// Elementwise mean of the parameters of the last `last_m` checkpoints (in
// double, rounded once). Metadata comes from the newest checkpoint; optimizer
// state is dropped.
Checkpoint average_checkpoints(std::span<const Checkpoint> trail, std::size_t last_m);

}  // namespace teaforn
