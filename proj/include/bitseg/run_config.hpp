#pragma once

#include "bitseg/denoiser.hpp"
#include "bitseg/diffusion.hpp"
#include "bitseg/scenes.hpp"
#include "bitseg/training.hpp"

#include <json.hpp>

#include <filesystem>
#include <span>
#include <string>

namespace bitseg {

enum class Precision { f32, f64 };

struct SampleOptions {
    SamplerConfig sampler;
    int min_pixels = 10; // instances smaller than this become null
    int steps_first = 32; // video: first frame
    int steps_rest = 8;   // video: later frames
    bool use_ema = true;
    bool operator==(const SampleOptions&) const = default;
};

struct MetricOptions {
    int boundary_radius = -1; // -1: derive from the image diagonal
    bool operator==(const MetricOptions&) const = default;
};

struct DataOptions {
    std::size_t train_size = 2000;
    std::size_t val_size = 200;
    bool operator==(const DataOptions&) const = default;
};

/// Everything a command needs. The JSON form has sections scene, video,
/// data, net, train, sample, metrics plus top-level output_dir, precision
/// and threads. Codec settings are read from the train section; C and K come
/// from the scene.
struct RunConfig {
    SceneConfig scene;
    VideoConfig video;
    DataOptions data;
    NetConfig net;
    TrainConfig train;
    SampleOptions sample;
    MetricOptions metrics;
    std::string output_dir = "runs";
    Precision precision = Precision::f32;
    int threads = 0; // 0: hardware concurrency

    bool operator==(const RunConfig&) const = default;
};

/// Copies C and K from the scene into the net config.
void resolve(RunConfig& cfg);
void validate(const RunConfig& cfg);

nlohmann::ordered_json to_json(const RunConfig& cfg);
/// Missing keys keep their defaults; unknown keys and wrong types throw
/// std::invalid_argument naming the offending key.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);

/// Applies "section.key=value" overrides; the value is parsed as JSON when
/// it is valid JSON and taken as a string otherwise.
RunConfig with_overrides(const RunConfig& cfg, std::span<const std::string> overrides);

std::string to_string(LossKind k);
LossKind parse_loss(const std::string& s);
std::string to_string(Precision p);
Precision parse_precision(const std::string& s);

} // namespace bitseg
