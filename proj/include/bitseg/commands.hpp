#pragma once

#include "bitseg/checkpoint.hpp"
#include "bitseg/metrics.hpp"
#include "bitseg/run_config.hpp"
#include "bitseg/training.hpp"

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace bitseg {

namespace fs = std::filesystem;

/// Dataset directory (manifest + files) grouped into per-index sequences,
/// frames in order.
struct Dataset {
    std::vector<Sequence> sequences;
    std::vector<std::uint64_t> indices;             // scene index per sequence
    std::vector<std::vector<ManifestEntry>> entries; // per sequence, per frame
};
Dataset load_dataset(const fs::path& dir);

/// Parameters used for sampling: EMA or raw weights.
template <typename T>
ParamStore<T> sampling_params(const TrainState<T>& state, bool use_ema);

/// One image through the sampler, small instances removed. `past` holds the
/// previous predicted masks, most recent first. Recorded trajectory entries
/// are decoded without filtering.
struct Segmentation {
    PanopticMask mask;
    std::vector<std::pair<int, PanopticMask>> trajectory;
};

template <typename T>
Segmentation segment_image(const BoundNet<T>& net, const Image& image, const SamplerConfig& sampler, int min_pixels,
                           std::span<const PanopticMask> past = {}, std::span<const int> record_steps = {});

/// Masks for every frame of every sequence. Nets with past frames run each
/// sequence as a stream: steps_first for frame 0, steps_rest afterwards,
/// conditioned on earlier predictions. Nets without past frames segment each
/// frame independently with sampler.steps. Seeds derive from
/// (sampler.seed, sequence index, frame).
template <typename T>
std::vector<std::vector<PanopticMask>> predict(const NetConfig& net, const ParamStore<T>& params, std::span<const Sequence> data,
                                               std::span<const std::uint64_t> indices, const SampleOptions& opt);

/// One sequence of predict(), keeping the requested trajectory estimates.
template <typename T>
std::vector<Segmentation> segment_sequence(const BoundNet<T>& net, const Sequence& seq, std::uint64_t index, const SampleOptions& opt,
                                           std::span<const int> record_steps = {});

std::vector<PanopticMask> flatten(const std::vector<std::vector<PanopticMask>>& seqs);
std::vector<PanopticMask> gt_masks(std::span<const Sequence> data);

// ---- gendata ----
struct GendataOptions {
    fs::path out;
    Split split = Split::train;
    std::optional<std::size_t> size; // default: data.train_size / val_size
    bool video = false;
    bool png = false;
};
void cmd_gendata(const RunConfig& cfg, const GendataOptions& opt, std::ostream& log);

// ---- train ----
struct TrainOptions {
    fs::path data;
    fs::path out;
    std::optional<fs::path> resume;     // continue a run from its checkpoint
    std::optional<fs::path> init_from;  // image checkpoint for video fine-tuning
    int past_frames = 2;                // with init_from
    bool quiet = false;
};
struct TrainSummary {
    fs::path checkpoint;
    std::int64_t steps = 0;
    double final_loss = 0;
    double seconds = 0;
};
TrainSummary cmd_train(const RunConfig& cfg, const TrainOptions& opt, std::ostream& log);

/// Rows of a training log: (step, loss).
std::vector<std::pair<std::int64_t, double>> read_loss_log(const fs::path& csv);

// ---- sample ----
struct SampleCmdOptions {
    fs::path checkpoint;
    fs::path data;
    fs::path out;
    std::vector<int> dump_steps; // trajectory steps to write
    bool png = true;
    std::optional<std::size_t> limit; // first N sequences
};
void cmd_sample(const RunConfig& cfg, const SampleCmdOptions& opt, std::ostream& log);

// ---- eval ----
enum class EvalMode { pq, jf, track };
EvalMode parse_eval_mode(const std::string& s);

struct EvalOptions {
    fs::path pred;
    fs::path gt;
    EvalMode mode = EvalMode::pq;
    std::optional<fs::path> out; // writes report.csv and report.txt here
};
Report cmd_eval(const RunConfig& cfg, const EvalOptions& opt, std::ostream& log);

Report pq_report(const PQResult& r, const SceneConfig& scene);
Report video_report(std::span<const std::vector<PanopticMask>> preds, std::span<const std::vector<PanopticMask>> gts, int radius,
                    bool with_track);

// ---- ablate ----
struct AblateOptions {
    std::string grid; // b, loss, p, steps, td, min_pixels
    std::vector<std::string> values; // default grid when empty
    fs::path train_data;
    fs::path val_data;
    fs::path out;
    std::optional<fs::path> base_checkpoint; // inference grids; trained when absent
};
struct AblateResult {
    Report report;
    std::string trend;
};
std::vector<std::string> default_grid(const std::string& grid);
bool is_training_grid(const std::string& grid);
AblateResult cmd_ablate(const RunConfig& cfg, const AblateOptions& opt, std::ostream& log);

/// Describes how PQ moves along the grid: increasing, decreasing, peaked or flat.
std::string describe_trend(const std::vector<std::string>& labels, const std::vector<double>& values);

} // namespace bitseg
