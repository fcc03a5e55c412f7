#pragma once

#include "bitseg/image.hpp"
#include "bitseg/panoptic_mask.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace bitseg {

enum class ShapeKind { rectangle, disk, triangle };

struct ClassSpec {
    std::string name;
    bool thing = false;
    std::array<float, 3> color{0.f, 0.f, 0.f};
    bool operator==(const ClassSpec&) const = default;
};

/// Class 0 is always the null class. Stuff classes fill the background;
/// thing classes are drawn as shapes.
struct SceneConfig {
    int height = 64;
    int width = 64;
    int max_instances = 8; // K
    std::vector<ClassSpec> classes = default_classes();
    // class id drawn for each shape kind; 0 disables the kind
    std::array<int, 3> shape_class{4, 3, 4}; // rectangle, disk, triangle
    int min_shapes = 1;
    int max_shapes = 5;
    int min_size = 10;
    int max_size = 20;
    int max_stuff_regions = 2;
    double min_visible = 0.5; // fraction of each shape left uncovered by later shapes
    double color_jitter = 0.12;
    double pixel_noise = 0.03;
    std::uint64_t seed = 0;

    int num_classes() const { return static_cast<int>(classes.size()); }
    std::vector<bool> thing_flags() const;
    static std::vector<ClassSpec> default_classes();

    bool operator==(const SceneConfig&) const = default;
};

struct VideoConfig {
    int frames = 8;
    double max_speed = 2.0; // pixels per frame along each axis
    bool occlusion = true;
    bool operator==(const VideoConfig&) const = default;
};

void validate(const SceneConfig& cfg);
void validate(const VideoConfig& cfg);

struct SceneSample {
    Image image;
    PanopticMask mask;
};

struct VideoSample {
    std::vector<Image> frames;
    std::vector<PanopticMask> masks;
    // identity[f][id] = object index for instance id `id` in frame f, or -1
    std::vector<std::vector<int>> identity;
};

/// Deterministic in (cfg.seed, index).
SceneSample gen_scene(const SceneConfig& cfg, std::uint64_t index);
VideoSample gen_video(const SceneConfig& cfg, const VideoConfig& vcfg, std::uint64_t index);

enum class Split { train, val };
Split parse_split(const std::string& s);
std::string split_name(Split s);

/// Scene indices for a split. Train and val draw from disjoint ranges.
std::vector<std::uint64_t> split_indices(Split split, std::size_t size);

struct ManifestEntry {
    std::uint64_t index = 0;
    int frame = 0;
    std::string image; // relative to the manifest directory
    std::string mask;
};

/// Writes `size` samples (or videos when vcfg is set) of `split` under dir,
/// plus manifest.txt with one line per image: index frame image mask.
void write_dataset(const SceneConfig& cfg, const std::optional<VideoConfig>& vcfg, Split split, std::size_t size,
                   const std::filesystem::path& dir, bool png_previews = false);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& dir);
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& dir);

} // namespace bitseg
