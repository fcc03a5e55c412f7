#pragma once

#include "bitseg/panoptic_mask.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace bitseg {

struct MatchedPair {
    SegmentKey gt;
    SegmentKey pred;
    double iou = 0.0;
};

struct SegmentMatch {
    std::vector<MatchedPair> pairs;
    std::vector<SegmentKey> unmatched_gt;
    std::vector<SegmentKey> unmatched_pred;
};

/// All same-class (pred, gt) segment pairs with IoU > 0.5. Such pairs are
/// unique per segment, so no assignment step is needed. Null-class pixels
/// belong to no segment. Throws std::invalid_argument on size mismatch.
SegmentMatch match_segments(const PanopticMask& pred, const PanopticMask& gt);

/// Sets the instance id of stuff-class pixels to 0 so that each stuff class
/// forms one segment per image.
PanopticMask canonicalize_stuff(const PanopticMask& mask, const std::vector<bool>& thing);

struct ClassStats {
    std::int64_t tp = 0, fp = 0, fn = 0;
    double iou_sum = 0.0;
    bool defined() const { return tp + fp + fn > 0; }
    double pq() const;
};

struct PQResult {
    double pq = 0.0, pq_thing = 0.0, pq_stuff = 0.0;
    std::vector<ClassStats> per_class; // index = class id; entry 0 unused
};

/// Accumulates per-class stats over the pairs and averages PQ over classes
/// with any gt or pred segment. `thing[c]` marks thing classes.
PQResult panoptic_quality(std::span<const PanopticMask> preds, std::span<const PanopticMask> gts, const std::vector<bool>& thing);

/// Binary mask of pixels with the given instance id.
std::vector<std::uint8_t> object_mask(const PanopticMask& mask, std::uint16_t instance);

double jaccard(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);

/// Foreground pixels with a 4-neighbour inside the image that is background.
std::vector<std::uint8_t> boundary_pixels(std::span<const std::uint8_t> mask, int height, int width);

/// Boundary F-measure with tolerance disk radius r. Both boundaries empty
/// scores 1; exactly one empty scores 0.
double boundary_f(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, int height, int width, int radius);

/// ceil(0.008 * image diagonal)
int default_boundary_radius(int height, int width);

struct VideoJF {
    double j_mean = 0.0, j_recall = 0.0, f_mean = 0.0, f_recall = 0.0;
    int objects = 0;
};

/// Objects are nonzero instance ids. Predicted ids are assigned to gt objects
/// over the whole video by maximum mean J (Hungarian). Per-object scores are
/// averaged over frames, then over objects; a frame where both masks are empty
/// scores 1. Recall is the fraction of frames scoring above 0.5. A video with
/// no gt objects scores 1 if no objects were predicted either, else 0.
VideoJF jaccard_and_f(std::span<const PanopticMask> pred, std::span<const PanopticMask> gt, int radius);

/// Convenience: J-mean only.
double jaccard_mean(std::span<const PanopticMask> pred, std::span<const PanopticMask> gt);

struct TrackCount {
    std::int64_t consistent = 0;
    std::int64_t transitions = 0;
    double fraction() const { return transitions == 0 ? 1.0 : static_cast<double>(consistent) / static_cast<double>(transitions); }
};

/// For each gt object and frame, the predicted instance id with the highest
/// IoU (none if nothing overlaps). A transition between adjacent frames where
/// the object is present in both counts as consistent when the mapped id is
/// the same and not none.
TrackCount track_consistency(std::span<const PanopticMask> pred, std::span<const PanopticMask> gt);

/// Minimum-cost assignment on a rows x cols matrix (row-major). Returns the
/// column for each row, -1 when rows > cols leaves a row unassigned.
std::vector<int> hungarian(const std::vector<double>& cost, int rows, int cols);

/// Small table that renders as CSV or aligned text.
struct Report {
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> rows;

    std::string to_csv() const;
    std::string to_table() const;
};

std::string format_metric(double v, int decimals = 4);

} // namespace bitseg
