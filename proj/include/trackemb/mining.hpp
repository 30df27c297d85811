#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "trackemb/image.hpp"
#include "trackemb/motion.hpp"

namespace trackemb {

struct MinerConfig {
    double flow_threshold = 0.5;  // px, strict "more than"
    double gate_low = 0.25;
    double gate_high = 0.75;
    int window_h = 32;
    int window_w = 32;
    int stride = 4;
    int track_len = 30;       // frames tracked after the start frame
    int candidate_hop = 0;    // start-frame spacing; 0 means track_len
    int max_pairs_per_video = 8;
    int search_radius = 8;    // NCC tracker, px
    int patch_side = 32;      // network input side for materialized patches
    int max_interest_points = 200;
    int ransac_iters = 500;
    double ransac_tol = 1.0;
    int flow_step = 1;        // frame gap for flow estimation

    void validate() const;
};

struct TrackedPair {
    std::string video_id;
    int first_frame = 0;
    BBox first_box;
    int last_frame = 0;
    BBox last_box;

    bool operator==(const TrackedPair&) const = default;
};

std::optional<BBox> best_window(const std::vector<std::pair<float, float>>& moving_points,
                                int frame_h, int frame_w, int win_h, int win_w, int stride);

struct TrackResult {
    std::vector<BBox> boxes;  // trajectory, boxes[0] == start
    bool truncated = false;
};

TrackResult track_box(const std::vector<Frame>& frames, const BBox& start, int track_len,
                      int search_radius);

std::vector<TrackedPair> mine_video(const std::vector<Frame>& frames, const std::string& video_id,
                                    const MinerConfig& cfg, uint64_t seed);

struct ManifestRecord {
    std::string video_id;
    int frame_a = 0;
    BBox bbox_a;
    int frame_b = 0;
    BBox bbox_b;
    std::string patch_a;  // relative to the manifest directory
    std::string patch_b;

    bool operator==(const ManifestRecord&) const = default;
};

using FrameSource = std::function<const Frame&(const std::string& video_id, int frame_index)>;

int write_manifest(const std::vector<TrackedPair>& pairs, const FrameSource& frames,
                   int patch_side, const std::filesystem::path& patches_dir,
                   const std::filesystem::path& manifest_path);

std::vector<ManifestRecord> read_manifest(const std::filesystem::path& manifest_path);

}  // namespace trackemb
