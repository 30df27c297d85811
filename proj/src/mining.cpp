#include "trackemb/mining.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>

namespace fs = std::filesystem;
using nlohmann::json;

namespace trackemb {

void MinerConfig::validate() const {
    if (flow_threshold <= 0) throw std::invalid_argument("miner config: flow_threshold must be > 0");
    if (!(gate_low >= 0 && gate_low < gate_high && gate_high <= 1))
        throw std::invalid_argument("miner config: need 0 <= gate_low < gate_high <= 1");
    if (window_h < 1 || window_w < 1 || stride < 1 || track_len < 1 || search_radius < 1 ||
        patch_side < 1 || max_pairs_per_video < 1 || flow_step < 1)
        throw std::invalid_argument("miner config: all sizes must be positive");
}

std::optional<BBox> best_window(const std::vector<std::pair<float, float>>& moving_points,
                                int frame_h, int frame_w, int win_h, int win_w, int stride) {
    if (win_h > frame_h || win_w > frame_w)
        throw std::invalid_argument("best_window: window larger than frame");
    if (stride < 1) throw std::invalid_argument("best_window: stride must be >= 1");
    if (moving_points.empty()) return std::nullopt;

    int best = -1;
    BBox best_box;
    for (int y = 0; y + win_h <= frame_h; y += stride) {
        for (int x = 0; x + win_w <= frame_w; x += stride) {
            int count = 0;
            for (const auto& [px, py] : moving_points)
                if (px >= x && px <= x + win_w && py >= y && py <= y + win_h) ++count;
            if (count > best) {  // scan order realizes the (y, x) tie-break
                best = count;
                best_box = {x, y, win_w, win_h};
            }
        }
    }
    return best_box;
}

namespace {

// zero-normalized cross-correlation; -2 when either side is textureless
double zncc(const Image& a, const Image& b) {
    double ma = 0, mb = 0;
    const size_t n = a.size();
    for (size_t i = 0; i < n; ++i) {
        ma += a.px[i];
        mb += b.px[i];
    }
    ma /= double(n);
    mb /= double(n);
    double num = 0, va = 0, vb = 0;
    for (size_t i = 0; i < n; ++i) {
        double da = a.px[i] - ma, db = b.px[i] - mb;
        num += da * db;
        va += da * da;
        vb += db * db;
    }
    if (va < 1e-12 || vb < 1e-12) return -2.0;
    return num / std::sqrt(va * vb);
}

struct Step {
    BBox box;
    bool pinned = false;  // argmax sat on a frame-bound-clipped search edge
};

Step track_step(const Frame& from, const Frame& to, const BBox& box, int radius) {
    Image tmpl = crop(from, box);
    const int lo_dy = std::max(-radius, -box.y);
    const int hi_dy = std::min(radius, to.h - box.h - box.y);
    const int lo_dx = std::max(-radius, -box.x);
    const int hi_dx = std::min(radius, to.w - box.w - box.x);

    int best_dy = 0, best_dx = 0;
    double best = zncc(tmpl, crop(to, box));
    for (int dy = lo_dy; dy <= hi_dy; ++dy) {
        for (int dx = lo_dx; dx <= hi_dx; ++dx) {
            if (dy == 0 && dx == 0) continue;
            double s = zncc(tmpl, crop(to, {box.x + dx, box.y + dy, box.w, box.h}));
            if (s > best) {
                best = s;
                best_dy = dy;
                best_dx = dx;
            }
        }
    }
    Step st;
    st.box = {box.x + best_dx, box.y + best_dy, box.w, box.h};
    st.pinned = (best_dy == lo_dy && lo_dy != -radius) || (best_dy == hi_dy && hi_dy != radius) ||
                (best_dx == lo_dx && lo_dx != -radius) || (best_dx == hi_dx && hi_dx != radius);
    return st;
}

}  // namespace

TrackResult track_box(const std::vector<Frame>& frames, const BBox& start, int track_len,
                      int search_radius) {
    if (frames.size() < 2) throw std::invalid_argument("track_box: need at least 2 frames");
    if (track_len < 1) throw std::invalid_argument("track_box: track_len must be >= 1");
    if (!start.inside(frames[0].h, frames[0].w))
        throw std::invalid_argument("track_box: start box out of bounds");

    TrackResult res;
    res.boxes.push_back(start);
    const int steps = std::min<int>(track_len, int(frames.size()) - 1);
    for (int t = 0; t < steps; ++t) {
        Step st = track_step(frames[t], frames[t + 1], res.boxes.back(), search_radius);
        if (st.pinned) {
            res.truncated = true;
            break;
        }
        res.boxes.push_back(st.box);
    }
    return res;
}

std::vector<TrackedPair> mine_video(const std::vector<Frame>& frames, const std::string& video_id,
                                    const MinerConfig& cfg, uint64_t seed) {
    cfg.validate();
    if (int(frames.size()) < cfg.track_len + 1)
        throw std::invalid_argument("mine_video: sequence shorter than track_len+1 frames");

    const int hop = cfg.candidate_hop > 0 ? cfg.candidate_hop : cfg.track_len;
    std::vector<TrackedPair> pairs;

    for (int t = 0; t + cfg.track_len < int(frames.size()); t += hop) {
        if (int(pairs.size()) >= cfg.max_pairs_per_video) break;
        if (t + cfg.flow_step >= int(frames.size())) break;

        auto points = detect_interest_points(frames[t], cfg.max_interest_points);
        if (points.size() < 4) continue;
        auto flows = lk_flow(frames[t], frames[t + cfg.flow_step], points);

        std::vector<PointMatch> matches;
        for (const auto& f : flows)
            if (f.valid)
                matches.push_back({{f.point.x, f.point.y}, {f.point.x + f.dx, f.point.y + f.dy}});
        if (matches.size() < 4) continue;

        std::vector<PointFlow> residuals;
        try {
            auto ransac = estimate_homography_ransac(matches, cfg.ransac_iters, cfg.ransac_tol,
                                                     seed + uint64_t(t) * 0x9e3779b97f4a7c15ull);
            residuals = residual_flow(flows, ransac.h);
        } catch (const std::exception&) {
            continue;  // stabilization failed, frame unusable
        }

        auto labels = classify_moving(residuals, cfg.flow_threshold);
        FrameGate gate;
        try {
            gate = gate_frame(labels, cfg.gate_low, cfg.gate_high);
        } catch (const std::invalid_argument&) {
            continue;
        }
        if (gate.verdict != GateVerdict::Accept) continue;

        std::vector<std::pair<float, float>> moving;
        for (size_t i = 0; i < labels.size(); ++i)
            if (labels[i] == MotionLabel::Moving) moving.push_back({flows[i].point.x, flows[i].point.y});

        auto box = best_window(moving, frames[t].h, frames[t].w, cfg.window_h, cfg.window_w,
                               cfg.stride);
        if (!box) continue;

        std::vector<Frame> clip(frames.begin() + t, frames.end());
        TrackResult tr = track_box(clip, *box, cfg.track_len, cfg.search_radius);
        if (tr.truncated || int(tr.boxes.size()) != cfg.track_len + 1) continue;

        pairs.push_back({video_id, frames[t].index, *box, frames[t + cfg.track_len].index,
                         tr.boxes.back()});
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// manifest

namespace {

json box_to_json(const BBox& b) { return json::array({b.x, b.y, b.w, b.h}); }

BBox box_from_json(const json& j) {
    if (!j.is_array() || j.size() != 4) throw std::runtime_error("manifest: malformed bbox");
    return {j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

std::string patch_name(const TrackedPair& p, char which) {
    std::ostringstream os;
    os << p.video_id << "_" << (which == 'a' ? p.first_frame : p.last_frame) << "_"
       << p.first_frame << "_" << which << ".grid";
    return os.str();
}

}  // namespace

int write_manifest(const std::vector<TrackedPair>& pairs, const FrameSource& frames,
                   int patch_side, const fs::path& patches_dir, const fs::path& manifest_path) {
    fs::create_directories(patches_dir);
    if (manifest_path.has_parent_path()) fs::create_directories(manifest_path.parent_path());

    std::vector<TrackedPair> sorted = pairs;
    std::sort(sorted.begin(), sorted.end(), [](const TrackedPair& a, const TrackedPair& b) {
        return std::tie(a.video_id, a.first_frame) < std::tie(b.video_id, b.first_frame);
    });

    std::ofstream mf(manifest_path, std::ios::trunc);
    if (!mf) throw std::runtime_error("write_manifest: cannot open " + manifest_path.string());

    int count = 0;
    for (const auto& p : sorted) {
        const Frame& fa = frames(p.video_id, p.first_frame);
        const Frame& fb = frames(p.video_id, p.last_frame);
        Patch pa = extract_patch(fa, p.first_box, patch_side, p.video_id);
        Patch pb = extract_patch(fb, p.last_box, patch_side, p.video_id);

        std::string na = patch_name(p, 'a'), nb = patch_name(p, 'b');
        Image grid(patch_side, patch_side);
        grid.px = pa.px;
        write_rawgrid(grid, patches_dir / na);
        grid.px = pb.px;
        write_rawgrid(grid, patches_dir / nb);

        fs::path rel = fs::relative(patches_dir, manifest_path.parent_path().empty()
                                                    ? fs::path(".")
                                                    : manifest_path.parent_path());
        nlohmann::ordered_json rec = {
            {"video_id", p.video_id},    {"frame_a", p.first_frame},
            {"bbox_a", box_to_json(p.first_box)}, {"frame_b", p.last_frame},
            {"bbox_b", box_to_json(p.last_box)},  {"patch_a", (rel / na).generic_string()},
            {"patch_b", (rel / nb).generic_string()}};
        mf << rec.dump() << "\n";
        ++count;
    }
    if (!mf) throw std::runtime_error("write_manifest: write failed for " + manifest_path.string());
    return count;
}

std::vector<ManifestRecord> read_manifest(const fs::path& manifest_path) {
    std::ifstream mf(manifest_path);
    if (!mf) throw std::runtime_error("read_manifest: cannot open " + manifest_path.string());
    std::vector<ManifestRecord> records;
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        ManifestRecord r;
        r.video_id = j.at("video_id").get<std::string>();
        r.frame_a = j.at("frame_a").get<int>();
        r.bbox_a = box_from_json(j.at("bbox_a"));
        r.frame_b = j.at("frame_b").get<int>();
        r.bbox_b = box_from_json(j.at("bbox_b"));
        r.patch_a = j.at("patch_a").get<std::string>();
        r.patch_b = j.at("patch_b").get<std::string>();
        records.push_back(std::move(r));
    }
    return records;
}

}  // namespace trackemb
