#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "trackemb/image.hpp"

namespace trackemb {

struct InterestPoint {
    float x = 0;
    float y = 0;
    float score = 0;
};

struct PointFlow {
    InterestPoint point;
    float dx = 0;
    float dy = 0;
    bool valid = false;
};

// 3x3 projective transform, normalized so m[8] == 1.
struct Homography {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Homography identity() { return {}; }
    std::pair<double, double> apply(double x, double y) const;
    double determinant() const;
    void normalize();
};

enum class MotionLabel { Moving, Static, Invalid };
enum class GateVerdict { Accept, RejectTooFew, RejectTooMany };

struct FrameGate {
    double moving_fraction = 0;
    GateVerdict verdict = GateVerdict::Accept;
};

struct HarrisOptions {
    float k = 0.04f;
    int nms_radius = 3;
    float rel_threshold = 0.01f;  // keep responses above this fraction of the max
};

std::vector<InterestPoint> detect_interest_points(const Frame& frame, int max_n,
                                                  const HarrisOptions& opts = {});

struct LkOptions {
    int levels = 3;
    int window = 15;  // odd
    int iters = 10;
    float eps = 0.01f;  // convergence, pixels
};

std::vector<PointFlow> lk_flow(const Frame& prev, const Frame& next,
                               const std::vector<InterestPoint>& points,
                               const LkOptions& opts = {});

struct RansacResult {
    Homography h;
    std::vector<char> inliers;  // per-match mask
    int inlier_count = 0;
};

using PointMatch = std::pair<std::pair<double, double>, std::pair<double, double>>;

RansacResult estimate_homography_ransac(const std::vector<PointMatch>& matches, int iters,
                                        double inlier_tol, uint64_t seed);

// Least-squares homography via normalized DLT; used by RANSAC refit and tests.
Homography fit_homography_dlt(const std::vector<PointMatch>& matches);

std::vector<PointFlow> residual_flow(const std::vector<PointFlow>& flows, const Homography& h);

std::vector<MotionLabel> classify_moving(const std::vector<PointFlow>& residuals,
                                         double threshold = 0.5);

FrameGate gate_frame(const std::vector<MotionLabel>& labels, double low = 0.25,
                     double high = 0.75);

// JSONL, one record per point: {"x","y","dx","dy","valid","label"}
void write_flow_debug(const std::vector<PointFlow>& flows, const std::vector<MotionLabel>& labels,
                      const std::filesystem::path& path);

}  // namespace trackemb
