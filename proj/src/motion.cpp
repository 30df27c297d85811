#include "trackemb/motion.hpp"

#include <Eigen/Dense>
#include <Eigen/SVD>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>

namespace trackemb {

std::pair<double, double> Homography::apply(double x, double y) const {
    double u = m[0] * x + m[1] * y + m[2];
    double v = m[3] * x + m[4] * y + m[5];
    double s = m[6] * x + m[7] * y + m[8];
    return {u / s, v / s};
}

double Homography::determinant() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
}

void Homography::normalize() {
    if (std::abs(m[8]) < 1e-15) throw std::runtime_error("homography: vanishing scale entry");
    double s = m[8];
    for (double& v : m) v /= s;
}

// ---------------------------------------------------------------------------
// Harris corners

namespace {

// Sobel, normalized to unit-scale gradients.
void sobel(const Image& img, Image& gx, Image& gy) {
    gx = Image(img.h, img.w);
    gy = Image(img.h, img.w);
    for (int r = 1; r < img.h - 1; ++r) {
        for (int c = 1; c < img.w - 1; ++c) {
            float a = img.at(r - 1, c - 1), b = img.at(r - 1, c), d = img.at(r - 1, c + 1);
            float e = img.at(r, c - 1), g = img.at(r, c + 1);
            float h = img.at(r + 1, c - 1), i = img.at(r + 1, c), j = img.at(r + 1, c + 1);
            gx.at(r, c) = ((d + 2 * g + j) - (a + 2 * e + h)) / 8.f;
            gy.at(r, c) = ((h + 2 * i + j) - (a + 2 * b + d)) / 8.f;
        }
    }
}

// separable [1 2 1]/4 smoothing
Image gauss3(const Image& img) {
    Image tmp(img.h, img.w), out(img.h, img.w);
    for (int r = 0; r < img.h; ++r)
        for (int c = 1; c < img.w - 1; ++c)
            tmp.at(r, c) = 0.25f * img.at(r, c - 1) + 0.5f * img.at(r, c) + 0.25f * img.at(r, c + 1);
    for (int r = 1; r < img.h - 1; ++r)
        for (int c = 0; c < img.w; ++c)
            out.at(r, c) = 0.25f * tmp.at(r - 1, c) + 0.5f * tmp.at(r, c) + 0.25f * tmp.at(r + 1, c);
    return out;
}

}  // namespace

std::vector<InterestPoint> detect_interest_points(const Frame& frame, int max_n,
                                                  const HarrisOptions& opts) {
    if (frame.h < 8 || frame.w < 8)
        throw std::invalid_argument("detect_interest_points: frame smaller than 8x8");
    Image gx, gy;
    sobel(frame, gx, gy);
    Image xx(frame.h, frame.w), yy(frame.h, frame.w), xy(frame.h, frame.w);
    for (size_t i = 0; i < frame.size(); ++i) {
        xx.px[i] = gx.px[i] * gx.px[i];
        yy.px[i] = gy.px[i] * gy.px[i];
        xy.px[i] = gx.px[i] * gy.px[i];
    }
    xx = gauss3(xx);
    yy = gauss3(yy);
    xy = gauss3(xy);

    Image resp(frame.h, frame.w);
    float max_resp = 0.f;
    for (int r = 2; r < frame.h - 2; ++r) {
        for (int c = 2; c < frame.w - 2; ++c) {
            float det = xx.at(r, c) * yy.at(r, c) - xy.at(r, c) * xy.at(r, c);
            float tr = xx.at(r, c) + yy.at(r, c);
            float v = det - opts.k * tr * tr;
            resp.at(r, c) = v;
            max_resp = std::max(max_resp, v);
        }
    }
    if (max_resp < 1e-12f) return {};  // flat image

    const float thresh = opts.rel_threshold * max_resp;
    std::vector<InterestPoint> cands;
    for (int r = 2; r < frame.h - 2; ++r)
        for (int c = 2; c < frame.w - 2; ++c)
            if (resp.at(r, c) > thresh)
                cands.push_back({float(c), float(r), resp.at(r, c)});

    std::stable_sort(cands.begin(), cands.end(), [](const InterestPoint& a, const InterestPoint& b) {
        if (a.score != b.score) return a.score > b.score;
        if (a.y != b.y) return a.y < b.y;
        return a.x < b.x;
    });

    // greedy non-max suppression within nms_radius
    std::vector<InterestPoint> kept;
    for (const auto& p : cands) {
        bool suppressed = false;
        for (const auto& q : kept) {
            if (std::abs(p.x - q.x) <= opts.nms_radius && std::abs(p.y - q.y) <= opts.nms_radius) {
                suppressed = true;
                break;
            }
        }
        if (!suppressed) {
            kept.push_back(p);
            if (int(kept.size()) >= max_n) break;
        }
    }
    return kept;
}

// ---------------------------------------------------------------------------
// Pyramidal Lucas-Kanade

namespace {

float sample_bilinear(const Image& img, float x, float y) {
    x = std::clamp(x, 0.f, float(img.w - 1));
    y = std::clamp(y, 0.f, float(img.h - 1));
    int x0 = int(x), y0 = int(y);
    int x1 = std::min(x0 + 1, img.w - 1), y1 = std::min(y0 + 1, img.h - 1);
    float fx = x - x0, fy = y - y0;
    return img.at(y0, x0) * (1 - fx) * (1 - fy) + img.at(y0, x1) * fx * (1 - fy) +
           img.at(y1, x0) * (1 - fx) * fy + img.at(y1, x1) * fx * fy;
}

Image downsample2(const Image& img) {
    Image out((img.h + 1) / 2, (img.w + 1) / 2);
    for (int r = 0; r < out.h; ++r) {
        for (int c = 0; c < out.w; ++c) {
            int r0 = 2 * r, c0 = 2 * c;
            int r1 = std::min(r0 + 1, img.h - 1), c1 = std::min(c0 + 1, img.w - 1);
            out.at(r, c) =
                0.25f * (img.at(r0, c0) + img.at(r0, c1) + img.at(r1, c0) + img.at(r1, c1));
        }
    }
    return out;
}

}  // namespace

std::vector<PointFlow> lk_flow(const Frame& prev, const Frame& next,
                               const std::vector<InterestPoint>& points, const LkOptions& opts) {
    if (prev.h != next.h || prev.w != next.w)
        throw std::invalid_argument("lk_flow: frame size mismatch");
    if (opts.levels < 1 || opts.window % 2 == 0)
        throw std::invalid_argument("lk_flow: levels >= 1 and odd window required");

    std::vector<Image> pyr_prev{prev}, pyr_next{next};
    for (int l = 1; l < opts.levels; ++l) {
        if (pyr_prev.back().h < opts.window || pyr_prev.back().w < opts.window) break;
        pyr_prev.push_back(downsample2(pyr_prev.back()));
        pyr_next.push_back(downsample2(pyr_next.back()));
    }
    const int levels = int(pyr_prev.size());
    const int half = opts.window / 2;

    std::vector<PointFlow> flows;
    flows.reserve(points.size());
    for (const auto& pt : points) {
        PointFlow pf;
        pf.point = pt;
        float gx_flow = 0, gy_flow = 0;  // accumulated guess
        bool ok = true;
        for (int l = levels - 1; l >= 0 && ok; --l) {
            const Image& I = pyr_prev[l];
            const Image& J = pyr_next[l];
            float px = pt.x / float(1 << l);
            float py = pt.y / float(1 << l);
            if (px < 1 || py < 1 || px > I.w - 2 || py > I.h - 2) {
                if (l == 0) ok = false;
                continue;  // point unusable at this pyramid level
            }

            // spatial gradient matrix over the window (central differences on I)
            double gxx = 0, gyy = 0, gxy = 0;
            std::vector<float> ix(size_t(opts.window) * opts.window);
            std::vector<float> iy(size_t(opts.window) * opts.window);
            std::vector<float> iv(size_t(opts.window) * opts.window);
            int idx = 0;
            for (int wr = -half; wr <= half; ++wr) {
                for (int wc = -half; wc <= half; ++wc, ++idx) {
                    float sx = px + wc, sy = py + wr;
                    float dx = 0.5f * (sample_bilinear(I, sx + 1, sy) - sample_bilinear(I, sx - 1, sy));
                    float dy = 0.5f * (sample_bilinear(I, sx, sy + 1) - sample_bilinear(I, sx, sy - 1));
                    ix[idx] = dx;
                    iy[idx] = dy;
                    iv[idx] = sample_bilinear(I, sx, sy);
                    gxx += double(dx) * dx;
                    gyy += double(dy) * dy;
                    gxy += double(dx) * dy;
                }
            }
            double tr = gxx + gyy;
            double det = gxx * gyy - gxy * gxy;
            double lmin = tr / 2 - std::sqrt(std::max(0.0, tr * tr / 4 - det));
            if (lmin / (double(opts.window) * opts.window) < 1e-9) {
                // aperture problem: window has no usable structure
                if (l == 0) ok = false;
                continue;
            }

            float vx = 0, vy = 0;
            for (int it = 0; it < opts.iters; ++it) {
                double bx = 0, by = 0;
                idx = 0;
                for (int wr = -half; wr <= half; ++wr) {
                    for (int wc = -half; wc <= half; ++wc, ++idx) {
                        float jx = px + wc + gx_flow + vx;
                        float jy = py + wr + gy_flow + vy;
                        float d = iv[idx] - sample_bilinear(J, jx, jy);
                        bx += double(d) * ix[idx];
                        by += double(d) * iy[idx];
                    }
                }
                double ux = (gyy * bx - gxy * by) / det;
                double uy = (gxx * by - gxy * bx) / det;
                vx += float(ux);
                vy += float(uy);
                if (std::hypot(ux, uy) < opts.eps) break;
            }
            if (!std::isfinite(vx) || !std::isfinite(vy)) {
                ok = false;
                break;
            }
            gx_flow += vx;
            gy_flow += vy;
            if (l > 0) {
                gx_flow *= 2;
                gy_flow *= 2;
            }
        }
        float fx = pt.x + gx_flow, fy = pt.y + gy_flow;
        if (ok && fx >= 0 && fy >= 0 && fx <= prev.w - 1 && fy <= prev.h - 1) {
            pf.dx = gx_flow;
            pf.dy = gy_flow;
            pf.valid = true;
        }
        flows.push_back(pf);
    }
    return flows;
}

// ---------------------------------------------------------------------------
// RANSAC homography

namespace {

struct NormXform {
    double cx, cy, s;
};

NormXform normalizer(const std::vector<PointMatch>& matches, const std::vector<int>& idx, bool src) {
    double cx = 0, cy = 0;
    for (int i : idx) {
        auto& p = src ? matches[i].first : matches[i].second;
        cx += p.first;
        cy += p.second;
    }
    cx /= idx.size();
    cy /= idx.size();
    double mean_d = 0;
    for (int i : idx) {
        auto& p = src ? matches[i].first : matches[i].second;
        mean_d += std::hypot(p.first - cx, p.second - cy);
    }
    mean_d /= idx.size();
    double s = mean_d > 1e-12 ? std::sqrt(2.0) / mean_d : 1.0;
    return {cx, cy, s};
}

Homography fit_dlt_on(const std::vector<PointMatch>& matches, const std::vector<int>& idx) {
    if (idx.size() < 4) throw std::invalid_argument("fit_homography_dlt: need >= 4 matches");
    NormXform ns = normalizer(matches, idx, true);
    NormXform nd = normalizer(matches, idx, false);

    Eigen::MatrixXd A(2 * idx.size(), 9);
    for (size_t r = 0; r < idx.size(); ++r) {
        const auto& m = matches[idx[r]];
        double x = (m.first.first - ns.cx) * ns.s;
        double y = (m.first.second - ns.cy) * ns.s;
        double u = (m.second.first - nd.cx) * nd.s;
        double v = (m.second.second - nd.cy) * nd.s;
        A.row(2 * r) << -x, -y, -1, 0, 0, 0, u * x, u * y, u;
        A.row(2 * r + 1) << 0, 0, 0, -x, -y, -1, v * x, v * y, v;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(A, Eigen::ComputeFullV);
    Eigen::VectorXd h = svd.matrixV().col(8);

    Eigen::Matrix3d Hn;
    Hn << h(0), h(1), h(2), h(3), h(4), h(5), h(6), h(7), h(8);
    Eigen::Matrix3d Ts, Td;
    Ts << ns.s, 0, -ns.s * ns.cx, 0, ns.s, -ns.s * ns.cy, 0, 0, 1;
    Td << nd.s, 0, -nd.s * nd.cx, 0, nd.s, -nd.s * nd.cy, 0, 0, 1;
    Eigen::Matrix3d H = Td.inverse() * Hn * Ts;

    Homography out;
    for (int i = 0; i < 9; ++i) out.m[i] = H(i / 3, i % 3);
    out.normalize();
    if (std::abs(out.determinant()) < 1e-12)
        throw std::runtime_error("fit_homography_dlt: degenerate (non-invertible) fit");
    return out;
}

bool any_collinear(const std::vector<PointMatch>& matches, const std::array<int, 4>& s) {
    for (int a = 0; a < 2; ++a) {
        for (int i = 0; i < 4; ++i)
            for (int j = i + 1; j < 4; ++j)
                for (int k = j + 1; k < 4; ++k) {
                    auto p = [&](int n) { return a == 0 ? matches[s[n]].first : matches[s[n]].second; };
                    double area = (p(j).first - p(i).first) * (p(k).second - p(i).second) -
                                  (p(k).first - p(i).first) * (p(j).second - p(i).second);
                    if (std::abs(area) < 1e-9) return true;
                }
    }
    return false;
}

std::vector<char> inlier_mask(const std::vector<PointMatch>& matches, const Homography& h,
                              double tol) {
    std::vector<char> mask(matches.size(), 0);
    for (size_t i = 0; i < matches.size(); ++i) {
        auto [u, v] = h.apply(matches[i].first.first, matches[i].first.second);
        double err = std::hypot(u - matches[i].second.first, v - matches[i].second.second);
        mask[i] = err <= tol ? 1 : 0;
    }
    return mask;
}

}  // namespace

Homography fit_homography_dlt(const std::vector<PointMatch>& matches) {
    std::vector<int> all(matches.size());
    for (size_t i = 0; i < all.size(); ++i) all[i] = int(i);
    return fit_dlt_on(matches, all);
}

RansacResult estimate_homography_ransac(const std::vector<PointMatch>& matches, int iters,
                                        double inlier_tol, uint64_t seed) {
    if (matches.size() < 4)
        throw std::invalid_argument("estimate_homography_ransac: fewer than 4 matches");

    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> pick(0, int(matches.size()) - 1);

    int best_count = -1;
    std::vector<char> best_mask;
    for (int it = 0; it < iters; ++it) {
        std::array<int, 4> s{};
        for (int i = 0; i < 4;) {
            int c = pick(rng);
            bool dup = false;
            for (int j = 0; j < i; ++j) dup |= s[j] == c;
            if (!dup) s[i++] = c;
        }
        if (any_collinear(matches, s)) continue;
        Homography h;
        try {
            h = fit_dlt_on(matches, {s.begin(), s.end()});
        } catch (const std::runtime_error&) {
            continue;
        }
        auto mask = inlier_mask(matches, h, inlier_tol);
        int count = 0;
        for (char c : mask) count += c;
        if (count > best_count) {
            best_count = count;
            best_mask = std::move(mask);
        }
    }
    if (best_count < 4)
        throw std::runtime_error("estimate_homography_ransac: all hypotheses degenerate");

    // refit on the consensus set, then settle the mask under the refit model
    RansacResult res;
    for (int round = 0; round < 2; ++round) {
        std::vector<int> idx;
        for (size_t i = 0; i < best_mask.size(); ++i)
            if (best_mask[i]) idx.push_back(int(i));
        res.h = fit_dlt_on(matches, idx);
        best_mask = inlier_mask(matches, res.h, inlier_tol);
    }
    res.inliers = best_mask;
    res.inlier_count = 0;
    for (char c : res.inliers) res.inlier_count += c;
    return res;
}

std::vector<PointFlow> residual_flow(const std::vector<PointFlow>& flows, const Homography& h) {
    if (std::abs(h.determinant()) < 1e-12)
        throw std::invalid_argument("residual_flow: non-invertible homography");
    std::vector<PointFlow> out;
    out.reserve(flows.size());
    for (const auto& f : flows) {
        PointFlow r = f;
        if (f.valid) {
            auto [px, py] = h.apply(f.point.x, f.point.y);
            r.dx = float(double(f.point.x) + f.dx - px);
            r.dy = float(double(f.point.y) + f.dy - py);
        }
        out.push_back(r);
    }
    return out;
}

std::vector<MotionLabel> classify_moving(const std::vector<PointFlow>& residuals,
                                         double threshold) {
    if (threshold <= 0) throw std::invalid_argument("classify_moving: threshold must be > 0");
    std::vector<MotionLabel> labels;
    labels.reserve(residuals.size());
    for (const auto& r : residuals) {
        if (!r.valid)
            labels.push_back(MotionLabel::Invalid);
        else if (std::hypot(double(r.dx), double(r.dy)) > threshold)  // strictly "more than"
            labels.push_back(MotionLabel::Moving);
        else
            labels.push_back(MotionLabel::Static);
    }
    return labels;
}

FrameGate gate_frame(const std::vector<MotionLabel>& labels, double low, double high) {
    if (!(low >= 0 && low < high && high <= 1))
        throw std::invalid_argument("gate_frame: need 0 <= low < high <= 1");
    long moving = 0, valid = 0;
    for (auto l : labels) {
        if (l == MotionLabel::Invalid) continue;
        ++valid;
        if (l == MotionLabel::Moving) ++moving;
    }
    if (valid == 0) throw std::invalid_argument("gate_frame: zero valid labels");
    FrameGate g;
    g.moving_fraction = double(moving) / double(valid);
    if (g.moving_fraction < low)
        g.verdict = GateVerdict::RejectTooFew;
    else if (g.moving_fraction > high)
        g.verdict = GateVerdict::RejectTooMany;
    else
        g.verdict = GateVerdict::Accept;
    return g;
}

void write_flow_debug(const std::vector<PointFlow>& flows, const std::vector<MotionLabel>& labels,
                      const std::filesystem::path& path) {
    if (flows.size() != labels.size())
        throw std::invalid_argument("write_flow_debug: flows/labels size mismatch");
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("write_flow_debug: cannot open " + path.string());
    for (size_t i = 0; i < flows.size(); ++i) {
        const char* label = labels[i] == MotionLabel::Moving   ? "moving"
                            : labels[i] == MotionLabel::Static ? "static"
                                                               : "invalid";
        nlohmann::json rec = {{"x", flows[i].point.x},   {"y", flows[i].point.y},
                              {"dx", flows[i].dx},       {"dy", flows[i].dy},
                              {"valid", flows[i].valid}, {"label", label}};
        f << rec.dump() << "\n";
    }
}

}  // namespace trackemb
