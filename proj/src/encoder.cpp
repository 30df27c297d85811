#include "trackemb/encoder.hpp"

#include <Eigen/Dense>
#include <zlib.h>

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace trackemb {

namespace {
using MatXf = Eigen::MatrixXf;  // column-major
using RowMatXf = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMajorMap =
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using RowMajorMapMut =
    Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
}  // namespace

// ---------------------------------------------------------------------------
// spec parsing

LayerSpec parse_layer_spec(const std::string& s) {
    auto args = [&](size_t want) {
        size_t open = s.find('('), close = s.rfind(')');
        if (open == std::string::npos || close == std::string::npos || close < open)
            throw std::invalid_argument("layer spec: malformed '" + s + "'");
        std::vector<int> out;
        std::stringstream ss(s.substr(open + 1, close - open - 1));
        std::string tok;
        while (std::getline(ss, tok, ',')) out.push_back(std::stoi(tok));
        if (out.size() != want)
            throw std::invalid_argument("layer spec: wrong arity in '" + s + "'");
        return out;
    };
    if (s.rfind("conv", 0) == 0) {
        auto a = args(4);
        return LayerSpec::conv(a[0], a[1], a[2], a[3]);
    }
    if (s == "relu") return LayerSpec::relu();
    if (s.rfind("maxpool", 0) == 0) {
        auto a = args(2);
        return LayerSpec::maxpool(a[0], a[1]);
    }
    if (s.rfind("fc", 0) == 0) {
        auto a = args(1);
        return LayerSpec::fc(a[0]);
    }
    throw std::invalid_argument("layer spec: unknown layer '" + s + "'");
}

std::string layer_spec_to_string(const LayerSpec& l) {
    std::ostringstream os;
    switch (l.kind) {
        case LayerSpec::Kind::Conv:
            os << "conv(" << l.a << "," << l.b << "," << l.c << "," << l.d << ")";
            break;
        case LayerSpec::Kind::ReLU:
            os << "relu";
            break;
        case LayerSpec::Kind::MaxPool:
            os << "maxpool(" << l.a << "," << l.b << ")";
            break;
        case LayerSpec::Kind::FullyConnected:
            os << "fc(" << l.a << ")";
            break;
    }
    return os.str();
}

NetSpec parse_net_spec(const std::vector<std::string>& strs) {
    NetSpec spec;
    for (const auto& s : strs) spec.push_back(parse_layer_spec(s));
    return spec;
}

std::vector<std::string> net_spec_to_strings(const NetSpec& spec) {
    std::vector<std::string> out;
    for (const auto& l : spec) out.push_back(layer_spec_to_string(l));
    return out;
}

uint64_t net_spec_hash(const NetSpec& spec, int input_side) {
    // FNV-1a over the canonical string form
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 0x100000001b3ull;
        }
    };
    mix("in:" + std::to_string(input_side));
    for (const auto& l : spec) mix("|" + layer_spec_to_string(l));
    return h;
}

NetSpec default_net_spec() {
    return {LayerSpec::conv(16, 3, 1, 1), LayerSpec::relu(),  LayerSpec::maxpool(2, 2),
            LayerSpec::conv(32, 3, 1, 1), LayerSpec::relu(),  LayerSpec::maxpool(2, 2),
            LayerSpec::fc(256),           LayerSpec::relu(),  LayerSpec::fc(64)};
}

std::vector<Shape> shape_chain(const NetSpec& spec, int input_side) {
    if (input_side < 1) throw std::invalid_argument("shape_chain: input side must be >= 1");
    std::vector<Shape> shapes;
    shapes.push_back({1, input_side, input_side});
    for (const auto& l : spec) {
        Shape in = shapes.back();
        switch (l.kind) {
            case LayerSpec::Kind::Conv: {
                if (l.a < 1 || l.b < 1 || l.c < 1 || l.d < 0)
                    throw std::invalid_argument("shape_chain: bad conv params");
                if (l.b > in.h + 2 * l.d || l.b > in.w + 2 * l.d)
                    throw std::invalid_argument("shape_chain: conv kernel exceeds input");
                int oh = (in.h + 2 * l.d - l.b) / l.c + 1;
                int ow = (in.w + 2 * l.d - l.b) / l.c + 1;
                if (oh < 1 || ow < 1) throw std::invalid_argument("shape_chain: conv shrinks to zero");
                shapes.push_back({l.a, oh, ow});
                break;
            }
            case LayerSpec::Kind::ReLU:
                shapes.push_back(in);
                break;
            case LayerSpec::Kind::MaxPool: {
                if (l.a < 1 || l.b < 1) throw std::invalid_argument("shape_chain: bad pool params");
                if (l.a > in.h || l.a > in.w)
                    throw std::invalid_argument("shape_chain: pool window exceeds input");
                int oh = (in.h - l.a) / l.b + 1;
                int ow = (in.w - l.a) / l.b + 1;
                if (oh < 1 || ow < 1) throw std::invalid_argument("shape_chain: pool shrinks to zero");
                shapes.push_back({in.c, oh, ow});
                break;
            }
            case LayerSpec::Kind::FullyConnected:
                if (l.a < 1) throw std::invalid_argument("shape_chain: bad fc width");
                shapes.push_back({l.a, 1, 1});
                break;
        }
    }
    return shapes;
}

// ---------------------------------------------------------------------------
// params

namespace {

EncoderParams alloc_params(const NetSpec& spec, int input_side) {
    auto shapes = shape_chain(spec, input_side);
    EncoderParams p;
    p.spec = spec;
    p.input_side = input_side;
    p.embed_dim = int(shapes.back().count());
    p.layers.resize(spec.size());
    for (size_t i = 0; i < spec.size(); ++i) {
        const auto& l = spec[i];
        if (l.kind == LayerSpec::Kind::Conv) {
            p.layers[i].w.resize(size_t(l.a) * shapes[i].c * l.b * l.b);
            p.layers[i].b.resize(l.a);
        } else if (l.kind == LayerSpec::Kind::FullyConnected) {
            p.layers[i].w.resize(size_t(l.a) * shapes[i].count());
            p.layers[i].b.resize(l.a);
        }
    }
    return p;
}

}  // namespace

size_t EncoderParams::param_count() const {
    size_t n = 0;
    for (const auto& l : layers) n += l.w.size() + l.b.size();
    return n;
}

std::vector<float> EncoderParams::flatten() const {
    std::vector<float> flat;
    flat.reserve(param_count());
    for (const auto& l : layers) {
        flat.insert(flat.end(), l.w.begin(), l.w.end());
        flat.insert(flat.end(), l.b.begin(), l.b.end());
    }
    return flat;
}

void EncoderParams::unflatten(const std::vector<float>& flat) {
    if (flat.size() != param_count())
        throw std::invalid_argument("unflatten: parameter count mismatch");
    size_t off = 0;
    for (auto& l : layers) {
        std::copy_n(flat.begin() + off, l.w.size(), l.w.begin());
        off += l.w.size();
        std::copy_n(flat.begin() + off, l.b.size(), l.b.begin());
        off += l.b.size();
    }
}

EncoderParams init_params(const NetSpec& spec, int input_side, uint64_t seed) {
    EncoderParams p = alloc_params(spec, input_side);
    auto shapes = shape_chain(spec, input_side);
    std::mt19937_64 rng(seed);
    for (size_t i = 0; i < spec.size(); ++i) {
        auto& lp = p.layers[i];
        if (lp.w.empty()) continue;
        size_t fan_in = spec[i].kind == LayerSpec::Kind::Conv
                            ? size_t(shapes[i].c) * spec[i].b * spec[i].b
                            : shapes[i].count();
        std::normal_distribution<float> gauss(0.f, std::sqrt(2.f / float(fan_in)));
        for (float& w : lp.w) w = gauss(rng);
        // biases stay zero
    }
    return p;
}

EncoderGrads zero_grads(const EncoderParams& params) {
    EncoderGrads g(params.layers.size());
    for (size_t i = 0; i < params.layers.size(); ++i) {
        g[i].w.assign(params.layers[i].w.size(), 0.f);
        g[i].b.assign(params.layers[i].b.size(), 0.f);
    }
    return g;
}

// ---------------------------------------------------------------------------
// forward / backward

namespace {

using RowMap = Eigen::Map<Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstRowMap =
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// Grow-only scratch buffer; reused across calls so the hot loop stops paying
// for multi-megabyte allocations every iteration.
float* scratch(std::vector<float>& buf, size_t need) {
    if (buf.size() < need) buf.resize(need);
    return buf.data();
}

// Reshape a reusable batch; contents untouched when zero == false (callers
// overwrite every element).
void reshape(Batch& b, int n, int c, int h, int w, bool zero) {
    b.n = n;
    b.c = c;
    b.h = h;
    b.w = w;
    const size_t need = size_t(n) * c * h * w;
    if (zero)
        b.v.assign(need, 0.f);
    else if (b.v.size() != need)
        b.v.resize(need);
}

// GEMM panel width: padding column counts to a multiple of this keeps every
// column inside a full-width micro-kernel, so a column's result is a bitwise
// function of its own data alone (tail kernels accumulate in a different order).
constexpr long kPanel = 48;

long pad_cols(long ncols) { return (ncols + kPanel - 1) / kPanel * kPanel; }

// Row-major patch matrix: rows = c*k*k, one column per output position,
// columns ordered (sample, oy, ox) so each row is filled with contiguous runs.
// `pitch` is the allocated row length (>= n*oh*ow).
// no-tree-loop-distribute-patterns: the padding fills are a handful of floats
// each but run ~10^5 times per call; left alone gcc turns every one into a
// libc memset call, and the call overhead dominates the fill itself.
__attribute__((noinline, optimize("no-tree-loop-distribute-patterns")))
void im2col(const Batch& in, int k, int stride, int pad, int oh, int ow, float* cols,
            long pitch) {
    const int rows = in.c * k * k;
    for (int r = 0; r < rows; ++r) {
        const int c = r / (k * k), ky = (r / k) % k, kx = r % k;
        float* row = cols + size_t(r) * pitch;
        for (int s = 0; s < in.n; ++s) {
            const float* plane = in.item(s) + size_t(c) * in.h * in.w;
            for (int oy = 0; oy < oh; ++oy) {
                float* dst = row + (size_t(s) * oh + oy) * ow;
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= in.h) {
                    std::fill_n(dst, ow, 0.f);
                    continue;
                }
                const float* src = plane + size_t(iy) * in.w;
                if (stride == 1) {
                    const int ox_lo = std::max(0, pad - kx);
                    const int ox_hi = std::min(ow, in.w + pad - kx);
                    std::fill_n(dst, ox_lo, 0.f);
                    if (ox_hi > ox_lo) std::copy_n(src + ox_lo - pad + kx, ox_hi - ox_lo, dst + ox_lo);
                    std::fill_n(dst + std::max(ox_lo, ox_hi), ow - std::max(ox_lo, ox_hi), 0.f);
                } else {
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        dst[ox] = (ix >= 0 && ix < in.w) ? src[ix] : 0.f;
                    }
                }
            }
        }
    }
}

void col2im(const float* cols, int k, int stride, int pad, int oh, int ow, Batch& out,
            long pitch) {
    const int rows = out.c * k * k;
    std::fill(out.v.begin(), out.v.end(), 0.f);
    for (int r = 0; r < rows; ++r) {
        const int c = r / (k * k), ky = (r / k) % k, kx = r % k;
        const float* row = cols + size_t(r) * pitch;
        for (int s = 0; s < out.n; ++s) {
            float* plane = out.item(s) + size_t(c) * out.h * out.w;
            for (int oy = 0; oy < oh; ++oy) {
                const float* src = row + (size_t(s) * oh + oy) * ow;
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= out.h) continue;
                float* dst = plane + size_t(iy) * out.w;
                if (stride == 1) {
                    const int ox_lo = std::max(0, pad - kx);
                    const int ox_hi = std::min(ow, out.w + pad - kx);
                    for (int ox = ox_lo; ox < ox_hi; ++ox) dst[ox - pad + kx] += src[ox];
                } else {
                    for (int ox = 0; ox < ow; ++ox) {
                        const int ix = ox * stride - pad + kx;
                        if (ix >= 0 && ix < out.w) dst[ix] += src[ox];
                    }
                }
            }
        }
    }
}

// (oc x ncols) GEMM output back to batch layout (n, oc, oh, ow); rows are contiguous
void scatter_gemm_output(const float* y, const std::vector<float>& bias, int oh, int ow,
                         Batch& out, long pitch) {
    const size_t plane_sz = size_t(oh) * ow;
    for (int oc = 0; oc < out.c; ++oc) {
        const float* src = y + size_t(oc) * size_t(pitch);
        const float b = bias[oc];
        for (int s = 0; s < out.n; ++s) {
            float* dst = out.item(s) + size_t(oc) * plane_sz;
            const float* seg = src + size_t(s) * plane_sz;
            for (size_t i = 0; i < plane_sz; ++i) dst[i] = seg[i] + b;
        }
    }
}

void gather_grad_output(const Batch& g, int oh, int ow, float* y) {
    const size_t plane_sz = size_t(oh) * ow;
    const size_t ncols = size_t(g.n) * plane_sz;
    for (int oc = 0; oc < g.c; ++oc) {
        float* dst = y + size_t(oc) * ncols;
        for (int s = 0; s < g.n; ++s)
            std::copy_n(g.item(s) + size_t(oc) * plane_sz, plane_sz, dst + size_t(s) * plane_sz);
    }
}

}  // namespace

Embeddings forward(const EncoderParams& params, const Batch& in, Tape* tape) {
    if (in.c != 1 || in.h != params.input_side || in.w != params.input_side)
        throw std::invalid_argument("forward: batch shape does not match encoder input");
    auto shapes = shape_chain(params.spec, params.input_side);

    size_t n_pools = 0, n_relus = 0;
    for (const auto& l : params.spec) {
        if (l.kind == LayerSpec::Kind::MaxPool) ++n_pools;
        if (l.kind == LayerSpec::Kind::ReLU) ++n_relus;
    }
    if (tape) {
        tape->n = in.n;
        tape->inputs.resize(params.spec.size());
        tape->argmax.resize(n_pools);
        tape->relu_mask.resize(n_relus);
    }

    thread_local std::vector<float> cols_buf, y_buf;
    thread_local Batch ping, pong;
    const Batch* cur = &in;
    size_t pool_idx = 0, relu_idx = 0;
    for (size_t li = 0; li < params.spec.size(); ++li) {
        const auto& l = params.spec[li];
        const Shape& os = shapes[li + 1];
        // relu/pool backward only need the mask/argmax, so keep just the shape
        if (tape) {
            Batch& ti = tape->inputs[li];
            if (l.kind == LayerSpec::Kind::Conv || l.kind == LayerSpec::Kind::FullyConnected) {
                ti = *cur;
            } else {
                ti.n = cur->n;
                ti.c = cur->c;
                ti.h = cur->h;
                ti.w = cur->w;
                ti.v.clear();
            }
        }
        Batch& out = (cur == &ping) ? pong : ping;

        switch (l.kind) {
            case LayerSpec::Kind::Conv: {
                const long rows = long(cur->c) * l.b * l.b;
                const long ncols = long(cur->n) * os.h * os.w;
                const long ncp = pad_cols(ncols);
                float* cols = scratch(cols_buf, size_t(rows) * ncp);
                im2col(*cur, l.b, l.c, l.d, os.h, os.w, cols, ncp);
                RowMajorMap w(params.layers[li].w.data(), l.a, rows);
                RowMap y(scratch(y_buf, size_t(l.a) * ncp), l.a, ncp);
                y.noalias() = w * ConstRowMap(cols, rows, ncp);
                reshape(out, cur->n, os.c, os.h, os.w, false);
                scatter_gemm_output(y.data(), params.layers[li].b, os.h, os.w, out, ncp);
                break;
            }
            case LayerSpec::Kind::ReLU: {
                reshape(out, cur->n, cur->c, cur->h, cur->w, false);
                const size_t total = cur->v.size();
                const float* src = cur->v.data();
                float* dst = out.v.data();
                uint8_t* mask = nullptr;
                if (tape) {
                    tape->relu_mask[relu_idx].resize(total);
                    mask = tape->relu_mask[relu_idx].data();
                }
                ++relu_idx;
                if (mask) {
                    for (size_t i = 0; i < total; ++i) {
                        float v = src[i];
                        dst[i] = v > 0 ? v : 0.f;
                        mask[i] = v > 0;
                    }
                } else {
                    for (size_t i = 0; i < total; ++i) dst[i] = src[i] > 0 ? src[i] : 0.f;
                }
                break;
            }
            case LayerSpec::Kind::MaxPool: {
                reshape(out, cur->n, os.c, os.h, os.w, false);
                int32_t* arg = nullptr;
                if (tape) {
                    // every slot is written below, so plain resize (no zero fill)
                    tape->argmax[pool_idx].resize(out.v.size());
                    arg = tape->argmax[pool_idx].data();
                }
                ++pool_idx;
                const size_t in_item = cur->item_size(), out_item = out.item_size();
                const size_t in_plane = size_t(cur->h) * cur->w;
                const size_t out_plane = size_t(os.h) * os.w;
                const int iw = cur->w;
                for (int s = 0; s < cur->n; ++s) {
                    const float* item = cur->v.data() + size_t(s) * in_item;
                    float* oit = out.v.data() + size_t(s) * out_item;
                    int32_t* ait = arg ? arg + size_t(s) * out_item : nullptr;
                    for (int c = 0; c < cur->c; ++c) {
                        const float* plane = item + size_t(c) * in_plane;
                        const int32_t cbase = int32_t(size_t(c) * in_plane);
                        float* orow = oit + size_t(c) * out_plane;
                        int32_t* arow = ait ? ait + size_t(c) * out_plane : nullptr;
                        if (l.a == 2 && l.b == 2) {
                            for (int oy = 0; oy < os.h; ++oy) {
                                const float* r0 = plane + size_t(2 * oy) * iw;
                                const float* r1 = r0 + iw;
                                for (int ox = 0; ox < os.w; ++ox) {
                                    const int ix0 = 2 * ox;
                                    float best = r0[ix0];
                                    int32_t bi = cbase + 2 * oy * iw + ix0;
                                    if (r0[ix0 + 1] > best) { best = r0[ix0 + 1]; bi = cbase + 2 * oy * iw + ix0 + 1; }
                                    if (r1[ix0] > best) { best = r1[ix0]; bi = cbase + (2 * oy + 1) * iw + ix0; }
                                    if (r1[ix0 + 1] > best) { best = r1[ix0 + 1]; bi = cbase + (2 * oy + 1) * iw + ix0 + 1; }
                                    orow[size_t(oy) * os.w + ox] = best;
                                    if (arow) arow[size_t(oy) * os.w + ox] = bi;
                                }
                            }
                            continue;
                        }
                        for (int oy = 0; oy < os.h; ++oy) {
                            for (int ox = 0; ox < os.w; ++ox) {
                                int iy0 = oy * l.b, ix0 = ox * l.b;
                                float best = plane[size_t(iy0) * iw + ix0];
                                int32_t best_idx = cbase + int32_t(size_t(iy0) * iw + ix0);
                                for (int ky = 0; ky < l.a; ++ky)
                                    for (int kx = 0; kx < l.a; ++kx) {
                                        int iy = iy0 + ky, ix = ix0 + kx;
                                        float v = plane[size_t(iy) * iw + ix];
                                        if (v > best) {
                                            best = v;
                                            best_idx = cbase + int32_t(size_t(iy) * iw + ix);
                                        }
                                    }
                                size_t o = size_t(oy) * os.w + ox;
                                orow[o] = best;
                                if (arow) arow[o] = best_idx;
                            }
                        }
                    }
                }
                break;
            }
            case LayerSpec::Kind::FullyConnected: {
                const long din = long(cur->item_size());
                const long np = pad_cols(cur->n);
                RowMajorMap w(params.layers[li].w.data(), l.a, din);
                // pad the sample dimension into full GEMM panels (see pad_cols)
                float* xp = scratch(cols_buf, size_t(din) * np);
                std::copy(cur->v.begin(), cur->v.end(), xp);
                Eigen::Map<MatXf> y(scratch(y_buf, size_t(l.a) * np), l.a, np);
                y.noalias() = w * Eigen::Map<const MatXf>(xp, din, np);
                reshape(out, cur->n, l.a, 1, 1, false);
                Eigen::Map<MatXf> o(out.v.data(), l.a, cur->n);
                o = y.leftCols(cur->n);
                o.colwise() += Eigen::Map<const Eigen::VectorXf>(params.layers[li].b.data(), l.a);
                break;
            }
        }
        cur = &out;
    }

    Embeddings emb;
    emb.n = cur->n;
    emb.dim = int(cur->item_size());
    emb.v = cur->v;
    for (float v : emb.v)
        if (!std::isfinite(v)) throw std::runtime_error("forward: non-finite embedding");
    return emb;
}

EncoderGrads backward(const EncoderParams& params, const Tape& tape,
                      const Embeddings& grad_embeddings) {
    if (tape.inputs.size() != params.spec.size())
        throw std::invalid_argument("backward: tape does not match encoder spec");
    if (grad_embeddings.n != tape.n || grad_embeddings.dim != params.embed_dim)
        throw std::invalid_argument("backward: gradient shape mismatch");

    auto shapes = shape_chain(params.spec, params.input_side);
    EncoderGrads grads = zero_grads(params);

    thread_local std::vector<float> cols_buf, gy_buf, gcols_buf;
    thread_local Batch ping, pong;
    const Shape& outs = shapes.back();
    reshape(ping, tape.n, outs.c, outs.h, outs.w, false);
    ping.v = grad_embeddings.v;
    const Batch* g = &ping;

    int pool_idx = int(tape.argmax.size());
    int relu_idx = int(tape.relu_mask.size());
    for (int li = int(params.spec.size()) - 1; li >= 0; --li) {
        const auto& l = params.spec[li];
        const Batch& x = tape.inputs[li];
        const Shape& os = shapes[li + 1];
        Batch& gx = (g == &ping) ? pong : ping;

        switch (l.kind) {
            case LayerSpec::Kind::Conv: {
                const long rows = long(x.c) * l.b * l.b;
                const long ncols = long(x.n) * os.h * os.w;
                float* gy_p = scratch(gy_buf, size_t(l.a) * ncols);
                gather_grad_output(*g, os.h, os.w, gy_p);
                ConstRowMap gy(gy_p, l.a, ncols);
                float* cols = scratch(cols_buf, size_t(rows) * ncols);
                im2col(x, l.b, l.c, l.d, os.h, os.w, cols, ncols);
                RowMajorMapMut dw(grads[li].w.data(), l.a, rows);
                dw.noalias() = gy * ConstRowMap(cols, rows, ncols).transpose();
                // fixed-order scalar reduction: Eigen's redux picks its summation
                // order from operand alignment, which breaks bit-determinism
                for (int oc = 0; oc < l.a; ++oc) {
                    double s = 0;
                    const float* row = gy_p + size_t(oc) * ncols;
                    for (long i = 0; i < ncols; ++i) s += row[i];
                    grads[li].b[size_t(oc)] = float(s);
                }
                if (li > 0) {  // the input gradient of the first layer is never used
                    RowMajorMap w(params.layers[li].w.data(), l.a, rows);
                    RowMap gcols(scratch(gcols_buf, size_t(rows) * ncols), rows, ncols);
                    gcols.noalias() = w.transpose() * gy;
                    reshape(gx, x.n, x.c, x.h, x.w, false);
                    col2im(gcols.data(), l.b, l.c, l.d, os.h, os.w, gx, ncols);
                }
                break;
            }
            case LayerSpec::Kind::ReLU: {
                --relu_idx;
                const uint8_t* mask = tape.relu_mask[relu_idx].data();
                reshape(gx, x.n, x.c, x.h, x.w, false);
                const size_t total = g->v.size();
                const float* src = g->v.data();
                float* dst = gx.v.data();
                for (size_t i = 0; i < total; ++i) dst[i] = mask[i] ? src[i] : 0.f;
                break;
            }
            case LayerSpec::Kind::MaxPool: {
                --pool_idx;
                const int32_t* arg = tape.argmax[pool_idx].data();
                reshape(gx, x.n, x.c, x.h, x.w, true);
                const size_t out_item = g->item_size(), in_item = gx.item_size();
                for (int s = 0; s < g->n; ++s) {
                    const float* gi = g->v.data() + size_t(s) * out_item;
                    const int32_t* ai = arg + size_t(s) * out_item;
                    float* go = gx.v.data() + size_t(s) * in_item;
                    for (size_t o = 0; o < out_item; ++o) go[ai[o]] += gi[o];
                }
                break;
            }
            case LayerSpec::Kind::FullyConnected: {
                const long din = long(x.item_size());
                Eigen::Map<const MatXf> gyv(g->v.data(), l.a, g->n);
                Eigen::Map<const MatXf> xv(x.v.data(), din, x.n);
                RowMajorMapMut dw(grads[li].w.data(), l.a, din);
                dw.noalias() = gyv * xv.transpose();
                // fixed-order scalar reduction (see conv case)
                for (int oc = 0; oc < l.a; ++oc) {
                    double s = 0;
                    for (int col = 0; col < g->n; ++col) s += g->v[size_t(col) * l.a + oc];
                    grads[li].b[size_t(oc)] = float(s);
                }
                if (li > 0) {  // see conv case
                    RowMajorMap w(params.layers[li].w.data(), l.a, din);
                    reshape(gx, x.n, x.c, x.h, x.w, false);
                    Eigen::Map<MatXf> gxv(gx.v.data(), din, x.n);
                    gxv.noalias() = w.transpose() * gyv;
                }
                break;
            }
        }
        g = &gx;
    }
    return grads;
}

void sgd_step(EncoderParams& params, const EncoderGrads& grads, float lr, float weight_decay,
              float momentum, EncoderGrads* momentum_buf) {
    if (lr < 0 || weight_decay < 0) throw std::invalid_argument("sgd_step: negative lr or decay");
    for (size_t li = 0; li < params.layers.size(); ++li) {
        auto& lp = params.layers[li];
        const auto& gl = grads[li];
        for (float v : gl.w)
            if (!std::isfinite(v)) throw std::runtime_error("sgd_step: non-finite gradient");
        for (size_t i = 0; i < lp.w.size(); ++i) {
            float step = gl.w[i] + weight_decay * lp.w[i];
            if (momentum > 0 && momentum_buf) {
                float& m = (*momentum_buf)[li].w[i];
                m = momentum * m + step;
                step = m;
            }
            lp.w[i] -= lr * step;
        }
        for (size_t i = 0; i < lp.b.size(); ++i) {
            float step = gl.b[i];  // biases exempt from decay
            if (momentum > 0 && momentum_buf) {
                float& m = (*momentum_buf)[li].b[i];
                m = momentum * m + step;
                step = m;
            }
            lp.b[i] -= lr * step;
        }
    }
}

// ---------------------------------------------------------------------------
// checkpoint: magic "TRKCKPT1", little-endian fields, trailing CRC32

namespace {

constexpr char kMagic[8] = {'T', 'R', 'K', 'C', 'K', 'P', 'T', '1'};

template <typename T>
void put(std::string& buf, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    buf.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::string& buf, size_t& off) {
    if (off + sizeof(T) > buf.size()) throw std::runtime_error("checkpoint: truncated file");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    std::string buf;
    buf.append(kMagic, 8);
    put<uint32_t>(buf, ckpt.version);
    put<uint32_t>(buf, uint32_t(ckpt.params.input_side));
    put<uint32_t>(buf, uint32_t(ckpt.params.embed_dim));
    put<uint64_t>(buf, net_spec_hash(ckpt.params.spec, ckpt.params.input_side));
    put<uint32_t>(buf, uint32_t(ckpt.params.spec.size()));
    for (const auto& l : ckpt.params.spec) {
        put<uint8_t>(buf, uint8_t(l.kind));
        put<int32_t>(buf, l.a);
        put<int32_t>(buf, l.b);
        put<int32_t>(buf, l.c);
        put<int32_t>(buf, l.d);
    }
    put<uint64_t>(buf, ckpt.step);
    put<uint32_t>(buf, uint32_t(ckpt.rng_state.size()));
    buf.append(ckpt.rng_state);
    auto flat = ckpt.params.flatten();
    put<uint64_t>(buf, flat.size());
    buf.append(reinterpret_cast<const char*>(flat.data()), flat.size() * 4);

    uint32_t crc = uint32_t(::crc32(0, reinterpret_cast<const Bytef*>(buf.data()), uInt(buf.size())));
    put<uint32_t>(buf, crc);

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
    f.write(buf.data(), std::streamsize(buf.size()));
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (buf.size() < 12 || std::memcmp(buf.data(), kMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path.string());

    uint32_t stored_crc;
    std::memcpy(&stored_crc, buf.data() + buf.size() - 4, 4);
    uint32_t crc = uint32_t(
        ::crc32(0, reinterpret_cast<const Bytef*>(buf.data()), uInt(buf.size() - 4)));
    if (crc != stored_crc)
        throw std::runtime_error("load_checkpoint: checksum failure in " + path.string());

    size_t off = 8;
    Checkpoint ckpt;
    ckpt.version = take<uint32_t>(buf, off);
    if (ckpt.version != 1)
        throw std::runtime_error("load_checkpoint: unsupported version in " + path.string());
    int input_side = int(take<uint32_t>(buf, off));
    uint32_t embed_dim = take<uint32_t>(buf, off);
    uint64_t spec_hash = take<uint64_t>(buf, off);
    uint32_t n_layers = take<uint32_t>(buf, off);
    NetSpec spec;
    for (uint32_t i = 0; i < n_layers; ++i) {
        LayerSpec l;
        l.kind = LayerSpec::Kind(take<uint8_t>(buf, off));
        l.a = take<int32_t>(buf, off);
        l.b = take<int32_t>(buf, off);
        l.c = take<int32_t>(buf, off);
        l.d = take<int32_t>(buf, off);
        spec.push_back(l);
    }
    if (net_spec_hash(spec, input_side) != spec_hash)
        throw std::runtime_error("load_checkpoint: layer-spec hash mismatch in " + path.string());

    ckpt.step = take<uint64_t>(buf, off);
    uint32_t rng_len = take<uint32_t>(buf, off);
    if (off + rng_len > buf.size()) throw std::runtime_error("checkpoint: truncated file");
    ckpt.rng_state = buf.substr(off, rng_len);
    off += rng_len;

    uint64_t n_params = take<uint64_t>(buf, off);
    if (off + n_params * 4 + 4 > buf.size())
        throw std::runtime_error("load_checkpoint: truncated payload in " + path.string());
    std::vector<float> flat(n_params);
    std::memcpy(flat.data(), buf.data() + off, n_params * 4);

    ckpt.params = alloc_params(spec, input_side);
    if (uint32_t(ckpt.params.embed_dim) != embed_dim)
        throw std::runtime_error("load_checkpoint: embed_dim mismatch in " + path.string());
    ckpt.params.unflatten(flat);
    return ckpt;
}

}  // namespace trackemb
