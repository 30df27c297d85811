#include "trackemb/eval.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace trackemb {

Embeddings embed_set(const std::vector<const EncoderParams*>& encoders, const Batch& patches) {
    if (encoders.empty()) throw std::invalid_argument("embed_set: need at least one encoder");
    Embeddings out;
    out.n = patches.n;
    out.dim = 0;
    for (const auto* e : encoders) out.dim += e->embed_dim;
    out.v.resize(size_t(out.n) * out.dim);

    int offset = 0;
    for (const auto* e : encoders) {
        Embeddings part = forward(*e, patches);
        for (int i = 0; i < out.n; ++i)
            std::copy_n(part.row(i), part.dim, out.row(i) + offset);
        offset += part.dim;
    }
    return out;
}

std::vector<float> concat_embeddings(const std::vector<const EncoderParams*>& encoders,
                                     const Patch& patch) {
    Batch b(1, 1, patch.side, patch.side);
    b.v = patch.px;
    Embeddings e = embed_set(encoders, b);
    return e.v;
}

RetrievalReport nn_retrieval_rate(const LabeledPatchSet& queries, const LabeledPatchSet& db,
                                  const std::vector<const EncoderParams*>& encoders, int k) {
    if (queries.patches.n == 0 || db.patches.n == 0)
        throw std::invalid_argument("nn_retrieval_rate: empty patch set");
    if (db.patches.n < k) throw std::invalid_argument("nn_retrieval_rate: db smaller than k");

    Embeddings qe = embed_set(encoders, queries.patches);
    Embeddings de = embed_set(encoders, db.patches);

    RetrievalReport rep;
    rep.k = k;
    rep.queries = qe.n;
    rep.per_query_correct.resize(qe.n, 0);

    std::map<int, std::pair<long, long>> per_class;  // label -> (correct, total)
    std::vector<std::pair<double, int>> scored(de.n);
    for (int q = 0; q < qe.n; ++q) {
        for (int d = 0; d < de.n; ++d)
            scored[d] = {cosine_distance(qe.row(q), de.row(d), qe.dim), d};
        std::partial_sort(scored.begin(), scored.begin() + k, scored.end(),
                          [](const auto& a, const auto& b) {
                              if (a.first != b.first) return a.first < b.first;
                              return a.second < b.second;  // ties to the lower db index
                          });
        int correct = 0;
        for (int i = 0; i < k; ++i)
            if (db.labels[scored[i].second] == queries.labels[q]) ++correct;
        rep.per_query_correct[q] = correct;
        auto& pc = per_class[queries.labels[q]];
        pc.first += correct;
        pc.second += k;
    }
    long total = std::accumulate(rep.per_query_correct.begin(), rep.per_query_correct.end(), 0L);
    rep.rate = double(total) / (double(k) * qe.n);
    for (const auto& [label, cnt] : per_class)
        rep.per_class_rate[label] = double(cnt.first) / double(cnt.second);
    return rep;
}

ProbeResult train_linear_probe(const LabeledPatchSet& train, const LabeledPatchSet& test,
                               const EncoderParams& encoder, int epochs, double lr) {
    if (train.n_classes < 2)
        throw std::invalid_argument("train_linear_probe: need at least 2 classes");
    std::vector<const EncoderParams*> enc{&encoder};
    Embeddings tr = embed_set(enc, train.patches);
    Embeddings te = embed_set(enc, test.patches);

    const int C = train.n_classes, D = tr.dim, N = tr.n;
    std::vector<double> W(size_t(C) * D, 0.0), B(C, 0.0);

    auto logits_of = [&](const float* x, std::vector<double>& z) {
        for (int c = 0; c < C; ++c) {
            double s = B[c];
            const double* wc = &W[size_t(c) * D];
            for (int d = 0; d < D; ++d) s += wc[d] * x[d];
            z[c] = s;
        }
    };
    auto softmax = [&](std::vector<double>& z) {
        double m = *std::max_element(z.begin(), z.end());
        double sum = 0;
        for (double& v : z) {
            v = std::exp(v - m);
            sum += v;
        }
        for (double& v : z) v /= sum;
    };

    ProbeResult res;
    std::vector<double> z(C);
    std::vector<double> gW(size_t(C) * D), gB(C);
    for (int ep = 0; ep < epochs; ++ep) {
        std::fill(gW.begin(), gW.end(), 0.0);
        std::fill(gB.begin(), gB.end(), 0.0);
        double loss = 0;
        for (int i = 0; i < N; ++i) {
            logits_of(tr.row(i), z);
            softmax(z);
            loss -= std::log(std::max(z[train.labels[i]], 1e-300));
            for (int c = 0; c < C; ++c) {
                double g = z[c] - (c == train.labels[i] ? 1.0 : 0.0);
                gB[c] += g;
                double* gwc = &gW[size_t(c) * D];
                const float* x = tr.row(i);
                for (int d = 0; d < D; ++d) gwc[d] += g * x[d];
            }
        }
        res.train_losses.push_back(loss / N);
        for (size_t i = 0; i < W.size(); ++i) W[i] -= lr * gW[i] / N;
        for (int c = 0; c < C; ++c) B[c] -= lr * gB[c] / N;
    }

    int correct = 0;
    for (int i = 0; i < te.n; ++i) {
        logits_of(te.row(i), z);
        int pred = int(std::max_element(z.begin(), z.end()) - z.begin());
        if (pred == test.labels[i]) ++correct;
    }
    res.test_accuracy = te.n ? double(correct) / te.n : 0.0;
    return res;
}

// ---------------------------------------------------------------------------
// synthetic track generator

namespace {

struct InstanceStyle {
    double fg_base, fg_amp, fg_freq_u, fg_freq_v, fg_phase;
    double bg_base, bg_amp, bg_freq, bg_phase;
    double scale0;       // shape half-extent in patch units
    double cx0, cy0;     // initial center, patch units
    double drift_x, drift_y, scale_rate, bright_rate, bright_phase;
};

// shape indicator in shape-local coordinates, |u|,|v| roughly within [-1,1]
bool inside_shape(int family, double u, double v) {
    double au = std::abs(u), av = std::abs(v);
    switch (family % 10) {
        case 0: return u * u + v * v <= 1.0;                               // disk
        case 1: { double r2 = u * u + v * v; return r2 <= 1.0 && r2 >= 0.3; }  // ring
        case 2: return au <= 1.0 && av <= 1.0;                             // square
        case 3: return au + av <= 1.0;                                     // diamond
        case 4: return (au <= 0.33 || av <= 0.33) && au <= 1.0 && av <= 1.0;  // cross
        case 5: return v >= -0.85 && av <= 1.0 && au <= (0.95 - v) * 0.55;    // triangle
        case 6: return au <= 1.0 && av <= 1.0 && std::sin(v * 7.5) > 0;    // h-stripes
        case 7: return au <= 1.0 && av <= 1.0 && std::sin(u * 7.5) > 0;    // v-stripes
        case 8: return au <= 1.0 && av <= 1.0 && std::sin(u * 5.0) * std::sin(v * 5.0) > 0;
        case 9: return au <= 1.0 && av <= 1.0 && std::abs(au - av) <= 0.3;  // X
    }
    return false;
}

uint64_t mix_seed(uint64_t seed, uint64_t a, uint64_t b) {
    uint64_t h = seed ^ (a * 0x9e3779b97f4a7c15ull) ^ (b * 0xc2b2ae3d27d4eb4full);
    h ^= h >> 33;
    h *= 0xff51afd7ed558ccdull;
    h ^= h >> 33;
    return h;
}

}  // namespace

SyntheticTracks generate_synthetic_tracks(uint64_t seed, int n_classes, int instances_per_class,
                                          int frames_per_track, int side) {
    if (n_classes < 1 || instances_per_class < 1 || frames_per_track < 1 || side < 8)
        throw std::invalid_argument("generate_synthetic_tracks: all counts must be positive");

    SyntheticTracks out;
    out.side = side;
    out.n_classes = n_classes;

    for (int cls = 0; cls < n_classes; ++cls) {
        for (int inst = 0; inst < instances_per_class; ++inst) {
            std::mt19937_64 rng(mix_seed(seed, uint64_t(cls), uint64_t(inst)));
            std::uniform_real_distribution<double> uni(0.0, 1.0);

            InstanceStyle st;
            st.fg_base = 0.40 + 0.40 * uni(rng);
            st.fg_amp = 0.15 + 0.15 * uni(rng);
            st.fg_freq_u = 2.0 + 6.0 * uni(rng);
            st.fg_freq_v = 2.0 + 6.0 * uni(rng);
            st.fg_phase = 6.2831853 * uni(rng);
            st.bg_base = 0.05 + 0.30 * uni(rng);
            st.bg_amp = 0.03 + 0.07 * uni(rng);
            st.bg_freq = 0.2 + 0.6 * uni(rng);
            st.bg_phase = 6.2831853 * uni(rng);
            st.scale0 = side * (0.22 + 0.10 * uni(rng));
            st.cx0 = side * (0.38 + 0.24 * uni(rng));
            st.cy0 = side * (0.38 + 0.24 * uni(rng));
            st.drift_x = side * 0.010 * (2 * uni(rng) - 1);
            st.drift_y = side * 0.010 * (2 * uni(rng) - 1);
            st.scale_rate = 0.006 * (2 * uni(rng) - 1);
            st.bright_rate = 0.20 * (2 * uni(rng) - 1);
            st.bright_phase = 6.2831853 * uni(rng);

            SyntheticTrack track;
            track.class_id = cls;
            track.video_id = "synth_c" + std::to_string(cls) + "_i" + std::to_string(inst);
            for (int t = 0; t < frames_per_track; ++t) {
                double cx = st.cx0 + st.drift_x * t;
                double cy = st.cy0 + st.drift_y * t;
                double scale = st.scale0 * (1.0 + st.scale_rate * t);
                double bright = 1.0 + st.bright_rate * std::sin(0.15 * t + st.bright_phase);

                Patch p;
                p.side = side;
                p.px.resize(size_t(side) * side);
                p.prov = PatchProvenance{track.video_id, t, BBox{0, 0, side, side}};
                for (int y = 0; y < side; ++y) {
                    for (int x = 0; x < side; ++x) {
                        double u = (x - cx) / scale;
                        double v = (y - cy) / scale;
                        double val;
                        if (inside_shape(cls, u, v)) {
                            val = st.fg_base +
                                  st.fg_amp * std::sin(st.fg_freq_u * u + st.fg_freq_v * v +
                                                       st.fg_phase);
                        } else {
                            val = st.bg_base +
                                  st.bg_amp * std::sin(st.bg_freq * (x + y) + st.bg_phase);
                        }
                        p.px[size_t(y) * side + x] = float(std::clamp(val * bright, 0.0, 1.0));
                    }
                }
                track.frames.push_back(std::move(p));
            }
            out.tracks.push_back(std::move(track));
        }
    }
    return out;
}

PairDataset tracks_to_pairs(const SyntheticTracks& tracks, int gap) {
    if (gap < 0) throw std::invalid_argument("tracks_to_pairs: negative gap");
    PairDataset data;
    data.patches = Batch(0, 1, tracks.side, tracks.side);
    for (const auto& tr : tracks.tracks) {
        const int n = int(tr.frames.size());
        const int step = std::max(1, gap);
        for (int t = 0; t < n; t += step) {
            int t2 = std::min(t + gap, n - 1);
            data.patches.v.insert(data.patches.v.end(), tr.frames[t].px.begin(),
                                  tr.frames[t].px.end());
            data.patches.v.insert(data.patches.v.end(), tr.frames[t2].px.begin(),
                                  tr.frames[t2].px.end());
            int q = data.patches.n;
            data.patches.n += 2;
            data.video_ids.push_back(tr.video_id);
            data.video_ids.push_back(tr.video_id);
            data.pairs.push_back({q, q + 1});
        }
    }
    return data;
}

LabeledPatchSet tracks_to_labeled_set(const SyntheticTracks& tracks, int frame_offset) {
    LabeledPatchSet set;
    set.n_classes = tracks.n_classes;
    set.patches = Batch(0, 1, tracks.side, tracks.side);
    for (const auto& tr : tracks.tracks) {
        int t = std::min(frame_offset, int(tr.frames.size()) - 1);
        set.patches.v.insert(set.patches.v.end(), tr.frames[t].px.begin(), tr.frames[t].px.end());
        set.patches.n += 1;
        set.labels.push_back(tr.class_id);
    }
    return set;
}

}  // namespace trackemb
