#include "trackemb/trainer.hpp"

#include "trackemb/image.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "trackemb/mining.hpp"

namespace fs = std::filesystem;

namespace trackemb {

void TrainConfig::validate() const {
    if (margin <= 0) throw std::invalid_argument("train config: margin must be > 0");
    if (weight_decay < 0) throw std::invalid_argument("train config: weight_decay must be >= 0");
    if (k_negatives < 1) throw std::invalid_argument("train config: k_negatives must be >= 1");
    if (batch_size < 4 || batch_size % 2 != 0)
        throw std::invalid_argument("train config: batch_size must be even and >= 4");
    if (k_negatives >= batch_size / 2)
        throw std::invalid_argument("train config: k_negatives must be < batch pairs");
    if (lr_initial <= 0 || lr_decay_factor < 1 || lr_step_iters < 1)
        throw std::invalid_argument("train config: bad learning-rate schedule");
    if (total_iters < 0 || random_phase_iters < 0)
        throw std::invalid_argument("train config: negative iteration counts");
}

double TrainConfig::lr_at(int iter) const {
    return lr_initial / std::pow(lr_decay_factor, double(iter / lr_step_iters));
}

PairDataset load_pair_dataset(const fs::path& manifest_path, int expected_side) {
    auto records = read_manifest(manifest_path);
    if (records.empty()) throw std::runtime_error("load_pair_dataset: empty manifest");
    fs::path base = manifest_path.parent_path();

    PairDataset data;
    int side = expected_side;
    for (const auto& rec : records) {
        Image a = read_rawgrid(base / rec.patch_a);
        Image b = read_rawgrid(base / rec.patch_b);
        if (side == 0) side = a.h;
        if (a.h != side || a.w != side || b.h != side || b.w != side)
            throw std::runtime_error("load_pair_dataset: patch size mismatch in " + rec.patch_a);
        if (data.patches.n == 0) data.patches = Batch(0, 1, side, side);
        data.patches.v.insert(data.patches.v.end(), a.px.begin(), a.px.end());
        data.patches.v.insert(data.patches.v.end(), b.px.begin(), b.px.end());
        int q = data.patches.n, p = data.patches.n + 1;
        data.patches.n += 2;
        data.video_ids.push_back(rec.video_id);
        data.video_ids.push_back(rec.video_id);
        data.pairs.push_back({q, p});
    }
    return data;
}

double cosine_distance(const float* f1, const float* f2, int dim, bool* degenerate) {
    double dot = 0, n1 = 0, n2 = 0;
    for (int i = 0; i < dim; ++i) {
        dot += double(f1[i]) * f2[i];
        n1 += double(f1[i]) * f1[i];
        n2 += double(f2[i]) * f2[i];
    }
    if (degenerate) *degenerate = false;
    if (n1 < 1e-24 || n2 < 1e-24) {
        // zero-norm embedding: report the orthogonal-equivalent distance, flagged
        if (degenerate) *degenerate = true;
        return 1.0;
    }
    return 1.0 - dot / (std::sqrt(n1) * std::sqrt(n2));
}

double triplet_loss(double d_pos, double d_neg, double margin) {
    return std::max(0.0, d_pos - d_neg + margin);
}

std::vector<std::vector<int>> sample_random_negatives(const std::vector<std::string>& video_ids,
                                                      const std::vector<std::pair<int, int>>& pairs,
                                                      int k, std::mt19937_64& rng) {
    std::vector<std::vector<int>> out;
    out.reserve(pairs.size());
    for (const auto& [q, p] : pairs) {
        const std::string& vid = video_ids[q];
        std::vector<int> cands;
        for (int i = 0; i < int(video_ids.size()); ++i)
            if (video_ids[i] != vid) cands.push_back(i);
        if (cands.empty())
            throw std::runtime_error("sample_random_negatives: no cross-video candidates");
        // partial Fisher-Yates: first k slots become a uniform sample w/o replacement
        int take = std::min<int>(k, int(cands.size()));
        for (int i = 0; i < take; ++i) {
            std::uniform_int_distribution<int> pick(i, int(cands.size()) - 1);
            std::swap(cands[i], cands[pick(rng)]);
        }
        cands.resize(take);
        out.push_back(std::move(cands));
    }
    return out;
}

std::vector<std::vector<int>> select_hard_negatives(const std::vector<std::string>& video_ids,
                                                    const std::vector<std::pair<int, int>>& pairs,
                                                    const Embeddings& embeddings, int k,
                                                    double margin) {
    if (int(video_ids.size()) != embeddings.n)
        throw std::invalid_argument("select_hard_negatives: embeddings do not cover the batch");
    std::vector<std::vector<int>> out;
    out.reserve(pairs.size());
    for (const auto& [q, p] : pairs) {
        const std::string& vid = video_ids[q];
        double d_pos = cosine_distance(embeddings.row(q), embeddings.row(p), embeddings.dim);
        std::vector<std::pair<double, int>> scored;  // (loss, candidate index)
        for (int i = 0; i < int(video_ids.size()); ++i) {
            if (video_ids[i] == vid) continue;
            double d_neg = cosine_distance(embeddings.row(q), embeddings.row(i), embeddings.dim);
            scored.push_back({triplet_loss(d_pos, d_neg, margin), i});
        }
        if (int(scored.size()) < k)
            throw std::runtime_error("select_hard_negatives: fewer than K eligible candidates");
        std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
            if (a.first != b.first) return a.first > b.first;
            return a.second < b.second;  // ties to the lower index
        });
        std::vector<int> sel(k);
        for (int i = 0; i < k; ++i) sel[i] = scored[i].second;
        out.push_back(std::move(sel));
    }
    return out;
}

namespace {

// dD(a,b)/da with D the cosine distance; written into g (accumulating)
void accum_cosine_grad(const float* a, const float* b, int dim, double scale, float* ga,
                       float* gb) {
    double dot = 0, na2 = 0, nb2 = 0;
    for (int i = 0; i < dim; ++i) {
        dot += double(a[i]) * b[i];
        na2 += double(a[i]) * a[i];
        nb2 += double(b[i]) * b[i];
    }
    if (na2 < 1e-24 || nb2 < 1e-24) return;  // degenerate: flat distance, zero gradient
    double na = std::sqrt(na2), nb = std::sqrt(nb2);
    double inv = 1.0 / (na * nb);
    for (int i = 0; i < dim; ++i) {
        ga[i] += float(scale * (-b[i] * inv + dot * a[i] / (na2 * na * nb)));
        gb[i] += float(scale * (-a[i] * inv + dot * b[i] / (nb2 * nb * na)));
    }
}

}  // namespace

TripletGradResult triplet_gradients(const Embeddings& emb,
                                    const std::vector<std::pair<int, int>>& pairs,
                                    const std::vector<std::vector<int>>& negatives, double margin) {
    if (pairs.size() != negatives.size())
        throw std::invalid_argument("triplet_gradients: pairs/negatives size mismatch");
    TripletGradResult res;
    res.grad.n = emb.n;
    res.grad.dim = emb.dim;
    res.grad.v.assign(size_t(emb.n) * emb.dim, 0.f);

    for (size_t pi = 0; pi < pairs.size(); ++pi) {
        auto [q, p] = pairs[pi];
        double d_pos = cosine_distance(emb.row(q), emb.row(p), emb.dim);
        for (int j : negatives[pi]) {
            double d_neg = cosine_distance(emb.row(q), emb.row(j), emb.dim);
            double loss = triplet_loss(d_pos, d_neg, margin);
            res.loss_sum += loss;
            ++res.triplet_count;
            if (loss > 0) {
                ++res.active_count;
                accum_cosine_grad(emb.row(q), emb.row(p), emb.dim, 1.0, res.grad.row(q),
                                  res.grad.row(p));
                accum_cosine_grad(emb.row(q), emb.row(j), emb.dim, -1.0, res.grad.row(q),
                                  res.grad.row(j));
            }
        }
    }
    return res;
}

BatchObjective batch_objective(const EncoderParams& params, const TripletBatch& batch,
                               const TrainConfig& cfg) {
    Tape tape;
    Embeddings emb = forward(params, batch.patches, &tape);
    TripletGradResult tg = triplet_gradients(emb, batch.pairs, batch.negatives, cfg.margin);

    BatchObjective obj;
    obj.grads = backward(params, tape, tg.grad);
    obj.loss_sum = tg.loss_sum;
    obj.active_fraction = tg.triplet_count ? double(tg.active_count) / tg.triplet_count : 0.0;

    double wnorm2 = 0;
    for (size_t li = 0; li < params.layers.size(); ++li) {
        for (size_t i = 0; i < params.layers[li].w.size(); ++i) {
            double w = params.layers[li].w[i];
            wnorm2 += w * w;
            obj.grads[li].w[i] += float(cfg.weight_decay * w);  // biases exempt
        }
    }
    obj.objective = cfg.weight_decay / 2.0 * wnorm2 + tg.loss_sum;
    return obj;
}

std::string loss_report_csv_header() { return "iter,loss,active_fraction,lr"; }

std::string loss_report_csv_row(const LossReport& r) {
    std::ostringstream os;
    os.precision(9);
    os << r.iteration << "," << r.mean_loss << "," << r.active_fraction << "," << r.lr;
    return os.str();
}

namespace {

void mean_subtract_batch(Batch& b) {
    const size_t sz = b.item_size();
    for (int i = 0; i < b.n; ++i) {
        float* it = b.item(i);
        double m = 0;
        for (size_t j = 0; j < sz; ++j) m += it[j];
        m /= double(sz);
        for (size_t j = 0; j < sz; ++j) it[j] -= float(m);
    }
}

}  // namespace

Checkpoint train(const PairDataset& data, const NetSpec& spec, int input_side,
                 const TrainConfig& cfg, const ReportSink& report) {
    cfg.validate();
    if (data.pairs.empty()) throw std::runtime_error("train: empty dataset");
    if (data.patches.c != 1 || data.patches.h != input_side || data.patches.w != input_side)
        throw std::runtime_error("train: dataset patch shape does not match input_side");
    std::set<std::string> vids(data.video_ids.begin(), data.video_ids.end());
    if (vids.size() < 2) throw std::runtime_error("train: dataset spans a single video");

    const int pairs_per_batch = cfg.batch_size / 2;
    const size_t patch_sz = data.patches.item_size();

    std::mt19937_64 rng(cfg.seed);
    EncoderParams params = init_params(spec, input_side, cfg.seed);
    EncoderGrads momentum_buf = zero_grads(params);

    std::vector<int> order(data.pairs.size());
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = order.size();  // forces a shuffle before the first batch

    TripletBatch batch;
    batch.patches = Batch(cfg.batch_size, 1, input_side, input_side);
    Tape tape;
    for (int iter = 0; iter < cfg.total_iters; ++iter) {
        batch.video_ids.clear();
        batch.pairs.clear();
        batch.negatives.clear();
        for (int bp = 0; bp < pairs_per_batch; ++bp) {
            if (cursor >= order.size()) {
                std::shuffle(order.begin(), order.end(), rng);  // new epoch
                cursor = 0;
            }
            const auto& [q, p] = data.pairs[order[cursor++]];
            std::copy_n(data.patches.item(q), patch_sz, batch.patches.item(2 * bp));
            std::copy_n(data.patches.item(p), patch_sz, batch.patches.item(2 * bp + 1));
            batch.video_ids.push_back(data.video_ids[q]);
            batch.video_ids.push_back(data.video_ids[p]);
            batch.pairs.push_back({2 * bp, 2 * bp + 1});
        }
        if (cfg.mean_subtract) mean_subtract_batch(batch.patches);

        Embeddings emb = forward(params, batch.patches, &tape);

        bool hard = iter >= cfg.random_phase_iters;
        try {
            batch.negatives =
                hard ? select_hard_negatives(batch.video_ids, batch.pairs, emb, cfg.k_negatives,
                                             cfg.margin)
                     : sample_random_negatives(batch.video_ids, batch.pairs, cfg.k_negatives, rng);
        } catch (const std::runtime_error&) {
            continue;  // degenerate batch (single video); skip the update
        }

        TripletGradResult tg = triplet_gradients(emb, batch.pairs, batch.negatives, cfg.margin);
        EncoderGrads grads = backward(params, tape, tg.grad);
        double lr = cfg.lr_at(iter);
        sgd_step(params, grads, float(lr), float(cfg.weight_decay), float(cfg.momentum),
                 &momentum_buf);

        if (report && (iter % cfg.report_interval == 0 || iter == cfg.total_iters - 1)) {
            LossReport r;
            r.iteration = iter;
            r.mean_loss = tg.triplet_count ? tg.loss_sum / tg.triplet_count : 0.0;
            r.active_fraction = tg.triplet_count ? double(tg.active_count) / tg.triplet_count : 0.0;
            r.lr = lr;
            report(r);
        }
    }

    Checkpoint ckpt;
    ckpt.params = std::move(params);
    ckpt.step = uint64_t(cfg.total_iters);
    std::ostringstream os;
    os << rng;
    ckpt.rng_state = os.str();
    return ckpt;
}

Checkpoint train_from_manifest(const fs::path& manifest_path, const NetSpec& spec, int input_side,
                               const TrainConfig& cfg, const fs::path& out_ckpt,
                               const ReportSink& report) {
    PairDataset data = load_pair_dataset(manifest_path, input_side);
    Checkpoint ckpt = train(data, spec, input_side, cfg, report);
    save_checkpoint(ckpt, out_ckpt);
    return ckpt;
}

}  // namespace trackemb
