#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include "trackemb/encoder.hpp"
#include "trackemb/eval.hpp"
#include "trackemb/trainer.hpp"

using namespace trackemb;

namespace {

// Identity-style encoder: a single fc layer whose weights copy the flattened patch,
// so embeddings equal the raw pixels and retrieval geometry can be hand-built.
EncoderParams identity_encoder(int side) {
    NetSpec spec = {LayerSpec::fc(side * side)};
    EncoderParams p = init_params(spec, side, 0);
    std::fill(p.layers[0].w.begin(), p.layers[0].w.end(), 0.f);
    int d = side * side;
    for (int i = 0; i < d; ++i) p.layers[0].w[size_t(i) * d + i] = 1.f;
    std::fill(p.layers[0].b.begin(), p.layers[0].b.end(), 0.f);
    return p;
}

LabeledPatchSet set_from_rows(const std::vector<std::vector<float>>& rows,
                              const std::vector<int>& labels, int side) {
    LabeledPatchSet s;
    s.patches = Batch(int(rows.size()), 1, side, side);
    for (size_t i = 0; i < rows.size(); ++i)
        std::copy(rows[i].begin(), rows[i].end(), s.patches.item(int(i)));
    s.labels = labels;
    s.n_classes = *std::max_element(labels.begin(), labels.end()) + 1;
    return s;
}

}  // namespace

TEST_CASE("retrieval of the db against itself at k=1 is perfect") {
    auto tracks = generate_synthetic_tracks(3, 4, 3, 5, 32);
    auto set = tracks_to_labeled_set(tracks, 0);
    auto enc = init_params(default_net_spec(), 32, 7);
    auto rep = nn_retrieval_rate(set, set, {&enc}, 1);
    CHECK(rep.rate == 1.0);
    CHECK(rep.k == 1);
    CHECK(rep.queries == set.patches.n);
    for (int c : rep.per_query_correct) CHECK(c == 1);
}

TEST_CASE("hand-built 2d embeddings rank exactly like a brute-force sort") {
    // identity encoder on 2x1... use 2x2 side with only two informative pixels.
    const int side = 2;
    auto enc = identity_encoder(side);
    // queries: one per class along the axes; db: points at known angles
    std::vector<std::vector<float>> qrows = {{1.f, 0.f, 0.f, 0.f}, {0.f, 1.f, 0.f, 0.f}};
    std::vector<std::vector<float>> drows = {
        {1.f, 0.1f, 0.f, 0.f},   // close to q0
        {0.1f, 1.f, 0.f, 0.f},   // close to q1
        {1.f, 0.9f, 0.f, 0.f},   // diagonal-ish
        {0.9f, 1.f, 0.f, 0.f},   // diagonal-ish
    };
    auto q = set_from_rows(qrows, {0, 1}, side);
    auto db = set_from_rows(drows, {0, 1, 0, 1}, side);

    auto rep = nn_retrieval_rate(q, db, {&enc}, 2);
    // brute force for q0: distances to db rows by cosine; nearest two are rows 0 and 2
    // (both label 0) -> 2 correct; for q1 rows 1 and 3 (both label 1) -> 2 correct.
    REQUIRE(rep.per_query_correct.size() == 2);
    CHECK(rep.per_query_correct[0] == 2);
    CHECK(rep.per_query_correct[1] == 2);
    CHECK(rep.rate == 1.0);
    CHECK(rep.per_class_rate.at(0) == 1.0);
    CHECK(rep.per_class_rate.at(1) == 1.0);
}

TEST_CASE("random embeddings on a balanced 10-class db retrieve at chance") {
    // db patches i.i.d. noise, labels balanced; a random encoder gives chance-level
    // label agreement: rate ~ Binomial(k*queries, 0.1)/ (k*queries).
    const int side = 8, classes = 10, per_class = 30;
    std::mt19937_64 rng(13);
    std::uniform_real_distribution<float> dist(0.f, 1.f);
    std::vector<std::vector<float>> rows;
    std::vector<int> labels;
    for (int c = 0; c < classes; ++c)
        for (int i = 0; i < per_class; ++i) {
            std::vector<float> r(side * side);
            for (auto& x : r) x = dist(rng);
            rows.push_back(std::move(r));
            labels.push_back(c);
        }
    auto db = set_from_rows(rows, labels, side);

    std::vector<std::vector<float>> qrows;
    std::vector<int> qlabels;
    for (int i = 0; i < 100; ++i) {
        std::vector<float> r(side * side);
        for (auto& x : r) x = dist(rng);
        qrows.push_back(std::move(r));
        qlabels.push_back(i % classes);
    }
    auto q = set_from_rows(qrows, qlabels, side);

    NetSpec spec = {LayerSpec::fc(16)};
    auto enc = init_params(spec, side, 29);
    const int k = 5;
    auto rep = nn_retrieval_rate(q, db, {&enc}, k);
    double n = double(k) * q.patches.n;
    double sigma = std::sqrt(n * 0.1 * 0.9) / n;
    CHECK(std::abs(rep.rate - 0.1) < 3 * sigma);
}

TEST_CASE("retrieval is invariant to uniform embedding rescaling") {
    auto tracks = generate_synthetic_tracks(5, 3, 3, 4, 32);
    auto set = tracks_to_labeled_set(tracks, 1);
    auto q = tracks_to_labeled_set(tracks, 0);
    auto enc = init_params(default_net_spec(), 32, 3);
    auto rep1 = nn_retrieval_rate(q, set, {&enc}, 3);

    EncoderParams scaled = enc;  // scaling the final fc scales all embeddings by 4
    for (auto& w : scaled.layers.back().w) w *= 4.f;
    for (auto& b : scaled.layers.back().b) b *= 4.f;
    auto rep2 = nn_retrieval_rate(q, set, {&scaled}, 3);
    CHECK(rep1.per_query_correct == rep2.per_query_correct);
    CHECK(rep1.rate == rep2.rate);
}

TEST_CASE("inserting a zero-distance correct item raises the correct count by one") {
    const int side = 2;
    auto enc = identity_encoder(side);
    std::vector<std::vector<float>> qrows = {{1.f, 0.2f, 0.f, 0.f}};
    std::vector<std::vector<float>> drows = {{0.f, 1.f, 0.f, 0.f},
                                             {0.1f, 1.f, 0.f, 0.f},
                                             {1.f, 0.9f, 0.f, 0.f}};
    auto q = set_from_rows(qrows, {0}, side);
    auto db = set_from_rows(drows, {1, 1, 1}, side);
    db.n_classes = 2;
    const int k = 2;
    auto before = nn_retrieval_rate(q, db, {&enc}, k);
    REQUIRE(before.per_query_correct[0] < k);

    drows.push_back(qrows[0]);  // duplicate of the query, correct label
    auto db2 = set_from_rows(drows, {1, 1, 1, 0}, side);
    auto after = nn_retrieval_rate(q, db2, {&enc}, k);
    CHECK(after.per_query_correct[0] == before.per_query_correct[0] + 1);
}

TEST_CASE("retrieval rejects empty or undersized sets") {
    auto tracks = generate_synthetic_tracks(1, 2, 2, 3, 32);
    auto set = tracks_to_labeled_set(tracks, 0);
    auto enc = init_params(default_net_spec(), 32, 1);
    LabeledPatchSet empty;
    CHECK_THROWS_AS(nn_retrieval_rate(empty, set, {&enc}, 1), std::exception);
    CHECK_THROWS_AS(nn_retrieval_rate(set, empty, {&enc}, 1), std::exception);
    CHECK_THROWS_AS(nn_retrieval_rate(set, set, {&enc}, set.patches.n + 1), std::exception);
}

TEST_CASE("linear probe separates a linearly separable 2-class set") {
    const int side = 4;
    auto enc = identity_encoder(side);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<float> dist(0.f, 0.3f);
    std::vector<std::vector<float>> rows;
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) {
        std::vector<float> r(side * side);
        for (auto& x : r) x = dist(rng);
        int label = i % 2;
        r[0] += label ? 0.7f : 0.f;  // class 1 lights up pixel 0
        rows.push_back(std::move(r));
        labels.push_back(label);
    }
    auto train_set = set_from_rows({rows.begin(), rows.begin() + 30}, {labels.begin(), labels.begin() + 30}, side);
    auto test_set = set_from_rows({rows.begin() + 30, rows.end()}, {labels.begin() + 30, labels.end()}, side);
    auto res = train_linear_probe(train_set, test_set, enc, 200, 0.5);
    CHECK(res.test_accuracy == 1.0);
}

TEST_CASE("linear probe on shuffled labels performs near chance") {
    const int side = 6, classes = 4;
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<float> dist(0.f, 1.f);
    auto fill = [&](int n) {
        std::vector<std::vector<float>> rows;
        std::vector<int> labels;
        for (int i = 0; i < n; ++i) {
            std::vector<float> r(side * side);
            for (auto& x : r) x = dist(rng);
            rows.push_back(std::move(r));
            labels.push_back(int(rng() % classes));
        }
        return set_from_rows(rows, labels, side);
    };
    auto train_set = fill(120);
    train_set.n_classes = classes;
    auto test_set = fill(200);
    test_set.n_classes = classes;
    auto enc = identity_encoder(side);
    auto res = train_linear_probe(train_set, test_set, enc, 50, 0.1);
    double p = 1.0 / classes;
    double sigma = std::sqrt(p * (1 - p) / test_set.patches.n);
    // generous 5-sigma band: probe may pick up slight spurious structure from
    // the finite random train set
    CHECK(std::abs(res.test_accuracy - p) < 5 * sigma + 0.05);
}

TEST_CASE("probe training loss is non-increasing with a small lr") {
    auto tracks = generate_synthetic_tracks(21, 3, 4, 4, 32);
    auto train_set = tracks_to_labeled_set(tracks, 0);
    auto test_set = tracks_to_labeled_set(tracks, 2);
    auto enc = init_params(default_net_spec(), 32, 4);
    auto res = train_linear_probe(train_set, test_set, enc, 30, 0.01);
    REQUIRE(res.train_losses.size() >= 2);
    for (size_t i = 1; i < res.train_losses.size(); ++i)
        CHECK(res.train_losses[i] <= res.train_losses[i - 1] + 1e-9);
}

TEST_CASE("probe rejects single-class training data") {
    auto tracks = generate_synthetic_tracks(2, 1, 3, 3, 32);
    auto set = tracks_to_labeled_set(tracks, 0);
    auto enc = init_params(default_net_spec(), 32, 1);
    CHECK_THROWS_AS(train_linear_probe(set, set, enc, 5, 0.1), std::exception);
}

TEST_CASE("concatenated embeddings are ordered segments of the member nets") {
    auto e1 = init_params(default_net_spec(), 32, 1);
    auto e2 = init_params(default_net_spec(), 32, 2);
    auto tracks = generate_synthetic_tracks(6, 2, 2, 3, 32);
    Patch p = tracks.tracks[0].frames[0];

    auto single = concat_embeddings({&e1}, p);
    Batch b(1, 1, 32, 32);
    b.v.assign(p.px.begin(), p.px.end());
    Embeddings direct = forward(e1, b);
    CHECK(single == direct.v);

    auto both = concat_embeddings({&e1, &e2}, p);
    Embeddings d2 = forward(e2, b);
    REQUIRE(both.size() == size_t(direct.dim + d2.dim));
    CHECK(std::equal(direct.v.begin(), direct.v.end(), both.begin()));
    CHECK(std::equal(d2.v.begin(), d2.v.end(), both.begin() + direct.dim));
}

TEST_CASE("embed_set concatenates across the batch dimension consistently") {
    auto e1 = init_params(default_net_spec(), 32, 5);
    auto e2 = init_params(default_net_spec(), 32, 6);
    auto tracks = generate_synthetic_tracks(7, 2, 2, 3, 32);
    auto set = tracks_to_labeled_set(tracks, 0);
    Embeddings both = embed_set({&e1, &e2}, set.patches);
    Embeddings a = forward(e1, set.patches);
    Embeddings b = forward(e2, set.patches);
    REQUIRE(both.dim == a.dim + b.dim);
    REQUIRE(both.n == set.patches.n);
    for (int i = 0; i < both.n; ++i) {
        CHECK(std::equal(a.row(i), a.row(i) + a.dim, both.row(i)));
        CHECK(std::equal(b.row(i), b.row(i) + b.dim, both.row(i) + a.dim));
    }
}

TEST_CASE("synthetic tracks are deterministic per seed") {
    auto a = generate_synthetic_tracks(9, 3, 2, 4, 32);
    auto b = generate_synthetic_tracks(9, 3, 2, 4, 32);
    auto c = generate_synthetic_tracks(10, 3, 2, 4, 32);
    REQUIRE(a.tracks.size() == b.tracks.size());
    bool all_equal = true, any_diff_seed = false;
    for (size_t t = 0; t < a.tracks.size(); ++t) {
        CHECK(a.tracks[t].class_id == b.tracks[t].class_id);
        for (size_t f = 0; f < a.tracks[t].frames.size(); ++f) {
            if (a.tracks[t].frames[f].px != b.tracks[t].frames[f].px) all_equal = false;
            if (a.tracks[t].frames[f].px != c.tracks[t].frames[f].px) any_diff_seed = true;
        }
    }
    CHECK(all_equal);
    CHECK(any_diff_seed);
}

TEST_CASE("single-frame tracks yield identical pair members") {
    auto tracks = generate_synthetic_tracks(4, 2, 2, 1, 32);
    auto ds = tracks_to_pairs(tracks, 5);  // gap clamps to the only frame
    REQUIRE(!ds.pairs.empty());
    for (const auto& pr : ds.pairs) {
        const float* a = ds.patches.item(pr.first);
        const float* b = ds.patches.item(pr.second);
        CHECK(std::equal(a, a + ds.patches.item_size(), b));
    }
}

TEST_CASE("same-class instances share a class but differ pixelwise") {
    auto tracks = generate_synthetic_tracks(15, 3, 2, 3, 32);
    for (int c = 0; c < tracks.n_classes; ++c) {
        std::vector<const SyntheticTrack*> members;
        for (const auto& t : tracks.tracks)
            if (t.class_id == c) members.push_back(&t);
        REQUIRE(members.size() == 2);
        CHECK(members[0]->video_id != members[1]->video_id);
        double mad = 0;
        const auto& pa = members[0]->frames[0].px;
        const auto& pb = members[1]->frames[0].px;
        REQUIRE(pa.size() == pb.size());
        for (size_t i = 0; i < pa.size(); ++i) mad += std::abs(pa[i] - pb[i]);
        mad /= double(pa.size());
        CHECK(mad > 0.0);
    }
}

TEST_CASE("labeled sets built from tracks are dense and consistent") {
    auto tracks = generate_synthetic_tracks(33, 5, 3, 6, 32);
    auto set = tracks_to_labeled_set(tracks, 3);
    CHECK(set.n_classes == 5);
    CHECK(set.patches.n == 15);
    CHECK(set.labels.size() == 15);
    std::vector<int> seen(5, 0);
    for (int l : set.labels) {
        REQUIRE(l >= 0);
        REQUIRE(l < 5);
        seen[size_t(l)]++;
    }
    for (int cnt : seen) CHECK(cnt == 3);
}
