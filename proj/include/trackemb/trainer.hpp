#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "trackemb/encoder.hpp"

namespace trackemb {

struct TrainConfig {
    double margin = 0.5;
    double weight_decay = 0.0005;
    int k_negatives = 4;
    int batch_size = 100;  // patches, i.e. batch_size/2 pairs
    double lr_initial = 0.001;
    double lr_decay_factor = 10.0;
    int lr_step_iters = 1000;
    int random_phase_iters = 1000;  // random negatives before hard mining kicks in
    int total_iters = 3000;
    uint64_t seed = 0;
    int report_interval = 50;
    int checkpoint_interval = 0;  // 0 = final only
    double momentum = 0.0;
    bool mean_subtract = false;

    void validate() const;
    double lr_at(int iter) const;
};

// (query, positive) patch pairs over a flat patch pool.
struct PairDataset {
    Batch patches;                        // all patches, (1, side, side)
    std::vector<std::string> video_ids;   // per patch
    std::vector<std::pair<int, int>> pairs;  // (query idx, positive idx)
};

PairDataset load_pair_dataset(const std::filesystem::path& manifest_path, int expected_side);

struct TripletBatch {
    Batch patches;
    std::vector<std::string> video_ids;      // per patch
    std::vector<std::pair<int, int>> pairs;  // indices into patches
    std::vector<std::vector<int>> negatives; // per pair, indices into patches
};

double cosine_distance(const float* f1, const float* f2, int dim, bool* degenerate = nullptr);
double triplet_loss(double d_pos, double d_neg, double margin);

std::vector<std::vector<int>> sample_random_negatives(const std::vector<std::string>& video_ids,
                                                      const std::vector<std::pair<int, int>>& pairs,
                                                      int k, std::mt19937_64& rng);

std::vector<std::vector<int>> select_hard_negatives(const std::vector<std::string>& video_ids,
                                                    const std::vector<std::pair<int, int>>& pairs,
                                                    const Embeddings& embeddings, int k,
                                                    double margin);

struct TripletGradResult {
    double loss_sum = 0;        // sum of hinge losses over all selected triplets
    int triplet_count = 0;
    int active_count = 0;       // triplets with nonzero loss
    Embeddings grad;            // d(loss_sum)/d(embeddings)
};

// Hinge + cosine-distance chain rule at the embedding level.
TripletGradResult triplet_gradients(const Embeddings& emb,
                                    const std::vector<std::pair<int, int>>& pairs,
                                    const std::vector<std::vector<int>>& negatives, double margin);

struct BatchObjective {
    double objective = 0;  // (weight_decay/2)*||W||^2 + sum of triplet losses
    double loss_sum = 0;
    double active_fraction = 0;
    EncoderGrads grads;
};

BatchObjective batch_objective(const EncoderParams& params, const TripletBatch& batch,
                               const TrainConfig& cfg);

struct LossReport {
    int iteration = 0;
    double mean_loss = 0;
    double active_fraction = 0;
    double lr = 0;
};

std::string loss_report_csv_header();
std::string loss_report_csv_row(const LossReport& r);

using ReportSink = std::function<void(const LossReport&)>;

Checkpoint train(const PairDataset& data, const NetSpec& spec, int input_side,
                 const TrainConfig& cfg, const ReportSink& report = {});

Checkpoint train_from_manifest(const std::filesystem::path& manifest_path, const NetSpec& spec,
                               int input_side, const TrainConfig& cfg,
                               const std::filesystem::path& out_ckpt,
                               const ReportSink& report = {});

}  // namespace trackemb
