#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "trackemb/encoder.hpp"
#include "trackemb/image.hpp"
#include "trackemb/trainer.hpp"

namespace trackemb {

struct LabeledPatchSet {
    Batch patches;
    std::vector<int> labels;  // dense in [0, n_classes)
    int n_classes = 0;
};

struct RetrievalReport {
    int k = 0;
    int queries = 0;
    std::vector<int> per_query_correct;
    double rate = 0;  // total correct / (k * queries)
    std::map<int, double> per_class_rate;
};

// Concatenated embeddings across an encoder ensemble.
Embeddings embed_set(const std::vector<const EncoderParams*>& encoders, const Batch& patches);

std::vector<float> concat_embeddings(const std::vector<const EncoderParams*>& encoders,
                                     const Patch& patch);

RetrievalReport nn_retrieval_rate(const LabeledPatchSet& queries, const LabeledPatchSet& db,
                                  const std::vector<const EncoderParams*>& encoders, int k);

struct ProbeResult {
    double test_accuracy = 0;
    std::vector<double> train_losses;  // mean CE per epoch
};

ProbeResult train_linear_probe(const LabeledPatchSet& train, const LabeledPatchSet& test,
                               const EncoderParams& encoder, int epochs, double lr);

struct SyntheticTrack {
    int class_id = 0;
    std::string video_id;
    std::vector<Patch> frames;
};

struct SyntheticTracks {
    int side = 0;
    int n_classes = 0;
    std::vector<SyntheticTrack> tracks;
};

// Procedurally textured shapes under smooth translation/scale/brightness jitter.
// Class picks the shape family, instance picks the texture; deterministic per seed.
SyntheticTracks generate_synthetic_tracks(uint64_t seed, int n_classes, int instances_per_class,
                                          int frames_per_track, int side = 32);

// (first, first+gap) patch pairs per track, one video_id per instance.
PairDataset tracks_to_pairs(const SyntheticTracks& tracks, int gap);

// One labeled patch per track taken at frame_offset (clamped to track length).
LabeledPatchSet tracks_to_labeled_set(const SyntheticTracks& tracks, int frame_offset);

}  // namespace trackemb
