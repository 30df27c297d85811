#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace trackemb {

struct LayerSpec {
    enum class Kind { Conv, ReLU, MaxPool, FullyConnected };
    Kind kind = Kind::ReLU;
    // Conv: a=out_channels, b=kernel, c=stride, d=pad
    // MaxPool: a=kernel, b=stride
    // FullyConnected: a=out_dim
    int a = 0, b = 0, c = 0, d = 0;

    bool operator==(const LayerSpec&) const = default;

    static LayerSpec conv(int out_c, int k, int s, int p) {
        return {Kind::Conv, out_c, k, s, p};
    }
    static LayerSpec relu() { return {Kind::ReLU}; }
    static LayerSpec maxpool(int k, int s) { return {Kind::MaxPool, k, s}; }
    static LayerSpec fc(int out) { return {Kind::FullyConnected, out}; }
};

using NetSpec = std::vector<LayerSpec>;

// e.g. "conv(16,3,1,1)", "relu", "maxpool(2,2)", "fc(64)"
LayerSpec parse_layer_spec(const std::string& s);
std::string layer_spec_to_string(const LayerSpec& l);
NetSpec parse_net_spec(const std::vector<std::string>& strs);
std::vector<std::string> net_spec_to_strings(const NetSpec& spec);
uint64_t net_spec_hash(const NetSpec& spec, int input_side);

// Conv(16,3,1,1)-ReLU-MaxPool(2,2)-Conv(32,3,1,1)-ReLU-MaxPool(2,2)-FC(256)-ReLU-FC(64)
NetSpec default_net_spec();

struct Shape {
    int c = 0, h = 0, w = 0;
    size_t count() const { return size_t(c) * h * w; }
    bool operator==(const Shape&) const = default;
};

// Per-layer output shapes; index 0 is the input shape. Throws on inconsistency.
std::vector<Shape> shape_chain(const NetSpec& spec, int input_side);

struct LayerParams {
    std::vector<float> w;
    std::vector<float> b;
};

struct EncoderParams {
    NetSpec spec;
    int input_side = 0;
    int embed_dim = 0;
    std::vector<LayerParams> layers;  // one entry per spec layer (empty for ReLU/MaxPool)

    size_t param_count() const;
    std::vector<float> flatten() const;
    void unflatten(const std::vector<float>& flat);
};

using EncoderGrads = std::vector<LayerParams>;

EncoderParams init_params(const NetSpec& spec, int input_side, uint64_t seed);
EncoderGrads zero_grads(const EncoderParams& params);

// n patches, each (c,h,w) row-major, concatenated
struct Batch {
    int n = 0, c = 0, h = 0, w = 0;
    std::vector<float> v;

    Batch() = default;
    Batch(int n_, int c_, int h_, int w_)
        : n(n_), c(c_), h(h_), w(w_), v(size_t(n_) * c_ * h_ * w_, 0.f) {}
    size_t item_size() const { return size_t(c) * h * w; }
    float* item(int i) { return v.data() + size_t(i) * item_size(); }
    const float* item(int i) const { return v.data() + size_t(i) * item_size(); }
};

struct Embeddings {
    int n = 0, dim = 0;
    std::vector<float> v;  // row-major n x dim

    const float* row(int i) const { return v.data() + size_t(i) * dim; }
    float* row(int i) { return v.data() + size_t(i) * dim; }
};

// Cached per-layer activations for backprop.
struct Tape {
    int n = 0;
    std::vector<Batch> inputs;                 // input to each layer (shape-only for relu/pool)
    std::vector<std::vector<int32_t>> argmax;  // per maxpool layer output element
    std::vector<std::vector<uint8_t>> relu_mask;  // per relu layer: input > 0
};

Embeddings forward(const EncoderParams& params, const Batch& in, Tape* tape = nullptr);
EncoderGrads backward(const EncoderParams& params, const Tape& tape,
                      const Embeddings& grad_embeddings);

void sgd_step(EncoderParams& params, const EncoderGrads& grads, float lr, float weight_decay,
              float momentum = 0.f, EncoderGrads* momentum_buf = nullptr);

struct Checkpoint {
    uint32_t version = 1;
    EncoderParams params;
    uint64_t step = 0;
    std::string rng_state;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace trackemb
