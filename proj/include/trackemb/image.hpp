#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace trackemb {

// Row-major grayscale grid, intensities in [0,1].
struct Image {
    int h = 0;
    int w = 0;
    std::vector<float> px;

    Image() = default;
    Image(int h_, int w_, float fill = 0.f) : h(h_), w(w_), px(size_t(h_) * w_, fill) {}

    float at(int r, int c) const { return px[size_t(r) * w + c]; }
    float& at(int r, int c) { return px[size_t(r) * w + c]; }
    size_t size() const { return px.size(); }
};

struct Frame : Image {
    int index = 0;
    Frame() = default;
    Frame(Image img, int idx) : Image(std::move(img)), index(idx) {}
};

// Top-left corner (x = column, y = row) plus extent.
struct BBox {
    int x = 0;
    int y = 0;
    int w = 0;
    int h = 0;

    bool operator==(const BBox&) const = default;
    bool inside(int frame_h, int frame_w) const {
        return w >= 1 && h >= 1 && x >= 0 && y >= 0 && x + w <= frame_w && y + h <= frame_h;
    }
};

struct PatchProvenance {
    std::string video_id;
    int frame_index = 0;
    BBox box;
};

// Square network-input patch.
struct Patch {
    int side = 0;
    std::vector<float> px;
    std::optional<PatchProvenance> prov;
};

float rec601_luma(float r, float g, float b);

Image crop(const Image& img, const BBox& box);
Image resize_bilinear(const Image& img, int out_h, int out_w);

// Crop + resize to the network input side, carrying provenance.
Patch extract_patch(const Frame& frame, const BBox& box, int side, const std::string& video_id);

// "TRKGRID v1" text header + little-endian f32 payload.
void write_rawgrid(const Image& img, const std::filesystem::path& path);
Image read_rawgrid(const std::filesystem::path& path);

void write_pgm(const Image& img, const std::filesystem::path& path);
Image read_pgm(const std::filesystem::path& path);
Image read_png(const std::filesystem::path& path);

// Frames sorted by zero-padded numeric stem; PNG and PGM accepted.
std::vector<Frame> load_frame_sequence(const std::filesystem::path& dir);

}  // namespace trackemb
