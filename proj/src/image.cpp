#include "trackemb/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>

namespace fs = std::filesystem;

namespace trackemb {

float rec601_luma(float r, float g, float b) {
    return 0.299f * r + 0.587f * g + 0.114f * b;
}

Image crop(const Image& img, const BBox& box) {
    if (!box.inside(img.h, img.w))
        throw std::invalid_argument("crop: box exceeds frame bounds");
    Image out(box.h, box.w);
    for (int r = 0; r < box.h; ++r)
        std::copy_n(&img.px[size_t(box.y + r) * img.w + box.x], box.w, &out.px[size_t(r) * box.w]);
    return out;
}

Image resize_bilinear(const Image& img, int out_h, int out_w) {
    if (img.h < 1 || img.w < 1) throw std::invalid_argument("resize_bilinear: empty input");
    if (out_h < 1 || out_w < 1) throw std::invalid_argument("resize_bilinear: zero output dimension");
    if (out_h == img.h && out_w == img.w) return img;

    Image out(out_h, out_w);
    const float sy = float(img.h) / out_h;
    const float sx = float(img.w) / out_w;
    for (int r = 0; r < out_h; ++r) {
        // half-pixel centers (align-corners-false)
        float src_y = (r + 0.5f) * sy - 0.5f;
        src_y = std::clamp(src_y, 0.f, float(img.h - 1));
        int y0 = int(src_y);
        int y1 = std::min(y0 + 1, img.h - 1);
        float fy = src_y - y0;
        for (int c = 0; c < out_w; ++c) {
            float src_x = (c + 0.5f) * sx - 0.5f;
            src_x = std::clamp(src_x, 0.f, float(img.w - 1));
            int x0 = int(src_x);
            int x1 = std::min(x0 + 1, img.w - 1);
            float fx = src_x - x0;
            float top = img.at(y0, x0) * (1 - fx) + img.at(y0, x1) * fx;
            float bot = img.at(y1, x0) * (1 - fx) + img.at(y1, x1) * fx;
            out.at(r, c) = std::clamp(top * (1 - fy) + bot * fy, 0.f, 1.f);
        }
    }
    return out;
}

Patch extract_patch(const Frame& frame, const BBox& box, int side, const std::string& video_id) {
    Image resized = resize_bilinear(crop(frame, box), side, side);
    Patch p;
    p.side = side;
    p.px = std::move(resized.px);
    p.prov = PatchProvenance{video_id, frame.index, box};
    return p;
}

void write_rawgrid(const Image& img, const fs::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_rawgrid: cannot open " + path.string());
    f << "TRKGRID v1\n" << img.h << " " << img.w << "\n";
    static_assert(sizeof(float) == 4);
    f.write(reinterpret_cast<const char*>(img.px.data()), std::streamsize(img.px.size() * 4));
    if (!f) throw std::runtime_error("write_rawgrid: write failed for " + path.string());
}

Image read_rawgrid(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_rawgrid: cannot open " + path.string());
    std::string magic;
    std::getline(f, magic);
    if (magic != "TRKGRID v1")
        throw std::runtime_error("read_rawgrid: bad magic in " + path.string());
    int h = 0, w = 0;
    f >> h >> w;
    f.ignore(1);  // the newline after the dims
    if (h < 1 || w < 1) throw std::runtime_error("read_rawgrid: bad dims in " + path.string());
    Image img(h, w);
    f.read(reinterpret_cast<char*>(img.px.data()), std::streamsize(img.px.size() * 4));
    if (f.gcount() != std::streamsize(img.px.size() * 4))
        throw std::runtime_error("read_rawgrid: truncated payload in " + path.string());
    return img;
}

void write_pgm(const Image& img, const fs::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("write_pgm: cannot open " + path.string());
    f << "P5\n" << img.w << " " << img.h << "\n255\n";
    std::vector<unsigned char> row(img.w);
    for (int r = 0; r < img.h; ++r) {
        for (int c = 0; c < img.w; ++c)
            row[c] = (unsigned char)std::lround(std::clamp(img.at(r, c), 0.f, 1.f) * 255.f);
        f.write(reinterpret_cast<const char*>(row.data()), img.w);
    }
}

Image read_pgm(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read_pgm: cannot open " + path.string());
    std::string magic;
    f >> magic;
    if (magic != "P5") throw std::runtime_error("read_pgm: unsupported format in " + path.string());
    int w = 0, h = 0, maxv = 0;
    // skip whitespace and '#' comment lines between header tokens
    auto next_int = [&](int& out) {
        while (true) {
            int ch = f.peek();
            if (ch == '#') { std::string line; std::getline(f, line); }
            else if (std::isspace(ch)) f.get();
            else break;
        }
        f >> out;
    };
    next_int(w);
    next_int(h);
    next_int(maxv);
    f.ignore(1);
    if (!f || w < 1 || h < 1 || maxv < 1 || maxv > 255)
        throw std::runtime_error("read_pgm: bad header in " + path.string());
    std::vector<unsigned char> buf(size_t(w) * h);
    f.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size()));
    if (f.gcount() != std::streamsize(buf.size()))
        throw std::runtime_error("read_pgm: truncated payload in " + path.string());
    Image img(h, w);
    for (size_t i = 0; i < buf.size(); ++i) img.px[i] = float(buf[i]) / float(maxv);
    return img;
}

Image read_png(const fs::path& path) {
    FILE* fp = std::fopen(path.c_str(), "rb");
    if (!fp) throw std::runtime_error("read_png: cannot open " + path.string());
    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
        if (png) png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("read_png: libpng init failed for " + path.string());
    }
    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        std::fclose(fp);
        throw std::runtime_error("read_png: decode failed for " + path.string());
    }
    png_init_io(png, fp);
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    png_byte color = png_get_color_type(png, info);
    png_byte depth = png_get_bit_depth(png, info);

    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
    png_read_update_info(png, info);

    const int channels = png_get_channels(png, info);
    std::vector<png_byte> rowbuf(png_get_rowbytes(png, info));
    Image img{int(h), int(w)};
    for (png_uint_32 r = 0; r < h; ++r) {
        png_read_row(png, rowbuf.data(), nullptr);
        for (png_uint_32 c = 0; c < w; ++c) {
            if (channels >= 3) {
                float rr = rowbuf[c * channels + 0] / 255.f;
                float gg = rowbuf[c * channels + 1] / 255.f;
                float bb = rowbuf[c * channels + 2] / 255.f;
                img.at(int(r), int(c)) = rec601_luma(rr, gg, bb);
            } else {
                img.at(int(r), int(c)) = rowbuf[c] / 255.f;
            }
        }
    }
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    return img;
}

std::vector<Frame> load_frame_sequence(const fs::path& dir) {
    if (!fs::is_directory(dir))
        throw std::runtime_error("load_frame_sequence: not a directory: " + dir.string());

    std::map<long, fs::path> ordered;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        std::string ext = entry.path().extension().string();
        if (ext != ".png" && ext != ".pgm") continue;
        std::string stem = entry.path().stem().string();
        if (stem.empty() || stem.find_first_not_of("0123456789") != std::string::npos)
            throw std::runtime_error("load_frame_sequence: non-numeric stem: " +
                                     entry.path().filename().string());
        ordered[std::stol(stem)] = entry.path();
    }
    if (ordered.empty())
        throw std::runtime_error("load_frame_sequence: no frames in " + dir.string());

    std::vector<Frame> frames;
    frames.reserve(ordered.size());
    for (const auto& [idx, path] : ordered) {
        Image img = path.extension() == ".png" ? read_png(path) : read_pgm(path);
        if (!frames.empty() && (img.h != frames[0].h || img.w != frames[0].w))
            throw std::runtime_error("load_frame_sequence: mixed dimensions at " +
                                     path.filename().string());
        frames.emplace_back(std::move(img), int(idx));
    }
    return frames;
}

}  // namespace trackemb
