#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include "trackemb/eval.hpp"
#include "trackemb/mining.hpp"
#include "trackemb/motion.hpp"
#include "trackemb/trainer.hpp"

namespace py = pybind11;
using namespace trackemb;

namespace {

Image image_from_array(py::array_t<float, py::array::c_style | py::array::forcecast> arr) {
    if (arr.ndim() != 2) throw std::invalid_argument("expected a 2-D float array");
    Image img(int(arr.shape(0)), int(arr.shape(1)));
    std::copy_n(arr.data(), img.size(), img.px.data());
    return img;
}

py::array_t<float> image_to_array(const Image& img) {
    py::array_t<float> arr({img.h, img.w});
    std::copy_n(img.px.data(), img.size(), arr.mutable_data());
    return arr;
}

Frame frame_from_array(py::array_t<float, py::array::c_style | py::array::forcecast> arr,
                       int index) {
    return Frame(image_from_array(std::move(arr)), index);
}

Batch batch_from_array(py::array_t<float, py::array::c_style | py::array::forcecast> arr) {
    if (arr.ndim() != 3) throw std::invalid_argument("expected an (n, h, w) float array");
    Batch b(int(arr.shape(0)), 1, int(arr.shape(1)), int(arr.shape(2)));
    std::copy_n(arr.data(), b.v.size(), b.v.data());
    return b;
}

py::array_t<float> embeddings_to_array(const Embeddings& e) {
    py::array_t<float> arr({e.n, e.dim});
    std::copy_n(e.v.data(), e.v.size(), arr.mutable_data());
    return arr;
}

py::array_t<float> patch_to_array(const Patch& p) {
    py::array_t<float> arr({p.side, p.side});
    std::copy_n(p.px.data(), p.px.size(), arr.mutable_data());
    return arr;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "tracked-patch triplet embedding toolkit";

    // --- image ---
    py::class_<BBox>(m, "BBox")
        .def(py::init<int, int, int, int>(), py::arg("x"), py::arg("y"), py::arg("w"),
             py::arg("h"))
        .def_readwrite("x", &BBox::x)
        .def_readwrite("y", &BBox::y)
        .def_readwrite("w", &BBox::w)
        .def_readwrite("h", &BBox::h)
        .def("__repr__", [](const BBox& b) {
            return "BBox(" + std::to_string(b.x) + "," + std::to_string(b.y) + "," +
                   std::to_string(b.w) + "," + std::to_string(b.h) + ")";
        });

    m.def("crop", [](py::array_t<float> img, const BBox& box) {
        return image_to_array(crop(image_from_array(std::move(img)), box));
    });
    m.def("resize_bilinear", [](py::array_t<float> img, int out_h, int out_w) {
        return image_to_array(resize_bilinear(image_from_array(std::move(img)), out_h, out_w));
    });
    m.def("rec601_luma", &rec601_luma);
    m.def("write_rawgrid", [](py::array_t<float> img, const std::filesystem::path& path) {
        write_rawgrid(image_from_array(std::move(img)), path);
    });
    m.def("read_rawgrid",
          [](const std::filesystem::path& path) { return image_to_array(read_rawgrid(path)); });
    m.def("write_pgm", [](py::array_t<float> img, const std::filesystem::path& path) {
        write_pgm(image_from_array(std::move(img)), path);
    });
    m.def("read_pgm",
          [](const std::filesystem::path& path) { return image_to_array(read_pgm(path)); });

    // --- motion ---
    py::class_<InterestPoint>(m, "InterestPoint")
        .def(py::init([](float x, float y, float s) { return InterestPoint{x, y, s}; }),
             py::arg("x"), py::arg("y"), py::arg("score") = 0.f)
        .def_readwrite("x", &InterestPoint::x)
        .def_readwrite("y", &InterestPoint::y)
        .def_readwrite("score", &InterestPoint::score);

    py::class_<PointFlow>(m, "PointFlow")
        .def(py::init([](float dx, float dy, bool valid) {
                 PointFlow f;
                 f.dx = dx;
                 f.dy = dy;
                 f.valid = valid;
                 return f;
             }),
             py::arg("dx") = 0.f, py::arg("dy") = 0.f, py::arg("valid") = true)
        .def_readwrite("point", &PointFlow::point)
        .def_readwrite("dx", &PointFlow::dx)
        .def_readwrite("dy", &PointFlow::dy)
        .def_readwrite("valid", &PointFlow::valid);

    py::class_<Homography>(m, "Homography")
        .def(py::init<>())
        .def("apply", &Homography::apply)
        .def("matrix", [](const Homography& h) {
            py::array_t<double> arr({3, 3});
            std::copy_n(h.m.data(), 9, arr.mutable_data());
            return arr;
        });

    py::enum_<MotionLabel>(m, "MotionLabel")
        .value("Moving", MotionLabel::Moving)
        .value("Static", MotionLabel::Static)
        .value("Invalid", MotionLabel::Invalid);

    py::enum_<GateVerdict>(m, "GateVerdict")
        .value("Accept", GateVerdict::Accept)
        .value("RejectTooFew", GateVerdict::RejectTooFew)
        .value("RejectTooMany", GateVerdict::RejectTooMany);

    py::class_<FrameGate>(m, "FrameGate")
        .def_readonly("moving_fraction", &FrameGate::moving_fraction)
        .def_readonly("verdict", &FrameGate::verdict);

    m.def(
        "detect_interest_points",
        [](py::array_t<float> frame, int max_n) {
            return detect_interest_points(frame_from_array(std::move(frame), 0), max_n);
        },
        py::arg("frame"), py::arg("max_n") = 200);
    m.def(
        "lk_flow",
        [](py::array_t<float> prev, py::array_t<float> next,
           const std::vector<InterestPoint>& pts) {
            return lk_flow(frame_from_array(std::move(prev), 0),
                           frame_from_array(std::move(next), 1), pts);
        },
        py::arg("prev"), py::arg("next"), py::arg("points"));
    m.def("estimate_homography_ransac",
          [](const std::vector<PointMatch>& matches, int iters, double tol, uint64_t seed) {
              auto res = estimate_homography_ransac(matches, iters, tol, seed);
              return py::make_tuple(res.h, res.inliers);
          });
    m.def("residual_flow", &residual_flow);
    m.def("classify_moving", &classify_moving, py::arg("residuals"), py::arg("threshold") = 0.5);
    m.def("gate_frame", &gate_frame, py::arg("labels"), py::arg("low") = 0.25,
          py::arg("high") = 0.75);

    // --- mining ---
    py::class_<TrackedPair>(m, "TrackedPair")
        .def_readwrite("video_id", &TrackedPair::video_id)
        .def_readwrite("first_frame", &TrackedPair::first_frame)
        .def_readwrite("first_box", &TrackedPair::first_box)
        .def_readwrite("last_frame", &TrackedPair::last_frame)
        .def_readwrite("last_box", &TrackedPair::last_box);

    m.def(
        "best_window",
        [](const std::vector<std::pair<float, float>>& pts, int fh, int fw, int wh, int ww,
           int stride) -> py::object {
            auto b = best_window(pts, fh, fw, wh, ww, stride);
            if (!b) return py::none();
            return py::cast(*b);
        },
        py::arg("moving_points"), py::arg("frame_h"), py::arg("frame_w"), py::arg("win_h"),
        py::arg("win_w"), py::arg("stride"));
    m.def(
        "track_box",
        [](py::array_t<float> frames, const BBox& start, int track_len, int radius) {
            auto arr = py::array_t<float, py::array::c_style | py::array::forcecast>(frames);
            if (arr.ndim() != 3) throw std::invalid_argument("expected (t, h, w) array");
            std::vector<Frame> seq;
            for (int t = 0; t < arr.shape(0); ++t) {
                Image img(int(arr.shape(1)), int(arr.shape(2)));
                std::copy_n(arr.data() + size_t(t) * img.size(), img.size(), img.px.data());
                seq.emplace_back(std::move(img), t);
            }
            TrackResult res = track_box(seq, start, track_len, radius);
            return py::make_tuple(res.boxes, res.truncated);
        },
        py::arg("frames"), py::arg("start"), py::arg("track_len"), py::arg("search_radius") = 8);

    // --- encoder / trainer ---
    py::class_<EncoderParams>(m, "EncoderParams")
        .def_readonly("input_side", &EncoderParams::input_side)
        .def_readonly("embed_dim", &EncoderParams::embed_dim)
        .def("spec", [](const EncoderParams& p) { return net_spec_to_strings(p.spec); });

    py::class_<Checkpoint>(m, "Checkpoint")
        .def_readonly("step", &Checkpoint::step)
        .def_readonly("params", &Checkpoint::params);

    m.def("default_net_spec", [] { return net_spec_to_strings(default_net_spec()); });
    m.def(
        "init_params",
        [](const std::vector<std::string>& spec, int side, uint64_t seed) {
            return init_params(parse_net_spec(spec), side, seed);
        },
        py::arg("spec"), py::arg("input_side"), py::arg("seed") = 0);
    m.def(
        "forward",
        [](const EncoderParams& p, py::array_t<float> patches) {
            return embeddings_to_array(forward(p, batch_from_array(std::move(patches))));
        },
        py::arg("params"), py::arg("patches"));
    m.def("save_checkpoint", [](const EncoderParams& p, uint64_t step,
                                const std::filesystem::path& path) {
        save_checkpoint(Checkpoint{1, p, step, ""}, path);
    });
    m.def("load_checkpoint", &load_checkpoint);

    m.def("cosine_distance", [](py::array_t<float> a, py::array_t<float> b) {
        auto aa = py::array_t<float, py::array::c_style | py::array::forcecast>(a);
        auto bb = py::array_t<float, py::array::c_style | py::array::forcecast>(b);
        if (aa.size() != bb.size()) throw std::invalid_argument("dimension mismatch");
        return cosine_distance(aa.data(), bb.data(), int(aa.size()));
    });
    m.def("triplet_loss", &triplet_loss, py::arg("d_pos"), py::arg("d_neg"),
          py::arg("margin") = 0.5);

    py::class_<TrainConfig>(m, "TrainConfig")
        .def(py::init<>())
        .def_readwrite("margin", &TrainConfig::margin)
        .def_readwrite("weight_decay", &TrainConfig::weight_decay)
        .def_readwrite("k_negatives", &TrainConfig::k_negatives)
        .def_readwrite("batch_size", &TrainConfig::batch_size)
        .def_readwrite("lr_initial", &TrainConfig::lr_initial)
        .def_readwrite("lr_decay_factor", &TrainConfig::lr_decay_factor)
        .def_readwrite("lr_step_iters", &TrainConfig::lr_step_iters)
        .def_readwrite("random_phase_iters", &TrainConfig::random_phase_iters)
        .def_readwrite("total_iters", &TrainConfig::total_iters)
        .def_readwrite("seed", &TrainConfig::seed)
        .def_readwrite("report_interval", &TrainConfig::report_interval)
        .def_readwrite("mean_subtract", &TrainConfig::mean_subtract);

    py::class_<PairDataset>(m, "PairDataset")
        .def_readonly("video_ids", &PairDataset::video_ids)
        .def_readonly("pairs", &PairDataset::pairs)
        .def("patch_array", [](const PairDataset& d) {
            py::array_t<float> arr({d.patches.n, d.patches.h, d.patches.w});
            std::copy_n(d.patches.v.data(), d.patches.v.size(), arr.mutable_data());
            return arr;
        });

    m.def("load_pair_dataset", &load_pair_dataset, py::arg("manifest"),
          py::arg("expected_side") = 0);
    m.def(
        "train",
        [](const PairDataset& data, const std::vector<std::string>& spec, int side,
           const TrainConfig& cfg, const std::function<void(int, double, double, double)>& cb) {
            ReportSink sink;
            if (cb)
                sink = [&](const LossReport& r) {
                    cb(r.iteration, r.mean_loss, r.active_fraction, r.lr);
                };
            return train(data, parse_net_spec(spec), side, cfg, sink);
        },
        py::arg("data"), py::arg("spec"), py::arg("input_side"), py::arg("cfg"),
        py::arg("report") = nullptr);
    m.def("mine_video_dir",
          [](const std::filesystem::path& dir, const std::string& video_id, uint64_t seed) {
              MinerConfig cfg;
              return mine_video(load_frame_sequence(dir), video_id, cfg, seed);
          });

    // --- eval ---
    py::class_<LabeledPatchSet>(m, "LabeledPatchSet")
        .def_readonly("labels", &LabeledPatchSet::labels)
        .def_readonly("n_classes", &LabeledPatchSet::n_classes);

    py::class_<RetrievalReport>(m, "RetrievalReport")
        .def_readonly("k", &RetrievalReport::k)
        .def_readonly("queries", &RetrievalReport::queries)
        .def_readonly("rate", &RetrievalReport::rate)
        .def_readonly("per_class_rate", &RetrievalReport::per_class_rate);

    py::class_<SyntheticTracks>(m, "SyntheticTracks")
        .def_readonly("side", &SyntheticTracks::side)
        .def_readonly("n_classes", &SyntheticTracks::n_classes)
        .def("n_tracks", [](const SyntheticTracks& t) { return t.tracks.size(); })
        .def("track_class", [](const SyntheticTracks& t, int i) { return t.tracks.at(i).class_id; })
        .def("track_frame", [](const SyntheticTracks& t, int i, int f) {
            return patch_to_array(t.tracks.at(i).frames.at(f));
        });

    m.def("generate_synthetic_tracks", &generate_synthetic_tracks, py::arg("seed"),
          py::arg("n_classes"), py::arg("instances_per_class"), py::arg("frames_per_track"),
          py::arg("side") = 32);
    m.def("tracks_to_pairs", &tracks_to_pairs, py::arg("tracks"), py::arg("gap"));
    m.def("tracks_to_labeled_set", &tracks_to_labeled_set, py::arg("tracks"),
          py::arg("frame_offset"));
    m.def(
        "nn_retrieval_rate",
        [](const LabeledPatchSet& q, const LabeledPatchSet& db,
           const std::vector<const EncoderParams*>& encoders, int k) {
            return nn_retrieval_rate(q, db, encoders, k);
        },
        py::arg("queries"), py::arg("db"), py::arg("encoders"), py::arg("k"));
    m.def(
        "train_linear_probe",
        [](const LabeledPatchSet& tr, const LabeledPatchSet& te, const EncoderParams& enc,
           int epochs, double lr) {
            auto res = train_linear_probe(tr, te, enc, epochs, lr);
            return py::make_tuple(res.test_accuracy, res.train_losses);
        },
        py::arg("train"), py::arg("test"), py::arg("encoder"), py::arg("epochs") = 200,
        py::arg("lr") = 0.5);
    m.def("embed_set", [](const std::vector<const EncoderParams*>& encoders,
                          py::array_t<float> patches) {
        return embeddings_to_array(embed_set(encoders, batch_from_array(std::move(patches))));
    });
}
