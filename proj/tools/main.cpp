#include <CLI11.hpp>
#include <json.hpp>
#include <zlib.h>

#include <atomic>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <thread>

#include "trackemb/eval.hpp"
#include "trackemb/mining.hpp"
#include "trackemb/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace trackemb;

namespace {

struct RunConfig {
    MinerConfig mine;
    NetSpec spec = default_net_spec();
    int input_side = 32;
    TrainConfig train;
    int eval_k = 5;
};

void reject_unknown(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    for (const auto& [key, _] : j.items())
        if (!allowed.count(key))
            throw std::runtime_error("config: unknown key '" + key + "' in section " + where);
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

RunConfig parse_config(const json& j) {
    RunConfig cfg;
    reject_unknown(j, {"mine", "encoder", "train", "eval"}, "<root>");
    if (j.contains("mine")) {
        const json& m = j.at("mine");
        reject_unknown(m,
                       {"flow_threshold", "gate_low", "gate_high", "window_h", "window_w", "stride",
                        "track_len", "candidate_hop", "max_pairs_per_video", "search_radius",
                        "patch_side", "max_interest_points", "ransac_iters", "ransac_tol",
                        "flow_step"},
                       "mine");
        get_if(m, "flow_threshold", cfg.mine.flow_threshold);
        get_if(m, "gate_low", cfg.mine.gate_low);
        get_if(m, "gate_high", cfg.mine.gate_high);
        get_if(m, "window_h", cfg.mine.window_h);
        get_if(m, "window_w", cfg.mine.window_w);
        get_if(m, "stride", cfg.mine.stride);
        get_if(m, "track_len", cfg.mine.track_len);
        get_if(m, "candidate_hop", cfg.mine.candidate_hop);
        get_if(m, "max_pairs_per_video", cfg.mine.max_pairs_per_video);
        get_if(m, "search_radius", cfg.mine.search_radius);
        get_if(m, "patch_side", cfg.mine.patch_side);
        get_if(m, "max_interest_points", cfg.mine.max_interest_points);
        get_if(m, "ransac_iters", cfg.mine.ransac_iters);
        get_if(m, "ransac_tol", cfg.mine.ransac_tol);
        get_if(m, "flow_step", cfg.mine.flow_step);
    }
    if (j.contains("encoder")) {
        const json& e = j.at("encoder");
        reject_unknown(e, {"input_side", "layers"}, "encoder");
        get_if(e, "input_side", cfg.input_side);
        if (e.contains("layers"))
            cfg.spec = parse_net_spec(e.at("layers").get<std::vector<std::string>>());
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown(t,
                       {"margin", "weight_decay", "k_negatives", "batch_size", "lr_initial",
                        "lr_decay_factor", "lr_step_iters", "random_phase_iters", "total_iters",
                        "report_interval", "checkpoint_interval", "momentum", "mean_subtract"},
                       "train");
        get_if(t, "margin", cfg.train.margin);
        get_if(t, "weight_decay", cfg.train.weight_decay);
        get_if(t, "k_negatives", cfg.train.k_negatives);
        get_if(t, "batch_size", cfg.train.batch_size);
        get_if(t, "lr_initial", cfg.train.lr_initial);
        get_if(t, "lr_decay_factor", cfg.train.lr_decay_factor);
        get_if(t, "lr_step_iters", cfg.train.lr_step_iters);
        get_if(t, "random_phase_iters", cfg.train.random_phase_iters);
        get_if(t, "total_iters", cfg.train.total_iters);
        get_if(t, "report_interval", cfg.train.report_interval);
        get_if(t, "checkpoint_interval", cfg.train.checkpoint_interval);
        get_if(t, "momentum", cfg.train.momentum);
        get_if(t, "mean_subtract", cfg.train.mean_subtract);
    }
    if (j.contains("eval")) {
        const json& e = j.at("eval");
        reject_unknown(e, {"k"}, "eval");
        get_if(e, "k", cfg.eval_k);
    }
    return cfg;
}

json dump_config(const RunConfig& c) {
    return json{
        {"mine",
         {{"flow_threshold", c.mine.flow_threshold},
          {"gate_low", c.mine.gate_low},
          {"gate_high", c.mine.gate_high},
          {"window_h", c.mine.window_h},
          {"window_w", c.mine.window_w},
          {"stride", c.mine.stride},
          {"track_len", c.mine.track_len},
          {"candidate_hop", c.mine.candidate_hop},
          {"max_pairs_per_video", c.mine.max_pairs_per_video},
          {"search_radius", c.mine.search_radius},
          {"patch_side", c.mine.patch_side},
          {"max_interest_points", c.mine.max_interest_points},
          {"ransac_iters", c.mine.ransac_iters},
          {"ransac_tol", c.mine.ransac_tol},
          {"flow_step", c.mine.flow_step}}},
        {"encoder", {{"input_side", c.input_side}, {"layers", net_spec_to_strings(c.spec)}}},
        {"train",
         {{"margin", c.train.margin},
          {"weight_decay", c.train.weight_decay},
          {"k_negatives", c.train.k_negatives},
          {"batch_size", c.train.batch_size},
          {"lr_initial", c.train.lr_initial},
          {"lr_decay_factor", c.train.lr_decay_factor},
          {"lr_step_iters", c.train.lr_step_iters},
          {"random_phase_iters", c.train.random_phase_iters},
          {"total_iters", c.train.total_iters},
          {"report_interval", c.train.report_interval},
          {"checkpoint_interval", c.train.checkpoint_interval},
          {"momentum", c.train.momentum},
          {"mean_subtract", c.train.mean_subtract}}},
        {"eval", {{"k", c.eval_k}}}};
}

RunConfig load_run_config(const std::string& path) {
    if (path.empty()) return {};
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    return parse_config(json::parse(f));
}

uint32_t file_crc32(const fs::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open " + path.string());
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return uint32_t(::crc32(0, reinterpret_cast<const Bytef*>(buf.data()), uInt(buf.size())));
}

std::vector<Checkpoint> load_checkpoints(const std::string& ckpts_arg) {
    std::vector<Checkpoint> out;
    std::stringstream ss(ckpts_arg);
    std::string tok;
    while (std::getline(ss, tok, ','))
        if (!tok.empty()) out.push_back(load_checkpoint(tok));
    if (out.empty()) throw std::runtime_error("no checkpoint files given");
    return out;
}

// labels.jsonl record: {"patch": relpath, "label": int, "split": str}
std::map<std::string, LabeledPatchSet> load_labeled_dir(const fs::path& dir, int side) {
    std::ifstream f(dir / "labels.jsonl");
    if (!f) throw std::runtime_error("cannot open " + (dir / "labels.jsonl").string());
    std::map<std::string, LabeledPatchSet> sets;
    std::string line;
    int max_label = -1;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        json j = json::parse(line);
        std::string split = j.at("split").get<std::string>();
        int label = j.at("label").get<int>();
        Image img = read_rawgrid(dir / j.at("patch").get<std::string>());
        if (img.h != side || img.w != side)
            throw std::runtime_error("patch size mismatch: " + j.at("patch").get<std::string>());
        auto& set = sets[split];
        if (set.patches.n == 0) set.patches = Batch(0, 1, side, side);
        set.patches.v.insert(set.patches.v.end(), img.px.begin(), img.px.end());
        set.patches.n += 1;
        set.labels.push_back(label);
        max_label = std::max(max_label, label);
    }
    for (auto& [_, set] : sets) set.n_classes = max_label + 1;
    return sets;
}

int cmd_mine(const RunConfig& cfg, const std::string& videos_dir, const std::string& out_dir,
             uint64_t seed, int jobs) {
    std::vector<fs::path> video_dirs;
    for (const auto& e : fs::directory_iterator(videos_dir))
        if (e.is_directory()) video_dirs.push_back(e.path());
    std::sort(video_dirs.begin(), video_dirs.end());
    if (video_dirs.empty()) throw std::runtime_error("mine: no video directories in " + videos_dir);

    std::vector<std::vector<TrackedPair>> per_video(video_dirs.size());
    std::map<std::string, std::vector<Frame>> frames_by_video;
    for (const auto& d : video_dirs) frames_by_video[d.filename().string()] = load_frame_sequence(d);

    auto work = [&](size_t i) {
        const std::string vid = video_dirs[i].filename().string();
        per_video[i] = mine_video(frames_by_video[vid], vid, cfg.mine,
                                  seed + std::hash<std::string>{}(vid));
    };
    if (jobs <= 1) {
        for (size_t i = 0; i < video_dirs.size(); ++i) work(i);
    } else {
        std::vector<std::thread> pool;
        std::atomic<size_t> next{0};
        for (int t = 0; t < jobs; ++t)
            pool.emplace_back([&] {
                for (size_t i = next++; i < video_dirs.size(); i = next++) work(i);
            });
        for (auto& t : pool) t.join();
    }

    std::vector<TrackedPair> all;
    for (auto& v : per_video) all.insert(all.end(), v.begin(), v.end());

    fs::create_directories(out_dir);
    FrameSource src = [&](const std::string& vid, int frame_idx) -> const Frame& {
        for (const Frame& fr : frames_by_video.at(vid))
            if (fr.index == frame_idx) return fr;
        throw std::runtime_error("mine: missing frame " + std::to_string(frame_idx) + " in " + vid);
    };
    int n = write_manifest(all, src, cfg.mine.patch_side, fs::path(out_dir) / "patches",
                           fs::path(out_dir) / "manifest.jsonl");
    std::cout << "pairs " << n << "\n";
    return n > 0 ? 0 : 2;
}

int cmd_train(const RunConfig& cfg, const std::string& manifest, const std::string& out_ckpt,
              uint64_t seed, const std::string& report_path) {
    TrainConfig tc = cfg.train;
    tc.seed = seed;
    std::ofstream report_file;
    std::ostream* rs = &std::cout;
    if (!report_path.empty()) {
        report_file.open(report_path, std::ios::trunc);
        if (!report_file) throw std::runtime_error("train: cannot open report " + report_path);
        rs = &report_file;
    }
    *rs << loss_report_csv_header() << "\n";
    train_from_manifest(manifest, cfg.spec, cfg.input_side, tc, out_ckpt,
                        [&](const LossReport& r) { *rs << loss_report_csv_row(r) << "\n"; });
    std::cout << "checkpoint " << std::hex << file_crc32(out_ckpt) << std::dec << "\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg, const std::string& mode, const std::string& ckpts_arg,
             const std::string& data_dir, int k) {
    auto ckpts = load_checkpoints(ckpts_arg);
    std::vector<const EncoderParams*> encoders;
    for (const auto& c : ckpts) encoders.push_back(&c.params);
    const int side = ckpts[0].params.input_side;
    auto sets = load_labeled_dir(data_dir, side);

    if (mode == "retrieval") {
        if (!sets.count("query") || !sets.count("db"))
            throw std::runtime_error("eval retrieval: labels.jsonl needs 'query' and 'db' splits");
        auto rep = nn_retrieval_rate(sets.at("query"), sets.at("db"), encoders, k);
        json pcr = json::object();
        for (const auto& [label, rate] : rep.per_class_rate) pcr[std::to_string(label)] = rate;
        std::cout << json{{"k", rep.k}, {"queries", rep.queries}, {"rate", rep.rate},
                          {"per_class_rate", pcr}}
                         .dump()
                  << "\n";
        return 0;
    }
    if (mode == "probe") {
        if (!sets.count("train") || !sets.count("test"))
            throw std::runtime_error("eval probe: labels.jsonl needs 'train' and 'test' splits");
        auto res = train_linear_probe(sets.at("train"), sets.at("test"), ckpts[0].params, 200, 0.5);
        std::cout << json{{"accuracy", res.test_accuracy},
                          {"final_train_loss", res.train_losses.back()}}
                         .dump()
                  << "\n";
        return 0;
    }
    throw std::runtime_error("eval: mode must be 'retrieval' or 'probe'");
}

int cmd_embed(const std::string& ckpts_arg, const std::string& data_dir,
              const std::string& out_csv) {
    auto ckpts = load_checkpoints(ckpts_arg);
    std::vector<const EncoderParams*> encoders;
    for (const auto& c : ckpts) encoders.push_back(&c.params);
    const int side = ckpts[0].params.input_side;

    std::vector<fs::path> grids;
    for (const auto& e : fs::directory_iterator(data_dir))
        if (e.is_regular_file() && e.path().extension() == ".grid") grids.push_back(e.path());
    std::sort(grids.begin(), grids.end());
    if (grids.empty()) {
        std::cerr << "embed: no .grid files in " << data_dir << "\n";
        return 2;
    }

    Batch batch(int(grids.size()), 1, side, side);
    for (size_t i = 0; i < grids.size(); ++i) {
        Image img = read_rawgrid(grids[i]);
        if (img.h != side || img.w != side)
            throw std::runtime_error("embed: patch size mismatch: " + grids[i].string());
        std::copy(img.px.begin(), img.px.end(), batch.item(int(i)));
    }
    Embeddings emb = embed_set(encoders, batch);

    std::ofstream out_file;
    std::ostream* os = &std::cout;
    if (!out_csv.empty()) {
        out_file.open(out_csv, std::ios::trunc);
        if (!out_file) throw std::runtime_error("embed: cannot open " + out_csv);
        os = &out_file;
    }
    os->precision(9);
    for (int i = 0; i < emb.n; ++i) {
        for (int d = 0; d < emb.dim; ++d) *os << (d ? "," : "") << emb.row(i)[d];
        *os << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"trackemb: mine tracked patch pairs from video and train a triplet embedding"};
    app.require_subcommand(0, 1);

    std::string config_path;
    uint64_t seed = 0;
    int jobs = 1;
    bool deterministic = false, do_dump = false;
    app.add_option("--config", config_path, "JSON config file")->capture_default_str();
    app.add_option("--seed", seed, "global rng seed");
    app.add_option("--jobs", jobs, "worker cap (1 = serial)");
    app.add_flag("--deterministic", deterministic, "suppress nondeterministic output");
    app.add_flag("--dump-config", do_dump, "print the merged config and exit");

    auto* mine = app.add_subcommand("mine", "mine tracked patch pairs from a video root");
    std::string videos_dir, out_dir;
    mine->add_option("--videos", videos_dir, "directory of video subdirectories")->required();
    mine->add_option("--out", out_dir, "output dir for patches + manifest")->required();

    auto* train = app.add_subcommand("train", "train the triplet embedding from a manifest");
    std::string manifest, out_ckpt, report_path;
    int total_iters_override = -1;
    train->add_option("--manifest", manifest, "manifest.jsonl from mine")->required();
    train->add_option("--out", out_ckpt, "output checkpoint path")->required();
    train->add_option("--report", report_path, "loss CSV path (default stdout)");
    train->add_option("--total-iters", total_iters_override, "override train.total_iters");

    auto* eval = app.add_subcommand("eval", "retrieval / linear-probe evaluation");
    std::string eval_mode, eval_ckpts, eval_data;
    int eval_k = -1;
    eval->add_option("mode", eval_mode, "retrieval|probe")->required();
    eval->add_option("--ckpt", eval_ckpts, "checkpoint file(s), comma separated")->required();
    eval->add_option("--data", eval_data, "labeled data dir (labels.jsonl + .grid files)")
        ->required();
    eval->add_option("--k", eval_k, "retrieval depth");

    auto* embed = app.add_subcommand("embed", "bulk embedding export (CSV, one row per patch)");
    std::string embed_ckpts, embed_data, embed_out;
    embed->add_option("--ckpt", embed_ckpts, "checkpoint file(s), comma separated")->required();
    embed->add_option("--data", embed_data, "directory of .grid patches")->required();
    embed->add_option("--out", embed_out, "output CSV (default stdout)");

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = load_run_config(config_path);
        if (do_dump) {
            std::cout << dump_config(cfg).dump(2) << "\n";
            return 0;
        }
        if (mine->parsed()) return cmd_mine(cfg, videos_dir, out_dir, seed, jobs);
        if (train->parsed()) {
            if (total_iters_override >= 0) cfg.train.total_iters = total_iters_override;
            return cmd_train(cfg, manifest, out_ckpt, seed, report_path);
        }
        if (eval->parsed()) return cmd_eval(cfg, eval_mode, eval_ckpts, eval_data,
                                            eval_k > 0 ? eval_k : cfg.eval_k);
        if (embed->parsed()) return cmd_embed(embed_ckpts, embed_data, embed_out);
        std::cerr << app.help();
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
