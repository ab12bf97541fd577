// mitoseg: two-stage mitosis nuclei detection on H&E images.
// Commands cover dataset synthesis, stain normalization, patch prep,
// training of both stages, tiled inference, evaluation, overlay rendering
// and the five-variant ablation harness.

#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mitoseg/classnet.hpp"
#include "mitoseg/config.hpp"
#include "mitoseg/dataset.hpp"
#include "mitoseg/overlay.hpp"
#include "mitoseg/patches.hpp"
#include "mitoseg/segnet.hpp"
#include "mitoseg/stain.hpp"
#include "mitoseg/training.hpp"
#include "mitoseg/two_stage.hpp"

namespace fs = std::filesystem;
using namespace mitoseg;

namespace {

void log_line(const std::string& msg) { std::cout << msg << "\n"; }

// one training process per checkpoint path
struct CheckpointLock {
    std::string path;
    int fd = -1;
    explicit CheckpointLock(const std::string& checkpoint) : path(checkpoint + ".lock") {
        fd = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd < 0)
            throw DataError("checkpoint " + checkpoint +
                            " is locked by another training run (remove " + path + " if stale)");
    }
    ~CheckpointLock() {
        if (fd >= 0) {
            ::close(fd);
            ::unlink(path.c_str());
        }
    }
};

SegConfig seg_config_from(const RunConfig& cfg) {
    SegConfig sc;
    sc.base_width = cfg.base_width;
    sc.attention_reduction = cfg.attention_reduction;
    sc.variant = seg_variant_from_string(cfg.variant);
    sc.use_batchnorm = cfg.use_batchnorm;
    sc.swap_gru_roles = cfg.swap_gru_roles;
    sc.spatial_gate_kernel = cfg.spatial_gate_kernel;
    sc.init_seed = cfg.seed;
    return sc;
}

ClassConfig class_config_from(const RunConfig& cfg) {
    ClassConfig cc;
    cc.stage_depths = parse_stage_depths(cfg.class_depths);
    cc.base_width = cfg.class_base_width;
    cc.use_batchnorm = cfg.use_batchnorm;
    cc.init_seed = cfg.seed + 1;
    return cc;
}

TrainHyper hyper_from(const RunConfig& cfg) {
    TrainHyper h;
    h.lr = cfg.lr;
    h.batch = cfg.batch;
    h.decay_ratio = cfg.decay_ratio;
    h.decay_as_weight_decay = cfg.decay_as_weight_decay;
    h.weight_decay = cfg.weight_decay;
    h.epochs = cfg.epochs;
    h.max_steps = cfg.max_steps;
    h.seed = cfg.seed;
    h.patch = cfg.patch;
    h.random_per_image = cfg.random_per_image;
    h.centered_per_centroid = cfg.centered_per_centroid;
    h.match_radius = cfg.match_radius;
    h.augment = cfg.augment;
    return h;
}

TwoStageOptions two_stage_options_from(const RunConfig& cfg) {
    TwoStageOptions o;
    o.window = cfg.window;
    o.seg_threshold = static_cast<float>(cfg.seg_threshold);
    o.min_area = cfg.min_area;
    o.crop_size = cfg.crop_size;
    o.class_threshold = static_cast<float>(cfg.class_threshold);
    o.stage1_only = cfg.stage1_only;
    o.normalize_stain = cfg.normalize_stain;
    if (!cfg.reference_profile.empty()) o.target_profile = load_stain_profile(cfg.reference_profile);
    return o;
}

std::string seg_ckpt_path(const RunConfig& cfg) {
    return cfg.seg_checkpoint.empty() ? (fs::path(cfg.out_dir) / "seg.ckpt").string() : cfg.seg_checkpoint;
}
std::string class_ckpt_path(const RunConfig& cfg) {
    return cfg.class_checkpoint.empty() ? (fs::path(cfg.out_dir) / "class.ckpt").string()
                                        : cfg.class_checkpoint;
}
std::string detections_path(const RunConfig& cfg) {
    return cfg.detections_csv.empty() ? (fs::path(cfg.out_dir) / "detections.csv").string()
                                      : cfg.detections_csv;
}

void require_key(const std::string& value, const std::string& key, const std::string& command) {
    if (value.empty())
        throw ConfigError("command '" + command + "' requires --" + key);
}

void echo_config(const RunConfig& cfg, const std::string& command) {
    log_line("command=" + command);
    std::istringstream is(config_echo(cfg));
    std::string line;
    while (std::getline(is, line)) log_line("config " + line);
}

// --- commands ----------------------------------------------------------------

int cmd_synth(const RunConfig& cfg) {
    SynthConfig sc;
    sc.image_size = cfg.synth_size;
    auto ds = generate_synthetic(sc, cfg.synth_images, cfg.seed);
    int placed = 0;
    for (const auto& item : ds.items) {
        placed += static_cast<int>(item.centroids.size());
        for (const auto& w : item.warnings) log_line("warning " + w);
    }
    save_dataset(cfg.out_dir, ds);
    log_line("synth images=" + std::to_string(ds.items.size()) + " mitoses=" + std::to_string(placed) +
             " out=" + cfg.out_dir);
    return 0;
}

int cmd_normalize(const RunConfig& cfg) {
    Dataset ds = load_dataset(cfg.data_dir, false);
    StainProfile target =
        cfg.reference_profile.empty() ? reference_stain_profile() : load_stain_profile(cfg.reference_profile);
    fs::create_directories(fs::path(cfg.out_dir) / "images");
    const bool have_masks = fs::is_directory(fs::path(cfg.data_dir) / "masks");
    if (have_masks) fs::create_directories(fs::path(cfg.out_dir) / "masks");
    int normalized = 0, skipped = 0;
    for (const auto& item : ds.items) {
        ImageU8 out_image;
        try {
            StainProfile src = estimate_stain_profile(item.image);
            out_image = normalize_stain(item.image, src, target);
            ++normalized;
        } catch (const DataError& e) {
            log_line("normalize skipped image=" + item.id + " reason=" + e.what());
            out_image = item.image;  // passed through unchanged, loudly
            ++skipped;
        }
        write_png((fs::path(cfg.out_dir) / "images" / (item.id + ".png")).string(), out_image);
        if (!item.mask.empty())
            write_png((fs::path(cfg.out_dir) / "masks" / (item.id + ".png")).string(), item.mask);
    }
    const fs::path csrc = fs::path(cfg.data_dir) / "centroids.csv";
    if (fs::exists(csrc)) fs::copy_file(csrc, fs::path(cfg.out_dir) / "centroids.csv",
                                        fs::copy_options::overwrite_existing);
    save_stain_profile((fs::path(cfg.out_dir) / "target_profile.txt").string(), target);
    log_line("normalize normalized=" + std::to_string(normalized) + " skipped=" + std::to_string(skipped));
    return 0;
}

int cmd_prep(const RunConfig& cfg) {
    Dataset ds = load_dataset(cfg.data_dir, true);
    fs::create_directories(fs::path(cfg.out_dir) / "images");
    fs::create_directories(fs::path(cfg.out_dir) / "masks");
    Rng rng(cfg.seed);
    int count = 0;
    for (const auto& item : ds.items) {
        PatchOptions opt;
        opt.patch = cfg.patch;
        opt.overlap = cfg.overlap;
        auto emit = [&](const std::vector<PatchPair>& patches, const char* tag) {
            for (std::size_t i = 0; i < patches.size(); ++i) {
                std::ostringstream id;
                id << item.id << "_" << tag << "_" << i;
                write_png((fs::path(cfg.out_dir) / "images" / (id.str() + ".png")).string(),
                          patches[i].image);
                write_png((fs::path(cfg.out_dir) / "masks" / (id.str() + ".png")).string(), patches[i].mask);
                ++count;
            }
        };
        emit(prepare_patches(item.image, item.mask, PatchStrategy::sliding, opt, item.centroids, rng), "s");
        PatchOptions ropt = opt;
        ropt.count = cfg.random_per_image;
        emit(prepare_patches(item.image, item.mask, PatchStrategy::random, ropt, item.centroids, rng), "r");
        PatchOptions mopt = opt;
        mopt.count = static_cast<int>(item.centroids.size()) * cfg.centered_per_centroid;
        emit(prepare_patches(item.image, item.mask, PatchStrategy::mitosis_centered, mopt, item.centroids, rng),
             "m");
    }
    log_line("prep patches=" + std::to_string(count) + " out=" + cfg.out_dir);
    return 0;
}

int cmd_train_seg(const RunConfig& cfg) {
    Dataset ds = load_dataset(cfg.data_dir, true);
    const std::string ckpt = seg_ckpt_path(cfg);
    fs::create_directories(fs::path(ckpt).parent_path());
    CheckpointLock lock(ckpt);
    auto model = build_segnet(seg_config_from(cfg));
    std::ostringstream log;
    TrainResult res = train_segmentation(model, ds, hyper_from(cfg), ckpt, &log);
    std::cout << log.str();
    fs::create_directories(cfg.out_dir);
    detail::write_text_atomic((fs::path(cfg.out_dir) / "train_seg_log.txt").string(), log.str());
    detail::write_text_atomic((fs::path(cfg.out_dir) / "seg_manifest.txt").string(), segnet_manifest(model));
    log_line("train-seg steps=" + std::to_string(res.steps) + " final_loss=" +
             (res.loss_log.empty() ? std::string("n/a") : std::to_string(res.loss_log.back())) +
             " checkpoint=" + ckpt);
    return 0;
}

int cmd_train_class(const RunConfig& cfg) {
    Dataset ds = load_dataset(cfg.data_dir, false);
    const std::string seg_ckpt = seg_ckpt_path(cfg);
    auto seg = build_segnet(seg_config_from(cfg));
    load_checkpoint(seg_ckpt, seg.reg);
    const std::string ckpt = class_ckpt_path(cfg);
    fs::create_directories(fs::path(ckpt).parent_path());
    CheckpointLock lock(ckpt);
    auto cls = build_classifier(class_config_from(cfg));
    std::ostringstream log;
    TrainResult res =
        train_classifier(cls, seg, ds, hyper_from(cfg), two_stage_options_from(cfg), ckpt, &log);
    std::cout << log.str();
    fs::create_directories(cfg.out_dir);
    detail::write_text_atomic((fs::path(cfg.out_dir) / "train_class_log.txt").string(), log.str());
    log_line("train-class steps=" + std::to_string(res.steps) + " checkpoint=" + ckpt);
    return 0;
}

int cmd_infer(const RunConfig& cfg) {
    // checkpoints load before any image is read
    auto seg = build_segnet(seg_config_from(cfg));
    load_checkpoint(seg_ckpt_path(cfg), seg.reg);
    ClassModel cls;
    bool have_cls = false;
    if (!cfg.stage1_only) {
        cls = build_classifier(class_config_from(cfg));
        load_checkpoint(class_ckpt_path(cfg), cls.reg);
        have_cls = true;
    }
    Dataset ds = load_dataset(cfg.data_dir, false);
    TwoStageOptions opt = two_stage_options_from(cfg);
    std::vector<std::pair<std::string, DetectionPoint>> all;
    for (const auto& item : ds.items) {
        std::vector<std::string> warnings;
        auto dets = run_two_stage(item.image, seg, have_cls ? &cls : nullptr, opt, &warnings);
        for (const auto& w : warnings) log_line("warning image=" + item.id + " " + w);
        for (const auto& d : dets) all.emplace_back(item.id, d);
        log_line("infer image=" + item.id + " detections=" + std::to_string(dets.size()));
    }
    fs::create_directories(cfg.out_dir);
    write_detections_csv(detections_path(cfg), all);
    log_line("infer total=" + std::to_string(all.size()) + " out=" + detections_path(cfg));
    return 0;
}

int cmd_evaluate(const RunConfig& cfg) {
    auto dets = read_detections_csv(detections_path(cfg));
    auto gts = read_centroids_csv((fs::path(cfg.data_dir) / "centroids.csv").string());
    std::map<std::string, std::vector<DetectionPoint>> by_image;
    for (const auto& [id, d] : dets) by_image[id].push_back(d);
    ConfusionCounts total;
    for (const auto& [id, pts] : gts) {
        auto it = by_image.find(id);
        const std::vector<DetectionPoint> empty;
        auto res = match_detections(it == by_image.end() ? empty : it->second, pts, cfg.match_radius);
        total.tp += res.counts.tp;
        total.fp += res.counts.fp;
        total.fn += res.counts.fn;
    }
    // detections on images without any annotated centroid all count as FP
    for (const auto& [id, pts] : by_image)
        if (!gts.count(id)) total.fp += static_cast<int>(pts.size());
    auto m = detection_metrics(total);
    std::cout << metrics_report_text(total, m);
    fs::create_directories(cfg.out_dir);
    detail::write_text_atomic((fs::path(cfg.out_dir) / "metrics.csv").string(), metrics_report_csv(total, m));
    detail::write_text_atomic((fs::path(cfg.out_dir) / "metrics.txt").string(), metrics_report_text(total, m));
    return 0;
}

int cmd_overlay(const RunConfig& cfg) {
    Dataset ds = load_dataset(cfg.data_dir, false);
    auto dets = read_detections_csv(detections_path(cfg));
    std::map<std::string, std::vector<DetectionPoint>> by_image;
    for (const auto& [id, d] : dets) by_image[id].push_back(d);
    fs::create_directories(cfg.out_dir);
    for (const auto& item : ds.items) {
        const auto it = by_image.find(item.id);
        ImageU8 out = render_overlay(item.image, it == by_image.end() ? std::vector<DetectionPoint>{} : it->second,
                                     item.centroids, cfg.box_size);
        write_png((fs::path(cfg.out_dir) / (item.id + "_overlay.png")).string(), out);
    }
    log_line("overlay images=" + std::to_string(ds.items.size()) + " out=" + cfg.out_dir);
    return 0;
}

int cmd_ablate(const RunConfig& cfg) {
    Dataset ds = load_dataset(cfg.data_dir, true);
    struct Row {
        const char* name;
        bool dsc, cbam, gru, dscrb, csag;
    };
    const Row rows[] = {
        {"dsc_cbam", true, true, false, false, false},
        {"dsc_cbam_gru", true, true, true, false, false},
        {"dscrb_cbam", false, true, false, true, false},
        {"dscrb_cbam_gru", false, true, true, true, false},
        {"dscrb_csag", false, false, false, true, true},
    };
    std::ostringstream table;
    table << "DSC        CBAM       GRU        DSCRB      CSAG       Precision  Recall     F1-score\n";
    for (const auto& row : rows) {
        RunConfig vcfg = cfg;
        vcfg.variant = row.name;
        if (vcfg.max_steps <= 0) vcfg.max_steps = 50;  // smoke-train budget
        auto model = build_segnet(seg_config_from(vcfg));
        std::ostringstream log;
        TrainHyper h = hyper_from(vcfg);
        h.epochs = std::max(h.epochs, 1000000);  // the step cap terminates the run
        train_segmentation(model, ds, h, "", &log);
        // stage-1 evaluation on the training set
        TwoStageOptions opt = two_stage_options_from(vcfg);
        opt.stage1_only = true;
        ConfusionCounts total;
        for (const auto& item : ds.items) {
            auto dets = run_two_stage(item.image, model, nullptr, opt);
            auto res = match_detections(dets, item.centroids, vcfg.match_radius);
            total.tp += res.counts.tp;
            total.fp += res.counts.fp;
            total.fn += res.counts.fn;
        }
        auto m = detection_metrics(total);
        auto flag = [](bool v) { return v ? "yes" : "-"; };
        char buf[256];
        std::snprintf(buf, sizeof(buf), "%-10s %-10s %-10s %-10s %-10s %-10.4f %-10.4f %-10.4f\n",
                      flag(row.dsc), flag(row.cbam), flag(row.gru), flag(row.dscrb), flag(row.csag),
                      m.precision, m.recall, m.f_score);
        table << buf;
        log_line(std::string("ablate variant=") + row.name + " done");
    }
    std::cout << table.str();
    fs::create_directories(cfg.out_dir);
    detail::write_text_atomic((fs::path(cfg.out_dir) / "ablation.txt").string(), table.str());
    return 0;
}

void print_usage() {
    std::cout <<
        R"(usage: mitoseg <command> [--config file] [--key value]...

commands:
  synth        generate a synthetic dataset into --out_dir
  normalize    stain-normalize a dataset into --out_dir
  prep         materialize training patches into --out_dir
  train-seg    train the segmentation network on --data_dir
  train-class  train the candidate classifier (needs a seg checkpoint)
  infer        run two-stage detection over --data_dir
  evaluate     score detections.csv against centroids.csv
  overlay      render detection/ground-truth box overlays
  ablate       smoke-train and score all five module variants

exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure

keys (config file uses `key = value` lines, '#' comments):
)" << config_help();
}

int dispatch(const std::string& command, const RunConfig& cfg) {
    if (command == "synth") return cmd_synth(cfg);
    if (command == "normalize") {
        require_key(cfg.data_dir, "data_dir", command);
        return cmd_normalize(cfg);
    }
    if (command == "prep") {
        require_key(cfg.data_dir, "data_dir", command);
        return cmd_prep(cfg);
    }
    if (command == "train-seg") {
        require_key(cfg.data_dir, "data_dir", command);
        return cmd_train_seg(cfg);
    }
    if (command == "train-class") {
        require_key(cfg.data_dir, "data_dir", command);
        return cmd_train_class(cfg);
    }
    if (command == "infer") {
        require_key(cfg.data_dir, "data_dir", command);
        return cmd_infer(cfg);
    }
    if (command == "evaluate") {
        require_key(cfg.data_dir, "data_dir", command);
        return cmd_evaluate(cfg);
    }
    if (command == "overlay") {
        require_key(cfg.data_dir, "data_dir", command);
        return cmd_overlay(cfg);
    }
    if (command == "ablate") {
        require_key(cfg.data_dir, "data_dir", command);
        return cmd_ablate(cfg);
    }
    throw ConfigError("unknown command '" + command + "'; run mitoseg --help");
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    if (args.empty() || args[0] == "--help" || args[0] == "-h") {
        print_usage();
        return args.empty() ? 1 : 0;
    }
    const std::string command = args[0];
    try {
        RunConfig cfg = parse_config({args.begin() + 1, args.end()});
        echo_config(cfg, command);
        return dispatch(command, cfg);
    } catch (const ConfigError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const ShapeError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    }
}
