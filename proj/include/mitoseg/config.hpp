#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mitoseg/core.hpp"

namespace mitoseg {

// Every tunable surfaced by the CLI, with its documented default.
struct RunConfig {
    // paths
    std::string data_dir;
    std::string out_dir = "out";
    std::string seg_checkpoint;
    std::string class_checkpoint;
    std::string reference_profile;  // empty: built-in canonical H&E profile
    std::string detections_csv;     // empty: <out_dir>/detections.csv

    // reproducibility
    std::uint64_t seed = 1;

    // synthetic data
    int synth_images = 16;
    int synth_size = 512;

    // segmentation network
    std::string variant = "dscrb_csag";
    int base_width = 32;
    int attention_reduction = 8;
    bool use_batchnorm = true;
    bool swap_gru_roles = false;
    int spatial_gate_kernel = 1;

    // classifier network
    std::string class_depths = "1,1,1,1";
    int class_base_width = 16;

    // training
    double lr = 1e-4;
    int batch = 16;
    int epochs = 10;
    int max_steps = 0;
    double decay_ratio = 0.1;
    bool decay_as_weight_decay = false;
    double weight_decay = 0.01;
    int patch = 256;
    int overlap = 32;
    int random_per_image = 2;
    int centered_per_centroid = 2;
    bool augment = true;

    // inference / post-processing
    int window = 0;
    double seg_threshold = 0.5;
    double class_threshold = 0.5;
    int min_area = 100;
    int crop_size = 64;
    bool stage1_only = false;
    bool normalize_stain = false;

    // evaluation
    double match_radius = 20.0;

    // overlay
    int box_size = 64;
};

namespace detail {

struct KeySpec {
    std::string help;
    std::function<void(RunConfig&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

inline bool parse_bool(const std::string& v, const std::string& key) {
    if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "off" || v == "no") return false;
    throw ConfigError("key '" + key + "': cannot parse '" + v + "' as a boolean");
}

inline int parse_int(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const int out = std::stoi(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': cannot parse '" + v + "' as an integer");
    }
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const auto out = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': cannot parse '" + v + "' as an unsigned integer");
    }
}

inline double parse_double(const std::string& v, const std::string& key) {
    try {
        std::size_t used = 0;
        const double out = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "': cannot parse '" + v + "' as a number");
    }
}

inline const std::map<std::string, KeySpec>& key_table() {
    static const std::map<std::string, KeySpec> table = [] {
        std::map<std::string, KeySpec> t;
        auto string_key = [&t](const std::string& name, std::string RunConfig::*field, const char* help) {
            t[name] = {help, [field](RunConfig& c, const std::string& v) { c.*field = v; },
                       [field](const RunConfig& c) { return c.*field; }};
        };
        auto int_key = [&t](const std::string& name, int RunConfig::*field, const char* help) {
            t[name] = {help,
                       [field, name](RunConfig& c, const std::string& v) { c.*field = parse_int(v, name); },
                       [field](const RunConfig& c) { return std::to_string(c.*field); }};
        };
        auto u64_key = [&t](const std::string& name, std::uint64_t RunConfig::*field, const char* help) {
            t[name] = {help,
                       [field, name](RunConfig& c, const std::string& v) { c.*field = parse_u64(v, name); },
                       [field](const RunConfig& c) { return std::to_string(c.*field); }};
        };
        auto double_key = [&t](const std::string& name, double RunConfig::*field, const char* help) {
            t[name] = {help,
                       [field, name](RunConfig& c, const std::string& v) { c.*field = parse_double(v, name); },
                       [field](const RunConfig& c) {
                           std::ostringstream os;
                           os << (c.*field);
                           return os.str();
                       }};
        };
        auto bool_key = [&t](const std::string& name, bool RunConfig::*field, const char* help) {
            t[name] = {help,
                       [field, name](RunConfig& c, const std::string& v) { c.*field = parse_bool(v, name); },
                       [field](const RunConfig& c) { return c.*field ? "true" : "false"; }};
        };

        string_key("data_dir", &RunConfig::data_dir, "dataset root (images/, masks/, centroids.csv)");
        string_key("out_dir", &RunConfig::out_dir, "output directory");
        string_key("seg_checkpoint", &RunConfig::seg_checkpoint, "segmentation checkpoint path");
        string_key("class_checkpoint", &RunConfig::class_checkpoint, "classifier checkpoint path");
        string_key("reference_profile", &RunConfig::reference_profile,
                   "stain profile file used as normalization target (default: built-in)");
        string_key("detections_csv", &RunConfig::detections_csv,
                   "detections file (default: <out_dir>/detections.csv)");
        u64_key("seed", &RunConfig::seed, "master random seed");
        int_key("synth_images", &RunConfig::synth_images, "number of synthetic images to generate");
        int_key("synth_size", &RunConfig::synth_size, "synthetic image extent in pixels");
        string_key("variant", &RunConfig::variant,
                   "segnet variant: dsc_cbam, dsc_cbam_gru, dscrb_cbam, dscrb_cbam_gru, dscrb_csag");
        int_key("base_width", &RunConfig::base_width, "segnet channels at the first level");
        int_key("attention_reduction", &RunConfig::attention_reduction, "channel-attention MLP reduction");
        bool_key("use_batchnorm", &RunConfig::use_batchnorm, "batch normalization after convolutions");
        bool_key("swap_gru_roles", &RunConfig::swap_gru_roles,
                 "swap GRU input/hidden roles of encoder/decoder attention");
        int_key("spatial_gate_kernel", &RunConfig::spatial_gate_kernel,
                "gate kernel extent of the spatial-attention GRU");
        string_key("class_depths", &RunConfig::class_depths,
                   "classifier residual blocks per stage, e.g. 3,4,6,3 or 1,1,1,1");
        int_key("class_base_width", &RunConfig::class_base_width, "classifier channels at stage 1");
        double_key("lr", &RunConfig::lr, "AdamW initial learning rate");
        int_key("batch", &RunConfig::batch, "training batch size");
        int_key("epochs", &RunConfig::epochs, "training epochs");
        int_key("max_steps", &RunConfig::max_steps, "hard cap on optimizer steps (0: none)");
        double_key("decay_ratio", &RunConfig::decay_ratio, "LR multiplier applied once at 80% of the run");
        bool_key("decay_as_weight_decay", &RunConfig::decay_as_weight_decay,
                 "interpret decay_ratio as AdamW weight decay instead of an LR step");
        double_key("weight_decay", &RunConfig::weight_decay, "AdamW weight decay");
        int_key("patch", &RunConfig::patch, "training patch extent");
        int_key("overlap", &RunConfig::overlap, "sliding-window overlap for prep");
        int_key("random_per_image", &RunConfig::random_per_image, "random patches per training image");
        int_key("centered_per_centroid", &RunConfig::centered_per_centroid,
                "mitosis-centered patches per annotated centroid");
        bool_key("augment", &RunConfig::augment, "online flip/rotate/rescale/blur augmentation");
        int_key("window", &RunConfig::window, "inference tile window (0: auto, multiple of 8)");
        double_key("seg_threshold", &RunConfig::seg_threshold, "probability-map binarization threshold");
        double_key("class_threshold", &RunConfig::class_threshold, "classifier acceptance threshold");
        int_key("min_area", &RunConfig::min_area, "candidate area filter; keeps regions strictly larger");
        int_key("crop_size", &RunConfig::crop_size, "candidate crop extent before the 128 resize");
        bool_key("stage1_only", &RunConfig::stage1_only, "skip the classifier stage");
        bool_key("normalize_stain", &RunConfig::normalize_stain, "stain-normalize before inference");
        double_key("match_radius", &RunConfig::match_radius, "centroid match radius in pixels");
        int_key("box_size", &RunConfig::box_size, "overlay box side length");
        return t;
    }();
    return table;
}

inline int edit_distance(const std::string& a, const std::string& b) {
    std::vector<std::vector<int>> d(a.size() + 1, std::vector<int>(b.size() + 1, 0));
    for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = static_cast<int>(i);
    for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= a.size(); ++i)
        for (std::size_t j = 1; j <= b.size(); ++j)
            d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1,
                                d[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    return d[a.size()][b.size()];
}

inline std::string nearest_key(const std::string& key) {
    std::string best;
    int best_d = 1 << 30;
    for (const auto& [name, spec] : key_table()) {
        const int d = edit_distance(key, name);
        if (d < best_d) {
            best_d = d;
            best = name;
        }
    }
    return best;
}

inline void set_key(RunConfig& cfg, const std::string& key, const std::string& value,
                    const std::string& where) {
    auto it = key_table().find(key);
    if (it == key_table().end())
        throw ConfigError(where + ": unknown key '" + key + "' (nearest valid key: '" + nearest_key(key) +
                          "')");
    try {
        it->second.set(cfg, value);
    } catch (const ConfigError& e) {
        throw ConfigError(where + ": " + e.what());
    }
}

}  // namespace detail

// Line-based `key = value` file; '#' starts a comment.
inline void apply_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file: " + path);
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto strip = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            if (a == std::string::npos) return std::string();
            const auto b = s.find_last_not_of(" \t\r");
            return s.substr(a, b - a + 1);
        };
        const std::string stripped = strip(line);
        if (stripped.empty()) continue;
        const auto eq = stripped.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + " line " + std::to_string(line_no) + ": expected 'key = value'");
        const std::string key = strip(stripped.substr(0, eq));
        const std::string value = strip(stripped.substr(eq + 1));
        if (key.empty())
            throw ConfigError(path + " line " + std::to_string(line_no) + ": empty key");
        detail::set_key(cfg, key, value, path + " line " + std::to_string(line_no));
    }
}

// Flags: --key value or --key=value. A --config file loads first so that
// flags override the file, and the file overrides the defaults.
inline RunConfig parse_config(const std::vector<std::string>& args) {
    RunConfig cfg;
    std::vector<std::pair<std::string, std::string>> flag_pairs;
    for (std::size_t i = 0; i < args.size(); ++i) {
        std::string a = args[i];
        if (a.rfind("--", 0) != 0)
            throw ConfigError("unexpected argument '" + a + "' (flags look like --key value)");
        a = a.substr(2);
        std::string value;
        const auto eq = a.find('=');
        if (eq != std::string::npos) {
            value = a.substr(eq + 1);
            a = a.substr(0, eq);
        } else {
            if (i + 1 >= args.size()) throw ConfigError("flag --" + a + " is missing its value");
            value = args[++i];
        }
        flag_pairs.emplace_back(a, value);
    }
    for (const auto& [k, v] : flag_pairs)
        if (k == "config") apply_config_file(cfg, v);
    for (const auto& [k, v] : flag_pairs) {
        if (k == "config") continue;
        detail::set_key(cfg, k, v, "flag --" + k);
    }
    return cfg;
}

// Resolved-config echo, one machine-parsable key=value per line.
inline std::string config_echo(const RunConfig& cfg) {
    std::ostringstream os;
    for (const auto& [name, spec] : detail::key_table()) os << name << "=" << spec.get(cfg) << "\n";
    return os.str();
}

inline std::string config_help() {
    std::ostringstream os;
    RunConfig defaults;
    for (const auto& [name, spec] : detail::key_table())
        os << "  --" << name << " (default: " << (spec.get(defaults).empty() ? "<empty>" : spec.get(defaults))
           << ")\n      " << spec.help << "\n";
    return os.str();
}

inline std::vector<int> parse_stage_depths(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string part;
    while (std::getline(ss, part, ',')) out.push_back(detail::parse_int(part, "class_depths"));
    return out;
}

}  // namespace mitoseg
