#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mitoseg/checkpoint.hpp"
#include "mitoseg/image.hpp"
#include "mitoseg/metrics.hpp"
#include "mitoseg/synth.hpp"

namespace mitoseg {

// On-disk layout: <root>/images/<id>.png, <root>/masks/<id>.png,
// <root>/centroids.csv with header image_id,x,y.
struct DatasetItem {
    std::string id;
    ImageU8 image;
    ImageU8 mask;  // may be empty when masks are absent
    std::vector<Centroid> centroids;
};

struct Dataset {
    std::vector<DatasetItem> items;
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

inline void write_text_atomic(const std::string& path, const std::string& text) {
    atomic_write(path, text);
}

}  // namespace detail

inline std::map<std::string, std::vector<Centroid>> read_centroids_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open centroid file: " + path);
    std::map<std::string, std::vector<Centroid>> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty() || line == "\r") continue;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        auto cells = detail::split_csv_line(line);
        if (line_no == 1) {
            if (cells.size() != 3 || cells[0] != "image_id" || cells[1] != "x" || cells[2] != "y")
                throw DataError(path + ": expected header 'image_id,x,y', got '" + line + "'");
            continue;
        }
        if (cells.size() != 3)
            throw DataError(path + " line " + std::to_string(line_no) + ": expected 3 fields");
        try {
            out[cells[0]].push_back({std::stod(cells[1]), std::stod(cells[2])});
        } catch (const std::exception&) {
            throw DataError(path + " line " + std::to_string(line_no) + ": unparsable coordinate");
        }
    }
    return out;
}

inline void write_centroids_csv(const std::string& path,
                                const std::map<std::string, std::vector<Centroid>>& table) {
    std::ostringstream os;
    os << "image_id,x,y\n";
    os.precision(3);
    os.setf(std::ios::fixed);
    for (const auto& [id, pts] : table)
        for (const auto& p : pts) os << id << "," << p.x << "," << p.y << "\n";
    detail::write_text_atomic(path, os.str());
}

// detections.csv: image_id,x,y,score,area
inline void write_detections_csv(const std::string& path,
                                 const std::vector<std::pair<std::string, DetectionPoint>>& dets) {
    std::ostringstream os;
    os << "image_id,x,y,score,area\n";
    os.precision(6);
    os.setf(std::ios::fixed);
    for (const auto& [id, d] : dets)
        os << id << "," << d.x << "," << d.y << "," << d.score << "," << d.area << "\n";
    detail::write_text_atomic(path, os.str());
}

inline std::vector<std::pair<std::string, DetectionPoint>> read_detections_csv(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw DataError("cannot open detections file: " + path);
    std::vector<std::pair<std::string, DetectionPoint>> out;
    std::string line;
    int line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        if (line.empty()) continue;
        if (line.back() == '\r') line.pop_back();
        auto cells = detail::split_csv_line(line);
        if (line_no == 1) {
            if (cells.size() != 5 || cells[0] != "image_id")
                throw DataError(path + ": expected header 'image_id,x,y,score,area'");
            continue;
        }
        if (cells.size() != 5)
            throw DataError(path + " line " + std::to_string(line_no) + ": expected 5 fields");
        try {
            DetectionPoint d;
            d.x = std::stod(cells[1]);
            d.y = std::stod(cells[2]);
            d.score = std::stod(cells[3]);
            d.area = std::stoi(cells[4]);
            out.emplace_back(cells[0], d);
        } catch (const std::exception&) {
            throw DataError(path + " line " + std::to_string(line_no) + ": unparsable field");
        }
    }
    return out;
}

inline Dataset load_dataset(const std::string& root, bool need_masks) {
    namespace fs = std::filesystem;
    const fs::path images = fs::path(root) / "images";
    if (!fs::is_directory(images)) throw DataError("dataset has no images/ directory under " + root);
    std::vector<std::string> ids;
    for (const auto& e : fs::directory_iterator(images))
        if (e.path().extension() == ".png") ids.push_back(e.path().stem().string());
    std::sort(ids.begin(), ids.end());
    if (ids.empty()) throw DataError("no PNG images found under " + images.string());

    std::map<std::string, std::vector<Centroid>> centroids;
    const fs::path cpath = fs::path(root) / "centroids.csv";
    if (fs::exists(cpath)) centroids = read_centroids_csv(cpath.string());

    Dataset ds;
    for (const auto& id : ids) {
        DatasetItem item;
        item.id = id;
        item.image = read_png((images / (id + ".png")).string());
        if (item.image.channels != 3) throw DataError("image " + id + " is not RGB");
        const fs::path mpath = fs::path(root) / "masks" / (id + ".png");
        if (fs::exists(mpath)) {
            item.mask = read_png(mpath.string());
            if (item.mask.channels != 1) throw DataError("mask " + id + " is not single-channel");
            if (item.mask.width != item.image.width || item.mask.height != item.image.height)
                throw DataError("mask " + id + " extent differs from its image");
        } else if (need_masks) {
            throw DataError("missing mask for image " + id);
        }
        auto it = centroids.find(id);
        if (it != centroids.end()) item.centroids = it->second;
        ds.items.push_back(std::move(item));
    }
    return ds;
}

inline void save_dataset(const std::string& root, const SynthDataset& ds) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(root) / "images");
    fs::create_directories(fs::path(root) / "masks");
    std::map<std::string, std::vector<Centroid>> table;
    for (std::size_t i = 0; i < ds.items.size(); ++i) {
        char buf[16];
        std::snprintf(buf, sizeof(buf), "img_%04zu", i);
        const std::string id(buf);
        write_png((fs::path(root) / "images" / (id + ".png")).string(), ds.items[i].image);
        write_png((fs::path(root) / "masks" / (id + ".png")).string(), ds.items[i].mask);
        table[id] = ds.items[i].centroids;
    }
    write_centroids_csv((fs::path(root) / "centroids.csv").string(), table);
}

}  // namespace mitoseg
