#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mitoseg/tensor.hpp"

namespace mitoseg {

// Named parameter/buffer store shared by the model builders. Parameters are
// trainable; buffers (batchnorm running stats) are persisted but not stepped.
class ParamRegistry {
public:
    Tensor param(const std::string& name, Tensor t) {
        t.set_requires_grad(true);
        params_.emplace_back(name, t);
        return t;
    }
    Tensor buffer(const std::string& name, Tensor t) {
        buffers_.emplace_back(name, t);
        return t;
    }

    std::vector<Tensor> trainable() const {
        std::vector<Tensor> out;
        out.reserve(params_.size());
        for (const auto& [name, t] : params_) out.push_back(t);
        return out;
    }

    const std::vector<std::pair<std::string, Tensor>>& params() const { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& buffers() const { return buffers_; }

    std::vector<std::pair<std::string, Tensor>> all_entries() const {
        auto out = params_;
        out.insert(out.end(), buffers_.begin(), buffers_.end());
        return out;
    }

    void zero_grad() {
        for (auto& [name, t] : params_) t.zero_grad();
    }

    std::int64_t total_parameter_count() const {
        std::int64_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    // Text manifest: one line per parameter, "name dim0xdim1x... count".
    std::string manifest() const {
        std::ostringstream os;
        std::int64_t total = 0;
        for (const auto& [name, t] : params_) {
            os << name << " ";
            for (int i = 0; i < t.ndim(); ++i) os << (i ? "x" : "") << t.dim(i);
            os << " " << t.numel() << "\n";
            total += t.numel();
        }
        os << "total " << total << "\n";
        return os.str();
    }

private:
    std::vector<std::pair<std::string, Tensor>> params_;
    std::vector<std::pair<std::string, Tensor>> buffers_;
};

namespace detail {

inline void atomic_write(const std::string& path, const std::string& bytes) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot open " + tmp + " for writing");
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw DataError("short write to " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw DataError("cannot rename " + tmp + " to " + path + ": " + ec.message());
}

}  // namespace detail

// Checkpoint: <path> holds the concatenated little-endian float32 arrays,
// <path>.manifest lists "name shape byte_offset" per entry.
inline void save_checkpoint(const std::string& path, const ParamRegistry& reg) {
    static_assert(sizeof(float) == 4);
    std::string blob;
    std::ostringstream manifest;
    std::size_t offset = 0;
    for (const auto& [name, t] : reg.all_entries()) {
        manifest << name << " ";
        for (int i = 0; i < t.ndim(); ++i) manifest << (i ? "x" : "") << t.dim(i);
        manifest << " " << offset << "\n";
        const auto span = t.data();
        blob.append(reinterpret_cast<const char*>(span.data()), span.size() * sizeof(float));
        offset += span.size() * sizeof(float);
    }
    detail::atomic_write(path, blob);
    detail::atomic_write(path + ".manifest", manifest.str());
}

inline void load_checkpoint(const std::string& path, ParamRegistry& reg) {
    std::ifstream mf(path + ".manifest");
    if (!mf) throw DataError("checkpoint manifest not found: " + path + ".manifest");
    std::ifstream bf(path, std::ios::binary);
    if (!bf) throw DataError("checkpoint not found: " + path);

    struct Entry {
        Shape shape;
        std::size_t offset;
    };
    std::map<std::string, Entry> entries;
    std::string line;
    int line_no = 0;
    while (std::getline(mf, line)) {
        ++line_no;
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string name, shape_txt;
        std::size_t offset;
        if (!(is >> name >> shape_txt >> offset))
            throw DataError("malformed manifest line " + std::to_string(line_no) + " in " + path + ".manifest");
        Entry e;
        e.offset = offset;
        std::stringstream ss(shape_txt);
        std::string dim;
        while (std::getline(ss, dim, 'x')) e.shape.push_back(std::stoi(dim));
        entries[name] = e;
    }

    for (const auto& [name, t] : reg.all_entries()) {
        auto it = entries.find(name);
        if (it == entries.end()) throw DataError("checkpoint is missing entry '" + name + "'");
        if (it->second.shape != t.shape())
            throw DataError("checkpoint entry '" + name + "' has shape " + shape_str(it->second.shape) +
                            ", model expects " + shape_str(t.shape()));
        bf.seekg(static_cast<std::streamoff>(it->second.offset));
        Tensor mut = t;
        bf.read(reinterpret_cast<char*>(mut.data().data()),
                static_cast<std::streamsize>(mut.data().size() * sizeof(float)));
        if (!bf) throw DataError("checkpoint truncated while reading '" + name + "'");
        entries.erase(it);
    }
    if (!entries.empty())
        throw DataError("checkpoint has " + std::to_string(entries.size()) +
                        " extra entries; first is '" + entries.begin()->first + "'");
}

}  // namespace mitoseg
