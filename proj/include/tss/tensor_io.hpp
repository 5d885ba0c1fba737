#pragma once

#include <bit>
#include <cstdint>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tss/tensor.hpp"

namespace tss {

static_assert(std::endian::native == std::endian::little,
              "tensor container payloads are little-endian");

struct IoError : TensorError {
    using TensorError::TensorError;
};

// Portable tensor container: each record is a single-line JSON header
// {"name":..., "dtype":"f64", "shape":[...]} terminated by '\n', followed by
// the raw little-endian f64 payload in row-major order. An archive is a
// concatenation of records.
class TensorArchive {
public:
    void add(const std::string& name, const Tensor& t) { records_.emplace_back(name, t.detach()); }

    bool contains(const std::string& name) const {
        for (const auto& [n, t] : records_)
            if (n == name) return true;
        return false;
    }

    const Tensor& get(const std::string& name) const {
        for (const auto& [n, t] : records_)
            if (n == name) return t;
        throw IoError("archive record not found: " + name);
    }

    const std::vector<std::pair<std::string, Tensor>>& records() const { return records_; }
    size_t size() const { return records_.size(); }

    void save(const std::string& path) const {
        std::ofstream out(path, std::ios::binary);
        if (!out) throw IoError("cannot open for writing: " + path);
        for (const auto& [name, t] : records_) {
            nlohmann::json header = {{"name", name}, {"dtype", "f64"}, {"shape", t.shape()}};
            std::string line = header.dump();
            out.write(line.data(), static_cast<std::streamsize>(line.size()));
            out.put('\n');
            out.write(reinterpret_cast<const char*>(t.value().data()),
                      static_cast<std::streamsize>(t.value().size() * sizeof(double)));
        }
        if (!out) throw IoError("short write to " + path);
    }

    static TensorArchive load(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open for reading: " + path);
        TensorArchive archive;
        int64_t offset = 0;
        std::string line;
        while (true) {
            int64_t header_offset = offset;
            line.clear();
            if (!std::getline(in, line)) {
                if (in.eof() && line.empty()) break;
                throw IoError("unterminated header at byte offset " + std::to_string(header_offset) +
                              " in " + path);
            }
            offset += static_cast<int64_t>(line.size()) + 1;
            nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
            if (header.is_discarded() || !header.is_object() || !header.contains("name") ||
                !header.contains("dtype") || !header.contains("shape"))
                throw IoError("malformed record header at byte offset " + std::to_string(header_offset) +
                              " in " + path);
            if (header["dtype"] != "f64")
                throw IoError("unsupported dtype '" + header["dtype"].get<std::string>() +
                              "' at byte offset " + std::to_string(header_offset));
            Shape shape = header["shape"].get<Shape>();
            int64_t n = shape_numel(shape);
            std::vector<double> data(static_cast<size_t>(n));
            in.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
            if (in.gcount() != static_cast<std::streamsize>(n * sizeof(double)))
                throw IoError("truncated payload for record '" + header["name"].get<std::string>() +
                              "' at byte offset " + std::to_string(offset) + " in " + path +
                              " (expected " + std::to_string(n * sizeof(double)) + " bytes, got " +
                              std::to_string(in.gcount()) + ")");
            offset += n * static_cast<int64_t>(sizeof(double));
            archive.records_.emplace_back(header["name"].get<std::string>(),
                                          Tensor::from(std::move(data), std::move(shape)));
        }
        return archive;
    }

private:
    std::vector<std::pair<std::string, Tensor>> records_;
};

// Text blob helpers: a UTF-8 string stored as one byte per f64 element, so
// non-tensor payloads (embedded configs) ride inside the same container.
inline Tensor text_to_tensor(const std::string& text) {
    std::vector<double> data(text.size());
    for (size_t i = 0; i < text.size(); ++i) data[i] = static_cast<double>(static_cast<unsigned char>(text[i]));
    return Tensor::from(std::move(data), {static_cast<int64_t>(text.size())});
}

inline std::string tensor_to_text(const Tensor& t) {
    std::string out;
    out.reserve(t.value().size());
    for (double v : t.value()) out.push_back(static_cast<char>(static_cast<unsigned char>(v)));
    return out;
}

inline uint64_t fnv1a_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open for checksum: " + path);
    uint64_t h = 1469598103934665603ull;
    char buf[4096];
    while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
        for (std::streamsize i = 0; i < in.gcount(); ++i) {
            h ^= static_cast<unsigned char>(buf[i]);
            h *= 1099511628211ull;
        }
    }
    return h;
}

}  // namespace tss
