// SPDX-License-Identifier: Apache-2.0
//
// Capture file format, magic "MACAP1":
//   bytes 0-5   magic
//   u32 LE      header length
//   header      JSON {run_id, layers, heads, head_dim,
//                     records:[{batch, layer, num_edges, byte_offset}...]}
//   payload     per record, at byte_offset relative to the payload start:
//                 float32 LE values [num_edges x heads x head_dim]
//                 int32 LE edge types [num_edges]
//                 int32 LE graph ids  [num_edges]
#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "gnnma/common.hpp"
#include "gnnma/model.hpp"

namespace gnnma {

inline constexpr char kCaptureMagic[6] = {'M', 'A', 'C', 'A', 'P', '1'};

struct CaptureFile {
    std::string run_id;
    int layers = 0;
    int heads = 0;
    int head_dim = 0;
    std::vector<ActivationRecord> records;
};

namespace detail {

inline uint64_t capture_record_bytes(int num_edges, int heads, int head_dim) {
    return static_cast<uint64_t>(num_edges) * heads * head_dim * 4 +
           static_cast<uint64_t>(num_edges) * 8;
}

} // namespace detail

inline void write_capture(const std::filesystem::path& path, const std::string& run_id, int layers,
                          int heads, int head_dim, const std::vector<ActivationRecord>& records) {
    nlohmann::json header;
    header["run_id"] = run_id;
    header["layers"] = layers;
    header["heads"] = heads;
    header["head_dim"] = head_dim;
    auto& recs = header["records"] = nlohmann::json::array();
    uint64_t offset = 0;
    for (const ActivationRecord& rec : records) {
        if (rec.heads != heads || rec.head_dim != head_dim)
            throw ValidationError("write_capture: record geometry mismatch");
        if (static_cast<int64_t>(rec.values.size()) !=
            static_cast<int64_t>(rec.num_edges) * heads * head_dim)
            throw ValidationError("write_capture: record value count mismatch");
        recs.push_back({{"batch", rec.batch},
                        {"layer", rec.layer},
                        {"num_edges", rec.num_edges},
                        {"byte_offset", offset}});
        offset += detail::capture_record_bytes(rec.num_edges, heads, head_dim);
    }
    std::string hjson = header.dump();
    if (hjson.size() > 0xffffffffull) throw ValidationError("write_capture: header too large");

    std::string blob;
    blob.reserve(sizeof(kCaptureMagic) + 4 + hjson.size() + offset);
    blob.append(kCaptureMagic, sizeof(kCaptureMagic));
    uint32_t hlen = static_cast<uint32_t>(hjson.size());
    char lenbuf[4];
    std::memcpy(lenbuf, &hlen, 4);
    blob.append(lenbuf, 4);
    blob += hjson;
    for (const ActivationRecord& rec : records) {
        size_t off = blob.size();
        blob.resize(off + detail::capture_record_bytes(rec.num_edges, heads, head_dim));
        char* p = blob.data() + off;
        for (double v : rec.values) {
            float f = static_cast<float>(v);
            std::memcpy(p, &f, 4);
            p += 4;
        }
        for (int e = 0; e < rec.num_edges; ++e) {
            int32_t t = rec.edge_types[static_cast<size_t>(e)];
            std::memcpy(p, &t, 4);
            p += 4;
        }
        for (int e = 0; e < rec.num_edges; ++e) {
            int32_t g = rec.edge_graph[static_cast<size_t>(e)];
            std::memcpy(p, &g, 4);
            p += 4;
        }
    }
    atomic_write_file(path, blob);
}

inline CaptureFile read_capture(const std::filesystem::path& path) {
    std::string blob = read_text_file(path);
    if (blob.size() < sizeof(kCaptureMagic) + 4 ||
        std::memcmp(blob.data(), kCaptureMagic, sizeof(kCaptureMagic)) != 0)
        throw ValidationError("capture: bad magic in " + path.string());
    uint32_t hlen = 0;
    std::memcpy(&hlen, blob.data() + sizeof(kCaptureMagic), 4);
    const size_t header_start = sizeof(kCaptureMagic) + 4;
    if (blob.size() < header_start + hlen)
        throw ValidationError("capture: truncated header (need " +
                              std::to_string(header_start + hlen) + " bytes, have " +
                              std::to_string(blob.size()) + ")");
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(blob.substr(header_start, hlen));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("capture: bad header: ") + e.what());
    }

    CaptureFile cf;
    cf.run_id = header.at("run_id").get<std::string>();
    cf.layers = header.at("layers").get<int>();
    cf.heads = header.at("heads").get<int>();
    cf.head_dim = header.at("head_dim").get<int>();
    const size_t payload_start = header_start + hlen;

    for (const auto& meta : header.at("records")) {
        ActivationRecord rec;
        rec.run_id = cf.run_id;
        rec.batch = meta.at("batch").get<int>();
        rec.layer = meta.at("layer").get<int>();
        rec.num_edges = meta.at("num_edges").get<int>();
        rec.heads = cf.heads;
        rec.head_dim = cf.head_dim;
        uint64_t rel = meta.at("byte_offset").get<uint64_t>();
        size_t off = payload_start + rel;
        uint64_t need = detail::capture_record_bytes(rec.num_edges, cf.heads, cf.head_dim);
        if (off + need > blob.size())
            throw ValidationError("capture: truncated record payload at offset " +
                                  std::to_string(off) + " (need " + std::to_string(need) +
                                  " bytes, file has " + std::to_string(blob.size()) + ")");
        const char* p = blob.data() + off;
        rec.values.resize(static_cast<size_t>(rec.num_edges) * cf.heads * cf.head_dim);
        for (auto& v : rec.values) {
            float f;
            std::memcpy(&f, p, 4);
            p += 4;
            v = static_cast<double>(f);
        }
        rec.edge_types.resize(static_cast<size_t>(rec.num_edges));
        for (auto& t : rec.edge_types) {
            int32_t x;
            std::memcpy(&x, p, 4);
            p += 4;
            t = x;
        }
        rec.edge_graph.resize(static_cast<size_t>(rec.num_edges));
        for (auto& g : rec.edge_graph) {
            int32_t x;
            std::memcpy(&x, p, 4);
            p += 4;
            g = x;
        }
        cf.records.push_back(std::move(rec));
    }
    return cf;
}

} // namespace gnnma
