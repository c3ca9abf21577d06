// SPDX-License-Identifier: Apache-2.0
//
// Edge-type interpretability: per-type MA heatmaps over (head, dimension),
// Shannon information content of edge types, per-type MA-mass summaries, and
// the dummy-node ablation runner.
#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "gnnma/common.hpp"
#include "gnnma/detect.hpp"
#include "gnnma/graph.hpp"
#include "gnnma/train.hpp"

namespace gnnma {

/// Per edge type: percentage of that type's edges carrying an MA flag at each
/// (head, dimension) position.
struct HeatmapTable {
    int edge_type = 0;
    int heads = 0;
    int head_dim = 0;
    std::vector<double> cells; // heads x head_dim, percentages in [0, 100]
    int64_t edge_count = 0;

    double at(int h, int d) const {
        return cells[static_cast<size_t>(h) * head_dim + static_cast<size_t>(d)];
    }
};

/// One table per edge type present in edge_types (ascending type order);
/// flags has one entry per (edge, head, dim).
inline std::vector<HeatmapTable> ma_heatmap(const std::vector<uint8_t>& flags,
                                            const std::vector<int>& edge_types, int heads,
                                            int head_dim) {
    const size_t cell_count = static_cast<size_t>(heads) * head_dim;
    if (flags.size() != edge_types.size() * cell_count)
        throw ValidationError("ma_heatmap: flags / edge_types length mismatch");
    std::map<int, HeatmapTable> tables;
    std::map<int, std::vector<int64_t>> counts;
    for (size_t e = 0; e < edge_types.size(); ++e) {
        int type = edge_types[e];
        auto [it, fresh] = tables.try_emplace(type);
        if (fresh) {
            it->second.edge_type = type;
            it->second.heads = heads;
            it->second.head_dim = head_dim;
            counts[type].assign(cell_count, 0);
        }
        ++it->second.edge_count;
        const uint8_t* row = flags.data() + e * cell_count;
        auto& c = counts[type];
        for (size_t i = 0; i < cell_count; ++i) c[i] += row[i];
    }
    std::vector<HeatmapTable> out;
    for (auto& [type, table] : tables) {
        table.cells.resize(cell_count);
        const auto& c = counts[type];
        for (size_t i = 0; i < cell_count; ++i)
            table.cells[i] = 100.0 * static_cast<double>(c[i]) /
                             static_cast<double>(table.edge_count);
        out.push_back(std::move(table));
    }
    return out;
}

/// Shannon information content I = -log2(P) per edge type.
inline std::map<int, double> information_content(const std::map<int, double>& freqs) {
    std::map<int, double> out;
    for (const auto& [type, p] : freqs) {
        if (!(p > 0.0)) throw ValidationError("information_content: zero probability for type " +
                                              std::to_string(type));
        if (p > 1.0) throw ValidationError("information_content: probability above 1");
        out[type] = -std::log2(p);
    }
    return out;
}

/// Per-type roll-up: MA mass (mean heatmap cell), its rank (0 = largest mass),
/// paired with the type's information content.
struct TypeSummary {
    int edge_type = 0;
    double ma_mass = 0.0;  // mean cell percentage
    double info_bits = 0.0;
    int rank = 0;
    int64_t edge_count = 0;
};

inline std::vector<TypeSummary> aggregate_heatmap_summary(const std::vector<HeatmapTable>& tables,
                                                          const std::map<int, double>& freqs) {
    if (tables.empty()) throw ValidationError("aggregate_heatmap_summary: no tables");
    auto info = information_content(freqs);
    std::vector<TypeSummary> out;
    for (const HeatmapTable& t : tables) {
        TypeSummary s;
        s.edge_type = t.edge_type;
        double acc = 0.0;
        for (double c : t.cells) acc += c;
        s.ma_mass = acc / static_cast<double>(t.cells.size());
        auto it = info.find(t.edge_type);
        if (it == info.end())
            throw ValidationError("aggregate_heatmap_summary: no frequency for type " +
                                  std::to_string(t.edge_type));
        s.info_bits = it->second;
        s.edge_count = t.edge_count;
        out.push_back(s);
    }
    std::vector<size_t> order(out.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&out](size_t a, size_t b) {
        if (out[a].ma_mass != out[b].ma_mass) return out[a].ma_mass > out[b].ma_mass;
        return out[a].edge_type < out[b].edge_type;
    });
    for (size_t r = 0; r < order.size(); ++r) out[order[r]].rank = static_cast<int>(r);
    return out;
}

// ---------------------------------------------------------------------------
// Heatmap extraction from a run report
// ---------------------------------------------------------------------------

/// Aggregated heatmap across all layers: each (edge, layer) pair counts as one
/// observation, so the denominator per type is edge_count x layers.
inline std::vector<HeatmapTable> heatmap_all_layers(const MAReport& report) {
    std::vector<uint8_t> flags;
    std::vector<int> types;
    for (const LayerReport& lr : report.layers) {
        flags.insert(flags.end(), lr.flags.begin(), lr.flags.end());
        types.insert(types.end(), lr.edge_types.begin(), lr.edge_types.end());
    }
    return ma_heatmap(flags, types, report.heads, report.head_dim);
}

inline std::vector<HeatmapTable> heatmap_for_layer(const MAReport& report, int layer) {
    for (const LayerReport& lr : report.layers) {
        if (lr.layer == layer)
            return ma_heatmap(lr.flags, lr.edge_types, lr.heads, lr.head_dim);
    }
    throw ValidationError("heatmap_for_layer: no such layer");
}

inline std::string heatmap_to_csv(const HeatmapTable& t) {
    std::string out = "head";
    for (int d = 0; d < t.head_dim; ++d) out += ",dim" + std::to_string(d);
    out += '\n';
    for (int h = 0; h < t.heads; ++h) {
        out += std::to_string(h);
        for (int d = 0; d < t.head_dim; ++d) {
            out += ',';
            out += format_double(t.at(h, d));
        }
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dummy-node ablation
// ---------------------------------------------------------------------------

struct AblationPhase {
    MAReport report;
    std::vector<HeatmapTable> heatmaps; // aggregated across layers
    std::vector<TypeSummary> summary;
    std::map<int, double> frequencies;
    double final_train_loss = 0.0;
    double test_loss = 0.0;
};

struct AblationReport {
    AblationPhase original;  // edge types 1..3
    AblationPhase augmented; // edge types 1..5 after dummy-node augmentation
    std::map<int, double> ma_mass_delta; // augmented - original, common types
};

namespace detail {

inline AblationPhase run_ablation_phase(const Dataset& ds, const ModelConfig& mconfig,
                                        const TrainConfig& tconfig, const AnalysisConfig& acfg,
                                        const std::string& run_id) {
    AblationPhase phase;
    TrainResult tr = train(ds, mconfig, tconfig);
    phase.final_train_loss = tr.history.empty() ? 0.0 : tr.history.back().train_loss;
    phase.test_loss = tr.test_loss;
    auto records = capture_records(ds, tr.params, acfg.batch_size, run_id);
    phase.report = build_ma_report(records, acfg);
    phase.heatmaps = heatmap_all_layers(phase.report);
    phase.frequencies = edge_type_frequencies(ds);
    phase.summary = aggregate_heatmap_summary(phase.heatmaps, phase.frequencies);
    return phase;
}

} // namespace detail

/// Trains on the original dataset, then retrains from fresh initialization on
/// the dummy-augmented dataset, and reports both phases' heatmaps and MA-mass
/// per type. The measured reallocation is reported, not asserted.
inline AblationReport run_ablation(const Dataset& ds, const ModelConfig& mconfig,
                                   const TrainConfig& tconfig, const AnalysisConfig& acfg) {
    for (const Graph& g : ds.graphs)
        if (g.has_dummy)
            throw ValidationError("run_ablation: dataset already contains dummy nodes");
    AblationReport report;
    report.original = detail::run_ablation_phase(ds, mconfig, tconfig, acfg, "ablation-original");
    Dataset augmented = add_dummy_nodes(ds);
    report.augmented =
        detail::run_ablation_phase(augmented, mconfig, tconfig, acfg, "ablation-augmented");
    for (const TypeSummary& o : report.original.summary) {
        for (const TypeSummary& a : report.augmented.summary) {
            if (a.edge_type == o.edge_type)
                report.ma_mass_delta[o.edge_type] = a.ma_mass - o.ma_mass;
        }
    }
    return report;
}

inline nlohmann::json type_summaries_to_json(const std::vector<TypeSummary>& summary) {
    nlohmann::json arr = nlohmann::json::array();
    for (const TypeSummary& s : summary) {
        arr.push_back({{"edge_type", s.edge_type},
                       {"ma_mass", s.ma_mass},
                       {"info_bits", s.info_bits},
                       {"rank", s.rank},
                       {"edge_count", s.edge_count}});
    }
    return arr;
}

inline nlohmann::json ablation_report_to_json(const AblationReport& report) {
    auto phase_json = [](const AblationPhase& p) {
        nlohmann::json j;
        j["report"] = ma_report_to_json(p.report);
        j["summary"] = type_summaries_to_json(p.summary);
        nlohmann::json freqs = nlohmann::json::object();
        for (const auto& [type, f] : p.frequencies) freqs[std::to_string(type)] = f;
        j["frequencies"] = freqs;
        j["final_train_loss"] = p.final_train_loss;
        j["test_loss"] = p.test_loss;
        return j;
    };
    nlohmann::json j;
    j["original"] = phase_json(report.original);
    j["augmented"] = phase_json(report.augmented);
    nlohmann::json deltas = nlohmann::json::object();
    for (const auto& [type, d] : report.ma_mass_delta) deltas[std::to_string(type)] = d;
    j["ma_mass_delta"] = deltas;
    return j;
}

} // namespace gnnma
