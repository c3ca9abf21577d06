// SPDX-License-Identifier: Apache-2.0
//
// Massive-activation detection: per-record activation ratios against the
// layer's edge median, strict-threshold flags, per-batch maxima, sorted layer
// curves against a base-model range, and gamma/KS distribution reports over
// -log10 of the ratios.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gnnma/common.hpp"
#include "gnnma/graph.hpp"
#include "gnnma/model.hpp"
#include "gnnma/stats.hpp"

namespace gnnma {

struct AnalysisConfig {
    double threshold = 1000.0; // ratios strictly above are massive
    int batch_size = 1;        // analysis batch size (small isolates MAs)
    int bins = 80;             // histogram bins for distribution reports

    void validate() const {
        if (!(threshold > 1.0)) throw ValidationError("analysis: threshold must be > 1");
        if (batch_size < 1) throw ValidationError("analysis: batch_size must be >= 1");
        if (bins < 1) throw ValidationError("analysis: bins must be >= 1");
    }
};

/// Ratios of one record: |activation| / median(|activations|) over every
/// scalar entry of the layer's edge tensor.
struct RatioStats {
    int layer = 0;
    int batch = 0;
    int num_edges = 0;
    int heads = 0;
    int head_dim = 0;
    std::vector<double> ratios; // E x heads x head_dim
    double edge_median = 0.0;
    double max_ratio = 0.0;
    std::vector<int> edge_types;
    std::vector<int> edge_graph;
};

/// Median of absolute values over all scalar entries; even counts average the
/// two middle order statistics.
inline double edge_median(const ActivationRecord& rec) {
    if (rec.values.empty()) throw ValidationError("edge_median: empty activation record");
    std::vector<double> mags(rec.values.size());
    for (size_t i = 0; i < rec.values.size(); ++i) mags[i] = std::abs(rec.values[i]);
    const size_t n = mags.size();
    const size_t hi = n / 2;
    std::nth_element(mags.begin(), mags.begin() + static_cast<int64_t>(hi), mags.end());
    double median = mags[hi];
    if (n % 2 == 0) {
        double lo = *std::max_element(mags.begin(), mags.begin() + static_cast<int64_t>(hi));
        median = 0.5 * (lo + median);
    }
    if (median == 0.0) throw ValidationError("edge_median: degenerate layer (median is zero)");
    return median;
}

inline RatioStats activation_ratios(const ActivationRecord& rec) {
    RatioStats rs;
    rs.layer = rec.layer;
    rs.batch = rec.batch;
    rs.num_edges = rec.num_edges;
    rs.heads = rec.heads;
    rs.head_dim = rec.head_dim;
    rs.edge_types = rec.edge_types;
    rs.edge_graph = rec.edge_graph;
    rs.edge_median = edge_median(rec);
    rs.ratios.resize(rec.values.size());
    double mx = 0.0;
    for (size_t i = 0; i < rec.values.size(); ++i) {
        rs.ratios[i] = std::abs(rec.values[i]) / rs.edge_median;
        mx = std::max(mx, rs.ratios[i]);
    }
    rs.max_ratio = mx;
    return rs;
}

/// Strictly greater than the threshold, per the set-builder definition.
inline std::vector<uint8_t> flag_massive(const RatioStats& rs, double threshold = 1000.0) {
    if (!(threshold > 1.0)) throw ValidationError("flag_massive: threshold must be > 1");
    std::vector<uint8_t> flags(rs.ratios.size(), 0);
    for (size_t i = 0; i < rs.ratios.size(); ++i) flags[i] = rs.ratios[i] > threshold ? 1 : 0;
    return flags;
}

/// layer -> per-batch max ratios, in batch order.
inline std::map<int, std::vector<double>> batch_max_ratios(const std::vector<RatioStats>& run) {
    if (run.empty()) throw ValidationError("batch_max_ratios: empty run");
    std::map<int, std::vector<std::pair<int, double>>> grouped;
    for (const RatioStats& rs : run) grouped[rs.layer].push_back({rs.batch, rs.max_ratio});
    std::map<int, std::vector<double>> out;
    for (auto& [layer, entries] : grouped) {
        std::stable_sort(entries.begin(), entries.end(),
                         [](const auto& a, const auto& b) { return a.first < b.first; });
        for (auto& [batch, mx] : entries) out[layer].push_back(mx);
    }
    return out;
}

/// One layer of the sorted-curve comparison against the base model.
struct LayerCurve {
    int layer = 0;
    std::vector<double> sorted_max; // trained per-batch maxima, ascending
    double base_min = 0.0;
    double base_max = 0.0;
    int64_t exceedances = 0; // trained maxima above the base range
};

inline std::vector<LayerCurve> layer_ratio_curves(
    const std::map<int, std::vector<double>>& trained,
    const std::map<int, std::vector<double>>& base) {
    if (trained.size() != base.size())
        throw ValidationError("layer_ratio_curves: layer count mismatch");
    std::vector<LayerCurve> out;
    for (const auto& [layer, maxima] : trained) {
        auto bit = base.find(layer);
        if (bit == base.end())
            throw ValidationError("layer_ratio_curves: base is missing layer " + std::to_string(layer));
        LayerCurve c;
        c.layer = layer;
        c.sorted_max = maxima;
        std::sort(c.sorted_max.begin(), c.sorted_max.end());
        c.base_min = *std::min_element(bit->second.begin(), bit->second.end());
        c.base_max = *std::max_element(bit->second.begin(), bit->second.end());
        for (double v : c.sorted_max)
            if (v > c.base_max) ++c.exceedances;
        out.push_back(std::move(c));
    }
    return out;
}

/// Gamma/KS report over t = -log10(ratio). The massive regime sits left of
/// t = -log10(threshold) (-3 at the default threshold).
struct DistributionReport {
    int64_t count = 0;
    double t_min = 0.0;
    double t_max = 0.0;
    std::vector<int64_t> histogram;
    stats::GammaFit fit;
    double ks = 0.0;
    double ma_boundary = -3.0;
};

inline DistributionReport make_distribution_report(std::span<const double> ratios, int bins,
                                                   double threshold) {
    if (bins < 1) throw ValidationError("distribution_report: bins must be >= 1");
    DistributionReport rep;
    rep.ma_boundary = -std::log10(threshold);
    rep.count = static_cast<int64_t>(ratios.size());
    if (ratios.empty()) throw ValidationError("distribution_report: no ratios");
    std::vector<double> t(ratios.size());
    for (size_t i = 0; i < ratios.size(); ++i) {
        if (!(ratios[i] > 0.0))
            throw ValidationError("distribution_report: nonpositive ratio");
        t[i] = -std::log10(ratios[i]);
    }
    auto [mn, mx] = std::minmax_element(t.begin(), t.end());
    rep.t_min = *mn;
    rep.t_max = *mx;
    rep.histogram.assign(static_cast<size_t>(bins), 0);
    const double width = (rep.t_max - rep.t_min) / bins;
    for (double v : t) {
        int b = width > 0.0 ? static_cast<int>((v - rep.t_min) / width) : 0;
        b = std::min(std::max(b, 0), bins - 1);
        ++rep.histogram[static_cast<size_t>(b)];
    }
    rep.fit = stats::gamma_mle_fit(t);
    rep.ks = stats::ks_statistic(t, [&](double x) { return stats::gamma_cdf(x, rep.fit); });
    return rep;
}

inline DistributionReport distribution_report(const RatioStats& rs, int bins,
                                              double threshold = 1000.0) {
    return make_distribution_report(rs.ratios, bins, threshold);
}

// ---------------------------------------------------------------------------
// Run-level report
// ---------------------------------------------------------------------------

struct LayerReport {
    int layer = 0;
    int heads = 0;
    int head_dim = 0;
    std::vector<double> batch_max;   // per analysis batch
    std::vector<uint8_t> flags;      // concatenated over batches, E_total x h x d_k
    std::vector<int> edge_types;     // E_total
    std::vector<int> edge_batch;     // E_total
    int64_t ma_count = 0;
    int64_t total_entries = 0;
    DistributionReport dist;
    std::optional<LayerCurve> curve;
};

struct MAReport {
    std::string run_id;
    double threshold = 1000.0;
    int heads = 0;
    int head_dim = 0;
    std::vector<LayerReport> layers;
};

/// Builds the per-layer report from capture records: per-(batch, layer)
/// medians and ratios, pooled distribution fits, flags, and (optionally)
/// sorted curves against base-model per-batch maxima.
inline MAReport build_ma_report(
    const std::vector<ActivationRecord>& records, const AnalysisConfig& cfg,
    const std::optional<std::map<int, std::vector<double>>>& base_maxima = std::nullopt) {
    cfg.validate();
    if (records.empty()) throw ValidationError("build_ma_report: no records");
    MAReport report;
    report.run_id = records.front().run_id;
    report.threshold = cfg.threshold;
    report.heads = records.front().heads;
    report.head_dim = records.front().head_dim;

    std::map<int, std::vector<const ActivationRecord*>> by_layer;
    for (const auto& rec : records) by_layer[rec.layer].push_back(&rec);

    for (auto& [layer, recs] : by_layer) {
        std::stable_sort(recs.begin(), recs.end(),
                         [](const ActivationRecord* a, const ActivationRecord* b) {
                             return a->batch < b->batch;
                         });
        LayerReport lr;
        lr.layer = layer;
        lr.heads = report.heads;
        lr.head_dim = report.head_dim;
        std::vector<double> pooled_ratios;
        for (const ActivationRecord* rec : recs) {
            if (rec->values.empty()) continue; // batch with no edges carries no signal
            RatioStats rs = activation_ratios(*rec);
            lr.batch_max.push_back(rs.max_ratio);
            auto flags = flag_massive(rs, cfg.threshold);
            for (uint8_t f : flags) lr.ma_count += f;
            lr.flags.insert(lr.flags.end(), flags.begin(), flags.end());
            lr.edge_types.insert(lr.edge_types.end(), rs.edge_types.begin(), rs.edge_types.end());
            lr.edge_batch.insert(lr.edge_batch.end(), static_cast<size_t>(rs.num_edges), rec->batch);
            pooled_ratios.insert(pooled_ratios.end(), rs.ratios.begin(), rs.ratios.end());
        }
        lr.total_entries = static_cast<int64_t>(pooled_ratios.size());
        if (pooled_ratios.empty())
            throw ValidationError("build_ma_report: layer " + std::to_string(layer) +
                                  " has no activations");
        lr.dist = make_distribution_report(pooled_ratios, cfg.bins, cfg.threshold);
        report.layers.push_back(std::move(lr));
    }

    if (base_maxima) {
        std::map<int, std::vector<double>> trained;
        for (const LayerReport& lr : report.layers) trained[lr.layer] = lr.batch_max;
        auto curves = layer_ratio_curves(trained, *base_maxima);
        for (LayerCurve& c : curves) {
            for (LayerReport& lr : report.layers)
                if (lr.layer == c.layer) lr.curve = c;
        }
    }
    return report;
}

/// Runs the model over the dataset in deterministic order with the analysis
/// batch size and captures every layer's edge activations.
inline std::vector<ActivationRecord> capture_records(const Dataset& ds, const ModelParams& params,
                                                     int analysis_batch_size,
                                                     const std::string& run_id) {
    if (analysis_batch_size < 1) throw ValidationError("capture_records: bad batch size");
    std::vector<ActivationRecord> records;
    size_t done = 0;
    int batch_index = 0;
    while (done < ds.graphs.size()) {
        size_t take = std::min<size_t>(static_cast<size_t>(analysis_batch_size),
                                       ds.graphs.size() - done);
        std::vector<Graph> graphs(ds.graphs.begin() + static_cast<int64_t>(done),
                                  ds.graphs.begin() + static_cast<int64_t>(done + take));
        BatchedGraph bg = batch_graphs(graphs, ds.num_edge_types);
        ForwardResult fr = model_forward(bg, params, true);
        for (ActivationRecord& rec : fr.records) {
            rec.run_id = run_id;
            rec.batch = batch_index;
            records.push_back(std::move(rec));
        }
        done += take;
        ++batch_index;
    }
    return records;
}

// ---------------------------------------------------------------------------
// Report emission (JSON + CSV)
// ---------------------------------------------------------------------------

inline nlohmann::json ma_report_to_json(const MAReport& report) {
    nlohmann::json j;
    j["run_id"] = report.run_id;
    j["threshold"] = report.threshold;
    j["heads"] = report.heads;
    j["head_dim"] = report.head_dim;
    auto& layers = j["layers"] = nlohmann::json::array();
    for (const LayerReport& lr : report.layers) {
        nlohmann::json lj;
        lj["layer"] = lr.layer;
        lj["num_batches"] = lr.batch_max.size();
        lj["batch_max_ratios"] = lr.batch_max;
        lj["ma_count"] = lr.ma_count;
        lj["total_entries"] = lr.total_entries;
        lj["distribution"] = {
            {"count", lr.dist.count},
            {"t_min", lr.dist.t_min},
            {"t_max", lr.dist.t_max},
            {"histogram", lr.dist.histogram},
            {"gamma_fit",
             {{"shape", lr.dist.fit.shape},
              {"loc", lr.dist.fit.loc},
              {"scale", lr.dist.fit.scale},
              {"log_likelihood", lr.dist.fit.log_likelihood}}},
            {"ks_statistic", lr.dist.ks},
            {"ma_boundary", lr.dist.ma_boundary},
        };
        if (lr.curve) {
            lj["curve"] = {{"sorted_max_ratios", lr.curve->sorted_max},
                           {"base_min", lr.curve->base_min},
                           {"base_max", lr.curve->base_max},
                           {"exceedances", lr.curve->exceedances}};
        }
        layers.push_back(std::move(lj));
    }
    return j;
}

inline std::string curve_to_csv(const LayerCurve& curve) {
    std::string out = "index,sorted_max_ratio,base_min,base_max\n";
    for (size_t i = 0; i < curve.sorted_max.size(); ++i) {
        out += std::to_string(i);
        out += ',';
        out += format_double(curve.sorted_max[i]);
        out += ',';
        out += format_double(curve.base_min);
        out += ',';
        out += format_double(curve.base_max);
        out += '\n';
    }
    return out;
}

inline std::string histogram_to_csv(const DistributionReport& dist) {
    std::string out = "bin_lo,bin_hi,count,fit_count\n";
    const int bins = static_cast<int>(dist.histogram.size());
    const double width = (dist.t_max - dist.t_min) / bins;
    for (int b = 0; b < bins; ++b) {
        double lo = dist.t_min + b * width;
        double hi = lo + width;
        double center = 0.5 * (lo + hi);
        double fit_count =
            stats::gamma_pdf(center, dist.fit) * static_cast<double>(dist.count) * width;
        out += format_double(lo);
        out += ',';
        out += format_double(hi);
        out += ',';
        out += std::to_string(dist.histogram[static_cast<size_t>(b)]);
        out += ',';
        out += format_double(fit_count);
        out += '\n';
    }
    return out;
}

} // namespace gnnma
