// SPDX-License-Identifier: Apache-2.0
//
// Command-line pipeline: synthetic dataset generation, training, activation
// capture, massive-activation detection, edge-type heatmaps, the dummy-node
// ablation, and the EBT comparison harness.
//
// Exit codes: 0 success, 1 usage error, 2 validation error, 3 numerical
// failure. Every run is deterministic under identical inputs and seeds.
#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "gnnma/capture_io.hpp"
#include "gnnma/common.hpp"
#include "gnnma/detect.hpp"
#include "gnnma/graph.hpp"
#include "gnnma/interpret.hpp"
#include "gnnma/model.hpp"
#include "gnnma/stats.hpp"
#include "gnnma/svg.hpp"
#include "gnnma/synthetic.hpp"
#include "gnnma/train.hpp"

namespace fs = std::filesystem;
using namespace gnnma;

namespace {

struct RunFileConfig {
    ModelConfig model;
    TrainConfig train;
    AnalysisConfig analysis;
};

RunFileConfig load_run_config(const fs::path& path) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("config " + path.string() + ": " + e.what());
    }
    RunFileConfig cfg;
    if (j.contains("model")) cfg.model = model_config_from_json(j["model"]);
    if (j.contains("train")) cfg.train = train_config_from_json(j["train"]);
    if (j.contains("analysis")) {
        const auto& a = j["analysis"];
        if (a.contains("threshold")) cfg.analysis.threshold = a["threshold"].get<double>();
        if (a.contains("batch_size")) cfg.analysis.batch_size = a["batch_size"].get<int>();
        if (a.contains("bins")) cfg.analysis.bins = a["bins"].get<int>();
        cfg.analysis.validate();
    }
    return cfg;
}

void require_exists(const fs::path& p, const char* what) {
    if (!fs::exists(p)) throw ValidationError(std::string(what) + " not found: " + p.string());
}

fs::path ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec && !fs::is_directory(dir))
        throw ValidationError("cannot create output directory " + dir.string() + ": " + ec.message());
    return dir;
}

// Flags shared by several subcommands; value presence means "override config".
struct Overrides {
    std::optional<uint64_t> seed;
    bool ebt = false;
    std::optional<double> threshold;
    std::optional<int> analysis_batch;
};

void apply_overrides(RunFileConfig& cfg, const Overrides& ov) {
    if (ov.seed) cfg.train.seed = *ov.seed;
    if (ov.ebt) cfg.model.ebt = true;
    if (ov.threshold) cfg.analysis.threshold = *ov.threshold;
    if (ov.analysis_batch) cfg.analysis.batch_size = *ov.analysis_batch;
    cfg.analysis.validate();
}

std::map<int, std::vector<double>> maxima_from_capture(const CaptureFile& cf) {
    std::vector<RatioStats> stats;
    for (const ActivationRecord& rec : cf.records) {
        if (rec.values.empty()) continue;
        stats.push_back(activation_ratios(rec));
    }
    return batch_max_ratios(stats);
}

void write_detect_outputs(const fs::path& out_dir, const MAReport& report) {
    atomic_write_file(out_dir / "report.json", ma_report_to_json(report).dump(2) + "\n");
    for (const LayerReport& lr : report.layers) {
        std::string tag = "layer" + std::to_string(lr.layer);
        atomic_write_file(out_dir / ("hist_" + tag + ".csv"), histogram_to_csv(lr.dist));
        atomic_write_file(out_dir / ("hist_" + tag + ".svg"), svg::histogram_svg(lr.dist));
        if (lr.curve) {
            atomic_write_file(out_dir / ("curves_" + tag + ".csv"), curve_to_csv(*lr.curve));
            atomic_write_file(out_dir / ("curves_" + tag + ".svg"), svg::curve_svg(*lr.curve));
        }
    }
}

void write_heatmap_outputs(const fs::path& out_dir, const MAReport& report) {
    // per-layer tables plus the all-layer aggregate
    for (const LayerReport& lr : report.layers) {
        auto tables = heatmap_for_layer(report, lr.layer);
        for (const HeatmapTable& t : tables) {
            atomic_write_file(out_dir / ("heatmap_type" + std::to_string(t.edge_type) + "_layer" +
                                         std::to_string(lr.layer) + ".csv"),
                              heatmap_to_csv(t));
        }
    }
    auto aggregated = heatmap_all_layers(report);
    for (const HeatmapTable& t : aggregated) {
        atomic_write_file(out_dir / ("heatmap_type" + std::to_string(t.edge_type) + "_all.csv"),
                          heatmap_to_csv(t));
    }
    atomic_write_file(out_dir / "heatmap_all.svg", svg::heatmap_svg(aggregated));

    // edge-type frequencies over the captured pass (layer 0 sees each edge once)
    std::map<int, double> freqs;
    if (!report.layers.empty()) {
        std::map<int, int64_t> counts;
        int64_t total = 0;
        for (int t : report.layers.front().edge_types) {
            ++counts[t];
            ++total;
        }
        for (auto& [t, c] : counts)
            freqs[t] = static_cast<double>(c) / static_cast<double>(total);
    }
    auto summary = aggregate_heatmap_summary(aggregated, freqs);
    nlohmann::json sj;
    sj["run_id"] = report.run_id;
    sj["threshold"] = report.threshold;
    sj["summary"] = type_summaries_to_json(summary);
    nlohmann::json freq_json = nlohmann::json::object();
    for (auto& [t, f] : freqs) freq_json[std::to_string(t)] = f;
    sj["frequencies"] = freq_json;
    atomic_write_file(out_dir / "heatmap_summary.json", sj.dump(2) + "\n");
}

int cmd_gen(const fs::path& config_path, const fs::path& out_path,
            const std::optional<uint64_t>& seed) {
    require_exists(config_path, "generator config");
    GeneratorConfig cfg = load_generator_config(config_path);
    if (seed) cfg.seed = *seed;
    Dataset ds = generate_synthetic(cfg, cfg.seed);
    save_jsonl(out_path, ds);
    std::cout << "wrote " << ds.size() << " graphs to " << out_path.string() << "\n";
    return 0;
}

int cmd_train(const fs::path& data_path, const fs::path& config_path, const fs::path& out_dir,
              const Overrides& ov) {
    require_exists(data_path, "dataset");
    require_exists(config_path, "config");
    RunFileConfig cfg = load_run_config(config_path);
    apply_overrides(cfg, ov);
    Dataset ds = load_jsonl(data_path, cfg.model.task);
    ensure_dir(out_dir);

    TrainResult result = train(ds, cfg.model, cfg.train);
    save_checkpoint(out_dir / "checkpoint.bin", result.params, ds.num_edge_types, cfg.train.seed,
                    cfg.train.epochs);
    atomic_write_file(out_dir / "history.csv", history_to_csv(result.history));
    if (!result.history.empty()) {
        std::cout << "final train loss " << format_double(result.history.back().train_loss)
                  << ", val loss " << format_double(result.history.back().val_loss)
                  << ", test loss " << format_double(result.test_loss) << "\n";
    }
    std::cout << "checkpoint: " << (out_dir / "checkpoint.bin").string() << "\n";
    return 0;
}

int cmd_capture(const fs::path& data_path, const fs::path& out_path,
                const std::optional<fs::path>& checkpoint_path, bool untrained,
                const std::optional<fs::path>& config_path, int batch_size,
                const std::optional<uint64_t>& seed) {
    require_exists(data_path, "dataset");
    if (untrained == checkpoint_path.has_value())
        throw ValidationError("capture: pass exactly one of --checkpoint or --untrained");

    ModelParams params;
    std::string run_id;
    Dataset ds = load_jsonl(data_path);

    if (untrained) {
        if (!config_path) throw ValidationError("capture --untrained requires --config");
        require_exists(*config_path, "config");
        RunFileConfig cfg = load_run_config(*config_path);
        uint64_t s = seed.value_or(cfg.train.seed);
        if (cfg.model.task != ds.task) ds.task = cfg.model.task;
        Rng rng(s);
        params = init_params(cfg.model, ds.node_dim, ds.edge_feature_width(), ds.target_cols, rng);
        run_id = "base-" + std::to_string(s);
    } else {
        require_exists(*checkpoint_path, "checkpoint");
        Checkpoint ck = load_checkpoint(*checkpoint_path);
        if (ck.params.node_dim != ds.node_dim)
            throw ValidationError("capture: dataset node width does not match checkpoint");
        if (ck.num_edge_types != ds.num_edge_types)
            throw ValidationError("capture: dataset edge types do not match checkpoint");
        if (ck.params.edge_feat_dim != ds.edge_feature_width())
            throw ValidationError("capture: edge feature width does not match checkpoint");
        ds.task = ck.params.config.task;
        params = std::move(ck.params);
        run_id = "trained-" + std::to_string(ck.seed);
    }

    auto records = capture_records(ds, params, batch_size, run_id);
    write_capture(out_path, run_id, params.config.layers, params.config.heads,
                  params.config.head_dim(), records);
    std::cout << "captured " << records.size() << " records (" << params.config.layers
              << " layers x " << records.size() / static_cast<size_t>(params.config.layers)
              << " batches) to " << out_path.string() << "\n";
    return 0;
}

int cmd_detect(const fs::path& capture_path, const std::optional<fs::path>& base_path,
               const fs::path& out_dir, const AnalysisConfig& acfg) {
    require_exists(capture_path, "capture file");
    CaptureFile cf = read_capture(capture_path);
    std::optional<std::map<int, std::vector<double>>> base_maxima;
    if (base_path) {
        require_exists(*base_path, "base capture file");
        CaptureFile base = read_capture(*base_path);
        base_maxima = maxima_from_capture(base);
    }
    MAReport report = build_ma_report(cf.records, acfg, base_maxima);
    ensure_dir(out_dir);
    write_detect_outputs(out_dir, report);
    for (const LayerReport& lr : report.layers) {
        std::cout << "layer " << lr.layer << ": " << lr.ma_count << "/" << lr.total_entries
                  << " massive, KS " << format_double(lr.dist.ks);
        if (lr.curve) std::cout << ", " << lr.curve->exceedances << " batches above base range";
        std::cout << "\n";
    }
    std::cout << "report: " << (out_dir / "report.json").string() << "\n";
    return 0;
}

int cmd_heatmap(const fs::path& capture_path, const fs::path& report_path,
                const fs::path& out_dir, const std::optional<int>& bins_override) {
    require_exists(capture_path, "capture file");
    require_exists(report_path, "report");
    nlohmann::json rj;
    try {
        rj = nlohmann::json::parse(read_text_file(report_path));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("report " + report_path.string() + ": " + e.what());
    }
    AnalysisConfig acfg;
    acfg.threshold = rj.at("threshold").get<double>();
    if (bins_override) acfg.bins = *bins_override;
    CaptureFile cf = read_capture(capture_path);
    MAReport report = build_ma_report(cf.records, acfg);
    ensure_dir(out_dir);
    write_heatmap_outputs(out_dir, report);
    std::cout << "heatmaps written to " << out_dir.string() << "\n";
    return 0;
}

int cmd_ablate(const fs::path& data_path, const fs::path& config_path, const fs::path& out_dir,
               const Overrides& ov) {
    require_exists(data_path, "dataset");
    require_exists(config_path, "config");
    RunFileConfig cfg = load_run_config(config_path);
    apply_overrides(cfg, ov);
    Dataset ds = load_jsonl(data_path, cfg.model.task);
    ensure_dir(out_dir);

    AblationReport report = run_ablation(ds, cfg.model, cfg.train, cfg.analysis);
    atomic_write_file(out_dir / "ablation_report.json",
                      ablation_report_to_json(report).dump(2) + "\n");
    auto write_phase = [&](const AblationPhase& phase, const std::string& name) {
        fs::path dir = ensure_dir(out_dir / name);
        for (const HeatmapTable& t : phase.heatmaps) {
            atomic_write_file(dir / ("heatmap_type" + std::to_string(t.edge_type) + "_all.csv"),
                              heatmap_to_csv(t));
        }
        atomic_write_file(dir / "heatmap_all.svg", svg::heatmap_svg(phase.heatmaps));
    };
    write_phase(report.original, "phase_original");
    write_phase(report.augmented, "phase_augmented");
    for (const auto& [type, delta] : report.ma_mass_delta) {
        std::cout << "type " << type << " MA mass delta " << format_double(delta) << "\n";
    }
    std::cout << "ablation report: " << (out_dir / "ablation_report.json").string() << "\n";
    return 0;
}

int cmd_compare_ebt(const fs::path& data_path, const fs::path& config_path, const fs::path& out_dir,
                    const Overrides& ov) {
    require_exists(data_path, "dataset");
    require_exists(config_path, "config");
    RunFileConfig cfg = load_run_config(config_path);
    apply_overrides(cfg, ov);
    Dataset ds = load_jsonl(data_path, cfg.model.task);
    ensure_dir(out_dir);

    ModelConfig no_ebt = cfg.model;
    no_ebt.ebt = false;
    ModelConfig with_ebt = cfg.model;
    with_ebt.ebt = true;

    TrainResult plain = train(ds, no_ebt, cfg.train);
    TrainResult biased = train(ds, with_ebt, cfg.train);

    std::string csv = "variant,final_train_loss,final_val_loss,test_loss\n";
    auto row = [&csv](const char* name, const TrainResult& r) {
        csv += name;
        csv += ',';
        csv += format_double(r.history.empty() ? 0.0 : r.history.back().train_loss);
        csv += ',';
        csv += format_double(r.history.empty() ? 0.0 : r.history.back().val_loss);
        csv += ',';
        csv += format_double(r.test_loss);
        csv += '\n';
    };
    row("no_ebt", plain);
    row("ebt", biased);
    atomic_write_file(out_dir / "ebt_compare.csv", csv);
    atomic_write_file(out_dir / "history_no_ebt.csv", history_to_csv(plain.history));
    atomic_write_file(out_dir / "history_ebt.csv", history_to_csv(biased.history));

    std::string curves = "epoch,train_no_ebt,val_no_ebt,train_ebt,val_ebt\n";
    std::vector<double> t0, v0, t1, v1;
    for (size_t e = 0; e < plain.history.size() && e < biased.history.size(); ++e) {
        curves += std::to_string(e);
        curves += ',';
        curves += format_double(plain.history[e].train_loss);
        curves += ',';
        curves += format_double(plain.history[e].val_loss);
        curves += ',';
        curves += format_double(biased.history[e].train_loss);
        curves += ',';
        curves += format_double(biased.history[e].val_loss);
        curves += '\n';
        t0.push_back(plain.history[e].train_loss);
        v0.push_back(plain.history[e].val_loss);
        t1.push_back(biased.history[e].train_loss);
        v1.push_back(biased.history[e].val_loss);
    }
    atomic_write_file(out_dir / "loss_curves.csv", curves);
    if (!t0.empty()) {
        atomic_write_file(out_dir / "loss_curves.svg",
                          svg::line_chart_svg("training loss with and without explicit bias terms",
                                              {{"train", t0}, {"val", v0},
                                               {"train (ebt)", t1}, {"val (ebt)", v1}},
                                              "epoch", "loss"));
    }
    std::cout << "test loss no_ebt " << format_double(plain.test_loss) << ", ebt "
              << format_double(biased.test_loss) << "\n";
    std::cout << "comparison: " << (out_dir / "ebt_compare.csv").string() << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"edge-featured graph transformer massive-activation toolkit"};
    app.require_subcommand(1);

    // gen
    auto* gen = app.add_subcommand("gen", "generate a synthetic dataset (JSONL)");
    std::string gen_config, gen_out;
    std::optional<uint64_t> gen_seed;
    gen->add_option("--config", gen_config, "generator config JSON")->required();
    gen->add_option("--out", gen_out, "output dataset path")->required();
    gen->add_option("--seed", gen_seed, "override the config seed");

    // train
    auto* tr = app.add_subcommand("train", "train a model, write checkpoint + history");
    std::string tr_data, tr_config, tr_out;
    Overrides tr_ov;
    tr->add_option("--data", tr_data, "dataset JSONL")->required();
    tr->add_option("--config", tr_config, "run config JSON")->required();
    tr->add_option("--out", tr_out, "output directory")->required();
    tr->add_option("--seed", tr_ov.seed, "override the training seed");
    tr->add_flag("--ebt", tr_ov.ebt, "enable explicit bias terms");

    // capture
    auto* cap = app.add_subcommand("capture", "run the model and capture edge activations");
    std::string cap_data, cap_out;
    std::optional<fs::path> cap_ckpt, cap_config;
    bool cap_untrained = false;
    int cap_batch = 1;
    std::optional<uint64_t> cap_seed;
    cap->add_option("--data", cap_data, "dataset JSONL")->required();
    cap->add_option("--out", cap_out, "output capture file")->required();
    cap->add_option("--checkpoint", cap_ckpt, "trained checkpoint");
    cap->add_flag("--untrained", cap_untrained, "capture from a fresh Xavier initialization");
    cap->add_option("--config", cap_config, "run config JSON (required with --untrained)");
    cap->add_option("--batch-size", cap_batch, "analysis batch size")->default_val(1);
    cap->add_option("--seed", cap_seed, "initialization seed for --untrained");

    // detect
    auto* det = app.add_subcommand("detect", "massive-activation report from a capture file");
    std::string det_capture, det_out;
    std::optional<fs::path> det_base;
    AnalysisConfig det_cfg;
    det->add_option("--capture", det_capture, "capture file")->required();
    det->add_option("--base", det_base, "base-model capture for range comparison");
    det->add_option("--out", det_out, "output directory")->required();
    det->add_option("--threshold", det_cfg.threshold, "massive-activation ratio threshold")
        ->default_val(1000.0);
    det->add_option("--bins", det_cfg.bins, "histogram bins")->default_val(80);

    // heatmap
    auto* hm = app.add_subcommand("heatmap", "per edge-type MA heatmaps from capture + report");
    std::string hm_capture, hm_report, hm_out;
    std::optional<int> hm_bins;
    hm->add_option("--capture", hm_capture, "capture file")->required();
    hm->add_option("--report", hm_report, "report.json from detect")->required();
    hm->add_option("--out", hm_out, "output directory")->required();
    hm->add_option("--bins", hm_bins, "histogram bins override");

    // ablate
    auto* ab = app.add_subcommand("ablate", "dummy-node ablation: train, detect, compare");
    std::string ab_data, ab_config, ab_out;
    Overrides ab_ov;
    ab->add_option("--data", ab_data, "dataset JSONL")->required();
    ab->add_option("--config", ab_config, "run config JSON")->required();
    ab->add_option("--out", ab_out, "output directory")->required();
    ab->add_option("--seed", ab_ov.seed, "override the training seed");
    ab->add_flag("--ebt", ab_ov.ebt, "enable explicit bias terms");
    ab->add_option("--threshold", ab_ov.threshold, "massive-activation ratio threshold");
    ab->add_option("--batch-size", ab_ov.analysis_batch, "analysis batch size");

    // compare-ebt
    auto* ce = app.add_subcommand("compare-ebt", "train with and without EBT, compare losses");
    std::string ce_data, ce_config, ce_out;
    Overrides ce_ov;
    ce->add_option("--data", ce_data, "dataset JSONL")->required();
    ce->add_option("--config", ce_config, "run config JSON")->required();
    ce->add_option("--out", ce_out, "output directory")->required();
    ce->add_option("--seed", ce_ov.seed, "override the training seed");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 1; // --help exits 0, every parse failure is usage error 1
    }

    try {
        if (gen->parsed()) return cmd_gen(gen_config, gen_out, gen_seed);
        if (tr->parsed()) return cmd_train(tr_data, tr_config, tr_out, tr_ov);
        if (cap->parsed())
            return cmd_capture(cap_data, cap_out, cap_ckpt, cap_untrained, cap_config, cap_batch,
                               cap_seed);
        if (det->parsed()) {
            det_cfg.validate();
            return cmd_detect(det_capture, det_base, det_out, det_cfg);
        }
        if (hm->parsed()) return cmd_heatmap(hm_capture, hm_report, hm_out, hm_bins);
        if (ab->parsed()) return cmd_ablate(ab_data, ab_config, ab_out, ab_ov);
        if (ce->parsed()) return cmd_compare_ebt(ce_data, ce_config, ce_out, ce_ov);
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
