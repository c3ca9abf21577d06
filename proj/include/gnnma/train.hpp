// SPDX-License-Identifier: Apache-2.0
//
// Losses, Adam, the training loop, and checkpoint persistence. The reference
// training path is single-threaded; a fixed seed reproduces parameter
// trajectories exactly.
#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gnnma/common.hpp"
#include "gnnma/graph.hpp"
#include "gnnma/model.hpp"
#include "gnnma/rng.hpp"
#include "gnnma/tensor.hpp"

namespace gnnma {

struct TrainConfig {
    int epochs = 20;
    int batch_size = 32;
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    uint64_t seed = 0;
    int capture_every = 0; // invoke the epoch callback every N epochs (0 = never)

    void validate() const {
        if (epochs < 0) throw ValidationError("train: epochs must be >= 0");
        if (batch_size < 1) throw ValidationError("train: batch_size must be >= 1");
        if (!(lr >= 0.0)) throw ValidationError("train: learning rate must be >= 0");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
            throw ValidationError("train: betas must be in [0, 1)");
    }
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
    return nlohmann::json{{"epochs", c.epochs},       {"batch_size", c.batch_size},
                          {"lr", c.lr},               {"beta1", c.beta1},
                          {"beta2", c.beta2},         {"eps", c.eps},
                          {"weight_decay", c.weight_decay}, {"seed", c.seed},
                          {"capture_every", c.capture_every}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
    if (j.contains("lr")) c.lr = j["lr"].get<double>();
    if (j.contains("beta1")) c.beta1 = j["beta1"].get<double>();
    if (j.contains("beta2")) c.beta2 = j["beta2"].get<double>();
    if (j.contains("eps")) c.eps = j["eps"].get<double>();
    if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
    if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
    if (j.contains("capture_every")) c.capture_every = j["capture_every"].get<int>();
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean squared error; gradient is 2 (pred - target) / N.
inline Tensor mse_loss(const Tensor& pred, const Tensor& target, GradientTape* tape = nullptr) {
    if (!pred.same_shape(target)) throw ValidationError("mse_loss: shape mismatch");
    const int64_t n = pred.size();
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        double d = pred[i] - target[i];
        acc += d * d;
    }
    Tensor loss = Tensor::scalar(acc / static_cast<double>(n));
    if (tape && pred.requires_grad()) {
        Tensor pc = pred, tc = target;
        tape->record(loss, [pc, tc, n](const Tensor& g, GradientTape& t) {
            std::vector<double> gp(static_cast<size_t>(n));
            const double scale = 2.0 * g[0] / static_cast<double>(n);
            for (int64_t i = 0; i < n; ++i) gp[static_cast<size_t>(i)] = scale * (pc[i] - tc[i]);
            t.accumulate(pc, std::move(gp));
        });
    }
    return loss;
}

/// Mean binary cross-entropy over unmasked entries; probabilities are clamped
/// at 1e-12 from both ends, and clamped entries get zero gradient.
inline Tensor bce_loss(const Tensor& pred, const Tensor& target,
                       const std::vector<uint8_t>* mask = nullptr, GradientTape* tape = nullptr) {
    if (!pred.same_shape(target)) throw ValidationError("bce_loss: shape mismatch");
    if (mask && static_cast<int64_t>(mask->size()) != pred.size())
        throw ValidationError("bce_loss: mask size mismatch");
    const int64_t n = pred.size();
    constexpr double kClamp = 1e-12;
    int64_t count = 0;
    double acc = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        if (mask && !(*mask)[static_cast<size_t>(i)]) continue;
        ++count;
        double p = std::min(1.0 - kClamp, std::max(kClamp, pred[i]));
        acc -= target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p);
    }
    if (count == 0) throw ValidationError("bce_loss: empty mask");
    Tensor loss = Tensor::scalar(acc / static_cast<double>(count));
    if (tape && pred.requires_grad()) {
        Tensor pc = pred, tc = target;
        std::vector<uint8_t> mc = mask ? *mask : std::vector<uint8_t>();
        tape->record(loss, [pc, tc, mc, n, count](const Tensor& g, GradientTape& t) {
            std::vector<double> gp(static_cast<size_t>(n), 0.0);
            const double scale = g[0] / static_cast<double>(count);
            for (int64_t i = 0; i < n; ++i) {
                if (!mc.empty() && !mc[static_cast<size_t>(i)]) continue;
                double p = pc[i];
                if (p <= kClamp || p >= 1.0 - kClamp) continue; // clamped: zero slope
                gp[static_cast<size_t>(i)] = scale * (-tc[i] / p + (1.0 - tc[i]) / (1.0 - p));
            }
            t.accumulate(pc, std::move(gp));
        });
    }
    return loss;
}

/// Task-appropriate loss for a batch prediction.
inline Tensor task_loss(Task task, const Tensor& pred, const BatchedGraph& bg,
                        GradientTape* tape = nullptr) {
    Tensor target({pred.rows(), pred.cols()}, bg.targets);
    if (task == Task::GraphRegression) return mse_loss(pred, target, tape);
    return bce_loss(pred, target, nullptr, tape);
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState {
    std::vector<std::vector<double>> m, v; // per parameter, shaped like it
    int64_t step = 0;
};

/// Bias-corrected Adam with decoupled weight decay. Parameters with no
/// recorded gradient are treated as having zero gradient.
inline void adam_step(ModelParams& params, const GradientTape& tape, AdamState& state,
                      const TrainConfig& cfg) {
    std::vector<Tensor*> ps = params.parameters();
    if (state.m.empty()) {
        state.m.resize(ps.size());
        state.v.resize(ps.size());
        for (size_t i = 0; i < ps.size(); ++i) {
            state.m[i].assign(static_cast<size_t>(ps[i]->size()), 0.0);
            state.v[i].assign(static_cast<size_t>(ps[i]->size()), 0.0);
        }
    }
    if (state.m.size() != ps.size()) throw ValidationError("adam_step: state/parameter mismatch");
    ++state.step;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (size_t i = 0; i < ps.size(); ++i) {
        Tensor& p = *ps[i];
        const Tensor* g = tape.grad(p);
        auto& m = state.m[i];
        auto& v = state.v[i];
        auto& data = p.mutable_data();
        for (int64_t k = 0; k < p.size(); ++k) {
            const double gk = g ? (*g)[k] : 0.0;
            m[static_cast<size_t>(k)] = cfg.beta1 * m[static_cast<size_t>(k)] + (1.0 - cfg.beta1) * gk;
            v[static_cast<size_t>(k)] = cfg.beta2 * v[static_cast<size_t>(k)] + (1.0 - cfg.beta2) * gk * gk;
            const double mhat = m[static_cast<size_t>(k)] / bc1;
            const double vhat = v[static_cast<size_t>(k)] / bc2;
            double upd = cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
            if (cfg.weight_decay > 0.0) upd += cfg.lr * cfg.weight_decay * data[static_cast<size_t>(k)];
            data[static_cast<size_t>(k)] -= upd;
        }
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
};

struct SplitIndices {
    std::vector<size_t> train, val, test;
};

/// Deterministic 80/10/10 split by seeded shuffle.
inline SplitIndices split_dataset(size_t n, Rng& rng) {
    std::vector<size_t> idx(n);
    for (size_t i = 0; i < n; ++i) idx[i] = i;
    rng.shuffle(idx);
    SplitIndices s;
    size_t n_val = n / 10, n_test = n / 10;
    size_t n_train = n - n_val - n_test;
    s.train.assign(idx.begin(), idx.begin() + static_cast<int64_t>(n_train));
    s.val.assign(idx.begin() + static_cast<int64_t>(n_train),
                 idx.begin() + static_cast<int64_t>(n_train + n_val));
    s.test.assign(idx.begin() + static_cast<int64_t>(n_train + n_val), idx.end());
    return s;
}

/// Mean loss over the given graphs (no gradient, no dropout).
inline double evaluate(const Dataset& ds, const std::vector<size_t>& indices,
                       const ModelParams& params, int batch_size) {
    if (indices.empty()) return 0.0;
    double acc = 0.0;
    size_t done = 0;
    while (done < indices.size()) {
        size_t take = std::min<size_t>(static_cast<size_t>(batch_size), indices.size() - done);
        std::vector<Graph> graphs;
        graphs.reserve(take);
        for (size_t i = 0; i < take; ++i) graphs.push_back(ds.graphs[indices[done + i]]);
        BatchedGraph bg = batch_graphs(graphs, ds.num_edge_types);
        ForwardResult fr = model_forward(bg, params, false);
        acc += task_loss(ds.task, fr.prediction, bg).item() * static_cast<double>(take);
        done += take;
    }
    return acc / static_cast<double>(indices.size());
}

struct TrainResult {
    ModelParams params;
    std::vector<EpochStats> history;
    SplitIndices split;
    double test_loss = 0.0; // 0 when the test split is empty
};

using EpochCallback = std::function<void(int epoch, const ModelParams&)>;

/// End-to-end training. RNG consumption order: dataset split, parameter init,
/// then per-epoch shuffles (and dropout masks, when enabled); this makes the
/// full trajectory a function of (dataset, configs, seed).
inline TrainResult train(const Dataset& ds, const ModelConfig& mconfig, const TrainConfig& tconfig,
                         const EpochCallback& callback = nullptr) {
    mconfig.validate();
    tconfig.validate();
    ds.validate();
    if (mconfig.task != ds.task)
        throw ValidationError("train: model task does not match dataset task");

    Rng rng(tconfig.seed);
    TrainResult result;
    result.split = split_dataset(ds.size(), rng);
    result.params = init_params(mconfig, ds.node_dim, ds.edge_feature_width(), ds.target_cols, rng);

    const bool use_dropout = mconfig.dropout > 0.0;
    AdamState state;
    for (int epoch = 0; epoch < tconfig.epochs; ++epoch) {
        rng.shuffle(result.split.train);
        double epoch_loss = 0.0;
        size_t done = 0;
        int batch_index = 0;
        while (done < result.split.train.size()) {
            size_t take = std::min<size_t>(static_cast<size_t>(tconfig.batch_size),
                                           result.split.train.size() - done);
            std::vector<Graph> graphs;
            graphs.reserve(take);
            for (size_t i = 0; i < take; ++i)
                graphs.push_back(ds.graphs[result.split.train[done + i]]);
            BatchedGraph bg = batch_graphs(graphs, ds.num_edge_types);

            GradientTape tape;
            ForwardResult fr =
                model_forward(bg, result.params, false, &tape, use_dropout ? &rng : nullptr);
            Tensor loss = task_loss(ds.task, fr.prediction, bg, &tape);
            if (!std::isfinite(loss.item())) {
                throw NumericError("non-finite loss at epoch " + std::to_string(epoch) +
                                   ", batch " + std::to_string(batch_index));
            }
            epoch_loss += loss.item() * static_cast<double>(take);
            tape.backward(loss);
            adam_step(result.params, tape, state, tconfig);
            done += take;
            ++batch_index;
        }
        EpochStats es;
        es.epoch = epoch;
        es.train_loss = epoch_loss / static_cast<double>(result.split.train.size());
        es.val_loss = evaluate(ds, result.split.val, result.params, tconfig.batch_size);
        result.history.push_back(es);
        if (callback && tconfig.capture_every > 0 && (epoch + 1) % tconfig.capture_every == 0)
            callback(epoch, result.params);
    }
    result.test_loss = evaluate(ds, result.split.test, result.params, tconfig.batch_size);
    return result;
}

inline std::string history_to_csv(const std::vector<EpochStats>& history) {
    std::string out = "epoch,train_loss,val_loss\n";
    for (const EpochStats& e : history) {
        out += std::to_string(e.epoch);
        out += ',';
        out += format_double(e.train_loss);
        out += ',';
        out += format_double(e.val_loss);
        out += '\n';
    }
    return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
// Layout: 8-byte magic "GNNCKPT1", u64 LE manifest length, manifest JSON,
// then all parameters as little-endian 64-bit floats in manifest order.

inline constexpr char kCheckpointMagic[8] = {'G', 'N', 'N', 'C', 'K', 'P', 'T', '1'};

struct Checkpoint {
    ModelParams params;
    int num_edge_types = 3;
    uint64_t seed = 0;
    int epoch = 0;
};

inline void save_checkpoint(const std::filesystem::path& path, ModelParams& params,
                            int num_edge_types, uint64_t seed, int epoch) {
    nlohmann::json manifest;
    manifest["format"] = "gnnma-checkpoint";
    manifest["version"] = 1;
    manifest["config"] = model_config_to_json(params.config);
    manifest["dims"] = {{"node_dim", params.node_dim},
                        {"edge_feat_dim", params.edge_feat_dim},
                        {"target_cols", params.target_cols},
                        {"num_edge_types", num_edge_types}};
    manifest["seed"] = seed;
    manifest["epoch"] = epoch;
    auto& plist = manifest["params"] = nlohmann::json::array();
    params.visit([&plist](const char* name, Tensor& t) {
        plist.push_back({{"name", name}, {"shape", t.shape()}});
    });
    std::string mjson = manifest.dump();

    std::string blob;
    blob.reserve(sizeof(kCheckpointMagic) + 8 + mjson.size());
    blob.append(kCheckpointMagic, sizeof(kCheckpointMagic));
    uint64_t mlen = mjson.size();
    char lenbuf[8];
    std::memcpy(lenbuf, &mlen, 8);
    blob.append(lenbuf, 8);
    blob += mjson;
    params.visit([&blob](const char*, Tensor& t) {
        size_t off = blob.size();
        blob.resize(off + static_cast<size_t>(t.size()) * 8);
        std::memcpy(blob.data() + off, t.data().data(), static_cast<size_t>(t.size()) * 8);
    });
    atomic_write_file(path, blob);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::string blob = read_text_file(path);
    if (blob.size() < sizeof(kCheckpointMagic) + 8 ||
        std::memcmp(blob.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0)
        throw ValidationError("checkpoint: bad magic in " + path.string());
    uint64_t mlen = 0;
    std::memcpy(&mlen, blob.data() + 8, 8);
    if (blob.size() < 16 + mlen) throw ValidationError("checkpoint: truncated manifest");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(blob.substr(16, mlen));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("checkpoint: bad manifest: ") + e.what());
    }

    Checkpoint ck;
    ModelConfig cfg = model_config_from_json(manifest.at("config"));
    const auto& dims = manifest.at("dims");
    ck.num_edge_types = dims.at("num_edge_types").get<int>();
    ck.seed = manifest.at("seed").get<uint64_t>();
    ck.epoch = manifest.at("epoch").get<int>();

    Rng dummy(0);
    ck.params = init_params(cfg, dims.at("node_dim").get<int>(),
                            dims.at("edge_feat_dim").get<int>(),
                            dims.at("target_cols").get<int>(), dummy);

    size_t offset = 16 + mlen;
    size_t entry = 0;
    const auto& plist = manifest.at("params");
    ck.params.visit([&](const char* name, Tensor& t) {
        if (entry >= plist.size())
            throw ValidationError("checkpoint: manifest is missing parameters");
        const auto& meta = plist[entry];
        if (meta.at("name").get<std::string>() != name)
            throw ValidationError("checkpoint: parameter order mismatch at " + std::string(name));
        std::vector<int> shape = meta.at("shape").get<std::vector<int>>();
        if (shape != t.shape())
            throw ValidationError("checkpoint: shape mismatch for " + std::string(name));
        size_t bytes = static_cast<size_t>(t.size()) * 8;
        if (offset + bytes > blob.size())
            throw ValidationError("checkpoint: truncated blob at " + std::string(name) +
                                  " (offset " + std::to_string(offset) + ")");
        std::memcpy(t.mutable_data().data(), blob.data() + offset, bytes);
        offset += bytes;
        ++entry;
    });
    if (entry != plist.size()) throw ValidationError("checkpoint: extra manifest parameters");
    if (offset != blob.size())
        throw ValidationError("checkpoint: trailing bytes after parameter blob");
    return ck;
}

} // namespace gnnma
