// SPDX-License-Identifier: Apache-2.0
//
// Edge-featured multi-head attention graph transformer.
//
// Each head projects node states to Q/K/V and edge states to a per-head edge
// vector. The edge channel is multiplicative per dimension: for an edge u->v,
//   what_uv = (Q_u ∘ K_v ∘ E_uv) / sqrt(d_k)
// is the per-edge, per-head, per-dimension edge attention output that the
// capture hooks record (pre output-projection). Its dimension sum is the
// scalar attention score; attention weights are a softmax over each source
// node's edges; node updates aggregate V_v + E_uv. The optional explicit bias
// terms add a learnable per-head key/edge/value bias triple: an edge bias
// (Q_u . k) * e added to every edge activation leaving u, plus a virtual
// softmax slot with score (Q_u . k)/sqrt(d_k) whose weight gates a value bias.
#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gnnma/common.hpp"
#include "gnnma/graph.hpp"
#include "gnnma/rng.hpp"
#include "gnnma/tensor.hpp"

namespace gnnma {

inline constexpr double kLayerNormEps = 1e-5;

struct ModelConfig {
    int layers = 2;
    int hidden = 32;
    int heads = 4;
    int ffn = 64;
    Task task = Task::GraphRegression;
    bool ebt = false;
    // Virtual softmax slot of the bias terms; disabled only to check the
    // zero-bias equivalence against the plain model.
    bool ebt_value_slot = true;
    int pe_dim = 8;
    double dropout = 0.0;

    int head_dim() const { return hidden / heads; }

    void validate() const {
        if (layers < 1) throw ValidationError("model: layers must be >= 1");
        if (heads < 1 || hidden % heads != 0)
            throw ValidationError("model: hidden must be divisible by heads");
        if (ffn < 1) throw ValidationError("model: ffn width must be >= 1");
        if (pe_dim < 0 || pe_dim > hidden)
            throw ValidationError("model: pe_dim must be in [0, hidden]");
        if (dropout < 0.0 || dropout >= 1.0)
            throw ValidationError("model: dropout must be in [0, 1)");
    }
};

inline nlohmann::json model_config_to_json(const ModelConfig& c) {
    return nlohmann::json{{"layers", c.layers},   {"hidden", c.hidden},
                          {"heads", c.heads},     {"ffn", c.ffn},
                          {"task", task_name(c.task)}, {"ebt", c.ebt},
                          {"pe_dim", c.pe_dim},   {"dropout", c.dropout}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    if (j.contains("layers")) c.layers = j["layers"].get<int>();
    if (j.contains("hidden")) c.hidden = j["hidden"].get<int>();
    if (j.contains("heads")) c.heads = j["heads"].get<int>();
    if (j.contains("ffn")) c.ffn = j["ffn"].get<int>();
    if (j.contains("task")) c.task = task_from_name(j["task"].get<std::string>());
    if (j.contains("ebt")) c.ebt = j["ebt"].get<bool>();
    if (j.contains("pe_dim")) c.pe_dim = j["pe_dim"].get<int>();
    if (j.contains("dropout")) c.dropout = j["dropout"].get<double>();
    c.validate();
    return c;
}

struct LayerParams {
    std::vector<Tensor> w_q, w_k, w_v, w_e;             // per head, [hidden x d_k]
    std::vector<Tensor> b_q, b_k, b_v, b_e;             // per head, [d_k]; EBT only
    std::vector<Tensor> ebt_key, ebt_edge, ebt_value;   // per head, [d_k]; EBT only
    Tensor w_o, w_o_edge;                               // [hidden x hidden]
    Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;              // node FFN
    Tensor effn_w1, effn_b1, effn_w2, effn_b2;          // edge FFN
    Tensor ln_attn_scale, ln_attn_shift, ln_ffn_scale, ln_ffn_shift;
    Tensor eln_attn_scale, eln_attn_shift, eln_ffn_scale, eln_ffn_shift;
};

struct ModelParams {
    ModelConfig config;
    int node_dim = 0;
    int edge_feat_dim = 0;
    int target_cols = 0;

    Tensor in_w, in_b;           // node input embedding
    Tensor edge_in_w, edge_in_b; // edge input embedding
    std::vector<LayerParams> layers;
    Tensor out_w1, out_b1; // node head, or first MLP layer of the graph head
    Tensor out_w2, out_b2; // second MLP layer (graph tasks only)

    template <typename F>
    void visit(F&& f) {
        f("in.w", in_w);
        f("in.b", in_b);
        f("edge_in.w", edge_in_w);
        f("edge_in.b", edge_in_b);
        for (size_t li = 0; li < layers.size(); ++li) {
            LayerParams& lp = layers[li];
            std::string p = "layer" + std::to_string(li) + ".";
            for (int h = 0; h < config.heads; ++h) {
                std::string hp = p + "head" + std::to_string(h) + ".";
                f((hp + "w_q").c_str(), lp.w_q[static_cast<size_t>(h)]);
                f((hp + "w_k").c_str(), lp.w_k[static_cast<size_t>(h)]);
                f((hp + "w_v").c_str(), lp.w_v[static_cast<size_t>(h)]);
                f((hp + "w_e").c_str(), lp.w_e[static_cast<size_t>(h)]);
                if (config.ebt) {
                    f((hp + "b_q").c_str(), lp.b_q[static_cast<size_t>(h)]);
                    f((hp + "b_k").c_str(), lp.b_k[static_cast<size_t>(h)]);
                    f((hp + "b_v").c_str(), lp.b_v[static_cast<size_t>(h)]);
                    f((hp + "b_e").c_str(), lp.b_e[static_cast<size_t>(h)]);
                    f((hp + "ebt_key").c_str(), lp.ebt_key[static_cast<size_t>(h)]);
                    f((hp + "ebt_edge").c_str(), lp.ebt_edge[static_cast<size_t>(h)]);
                    f((hp + "ebt_value").c_str(), lp.ebt_value[static_cast<size_t>(h)]);
                }
            }
            f((p + "w_o").c_str(), lp.w_o);
            f((p + "w_o_edge").c_str(), lp.w_o_edge);
            f((p + "ffn.w1").c_str(), lp.ffn_w1);
            f((p + "ffn.b1").c_str(), lp.ffn_b1);
            f((p + "ffn.w2").c_str(), lp.ffn_w2);
            f((p + "ffn.b2").c_str(), lp.ffn_b2);
            f((p + "effn.w1").c_str(), lp.effn_w1);
            f((p + "effn.b1").c_str(), lp.effn_b1);
            f((p + "effn.w2").c_str(), lp.effn_w2);
            f((p + "effn.b2").c_str(), lp.effn_b2);
            f((p + "ln_attn.scale").c_str(), lp.ln_attn_scale);
            f((p + "ln_attn.shift").c_str(), lp.ln_attn_shift);
            f((p + "ln_ffn.scale").c_str(), lp.ln_ffn_scale);
            f((p + "ln_ffn.shift").c_str(), lp.ln_ffn_shift);
            f((p + "eln_attn.scale").c_str(), lp.eln_attn_scale);
            f((p + "eln_attn.shift").c_str(), lp.eln_attn_shift);
            f((p + "eln_ffn.scale").c_str(), lp.eln_ffn_scale);
            f((p + "eln_ffn.shift").c_str(), lp.eln_ffn_shift);
        }
        f("head.w1", out_w1);
        f("head.b1", out_b1);
        if (config.task != Task::NodeMultilabel) {
            f("head.w2", out_w2);
            f("head.b2", out_b2);
        }
    }

    std::vector<Tensor*> parameters() {
        std::vector<Tensor*> out;
        visit([&out](const char*, Tensor& t) { out.push_back(&t); });
        return out;
    }

    int64_t parameter_count() {
        int64_t n = 0;
        visit([&n](const char*, Tensor& t) { n += t.size(); });
        return n;
    }
};

/// Fresh Xavier-initialized parameters. Biases and layer-norm shifts start at
/// zero, layer-norm scales at one, and all EBT vectors at zero.
inline ModelParams init_params(const ModelConfig& config, int node_dim, int edge_feat_dim,
                               int target_cols, Rng& rng) {
    config.validate();
    if (node_dim < 1 || edge_feat_dim < 1 || target_cols < 1)
        throw ValidationError("init_params: bad data dimensions");
    ModelParams p;
    p.config = config;
    p.node_dim = node_dim;
    p.edge_feat_dim = edge_feat_dim;
    p.target_cols = target_cols;
    const int d = config.hidden;
    const int dk = config.head_dim();

    auto weight = [&rng](int fi, int fo) {
        Tensor w = xavier_init(fi, fo, rng);
        return Tensor::param(w.shape(), w.data());
    };
    auto zeros = [](std::vector<int> shape) {
        Tensor t(shape, 0.0);
        return Tensor::param(t.shape(), t.data());
    };
    auto ones = [](std::vector<int> shape) {
        Tensor t(shape, 1.0);
        return Tensor::param(t.shape(), t.data());
    };

    p.in_w = weight(node_dim, d);
    p.in_b = zeros({d});
    p.edge_in_w = weight(edge_feat_dim, d);
    p.edge_in_b = zeros({d});

    p.layers.resize(static_cast<size_t>(config.layers));
    for (auto& lp : p.layers) {
        for (int h = 0; h < config.heads; ++h) {
            lp.w_q.push_back(weight(d, dk));
            lp.w_k.push_back(weight(d, dk));
            lp.w_v.push_back(weight(d, dk));
            lp.w_e.push_back(weight(d, dk));
            if (config.ebt) {
                lp.b_q.push_back(zeros({dk}));
                lp.b_k.push_back(zeros({dk}));
                lp.b_v.push_back(zeros({dk}));
                lp.b_e.push_back(zeros({dk}));
                lp.ebt_key.push_back(zeros({dk}));
                lp.ebt_edge.push_back(zeros({dk}));
                lp.ebt_value.push_back(zeros({dk}));
            }
        }
        lp.w_o = weight(d, d);
        lp.w_o_edge = weight(d, d);
        lp.ffn_w1 = weight(d, config.ffn);
        lp.ffn_b1 = zeros({config.ffn});
        lp.ffn_w2 = weight(config.ffn, d);
        lp.ffn_b2 = zeros({d});
        lp.effn_w1 = weight(d, config.ffn);
        lp.effn_b1 = zeros({config.ffn});
        lp.effn_w2 = weight(config.ffn, d);
        lp.effn_b2 = zeros({d});
        lp.ln_attn_scale = ones({d});
        lp.ln_attn_shift = zeros({d});
        lp.ln_ffn_scale = ones({d});
        lp.ln_ffn_shift = zeros({d});
        lp.eln_attn_scale = ones({d});
        lp.eln_attn_shift = zeros({d});
        lp.eln_ffn_scale = ones({d});
        lp.eln_ffn_shift = zeros({d});
    }

    if (config.task == Task::NodeMultilabel) {
        p.out_w1 = weight(d, target_cols);
        p.out_b1 = zeros({target_cols});
    } else {
        p.out_w1 = weight(d, d);
        p.out_b1 = zeros({d});
        p.out_w2 = weight(d, target_cols);
        p.out_b2 = zeros({target_cols});
    }
    return p;
}

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

/// Random-walk structural encoding: entry (i, k) is the probability that a
/// (k+1)-step uniform random walk over out-edges returns to node i, i.e. the
/// diagonal of (D^-1 A)^(k+1). Rows of isolated nodes are zero.
inline std::vector<double> rwse_raw(int num_nodes, const std::vector<Edge>& edges, int K) {
    const size_t n = static_cast<size_t>(num_nodes);
    std::vector<double> pe(n * static_cast<size_t>(K), 0.0);
    if (K == 0 || num_nodes == 0) return pe;
    std::vector<double> outdeg(n, 0.0);
    for (const Edge& e : edges) outdeg[static_cast<size_t>(e.src)] += 1.0;
    std::vector<double> trans(n * n, 0.0);
    for (const Edge& e : edges)
        trans[static_cast<size_t>(e.src) * n + static_cast<size_t>(e.dst)] +=
            1.0 / outdeg[static_cast<size_t>(e.src)];

    std::vector<double> power = trans;
    std::vector<double> next(n * n);
    for (int k = 0; k < K; ++k) {
        for (size_t i = 0; i < n; ++i) pe[i * static_cast<size_t>(K) + static_cast<size_t>(k)] = power[i * n + i];
        if (k + 1 < K) {
            std::fill(next.begin(), next.end(), 0.0);
            for (size_t i = 0; i < n; ++i)
                for (size_t p = 0; p < n; ++p) {
                    double v = power[i * n + p];
                    if (v == 0.0) continue;
                    for (size_t j = 0; j < n; ++j) next[i * n + j] += v * trans[p * n + j];
                }
            power.swap(next);
        }
    }
    return pe;
}

inline Tensor rwse_positional_encoding(const Graph& g, int K) {
    if (K < 0) throw ValidationError("rwse: K must be >= 0");
    return Tensor({g.num_nodes, K}, rwse_raw(g.num_nodes, g.edges, K));
}

/// Per-graph RWSE blocks of a batch, stacked to [total_nodes x K].
inline std::vector<double> batched_rwse(const BatchedGraph& bg, int K) {
    std::vector<double> pe;
    pe.reserve(static_cast<size_t>(bg.num_nodes) * static_cast<size_t>(K));
    std::vector<int> offsets(static_cast<size_t>(bg.num_graphs) + 1, 0);
    for (int gi = 0; gi < bg.num_graphs; ++gi)
        offsets[static_cast<size_t>(gi) + 1] =
            offsets[static_cast<size_t>(gi)] + bg.graph_node_counts[static_cast<size_t>(gi)];
    std::vector<std::vector<Edge>> local(static_cast<size_t>(bg.num_graphs));
    for (size_t ei = 0; ei < bg.edges.size(); ++ei) {
        int gi = bg.edge_graph[ei];
        int off = offsets[static_cast<size_t>(gi)];
        local[static_cast<size_t>(gi)].push_back(
            Edge{bg.edges[ei].src - off, bg.edges[ei].dst - off, bg.edges[ei].type});
    }
    for (int gi = 0; gi < bg.num_graphs; ++gi) {
        auto block = rwse_raw(bg.graph_node_counts[static_cast<size_t>(gi)],
                              local[static_cast<size_t>(gi)], K);
        pe.insert(pe.end(), block.begin(), block.end());
    }
    return pe;
}

// ---------------------------------------------------------------------------
// Activation capture
// ---------------------------------------------------------------------------

/// Per-layer edge attention outputs captured during a forward pass:
/// the pre-output-projection per-head edge tensors, [E x heads x head_dim].
struct ActivationRecord {
    std::string run_id;
    int batch = 0;
    int layer = 0;
    int num_edges = 0;
    int heads = 0;
    int head_dim = 0;
    std::vector<double> values; // edge-major, then head, then dim
    std::vector<int> edge_types;
    std::vector<int> edge_graph;

    double at(int e, int h, int d) const {
        return values[(static_cast<size_t>(e) * heads + static_cast<size_t>(h)) * head_dim +
                      static_cast<size_t>(d)];
    }
    int64_t entry_count() const { return static_cast<int64_t>(values.size()); }
};

// ---------------------------------------------------------------------------
// Forward blocks
// ---------------------------------------------------------------------------

/// max(0, x W1 + b1) W2 + b2.
inline Tensor ffn_block(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
                        const Tensor& b2, GradientTape* tape = nullptr) {
    Tensor hidden = relu(add_row_bias(matmul(x, w1, tape), b1, tape), tape);
    return add_row_bias(matmul(hidden, w2, tape), b2, tape);
}

/// Node and edge input embeddings: H0 = X W_in + b_in + P (P carries the RWSE
/// in its first pe_dim columns), E0 = F W_e_in + b_e_in.
inline std::pair<Tensor, Tensor> embed_inputs(const BatchedGraph& bg, const ModelParams& params,
                                              GradientTape* tape = nullptr) {
    const ModelConfig& cfg = params.config;
    if (bg.node_dim != params.node_dim)
        throw ValidationError("embed_inputs: node feature width mismatch");
    if (bg.edge_feat_dim != params.edge_feat_dim)
        throw ValidationError("embed_inputs: edge feature width mismatch");
    Tensor x({bg.num_nodes, bg.node_dim}, bg.node_features);
    Tensor h0 = add_row_bias(matmul(x, params.in_w, tape), params.in_b, tape);
    if (cfg.pe_dim > 0) {
        auto pe_cols = batched_rwse(bg, cfg.pe_dim);
        std::vector<double> pe(static_cast<size_t>(bg.num_nodes) * cfg.hidden, 0.0);
        for (int i = 0; i < bg.num_nodes; ++i)
            for (int k = 0; k < cfg.pe_dim; ++k)
                pe[static_cast<size_t>(i) * cfg.hidden + static_cast<size_t>(k)] =
                    pe_cols[static_cast<size_t>(i) * cfg.pe_dim + static_cast<size_t>(k)];
        h0 = add(h0, Tensor({bg.num_nodes, cfg.hidden}, std::move(pe)), tape);
    }
    Tensor fe({bg.num_edges(), bg.edge_feat_dim}, bg.edge_features);
    Tensor e0 = add_row_bias(matmul(fe, params.edge_in_w, tape), params.edge_in_b, tape);
    return {h0, e0};
}

/// Explicit bias terms for one head: edge bias rows b_e[u] = (Q_u . k) * e and
/// value bias rows b_v[u] = alpha_slot[u] * v, where alpha_slot are the softmax
/// weights of the virtual bias slot.
inline std::pair<Tensor, Tensor> explicit_bias_terms(const ModelConfig& cfg, const Tensor& q,
                                                     const Tensor& key_bias, const Tensor& edge_bias,
                                                     const Tensor& value_bias,
                                                     const Tensor& slot_weights,
                                                     GradientTape* tape = nullptr) {
    if (!cfg.ebt) throw ValidationError("explicit_bias_terms: model has ebt disabled");
    detail::require_rank2(q, "explicit_bias_terms");
    const int dk = q.cols();
    if (key_bias.size() != dk || edge_bias.size() != dk || value_bias.size() != dk)
        throw ValidationError("explicit_bias_terms: bias vector width mismatch");
    Tensor qk = matmul(q, reshape(key_bias, {dk, 1}, tape), tape);            // [n x 1]
    Tensor be = matmul(qk, reshape(edge_bias, {1, dk}, tape), tape);          // [n x dk]
    Tensor bv = matmul(slot_weights, reshape(value_bias, {1, dk}, tape), tape); // [n x dk]
    return {be, bv};
}

struct AttentionLayerResult {
    Tensor node_states;
    Tensor edge_states;
    ActivationRecord record;
};

namespace detail {

inline void check_finite_activations(const Tensor& t, int layer, int head) {
    if (!t.all_finite()) {
        throw NumericError("non-finite edge activation at layer " + std::to_string(layer) +
                           ", head " + std::to_string(head));
    }
}

inline std::vector<double> make_dropout_mask(int64_t n, double rate, Rng& rng) {
    std::vector<double> mask(static_cast<size_t>(n));
    for (auto& v : mask) v = rng.uniform01() < rate ? 0.0 : 1.0;
    return mask;
}

} // namespace detail

/// One transformer layer on both channels. The returned record holds the
/// per-head edge activations (including the EBT edge bias when enabled),
/// exactly as used for the attention scores.
inline AttentionLayerResult attention_layer_forward(const Tensor& h, const Tensor& es,
                                                    const BatchedGraph& bg, const LayerParams& lp,
                                                    const ModelConfig& cfg, int layer_idx,
                                                    GradientTape* tape = nullptr,
                                                    bool want_record = true,
                                                    Rng* dropout_rng = nullptr) {
    const int n = bg.num_nodes;
    const int e_count = bg.num_edges();
    const int dk = cfg.head_dim();
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    const bool slot = cfg.ebt && cfg.ebt_value_slot;

    std::vector<int> src(static_cast<size_t>(e_count)), dst(static_cast<size_t>(e_count));
    for (int i = 0; i < e_count; ++i) {
        src[static_cast<size_t>(i)] = bg.edges[static_cast<size_t>(i)].src;
        dst[static_cast<size_t>(i)] = bg.edges[static_cast<size_t>(i)].dst;
    }

    AttentionLayerResult out;
    out.record.layer = layer_idx;
    out.record.num_edges = e_count;
    out.record.heads = cfg.heads;
    out.record.head_dim = dk;
    if (want_record) {
        out.record.values.resize(static_cast<size_t>(e_count) * cfg.heads * dk);
        out.record.edge_types = bg.edge_types;
        out.record.edge_graph = bg.edge_graph;
    }

    std::vector<Tensor> node_heads, edge_heads;
    node_heads.reserve(static_cast<size_t>(cfg.heads));
    edge_heads.reserve(static_cast<size_t>(cfg.heads));

    for (int head = 0; head < cfg.heads; ++head) {
        const size_t hi = static_cast<size_t>(head);
        Tensor q = matmul(h, lp.w_q[hi], tape);
        Tensor k = matmul(h, lp.w_k[hi], tape);
        Tensor v = matmul(h, lp.w_v[hi], tape);
        Tensor eproj = matmul(es, lp.w_e[hi], tape);
        if (cfg.ebt) {
            q = add_row_bias(q, lp.b_q[hi], tape);
            k = add_row_bias(k, lp.b_k[hi], tape);
            v = add_row_bias(v, lp.b_v[hi], tape);
            eproj = add_row_bias(eproj, lp.b_e[hi], tape);
        }

        Tensor q_e = gather_rows(q, src, tape);
        Tensor k_e = gather_rows(k, dst, tape);
        Tensor what = scale(mul(mul(q_e, k_e, tape), eproj, tape), inv_sqrt_dk, tape);

        Tensor qk; // [n x 1], (Q_u . k_bias), shared by edge bias and slot score
        if (cfg.ebt) {
            qk = matmul(q, reshape(lp.ebt_key[hi], {dk, 1}, tape), tape);
            Tensor be = matmul(qk, reshape(lp.ebt_edge[hi], {1, dk}, tape), tape);
            what = add(what, gather_rows(be, src, tape), tape);
        }
        detail::check_finite_activations(what, layer_idx, head);
        if (want_record) {
            for (int e = 0; e < e_count; ++e)
                for (int d = 0; d < dk; ++d)
                    out.record.values[(static_cast<size_t>(e) * cfg.heads + hi) * dk +
                                      static_cast<size_t>(d)] =
                        what[static_cast<int64_t>(e) * dk + d];
        }

        Tensor scores = row_sum(what, tape); // [E x 1]
        Tensor slot_score;
        if (slot) slot_score = scale(qk, inv_sqrt_dk, tape); // [n x 1]

        // per-source stability constants (softmax is shift-invariant, so these
        // need no gradient)
        std::vector<double> node_max(static_cast<size_t>(n),
                                     -std::numeric_limits<double>::infinity());
        for (int e = 0; e < e_count; ++e) {
            size_t u = static_cast<size_t>(src[static_cast<size_t>(e)]);
            node_max[u] = std::max(node_max[u], scores[e]);
        }
        if (slot) {
            for (int u = 0; u < n; ++u)
                node_max[static_cast<size_t>(u)] =
                    std::max(node_max[static_cast<size_t>(u)], slot_score[u]);
        }
        for (auto& m : node_max)
            if (!std::isfinite(m)) m = 0.0; // isolated node, no softmax entries

        std::vector<double> max_per_edge(static_cast<size_t>(e_count));
        for (int e = 0; e < e_count; ++e)
            max_per_edge[static_cast<size_t>(e)] = node_max[static_cast<size_t>(src[static_cast<size_t>(e)])];

        Tensor z = exp_op(sub(scores, Tensor({e_count, 1}, std::move(max_per_edge)), tape), tape);
        Tensor denom = segment_sum(z, src, n, tape); // [n x 1]
        Tensor slot_weight;
        if (slot) {
            Tensor zs = exp_op(sub(slot_score, Tensor({n, 1}, node_max), tape), tape);
            denom = add(denom, zs, tape);
            slot_weight = divide(zs, denom, tape);
        }
        Tensor alpha = divide(z, gather_rows(denom, src, tape), tape);

        Tensor messages = add(gather_rows(v, dst, tape), eproj, tape);
        Tensor head_out = segment_sum(mul_colvec(messages, alpha, tape), src, n, tape);
        if (slot) {
            Tensor bv = matmul(slot_weight, reshape(lp.ebt_value[hi], {1, dk}, tape), tape);
            head_out = add(head_out, bv, tape);
        }
        node_heads.push_back(std::move(head_out));
        edge_heads.push_back(std::move(what));
    }

    Tensor attn_nodes = matmul(concat_cols(node_heads, tape), lp.w_o, tape);
    Tensor attn_edges = matmul(concat_cols(edge_heads, tape), lp.w_o_edge, tape);

    if (dropout_rng && cfg.dropout > 0.0) {
        double keep = 1.0 - cfg.dropout;
        attn_nodes = dropout_mask(attn_nodes,
                                  detail::make_dropout_mask(attn_nodes.size(), cfg.dropout, *dropout_rng),
                                  keep, tape);
        attn_edges = dropout_mask(attn_edges,
                                  detail::make_dropout_mask(attn_edges.size(), cfg.dropout, *dropout_rng),
                                  keep, tape);
    }

    Tensor h1 = layer_norm(add(h, attn_nodes, tape), lp.ln_attn_scale, lp.ln_attn_shift,
                           kLayerNormEps, tape);
    Tensor e1 = layer_norm(add(es, attn_edges, tape), lp.eln_attn_scale, lp.eln_attn_shift,
                           kLayerNormEps, tape);

    Tensor h_ffn = ffn_block(h1, lp.ffn_w1, lp.ffn_b1, lp.ffn_w2, lp.ffn_b2, tape);
    Tensor e_ffn = ffn_block(e1, lp.effn_w1, lp.effn_b1, lp.effn_w2, lp.effn_b2, tape);
    if (dropout_rng && cfg.dropout > 0.0) {
        double keep = 1.0 - cfg.dropout;
        h_ffn = dropout_mask(h_ffn, detail::make_dropout_mask(h_ffn.size(), cfg.dropout, *dropout_rng),
                             keep, tape);
        e_ffn = dropout_mask(e_ffn, detail::make_dropout_mask(e_ffn.size(), cfg.dropout, *dropout_rng),
                             keep, tape);
    }
    out.node_states = layer_norm(add(h1, h_ffn, tape), lp.ln_ffn_scale, lp.ln_ffn_shift,
                                 kLayerNormEps, tape);
    out.edge_states = layer_norm(add(e1, e_ffn, tape), lp.eln_ffn_scale, lp.eln_ffn_shift,
                                 kLayerNormEps, tape);
    return out;
}

/// Task head. Graph tasks mean-pool node states per graph and apply a 2-layer
/// MLP; the node task applies a per-node linear map. Multilabel outputs pass
/// through a sigmoid.
inline Tensor readout(const Tensor& h, const BatchedGraph& bg, const ModelParams& params,
                      GradientTape* tape = nullptr) {
    const ModelConfig& cfg = params.config;
    if ((cfg.task == Task::NodeMultilabel) != bg.node_level_target)
        throw ValidationError("readout: task does not match batch targets");
    if (bg.target_cols != params.target_cols)
        throw ValidationError("readout: target arity mismatch");
    if (cfg.task == Task::NodeMultilabel) {
        return sigmoid(add_row_bias(matmul(h, params.out_w1, tape), params.out_b1, tape), tape);
    }
    Tensor pooled_sum = segment_sum(h, bg.node_graph, bg.num_graphs, tape);
    std::vector<double> inv_counts(static_cast<size_t>(bg.num_graphs));
    for (int gi = 0; gi < bg.num_graphs; ++gi)
        inv_counts[static_cast<size_t>(gi)] =
            1.0 / static_cast<double>(bg.graph_node_counts[static_cast<size_t>(gi)]);
    Tensor pooled = mul_colvec(pooled_sum, Tensor({bg.num_graphs, 1}, std::move(inv_counts)), tape);
    Tensor hidden = relu(add_row_bias(matmul(pooled, params.out_w1, tape), params.out_b1, tape), tape);
    Tensor pred = add_row_bias(matmul(hidden, params.out_w2, tape), params.out_b2, tape);
    if (cfg.task == Task::GraphMultilabel) pred = sigmoid(pred, tape);
    return pred;
}

struct ForwardResult {
    Tensor prediction;
    std::vector<ActivationRecord> records; // one per layer when capture is on
};

inline ForwardResult model_forward(const BatchedGraph& bg, const ModelParams& params, bool capture,
                                   GradientTape* tape = nullptr, Rng* dropout_rng = nullptr) {
    const ModelConfig& cfg = params.config;
    auto [h, es] = embed_inputs(bg, params, tape);
    ForwardResult result;
    for (int li = 0; li < cfg.layers; ++li) {
        AttentionLayerResult layer = attention_layer_forward(
            h, es, bg, params.layers[static_cast<size_t>(li)], cfg, li, tape, capture, dropout_rng);
        h = std::move(layer.node_states);
        es = std::move(layer.edge_states);
        if (capture) result.records.push_back(std::move(layer.record));
    }
    result.prediction = readout(h, bg, params, tape);
    if (!result.prediction.all_finite())
        throw NumericError("non-finite model prediction");
    return result;
}

} // namespace gnnma
