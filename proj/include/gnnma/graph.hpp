// SPDX-License-Identifier: Apache-2.0
//
// Graph data model, JSON Lines ingestion, dummy-node augmentation, and
// batching. Graphs and datasets are immutable after construction; safe to
// share read-only across threads.
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gnnma/common.hpp"

namespace gnnma {

enum class Task { GraphRegression, GraphMultilabel, NodeMultilabel };

inline std::string task_name(Task t) {
    switch (t) {
        case Task::GraphRegression: return "graph-regression";
        case Task::GraphMultilabel: return "graph-multilabel";
        case Task::NodeMultilabel: return "node-multilabel";
    }
    return "?";
}

inline Task task_from_name(const std::string& s) {
    if (s == "graph-regression") return Task::GraphRegression;
    if (s == "graph-multilabel") return Task::GraphMultilabel;
    if (s == "node-multilabel") return Task::NodeMultilabel;
    throw ValidationError("unknown task: " + s);
}

struct Edge {
    int src = 0;
    int dst = 0;
    int type = 1; // 1-based; molecular bonds use 1/2/3, dummy edges 4/5
};

// Dummy-node edge types: incoming to the dummy node and outgoing from it.
inline constexpr int kDummyInType = 4;
inline constexpr int kDummyOutType = 5;

struct Graph {
    int num_nodes = 0;
    int node_dim = 0;
    std::vector<double> node_features; // num_nodes x node_dim, row-major
    std::vector<Edge> edges;
    // Optional explicit edge features (num_edges x edge_dim). When absent,
    // features are derived as one-hot encodings of the edge type at batch time.
    std::optional<std::vector<double>> edge_features;
    int edge_dim = 0;
    std::vector<double> target; // graph-level vector, or num_nodes x target_cols
    int target_cols = 0;
    bool node_level_target = false;
    bool has_dummy = false;

    int num_edges() const { return static_cast<int>(edges.size()); }

    void validate(int num_edge_types) const {
        if (num_nodes < 1) throw ValidationError("graph must have at least one node");
        if (static_cast<int64_t>(node_features.size()) !=
            static_cast<int64_t>(num_nodes) * node_dim)
            throw ValidationError("node feature matrix size mismatch");
        for (const Edge& e : edges) {
            if (e.src < 0 || e.src >= num_nodes || e.dst < 0 || e.dst >= num_nodes)
                throw ValidationError("edge endpoint out of range");
            if (e.type < 1 || e.type > num_edge_types)
                throw ValidationError("edge type out of range");
        }
        if (edge_features) {
            if (static_cast<int64_t>(edge_features->size()) !=
                static_cast<int64_t>(edges.size()) * edge_dim)
                throw ValidationError("edge feature matrix size mismatch");
        }
        if (node_level_target) {
            if (static_cast<int64_t>(target.size()) !=
                static_cast<int64_t>(num_nodes) * target_cols)
                throw ValidationError("node-level target size mismatch");
        } else if (static_cast<int>(target.size()) != target_cols) {
            throw ValidationError("graph-level target size mismatch");
        }
    }
};

struct Dataset {
    std::vector<Graph> graphs;
    Task task = Task::GraphRegression;
    int num_edge_types = 3;
    int node_dim = 0;
    int edge_dim = 0; // explicit width; 0 when features are derived from types
    int target_cols = 0;

    size_t size() const { return graphs.size(); }

    /// Width of the edge feature vectors the model sees.
    int edge_feature_width() const { return edge_dim > 0 ? edge_dim : num_edge_types; }

    void validate() const {
        for (const Graph& g : graphs) {
            g.validate(num_edge_types);
            if (g.node_dim != node_dim) throw ValidationError("inconsistent node feature width");
            if (g.edge_features.has_value() != (edge_dim > 0))
                throw ValidationError("inconsistent edge feature presence");
            if (g.edge_features && g.edge_dim != edge_dim)
                throw ValidationError("inconsistent edge feature width");
            if (g.target_cols != target_cols) throw ValidationError("inconsistent target arity");
            bool node_level = task == Task::NodeMultilabel;
            if (g.node_level_target != node_level)
                throw ValidationError("target level does not match task");
        }
    }
};

// ---------------------------------------------------------------------------
// JSON Lines ingestion / emission
// ---------------------------------------------------------------------------
// One graph per line:
// {"nodes":[[f,...],...], "edges":[[src,dst,type],...],
//  "edge_feats":[[f,...],...] (optional), "y":[f,...] or [[f,...],...]}

namespace detail {

inline Graph graph_from_json(const nlohmann::json& j, size_t line_no) {
    auto fail = [line_no](const std::string& what) -> ValidationError {
        return ValidationError("line " + std::to_string(line_no) + ": " + what);
    };
    if (!j.is_object()) throw fail("expected a JSON object");
    if (!j.contains("nodes") || !j["nodes"].is_array() || j["nodes"].empty())
        throw fail("missing or empty 'nodes' array");

    Graph g;
    g.num_nodes = static_cast<int>(j["nodes"].size());
    g.node_dim = static_cast<int>(j["nodes"][0].size());
    g.node_features.reserve(static_cast<size_t>(g.num_nodes) * g.node_dim);
    for (const auto& row : j["nodes"]) {
        if (!row.is_array() || static_cast<int>(row.size()) != g.node_dim)
            throw fail("inconsistent node feature widths");
        for (const auto& v : row) g.node_features.push_back(v.get<double>());
    }

    if (j.contains("edges")) {
        if (!j["edges"].is_array()) throw fail("'edges' must be an array");
        for (const auto& e : j["edges"]) {
            if (!e.is_array() || e.size() != 3) throw fail("edge must be [src,dst,type]");
            Edge edge{e[0].get<int>(), e[1].get<int>(), e[2].get<int>()};
            if (edge.src < 0 || edge.src >= g.num_nodes || edge.dst < 0 || edge.dst >= g.num_nodes)
                throw fail("edge node index out of range");
            if (edge.type < 1) throw fail("edge type must be >= 1");
            g.edges.push_back(edge);
        }
    }

    if (j.contains("edge_feats") && !j["edge_feats"].is_null()) {
        const auto& ef = j["edge_feats"];
        if (!ef.is_array() || ef.size() != g.edges.size())
            throw fail("'edge_feats' row count must equal edge count");
        std::vector<double> feats;
        int width = ef.empty() ? 0 : static_cast<int>(ef[0].size());
        for (const auto& row : ef) {
            if (!row.is_array() || static_cast<int>(row.size()) != width)
                throw fail("inconsistent edge feature widths");
            for (const auto& v : row) feats.push_back(v.get<double>());
        }
        g.edge_features = std::move(feats);
        g.edge_dim = width;
    }

    if (!j.contains("y")) throw fail("missing 'y'");
    const auto& y = j["y"];
    if (!y.is_array() || y.empty()) throw fail("'y' must be a non-empty array");
    if (y[0].is_array()) {
        g.node_level_target = true;
        g.target_cols = static_cast<int>(y[0].size());
        if (static_cast<int>(y.size()) != g.num_nodes)
            throw fail("node-level 'y' must have one row per node");
        for (const auto& row : y) {
            if (!row.is_array() || static_cast<int>(row.size()) != g.target_cols)
                throw fail("inconsistent target widths");
            for (const auto& v : row) g.target.push_back(v.get<double>());
        }
    } else {
        g.node_level_target = false;
        g.target_cols = static_cast<int>(y.size());
        for (const auto& v : y) g.target.push_back(v.get<double>());
    }
    return g;
}

} // namespace detail

/// Loads a dataset from JSON Lines; ordering is file order. The task defaults
/// to graph regression for vector targets and node multilabel for matrix
/// targets; pass `task` to override (e.g. graph multilabel).
inline Dataset load_jsonl(const std::filesystem::path& path,
                          std::optional<Task> task = std::nullopt) {
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot open dataset: " + path.string());
    Dataset ds;
    std::string line;
    size_t line_no = 0;
    int max_type = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError("line " + std::to_string(line_no) + ": malformed JSON (" +
                                  e.what() + ")");
        }
        Graph g = detail::graph_from_json(j, line_no);
        for (const Edge& e : g.edges) max_type = std::max(max_type, e.type);
        ds.graphs.push_back(std::move(g));
    }
    if (ds.graphs.empty()) throw ValidationError("dataset is empty: " + path.string());

    const Graph& first = ds.graphs.front();
    ds.node_dim = first.node_dim;
    ds.edge_dim = first.edge_features ? first.edge_dim : 0;
    ds.target_cols = first.target_cols;
    ds.num_edge_types = max_type;
    if (task) {
        ds.task = *task;
    } else {
        ds.task = first.node_level_target ? Task::NodeMultilabel : Task::GraphRegression;
    }
    ds.validate();
    return ds;
}

inline std::string graph_to_jsonl_line(const Graph& g) {
    nlohmann::json j;
    auto& nodes = j["nodes"] = nlohmann::json::array();
    for (int i = 0; i < g.num_nodes; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int k = 0; k < g.node_dim; ++k)
            row.push_back(g.node_features[static_cast<size_t>(i) * g.node_dim + k]);
        nodes.push_back(std::move(row));
    }
    auto& edges = j["edges"] = nlohmann::json::array();
    for (const Edge& e : g.edges) edges.push_back({e.src, e.dst, e.type});
    if (g.edge_features) {
        auto& ef = j["edge_feats"] = nlohmann::json::array();
        for (size_t i = 0; i < g.edges.size(); ++i) {
            nlohmann::json row = nlohmann::json::array();
            for (int k = 0; k < g.edge_dim; ++k)
                row.push_back((*g.edge_features)[i * static_cast<size_t>(g.edge_dim) + k]);
            ef.push_back(std::move(row));
        }
    }
    if (g.node_level_target) {
        auto& y = j["y"] = nlohmann::json::array();
        for (int i = 0; i < g.num_nodes; ++i) {
            nlohmann::json row = nlohmann::json::array();
            for (int k = 0; k < g.target_cols; ++k)
                row.push_back(g.target[static_cast<size_t>(i) * g.target_cols + k]);
            y.push_back(std::move(row));
        }
    } else {
        j["y"] = g.target;
    }
    return j.dump();
}

inline void save_jsonl(const std::filesystem::path& path, const Dataset& ds) {
    std::string out;
    for (const Graph& g : ds.graphs) {
        out += graph_to_jsonl_line(g);
        out += '\n';
    }
    atomic_write_file(path, out);
}

// ---------------------------------------------------------------------------
// Dummy-node augmentation
// ---------------------------------------------------------------------------

/// Appends a global dummy node with a zero feature vector. Every original node
/// u gets an edge (u -> dummy, type 4) and (dummy -> u, type 5); original
/// edges are untouched and stay a prefix of the new edge list.
inline Graph add_dummy_node(const Graph& g) {
    if (g.has_dummy) throw ValidationError("add_dummy_node: graph already augmented");
    if (g.edge_features)
        throw ValidationError("add_dummy_node: requires type-derived edge features");
    if (g.node_level_target)
        throw ValidationError("add_dummy_node: node-level targets not supported");
    Graph out = g;
    out.num_nodes = g.num_nodes + 1;
    out.node_features.insert(out.node_features.end(), static_cast<size_t>(g.node_dim), 0.0);
    const int dummy = g.num_nodes;
    for (int u = 0; u < g.num_nodes; ++u) {
        out.edges.push_back(Edge{u, dummy, kDummyInType});
        out.edges.push_back(Edge{dummy, u, kDummyOutType});
    }
    out.has_dummy = true;
    return out;
}

/// Inverse of add_dummy_node: drops the last node and its incident edges.
inline Graph remove_dummy_node(const Graph& g) {
    if (!g.has_dummy) throw ValidationError("remove_dummy_node: graph has no dummy node");
    Graph out = g;
    const int dummy = g.num_nodes - 1;
    out.num_nodes = dummy;
    out.node_features.resize(static_cast<size_t>(dummy) * g.node_dim);
    out.edges.clear();
    for (const Edge& e : g.edges)
        if (e.src != dummy && e.dst != dummy) out.edges.push_back(e);
    out.has_dummy = false;
    return out;
}

/// Augments every graph; edge type count becomes at least 5.
inline Dataset add_dummy_nodes(const Dataset& ds) {
    Dataset out;
    out.task = ds.task;
    out.node_dim = ds.node_dim;
    out.edge_dim = 0;
    out.target_cols = ds.target_cols;
    out.num_edge_types = std::max(ds.num_edge_types, kDummyOutType);
    out.graphs.reserve(ds.graphs.size());
    for (const Graph& g : ds.graphs) out.graphs.push_back(add_dummy_node(g));
    return out;
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Disjoint union of graphs with node-index offsets. Edge features are
/// materialized here: explicit matrices when present, otherwise one-hot
/// encodings of the edge type with width num_edge_types.
struct BatchedGraph {
    int num_nodes = 0;
    int num_graphs = 0;
    int node_dim = 0;
    std::vector<double> node_features;
    std::vector<Edge> edges; // node indices offset per graph
    std::vector<int> edge_types;
    std::vector<int> edge_graph; // owning graph per edge
    std::vector<int> node_graph; // owning graph per node
    std::vector<int> graph_node_counts;
    int edge_feat_dim = 0;
    std::vector<double> edge_features; // E x edge_feat_dim
    std::vector<double> targets;
    int target_cols = 0;
    bool node_level_target = false;

    int num_edges() const { return static_cast<int>(edges.size()); }
};

inline BatchedGraph batch_graphs(const std::vector<Graph>& graphs, int num_edge_types) {
    if (graphs.empty()) throw ValidationError("batch_graphs: empty batch");
    BatchedGraph b;
    b.num_graphs = static_cast<int>(graphs.size());
    b.node_dim = graphs[0].node_dim;
    b.target_cols = graphs[0].target_cols;
    b.node_level_target = graphs[0].node_level_target;
    const bool explicit_feats = graphs[0].edge_features.has_value();
    b.edge_feat_dim = explicit_feats ? graphs[0].edge_dim : num_edge_types;

    int offset = 0;
    for (int gi = 0; gi < b.num_graphs; ++gi) {
        const Graph& g = graphs[static_cast<size_t>(gi)];
        if (g.node_dim != b.node_dim || g.target_cols != b.target_cols ||
            g.node_level_target != b.node_level_target ||
            g.edge_features.has_value() != explicit_feats)
            throw ValidationError("batch_graphs: heterogeneous graphs in batch");
        b.node_features.insert(b.node_features.end(), g.node_features.begin(),
                               g.node_features.end());
        for (int i = 0; i < g.num_nodes; ++i) b.node_graph.push_back(gi);
        b.graph_node_counts.push_back(g.num_nodes);
        for (size_t ei = 0; ei < g.edges.size(); ++ei) {
            const Edge& e = g.edges[ei];
            b.edges.push_back(Edge{e.src + offset, e.dst + offset, e.type});
            b.edge_types.push_back(e.type);
            b.edge_graph.push_back(gi);
            if (explicit_feats) {
                auto begin = g.edge_features->begin() +
                             static_cast<int64_t>(ei) * g.edge_dim;
                b.edge_features.insert(b.edge_features.end(), begin, begin + g.edge_dim);
            } else {
                if (e.type > num_edge_types)
                    throw ValidationError("batch_graphs: edge type exceeds num_edge_types");
                std::vector<double> onehot(static_cast<size_t>(num_edge_types), 0.0);
                onehot[static_cast<size_t>(e.type - 1)] = 1.0;
                b.edge_features.insert(b.edge_features.end(), onehot.begin(), onehot.end());
            }
        }
        b.targets.insert(b.targets.end(), g.target.begin(), g.target.end());
        offset += g.num_nodes;
    }
    b.num_nodes = offset;
    return b;
}

/// Splits a batch back into its member graphs (loses explicit edge features'
/// original storage only when they were type-derived, which is lossless).
inline std::vector<Graph> unbatch_graphs(const BatchedGraph& b) {
    std::vector<Graph> out(static_cast<size_t>(b.num_graphs));
    std::vector<int> node_offsets(static_cast<size_t>(b.num_graphs) + 1, 0);
    for (int gi = 0; gi < b.num_graphs; ++gi)
        node_offsets[static_cast<size_t>(gi) + 1] =
            node_offsets[static_cast<size_t>(gi)] + b.graph_node_counts[static_cast<size_t>(gi)];
    for (int gi = 0; gi < b.num_graphs; ++gi) {
        Graph& g = out[static_cast<size_t>(gi)];
        g.num_nodes = b.graph_node_counts[static_cast<size_t>(gi)];
        g.node_dim = b.node_dim;
        int start = node_offsets[static_cast<size_t>(gi)];
        g.node_features.assign(
            b.node_features.begin() + static_cast<int64_t>(start) * b.node_dim,
            b.node_features.begin() + static_cast<int64_t>(start + g.num_nodes) * b.node_dim);
        g.target_cols = b.target_cols;
        g.node_level_target = b.node_level_target;
    }
    for (size_t ei = 0; ei < b.edges.size(); ++ei) {
        int gi = b.edge_graph[ei];
        int start = node_offsets[static_cast<size_t>(gi)];
        out[static_cast<size_t>(gi)].edges.push_back(
            Edge{b.edges[ei].src - start, b.edges[ei].dst - start, b.edges[ei].type});
    }
    if (b.node_level_target) {
        for (int gi = 0; gi < b.num_graphs; ++gi) {
            int start = node_offsets[static_cast<size_t>(gi)];
            Graph& g = out[static_cast<size_t>(gi)];
            g.target.assign(
                b.targets.begin() + static_cast<int64_t>(start) * b.target_cols,
                b.targets.begin() + static_cast<int64_t>(start + g.num_nodes) * b.target_cols);
        }
    } else {
        for (int gi = 0; gi < b.num_graphs; ++gi) {
            Graph& g = out[static_cast<size_t>(gi)];
            g.target.assign(b.targets.begin() + static_cast<int64_t>(gi) * b.target_cols,
                            b.targets.begin() + static_cast<int64_t>(gi + 1) * b.target_cols);
        }
    }
    return out;
}

/// Relative frequency of each edge type over the whole dataset.
inline std::map<int, double> edge_type_frequencies(const Dataset& ds) {
    std::map<int, int64_t> counts;
    int64_t total = 0;
    for (const Graph& g : ds.graphs) {
        for (const Edge& e : g.edges) {
            ++counts[e.type];
            ++total;
        }
    }
    if (total == 0) throw ValidationError("edge_type_frequencies: dataset has no edges");
    std::map<int, double> freqs;
    for (auto& [type, c] : counts)
        freqs[type] = static_cast<double>(c) / static_cast<double>(total);
    return freqs;
}

} // namespace gnnma
