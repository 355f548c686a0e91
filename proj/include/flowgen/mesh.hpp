#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "flowgen/errors.hpp"
#include "flowgen/tensor.hpp"
#include "flowgen/tensor_io.hpp"

namespace flowgen {

/// System parameter vector mu (e.g. Reynolds number), N_mu >= 1.
struct Params {
    std::vector<double> mu;

    Params() = default;
    explicit Params(std::vector<double> values) : mu(std::move(values)) { validate(); }
    explicit Params(double mu1) : mu{mu1} {}

    void validate() const {
        if (mu.empty()) throw ContractError("parameter vector must have N_mu >= 1");
        for (double v : mu)
            if (!std::isfinite(v)) throw ContractError("parameter vector has non-finite entry");
    }

    bool operator==(const Params& o) const { return mu == o.mu; }
};

/// Cell-centroid mesh with directed adjacency edges (j -> i) and optional
/// per-edge features.
struct Mesh {
    Tensor centroids;                                   // [N_c, d]
    std::vector<std::pair<std::size_t, std::size_t>> edges; // (src j, dst i)
    Tensor edge_feat;                                   // optional [N_e, F_e]

    std::size_t cell_count() const { return centroids.extent(0); }
    std::size_t dim() const { return centroids.extent(1); }

    void validate() const {
        if (centroids.ndim() != 2) throw ContractError("mesh centroids must be [N_c, d]");
        const std::size_t n = cell_count();
        for (const auto& [j, i] : edges) {
            if (j >= n || i >= n) throw ContractError("mesh edge index out of range");
            if (j == i) throw ContractError("mesh has a self-loop");
        }
        if (edge_feat.defined() && edge_feat.extent(0) != edges.size())
            throw ContractError("edge feature count does not match edge count");
    }

    /// Default edge features: relative centroid offset plus distance.
    void build_default_edge_features() {
        const std::size_t d = dim();
        Tensor f(Shape{edges.size(), d + 1});
        auto& fd = f.raw();
        const auto& c = centroids.raw();
        for (std::size_t e = 0; e < edges.size(); ++e) {
            const auto [j, i] = edges[e];
            double norm2 = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double delta = c[j * d + k] - c[i * d + k];
                fd[e * (d + 1) + k] = delta;
                norm2 += delta * delta;
            }
            fd[e * (d + 1) + d] = std::sqrt(norm2);
        }
        edge_feat = std::move(f);
    }
};

enum class Discretization { Structured, Unstructured };

inline std::string to_string(Discretization d) {
    return d == Discretization::Structured ? "structured" : "unstructured";
}

inline Discretization discretization_from_string(const std::string& s) {
    if (s == "structured") return Discretization::Structured;
    if (s == "unstructured") return Discretization::Unstructured;
    throw FormatError("unknown discretization '" + s + "'");
}

/// Full-resolution field snapshot: either a structured grid [N_h, N_w, N_v]
/// or mesh-cell rows [N_c, N_v].
struct MicroState {
    Discretization kind = Discretization::Structured;
    Tensor field;
    std::shared_ptr<const Mesh> mesh; // unstructured only

    static MicroState structured(Tensor f) {
        if (f.ndim() != 3) throw ContractError("structured state must be [N_h, N_w, N_v]");
        return {Discretization::Structured, std::move(f), nullptr};
    }

    static MicroState unstructured(Tensor f, std::shared_ptr<const Mesh> m) {
        if (f.ndim() != 2) throw ContractError("unstructured state must be [N_c, N_v]");
        if (!m) throw ContractError("unstructured state needs a mesh");
        if (f.extent(0) != m->cell_count())
            throw ContractError("unstructured row count differs from mesh cell count");
        return {Discretization::Unstructured, std::move(f), std::move(m)};
    }

    std::size_t n_components() const { return field.shape().back(); }
};

/// Parameterized snapshot sequence with uniform macro time step.
struct MicroSequence {
    Params params;
    std::vector<MicroState> snapshots;
    double dt = 1.0;

    std::size_t n_len() const { return snapshots.size(); }

    void validate() const {
        params.validate();
        if (snapshots.empty()) throw ContractError("sequence needs n_len >= 1");
        const auto& ref = snapshots.front();
        for (const auto& s : snapshots) {
            if (s.kind != ref.kind || s.field.shape() != ref.field.shape())
                throw ContractError("sequence snapshots must share discretization and shape");
        }
    }
};

enum class Split { Train, Test };

inline std::string to_string(Split s) { return s == Split::Train ? "train" : "test"; }
inline Split split_from_string(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "test") return Split::Test;
    throw FormatError("unknown split '" + s + "'");
}

/// Collection of sequences with train/test labels and optional per-sequence
/// observation channels (e.g. precomputed force coefficients).
struct Dataset {
    Discretization kind = Discretization::Structured;
    std::vector<MicroSequence> sequences;
    std::vector<Split> splits;
    std::shared_ptr<const Mesh> mesh; // unstructured datasets share one mesh
    std::vector<std::string> obs_channel_names;
    // obs_channels[name][k] is an observation tensor for sequence k
    std::map<std::string, std::vector<Tensor>> obs_channels;

    std::size_t size() const { return sequences.size(); }

    std::vector<std::size_t> indices(Split s) const {
        std::vector<std::size_t> out;
        for (std::size_t k = 0; k < splits.size(); ++k)
            if (splits[k] == s) out.push_back(k);
        return out;
    }

    void validate() const {
        if (sequences.size() != splits.size())
            throw ContractError("dataset split labels do not match sequence count");
        std::set<std::vector<double>> train_mus, test_mus;
        for (std::size_t k = 0; k < sequences.size(); ++k) {
            sequences[k].validate();
            (splits[k] == Split::Train ? train_mus : test_mus).insert(sequences[k].params.mu);
        }
        for (const auto& mu : train_mus)
            if (test_mus.count(mu))
                throw ContractError("a parameter vector appears in both train and test splits");
        for (const auto& [name, tensors] : obs_channels)
            if (tensors.size() != sequences.size())
                throw ContractError("observation channel '" + name + "' count mismatch");
    }
};

// ---------------------------------------------------------------------------
// Dataset directory I/O: meta.json + seq_<k>.ptg (+ mesh.json, edge_feat.ptg)
// ---------------------------------------------------------------------------

namespace detail_ds {

inline nlohmann::json mesh_to_json(const Mesh& m) {
    nlohmann::json j;
    const std::size_t d = m.dim();
    auto& cents = j["centroids"] = nlohmann::json::array();
    for (std::size_t c = 0; c < m.cell_count(); ++c) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t k = 0; k < d; ++k) row.push_back(m.centroids.raw()[c * d + k]);
        cents.push_back(std::move(row));
    }
    auto& edges = j["edges"] = nlohmann::json::array();
    for (const auto& [src, dst] : m.edges) edges.push_back({src, dst});
    return j;
}

inline Mesh mesh_from_json(const nlohmann::json& j) {
    Mesh m;
    const auto& cents = j.at("centroids");
    if (cents.empty()) throw FormatError("mesh.json has no centroids");
    const std::size_t n = cents.size(), d = cents[0].size();
    m.centroids = Tensor(Shape{n, d});
    for (std::size_t c = 0; c < n; ++c)
        for (std::size_t k = 0; k < d; ++k) m.centroids.raw()[c * d + k] = cents[c][k].get<double>();
    for (const auto& e : j.at("edges"))
        m.edges.emplace_back(e[0].get<std::size_t>(), e[1].get<std::size_t>());
    m.validate();
    return m;
}

} // namespace detail_ds

inline void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
    ds.validate();
    std::filesystem::create_directories(dir);
    nlohmann::json meta;
    meta["schema_version"] = 1;
    meta["discretization"] = to_string(ds.kind);
    meta["n_len"] = ds.sequences.empty() ? 0 : ds.sequences.front().n_len();
    meta["n_v"] = ds.sequences.empty() ? 0 : ds.sequences.front().snapshots.front().n_components();
    meta["dt"] = ds.sequences.empty() ? 1.0 : ds.sequences.front().dt;
    auto& seqs = meta["sequences"] = nlohmann::json::array();
    for (std::size_t k = 0; k < ds.sequences.size(); ++k) {
        nlohmann::json s;
        s["mu"] = ds.sequences[k].params.mu;
        s["split"] = to_string(ds.splits[k]);
        seqs.push_back(std::move(s));
    }
    meta["obs_channels"] = ds.obs_channel_names;
    atomic_write(dir / "meta.json", [&](std::ostream& os) { os << meta.dump(2) << "\n"; });

    for (std::size_t k = 0; k < ds.sequences.size(); ++k) {
        const auto& seq = ds.sequences[k];
        // stack snapshots along a leading n_len axis
        Shape snap_shape = seq.snapshots.front().field.shape();
        Shape full{seq.n_len()};
        full.insert(full.end(), snap_shape.begin(), snap_shape.end());
        Tensor stacked(full);
        const std::size_t stride = shape_numel(snap_shape);
        for (std::size_t t = 0; t < seq.n_len(); ++t)
            std::copy_n(seq.snapshots[t].field.raw().data(), stride,
                        stacked.raw().data() + t * stride);
        atomic_write(dir / ("seq_" + std::to_string(k) + ".ptg"),
                     [&](std::ostream& os) { ptg::write(os, stacked); });
    }

    if (ds.kind == Discretization::Unstructured) {
        if (!ds.mesh) throw ContractError("unstructured dataset without a mesh");
        atomic_write(dir / "mesh.json", [&](std::ostream& os) {
            os << detail_ds::mesh_to_json(*ds.mesh).dump(2) << "\n";
        });
        if (ds.mesh->edge_feat.defined())
            atomic_write(dir / "edge_feat.ptg",
                         [&](std::ostream& os) { ptg::write(os, ds.mesh->edge_feat); });
    }

    for (const auto& [name, tensors] : ds.obs_channels)
        for (std::size_t k = 0; k < tensors.size(); ++k)
            atomic_write(dir / ("obs_" + name + "_" + std::to_string(k) + ".ptg"),
                         [&](std::ostream& os) { ptg::write(os, tensors[k]); });
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
    const auto meta_path = dir / "meta.json";
    if (!std::filesystem::exists(meta_path))
        throw FormatError("dataset directory " + dir.string() + " lacks meta.json");
    nlohmann::json meta;
    {
        std::ifstream is(meta_path);
        try {
            is >> meta;
        } catch (const nlohmann::json::exception& e) {
            throw FormatError("meta.json parse failure: " + std::string(e.what()));
        }
    }
    if (meta.value("schema_version", 0) != 1)
        throw FormatError("unsupported dataset schema_version");

    Dataset ds;
    ds.kind = discretization_from_string(meta.at("discretization").get<std::string>());
    const std::size_t n_len = meta.at("n_len").get<std::size_t>();
    const std::size_t n_v = meta.at("n_v").get<std::size_t>();
    const double dt = meta.value("dt", 1.0);

    std::shared_ptr<Mesh> mesh;
    if (ds.kind == Discretization::Unstructured) {
        const auto mesh_path = dir / "mesh.json";
        if (!std::filesystem::exists(mesh_path)) throw FormatError("unstructured dataset lacks mesh.json");
        nlohmann::json mj;
        std::ifstream is(mesh_path);
        is >> mj;
        mesh = std::make_shared<Mesh>(detail_ds::mesh_from_json(mj));
        if (std::filesystem::exists(dir / "edge_feat.ptg")) {
            mesh->edge_feat = ptg::load(dir / "edge_feat.ptg");
            mesh->validate();
        } else {
            mesh->build_default_edge_features();
        }
        ds.mesh = mesh;
    }

    const auto& seqs = meta.at("sequences");
    for (std::size_t k = 0; k < seqs.size(); ++k) {
        const auto file = dir / ("seq_" + std::to_string(k) + ".ptg");
        if (!std::filesystem::exists(file)) throw FormatError("missing " + file.string());
        Tensor stacked = ptg::load(file);
        if (stacked.ndim() < 2 || stacked.extent(0) != n_len)
            throw FormatError("seq_" + std::to_string(k) + ".ptg n_len disagrees with meta.json");
        if (stacked.shape().back() != n_v)
            throw FormatError("seq_" + std::to_string(k) + ".ptg n_v disagrees with meta.json");

        MicroSequence seq;
        seq.params = Params(seqs[k].at("mu").get<std::vector<double>>());
        seq.dt = dt;
        Shape snap_shape(stacked.shape().begin() + 1, stacked.shape().end());
        const std::size_t stride = shape_numel(snap_shape);
        for (std::size_t t = 0; t < n_len; ++t) {
            Tensor f(snap_shape);
            std::copy_n(stacked.raw().data() + t * stride, stride, f.raw().data());
            if (ds.kind == Discretization::Structured) {
                if (f.ndim() != 3) throw FormatError("structured snapshot payload must be rank 3");
                seq.snapshots.push_back(MicroState::structured(std::move(f)));
            } else {
                if (f.ndim() != 2) throw FormatError("unstructured snapshot payload must be rank 2");
                if (f.extent(0) != ds.mesh->cell_count())
                    throw FormatError("snapshot cell count disagrees with mesh.json");
                seq.snapshots.push_back(MicroState::unstructured(std::move(f), ds.mesh));
            }
        }
        ds.sequences.push_back(std::move(seq));
        ds.splits.push_back(split_from_string(seqs[k].at("split").get<std::string>()));
    }

    for (const auto& name : meta.value("obs_channels", std::vector<std::string>{})) {
        ds.obs_channel_names.push_back(name);
        auto& vec = ds.obs_channels[name];
        for (std::size_t k = 0; k < ds.sequences.size(); ++k) {
            const auto file = dir / ("obs_" + name + "_" + std::to_string(k) + ".ptg");
            if (!std::filesystem::exists(file)) throw FormatError("missing " + file.string());
            vec.push_back(ptg::load(file));
        }
    }

    ds.validate();
    return ds;
}

} // namespace flowgen
