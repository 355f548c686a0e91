#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowgen/ae_structured.hpp" // LatentShape, AeTrainConfig, TrainLog
#include "flowgen/errors.hpp"
#include "flowgen/mesh.hpp"
#include "flowgen/nn.hpp"

namespace flowgen {

enum class Aggregation { Sum, Mean, Max };

inline std::string to_string(Aggregation a) {
    switch (a) {
    case Aggregation::Sum: return "sum";
    case Aggregation::Mean: return "mean";
    case Aggregation::Max: return "max";
    }
    return "mean";
}

inline Aggregation aggregation_from_string(const std::string& s) {
    if (s == "sum") return Aggregation::Sum;
    if (s == "mean") return Aggregation::Mean;
    if (s == "max") return Aggregation::Max;
    throw ConfigError("unknown aggregation '" + s + "'");
}

/// One message-passing layer: phi processes (x_i, x_j, e_ji) per edge, a
/// permutation-invariant reduction aggregates messages per node, gamma updates
/// the node from (x_i, aggregate).
struct MessagePassLayer {
    Mlp phi;   // [2*N_x + N_e] -> N_phi
    Mlp gamma; // [N_x + N_phi] -> N_y
    Aggregation agg = Aggregation::Mean;
    bool residual = false;
};

/// y_i = gamma(x_i, (+)_{j in N(i)} phi(x_i, x_j, e_ji)). Nodes with empty
/// neighborhoods aggregate the zero vector.
inline Tensor message_pass(const Tensor& x, const Mesh& mesh, const MessagePassLayer& layer) {
    if (x.ndim() != 2) throw DimError("message_pass expects node features [N_c, N_x]");
    const std::size_t nc = mesh.cell_count();
    if (x.extent(0) != nc) throw DimError("node feature rows differ from mesh cell count");
    if (!mesh.edge_feat.defined()) throw ContractError("mesh lacks edge features");
    const std::size_t nx = x.extent(1);
    const std::size_t ne = mesh.edge_feat.extent(1);
    if (layer.phi.in_width() != 2 * nx + ne)
        throw DimError("phi expects width " + std::to_string(layer.phi.in_width()) +
                       ", edge input has " + std::to_string(2 * nx + ne));

    std::vector<std::size_t> src, dst;
    src.reserve(mesh.edges.size());
    dst.reserve(mesh.edges.size());
    for (const auto& [j, i] : mesh.edges) {
        src.push_back(j);
        dst.push_back(i);
    }

    Tensor xi = take_rows(x, dst);
    Tensor xj = take_rows(x, src);
    Tensor msgs = layer.phi.forward(concat_axis({xi, xj, mesh.edge_feat}, 1));

    Tensor agg;
    switch (layer.agg) {
    case Aggregation::Sum:
        agg = scatter_add_rows(msgs, dst, nc);
        break;
    case Aggregation::Mean: {
        agg = scatter_add_rows(msgs, dst, nc);
        Tensor inv_deg(Shape{nc, 1});
        std::vector<double> deg(nc, 0.0);
        for (auto d : dst) deg[d] += 1.0;
        for (std::size_t i = 0; i < nc; ++i)
            inv_deg.raw()[i] = deg[i] > 0.0 ? 1.0 / deg[i] : 1.0;
        agg = mul(agg, inv_deg);
        break;
    }
    case Aggregation::Max:
        agg = scatter_max_rows(msgs, dst, nc);
        break;
    }

    Tensor y = layer.gamma.forward(concat_axis({x, agg}, 1));
    if (layer.residual) {
        if (y.shape() != x.shape())
            throw DimError("residual message passing needs N_y == N_x");
        y = add(y, x);
    }
    return y;
}

/// Optional farthest-point-sampling density bias toward a refinement box
/// (e.g. the near-cylinder region).
struct FpsBiasBox {
    bool enabled = false;
    double x0 = 0, x1 = 0, y0 = 0, y1 = 0;
    double strength = 2.0;
};

/// Pivotal-node layout for an unstructured mesh: a N_hr x N_wr grid of nodes
/// selected by farthest-point sampling (optionally density-biased toward a
/// refinement box), with inverse-distance k-NN pooling and scattering maps.
/// Construction is keyed purely by centroid coordinates, so relabeling mesh
/// cells yields the same assignment.
struct PivotalAssignment {
    std::size_t nhr = 0, nwr = 0, k = 0;
    Tensor node_coords;               // [P, d] in row-major grid order
    std::vector<std::size_t> pool_idx, pool_dst;  // P*k cell sources -> node dests
    std::vector<double> pool_w;
    std::vector<std::size_t> scat_idx, scat_dst;  // N_c*k node sources -> cell dests
    std::vector<double> scat_w;

    std::size_t node_count() const { return nhr * nwr; }

    static PivotalAssignment build(const Mesh& mesh, std::size_t nhr, std::size_t nwr,
                                   std::size_t k, const FpsBiasBox& bias = {}) {
        const std::size_t nc = mesh.cell_count();
        const std::size_t d = mesh.dim();
        const std::size_t p = nhr * nwr;
        if (p > nc) throw ContractError("more pivotal nodes than mesh cells");
        if (k == 0 || k > nc) throw ContractError("invalid k for pivotal assignment");
        if (d != 2) throw ContractError("pivotal grid layout requires a 2-D mesh");
        const auto& c = mesh.centroids.raw();

        auto coord_less = [&](std::size_t a, std::size_t b) {
            if (c[a * d + 1] != c[b * d + 1]) return c[a * d + 1] < c[b * d + 1];
            return c[a * d] < c[b * d];
        };
        auto bias_of = [&](std::size_t i) {
            if (!bias.enabled) return 1.0;
            const double x = c[i * d], y = c[i * d + 1];
            return (x >= bias.x0 && x <= bias.x1 && y >= bias.y0 && y <= bias.y1) ? bias.strength
                                                                                  : 1.0;
        };

        // farthest-point sampling, seeded at the lexicographically smallest
        // centroid so the result depends only on geometry
        std::vector<std::size_t> chosen;
        std::vector<double> mind(nc, std::numeric_limits<double>::infinity());
        std::size_t first = 0;
        for (std::size_t i = 1; i < nc; ++i)
            if (coord_less(i, first)) first = i;
        chosen.push_back(first);
        auto update = [&](std::size_t s) {
            for (std::size_t i = 0; i < nc; ++i) {
                double dist2 = 0.0;
                for (std::size_t q = 0; q < d; ++q) {
                    const double delta = c[i * d + q] - c[s * d + q];
                    dist2 += delta * delta;
                }
                mind[i] = std::min(mind[i], dist2);
            }
        };
        update(first);
        while (chosen.size() < p) {
            std::size_t best = nc;
            double best_score = -1.0;
            for (std::size_t i = 0; i < nc; ++i) {
                if (mind[i] == 0.0) continue;
                const double score = mind[i] * bias_of(i);
                if (score > best_score ||
                    (score == best_score && best < nc && coord_less(i, best))) {
                    best_score = score;
                    best = i;
                }
            }
            if (best == nc) throw ContractError("farthest-point sampling exhausted the mesh");
            chosen.push_back(best);
            update(best);
        }

        // grid layout: sort by y, chunk into rows, sort each row by x
        std::sort(chosen.begin(), chosen.end(), coord_less);
        for (std::size_t r = 0; r < nhr; ++r)
            std::sort(chosen.begin() + r * nwr, chosen.begin() + (r + 1) * nwr,
                      [&](std::size_t a, std::size_t b) { return c[a * d] < c[b * d]; });

        PivotalAssignment pa;
        pa.nhr = nhr;
        pa.nwr = nwr;
        pa.k = k;
        pa.node_coords = Tensor(Shape{p, d});
        for (std::size_t n = 0; n < p; ++n)
            for (std::size_t q = 0; q < d; ++q)
                pa.node_coords.raw()[n * d + q] = c[chosen[n] * d + q];

        auto knn = [&](const double* point, const double* pts, std::size_t count) {
            std::vector<std::pair<double, std::size_t>> dists(count);
            for (std::size_t i = 0; i < count; ++i) {
                double dist2 = 0.0;
                for (std::size_t q = 0; q < d; ++q) {
                    const double delta = pts[i * d + q] - point[q];
                    dist2 += delta * delta;
                }
                dists[i] = {dist2, i};
            }
            std::partial_sort(dists.begin(), dists.begin() + static_cast<std::ptrdiff_t>(k),
                              dists.end(), [&](const auto& a, const auto& b) {
                                  if (a.first != b.first) return a.first < b.first;
                                  // tie-break on coordinates for permutation stability
                                  for (std::size_t q = 0; q < d; ++q) {
                                      const double ca = pts[a.second * d + q], cb = pts[b.second * d + q];
                                      if (ca != cb) return ca < cb;
                                  }
                                  return false;
                              });
            dists.resize(k);
            return dists;
        };

        const double eps = 1e-9;
        for (std::size_t n = 0; n < p; ++n) {
            auto nbrs = knn(pa.node_coords.raw().data() + n * d, c.data(), nc);
            double wsum = 0.0;
            for (const auto& [dist2, i] : nbrs) wsum += 1.0 / (std::sqrt(dist2) + eps);
            for (const auto& [dist2, i] : nbrs) {
                pa.pool_idx.push_back(i);
                pa.pool_dst.push_back(n);
                pa.pool_w.push_back(1.0 / (std::sqrt(dist2) + eps) / wsum);
            }
        }
        for (std::size_t i = 0; i < nc; ++i) {
            auto nbrs = knn(c.data() + i * d, pa.node_coords.raw().data(), p);
            double wsum = 0.0;
            for (const auto& [dist2, n] : nbrs) wsum += 1.0 / (std::sqrt(dist2) + eps);
            for (const auto& [dist2, n] : nbrs) {
                pa.scat_idx.push_back(n);
                pa.scat_dst.push_back(i);
                pa.scat_w.push_back(1.0 / (std::sqrt(dist2) + eps) / wsum);
            }
        }
        return pa;
    }
};

namespace detail_gnn {

// weighted k-NN transfer: out[dst] += w * in[src], differentiable in `in`
inline Tensor knn_transfer(const Tensor& in, const std::vector<std::size_t>& src,
                           const std::vector<std::size_t>& dst, const std::vector<double>& w,
                           std::size_t n_out) {
    Tensor rows = take_rows(in, src);
    Tensor weights(Shape{w.size(), 1}, std::vector<double>(w));
    return scatter_add_rows(mul(rows, weights), dst, n_out);
}

} // namespace detail_gnn

struct GnnCodecConfig {
    std::size_t n_v = 3;
    LatentShape latent;
    std::size_t width = 128;
    std::size_t n_layers = 3;
    std::size_t k_nn = 4;
    Aggregation agg = Aggregation::Mean;
    FpsBiasBox bias;
};

/// Trainable GNN encoder/decoder pair between mesh fields [N_c, N_v] and the
/// pivotal latent grid [N_hr, N_wr, N_vr].
class GnnCodec {
public:
    GnnCodec() = default;

    GnnCodec(GnnCodecConfig cfg, std::shared_ptr<const Mesh> mesh, std::uint64_t seed)
        : cfg_(cfg), mesh_(std::move(mesh)) {
        if (!mesh_) throw ContractError("GnnCodec needs a mesh");
        assign_ = PivotalAssignment::build(*mesh_, cfg_.latent.nhr, cfg_.latent.nwr, cfg_.k_nn,
                                           cfg_.bias);
        init_params(seed);
    }

    GnnCodec(GnnCodecConfig cfg, std::shared_ptr<const Mesh> mesh, PivotalAssignment assign,
             std::uint64_t seed)
        : cfg_(cfg), mesh_(std::move(mesh)), assign_(std::move(assign)) {
        init_params(seed);
    }

    Tensor encode(const Tensor& field) const {
        check_mesh_field(field);
        Tensor h = embed_.forward(field);
        for (const auto& layer : enc_layers_) h = message_pass(h, *mesh_, layer);
        Tensor pooled = detail_gnn::knn_transfer(h, assign_.pool_idx, assign_.pool_dst, assign_.pool_w,
                                                 assign_.node_count());
        Tensor z_nodes = project_.forward(pooled);
        return reshape(z_nodes, Shape{cfg_.latent.nhr, cfg_.latent.nwr, cfg_.latent.nvr});
    }

    Tensor decode(const Tensor& z) const {
        if (z.ndim() != 3 || z.extent(0) != cfg_.latent.nhr || z.extent(1) != cfg_.latent.nwr ||
            z.extent(2) != cfg_.latent.nvr)
            throw DimError("latent " + shape_str(z.shape()) + " does not match codec");
        Tensor z_nodes = reshape(z, Shape{assign_.node_count(), cfg_.latent.nvr});
        Tensor lifted = lift_.forward(z_nodes);
        Tensor h = detail_gnn::knn_transfer(lifted, assign_.scat_idx, assign_.scat_dst,
                                            assign_.scat_w, mesh_->cell_count());
        for (const auto& layer : dec_layers_) h = message_pass(h, *mesh_, layer);
        return readout_.forward(h);
    }

    const GnnCodecConfig& config() const { return cfg_; }
    const PivotalAssignment& assignment() const { return assign_; }
    const std::shared_ptr<const Mesh>& mesh() const { return mesh_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

private:
    void check_mesh_field(const Tensor& field) const {
        if (field.ndim() != 2 || field.extent(0) != mesh_->cell_count() ||
            field.extent(1) != cfg_.n_v)
            throw ContractError("field " + shape_str(field.shape()) +
                                " does not match codec mesh/components");
    }

    void init_params(std::uint64_t seed) {
        Rng rng(seed);
        const std::size_t w = cfg_.width, ne = mesh_->edge_feat.extent(1);
        embed_ = Mlp(params_, "embed", {cfg_.n_v, w}, rng);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l)
            enc_layers_.push_back(make_layer("enc" + std::to_string(l), w, ne, rng));
        project_ = Mlp(params_, "project", {w, cfg_.latent.nvr}, rng);
        lift_ = Mlp(params_, "lift", {cfg_.latent.nvr, w}, rng);
        for (std::size_t l = 0; l < cfg_.n_layers; ++l)
            dec_layers_.push_back(make_layer("dec" + std::to_string(l), w, ne, rng));
        readout_ = Mlp(params_, "readout", {w, w, cfg_.n_v}, rng);
    }

    MessagePassLayer make_layer(const std::string& name, std::size_t w, std::size_t ne, Rng& rng) {
        MessagePassLayer layer;
        layer.phi = Mlp(params_, name + ".phi", {2 * w + ne, w, w}, rng);
        layer.gamma = Mlp(params_, name + ".gamma", {2 * w, w, w}, rng);
        layer.gamma.scale_last_layer(0.1); // residual layers start near-identity
        layer.agg = cfg_.agg;
        layer.residual = true;
        return layer;
    }

    GnnCodecConfig cfg_;
    std::shared_ptr<const Mesh> mesh_;
    PivotalAssignment assign_;
    ParamStore params_;
    Mlp embed_, project_, lift_, readout_;
    std::vector<MessagePassLayer> enc_layers_, dec_layers_;
};

/// Trained graph autoencoder artifact (normalization + codec).
struct GraphAe {
    ChannelNorm norm;
    GnnCodec codec;

    Tensor encode(const Tensor& field) const {
        return codec.encode(norm.empty() ? field : norm.apply(field));
    }
    Tensor decode(const Tensor& z) const {
        Tensor out = codec.decode(z);
        return norm.empty() ? out : norm.invert(out);
    }
    Tensor decode_traced(const Tensor& z) const {
        Tensor out = codec.decode(z);
        return norm.empty() ? out : norm.invert_traced(out);
    }

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        codec.params().save(dir);
        const auto& cfg = codec.config();
        const auto& pa = codec.assignment();
        nlohmann::json j;
        j["kind"] = "graph_ae";
        j["n_v"] = cfg.n_v;
        j["latent"] = {{"nhr", cfg.latent.nhr}, {"nwr", cfg.latent.nwr}, {"nvr", cfg.latent.nvr}};
        j["width"] = cfg.width;
        j["n_layers"] = cfg.n_layers;
        j["k_nn"] = cfg.k_nn;
        j["aggregation"] = to_string(cfg.agg);
        j["activation"] = "gelu";
        j["norm_mean"] = norm.mean;
        j["norm_std"] = norm.stddev;
        // assignment stored verbatim for exact reproducibility
        j["assignment"] = {{"node_coords", pa.node_coords.raw()},
                           {"pool_idx", pa.pool_idx}, {"pool_dst", pa.pool_dst},
                           {"pool_w", pa.pool_w},     {"scat_idx", pa.scat_idx},
                           {"scat_dst", pa.scat_dst}, {"scat_w", pa.scat_w}};
        atomic_write(dir / "model.json", [&](std::ostream& os) { os << j.dump() << "\n"; });
    }

    static GraphAe load(const std::filesystem::path& dir, std::shared_ptr<const Mesh> mesh) {
        const auto manifest = dir / "model.json";
        if (!std::filesystem::exists(manifest))
            throw MissingArtifactError("autoencoder manifest " + manifest.string());
        nlohmann::json j;
        {
            std::ifstream is(manifest);
            is >> j;
        }
        if (j.value("kind", "") != "graph_ae") throw FormatError("manifest is not a graph_ae checkpoint");
        GnnCodecConfig cfg;
        cfg.n_v = j["n_v"].get<std::size_t>();
        cfg.latent = {j["latent"]["nhr"].get<std::size_t>(), j["latent"]["nwr"].get<std::size_t>(),
                      j["latent"]["nvr"].get<std::size_t>()};
        cfg.width = j["width"].get<std::size_t>();
        cfg.n_layers = j["n_layers"].get<std::size_t>();
        cfg.k_nn = j["k_nn"].get<std::size_t>();
        cfg.agg = aggregation_from_string(j["aggregation"].get<std::string>());

        PivotalAssignment pa;
        pa.nhr = cfg.latent.nhr;
        pa.nwr = cfg.latent.nwr;
        pa.k = cfg.k_nn;
        const auto& a = j["assignment"];
        auto coords = a["node_coords"].get<std::vector<double>>();
        const std::size_t coord_dim = coords.size() / pa.node_count();
        pa.node_coords = Tensor(Shape{pa.node_count(), coord_dim}, std::move(coords));
        pa.pool_idx = a["pool_idx"].get<std::vector<std::size_t>>();
        pa.pool_dst = a["pool_dst"].get<std::vector<std::size_t>>();
        pa.pool_w = a["pool_w"].get<std::vector<double>>();
        pa.scat_idx = a["scat_idx"].get<std::vector<std::size_t>>();
        pa.scat_dst = a["scat_dst"].get<std::vector<std::size_t>>();
        pa.scat_w = a["scat_w"].get<std::vector<double>>();

        GraphAe ae;
        ae.codec = GnnCodec(cfg, std::move(mesh), std::move(pa), 0);
        ae.codec.params().load(dir);
        ae.norm.mean = j["norm_mean"].get<std::vector<double>>();
        ae.norm.stddev = j["norm_std"].get<std::vector<double>>();
        return ae;
    }
};

struct GraphAeTrainConfig {
    std::size_t width = 128;
    std::size_t n_layers = 3;
    std::size_t k_nn = 4;
    Aggregation agg = Aggregation::Mean;
    FpsBiasBox bias;
    std::size_t epochs = 20;
    std::size_t batch = 4;
    double lr = 2e-4;
    std::uint64_t seed = 0;
    bool normalize = true;
    bool verbose = false;
    std::size_t max_steps = 0; // 0 = no cap
};

/// MSE reconstruction training of the GNN codec on an unstructured dataset
/// sharing one mesh.
inline std::pair<GraphAe, TrainLog> train_graph_ae(const Dataset& data, const LatentShape& latent,
                                                   const GraphAeTrainConfig& cfg) {
    if (data.kind != Discretization::Unstructured)
        throw ContractError("train_graph_ae needs an unstructured dataset");
    if (!data.mesh) throw ContractError("dataset lacks a mesh");
    for (const auto& seq : data.sequences)
        for (const auto& s : seq.snapshots)
            if (s.mesh.get() != data.mesh.get())
                throw ContractError("train_graph_ae requires one shared mesh");

    auto train_ptr = detail_ae::gather_snapshots(data, Split::Train);
    if (train_ptr.empty()) throw ContractError("empty training split");
    auto val_ptr = detail_ae::gather_snapshots(data, Split::Test);

    GraphAe ae;
    if (cfg.normalize) {
        std::vector<Tensor> fields;
        fields.reserve(train_ptr.size());
        for (auto* p : train_ptr) fields.push_back(*p);
        ae.norm = ChannelNorm::fit(fields);
    }
    GnnCodecConfig ccfg;
    ccfg.n_v = train_ptr.front()->extent(1);
    ccfg.latent = latent;
    ccfg.width = cfg.width;
    ccfg.n_layers = cfg.n_layers;
    ccfg.k_nn = cfg.k_nn;
    ccfg.agg = cfg.agg;
    ccfg.bias = cfg.bias;
    ae.codec = GnnCodec(ccfg, data.mesh, cfg.seed);

    std::vector<Tensor> targets;
    targets.reserve(train_ptr.size());
    for (auto* p : train_ptr) targets.push_back(ae.norm.empty() ? *p : ae.norm.apply(*p));

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.warmup_steps = 100;
    Adam opt(ae.codec.params(), acfg);
    Rng rng(cfg.seed + 1);

    auto val_error = [&]() {
        const auto& probe = val_ptr.empty() ? train_ptr : val_ptr;
        double num = 0.0, den = 0.0;
        for (auto* p : probe) {
            Tensor rec = ae.decode(ae.encode(*p));
            for (std::size_t i = 0; i < p->size(); ++i) {
                const double d = rec.raw()[i] - p->raw()[i];
                num += d * d;
                den += p->raw()[i] * p->raw()[i];
            }
        }
        return std::sqrt(num / std::max(den, 1e-300));
    };

    TrainLog log;
    double best_val = std::numeric_limits<double>::infinity();
    std::vector<std::vector<double>> best_params;
    std::vector<std::size_t> order(targets.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t steps = 0;
    bool budget_spent = false;

    for (std::size_t epoch = 0; epoch < cfg.epochs && !budget_spent; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_index(i)]);

        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t stop = std::min(start + cfg.batch, order.size());
            ae.codec.params().zero_grad();
            Tape tape;
            Tensor loss;
            for (std::size_t b = start; b < stop; ++b) {
                Tensor rec = ae.codec.decode(ae.codec.encode(targets[order[b]]));
                Tensor diff = sub(rec, targets[order[b]]);
                Tensor l = mean(mul(diff, diff));
                loss = loss.defined() ? add(loss, l) : l;
            }
            loss = scale(loss, 1.0 / static_cast<double>(stop - start));
            if (!std::isfinite(loss.value())) throw NumericError("graph autoencoder loss diverged");
            tape.backward(loss);
            opt.step();
            epoch_loss += loss.value();
            ++batches;
            if (cfg.max_steps && ++steps >= cfg.max_steps) {
                budget_spent = true;
                break;
            }
        }
        epoch_loss /= static_cast<double>(batches);
        const double val = val_error();
        log.rows.push_back({epoch, epoch_loss, val});
        if (cfg.verbose)
            std::fprintf(stderr, "[ae-graph] epoch %zu train %.3e val %.3e\n", epoch, epoch_loss,
                         val);
        if (val < best_val) {
            best_val = val;
            best_params.clear();
            for (const auto& [name, p] : ae.codec.params().items()) best_params.push_back(p.raw());
        }
    }
    if (!best_params.empty()) {
        std::size_t i = 0;
        for (auto& [name, p] : ae.codec.params().items()) p.raw() = best_params[i++];
    }
    return {std::move(ae), std::move(log)};
}

} // namespace flowgen
