#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowgen/errors.hpp"
#include "flowgen/mesh.hpp"
#include "flowgen/nn.hpp"
#include "flowgen/rng.hpp"
#include "flowgen/tensor.hpp"

namespace flowgen {

/// Latent grid resolution N_hr x N_wr x N_vr.
struct LatentShape {
    std::size_t nhr = 0, nwr = 0, nvr = 0;

    bool operator==(const LatentShape&) const = default;
};

namespace detail_ae {

// number of 2x stages for a dyadic ratio; throws if not a power of two
inline std::size_t dyadic_stages(std::size_t full, std::size_t reduced, const char* what) {
    if (reduced == 0 || full % reduced != 0)
        throw DimError(std::string(what) + " ratio is not integral");
    std::size_t ratio = full / reduced, s = 0;
    while (ratio > 1) {
        if (ratio % 2 != 0) throw DimError(std::string(what) + " ratio is not a power of two");
        ratio /= 2;
        ++s;
    }
    return s;
}

} // namespace detail_ae

/// Parameter-free down-sampling encoder: repeated 2x average pooling.
/// Exactly linear in the field, so E(a*u + b*w) = a*E(u) + b*E(w).
inline Tensor encode_structured(const Tensor& u, const LatentShape& latent) {
    if (u.ndim() != 3) throw DimError("encode_structured expects [N_h, N_w, N_v]");
    if (latent.nvr != u.extent(2))
        throw DimError("pooling preserves channels: N_vr must equal N_v");
    const std::size_t sh = detail_ae::dyadic_stages(u.extent(0), latent.nhr, "height");
    const std::size_t sw = detail_ae::dyadic_stages(u.extent(1), latent.nwr, "width");
    if (sh != sw) throw DimError("height and width reduction factors must agree");
    Tensor z = u;
    for (std::size_t s = 0; s < sh; ++s) z = avgpool(z, 2);
    return z;
}

/// Trainable convolutional decoder: repeated (upsample2x -> conv -> GELU)
/// stages followed by a final linear conv back to N_v channels.
struct CnnDecoderConfig {
    LatentShape latent;
    std::size_t nh = 0, nw = 0, nv = 0;
    std::vector<std::size_t> widths{64, 64}; // per-stage conv widths; last repeats
    std::size_t filter = 3;
};

class CnnDecoder {
public:
    CnnDecoder() = default;

    CnnDecoder(CnnDecoderConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        if (cfg_.widths.empty()) throw ContractError("decoder needs at least one width");
        const std::size_t sh = detail_ae::dyadic_stages(cfg_.nh, cfg_.latent.nhr, "height");
        const std::size_t sw = detail_ae::dyadic_stages(cfg_.nw, cfg_.latent.nwr, "width");
        if (sh != sw) throw DimError("decoder requires equal dyadic factors in h and w");
        stages_ = sh;
        Rng rng(seed);
        std::size_t prev = cfg_.latent.nvr;
        for (std::size_t s = 0; s < stages_; ++s) {
            const std::size_t w = cfg_.widths[std::min(s, cfg_.widths.size() - 1)];
            convs_.emplace_back(params_, "stage" + std::to_string(s), cfg_.filter, cfg_.filter,
                                prev, w, rng);
            prev = w;
        }
        out_ = ConvLayer(params_, "out", cfg_.filter, cfg_.filter, prev, cfg_.nv, rng);
    }

    /// Deterministic forward pass [N_hr,N_wr,N_vr] -> [N_h,N_w,N_v].
    Tensor forward(const Tensor& z) const {
        if (z.ndim() != 3 || z.extent(0) != cfg_.latent.nhr || z.extent(1) != cfg_.latent.nwr ||
            z.extent(2) != cfg_.latent.nvr)
            throw DimError("decoder input " + shape_str(z.shape()) + " does not match latent " +
                           std::to_string(cfg_.latent.nhr) + "x" + std::to_string(cfg_.latent.nwr) +
                           "x" + std::to_string(cfg_.latent.nvr));
        Tensor h = z;
        for (const auto& conv : convs_) h = gelu(conv.forward(upsample2x(h)));
        return out_.forward(h);
    }

    const CnnDecoderConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

private:
    CnnDecoderConfig cfg_;
    std::size_t stages_ = 0;
    std::vector<ConvLayer> convs_;
    ConvLayer out_;
    ParamStore params_;
};

/// Trained structured autoencoder artifact: per-channel normalization around a
/// pooling encoder and a convolutional decoder.
struct StructuredAe {
    LatentShape latent;
    ChannelNorm norm;
    CnnDecoder decoder;

    Tensor encode(const Tensor& u) const {
        return encode_structured(norm.empty() ? u : norm.apply(u), latent);
    }

    Tensor decode(const Tensor& z) const {
        Tensor out = decoder.forward(z);
        return norm.empty() ? out : norm.invert(out);
    }

    /// Differentiable decode for guidance paths (keeps the tape through
    /// denormalization).
    Tensor decode_traced(const Tensor& z) const {
        Tensor out = decoder.forward(z);
        return norm.empty() ? out : norm.invert_traced(out);
    }

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        decoder.params().save(dir);
        nlohmann::json j;
        j["kind"] = "structured_ae";
        j["latent"] = {{"nhr", latent.nhr}, {"nwr", latent.nwr}, {"nvr", latent.nvr}};
        j["micro"] = {{"nh", decoder.config().nh}, {"nw", decoder.config().nw}, {"nv", decoder.config().nv}};
        j["widths"] = decoder.config().widths;
        j["filter"] = decoder.config().filter;
        j["activation"] = "gelu";
        j["norm_mean"] = norm.mean;
        j["norm_std"] = norm.stddev;
        atomic_write(dir / "model.json", [&](std::ostream& os) { os << j.dump(2) << "\n"; });
    }

    static StructuredAe load(const std::filesystem::path& dir) {
        const auto manifest = dir / "model.json";
        if (!std::filesystem::exists(manifest))
            throw MissingArtifactError("autoencoder manifest " + manifest.string());
        nlohmann::json j;
        {
            std::ifstream is(manifest);
            is >> j;
        }
        if (j.value("kind", "") != "structured_ae")
            throw FormatError("manifest is not a structured_ae checkpoint");
        StructuredAe ae;
        ae.latent = {j["latent"]["nhr"].get<std::size_t>(), j["latent"]["nwr"].get<std::size_t>(),
                     j["latent"]["nvr"].get<std::size_t>()};
        CnnDecoderConfig cfg;
        cfg.latent = ae.latent;
        cfg.nh = j["micro"]["nh"].get<std::size_t>();
        cfg.nw = j["micro"]["nw"].get<std::size_t>();
        cfg.nv = j["micro"]["nv"].get<std::size_t>();
        cfg.widths = j["widths"].get<std::vector<std::size_t>>();
        cfg.filter = j["filter"].get<std::size_t>();
        ae.decoder = CnnDecoder(cfg, 0);
        ae.decoder.params().load(dir);
        ae.norm.mean = j["norm_mean"].get<std::vector<double>>();
        ae.norm.stddev = j["norm_std"].get<std::vector<double>>();
        return ae;
    }
};

struct AeTrainConfig {
    std::vector<std::size_t> widths{64, 64};
    std::size_t epochs = 40;
    std::size_t batch = 4;
    double lr = 2e-4;
    double beta1 = 0.9, beta2 = 0.999;
    std::uint64_t seed = 0;
    bool normalize = true;
    bool verbose = false;
};

struct TrainLog {
    struct Row {
        std::size_t epoch;
        double train_loss;
        double val_err;
    };
    std::vector<Row> rows;

    void write_csv(const std::filesystem::path& path) const {
        atomic_write(path, [&](std::ostream& os) {
            os << "epoch,train_loss,val_err\n";
            for (const auto& r : rows)
                os << r.epoch << "," << r.train_loss << "," << r.val_err << "\n";
        });
    }
};

namespace detail_ae {

inline std::vector<const Tensor*> gather_snapshots(const Dataset& data, Split split) {
    std::vector<const Tensor*> out;
    for (std::size_t k = 0; k < data.size(); ++k)
        if (data.splits[k] == split)
            for (const auto& s : data.sequences[k].snapshots) out.push_back(&s.field);
    return out;
}

} // namespace detail_ae

/// Minimize mean squared reconstruction error of D(E(u)) over all training
/// snapshots; returns the parameters with the best held-out reconstruction
/// seen during the budget.
inline std::pair<StructuredAe, TrainLog> train_structured_ae(const Dataset& data,
                                                             const LatentShape& latent,
                                                             const AeTrainConfig& cfg) {
    if (data.kind != Discretization::Structured)
        throw ContractError("train_structured_ae needs a structured dataset");
    auto train_ptr = detail_ae::gather_snapshots(data, Split::Train);
    if (train_ptr.empty()) throw ContractError("empty training split");
    auto val_ptr = detail_ae::gather_snapshots(data, Split::Test);

    const Shape& fs = train_ptr.front()->shape();
    StructuredAe ae;
    ae.latent = latent;
    if (cfg.normalize) {
        std::vector<Tensor> fields;
        fields.reserve(train_ptr.size());
        for (auto* p : train_ptr) fields.push_back(*p);
        ae.norm = ChannelNorm::fit(fields);
    }

    CnnDecoderConfig dcfg;
    dcfg.latent = latent;
    dcfg.nh = fs[0];
    dcfg.nw = fs[1];
    dcfg.nv = fs[2];
    dcfg.widths = cfg.widths;
    ae.decoder = CnnDecoder(dcfg, cfg.seed);

    // precompute normalized fields and their latents (the encoder has no
    // trainable parameters, so latents are fixed)
    std::vector<Tensor> targets, latents;
    targets.reserve(train_ptr.size());
    for (auto* p : train_ptr) {
        Tensor t = ae.norm.empty() ? *p : ae.norm.apply(*p);
        latents.push_back(encode_structured(t, latent));
        targets.push_back(std::move(t));
    }

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.beta1 = cfg.beta1;
    acfg.beta2 = cfg.beta2;
    acfg.warmup_steps = 100;
    Adam opt(ae.decoder.params(), acfg);
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

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        // deterministic shuffle
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_index(i)]);

        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t stop = std::min(start + cfg.batch, order.size());
            ae.decoder.params().zero_grad();
            Tape tape;
            Tensor loss;
            for (std::size_t b = start; b < stop; ++b) {
                Tensor pred = ae.decoder.forward(latents[order[b]]);
                Tensor diff = sub(pred, targets[order[b]]);
                Tensor l = mean(mul(diff, diff));
                loss = loss.defined() ? add(loss, l) : l;
            }
            loss = scale(loss, 1.0 / static_cast<double>(stop - start));
            if (!std::isfinite(loss.value())) throw NumericError("autoencoder loss diverged");
            tape.backward(loss);
            opt.step();
            epoch_loss += loss.value();
            ++batches;
        }
        epoch_loss /= static_cast<double>(batches);

        const double val = val_error();
        log.rows.push_back({epoch, epoch_loss, val});
        if (cfg.verbose)
            std::fprintf(stderr, "[ae-structured] epoch %zu train %.3e val %.3e\n", epoch,
                         epoch_loss, val);
        if (val < best_val) {
            best_val = val;
            best_params.clear();
            for (const auto& [name, p] : ae.decoder.params().items()) best_params.push_back(p.raw());
        }
    }
    if (!best_params.empty()) {
        std::size_t i = 0;
        for (auto& [name, p] : ae.decoder.params().items()) p.raw() = best_params[i++];
    }
    return {std::move(ae), std::move(log)};
}

} // namespace flowgen
