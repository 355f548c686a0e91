#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "flowgen/ae_structured.hpp" // LatentShape, TrainLog
#include "flowgen/errors.hpp"
#include "flowgen/mesh.hpp"
#include "flowgen/nn.hpp"
#include "flowgen/rng.hpp"
#include "flowgen/tensor.hpp"

namespace flowgen {

/// Increasing noise ladder sigma_1 < ... < sigma_{N_noise}.
struct NoiseSchedule {
    std::vector<double> sigmas;

    std::size_t n() const { return sigmas.size(); }

    /// 1-based level access, matching the ladder indices.
    double sigma(std::size_t i) const {
        if (i < 1 || i > sigmas.size()) throw ContractError("noise level out of range");
        return sigmas[i - 1];
    }

    void validate() const {
        if (sigmas.size() < 2) throw ContractError("schedule needs at least two levels");
        if (sigmas.front() <= 0.0) throw ContractError("sigma_1 must be positive");
        for (std::size_t i = 1; i < sigmas.size(); ++i)
            if (sigmas[i] <= sigmas[i - 1])
                throw ContractError("schedule must be strictly increasing");
    }
};

/// Geometric spacing sigma_i = sigma_min * (sigma_max/sigma_min)^((i-1)/(N-1)).
inline NoiseSchedule build_schedule(std::size_t n_noise, double sigma_min, double sigma_max) {
    if (n_noise < 2) throw ContractError("n_noise must be >= 2");
    if (!(0.0 < sigma_min && sigma_min < sigma_max))
        throw ContractError("need 0 < sigma_min < sigma_max");
    NoiseSchedule s;
    s.sigmas.resize(n_noise);
    const double ratio = sigma_max / sigma_min;
    for (std::size_t i = 0; i < n_noise; ++i)
        s.sigmas[i] = sigma_min * std::pow(ratio, static_cast<double>(i) /
                                                      static_cast<double>(n_noise - 1));
    s.sigmas.back() = sigma_max; // exact endpoint
    s.validate();
    return s;
}

/// Latent-grid sequence Z_{n_len}(mu): tensor [N_hr, N_wr, N_vr, n_len].
struct LatentSeq {
    Tensor data;
    Params params;

    static LatentSeq from_frames(const std::vector<Tensor>& frames, Params mu) {
        if (frames.empty()) throw ContractError("latent sequence needs n_len >= 1");
        const Shape& fs = frames.front().shape();
        if (fs.size() != 3) throw ContractError("latent frames must be [N_hr, N_wr, N_vr]");
        LatentSeq seq;
        seq.params = std::move(mu);
        seq.data = Tensor(Shape{fs[0], fs[1], fs[2], frames.size()});
        const std::size_t n_len = frames.size();
        auto& d = seq.data.raw();
        for (std::size_t t = 0; t < n_len; ++t) {
            const auto& f = frames[t].raw();
            if (frames[t].shape() != fs) throw ContractError("latent frames must share a shape");
            for (std::size_t p = 0; p < f.size(); ++p) d[p * n_len + t] = f[p];
        }
        return seq;
    }

    std::size_t n_len() const { return data.shape().back(); }

    /// Frame t as [N_hr, N_wr, N_vr]; differentiable slice.
    static Tensor frame(const Tensor& data, std::size_t t) {
        const Shape& s = data.shape();
        Tensor f = slice_axis(data, 3, t, 1);
        return reshape(f, Shape{s[0], s[1], s[2]});
    }
};

/// Forward process: Z + sigma_i * eps, eps ~ N(0, I).
inline Tensor forward_diffuse(const Tensor& z, std::size_t i, const NoiseSchedule& sched,
                              Rng& rng) {
    const double s = sched.sigma(i);
    Tensor out(z.shape(), z.raw());
    for (auto& v : out.raw()) v += s * rng.normal();
    return out;
}

/// Per-latent-channel normalization for the diffusion training space.
struct LatentNorm {
    std::vector<double> mean, stddev; // per N_vr channel

    bool empty() const { return mean.empty(); }

    static LatentNorm fit(const std::vector<LatentSeq>& data) {
        if (data.empty()) throw ContractError("latent-norm fit on empty set");
        const std::size_t nvr = data.front().data.extent(2);
        const std::size_t n_len = data.front().data.extent(3);
        LatentNorm n;
        n.mean.assign(nvr, 0.0);
        n.stddev.assign(nvr, 0.0);
        std::size_t count = 0;
        for (const auto& seq : data) {
            const auto& d = seq.data.raw();
            for (std::size_t p = 0; p < d.size(); ++p) n.mean[(p / n_len) % nvr] += d[p];
            count += seq.data.size() / nvr;
        }
        for (auto& m : n.mean) m /= static_cast<double>(count);
        for (const auto& seq : data) {
            const auto& d = seq.data.raw();
            for (std::size_t p = 0; p < d.size(); ++p) {
                const double dv = d[p] - n.mean[(p / n_len) % nvr];
                n.stddev[(p / n_len) % nvr] += dv * dv;
            }
        }
        for (auto& s : n.stddev) {
            s = std::sqrt(s / static_cast<double>(count));
            if (s < 1e-12) s = 1.0;
        }
        return n;
    }

    Tensor apply(const Tensor& z) const {
        if (empty()) return z;
        const std::size_t nvr = z.extent(2), n_len = z.extent(3);
        Tensor out(z.shape(), z.raw());
        auto& d = out.raw();
        for (std::size_t p = 0; p < d.size(); ++p) {
            const std::size_t c = (p / n_len) % nvr;
            d[p] = (d[p] - mean[c]) / stddev[c];
        }
        return out;
    }

    Tensor invert(const Tensor& z) const {
        if (empty()) return z;
        const std::size_t nvr = z.extent(2), n_len = z.extent(3);
        Tensor out(z.shape(), z.raw());
        auto& d = out.raw();
        for (std::size_t p = 0; p < d.size(); ++p) {
            const std::size_t c = (p / n_len) % nvr;
            d[p] = d[p] * stddev[c] + mean[c];
        }
        return out;
    }

    /// Differentiable denormalization: broadcast multiply/add over [h,w,c,t].
    Tensor invert_traced(const Tensor& z) const {
        if (empty()) return z;
        const std::size_t nvr = z.extent(2);
        Tensor sd(Shape{nvr, 1}), mn(Shape{nvr, 1});
        for (std::size_t c = 0; c < nvr; ++c) {
            sd.raw()[c] = stddev[c];
            mn.raw()[c] = mean[c];
        }
        return add(mul(z, sd), mn);
    }
};

/// U-Net-style conditional denoiser over the latent grid; the N_vr * n_len
/// axis is folded into channels. mu enters as an affine embedding added to the
/// first-stage feature map, the noise level as a learned embedding of
/// log(sigma_i) added at every stage.
struct DenoiserConfig {
    LatentShape latent;
    std::size_t n_len = 1;
    std::size_t n_mu = 1;
    std::vector<std::size_t> widths{32, 64, 128, 256};
    std::size_t emb_dim = 64;
    std::size_t filter = 3;
};

class DenoiserModel {
public:
    DenoiserModel() = default;

    DenoiserModel(DenoiserConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
        if (cfg_.widths.empty()) throw ContractError("denoiser needs at least one width");
        Rng rng(seed);
        const std::size_t cin = cfg_.latent.nvr * cfg_.n_len;
        const std::size_t s_count = cfg_.widths.size();

        stem_ = ConvLayer(params_, "stem", cfg_.filter, cfg_.filter, cin, cfg_.widths[0], rng);
        mu_embed_ = Linear(params_, "mu_embed", cfg_.n_mu, cfg_.widths[0], rng);
        noise_trunk_ = Mlp(params_, "noise_trunk", {1, cfg_.emb_dim, cfg_.emb_dim}, rng);

        // pooling plan: halve spatial dims between stages while they stay even
        std::size_t h = cfg_.latent.nhr, w = cfg_.latent.nwr;
        pooled_.assign(s_count, false);
        for (std::size_t s = 0; s + 1 < s_count; ++s) {
            if (h % 2 == 0 && w % 2 == 0 && h > 1 && w > 1) {
                pooled_[s] = true;
                h /= 2;
                w /= 2;
            }
        }

        std::size_t prev = cfg_.widths[0];
        for (std::size_t s = 0; s < s_count; ++s) {
            const std::size_t ws = cfg_.widths[s];
            down_.emplace_back(params_, "down" + std::to_string(s), cfg_.filter, cfg_.filter, prev,
                               ws, rng);
            nhead_down_.emplace_back(params_, "nhead_down" + std::to_string(s), cfg_.emb_dim, ws,
                                     rng);
            prev = ws;
        }
        for (std::size_t s = s_count - 1; s-- > 0;) {
            const std::size_t ws = cfg_.widths[s];
            up_.emplace_back(params_, "up" + std::to_string(s), cfg_.filter, cfg_.filter,
                             cfg_.widths[s + 1] + ws, ws, rng);
            nhead_up_.emplace_back(params_, "nhead_up" + std::to_string(s), cfg_.emb_dim, ws, rng);
            prev = ws;
        }
        out_ = ConvLayer(params_, "out", cfg_.filter, cfg_.filter, cfg_.widths[0], cin, rng);
    }

    /// Predict the clean latent sequence from its noisy version at noise scale
    /// sigma. Input/output [N_hr, N_wr, N_vr, n_len].
    Tensor forward(const Params& mu, const Tensor& z_noisy, double sigma) const {
        const auto& L = cfg_.latent;
        if (z_noisy.ndim() != 4 || z_noisy.extent(0) != L.nhr || z_noisy.extent(1) != L.nwr ||
            z_noisy.extent(2) != L.nvr || z_noisy.extent(3) != cfg_.n_len)
            throw DimError("denoiser input " + shape_str(z_noisy.shape()) + " does not match config");
        if (mu.mu.size() != cfg_.n_mu) throw DimError("denoiser mu width mismatch");
        if (sigma <= 0.0) throw ContractError("denoiser needs sigma > 0");

        const std::size_t cin = L.nvr * cfg_.n_len;
        Tensor x = reshape(z_noisy, Shape{L.nhr, L.nwr, cin});

        Tensor mu_t(Shape{1, cfg_.n_mu}, std::vector<double>(mu.mu));
        Tensor mu_vec = reshape(mu_embed_.forward(mu_t), Shape{cfg_.widths[0]});

        Tensor sig_t(Shape{1, 1}, {std::log(sigma)});
        Tensor nemb = noise_trunk_.forward(sig_t); // [1, emb_dim]

        Tensor h = add(stem_.forward(x), mu_vec);

        std::vector<Tensor> skips;
        for (std::size_t s = 0; s < down_.size(); ++s) {
            h = gelu(down_[s].forward(h));
            h = add(h, reshape(nhead_down_[s].forward(nemb), Shape{cfg_.widths[s]}));
            skips.push_back(h);
            if (pooled_[s]) h = avgpool(h, 2);
        }
        for (std::size_t u = 0; u < up_.size(); ++u) {
            const std::size_t s = down_.size() - 2 - u;
            if (pooled_[s]) h = upsample2x(h);
            h = concat_axis({h, skips[s]}, 2);
            h = gelu(up_[u].forward(h));
            h = add(h, reshape(nhead_up_[u].forward(nemb), Shape{cfg_.widths[s]}));
        }
        Tensor y = out_.forward(h);
        return reshape(y, z_noisy.shape());
    }

    const DenoiserConfig& config() const { return cfg_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }

private:
    DenoiserConfig cfg_;
    ParamStore params_;
    ConvLayer stem_, out_;
    Linear mu_embed_;
    Mlp noise_trunk_;
    std::vector<ConvLayer> down_, up_;
    std::vector<Linear> nhead_down_, nhead_up_;
    std::vector<bool> pooled_;
};

/// Type-erased denoiser so analytic test doubles can replace the network in
/// the reverse chain and in guidance. `level` is 1-based.
using DenoiseFn = std::function<Tensor(const Params&, const Tensor&, std::size_t)>;

/// Deterministic forward pass of a trained model at ladder level i.
inline Tensor denoise(const DenoiserModel& model, const Params& mu, const Tensor& z_noisy,
                      std::size_t i, const NoiseSchedule& sched) {
    return model.forward(mu, z_noisy, sched.sigma(i));
}

/// One reverse-posterior step from level i+1 down to level i (i >= 1), or the
/// final deterministic step to level 0 (i == 0, sigma_0 := 0).
inline Tensor reverse_step(const DenoiseFn& model, const Params& mu, const Tensor& z_noisy,
                           std::size_t i, const NoiseSchedule& sched, Rng& rng) {
    if (i + 1 > sched.n()) throw ContractError("reverse_step level out of range");
    Tensor z_hat = model(mu, z_noisy, i + 1);
    if (z_hat.shape() != z_noisy.shape())
        throw DimError("denoiser output shape mismatch in reverse_step");
    if (i == 0) return z_hat; // sigma_0 = 0: mean collapses onto the estimate

    const double s2_hi = sched.sigma(i + 1) * sched.sigma(i + 1);
    const double s2_lo = sched.sigma(i) * sched.sigma(i);
    const double a = (s2_hi - s2_lo) / s2_hi;
    const double b = s2_lo / s2_hi;
    const double stddev = std::sqrt((s2_hi - s2_lo) * s2_lo / s2_hi);

    Tensor out(z_noisy.shape());
    auto& o = out.raw();
    const auto& zh = z_hat.raw();
    const auto& zn = z_noisy.raw();
    for (std::size_t p = 0; p < o.size(); ++p) o[p] = a * zh[p] + b * zn[p] + stddev * rng.normal();
    return out;
}

/// Full unguided reverse ladder: initialize sigma_N * eps and walk down to
/// level 0.
inline Tensor sample(const DenoiseFn& model, const Params& mu, const Shape& latent_seq_shape,
                     const NoiseSchedule& sched, Rng& rng) {
    Tensor z(latent_seq_shape);
    const double s_top = sched.sigma(sched.n());
    for (auto& v : z.raw()) v = s_top * rng.normal();
    for (std::size_t i = sched.n(); i-- > 0;) z = reverse_step(model, mu, z, i, sched, rng);
    return z;
}

/// Expected squared denoising error of an arbitrary denoiser on a latent
/// dataset, estimated with `draws_per_seq` random (level, noise) draws per
/// sequence. This is the training objective evaluated out-of-line; the
/// perfect oracle (returning the stored clean Z) scores exactly zero.
inline double diffusion_objective(const DenoiseFn& model, const std::vector<LatentSeq>& data,
                                  const NoiseSchedule& sched, Rng& rng,
                                  std::size_t draws_per_seq = 4) {
    if (data.empty()) throw ContractError("empty latent dataset");
    double acc = 0.0;
    std::size_t count = 0;
    for (const auto& seq : data) {
        for (std::size_t d = 0; d < draws_per_seq; ++d) {
            const std::size_t i = 1 + rng.uniform_index(sched.n());
            Tensor noisy = forward_diffuse(seq.data, i, sched, rng);
            Tensor est = model(seq.params, noisy, i);
            double se = 0.0;
            for (std::size_t p = 0; p < est.size(); ++p) {
                const double diff = est.raw()[p] - seq.data.raw()[p];
                se += diff * diff;
            }
            acc += se / static_cast<double>(est.size());
            ++count;
        }
    }
    return acc / static_cast<double>(count);
}

struct DiffTrainConfig {
    std::vector<std::size_t> widths{32, 64, 128, 256};
    std::size_t emb_dim = 64;
    std::size_t epochs = 30;
    std::size_t batch = 8;
    double lr = 1e-4;
    std::uint64_t seed = 0;
    bool normalize = true;
    bool verbose = false;
};

/// Trained diffusion artifact: denoiser network + schedule + latent
/// normalization used during training.
struct DiffusionModel {
    DenoiserModel net;
    NoiseSchedule sched;
    LatentNorm norm;

    /// DenoiseFn over normalized latents.
    DenoiseFn fn() const {
        return [this](const Params& mu, const Tensor& z, std::size_t i) {
            return denoise(net, mu, z, i, sched);
        };
    }

    /// Sample a latent sequence in original latent units.
    Tensor sample_latent(const Params& mu, Rng& rng) const {
        const auto& c = net.config();
        Shape shape{c.latent.nhr, c.latent.nwr, c.latent.nvr, c.n_len};
        Tensor z = flowgen::sample(fn(), mu, shape, sched, rng);
        return norm.invert(z);
    }

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        net.params().save(dir);
        const auto& c = net.config();
        nlohmann::json j;
        j["kind"] = "diffusion";
        j["latent"] = {{"nhr", c.latent.nhr}, {"nwr", c.latent.nwr}, {"nvr", c.latent.nvr}};
        j["n_len"] = c.n_len;
        j["n_mu"] = c.n_mu;
        j["widths"] = c.widths;
        j["emb_dim"] = c.emb_dim;
        j["filter"] = c.filter;
        j["schedule"] = sched.sigmas;
        j["norm_mean"] = norm.mean;
        j["norm_std"] = norm.stddev;
        atomic_write(dir / "model.json", [&](std::ostream& os) { os << j.dump(2) << "\n"; });
    }

    static DiffusionModel load(const std::filesystem::path& dir) {
        const auto manifest = dir / "model.json";
        if (!std::filesystem::exists(manifest))
            throw MissingArtifactError("diffusion manifest " + manifest.string());
        nlohmann::json j;
        {
            std::ifstream is(manifest);
            is >> j;
        }
        if (j.value("kind", "") != "diffusion") throw FormatError("manifest is not a diffusion checkpoint");
        DenoiserConfig c;
        c.latent = {j["latent"]["nhr"].get<std::size_t>(), j["latent"]["nwr"].get<std::size_t>(),
                    j["latent"]["nvr"].get<std::size_t>()};
        c.n_len = j["n_len"].get<std::size_t>();
        c.n_mu = j["n_mu"].get<std::size_t>();
        c.widths = j["widths"].get<std::vector<std::size_t>>();
        c.emb_dim = j["emb_dim"].get<std::size_t>();
        c.filter = j["filter"].get<std::size_t>();
        DiffusionModel m;
        m.net = DenoiserModel(c, 0);
        m.net.params().load(dir);
        m.sched.sigmas = j["schedule"].get<std::vector<double>>();
        m.sched.validate();
        m.norm.mean = j["norm_mean"].get<std::vector<double>>();
        m.norm.stddev = j["norm_std"].get<std::vector<double>>();
        return m;
    }
};

/// Stochastic minimization of E_i ||Zhat(mu, Z + sigma_i eps, i) - Z||^2 with
/// i drawn uniformly per sample; reports loss per epoch.
inline std::pair<DiffusionModel, TrainLog> train_diffusion(const std::vector<LatentSeq>& data,
                                                           const NoiseSchedule& sched,
                                                           const DiffTrainConfig& cfg) {
    if (data.empty()) throw ContractError("train_diffusion on empty data");
    sched.validate();
    const Shape& ds = data.front().data.shape();
    for (const auto& seq : data)
        if (seq.data.shape() != ds) throw ContractError("latent sequences must share a shape");

    DiffusionModel model;
    model.sched = sched;
    if (cfg.normalize) model.norm = LatentNorm::fit(data);

    std::vector<Tensor> normed;
    normed.reserve(data.size());
    for (const auto& seq : data) normed.push_back(model.norm.apply(seq.data));

    DenoiserConfig ncfg;
    ncfg.latent = {ds[0], ds[1], ds[2]};
    ncfg.n_len = ds[3];
    ncfg.n_mu = data.front().params.mu.size();
    ncfg.widths = cfg.widths;
    ncfg.emb_dim = cfg.emb_dim;
    model.net = DenoiserModel(ncfg, cfg.seed);

    AdamConfig acfg;
    acfg.lr = cfg.lr;
    acfg.warmup_steps = 100;
    Adam opt(model.net.params(), acfg);
    Rng rng(cfg.seed + 17);

    // fixed evaluation subset: the per-epoch stochastic loss mixes random
    // noise levels, so progress is tracked on deterministic draws
    std::vector<LatentSeq> eval_set;
    for (std::size_t k = 0; k < data.size() && eval_set.size() < 32; k += std::max<std::size_t>(1, data.size() / 32)) {
        LatentSeq e;
        e.params = data[k].params;
        e.data = normed[k];
        eval_set.push_back(std::move(e));
    }
    DenoiseFn eval_fn = [&model](const Params& mu, const Tensor& z, std::size_t i) {
        return model.net.forward(mu, z, model.sched.sigma(i));
    };

    TrainLog log;
    std::vector<std::size_t> order(data.size());
    std::iota(order.begin(), order.end(), 0);

    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_index(i)]);

        double epoch_loss = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
            const std::size_t stop = std::min(start + cfg.batch, order.size());
            model.net.params().zero_grad();
            Tape tape;
            Tensor loss;
            for (std::size_t b = start; b < stop; ++b) {
                const auto& seq = data[order[b]];
                const std::size_t level = 1 + rng.uniform_index(sched.n());
                Tensor noisy = forward_diffuse(normed[order[b]], level, sched, rng);
                Tensor est = model.net.forward(seq.params, noisy, sched.sigma(level));
                Tensor diff = sub(est, normed[order[b]]);
                Tensor l = mean(mul(diff, diff));
                loss = loss.defined() ? add(loss, l) : l;
            }
            loss = scale(loss, 1.0 / static_cast<double>(stop - start));
            if (!std::isfinite(loss.value())) throw NumericError("diffusion loss diverged");
            tape.backward(loss);
            opt.step();
            epoch_loss += loss.value();
            ++batches;
        }
        epoch_loss /= static_cast<double>(batches);
        Rng eval_rng(cfg.seed + 999); // same draws every epoch
        const double probe = diffusion_objective(eval_fn, eval_set, sched, eval_rng, 2);
        log.rows.push_back({epoch, epoch_loss, probe});
        if (cfg.verbose)
            std::fprintf(stderr, "[diffusion] epoch %zu loss %.4e probe %.4e\n", epoch,
                         epoch_loss, probe);
    }
    return {std::move(model), std::move(log)};
}

} // namespace flowgen
