#pragma once

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "flowgen/errors.hpp"
#include "flowgen/rng.hpp"
#include "flowgen/tensor.hpp"
#include "flowgen/tensor_io.hpp"

namespace flowgen {

/// Named trainable tensors of one model, in registration order. The order
/// defines optimizer-state pairing and checkpoint layout.
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor t) {
        for (auto& [n, p] : params_)
            if (n == name) throw ContractError("duplicate parameter name " + name);
        t.set_requires_grad(true);
        params_.emplace_back(name, std::move(t));
        return params_.back().second;
    }

    std::vector<std::pair<std::string, Tensor>>& items() { return params_; }
    const std::vector<std::pair<std::string, Tensor>>& items() const { return params_; }

    Tensor& get(const std::string& name) {
        for (auto& [n, p] : params_)
            if (n == name) return p;
        throw ContractError("unknown parameter " + name);
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& [name, p] : params_) n += p.size();
        return n;
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

    void save(const std::filesystem::path& dir) const {
        std::filesystem::create_directories(dir);
        for (const auto& [name, p] : params_)
            atomic_write(dir / (name + ".ptg"), [&](std::ostream& os) { ptg::write(os, p); });
    }

    void load(const std::filesystem::path& dir) {
        for (auto& [name, p] : params_) {
            const auto file = dir / (name + ".ptg");
            if (!std::filesystem::exists(file))
                throw MissingArtifactError("checkpoint tensor " + file.string());
            Tensor t = ptg::load(file);
            if (t.shape() != p.shape())
                throw FormatError("checkpoint shape mismatch for " + name + ": expected " +
                                  shape_str(p.shape()) + ", file has " + shape_str(t.shape()));
            p.raw() = t.raw();
        }
    }

private:
    std::vector<std::pair<std::string, Tensor>> params_;
};

namespace init {

/// Kaiming-style fan-in scaled normal init.
inline Tensor he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
    Tensor t(std::move(shape));
    const double s = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.raw()) v = rng.normal(0.0, s);
    return t;
}

} // namespace init

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::size_t warmup_steps = 0; // linear lr ramp over the first steps
};

/// Adam over a ParamStore. Deterministic: state arrays follow registration order.
class Adam {
public:
    explicit Adam(ParamStore& params, AdamConfig cfg = {}) : params_(&params), cfg_(cfg) {
        for (auto& [name, p] : params.items()) {
            m_.emplace_back(p.size(), 0.0);
            v_.emplace_back(p.size(), 0.0);
        }
    }

    void step() {
        ++t_;
        double lr = cfg_.lr;
        if (cfg_.warmup_steps > 0 && t_ <= static_cast<long>(cfg_.warmup_steps))
            lr *= static_cast<double>(t_) / static_cast<double>(cfg_.warmup_steps);
        const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
        std::size_t pi = 0;
        for (auto& [name, p] : params_->items()) {
            const auto& g = p.grad();
            auto& data = p.raw();
            auto& m = m_[pi];
            auto& v = v_[pi];
            for (std::size_t i = 0; i < data.size(); ++i) {
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
                data[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
            }
            ++pi;
        }
    }

    void set_lr(double lr) { cfg_.lr = lr; }
    double lr() const { return cfg_.lr; }

private:
    ParamStore* params_;
    AdamConfig cfg_;
    std::vector<std::vector<double>> m_, v_;
    long t_ = 0;
};

/// Affine layer y = x W + b on rank-2 inputs [N, in].
struct Linear {
    Tensor w, b;

    Linear() = default;
    Linear(ParamStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng) {
        w = ps.add(name + ".w", init::he_normal(Shape{in, out}, in, rng));
        b = ps.add(name + ".b", Tensor(Shape{out}));
    }

    Tensor forward(const Tensor& x) const { return add(matmul(x, w), b); }
};

/// MLP with GELU between affine layers and optional residual skip
/// (applied when input and output widths agree).
struct Mlp {
    std::vector<Linear> layers;
    bool residual = false;

    Mlp() = default;
    Mlp(ParamStore& ps, const std::string& name, const std::vector<std::size_t>& widths,
        Rng& rng, bool residual_skip = false)
        : residual(residual_skip) {
        if (widths.size() < 2) throw ContractError("MLP needs at least input and output widths");
        for (std::size_t i = 0; i + 1 < widths.size(); ++i)
            layers.emplace_back(ps, name + ".l" + std::to_string(i), widths[i], widths[i + 1], rng);
    }

    Tensor forward(const Tensor& x) const {
        Tensor h = x;
        for (std::size_t i = 0; i < layers.size(); ++i) {
            h = layers[i].forward(h);
            if (i + 1 < layers.size()) h = gelu(h);
        }
        if (residual) {
            if (x.shape() != h.shape())
                throw DimError("residual MLP requires matching input/output widths");
            h = add(h, x);
        }
        return h;
    }

    /// Shrink the output layer so the whole map starts near zero (keeps deep
    /// residual stacks near-identity at init).
    void scale_last_layer(double c) {
        for (auto& v : layers.back().w.raw()) v *= c;
    }

    std::size_t in_width() const { return layers.front().w.extent(0); }
    std::size_t out_width() const { return layers.back().w.extent(1); }
};

/// 3x3-style conv layer wrapper storing weight [Fh,Fw,Cin,K] and bias [K].
struct ConvLayer {
    Tensor w, b;

    ConvLayer() = default;
    ConvLayer(ParamStore& ps, const std::string& name, std::size_t fh, std::size_t fw,
              std::size_t cin, std::size_t k, Rng& rng) {
        w = ps.add(name + ".w", init::he_normal(Shape{fh, fw, cin, k}, fh * fw * cin, rng));
        b = ps.add(name + ".b", Tensor(Shape{k}));
    }

    Tensor forward(const Tensor& x) const { return conv2d(x, w, b); }
};

/// Per-channel affine normalization constants (z-score over a training split).
struct ChannelNorm {
    std::vector<double> mean, stddev;

    bool empty() const { return mean.empty(); }

    /// Normalize the last axis (channels) of a plain tensor; not differentiable
    /// on purpose: applied to data entering or leaving the trainable path.
    Tensor apply(const Tensor& x) const {
        const std::size_t c = x.shape().back();
        if (c != mean.size()) throw DimError("channel-norm width mismatch");
        Tensor out(x.shape(), x.raw());
        auto& d = out.raw();
        for (std::size_t i = 0; i < d.size(); ++i) {
            const std::size_t ch = i % c;
            d[i] = (d[i] - mean[ch]) / stddev[ch];
        }
        return out;
    }

    Tensor invert(const Tensor& x) const {
        const std::size_t c = x.shape().back();
        if (c != mean.size()) throw DimError("channel-norm width mismatch");
        Tensor out(x.shape(), x.raw());
        auto& d = out.raw();
        for (std::size_t i = 0; i < d.size(); ++i) {
            const std::size_t ch = i % c;
            d[i] = d[i] * stddev[ch] + mean[ch];
        }
        return out;
    }

    /// Differentiable denormalization for use inside guidance paths.
    Tensor invert_traced(const Tensor& x) const {
        const std::size_t c = x.shape().back();
        if (c != mean.size()) throw DimError("channel-norm width mismatch");
        Tensor sd(Shape{c}), mn(Shape{c});
        for (std::size_t i = 0; i < c; ++i) {
            sd.raw()[i] = stddev[i];
            mn.raw()[i] = mean[i];
        }
        return add(mul(x, sd), mn);
    }

    /// Fit per-channel mean/std over a set of tensors whose last axis is channels.
    static ChannelNorm fit(const std::vector<Tensor>& fields) {
        if (fields.empty()) throw ContractError("channel-norm fit on empty set");
        const std::size_t c = fields.front().shape().back();
        ChannelNorm n;
        n.mean.assign(c, 0.0);
        n.stddev.assign(c, 0.0);
        std::size_t count = 0;
        for (const auto& f : fields) {
            const auto& d = f.raw();
            for (std::size_t i = 0; i < d.size(); ++i) n.mean[i % c] += d[i];
            count += f.size() / c;
        }
        for (auto& m : n.mean) m /= static_cast<double>(count);
        for (const auto& f : fields) {
            const auto& d = f.raw();
            for (std::size_t i = 0; i < d.size(); ++i) {
                const double dv = d[i] - n.mean[i % c];
                n.stddev[i % c] += dv * dv;
            }
        }
        for (auto& s : n.stddev) {
            s = std::sqrt(s / static_cast<double>(count));
            if (s < 1e-12) s = 1.0; // constant channel: leave values centered only
        }
        return n;
    }
};

} // namespace flowgen
