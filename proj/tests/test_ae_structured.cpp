#include <catch2/catch_amalgamated.hpp>

#include "flowgen/ae_structured.hpp"
#include "flowgen/synthetic.hpp"

#include "test_support.hpp"

#include <filesystem>

using namespace flowgen;
using fgtest::gradcheck;
using fgtest::random_tensor;
namespace fs = std::filesystem;

TEST_CASE("encode_structured pooling ladder") {
    SECTION("constant field stays constant through any depth") {
        Tensor u = Tensor::full(Shape{16, 16, 3}, 4.25);
        Tensor z = encode_structured(u, {2, 2, 3});
        REQUIRE(z.shape() == Shape{2, 2, 3});
        for (double v : z.raw()) CHECK(v == Catch::Approx(4.25).margin(1e-14));
    }
    SECTION("s = 0 is the identity") {
        fgtest::Rng rng(1);
        Tensor u = random_tensor(Shape{8, 8, 2}, rng);
        Tensor z = encode_structured(u, {8, 8, 2});
        CHECK(z.raw() == u.raw());
    }
    SECTION("256x256x3 -> 32x32x3") {
        Tensor u = Tensor::zeros(Shape{256, 256, 3});
        CHECK(encode_structured(u, {32, 32, 3}).shape() == Shape{32, 32, 3});
    }
    SECTION("non-dyadic ratio rejected") {
        Tensor u = Tensor::zeros(Shape{12, 12, 1});
        CHECK_THROWS_AS(encode_structured(u, {4, 4, 1}), DimError); // ratio 3
        CHECK_THROWS_AS(encode_structured(u, {5, 5, 1}), DimError);
        CHECK_THROWS_AS(encode_structured(u, {4, 4, 2}), DimError); // channel change
    }
}

TEST_CASE("encode_structured is exactly linear") {
    fgtest::Rng rng(2);
    Tensor u = random_tensor(Shape{8, 8, 2}, rng);
    Tensor w = random_tensor(Shape{8, 8, 2}, rng);
    const double a = 1.7, b = -0.3;
    LatentShape latent{2, 2, 2};
    Tensor combo(u.shape());
    for (std::size_t i = 0; i < u.size(); ++i)
        combo.raw()[i] = a * u.raw()[i] + b * w.raw()[i];
    Tensor lhs = encode_structured(combo, latent);
    Tensor zu = encode_structured(u, latent);
    Tensor zw = encode_structured(w, latent);
    for (std::size_t i = 0; i < lhs.size(); ++i)
        CHECK(lhs.raw()[i] == Catch::Approx(a * zu.raw()[i] + b * zw.raw()[i]).margin(1e-14));
}

TEST_CASE("decoder shapes, zero parameters, determinism") {
    CnnDecoderConfig cfg;
    cfg.latent = {4, 4, 3};
    cfg.nh = 16;
    cfg.nw = 16;
    cfg.nv = 2;
    cfg.widths = {8};
    CnnDecoder dec(cfg, 7);

    fgtest::Rng rng(3);
    Tensor z = random_tensor(Shape{4, 4, 3}, rng);
    Tensor out = dec.forward(z);
    REQUIRE(out.shape() == Shape{16, 16, 2});

    Tensor out2 = dec.forward(z);
    CHECK(out.raw() == out2.raw()); // deterministic

    for (auto& [name, p] : dec.params().items())
        std::fill(p.raw().begin(), p.raw().end(), 0.0);
    Tensor zero_out = dec.forward(z);
    for (double v : zero_out.raw()) CHECK(v == 0.0);

    CHECK_THROWS_AS(dec.forward(Tensor::zeros(Shape{4, 4, 1})), DimError);
}

TEST_CASE("paper-scale decoder output shape 32x32x3 -> 256x256x3") {
    CnnDecoderConfig cfg;
    cfg.latent = {32, 32, 3};
    cfg.nh = 256;
    cfg.nw = 256;
    cfg.nv = 3;
    cfg.widths = {4, 4}; // thin so the test stays fast
    CnnDecoder dec(cfg, 1);
    Tensor z = Tensor::zeros(Shape{32, 32, 3});
    CHECK(dec.forward(z).shape() == Shape{256, 256, 3});
}

TEST_CASE("decoder gradient check vs finite differences") {
    CnnDecoderConfig cfg;
    cfg.latent = {2, 2, 2};
    cfg.nh = 4;
    cfg.nw = 4;
    cfg.nv = 1;
    cfg.widths = {3};
    CnnDecoder dec(cfg, 11);

    fgtest::Rng rng(5);
    Tensor z = random_tensor(Shape{2, 2, 2}, rng);
    Tensor cot = random_tensor(Shape{4, 4, 1}, rng);

    // w.r.t. the latent input
    CHECK(gradcheck([&](const Tensor& t) { return sum(mul(dec.forward(t), cot)); }, z) < 1e-5);

    // w.r.t. a decoder weight: perturb through the ParamStore
    Tensor& w0 = dec.params().get("stage0.w");
    w0.zero_grad();
    std::vector<double> analytic;
    {
        Tape tape;
        Tensor loss = sum(mul(dec.forward(z), cot));
        tape.backward(loss);
        analytic = w0.grad();
    }
    auto numeric = fgtest::fd_gradient(
        [&](const Tensor& probe) {
            Tensor& wref = dec.params().get("stage0.w");
            auto saved = wref.raw();
            wref.raw() = probe.raw();
            const double v = sum(mul(dec.forward(z), cot)).value();
            wref.raw() = saved;
            return v;
        },
        w0);
    CHECK(fgtest::rel_err(analytic, numeric) < 1e-5);
}

TEST_CASE("training on constant snapshots reaches near-zero error") {
    // constant fields are exactly representable by bias terms
    Dataset ds;
    ds.kind = Discretization::Structured;
    for (int k = 0; k < 3; ++k) {
        MicroSequence seq;
        seq.params = Params(1.0 + 0.5 * k);
        for (int t = 0; t < 2; ++t)
            seq.snapshots.push_back(MicroState::structured(Tensor::full(Shape{8, 8, 2}, 0.75)));
        ds.sequences.push_back(std::move(seq));
        ds.splits.push_back(k < 2 ? Split::Train : Split::Test);
    }

    AeTrainConfig cfg;
    cfg.widths = {6};
    cfg.epochs = 3000;
    cfg.batch = 4;
    cfg.lr = 2e-3;
    cfg.seed = 3;
    cfg.normalize = false; // constant channels have zero variance
    auto [ae, log] = train_structured_ae(ds, {2, 2, 2}, cfg);

    Tensor u = ds.sequences[2].snapshots[0].field;
    CHECK(fgtest::rel_l2(ae.decode(ae.encode(u)), u) < 1e-2);

    // training loss is non-increasing up to 5% jitter (smoothed)
    REQUIRE(log.rows.size() == cfg.epochs);
    std::vector<double> curve;
    for (const auto& row : log.rows) {
        curve.push_back(row.train_loss);
        CHECK(std::isfinite(row.val_err)); // validation reported per epoch
    }
    CHECK(fgtest::loss_curve_ok(curve));

    CHECK_THROWS_AS(train_structured_ae(Dataset{}, {2, 2, 2}, cfg), ContractError);
}

TEST_CASE("checkpoint round-trip reproduces outputs bit-exactly") {
    CnnDecoderConfig dcfg;
    dcfg.latent = {2, 2, 3};
    dcfg.nh = 8;
    dcfg.nw = 8;
    dcfg.nv = 3;
    dcfg.widths = {5};
    StructuredAe ae;
    ae.latent = dcfg.latent;
    ae.decoder = CnnDecoder(dcfg, 21);
    ae.norm.mean = {0.1, -0.2, 0.0};
    ae.norm.stddev = {1.5, 0.7, 2.0};

    const auto dir = fs::temp_directory_path() / "flowgen_ae_ckpt";
    fs::remove_all(dir);
    ae.save(dir);
    StructuredAe back = StructuredAe::load(dir);

    fgtest::Rng rng(9);
    Tensor u = random_tensor(Shape{8, 8, 3}, rng);
    Tensor z = ae.encode(u);
    CHECK(back.encode(u).raw() == z.raw());
    CHECK(back.decode(z).raw() == ae.decode(z).raw());
}
