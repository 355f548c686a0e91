#include <catch2/catch_amalgamated.hpp>

#include "flowgen/mesh.hpp"
#include "flowgen/synthetic.hpp"

#include "test_support.hpp"

#include <cmath>
#include <complex>
#include <filesystem>
#include <fstream>
#include <numeric>

using namespace flowgen;
namespace fs = std::filesystem;

namespace {

// naive DFT power per bin; independent oracle for generator spectra
std::vector<double> dft_power(const std::vector<double>& sig) {
    const std::size_t n = sig.size();
    std::vector<double> power(n / 2 + 1, 0.0);
    for (std::size_t k = 0; k <= n / 2; ++k) {
        std::complex<double> acc(0, 0);
        for (std::size_t i = 0; i < n; ++i)
            acc += sig[i] * std::polar(1.0, -2.0 * M_PI * double(k) * double(i) / double(n));
        power[k] = std::norm(acc);
    }
    return power;
}

Dataset small_wake_dataset() {
    auto mesh = make_wake_mesh(12, 6, 99);
    Dataset ds;
    ds.kind = Discretization::Unstructured;
    ds.mesh = mesh;
    ds.sequences.push_back(gen_synthetic_wake(mesh, Params(1.0), 4, 1));
    ds.sequences.push_back(gen_synthetic_wake(mesh, Params(2.0), 4, 2));
    ds.splits = {Split::Train, Split::Test};
    return ds;
}

} // namespace

TEST_CASE("dataset save/load round-trip is bit-exact") {
    Dataset ds = small_wake_dataset();
    ds.obs_channel_names = {"probe"};
    ds.obs_channels["probe"] = {Tensor(Shape{2}, {1.5, -0.25}), Tensor(Shape{2}, {0.5, 0.75})};

    const auto dir = fs::temp_directory_path() / "flowgen_ds_roundtrip";
    fs::remove_all(dir);
    save_dataset(ds, dir);
    Dataset back = load_dataset(dir);

    REQUIRE(back.size() == ds.size());
    CHECK(back.kind == ds.kind);
    for (std::size_t k = 0; k < ds.size(); ++k) {
        CHECK(back.sequences[k].params.mu == ds.sequences[k].params.mu);
        CHECK(back.splits[k] == ds.splits[k]);
        REQUIRE(back.sequences[k].n_len() == ds.sequences[k].n_len());
        for (std::size_t t = 0; t < ds.sequences[k].n_len(); ++t)
            CHECK(back.sequences[k].snapshots[t].field.raw() ==
                  ds.sequences[k].snapshots[t].field.raw());
    }
    CHECK(back.mesh->centroids.raw() == ds.mesh->centroids.raw());
    CHECK(back.mesh->edges == ds.mesh->edges);
    CHECK(back.obs_channels.at("probe")[0].raw() == std::vector<double>{1.5, -0.25});
}

TEST_CASE("dataset load rejects truncation and inconsistent sidecar") {
    Dataset ds = small_wake_dataset();
    const auto dir = fs::temp_directory_path() / "flowgen_ds_bad";
    fs::remove_all(dir);
    save_dataset(ds, dir);

    SECTION("truncated sequence file") {
        auto file = dir / "seq_0.ptg";
        const auto size = fs::file_size(file);
        fs::resize_file(file, size / 2);
        CHECK_THROWS_AS(load_dataset(dir), FormatError);
    }
    SECTION("sidecar n_len disagrees with payload") {
        nlohmann::json meta;
        {
            std::ifstream is(dir / "meta.json");
            is >> meta;
        }
        meta["n_len"] = 9; // payload has 4
        {
            std::ofstream os(dir / "meta.json");
            os << meta.dump(2);
        }
        CHECK_THROWS_AS(load_dataset(dir), FormatError);
    }
    SECTION("split duplication rejected") {
        Dataset dup = small_wake_dataset();
        dup.sequences[1] = dup.sequences[0];
        CHECK_THROWS_AS(save_dataset(dup, dir / "dup"), ContractError);
    }
}

TEST_CASE("wake generator: probe frequency, determinism, single snapshot") {
    auto mesh = make_wake_mesh(40, 12, 7);

    SECTION("dominant probe frequency is 0.05 cycles/step at mu1=1") {
        const std::size_t n_len = 80;
        MicroSequence seq = gen_synthetic_wake(mesh, Params(1.0), n_len, 3);
        // probe the v-component at a cell in the active wake (x ~ 3, y ~ 0)
        std::size_t probe = 0;
        double best = 1e30;
        for (std::size_t i = 0; i < mesh->cell_count(); ++i) {
            const double x = mesh->centroids.raw()[2 * i], y = mesh->centroids.raw()[2 * i + 1];
            const double d = (x - 3.0) * (x - 3.0) + y * y;
            if (d < best) {
                best = d;
                probe = i;
            }
        }
        std::vector<double> sig(n_len);
        for (std::size_t t = 0; t < n_len; ++t) sig[t] = seq.snapshots[t].field.at({probe, 1});
        const double m = std::accumulate(sig.begin(), sig.end(), 0.0) / double(n_len);
        for (auto& v : sig) v -= m;
        auto power = dft_power(sig);
        std::size_t peak = 1;
        for (std::size_t k = 2; k < power.size(); ++k)
            if (power[k] > power[peak]) peak = k;
        CHECK(double(peak) / double(n_len) == Catch::Approx(0.05).margin(1.0 / n_len / 2 + 1e-12));
    }
    SECTION("n_len = 1 gives a single snapshot") {
        MicroSequence seq = gen_synthetic_wake(mesh, Params(1.5), 1, 3);
        CHECK(seq.n_len() == 1);
    }
    SECTION("same seed gives identical sequences") {
        MicroSequence a = gen_synthetic_wake(mesh, Params(1.3), 5, 42);
        MicroSequence b = gen_synthetic_wake(mesh, Params(1.3), 5, 42);
        for (std::size_t t = 0; t < 5; ++t)
            CHECK(a.snapshots[t].field.raw() == b.snapshots[t].field.raw());
        MicroSequence c = gen_synthetic_wake(mesh, Params(1.3), 5, 43);
        CHECK(a.snapshots[0].field.raw() != c.snapshots[0].field.raw());
    }
    SECTION("contract errors") {
        CHECK_THROWS_AS(gen_synthetic_wake(mesh, Params(0.1), 4, 1), ContractError);
        auto mesh3d = std::make_shared<Mesh>();
        mesh3d->centroids = Tensor(Shape{4, 3});
        CHECK_THROWS_AS(gen_synthetic_wake(mesh3d, Params(1.0), 4, 1), ContractError);
    }
}

TEST_CASE("channel generator: spectrum peak, mean profile, determinism") {
    SECTION("streamwise spectrum peaks at k_p within one bin") {
        for (double mu1 : {1.0, 2.0}) {
            MicroSequence seq = gen_synthetic_channel(32, 64, Params(mu1), 1, 5);
            const auto& f = seq.snapshots[0].field;
            const std::size_t nh = 32, nw = 64;
            std::vector<double> avg(nw / 2 + 1, 0.0);
            for (std::size_t iy = 4; iy < nh - 4; ++iy) {
                std::vector<double> sig(nw);
                double m = 0.0;
                for (std::size_t ix = 0; ix < nw; ++ix) m += f.at({iy, ix, 0});
                m /= double(nw);
                for (std::size_t ix = 0; ix < nw; ++ix) sig[ix] = f.at({iy, ix, 0}) - m;
                auto p = dft_power(sig);
                for (std::size_t k = 0; k < avg.size(); ++k) avg[k] += p[k];
            }
            std::size_t peak = 1;
            for (std::size_t k = 2; k < avg.size(); ++k)
                if (avg[k] > avg[peak]) peak = k;
            const double kp = 4.0 * mu1;
            CHECK(std::abs(double(peak) - kp) <= 1.0);
        }
    }
    SECTION("ensemble mean matches m(y; mu) within 3 standard errors") {
        const double mu1 = 1.5;
        const std::size_t nh = 16, nw = 16, n_real = 160;
        const std::size_t iy = 5;
        const double y = (iy + 0.5) / double(nh) * 2.0;
        const double target = mu1 * y * (2.0 - y) / 10.0;
        std::vector<double> means;
        for (std::size_t r = 0; r < n_real; ++r) {
            MicroSequence seq = gen_synthetic_channel(nh, nw, Params(mu1), 1, 1000 + r);
            double m = 0.0;
            for (std::size_t ix = 0; ix < nw; ++ix) m += seq.snapshots[0].field.at({iy, ix, 0});
            means.push_back(m / double(nw));
        }
        double mbar = 0.0;
        for (double v : means) mbar += v;
        mbar /= double(n_real);
        double var = 0.0;
        for (double v : means) var += (v - mbar) * (v - mbar);
        var /= double(n_real - 1);
        const double se = std::sqrt(var / double(n_real));
        CHECK(std::abs(mbar - target) <= 3.0 * se + 1e-12);
    }
    SECTION("same seed identical, contract errors") {
        MicroSequence a = gen_synthetic_channel(8, 16, Params(2.0), 3, 9);
        MicroSequence b = gen_synthetic_channel(8, 16, Params(2.0), 3, 9);
        for (std::size_t t = 0; t < 3; ++t)
            CHECK(a.snapshots[t].field.raw() == b.snapshots[t].field.raw());
        CHECK_THROWS_AS(gen_synthetic_channel(12, 16, Params(2.0), 3, 9), ContractError);
        CHECK_THROWS_AS(gen_synthetic_channel(16, 16, Params(9.0), 3, 9), ContractError);
    }
}

TEST_CASE("structured/unstructured conversion preserves values at coinciding points") {
    const std::size_t nh = 4, nw = 5, nv = 2;
    fgtest::Rng rng(13);
    Tensor grid = fgtest::random_tensor(Shape{nh, nw, nv}, rng);

    auto mesh = std::make_shared<Mesh>();
    mesh->centroids = Tensor(Shape{nh * nw, 2});
    for (std::size_t i = 0; i < nh; ++i)
        for (std::size_t j = 0; j < nw; ++j) {
            mesh->centroids.raw()[(i * nw + j) * 2 + 0] = double(j);
            mesh->centroids.raw()[(i * nw + j) * 2 + 1] = double(i);
        }
    Tensor cells(Shape{nh * nw, nv}, grid.raw());
    MicroState u = MicroState::unstructured(cells, mesh);
    MicroState s = MicroState::structured(grid);
    CHECK(u.field.raw() == s.field.raw());
}

TEST_CASE("mesh validation rejects self-loops and bad indices") {
    Mesh m;
    m.centroids = Tensor(Shape{3, 2});
    m.edges = {{0, 0}};
    CHECK_THROWS_AS(m.validate(), ContractError);
    m.edges = {{0, 7}};
    CHECK_THROWS_AS(m.validate(), ContractError);
}
