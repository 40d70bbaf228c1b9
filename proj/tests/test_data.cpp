#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "rrl/data.hpp"

using namespace rrl;
namespace fs = std::filesystem;

namespace {

double pearson(const std::vector<float>& a, const std::vector<float>& b) {
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double cov = 0, va = 0, vb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        cov += (a[i] - ma) * (b[i] - mb);
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
    }
    if (va == 0 || vb == 0) return 0;
    return cov / std::sqrt(va * vb);
}

struct TempDir {
    fs::path path;
    TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("generate_pairs: balance, determinism, range") {
    auto pairs = generate_pairs(123, 100);
    REQUIRE(pairs.size() == 100);
    int pos = 0;
    for (const auto& p : pairs) {
        pos += p.label;
        REQUIRE(p.a.size() == 64 * 64);
        REQUIRE(p.b.size() == 64 * 64);
        for (float v : p.a) {
            CHECK(v >= 0.f);
            CHECK(v <= 1.f);
        }
    }
    CHECK(pos == 50);

    auto again = generate_pairs(123, 100);
    for (size_t i = 0; i < pairs.size(); ++i) {
        CHECK(pairs[i].a == again[i].a);  // byte-identical
        CHECK(pairs[i].b == again[i].b);
        CHECK(pairs[i].label == again[i].label);
    }
    auto other = generate_pairs(124, 100);
    CHECK(pairs[0].a != other[0].a);

    CHECK_THROWS_AS(generate_pairs(1, 99), ConfigError);
}

TEST_CASE("matching pairs correlate more than non-matching ones") {
    auto pairs = generate_pairs(2024, 1000);
    double match_sum = 0, non_sum = 0;
    int match_n = 0, non_n = 0;
    for (const auto& p : pairs) {
        const double r = pearson(p.a, p.b);
        if (p.label) {
            match_sum += r;
            ++match_n;
        } else {
            non_sum += r;
            ++non_n;
        }
    }
    const double match_mean = match_sum / match_n;
    const double non_mean = non_sum / non_n;
    MESSAGE("mean Pearson: matching ", match_mean, ", non-matching ", non_mean);
    CHECK(match_mean > non_mean);
    CHECK(match_mean > 0.2);  // same scene through monotone remaps stays visibly correlated
}

TEST_CASE("augment preserves labels, shapes, range; geometry round-trips") {
    auto pairs = generate_pairs(55, 10);
    for (uint64_t seed = 0; seed < 20; ++seed) {
        const auto& p = pairs[seed % pairs.size()];
        auto aug = augment(p, seed);
        CHECK(aug.label == p.label);
        CHECK(aug.size == p.size);
        REQUIRE(aug.a.size() == p.a.size());
        for (float v : aug.a) {
            CHECK(v >= 0.f);
            CHECK(v <= 1.f);
        }

        // replicate the seeded draws: geometric code then the two contrasts
        Rng rng(seed);
        const int g = static_cast<int>(rng.below(6));
        const double ca = rng.uniform(0.8, 1.2);
        rng.uniform(0.8, 1.2);
        // undoing the geometry must reproduce the contrast-only patch
        auto undone = apply_geom(aug.a, p.size, inverse_geom(g));
        double mean = 0;
        for (float v : p.a) mean += v;
        mean /= static_cast<double>(p.a.size());
        for (size_t i = 0; i < undone.size(); ++i) {
            const float expect = static_cast<float>(std::min(1.0, std::max(0.0, mean + ca * (p.a[i] - mean))));
            CHECK(undone[i] == doctest::Approx(expect).epsilon(1e-6));
        }
    }
}

TEST_CASE("identity transform with unit contrast leaves a pair unchanged") {
    auto pairs = generate_pairs(77, 2);
    // geometric code 0 is the identity permutation
    CHECK(apply_geom(pairs[0].a, pairs[0].size, 0) == pairs[0].a);
    // unit contrast is the identity map (mean + 1.0*(x - mean))
    double mean = 0;
    for (float v : pairs[0].a) mean += v;
    mean /= static_cast<double>(pairs[0].a.size());
    for (float v : pairs[0].a) {
        const double c1 = mean + 1.0 * (v - mean);
        CHECK(static_cast<float>(c1) == doctest::Approx(v).epsilon(1e-7));
    }
    // a seed whose geometric draw is the identity keeps pixel POSITIONS fixed
    for (uint64_t seed = 0;; ++seed) {
        REQUIRE(seed < 100);
        Rng rng(seed);
        if (rng.below(6) != 0) continue;
        auto aug = augment(pairs[0], seed);
        // contrast is monotone about the mean: ordering of pixels is preserved
        for (size_t i = 1; i < aug.a.size(); ++i) {
            if (pairs[0].a[i] > pairs[0].a[i - 1])
                CHECK(aug.a[i] >= aug.a[i - 1]);
        }
        break;
    }
}

TEST_CASE("pgm round trip within quantization") {
    TempDir dir("rrl_pgm_test");
    auto pairs = generate_pairs(9, 2);
    const auto path = (dir.path / "x.pgm").string();
    write_pgm(path, pairs[0].a, 64, 64);
    int w = 0, h = 0;
    auto back = read_pgm(path, w, h);
    REQUIRE(w == 64);
    REQUIRE(h == 64);
    for (size_t i = 0; i < back.size(); ++i) CHECK(std::abs(back[i] - pairs[0].a[i]) <= 1.0f / 255.0f);
}

TEST_CASE("dataset round trip and validation errors") {
    TempDir dir("rrl_ds_test");
    auto pairs = generate_pairs(13, 6);
    write_dataset(dir.path.string(), pairs);

    auto idx = load_index(dir.path.string());
    REQUIRE(idx.records.size() == 6);
    CHECK(idx.positives == 3);
    CHECK(idx.negatives == 3);
    for (size_t i = 0; i < idx.records.size(); ++i) {
        auto p = load_pair(idx, i);
        CHECK(p.label == pairs[i].label);
        for (size_t j = 0; j < p.a.size(); ++j) CHECK(std::abs(p.a[j] - pairs[i].a[j]) <= 1.0f / 255.0f);
    }

    // empty index: no records, no error
    TempDir empty("rrl_ds_empty");
    std::ofstream(empty.path / "index.csv") << "path_a,path_b,label\n";
    auto eidx = load_index(empty.path.string());
    CHECK(eidx.records.empty());

    // malformed label names the line
    TempDir bad("rrl_ds_bad");
    std::ofstream(bad.path / "index.csv") << "path_a,path_b,label\na.pgm,b.pgm,2\n";
    try {
        load_index(bad.path.string());
        FAIL("expected DataError");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("line 2") != std::string::npos);
    }

    // missing file names the record
    TempDir missing("rrl_ds_missing");
    std::ofstream(missing.path / "index.csv") << "path_a,path_b,label\nnope_a.pgm,nope_b.pgm,1\n";
    auto midx = load_index(missing.path.string());
    CHECK_THROWS_AS(load_pair(midx, 0), DataError);

    // wrong-size image rejected
    TempDir small("rrl_ds_small");
    std::vector<float> tinypix(16 * 16, 0.5f);
    write_pgm((small.path / "s_a.pgm").string(), tinypix, 16, 16);
    write_pgm((small.path / "s_b.pgm").string(), tinypix, 16, 16);
    std::ofstream(small.path / "index.csv") << "path_a,path_b,label\ns_a.pgm,s_b.pgm,0\n";
    auto sidx = load_index(small.path.string());
    CHECK_THROWS_AS(load_pair(sidx, 0, 64), DataError);

    // bad header rejected
    TempDir hdr("rrl_ds_hdr");
    std::ofstream(hdr.path / "index.csv") << "a,b,c\n";
    CHECK_THROWS_AS(load_index(hdr.path.string()), DataError);
}
