#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "rrl/checkpoint.hpp"

using namespace rrl;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.input_size = 16;
    cfg.stage_channels = {4, 6, 8, 10, 12};
    cfg.init_seed = 97;
    return cfg;
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

struct TempFile {
    std::string path;
    explicit TempFile(const std::string& name) : path((fs::temp_directory_path() / name).string()) {}
    ~TempFile() { fs::remove(path); }
};

}  // namespace

TEST_CASE("save/load round-trips bit-exactly") {
    auto m = build_model<float>(tiny_cfg());
    // make running stats non-trivial so buffers are exercised
    m.enc[0].conv.bn.stats.running_mean[0] = 0.123f;
    m.enc[0].conv.bn.stats.running_var[1] = 1.75f;
    auto ck = snapshot(m);

    TempFile f("rrl_ck_roundtrip.bin");
    save_checkpoint(ck, f.path);
    auto back = load_checkpoint(f.path);

    CHECK(back.config.to_json() == ck.config.to_json());
    REQUIRE(back.tensors.size() == ck.tensors.size());
    for (size_t i = 0; i < ck.tensors.size(); ++i) {
        CHECK(back.tensors[i].name == ck.tensors[i].name);
        CHECK(back.tensors[i].shape == ck.tensors[i].shape);
        CHECK(back.tensors[i].data == ck.tensors[i].data);  // bit-exact
    }

    // loading into a model and re-saving reproduces identical bytes
    auto m2 = model_from_checkpoint(back);
    CHECK(m2.enc[0].conv.bn.stats.running_mean[0] == 0.123f);
    auto ck2 = snapshot(m2);
    TempFile f2("rrl_ck_roundtrip2.bin");
    save_checkpoint(ck2, f2.path);
    CHECK(slurp(f.path) == slurp(f2.path));
}

TEST_CASE("corrupt files are rejected with diagnostics") {
    auto m = build_model<float>(tiny_cfg());
    auto ck = snapshot(m);
    TempFile f("rrl_ck_corrupt.bin");
    save_checkpoint(ck, f.path);
    auto good = slurp(f.path);

    auto write_bytes = [&](std::vector<char> bytes) {
        std::ofstream out(f.path, std::ios::binary);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    };

    // bad magic
    auto bad = good;
    bad[0] = 'X';
    write_bytes(bad);
    try {
        load_checkpoint(f.path);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("bad magic") != std::string::npos);
    }

    // unsupported version
    bad = good;
    bad[4] = 9;
    write_bytes(bad);
    try {
        load_checkpoint(f.path);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("version") != std::string::npos);
    }

    // truncation names an offset
    bad.assign(good.begin(), good.begin() + static_cast<long>(good.size() / 2));
    write_bytes(bad);
    try {
        load_checkpoint(f.path);
        FAIL("expected IoError");
    } catch (const IoError& e) {
        CHECK(std::string(e.what()).find("truncated at offset") != std::string::npos);
    }

    // trailing garbage
    bad = good;
    bad.push_back(0);
    write_bytes(bad);
    CHECK_THROWS_AS(load_checkpoint(f.path), IoError);

    CHECK_THROWS_AS(load_checkpoint("/nonexistent/rrl.bin"), IoError);
}

TEST_CASE("prune drops exactly the auxiliary branches") {
    auto m = build_model<float>(tiny_cfg());
    auto ck = snapshot(m);
    auto pruned = prune(ck);

    CHECK(pruned.config.pruned());
    CHECK(pruned.scalar_count() < ck.scalar_count());
    for (const auto& t : pruned.tensors) {
        CHECK(t.name.rfind("decoder.", 0) != 0);
        CHECK(t.name.rfind("perceptual.", 0) != 0);
        if (t.name.rfind("head.", 0) == 0) CHECK(t.name.rfind("head.stage5.", 0) == 0);
    }
    // encoder, every interaction block, aggregation and the master head remain
    auto has_prefix = [&](const std::string& p) {
        for (const auto& t : pruned.tensors)
            if (t.name.rfind(p, 0) == 0) return true;
        return false;
    };
    CHECK(has_prefix("encoder.stage5."));
    for (int i = 1; i <= 5; ++i) CHECK(has_prefix("fil.stage" + std::to_string(i) + "."));
    CHECK(has_prefix("agg.stage5."));
    CHECK(has_prefix("head.stage5."));

    // retained tensors are bit-identical to the parent's
    for (const auto& t : pruned.tensors) {
        bool found = false;
        for (const auto& s : ck.tensors) {
            if (s.name == t.name) {
                CHECK(s.data == t.data);
                found = true;
                break;
            }
        }
        CHECK(found);
    }

    CHECK_THROWS_AS(prune(pruned), ConfigError);  // already pruned

    // pruned file is strictly smaller than its parent
    TempFile a("rrl_ck_full.bin"), b("rrl_ck_pruned.bin");
    save_checkpoint(ck, a.path);
    save_checkpoint(pruned, b.path);
    CHECK(fs::file_size(b.path) < fs::file_size(a.path));

    // pruned checkpoint loads into a working model
    auto mp = model_from_checkpoint(load_checkpoint(b.path));
    CHECK(mp.cfg.pruned());
    CHECK(!mp.has_decoder());
}

TEST_CASE("loading rejects tensors that do not fit the topology") {
    auto m = build_model<float>(tiny_cfg());
    auto ck = snapshot(m);

    auto missing = ck;
    missing.tensors.erase(missing.tensors.begin());
    CHECK_THROWS_AS(model_from_checkpoint(missing), IoError);

    auto extra = ck;
    extra.tensors.push_back({"stray.weight", {2}, {1.f, 2.f}});
    CHECK_THROWS_AS(model_from_checkpoint(extra), IoError);

    auto reshaped = ck;
    reshaped.tensors[0].shape = {1, static_cast<int>(reshaped.tensors[0].data.size()), 1, 1};
    CHECK_THROWS_AS(model_from_checkpoint(reshaped), IoError);
}
