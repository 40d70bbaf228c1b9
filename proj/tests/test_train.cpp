#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "rrl/train.hpp"

using namespace rrl;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_cfg() {
    ModelConfig cfg;
    cfg.input_size = 16;
    cfg.stage_channels = {4, 6, 8, 10, 12};
    cfg.batch_size = 4;
    cfg.epochs = 2;
    cfg.init_seed = 7;
    cfg.data_seed = 8;
    return cfg;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::vector<char> slurp(const std::string& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("adam drives a quadratic to its minimum") {
    ParamStoreT<float> store;
    auto w = store.add("w", {1}, {10.f}, true);
    Adam opt;
    opt.lr = 0.1;
    opt.init(store);
    for (int i = 0; i < 300; ++i) {
        auto loss = square(affine(w, 1.f, -3.f));  // (w-3)^2
        backward(loss);
        opt.step(store);
        store.zero_grad();
    }
    CHECK(w->data[0] == doctest::Approx(3.0f).epsilon(1e-2));
}

TEST_CASE("train_step keeps the loss-report identity and lowers a fixed-batch loss") {
    auto cfg = tiny_cfg();
    auto model = build_model<float>(cfg);
    Adam opt;
    opt.lr = 1e-3;
    opt.init(model.store);

    auto pairs = generate_pairs(21, 8, cfg.input_size);
    std::vector<const PatchPair*> batch;
    for (const auto& p : pairs) batch.push_back(&p);
    auto a = batch_tensor(batch, true);
    auto b = batch_tensor(batch, false);
    auto y = label_tensor(batch);

    double first = 0, last = 0;
    for (int step = 0; step < 30; ++step) {
        auto r = train_step(model, opt, a, b, y);
        // total = metric + alpha * (recon1 + recon2) within 1e-6 every step
        CHECK(std::abs(r.total - (r.metric + cfg.alpha * (r.recon[0] + r.recon[1]))) <= 1e-6);
        CHECK(r.per_head.count("stage5") == 1);
        CHECK(r.per_head.count("module3") == 1);
        if (step == 0) first = r.total;
        last = r.total;
    }
    CHECK(last < first);
}

TEST_CASE("training is byte-deterministic and logs per-epoch loss rows") {
    TempDir dir("rrl_train_det");
    auto pairs = generate_pairs(33, 24, 16);
    write_dataset((dir.path / "data").string(), pairs);

    auto cfg = tiny_cfg();
    const auto ck1 = (dir.path / "run1.ckpt").string();
    const auto ck2 = (dir.path / "run2.ckpt").string();
    auto r1 = train(cfg, (dir.path / "data").string(), ck1, (dir.path / "run1.csv").string());
    auto r2 = train(cfg, (dir.path / "data").string(), ck2, (dir.path / "run2.csv").string());

    CHECK(slurp(ck1) == slurp(ck2));  // identical bytes end to end
    CHECK(slurp((dir.path / "run1.csv").string()) == slurp((dir.path / "run2.csv").string()));

    // a different init seed must change the checkpoint
    auto cfg2 = cfg;
    cfg2.init_seed += 1;
    const auto ck3 = (dir.path / "run3.ckpt").string();
    train(cfg2, (dir.path / "data").string(), ck3, "");
    CHECK(slurp(ck1) != slurp(ck3));

    // csv header and row count
    std::ifstream csv((dir.path / "run1.csv").string());
    std::string line;
    std::getline(csv, line);
    CHECK(line == "epoch,total,metric,recon1,recon2");
    int rows = 0;
    while (std::getline(csv, line))
        if (!line.empty()) ++rows;
    CHECK(rows == cfg.epochs);
    CHECK(r1.epoch_reports.size() == static_cast<size_t>(cfg.epochs));

    // the perceptual stand-in is untouched by training
    auto fresh = build_model<float>(cfg);
    auto trained = load_checkpoint(ck1);
    for (const auto& t : trained.tensors) {
        if (t.name.rfind("perceptual.", 0) != 0) continue;
        bool matched = false;
        for (const auto& p : fresh.store.params) {
            if (p.name == t.name) {
                CHECK(p.value->data == t.data);
                matched = true;
            }
        }
        CHECK(matched);
    }
}

TEST_CASE("pruned checkpoint scores bit-identically to the full model") {
    TempDir dir("rrl_prune_eq");
    auto pairs = generate_pairs(44, 16, 16);
    write_dataset((dir.path / "data").string(), pairs);
    auto cfg = tiny_cfg();
    cfg.epochs = 1;
    auto result = train(cfg, (dir.path / "data").string(), "", "");

    auto full_model = model_from_checkpoint(result.checkpoint);
    auto pruned_model = model_from_checkpoint(prune(result.checkpoint));

    auto probe = generate_pairs(45, 20, 16);
    for (const auto& p : probe) {
        std::vector<const PatchPair*> one{&p};
        auto a = batch_tensor(one, true);
        auto b = batch_tensor(one, false);
        auto sf = score_batch(full_model, a, b);
        auto sp = score_batch(pruned_model, a, b);
        CHECK(sf->data[0] == sp->data[0]);  // bit-identical
        auto full_fwd = forward_full(full_model, a, b, false);
        CHECK(full_fwd.master->data[0] == sp->data[0]);
    }
}

TEST_CASE("evaluate matches manual scoring and writes a ROC file") {
    TempDir dir("rrl_eval");
    auto pairs = generate_pairs(55, 16, 16);
    write_dataset((dir.path / "data").string(), pairs);
    auto cfg = tiny_cfg();
    cfg.epochs = 1;
    const auto ckpt_path = (dir.path / "model.ckpt").string();
    train(cfg, (dir.path / "data").string(), ckpt_path, "");

    auto ck = load_checkpoint(ckpt_path);
    const auto roc_path = (dir.path / "roc.csv").string();
    auto report = evaluate(ck, (dir.path / "data").string(), roc_path);
    CHECK(report.positives == 8);
    CHECK(report.negatives == 8);
    CHECK(report.auc >= 0.0);
    CHECK(report.auc <= 1.0);
    CHECK(report.fpr95 >= 0.0);
    CHECK(report.fpr95 <= 1.0);
    CHECK(fs::exists(roc_path));

    // full and pruned checkpoints evaluate identically
    auto pruned_ck = prune(ck);
    auto full_report = evaluate(ck, (dir.path / "data").string(), "");
    auto pruned_report = evaluate(pruned_ck, (dir.path / "data").string(), "");
    CHECK(full_report.fpr95 == pruned_report.fpr95);
    CHECK(full_report.auc == pruned_report.auc);

    // match on the first pair agrees with a direct batch score
    auto model = model_from_checkpoint(ck);
    std::vector<const PatchPair*> one{&pairs[0]};
    auto direct = score_batch(model, batch_tensor(one, true), batch_tensor(one, false));
    const double via_files = match_score(ck, (dir.path / "data" / "p000000_a.pgm").string(),
                                         (dir.path / "data" / "p000000_b.pgm").string());
    // file path goes through 8-bit quantization; scores agree to quantization noise
    CHECK(std::abs(via_files - static_cast<double>(direct->data[0])) < 0.05);
}

TEST_CASE("dump_features writes 30 normalized maps at stage sizes") {
    TempDir dir("rrl_dump");
    auto cfg = tiny_cfg();
    auto model = build_model<float>(cfg);
    auto ck = snapshot(model);
    auto pairs = generate_pairs(66, 2, 16);

    dump_features(ck, pairs[0], (dir.path / "maps").string());
    int count = 0;
    for (const auto& e : fs::directory_iterator(dir.path / "maps")) {
        ++count;
        CHECK(e.path().extension() == ".pgm");
    }
    CHECK(count == 30);
    for (int stage = 1; stage <= 5; ++stage) {
        const int side = 16 >> (stage - 1);
        for (const char* kind : {"mgla", "common", "private"}) {
            for (const char* patch : {"a", "b"}) {
                const auto p = dir.path / "maps" /
                               ("stage" + std::to_string(stage) + "_" + patch + "_" + kind + ".pgm");
                REQUIRE(fs::exists(p));
                int w = 0, h = 0;
                read_pgm(p.string(), w, h);
                CHECK(w == side);
                CHECK(h == side);
            }
        }
    }

    // a constant feature map must normalize to the all-zero image: zero out
    // the whole model so every map is constant
    for (auto& p : model.store.params)
        std::fill(p.value->data.begin(), p.value->data.end(), 0.f);
    auto zck = snapshot(model);
    dump_features(zck, pairs[0], (dir.path / "zero").string());
    int w = 0, h = 0;
    auto img = read_pgm((dir.path / "zero" / "stage1_a_mgla.pgm").string(), w, h);
    for (float v : img) CHECK(v == 0.f);
}

TEST_CASE("every ablation flag combination trains and evaluates") {
    TempDir dir("rrl_ablate");
    auto pairs = generate_pairs(77, 8, 16);
    write_dataset((dir.path / "data").string(), pairs);
    for (int mask = 0; mask < 8; ++mask) {
        auto cfg = tiny_cfg();
        cfg.epochs = 1;
        cfg.batch_size = 4;
        cfg.enable_mgla = mask & 1;
        cfg.enable_fil = mask & 2;
        cfg.enable_mlpp = mask & 4;
        INFO("mask=", mask);
        auto result = train(cfg, (dir.path / "data").string(), "", "");
        auto report = evaluate(result.checkpoint, (dir.path / "data").string(), "");
        CHECK(report.auc >= 0.0);
        CHECK(report.auc <= 1.0);
    }
}

TEST_CASE("training rejects a pruned config and reports data problems") {
    auto cfg = tiny_cfg();
    cfg.topology = "pruned";
    CHECK_THROWS_AS(train(cfg, "/nonexistent", "", ""), ConfigError);
    auto cfg2 = tiny_cfg();
    CHECK_THROWS_AS(train(cfg2, "/nonexistent", "", ""), DataError);
}
