// rrl: command-line surface for synthetic data generation, training, pruning,
// evaluation, pair matching and feature-map dumps.

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "rrl/train.hpp"

namespace {

int run(int argc, char** argv) {
    CLI::App app{"RRL-Net cross-spectral patch matching"};
    app.require_subcommand(1);

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic pair dataset");
    std::string gen_out;
    int gen_pairs = 2000;
    uint64_t gen_seed = 7;
    gen->add_option("--out", gen_out, "Output directory")->required();
    gen->add_option("--pairs", gen_pairs, "Number of pairs (even)");
    gen->add_option("--seed", gen_seed, "Generator seed");

    // train
    auto* tr = app.add_subcommand("train", "Train a model");
    std::string tr_config, tr_data, tr_out, tr_log;
    uint64_t tr_seed = 0;
    bool tr_seed_set = false;
    tr->add_option("--config", tr_config, "Config JSON (defaults apply per field)");
    tr->add_option("--data", tr_data, "Training dataset directory")->required();
    tr->add_option("--out", tr_out, "Checkpoint output path")->required();
    tr->add_option("--log", tr_log, "Loss CSV path (default: <out>.loss.csv)");
    tr->add_option("--seed", tr_seed, "Override init_seed")->each([&](const std::string&) { tr_seed_set = true; });

    // prune
    auto* pr = app.add_subcommand("prune", "Strip auxiliary branches from a trained checkpoint");
    std::string pr_in, pr_out;
    pr->add_option("input", pr_in, "Training-topology checkpoint")->required();
    pr->add_option("output", pr_out, "Pruned checkpoint path")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "Evaluate FPR95/AUC on a dataset");
    std::string ev_ckpt, ev_data, ev_roc;
    ev->add_option("checkpoint", ev_ckpt)->required();
    ev->add_option("--data", ev_data, "Dataset directory")->required();
    ev->add_option("--roc", ev_roc, "Write ROC curve CSV here");

    // match
    auto* ma = app.add_subcommand("match", "Similarity of one patch pair");
    std::string ma_ckpt, ma_a, ma_b;
    ma->add_option("checkpoint", ma_ckpt)->required();
    ma->add_option("patch_a", ma_a)->required();
    ma->add_option("patch_b", ma_b)->required();

    // dump-features
    auto* du = app.add_subcommand("dump-features", "Write per-stage feature maps as PGMs");
    std::string du_ckpt, du_a, du_b, du_out;
    du->add_option("checkpoint", du_ckpt)->required();
    du->add_option("--pair-a", du_a, "Patch A (PGM)")->required();
    du->add_option("--pair-b", du_b, "Patch B (PGM)")->required();
    du->add_option("--out", du_out, "Output directory")->required();

    CLI11_PARSE(app, argc, argv);

    if (gen->parsed()) {
        auto pairs = rrl::generate_pairs(gen_seed, gen_pairs);
        rrl::write_dataset(gen_out, pairs);
        std::cout << "wrote " << pairs.size() << " pairs to " << gen_out << "\n";
        return 0;
    }
    if (tr->parsed()) {
        rrl::ModelConfig cfg = tr_config.empty() ? rrl::ModelConfig{} : rrl::ModelConfig::from_file(tr_config);
        if (tr_seed_set) cfg.init_seed = tr_seed;
        const std::string log = tr_log.empty() ? tr_out + ".loss.csv" : tr_log;
        auto result = rrl::train(cfg, tr_data, tr_out, log);
        const auto& last = result.epoch_reports.back();
        std::cout << "trained " << cfg.epochs << " epochs; final loss total=" << last.total
                  << " metric=" << last.metric << "\n"
                  << "checkpoint: " << tr_out << "\nloss log: " << log << "\n";
        return 0;
    }
    if (pr->parsed()) {
        auto ck = rrl::load_checkpoint(pr_in);
        auto pruned = rrl::prune(ck);
        rrl::save_checkpoint(pruned, pr_out);
        std::cout << "pruned " << ck.scalar_count() << " -> " << pruned.scalar_count() << " stored scalars\n";
        return 0;
    }
    if (ev->parsed()) {
        auto report = rrl::evaluate(rrl::load_checkpoint(ev_ckpt), ev_data, ev_roc);
        std::printf("fpr95=%.6f auc=%.6f positives=%d negatives=%d\n", report.fpr95, report.auc, report.positives,
                    report.negatives);
        return 0;
    }
    if (ma->parsed()) {
        std::printf("%.6f\n", rrl::match_score(rrl::load_checkpoint(ma_ckpt), ma_a, ma_b));
        return 0;
    }
    if (du->parsed()) {
        rrl::PatchPair pair;
        auto ck = rrl::load_checkpoint(du_ckpt);
        pair.size = ck.config.input_size;
        int w = 0, h = 0;
        pair.a = rrl::read_pgm(du_a, w, h);
        pair.b = rrl::read_pgm(du_b, w, h);
        rrl::dump_features(ck, pair, du_out);
        std::cout << "wrote 30 feature maps to " << du_out << "\n";
        return 0;
    }
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
