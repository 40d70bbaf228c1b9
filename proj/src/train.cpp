#include "rrl/train.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace rrl {

void Adam::init(const ParamStoreT<float>& store) {
    t = 0;
    m_state.clear();
    v_state.clear();
    for (const auto& p : store.params) {
        m_state.emplace_back(p.value->data.size(), 0.f);
        v_state.emplace_back(p.value->data.size(), 0.f);
    }
}

void Adam::step(ParamStoreT<float>& store) {
    if (m_state.size() != store.params.size()) throw ConfigError("Adam: not initialized for this store");
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t pi = 0; pi < store.params.size(); ++pi) {
        auto& p = store.params[pi];
        if (!p.trainable || p.value->grad.empty()) continue;
        auto& m = m_state[pi];
        auto& v = v_state[pi];
        auto& w = p.value->data;
        const auto& g = p.value->grad;
        const int64_t n = static_cast<int64_t>(w.size());
        parallel_for(n, 1 << 16, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i) {
                const float gi = g[static_cast<size_t>(i)];
                m[static_cast<size_t>(i)] = static_cast<float>(beta1) * m[static_cast<size_t>(i)] + static_cast<float>(1.0 - beta1) * gi;
                v[static_cast<size_t>(i)] = static_cast<float>(beta2) * v[static_cast<size_t>(i)] + static_cast<float>(1.0 - beta2) * gi * gi;
                const double mhat = m[static_cast<size_t>(i)] / bc1;
                const double vhat = v[static_cast<size_t>(i)] / bc2;
                w[static_cast<size_t>(i)] -= static_cast<float>(lr * mhat / (std::sqrt(vhat) + eps));
            }
        });
        check_finite(("adam update of " + p.name).c_str(), w);
    }
}

ValueT<float> batch_tensor(const std::vector<const PatchPair*>& pairs, bool side_a) {
    if (pairs.empty()) throw ConfigError("batch_tensor: empty batch");
    const int size = pairs[0]->size;
    const int b = static_cast<int>(pairs.size());
    std::vector<float> data;
    data.reserve(static_cast<size_t>(b) * size * size);
    for (const auto* p : pairs) {
        const auto& pix = side_a ? p->a : p->b;
        if (p->size != size || static_cast<int>(pix.size()) != size * size)
            throw ConfigError("batch_tensor: inconsistent patch sizes");
        data.insert(data.end(), pix.begin(), pix.end());
    }
    return constant<float>({b, 1, size, size}, std::move(data));
}

ValueT<float> label_tensor(const std::vector<const PatchPair*>& pairs) {
    std::vector<float> y(pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i) y[i] = static_cast<float>(pairs[i]->label);
    return constant<float>({static_cast<int>(pairs.size())}, std::move(y));
}

LossReport train_step(ModelT<float>& m, Adam& opt, const ValueT<float>& batch_a, const ValueT<float>& batch_b,
                      const ValueT<float>& labels) {
    auto out = forward_full(m, batch_a, batch_b, /*train=*/true);
    const LossWeights w = loss_weights(m.cfg);

    LossReport report;
    ValueT<float> total;
    ValueT<float> metric;
    if (m.cfg.enable_mlpp) {
        std::vector<ValueT<float>> module_scores, stage_scores;
        for (int i = w.a; i <= 5; ++i)
            if (out.module_scores[static_cast<size_t>(i - 1)])
                module_scores.push_back(out.module_scores[static_cast<size_t>(i - 1)]);
        for (int j = w.b; j <= 5; ++j) stage_scores.push_back(out.stage_scores[static_cast<size_t>(j - 1)]);
        metric = metric_loss(module_scores, stage_scores, labels, w);
        for (int i = w.a; i <= 5; ++i)
            if (out.module_scores[static_cast<size_t>(i - 1)])
                report.per_head["module" + std::to_string(i)] =
                    bce_mean(out.module_scores[static_cast<size_t>(i - 1)], labels)->scalar();
        for (int j = w.b; j <= 5; ++j)
            report.per_head["stage" + std::to_string(j)] =
                bce_mean(out.stage_scores[static_cast<size_t>(j - 1)], labels)->scalar();

        auto phi = [&m](const ValueT<float>& img) { return perceptual_forward(m.perceptual, img); };
        auto r1 = reconstruction_loss<float>(out.recon_a, batch_a, phi, w.beta);
        auto r2 = reconstruction_loss<float>(out.recon_b, batch_b, phi, w.beta);
        report.recon[0] = r1->scalar();
        report.recon[1] = r2->scalar();
        total = add(metric, affine(add(r1, r2), static_cast<float>(w.alpha), 0.f));
    } else {
        metric = bce_mean(out.master, labels);
        report.per_head["stage5"] = metric->scalar();
        total = metric;
    }
    report.metric = metric->scalar();
    report.total = total->scalar();

    backward(total);
    opt.step(m.store);
    m.store.zero_grad();
    return report;
}

TrainResult train(const ModelConfig& cfg, const std::string& data_dir, const std::string& out_path,
                  const std::string& loss_csv_path) {
    cfg.validate();
    if (cfg.pruned()) throw ConfigError("train: config topology must be training");

    const auto idx = load_index(data_dir);
    if (idx.records.empty()) throw DataError("train: dataset is empty");
    std::vector<PatchPair> pairs(idx.records.size());
    parallel_for(static_cast<int64_t>(idx.records.size()), 8, [&](int64_t lo, int64_t hi) {
        for (int64_t i = lo; i < hi; ++i) pairs[static_cast<size_t>(i)] = load_pair(idx, static_cast<size_t>(i), cfg.input_size);
    });

    auto model = build_model<float>(cfg);
    Adam opt;
    opt.lr = cfg.learning_rate;
    opt.init(model.store);

    std::ofstream csv;
    if (!loss_csv_path.empty()) {
        csv.open(loss_csv_path);
        if (!csv) throw IoError("train: cannot open loss log " + loss_csv_path);
        csv << "epoch,total,metric,recon1,recon2\n";
        csv.precision(9);
    }

    TrainResult result;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::vector<size_t> order(pairs.size());
        std::iota(order.begin(), order.end(), size_t{0});
        Rng shuffle_rng(mix_seed(cfg.data_seed, 0xe70c0000ull + static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        LossReport epoch_mean;
        int steps = 0;
        for (size_t pos = 0; pos < order.size(); pos += static_cast<size_t>(cfg.batch_size)) {
            const size_t end = std::min(order.size(), pos + static_cast<size_t>(cfg.batch_size));
            std::vector<PatchPair> augmented;
            augmented.reserve(end - pos);
            for (size_t k = pos; k < end; ++k) {
                const uint64_t aug_seed =
                    mix_seed(cfg.data_seed, (static_cast<uint64_t>(epoch) << 32) ^ static_cast<uint64_t>(k));
                augmented.push_back(augment(pairs[order[k]], aug_seed));
            }
            std::vector<const PatchPair*> batch;
            for (const auto& p : augmented) batch.push_back(&p);
            LossReport r;
            try {
                r = train_step(model, opt, batch_tensor(batch, true), batch_tensor(batch, false),
                               label_tensor(batch));
            } catch (const NumericError& e) {
                throw NumericError("train: epoch " + std::to_string(epoch) + " step " + std::to_string(steps + 1) +
                                   ": " + e.what());
            }
            epoch_mean.total += r.total;
            epoch_mean.metric += r.metric;
            epoch_mean.recon[0] += r.recon[0];
            epoch_mean.recon[1] += r.recon[1];
            ++steps;
        }
        epoch_mean.total /= steps;
        epoch_mean.metric /= steps;
        epoch_mean.recon[0] /= steps;
        epoch_mean.recon[1] /= steps;
        result.epoch_reports.push_back(epoch_mean);
        if (csv.is_open()) {
            csv << epoch << "," << epoch_mean.total << "," << epoch_mean.metric << "," << epoch_mean.recon[0]
                << "," << epoch_mean.recon[1] << "\n";
        }
    }

    result.checkpoint = snapshot(model);
    if (!out_path.empty()) save_checkpoint(result.checkpoint, out_path);
    return result;
}

EvalReport evaluate(const Checkpoint& ck, const std::string& data_dir, const std::string& roc_csv_path) {
    auto model = model_from_checkpoint(ck);
    const auto idx = load_index(data_dir);
    if (idx.records.empty()) throw DataError("evaluate: dataset is empty");

    std::vector<double> scores(idx.records.size());
    std::vector<int> labels(idx.records.size());
    const size_t bs = static_cast<size_t>(std::max(1, model.cfg.batch_size));
    for (size_t pos = 0; pos < idx.records.size(); pos += bs) {
        const size_t end = std::min(idx.records.size(), pos + bs);
        std::vector<PatchPair> loaded(end - pos);
        parallel_for(static_cast<int64_t>(end - pos), 4, [&](int64_t lo, int64_t hi) {
            for (int64_t i = lo; i < hi; ++i)
                loaded[static_cast<size_t>(i)] = load_pair(idx, pos + static_cast<size_t>(i), model.cfg.input_size);
        });
        std::vector<const PatchPair*> batch;
        for (const auto& p : loaded) batch.push_back(&p);
        auto s = score_batch(model, batch_tensor(batch, true), batch_tensor(batch, false));
        for (size_t i = 0; i < batch.size(); ++i) {
            scores[pos + i] = static_cast<double>(s->data[i]);
            labels[pos + i] = batch[i]->label;
        }
    }
    auto report = eval_scores(scores, labels);
    if (!roc_csv_path.empty()) write_roc_csv(roc_csv_path, report.roc);
    return report;
}

double match_score(const Checkpoint& ck, const std::string& patch_a_path, const std::string& patch_b_path) {
    auto model = model_from_checkpoint(ck);
    const int s = model.cfg.input_size;
    PatchPair pair;
    pair.size = s;
    int w = 0, h = 0;
    pair.a = read_pgm(patch_a_path, w, h);
    if (w != s || h != s)
        throw DataError("match: " + patch_a_path + " is " + std::to_string(w) + "x" + std::to_string(h) +
                        ", expected " + std::to_string(s) + "x" + std::to_string(s));
    pair.b = read_pgm(patch_b_path, w, h);
    if (w != s || h != s)
        throw DataError("match: " + patch_b_path + " is " + std::to_string(w) + "x" + std::to_string(h) +
                        ", expected " + std::to_string(s) + "x" + std::to_string(s));
    std::vector<const PatchPair*> batch{&pair};
    auto score = score_batch(model, batch_tensor(batch, true), batch_tensor(batch, false));
    return static_cast<double>(score->data[0]);
}

namespace {

void write_feature_map(const std::string& path, const ValueT<float>& fmap) {
    // fmap: [1,C,H,W] -> channel mean -> min-max normalize -> PGM
    const int c = fmap->shape[1], h = fmap->shape[2], w = fmap->shape[3];
    std::vector<float> mean(static_cast<size_t>(h) * w, 0.f);
    for (int ch = 0; ch < c; ++ch)
        for (int i = 0; i < h * w; ++i) mean[static_cast<size_t>(i)] += fmap->data[static_cast<size_t>(ch) * h * w + i];
    float mn = mean[0], mx = mean[0];
    for (auto& v : mean) {
        v /= static_cast<float>(c);
        mn = std::min(mn, v);
        mx = std::max(mx, v);
    }
    if (mx > mn) {
        for (auto& v : mean) v = (v - mn) / (mx - mn);
    } else {
        std::fill(mean.begin(), mean.end(), 0.f);  // constant map -> all zeros
    }
    write_pgm(path, mean, w, h);
}

}  // namespace

void dump_features(const Checkpoint& ck, const PatchPair& pair, const std::string& out_dir) {
    auto model = model_from_checkpoint(ck);
    if (!model.has_fil())
        throw ConfigError("dump_features: model has no feature-interaction blocks");
    if (pair.size != model.cfg.input_size) throw ConfigError("dump_features: patch size mismatch");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);

    std::vector<const PatchPair*> batch{&pair};
    auto a = batch_tensor(batch, true);
    auto b = batch_tensor(batch, false);
    auto feats = encode(model, concat<float>({a, b}, 0), /*train=*/false);
    for (int i = 0; i < 5; ++i) {
        auto fa = slice0(feats.maps[static_cast<size_t>(i)], 0, 1);
        auto fb = slice0(feats.maps[static_cast<size_t>(i)], 1, 1);
        auto fo = fil_forward(model, i, fa, fb, /*train=*/false);
        const std::string stem = out_dir + "/stage" + std::to_string(i + 1);
        write_feature_map(stem + "_a_mgla.pgm", fa);
        write_feature_map(stem + "_b_mgla.pgm", fb);
        write_feature_map(stem + "_a_common.pgm", fo.common);
        write_feature_map(stem + "_b_common.pgm", fo.common);
        write_feature_map(stem + "_a_private.pgm", fo.private_a);
        write_feature_map(stem + "_b_private.pgm", fo.private_b);
    }
}

}  // namespace rrl
