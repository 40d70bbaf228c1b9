#pragma once
// Training loop, optimizer, evaluation and the feature-map dumper.

#include <optional>
#include <string>
#include <vector>

#include "rrl/checkpoint.hpp"
#include "rrl/data.hpp"
#include "rrl/loss.hpp"
#include "rrl/metrics.hpp"

namespace rrl {

struct Adam {
    double lr = 1e-3;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t t = 0;
    std::vector<std::vector<float>> m_state, v_state;

    void init(const ParamStoreT<float>& store);
    // One update over every trainable parameter in canonical order; aborts on
    // a non-finite parameter after the update.
    void step(ParamStoreT<float>& store);
};

// Batch assembly: [B,1,S,S] constants plus a [B] label vector.
ValueT<float> batch_tensor(const std::vector<const PatchPair*>& pairs, bool side_a);
ValueT<float> label_tensor(const std::vector<const PatchPair*>& pairs);

// One optimization step on an assembled batch. Auxiliary losses (sub-heads,
// reconstruction) are active exactly when the model carries those branches;
// otherwise only the master head's BCE is trained.
LossReport train_step(ModelT<float>& m, Adam& opt, const ValueT<float>& batch_a, const ValueT<float>& batch_b,
                      const ValueT<float>& labels);

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<LossReport> epoch_reports;
};

// Full run: deterministic shuffling and augmentation from cfg.data_seed,
// per-epoch LossReport rows appended to loss_csv_path (header
// epoch,total,metric,recon1,recon2), final training-topology checkpoint
// written to out_path.
TrainResult train(const ModelConfig& cfg, const std::string& data_dir, const std::string& out_path,
                  const std::string& loss_csv_path);

// Scores every pair with the master similarity; works for both topologies.
EvalReport evaluate(const Checkpoint& ck, const std::string& data_dir, const std::string& roc_csv_path = "");

double match_score(const Checkpoint& ck, const std::string& patch_a_path, const std::string& patch_b_path);

// Writes per-stage channel-mean maps (attention output, interaction common
// and private features) for both patches as min-max normalized PGMs:
// stage{i}_{a|b}_{mgla|common|private}.pgm, 30 files.
void dump_features(const Checkpoint& ck, const PatchPair& pair, const std::string& out_dir);

}  // namespace rrl
