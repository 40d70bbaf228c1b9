#pragma once
// Full architecture + training description. Serialized verbatim into every
// checkpoint so a checkpoint always self-describes its model.

#include <array>
#include <cstdint>
#include <string>

#include "rrl/mgla.hpp"

namespace rrl {

struct ModelConfig {
    int in_channels = 1;
    std::array<int, 5> stage_channels{16, 32, 64, 96, 128};
    int input_size = 64;
    std::string kernel_round = "up";  // "up" | "down", ablation switch for the kernel-size rule
    bool attention_bias = false;

    // loss weights and sub-metric placement (module heads a..5, stage heads b..5)
    double alpha = 1.0;
    double beta = 0.1;
    int a = 3;
    int b = 3;

    double learning_rate = 1e-3;
    int epochs = 5;
    int batch_size = 32;

    uint64_t init_seed = 1;
    uint64_t data_seed = 2;
    uint64_t perceptual_seed = 3;

    bool enable_mgla = true;
    bool enable_fil = true;
    bool enable_mlpp = true;
    bool enable_cross_layer = false;

    std::string topology = "training";  // "training" | "pruned"

    bool pruned() const { return topology == "pruned"; }
    KernelRound round() const { return kernel_round == "down" ? KernelRound::kDown : KernelRound::kUp; }

    void validate() const;

    // Deterministic (sorted-key) JSON, byte-stable for checkpoint identity.
    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
    static ModelConfig from_file(const std::string& path);
};

}  // namespace rrl
