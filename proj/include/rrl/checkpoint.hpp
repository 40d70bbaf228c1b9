#pragma once
// Checkpoint = config + named float32 tensors (parameters and batch-norm
// running statistics), in a custom binary format chosen so that pruning
// equality can be checked bit-exactly.
//
// Layout: magic "RRLN", u32 LE version=1, u8 topology (0 training, 1 pruned),
// u64 config byte length + UTF-8 JSON config, u32 tensor count, then per
// tensor: u16 name length + name, u8 dtype (1 = f32), u8 rank, rank x u64
// extents, raw little-endian values.

#include <string>
#include <vector>

#include "rrl/model.hpp"

namespace rrl {

struct Checkpoint {
    ModelConfig config;
    struct NamedTensor {
        std::string name;
        Shape shape;
        std::vector<float> data;
    };
    std::vector<NamedTensor> tensors;

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& t : tensors) n += static_cast<int64_t>(t.data.size());
        return n;
    }
};

// Gathers every named tensor of the model in canonical order.
Checkpoint snapshot(ModelT<float>& m);

// Fills a built model; every model tensor must be present with a matching
// shape and no extras may remain.
void load_into(ModelT<float>& m, const Checkpoint& ck);

ModelT<float> model_from_checkpoint(const Checkpoint& ck);

void save_checkpoint(const Checkpoint& ck, const std::string& path);

// Rejects bad magic, unknown version, topology/config disagreement and
// truncation, naming the file offset.
Checkpoint load_checkpoint(const std::string& path);

// Drops the decoder, the perceptual network and every sub-metric head; keeps
// the encoder, all interaction blocks, aggregation and the master head, and
// marks the topology pruned. Inference through the result is bit-identical to
// the parent model's master output.
Checkpoint prune(const Checkpoint& ck);

}  // namespace rrl
