#include "rrl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <unordered_map>

static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");

namespace rrl {

namespace {
constexpr char kMagic[4] = {'R', 'R', 'L', 'N'};
constexpr uint32_t kVersion = 1;
}  // namespace

Checkpoint snapshot(ModelT<float>& m) {
    Checkpoint ck;
    ck.config = m.cfg;
    for (const auto& p : m.store.params) ck.tensors.push_back({p.name, p.value->shape, p.value->data});
    m.for_each_bn([&](const std::string& prefix, BnLayerT<float>& bn) {
        const int c = static_cast<int>(bn.stats.running_mean.size());
        ck.tensors.push_back({prefix + ".running_mean", {c}, bn.stats.running_mean});
        ck.tensors.push_back({prefix + ".running_var", {c}, bn.stats.running_var});
    });
    return ck;
}

void load_into(ModelT<float>& m, const Checkpoint& ck) {
    std::unordered_map<std::string, const Checkpoint::NamedTensor*> by_name;
    for (const auto& t : ck.tensors) {
        if (!by_name.emplace(t.name, &t).second) throw IoError("checkpoint: duplicate tensor " + t.name);
    }
    size_t used = 0;
    auto take = [&](const std::string& name, const Shape& shape) -> const Checkpoint::NamedTensor& {
        auto it = by_name.find(name);
        if (it == by_name.end()) throw IoError("checkpoint: missing tensor " + name);
        if (it->second->shape != shape)
            throw IoError("checkpoint: tensor " + name + " has shape " + shape_str(it->second->shape) +
                          ", model expects " + shape_str(shape));
        ++used;
        return *it->second;
    };
    for (auto& p : m.store.params) p.value->data = take(p.name, p.value->shape).data;
    m.for_each_bn([&](const std::string& prefix, BnLayerT<float>& bn) {
        const int c = static_cast<int>(bn.stats.running_mean.size());
        bn.stats.running_mean = take(prefix + ".running_mean", {c}).data;
        bn.stats.running_var = take(prefix + ".running_var", {c}).data;
    });
    if (used != ck.tensors.size())
        throw IoError("checkpoint: " + std::to_string(ck.tensors.size() - used) +
                      " tensor(s) not used by the model topology");
}

ModelT<float> model_from_checkpoint(const Checkpoint& ck) {
    auto m = build_model<float>(ck.config);
    load_into(m, ck);
    return m;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot open " + path);
    auto put = [&](const void* p, size_t n) { out.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n)); };
    put(kMagic, 4);
    const uint32_t version = kVersion;
    put(&version, 4);
    const uint8_t topology = ck.config.pruned() ? 1 : 0;
    put(&topology, 1);
    const std::string cfg = ck.config.to_json();
    const uint64_t cfg_len = cfg.size();
    put(&cfg_len, 8);
    put(cfg.data(), cfg.size());
    const uint32_t count = static_cast<uint32_t>(ck.tensors.size());
    put(&count, 4);
    for (const auto& t : ck.tensors) {
        const uint16_t name_len = static_cast<uint16_t>(t.name.size());
        put(&name_len, 2);
        put(t.name.data(), t.name.size());
        const uint8_t dtype = 1;  // 32-bit float
        put(&dtype, 1);
        const uint8_t rank = static_cast<uint8_t>(t.shape.size());
        put(&rank, 1);
        for (int e : t.shape) {
            const uint64_t ext = static_cast<uint64_t>(e);
            put(&ext, 8);
        }
        put(t.data.data(), t.data.size() * sizeof(float));
    }
    if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

namespace {

struct Reader {
    std::ifstream in;
    uint64_t offset = 0;
    std::string path;

    void read(void* p, size_t n) {
        in.read(reinterpret_cast<char*>(p), static_cast<std::streamsize>(n));
        if (in.gcount() != static_cast<std::streamsize>(n))
            throw IoError("load_checkpoint: " + path + ": truncated at offset " + std::to_string(offset));
        offset += n;
    }
    template <class T>
    T get() {
        T v;
        read(&v, sizeof(T));
        return v;
    }
};

}  // namespace

Checkpoint load_checkpoint(const std::string& path) {
    Reader r;
    r.path = path;
    r.in.open(path, std::ios::binary);
    if (!r.in) throw IoError("load_checkpoint: cannot open " + path);

    char magic[4];
    r.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw IoError("load_checkpoint: " + path + ": bad magic at offset 0");
    const auto version = r.get<uint32_t>();
    if (version != kVersion)
        throw IoError("load_checkpoint: " + path + ": unsupported version " + std::to_string(version) +
                      " at offset 4");
    const auto topology = r.get<uint8_t>();
    if (topology > 1) throw IoError("load_checkpoint: " + path + ": bad topology byte at offset 8");
    const auto cfg_len = r.get<uint64_t>();
    if (cfg_len > (1ull << 20))
        throw IoError("load_checkpoint: " + path + ": implausible config length at offset 9");
    std::string cfg_text(cfg_len, '\0');
    r.read(cfg_text.data(), cfg_len);

    Checkpoint ck;
    try {
        ck.config = ModelConfig::from_json(cfg_text);
    } catch (const ConfigError& e) {
        throw IoError("load_checkpoint: " + path + ": embedded config invalid: " + e.what());
    }
    if ((topology == 1) != ck.config.pruned())
        throw IoError("load_checkpoint: " + path + ": topology byte disagrees with embedded config");

    const auto count = r.get<uint32_t>();
    for (uint32_t i = 0; i < count; ++i) {
        Checkpoint::NamedTensor t;
        const auto name_len = r.get<uint16_t>();
        t.name.resize(name_len);
        r.read(t.name.data(), name_len);
        const auto dtype = r.get<uint8_t>();
        if (dtype != 1)
            throw IoError("load_checkpoint: " + path + ": unknown dtype code " + std::to_string(dtype) +
                          " for tensor " + t.name + " at offset " + std::to_string(r.offset - 1));
        const auto rank = r.get<uint8_t>();
        int64_t n = 1;
        for (int d = 0; d < rank; ++d) {
            const auto ext = r.get<uint64_t>();
            if (ext == 0 || ext > (1ull << 32))
                throw IoError("load_checkpoint: " + path + ": bad extent for tensor " + t.name);
            t.shape.push_back(static_cast<int>(ext));
            n *= static_cast<int64_t>(ext);
        }
        if (n > (1ll << 31)) throw IoError("load_checkpoint: " + path + ": implausible tensor size for " + t.name);
        t.data.resize(static_cast<size_t>(n));
        r.read(t.data.data(), static_cast<size_t>(n) * sizeof(float));
        check_finite(("checkpoint tensor " + t.name).c_str(), t.data);
        ck.tensors.push_back(std::move(t));
    }
    char extra;
    if (r.in.read(&extra, 1), r.in.gcount() != 0)
        throw IoError("load_checkpoint: " + path + ": trailing bytes at offset " + std::to_string(r.offset));
    return ck;
}

Checkpoint prune(const Checkpoint& ck) {
    if (ck.config.pruned()) throw ConfigError("prune: checkpoint is already pruned");
    auto keep = [](const std::string& name) {
        if (name.rfind("decoder.", 0) == 0) return false;
        if (name.rfind("perceptual.", 0) == 0) return false;
        if (name.rfind("head.", 0) == 0) return name.rfind("head.stage5.", 0) == 0;
        return true;
    };
    Checkpoint out;
    out.config = ck.config;
    out.config.topology = "pruned";
    for (const auto& t : ck.tensors)
        if (keep(t.name)) out.tensors.push_back(t);
    return out;
}

}  // namespace rrl
