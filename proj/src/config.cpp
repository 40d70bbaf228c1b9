#include "rrl/config.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "rrl/common.hpp"

namespace rrl {

using nlohmann::json;

void ModelConfig::validate() const {
    if (in_channels < 1) throw ConfigError("config: in_channels must be positive");
    for (int c : stage_channels)
        if (c < 1) throw ConfigError("config: stage_channels must be positive");
    if (input_size < 16 || input_size % 16 != 0)
        throw ConfigError("config: input_size must be a positive multiple of 16, got " + std::to_string(input_size));
    if (kernel_round != "up" && kernel_round != "down") throw ConfigError("config: kernel_round must be up|down");
    if (alpha <= 0 || beta <= 0) throw ConfigError("config: alpha and beta must be positive");
    if (a < 1 || a > 5 || b < 1 || b > 5) throw ConfigError("config: a and b must lie in 1..5");
    if (learning_rate <= 0) throw ConfigError("config: learning_rate must be positive");
    if (epochs < 1 || batch_size < 1) throw ConfigError("config: epochs and batch_size must be positive");
    if (topology != "training" && topology != "pruned") throw ConfigError("config: topology must be training|pruned");
}

std::string ModelConfig::to_json() const {
    json j;
    j["in_channels"] = in_channels;
    j["stage_channels"] = stage_channels;
    j["input_size"] = input_size;
    j["kernel_round"] = kernel_round;
    j["attention_bias"] = attention_bias;
    j["alpha"] = alpha;
    j["beta"] = beta;
    j["a"] = a;
    j["b"] = b;
    j["learning_rate"] = learning_rate;
    j["epochs"] = epochs;
    j["batch_size"] = batch_size;
    j["init_seed"] = init_seed;
    j["data_seed"] = data_seed;
    j["perceptual_seed"] = perceptual_seed;
    j["enable_mgla"] = enable_mgla;
    j["enable_fil"] = enable_fil;
    j["enable_mlpp"] = enable_mlpp;
    j["enable_cross_layer"] = enable_cross_layer;
    j["topology"] = topology;
    return j.dump();  // nlohmann keeps keys sorted
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config: invalid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config: top level must be an object");

    static const std::set<std::string> known = {
        "in_channels", "stage_channels", "input_size", "kernel_round", "attention_bias",
        "alpha", "beta", "a", "b", "learning_rate", "epochs", "batch_size",
        "init_seed", "data_seed", "perceptual_seed",
        "enable_mgla", "enable_fil", "enable_mlpp", "enable_cross_layer", "topology"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) throw ConfigError("config: unknown field '" + it.key() + "'");
    }

    ModelConfig c;  // defaults
    try {
        if (j.contains("in_channels")) c.in_channels = j["in_channels"].get<int>();
        if (j.contains("stage_channels")) {
            auto v = j["stage_channels"].get<std::vector<int>>();
            if (v.size() != 5) throw ConfigError("config: stage_channels must have exactly 5 entries");
            std::copy(v.begin(), v.end(), c.stage_channels.begin());
        }
        if (j.contains("input_size")) c.input_size = j["input_size"].get<int>();
        if (j.contains("kernel_round")) c.kernel_round = j["kernel_round"].get<std::string>();
        if (j.contains("attention_bias")) c.attention_bias = j["attention_bias"].get<bool>();
        if (j.contains("alpha")) c.alpha = j["alpha"].get<double>();
        if (j.contains("beta")) c.beta = j["beta"].get<double>();
        if (j.contains("a")) c.a = j["a"].get<int>();
        if (j.contains("b")) c.b = j["b"].get<int>();
        if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
        if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
        if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
        if (j.contains("init_seed")) c.init_seed = j["init_seed"].get<uint64_t>();
        if (j.contains("data_seed")) c.data_seed = j["data_seed"].get<uint64_t>();
        if (j.contains("perceptual_seed")) c.perceptual_seed = j["perceptual_seed"].get<uint64_t>();
        if (j.contains("enable_mgla")) c.enable_mgla = j["enable_mgla"].get<bool>();
        if (j.contains("enable_fil")) c.enable_fil = j["enable_fil"].get<bool>();
        if (j.contains("enable_mlpp")) c.enable_mlpp = j["enable_mlpp"].get<bool>();
        if (j.contains("enable_cross_layer")) c.enable_cross_layer = j["enable_cross_layer"].get<bool>();
        if (j.contains("topology")) c.topology = j["topology"].get<std::string>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: bad field type: ") + e.what());
    }
    c.validate();
    return c;
}

ModelConfig ModelConfig::from_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("config: cannot open " + path);
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return from_json(text);
}

}  // namespace rrl
