#include "rrl/mgla.hpp"

#include <cmath>

namespace rrl {

int kernel_size(int len, KernelRound round) {
    if (len < 1) throw ConfigError("kernel_size: length must be positive, got " + std::to_string(len));
    const double raw = (std::log2(static_cast<double>(len)) + 1.0) / 2.0;
    int k = static_cast<int>(round == KernelRound::kUp ? std::ceil(raw) : std::floor(raw));
    if (k % 2 != 0) k += 1;
    if (k < 2) k = 2;
    return k;
}

int64_t mgla_param_count(int c, int h, int w, bool use_bias, KernelRound round) {
    int64_t n = kernel_size(h, round) + kernel_size(w, round) + kernel_size(c, round);
    if (use_bias) n += 3;
    return n;
}

}  // namespace rrl
