#include "teaforn/word_drop.h"

#include "teaforn/errors.h"

namespace teaforn {

void WordDropConfig::validate() const {
    if (!(p_drop >= 0.0 && p_drop <= 1.0)) {
        throw ParameterError("word drop probability " + std::to_string(p_drop) + " outside [0, 1]");
    }
}

std::vector<std::uint8_t> word_drop_rows(std::size_t rows, double p_drop, std::mt19937_64 &rng) {
    std::vector<std::uint8_t> dropped(rows, 0);
    if (p_drop <= 0.0) return dropped;
    for (auto &d : dropped) d = static_cast<double>(rng() >> 11) * 0x1.0p-53 < p_drop;
    return dropped;
}

template <typename T>
Tensor<T> word_drop(const Tensor<T> &embedded, const WordDropConfig &config, std::mt19937_64 &rng) {
    config.validate();
    if (config.p_drop == 0.0) return embedded;
    if (embedded.rank() < 1) throw DimensionError("word_drop: needs at least one axis");
    const std::size_t d = embedded.shape().back();
    const std::size_t rows = d ? embedded.numel() / d : 0;
    const auto dropped = word_drop_rows(rows, config.p_drop, rng);
    const T keep = config.rescale && config.p_drop < 1.0 ? static_cast<T>(1.0 / (1.0 - config.p_drop)) : T(1);
    std::vector<T> mask(embedded.numel());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) mask[r * d + j] = dropped[r] ? T(0) : keep;
    return apply_mask(embedded, std::move(mask));
}

template Tensor<float> word_drop(const Tensor<float> &, const WordDropConfig &, std::mt19937_64 &);
template Tensor<double> word_drop(const Tensor<double> &, const WordDropConfig &, std::mt19937_64 &);

}  // namespace teaforn
