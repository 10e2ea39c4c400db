#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "teaforn/transformer.h"

namespace teaforn {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.98;
    double epsilon = 1e-9;
    // Rescales the update when the global gradient norm exceeds this; 0 disables.
    double clip_norm = 0.0;
};

// lr(step) = scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5), step >= 1.
struct InverseSqrtSchedule {
    double scale = 1.0;
    std::size_t warmup_steps = 400;
    std::size_t d_model = 64;

    double operator()(std::uint64_t step) const;
};

class Adam {
   public:
    explicit Adam(AdamConfig config = {}) : config_(config) {}

    // One update of every parameter with a gradient. Parameters must be
    // passed in the same order on every call.
    void step(std::span<const NamedTensor<float>> params, double learning_rate);

    std::uint64_t steps() const { return steps_; }
    const AdamConfig &config() const { return config_; }
    std::vector<std::vector<float>> &first_moments() { return m_; }
    std::vector<std::vector<float>> &second_moments() { return v_; }
    const std::vector<std::vector<float>> &first_moments() const { return m_; }
    const std::vector<std::vector<float>> &second_moments() const { return v_; }
    void restore(std::uint64_t steps, std::vector<std::vector<float>> m, std::vector<std::vector<float>> v);

   private:
    AdamConfig config_;
    std::uint64_t steps_ = 0;
    std::vector<std::vector<float>> m_, v_;
};

double global_grad_norm(std::span<const NamedTensor<float>> params);

}  // namespace teaforn
