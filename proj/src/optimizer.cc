#include "teaforn/optimizer.h"

#include <algorithm>
#include <cmath>

#include "teaforn/errors.h"

namespace teaforn {

double InverseSqrtSchedule::operator()(std::uint64_t step) const {
    const double s = static_cast<double>(std::max<std::uint64_t>(step, 1));
    const double w = static_cast<double>(std::max<std::size_t>(warmup_steps, 1));
    return scale / std::sqrt(static_cast<double>(d_model)) * std::min(1.0 / std::sqrt(s), s * std::pow(w, -1.5));
}

double global_grad_norm(std::span<const NamedTensor<float>> params) {
    double total = 0.0;
    for (const auto &[name, p] : params)
        for (float g : p.grad()) total += static_cast<double>(g) * g;
    return std::sqrt(total);
}

void Adam::step(std::span<const NamedTensor<float>> params, double learning_rate) {
    if (m_.empty()) {
        for (const auto &[name, p] : params) {
            m_.emplace_back(p.numel(), 0.0f);
            v_.emplace_back(p.numel(), 0.0f);
        }
    }
    if (m_.size() != params.size()) throw ContractError("Adam: parameter list changed between steps");
    ++steps_;
    const double b1 = config_.beta1, b2 = config_.beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
    double clip = 1.0;
    if (config_.clip_norm > 0.0) {
        const double norm = global_grad_norm(params);
        if (norm > config_.clip_norm) clip = config_.clip_norm / norm;
    }
    const float fb1 = static_cast<float>(b1), fb2 = static_cast<float>(b2);
    const float step_size = static_cast<float>(learning_rate / c1);
    const float inv_c2 = static_cast<float>(1.0 / c2), eps = static_cast<float>(config_.epsilon);
    const float fclip = static_cast<float>(clip);
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor<float> p = params[i].second;
        if (!p.has_grad()) continue;
        if (m_[i].size() != p.numel()) throw ContractError("Adam: parameter " + params[i].first + " changed size");
        auto values = p.mutable_values();
        const auto grad = p.grad();
        auto &m = m_[i];
        auto &v = v_[i];
        for (std::size_t j = 0; j < values.size(); ++j) {
            const float g = grad[j] * fclip;
            m[j] = fb1 * m[j] + (1.0f - fb1) * g;
            v[j] = fb2 * v[j] + (1.0f - fb2) * g * g;
            values[j] -= step_size * m[j] / (std::sqrt(v[j] * inv_c2) + eps);
        }
    }
}

void Adam::restore(std::uint64_t steps, std::vector<std::vector<float>> m, std::vector<std::vector<float>> v) {
    if (m.size() != v.size()) throw ContractError("Adam: moment tables differ in size");
    steps_ = steps;
    m_ = std::move(m);
    v_ = std::move(v);
}

}  // namespace teaforn
