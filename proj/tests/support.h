#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "teaforn/data.h"
#include "teaforn/tensor.h"
#include "teaforn/transformer.h"

namespace teaforn::testing {

inline ModelConfig tiny_config(std::size_t vocab = 7, std::size_t layers = 1) {
    ModelConfig c;
    c.vocab_size = vocab;
    c.d_model = 8;
    c.d_ff = 16;
    c.heads = 2;
    c.encoder_layers = layers;
    c.decoder_layers = layers;
    c.dropout = 0.0;
    c.max_len = 24;
    return c;
}

// Random pairs over word ids [4, vocab).
inline std::vector<SequencePair> random_pairs(std::mt19937_64 &rng, std::size_t count, std::size_t vocab,
                                              std::size_t min_len, std::size_t max_len) {
    std::uniform_int_distribution<std::size_t> len(min_len, max_len);
    std::uniform_int_distribution<TokenId> word(kFirstWordId, static_cast<TokenId>(vocab - 1));
    std::vector<SequencePair> out(count);
    for (auto &p : out) {
        p.source.resize(len(rng));
        p.target.resize(len(rng));
        for (auto &t : p.source) t = word(rng);
        for (auto &t : p.target) t = word(rng);
    }
    return out;
}

inline Batch random_batch(std::mt19937_64 &rng, std::size_t count, std::size_t vocab, std::size_t min_len = 2,
                          std::size_t max_len = 5) {
    return make_batch(random_pairs(rng, count, vocab, min_len, max_len));
}

struct GradCheck {
    std::string name;
    // |a - n| / max(|a| + |n|, 1e-5) over the whole tensor. The floor turns the
    // check absolute for tensors whose exact gradient is zero (attention key
    // biases, by softmax shift invariance), where central differences only
    // see rounding noise of ~1e-10.
    double relative_error = 0.0;
    double max_abs_error = 0.0;
};

// Central differences of `loss` over every element of every tensor in
// `params`, against the gradients backward() leaves on them.
template <typename T>
std::vector<GradCheck> check_gradients(const std::function<Tensor<T>()> &loss,
                                       const std::vector<NamedTensor<T>> &params, double eps = 1e-5) {
    for (auto [name, p] : params) p.zero_grad();
    backward(loss());
    std::vector<GradCheck> out;
    NoGradGuard guard;
    for (auto [name, p] : params) {
        std::vector<T> analytic(p.numel(), T(0));
        if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
        double diff2 = 0.0, a2 = 0.0, n2 = 0.0, worst = 0.0;
        auto values = p.mutable_values();
        for (std::size_t i = 0; i < values.size(); ++i) {
            const T saved = values[i];
            values[i] = saved + static_cast<T>(eps);
            const double up = loss().item();
            values[i] = saved - static_cast<T>(eps);
            const double down = loss().item();
            values[i] = saved;
            const double numeric = (up - down) / (2 * eps);
            const double d = analytic[i] - numeric;
            diff2 += d * d;
            a2 += static_cast<double>(analytic[i]) * analytic[i];
            n2 += numeric * numeric;
            worst = std::max(worst, std::abs(d));
        }
        const double denom = std::max(std::sqrt(a2) + std::sqrt(n2), 1e-5);
        out.push_back({name, std::sqrt(diff2) / denom, worst});
    }
    return out;
}

template <typename T>
Tensor<T> random_tensor(std::mt19937_64 &rng, Shape shape, bool requires_grad = true, double scale = 1.0) {
    std::normal_distribution<double> dist(0.0, scale);
    std::vector<T> v(shape_numel(shape));
    for (auto &x : v) x = static_cast<T>(dist(rng));
    return Tensor<T>::from(std::move(shape), std::move(v), requires_grad);
}

}  // namespace teaforn::testing
