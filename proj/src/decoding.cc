#include "teaforn/decoding.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "teaforn/errors.h"

namespace teaforn {

std::size_t resolve_max_steps(const ModelConfig &config, std::size_t source_length, std::size_t requested) {
    std::size_t steps = requested ? requested : 2 * source_length + 8;
    return std::min(steps, config.max_len - 1);
}

double hypothesis_score(const Hypothesis &h, double length_penalty) {
    if (length_penalty == 0.0) return h.log_prob;
    return h.log_prob / std::pow((5.0 + static_cast<double>(h.tokens.size())) / 6.0, length_penalty);
}

namespace {

template <typename T>
class NextTokenScorer {
   public:
    NextTokenScorer(const Seq2Seq<T> &model, std::span<const TokenId> source) : model_(model) {
        if (source.empty()) throw ContractError("decode: empty source");
        TokenGrid grid{std::vector<TokenId>(source.begin(), source.end()), 1, source.size()};
        memory_ = model.encode(grid, ForwardContext<T>{});
    }

    // Log-probabilities [prefixes.size() x V] of the token following GO + prefix.
    std::vector<double> next(const std::vector<std::vector<TokenId>> &prefixes) {
        const std::size_t n = prefixes.size(), len = prefixes.front().size() + 1;
        TokenGrid grid{{}, n, len};
        grid.ids.reserve(n * len);
        for (const auto &p : prefixes) {
            grid.ids.push_back(kGo);
            grid.ids.insert(grid.ids.end(), p.begin(), p.end());
        }
        auto x = add(model_.embed(grid), model_.timing(1, len));
        auto o = model_.decode(0, x, replicated(n), ForwardContext<T>{});
        auto logp = log_softmax(model_.project_logits(slice(o, 1, len - 1, len)));
        return {logp.values().begin(), logp.values().end()};
    }

    // Log-probabilities [tokens.size() x V] at every position of GO + tokens[0..n-1).
    std::vector<double> all_positions(std::span<const TokenId> tokens) {
        const std::size_t len = tokens.size();
        TokenGrid grid{{kGo}, 1, len};
        grid.ids.insert(grid.ids.end(), tokens.begin(), tokens.end() - 1);
        auto x = add(model_.embed(grid), model_.timing(1, len));
        auto o = model_.decode(0, x, memory_, ForwardContext<T>{});
        auto logp = log_softmax(model_.project_logits(o));
        return {logp.values().begin(), logp.values().end()};
    }

   private:
    const EncoderMemory<T> &replicated(std::size_t n) {
        if (cache_.batch == n) return cache_;
        if (n == 1) return memory_;
        const auto values = memory_.states.values();
        std::vector<T> states;
        states.reserve(values.size() * n);
        for (std::size_t i = 0; i < n; ++i) states.insert(states.end(), values.begin(), values.end());
        cache_.states = Tensor<T>::from({n, memory_.length, model_.config().d_model}, std::move(states));
        cache_.source_keep.clear();
        for (std::size_t i = 0; i < n; ++i)
            cache_.source_keep.insert(cache_.source_keep.end(), memory_.source_keep.begin(), memory_.source_keep.end());
        cache_.batch = n;
        cache_.length = memory_.length;
        return cache_;
    }

    const Seq2Seq<T> &model_;
    EncoderMemory<T> memory_;
    EncoderMemory<T> cache_;
};

struct Candidate {
    double log_prob;
    std::size_t parent;
    TokenId token;
};

// Larger score first; ties to the lower parent, then the lower token id.
bool candidate_before(const Candidate &a, const Candidate &b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    if (a.parent != b.parent) return a.parent < b.parent;
    return a.token < b.token;
}

}  // namespace

Hypothesis greedy_search(const NextTokenFn &next, std::size_t vocab_size, std::size_t max_steps) {
    Hypothesis h;
    std::vector<std::vector<TokenId>> prefix(1);
    for (std::size_t step = 0; step < max_steps; ++step) {
        const auto logp = next(prefix);
        const auto first = logp.begin();
        const auto best = static_cast<TokenId>(std::max_element(first, first + static_cast<std::ptrdiff_t>(vocab_size)) - first);
        h.tokens.push_back(best);
        h.log_prob += logp[static_cast<std::size_t>(best)];
        if (best == kEos) {
            h.finished = true;
            break;
        }
        prefix[0].push_back(best);
    }
    return h;
}

std::vector<Hypothesis> beam_search(const NextTokenFn &next_token, std::size_t vocab_size, std::size_t k,
                                    std::size_t max_steps, double length_penalty) {
    if (k == 0) throw ParameterError("beam width must be at least 1");
    const std::size_t v = vocab_size;
    const double alpha = length_penalty;
    auto ranked_before = [alpha](const Hypothesis &a, const Hypothesis &b) {
        return hypothesis_score(a, alpha) > hypothesis_score(b, alpha);
    };

    std::vector<Hypothesis> live(1), completed;
    std::vector<Candidate> candidates;
    for (std::size_t step = 0; step < max_steps && !live.empty(); ++step) {
        std::vector<std::vector<TokenId>> prefixes;
        prefixes.reserve(live.size());
        for (const auto &h : live) prefixes.push_back(h.tokens);
        const auto logp = next_token(prefixes);

        candidates.clear();
        candidates.reserve(live.size() * v);
        for (std::size_t i = 0; i < live.size(); ++i)
            for (std::size_t w = 0; w < v; ++w)
                candidates.push_back({live[i].log_prob + logp[i * v + w], i, static_cast<TokenId>(w)});
        const std::size_t keep = std::min(k, candidates.size());
        std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                          candidate_before);

        std::vector<Hypothesis> next;
        next.reserve(keep);
        for (std::size_t c = 0; c < keep; ++c) {
            Hypothesis h;
            h.tokens = live[candidates[c].parent].tokens;
            h.tokens.push_back(candidates[c].token);
            h.log_prob = candidates[c].log_prob;
            h.finished = candidates[c].token == kEos;
            (h.finished ? completed : next).push_back(std::move(h));
        }
        live = std::move(next);

        if (completed.size() >= k && !live.empty()) {
            std::stable_sort(completed.begin(), completed.end(), ranked_before);
            double best_live = -INFINITY;
            for (const auto &h : live) best_live = std::max(best_live, hypothesis_score(h, alpha));
            if (best_live <= hypothesis_score(completed[k - 1], alpha)) break;
        }
    }

    std::stable_sort(completed.begin(), completed.end(), ranked_before);
    if (completed.size() > k) completed.resize(k);
    if (completed.size() < k) {
        std::stable_sort(live.begin(), live.end(), ranked_before);
        for (auto &h : live) {
            if (completed.size() == k) break;
            completed.push_back(std::move(h));
        }
    }
    return completed;
}

template <typename T>
Hypothesis greedy_decode(const Seq2Seq<T> &model, std::span<const TokenId> source, const DecodeOptions &options) {
    NoGradGuard guard;
    NextTokenScorer<T> scorer(model, source);
    return greedy_search([&](const auto &prefixes) { return scorer.next(prefixes); }, model.config().vocab_size,
                         resolve_max_steps(model.config(), source.size(), options.max_steps));
}

template <typename T>
std::vector<Hypothesis> beam_search(const Seq2Seq<T> &model, std::span<const TokenId> source, std::size_t k,
                                    const DecodeOptions &options) {
    if (k == 0) throw ParameterError("beam width must be at least 1");
    NoGradGuard guard;
    NextTokenScorer<T> scorer(model, source);
    return beam_search([&](const auto &prefixes) { return scorer.next(prefixes); }, model.config().vocab_size, k,
                       resolve_max_steps(model.config(), source.size(), options.max_steps), options.length_penalty);
}

template <typename T>
double score_sequence(const Seq2Seq<T> &model, std::span<const TokenId> source, std::span<const TokenId> tokens) {
    const std::size_t v = model.config().vocab_size;
    for (std::size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= v)
            throw IndexError("score_sequence: token " + std::to_string(tokens[i]) + " at position " +
                             std::to_string(i) + " outside vocabulary of " + std::to_string(v));
    if (tokens.empty()) return 0.0;
    NoGradGuard guard;
    NextTokenScorer<T> scorer(model, source);
    const auto logp = scorer.all_positions(tokens);
    double total = 0.0;
    for (std::size_t i = 0; i < tokens.size(); ++i) total += logp[i * v + static_cast<std::size_t>(tokens[i])];
    return total;
}

#define TEAFORN_INSTANTIATE(T)                                                                                  \
    template Hypothesis greedy_decode(const Seq2Seq<T> &, std::span<const TokenId>, const DecodeOptions &);     \
    template std::vector<Hypothesis> beam_search(const Seq2Seq<T> &, std::span<const TokenId>, std::size_t,     \
                                                 const DecodeOptions &);                                        \
    template double score_sequence(const Seq2Seq<T> &, std::span<const TokenId>, std::span<const TokenId>);

TEAFORN_INSTANTIATE(float)
TEAFORN_INSTANTIATE(double)

}  // namespace teaforn
