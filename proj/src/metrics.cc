#include "teaforn/metrics.h"

#include <algorithm>
#include <cmath>
#include <map>

#include "teaforn/errors.h"

namespace teaforn {

namespace {

void check_corpus(std::span<const Sequence> candidates, std::span<const Sequence> references) {
    if (candidates.empty()) throw ContractError("metric: empty candidate list");
    if (candidates.size() != references.size())
        throw ContractError("metric: " + std::to_string(candidates.size()) + " candidates for " +
                            std::to_string(references.size()) + " references");
}

std::map<std::vector<TokenId>, std::size_t> ngram_counts(const Sequence &s, std::size_t n) {
    std::map<std::vector<TokenId>, std::size_t> counts;
    for (std::size_t i = 0; i + n <= s.size(); ++i) ++counts[Sequence(s.begin() + i, s.begin() + i + n)];
    return counts;
}

std::size_t clipped_overlap(const Sequence &candidate, const Sequence &reference, std::size_t n) {
    const auto ref = ngram_counts(reference, n);
    std::size_t overlap = 0;
    for (const auto &[gram, count] : ngram_counts(candidate, n)) {
        auto it = ref.find(gram);
        if (it != ref.end()) overlap += std::min(count, it->second);
    }
    return overlap;
}

double f1(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace

CorpusScore bleu(std::span<const Sequence> candidates, std::span<const Sequence> references,
                 const BleuOptions &options) {
    check_corpus(candidates, references);
    if (options.max_n < 1) throw ParameterError("bleu: max_n must be at least 1");
    CorpusScore score;
    score.metric = "bleu";
    score.sentences = candidates.size();
    std::vector<std::size_t> matches(options.max_n, 0), totals(options.max_n, 0);
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        score.candidate_length += candidates[i].size();
        score.reference_length += references[i].size();
        for (std::size_t n = 1; n <= options.max_n; ++n) {
            matches[n - 1] += clipped_overlap(candidates[i], references[i], n);
            if (candidates[i].size() >= n) totals[n - 1] += candidates[i].size() - n + 1;
        }
    }

    double log_sum = 0.0;
    bool zero = false;
    for (std::size_t n = 1; n <= options.max_n; ++n) {
        double m = static_cast<double>(matches[n - 1]), t = static_cast<double>(totals[n - 1]);
        if (options.add_one_smoothing && n >= 2) m += 1.0, t += 1.0;
        const double p = t > 0.0 ? m / t : 0.0;
        score.precisions.push_back(p);
        if (p == 0.0) zero = true;
        else log_sum += std::log(p);
    }
    const double c = static_cast<double>(score.candidate_length), r = static_cast<double>(score.reference_length);
    score.brevity_penalty = c >= r ? 1.0 : (c > 0.0 ? std::exp(1.0 - r / c) : 0.0);
    score.value = zero ? 0.0 : 100.0 * score.brevity_penalty * std::exp(log_sum / static_cast<double>(options.max_n));
    score.value = std::clamp(score.value, 0.0, 100.0);
    return score;
}

std::size_t lcs_length(std::span<const TokenId> a, std::span<const TokenId> b) {
    std::vector<std::size_t> row(b.size() + 1, 0), prev(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        std::swap(row, prev);
        for (std::size_t j = 1; j <= b.size(); ++j)
            row[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], row[j - 1]);
    }
    return a.empty() ? 0 : row[b.size()];
}

RougeScores rouge(std::span<const Sequence> candidates, std::span<const Sequence> references) {
    check_corpus(candidates, references);
    RougeScores out;
    out.rouge1.metric = "rouge1";
    out.rouge2.metric = "rouge2";
    out.rouge_l.metric = "rougeL";
    auto accumulate = [](CorpusScore &s, double p, double r) {
        s.precision += p;
        s.recall += r;
        s.f_measure += f1(p, r);
    };
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto &c = candidates[i], &r = references[i];
        for (std::size_t n = 1; n <= 2; ++n) {
            const double overlap = static_cast<double>(clipped_overlap(c, r, n));
            const double cn = c.size() >= n ? static_cast<double>(c.size() - n + 1) : 0.0;
            const double rn = r.size() >= n ? static_cast<double>(r.size() - n + 1) : 0.0;
            accumulate(n == 1 ? out.rouge1 : out.rouge2, cn > 0 ? overlap / cn : 0.0, rn > 0 ? overlap / rn : 0.0);
        }
        const double lcs = static_cast<double>(lcs_length(c, r));
        accumulate(out.rouge_l, c.empty() ? 0.0 : lcs / static_cast<double>(c.size()),
                   r.empty() ? 0.0 : lcs / static_cast<double>(r.size()));
    }
    const double count = static_cast<double>(candidates.size());
    for (CorpusScore *s : {&out.rouge1, &out.rouge2, &out.rouge_l}) {
        s->precision /= count;
        s->recall /= count;
        s->f_measure /= count;
        s->value = std::clamp(100.0 * s->f_measure, 0.0, 100.0);
        s->sentences = candidates.size();
    }
    return out;
}

double token_accuracy(std::span<const Sequence> candidates, std::span<const Sequence> references) {
    check_corpus(candidates, references);
    double total = 0.0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
        const auto &c = candidates[i], &r = references[i];
        const std::size_t longest = std::max(c.size(), r.size()), shortest = std::min(c.size(), r.size());
        if (longest == 0) {
            total += 1.0;
            continue;
        }
        std::size_t hits = 0;
        for (std::size_t t = 0; t < shortest; ++t) hits += c[t] == r[t];
        total += static_cast<double>(hits) / static_cast<double>(longest);
    }
    return total / static_cast<double>(candidates.size());
}

Sequence strip_special(std::span<const TokenId> tokens) {
    Sequence out;
    for (TokenId t : tokens) {
        if (t == kEos) break;
        if (t != kGo && t != kPad) out.push_back(t);
    }
    return out;
}

}  // namespace teaforn
