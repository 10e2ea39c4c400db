#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "teaforn/errors.h"
#include "teaforn/metrics.h"

using namespace teaforn;

namespace {

// Naive corpus BLEU: n-grams compared element by element, no maps.
double naive_bleu(const std::vector<Sequence> &cand, const std::vector<Sequence> &ref, std::size_t max_n = 4) {
    std::vector<double> match(max_n, 0), total(max_n, 0);
    double c = 0, r = 0;
    for (std::size_t i = 0; i < cand.size(); ++i) {
        c += cand[i].size();
        r += ref[i].size();
        for (std::size_t n = 1; n <= max_n; ++n) {
            if (cand[i].size() < n) continue;
            std::vector<bool> used(ref[i].size() >= n ? ref[i].size() - n + 1 : 0, false);
            for (std::size_t a = 0; a + n <= cand[i].size(); ++a) {
                total[n - 1] += 1;
                for (std::size_t b = 0; b < used.size(); ++b) {
                    if (used[b]) continue;
                    if (std::equal(cand[i].begin() + a, cand[i].begin() + a + n, ref[i].begin() + b)) {
                        used[b] = true;
                        match[n - 1] += 1;
                        break;
                    }
                }
            }
        }
    }
    double log_mean = 0;
    for (std::size_t n = 0; n < max_n; ++n) {
        if (match[n] == 0) return 0.0;
        log_mean += std::log(match[n] / total[n]) / max_n;
    }
    const double bp = c >= r ? 1.0 : std::exp(1.0 - r / c);
    return 100.0 * bp * std::exp(log_mean);
}

std::vector<Sequence> random_corpus(std::mt19937_64 &rng, std::size_t n, int vocab, std::size_t max_len) {
    std::uniform_int_distribution<std::size_t> len(1, max_len);
    std::uniform_int_distribution<TokenId> word(4, 3 + vocab);
    std::vector<Sequence> out(n);
    for (auto &s : out) {
        s.resize(len(rng));
        for (auto &t : s) t = word(rng);
    }
    return out;
}

}  // namespace

TEST_CASE("bleu hand examples") {
    std::vector<Sequence> refs{{4, 5, 6, 7, 8}, {9, 10, 11, 12}};
    CHECK(bleu(refs, refs).value == doctest::Approx(100.0));

    std::vector<Sequence> cand{{4, 4, 4, 4}}, ref{{4, 5, 6, 7}};
    auto s = bleu(cand, ref);
    CHECK(s.precisions[0] == doctest::Approx(0.25));
    CHECK(s.precisions[1] == 0.0);
    CHECK(s.value == 0.0);

    CHECK_THROWS_AS(bleu(std::vector<Sequence>{}, std::vector<Sequence>{}), ContractError);
    CHECK_THROWS_AS(bleu(cand, refs), ContractError);
}

TEST_CASE("bleu matches a naive counter") {
    std::mt19937_64 rng(1);
    int nonzero = 0;
    for (int trial = 0; trial < 200; ++trial) {
        auto refs = random_corpus(rng, 5, 4, 12);
        auto cand = random_corpus(rng, 5, 4, 12);
        const double expect = naive_bleu(cand, refs);
        CHECK(std::abs(bleu(cand, refs).value - expect) < 1e-6);
        nonzero += expect > 0;
    }
    CHECK(nonzero > 20);
}

TEST_CASE("bleu brevity penalty and smoothing") {
    std::vector<Sequence> cand{{4, 5, 6}}, ref{{4, 5, 6, 7, 8, 9}};
    auto s = bleu(cand, ref);
    CHECK(s.brevity_penalty == doctest::Approx(std::exp(1.0 - 2.0)));
    // A 3-token candidate has no 4-grams.
    CHECK(s.value == 0.0);

    BleuOptions smooth;
    smooth.add_one_smoothing = true;
    auto sm = bleu(cand, ref, smooth);
    const double expect = 100.0 * std::exp(-1.0) * std::pow((3.0 / 3.0) * (3.0 / 3.0) * (2.0 / 2.0) * (1.0 / 1.0), 0.25);
    CHECK(sm.value == doctest::Approx(expect));
}

TEST_CASE("bleu and rouge are invariant to pair order") {
    std::mt19937_64 rng(3);
    auto refs = random_corpus(rng, 8, 3, 10);
    auto cand = random_corpus(rng, 8, 3, 10);
    std::vector<std::size_t> order{3, 1, 7, 0, 5, 2, 6, 4};
    std::vector<Sequence> pc, pr;
    for (auto i : order) {
        pc.push_back(cand[i]);
        pr.push_back(refs[i]);
    }
    CHECK(bleu(cand, refs).value == doctest::Approx(bleu(pc, pr).value).epsilon(1e-12));
    auto a = rouge(cand, refs), b = rouge(pc, pr);
    CHECK(a.rouge1.value == doctest::Approx(b.rouge1.value).epsilon(1e-12));
    CHECK(a.rouge2.value == doctest::Approx(b.rouge2.value).epsilon(1e-12));
    CHECK(a.rouge_l.value == doctest::Approx(b.rouge_l.value).epsilon(1e-12));
}

TEST_CASE("self-concatenation takes the unpenalized branch") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 50; ++trial) {
        auto refs = random_corpus(rng, 4, 3, 8);
        auto cand = random_corpus(rng, 4, 3, 8);
        auto doubled = cand;
        for (auto &s : doubled) s.insert(s.end(), s.begin(), s.end());
        auto d = bleu(doubled, refs);
        if (d.candidate_length >= d.reference_length) CHECK(d.brevity_penalty == 1.0);
        CHECK(d.value >= 0.0);
        CHECK(d.value <= 100.0);
    }
}

TEST_CASE("rouge hand examples") {
    std::vector<Sequence> same{{4, 5, 6}};
    auto r = rouge(same, same);
    CHECK(r.rouge1.value == doctest::Approx(100.0));
    CHECK(r.rouge2.value == doctest::Approx(100.0));
    CHECK(r.rouge_l.value == doctest::Approx(100.0));

    std::vector<Sequence> cand{{4, 5}}, ref{{5, 4}};
    auto s = rouge(cand, ref);
    CHECK(s.rouge1.value == doctest::Approx(100.0));
    CHECK(s.rouge2.value == 0.0);
    CHECK(s.rouge_l.value == doctest::Approx(50.0));
    CHECK(s.rouge_l.precision == doctest::Approx(0.5));
    CHECK(s.rouge_l.recall == doctest::Approx(0.5));
}

TEST_CASE("rouge properties on random pairs") {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        auto refs = random_corpus(rng, 1, 4, 9);
        auto cand = random_corpus(rng, 1, 4, 9);
        auto r = rouge(cand, refs);
        CHECK(r.rouge_l.value <= r.rouge1.value + 1e-9);
        for (const auto *s : {&r.rouge1, &r.rouge2, &r.rouge_l}) {
            CHECK(s->value >= 0.0);
            CHECK(s->value <= 100.0);
            const double p = s->precision, q = s->recall;
            CHECK(s->f_measure == doctest::Approx(p + q > 0 ? 2 * p * q / (p + q) : 0.0));
        }
    }
}

TEST_CASE("lcs") {
    CHECK(lcs_length(Sequence{4, 5, 6, 7}, Sequence{5, 7, 4}) == 2);
    CHECK(lcs_length(Sequence{}, Sequence{4}) == 0);
    CHECK(lcs_length(Sequence{4, 4}, Sequence{4, 4, 4}) == 2);
}

TEST_CASE("token accuracy") {
    std::vector<Sequence> same{{4, 5, 6}};
    CHECK(token_accuracy(same, same) == 1.0);
    CHECK(token_accuracy(std::vector<Sequence>{{4, 5}}, std::vector<Sequence>{{6, 7}}) == 0.0);
    CHECK(token_accuracy(std::vector<Sequence>{{4, 5, 6}}, std::vector<Sequence>{{4, 9, 6}}) ==
          doctest::Approx(2.0 / 3.0));
    CHECK(token_accuracy(std::vector<Sequence>{{4, 5}}, std::vector<Sequence>{{4, 5, 6, 7}}) == doctest::Approx(0.5));
    CHECK(token_accuracy(std::vector<Sequence>{{}}, std::vector<Sequence>{{}}) == 1.0);
}

TEST_CASE("strip special tokens") {
    CHECK(strip_special(Sequence{kGo, 4, 5, kEos, 6}) == Sequence{4, 5});
    CHECK(strip_special(Sequence{4, kPad, 5}) == Sequence{4, 5});
}
