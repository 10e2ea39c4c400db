#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "teaforn/tokens.h"

namespace teaforn {

// Token <-> id map with the reserved ids PAD=0, GO=1, EOS=2, UNK=3.
class Vocabulary {
   public:
    Vocabulary();

    // Words seen at least min_frequency times in `corpus`, most frequent first,
    // ties broken alphabetically.
    static Vocabulary build(std::span<const std::vector<std::string>> corpus, std::size_t min_frequency = 1);
    // Ids kFirstWordId.. for `words` in order.
    static Vocabulary from_words(std::span<const std::string> words);

    TokenId id(std::string_view token) const;  // UNK when absent
    const std::string &token(TokenId id) const;
    std::size_t size() const { return tokens_.size(); }
    bool contains(std::string_view token) const;

    std::vector<TokenId> encode(std::span<const std::string> words) const;
    // Skips PAD/GO and stops at EOS.
    std::vector<std::string> decode(std::span<const TokenId> ids) const;

    // One token per line; line i (0-based) holds id i + kFirstWordId.
    void save(const std::filesystem::path &path) const;
    static Vocabulary load(const std::filesystem::path &path);

   private:
    void add(const std::string &token);

    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> ids_;
};

std::vector<std::string> tokenize(std::string_view line);
std::string detokenize(std::span<const std::string> words);

struct SequencePair {
    std::vector<TokenId> source;
    std::vector<TokenId> target;

    bool operator==(const SequencePair &) const = default;
};

struct TextPair {
    std::vector<std::string> source;
    std::vector<std::string> target;

    bool operator==(const TextPair &) const = default;
};

enum class TaskKind { copy, reverse, rotate_map };

std::string_view to_string(TaskKind kind);
TaskKind parse_task_kind(std::string_view name);

// Synthetic translation task over ids [kFirstWordId, vocab_size).
// rotate_map substitutes w -> first + (w - first + shift) mod (vocab_size - first)
// and then reverses every complete block of three tokens; a trailing partial
// block keeps its order.
struct SyntheticTask {
    TaskKind kind = TaskKind::copy;
    std::size_t vocab_size = 64;
    std::size_t min_length = 8;
    std::size_t max_length = 16;
    std::uint64_t seed = 0;
    std::size_t shift = 3;
};

std::vector<TokenId> apply_task(const SyntheticTask &task, std::span<const TokenId> source);

// Pairs first_index .. first_index + n - 1; pair i depends only on (task, i).
std::vector<SequencePair> generate(const SyntheticTask &task, std::size_t n, std::size_t first_index = 0);

// One "source<TAB>target" pair per line, whitespace tokenized.
std::vector<TextPair> load_tsv(const std::filesystem::path &path);
std::vector<TextPair> parse_tsv(std::string_view text);

struct VocabularyPolicy {
    std::size_t min_frequency = 1;
};

// Joint vocabulary over both sides of the pairs.
Vocabulary build_vocabulary(std::span<const TextPair> pairs, const VocabularyPolicy &policy = {});
std::vector<SequencePair> encode_pairs(std::span<const TextPair> pairs, const Vocabulary &vocab);

// Source rows are PAD filled; target rows are GO y_1 .. y_n EOS, PAD filled.
struct Batch {
    TokenGrid source;
    TokenGrid target;
    std::vector<std::uint8_t> source_mask;  // 1 exactly on non-PAD cells
    std::vector<std::uint8_t> target_mask;

    std::size_t size() const { return source.rows; }
    // Scored target tokens in row b (everything after GO, EOS included).
    std::size_t target_length(std::size_t b) const;
};

Batch make_batch(std::span<const SequencePair> pairs);

// Deterministic epoch-shuffled batches. Batch i of the stream is a pure
// function of (pairs, batch_size, seed, i), so a stream can be resumed at any
// step.
class BatchIterator {
   public:
    BatchIterator(std::vector<SequencePair> pairs, std::size_t batch_size, std::uint64_t seed);

    Batch next();
    Batch batch_at(std::uint64_t index) const;
    std::uint64_t position() const { return position_; }
    void seek(std::uint64_t index) { position_ = index; }
    std::size_t batches_per_epoch() const;

   private:
    const std::vector<std::size_t> &epoch_order(std::uint64_t epoch) const;

    std::vector<SequencePair> pairs_;
    std::size_t batch_size_;
    std::uint64_t seed_;
    std::uint64_t position_ = 0;
    mutable std::uint64_t cached_epoch_ = UINT64_MAX;
    mutable std::vector<std::size_t> cached_order_;
};

// SplitMix64 finalizer; used to derive independent streams from a seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace teaforn
