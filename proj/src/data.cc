#include "teaforn/data.h"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "teaforn/errors.h"

namespace teaforn {

namespace {

const char *const kReservedTokens[] = {"<pad>", "<go>", "</s>", "<unk>"};

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
    for (const char *t : kReservedTokens) add(t);
}

void Vocabulary::add(const std::string &token) {
    if (ids_.count(token)) return;
    ids_.emplace(token, static_cast<TokenId>(tokens_.size()));
    tokens_.push_back(token);
}

Vocabulary Vocabulary::build(std::span<const std::vector<std::string>> corpus, std::size_t min_frequency) {
    std::map<std::string, std::size_t> counts;
    for (const auto &sentence : corpus)
        for (const auto &w : sentence) ++counts[w];
    std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
    std::stable_sort(ranked.begin(), ranked.end(), [](const auto &a, const auto &b) { return a.second > b.second; });
    Vocabulary v;
    for (const auto &[word, count] : ranked) {
        if (count >= min_frequency) v.add(word);
    }
    return v;
}

Vocabulary Vocabulary::from_words(std::span<const std::string> words) {
    Vocabulary v;
    for (const auto &w : words) v.add(w);
    return v;
}

TokenId Vocabulary::id(std::string_view token) const {
    auto it = ids_.find(std::string(token));
    return it == ids_.end() ? kUnk : it->second;
}

const std::string &Vocabulary::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw IndexError("vocabulary: id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

bool Vocabulary::contains(std::string_view token) const { return ids_.count(std::string(token)) > 0; }

std::vector<TokenId> Vocabulary::encode(std::span<const std::string> words) const {
    std::vector<TokenId> out;
    out.reserve(words.size());
    for (const auto &w : words) out.push_back(id(w));
    return out;
}

std::vector<std::string> Vocabulary::decode(std::span<const TokenId> ids) const {
    std::vector<std::string> out;
    for (TokenId id : ids) {
        if (id == kEos) break;
        if (id == kPad || id == kGo) continue;
        out.push_back(token(id));
    }
    return out;
}

void Vocabulary::save(const std::filesystem::path &path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
    for (std::size_t i = kFirstWordId; i < tokens_.size(); ++i) out << tokens_[i] << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read vocabulary " + path.string());
    Vocabulary v;
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
        ++n;
        if (line.empty() || v.contains(line)) throw ParseError(n, "empty or duplicate vocabulary entry");
        v.add(line);
    }
    return v;
}

std::vector<std::string> tokenize(std::string_view line) {
    std::vector<std::string> out;
    std::istringstream in{std::string(line)};
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

std::string detokenize(std::span<const std::string> words) {
    std::string out;
    for (std::size_t i = 0; i < words.size(); ++i) {
        if (i) out += ' ';
        out += words[i];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic tasks

std::string_view to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::copy: return "copy";
        case TaskKind::reverse: return "reverse";
        case TaskKind::rotate_map: return "rotate_map";
    }
    return "?";
}

TaskKind parse_task_kind(std::string_view name) {
    if (name == "copy") return TaskKind::copy;
    if (name == "reverse") return TaskKind::reverse;
    if (name == "rotate_map") return TaskKind::rotate_map;
    throw ParameterError("unknown task '" + std::string(name) + "'");
}

std::vector<TokenId> apply_task(const SyntheticTask &task, std::span<const TokenId> source) {
    std::vector<TokenId> out(source.begin(), source.end());
    switch (task.kind) {
        case TaskKind::copy: break;
        case TaskKind::reverse: std::reverse(out.begin(), out.end()); break;
        case TaskKind::rotate_map: {
            const auto range = static_cast<TokenId>(task.vocab_size) - kFirstWordId;
            const auto shift = static_cast<TokenId>(task.shift % static_cast<std::size_t>(range));
            for (auto &w : out) w = kFirstWordId + (w - kFirstWordId + shift) % range;
            for (std::size_t i = 0; i + 3 <= out.size(); i += 3) std::swap(out[i], out[i + 2]);
            break;
        }
    }
    return out;
}

std::vector<SequencePair> generate(const SyntheticTask &task, std::size_t n, std::size_t first_index) {
    if (task.min_length < 1 || task.min_length > task.max_length) {
        throw ParameterError("synthetic task: empty length range [" + std::to_string(task.min_length) + ", " +
                             std::to_string(task.max_length) + "]");
    }
    if (task.vocab_size <= static_cast<std::size_t>(kFirstWordId)) {
        throw ParameterError("synthetic task: vocab_size must exceed the reserved ids");
    }
    if (n < 1) throw ParameterError("synthetic task: n must be at least 1");
    const std::uint64_t span = task.max_length - task.min_length + 1;
    const std::uint64_t range = task.vocab_size - kFirstWordId;
    std::vector<SequencePair> out;
    out.reserve(n);
    for (std::size_t i = first_index; i < first_index + n; ++i) {
        std::mt19937_64 rng(mix_seed(task.seed, i));
        const std::size_t len = task.min_length + static_cast<std::size_t>(rng() % span);
        SequencePair p;
        p.source.resize(len);
        for (auto &w : p.source) w = kFirstWordId + static_cast<TokenId>(rng() % range);
        p.target = apply_task(task, p.source);
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// TSV corpora

std::vector<TextPair> parse_tsv(std::string_view text) {
    std::vector<TextPair> out;
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;
        const std::size_t tabs = static_cast<std::size_t>(std::count(line.begin(), line.end(), '\t'));
        if (tabs != 1) {
            throw ParseError(line_no, "expected exactly one tab separator, found " + std::to_string(tabs));
        }
        const std::size_t tab = line.find('\t');
        out.push_back({tokenize(line.substr(0, tab)), tokenize(line.substr(tab + 1))});
    }
    return out;
}

std::vector<TextPair> load_tsv(const std::filesystem::path &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read corpus " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_tsv(buffer.str());
}

Vocabulary build_vocabulary(std::span<const TextPair> pairs, const VocabularyPolicy &policy) {
    std::vector<std::vector<std::string>> sentences;
    sentences.reserve(pairs.size() * 2);
    for (const auto &p : pairs) {
        sentences.push_back(p.source);
        sentences.push_back(p.target);
    }
    return Vocabulary::build(sentences, policy.min_frequency);
}

std::vector<SequencePair> encode_pairs(std::span<const TextPair> pairs, const Vocabulary &vocab) {
    std::vector<SequencePair> out;
    out.reserve(pairs.size());
    for (const auto &p : pairs) out.push_back({vocab.encode(p.source), vocab.encode(p.target)});
    return out;
}

// ---------------------------------------------------------------------------
// Batching

std::size_t Batch::target_length(std::size_t b) const {
    std::size_t n = 0;
    for (std::size_t t = 0; t < target.cols; ++t) n += target_mask[b * target.cols + t];
    return n > 0 ? n - 1 : 0;
}

Batch make_batch(std::span<const SequencePair> pairs) {
    if (pairs.empty()) throw ContractError("make_batch: no pairs");
    Batch batch;
    std::size_t src_len = 1, tgt_len = 0;
    for (const auto &p : pairs) {
        src_len = std::max(src_len, p.source.size());
        tgt_len = std::max(tgt_len, p.target.size());
    }
    tgt_len += 2;
    const std::size_t b = pairs.size();
    batch.source = {std::vector<TokenId>(b * src_len, kPad), b, src_len};
    batch.target = {std::vector<TokenId>(b * tgt_len, kPad), b, tgt_len};
    for (std::size_t i = 0; i < b; ++i) {
        std::copy(pairs[i].source.begin(), pairs[i].source.end(), batch.source.ids.begin() + static_cast<std::ptrdiff_t>(i * src_len));
        auto row = batch.target.ids.begin() + static_cast<std::ptrdiff_t>(i * tgt_len);
        row[0] = kGo;
        std::copy(pairs[i].target.begin(), pairs[i].target.end(), row + 1);
        row[static_cast<std::ptrdiff_t>(pairs[i].target.size() + 1)] = kEos;
    }
    batch.source_mask.resize(batch.source.ids.size());
    batch.target_mask.resize(batch.target.ids.size());
    for (std::size_t i = 0; i < batch.source.ids.size(); ++i) batch.source_mask[i] = batch.source.ids[i] != kPad;
    for (std::size_t i = 0; i < batch.target.ids.size(); ++i) batch.target_mask[i] = batch.target.ids[i] != kPad;
    return batch;
}

BatchIterator::BatchIterator(std::vector<SequencePair> pairs, std::size_t batch_size, std::uint64_t seed)
    : pairs_(std::move(pairs)), batch_size_(batch_size), seed_(seed) {
    if (batch_size_ < 1) throw ParameterError("batch_size must be at least 1");
    if (pairs_.empty()) throw ContractError("BatchIterator: no pairs");
}

std::size_t BatchIterator::batches_per_epoch() const { return (pairs_.size() + batch_size_ - 1) / batch_size_; }

const std::vector<std::size_t> &BatchIterator::epoch_order(std::uint64_t epoch) const {
    if (epoch == cached_epoch_) return cached_order_;
    std::vector<std::size_t> order(pairs_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(seed_, epoch));
    // Fisher-Yates with an explicit draw so the order does not depend on the
    // standard library's shuffle.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    cached_epoch_ = epoch;
    cached_order_ = std::move(order);
    return cached_order_;
}

Batch BatchIterator::batch_at(std::uint64_t index) const {
    const std::uint64_t per_epoch = batches_per_epoch();
    const std::uint64_t epoch = index / per_epoch;
    const std::size_t offset = static_cast<std::size_t>(index % per_epoch) * batch_size_;
    const auto &order = epoch_order(epoch);
    const std::size_t end = std::min(offset + batch_size_, order.size());
    std::vector<SequencePair> chosen;
    chosen.reserve(end - offset);
    for (std::size_t i = offset; i < end; ++i) chosen.push_back(pairs_[order[i]]);
    return make_batch(chosen);
}

Batch BatchIterator::next() { return batch_at(position_++); }

}  // namespace teaforn
