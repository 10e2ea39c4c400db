#include "teaforn/experiment.h"

#include <sys/resource.h>

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "teaforn/errors.h"
#include "teaforn/metrics.h"

namespace teaforn {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string trim(std::string_view s) {
    const auto first = s.find_first_not_of(" \t\r\n");
    if (first == std::string_view::npos) return {};
    const auto last = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(first, last - first + 1));
}

std::size_t parse_size(const std::string &key, const std::string &value) {
    std::size_t used = 0;
    unsigned long long v = 0;
    try {
        v = std::stoull(value, &used);
    } catch (const std::exception &) {
        used = 0;
    }
    if (used != value.size() || value.empty() || value[0] == '-')
        throw ParameterError("config key '" + key + "': expected a non-negative integer, got '" + value + "'");
    return static_cast<std::size_t>(v);
}

double parse_double(const std::string &key, const std::string &value) {
    std::size_t used = 0;
    double v = 0;
    try {
        v = std::stod(value, &used);
    } catch (const std::exception &) {
        used = 0;
    }
    if (used != value.size() || value.empty())
        throw ParameterError("config key '" + key + "': expected a number, got '" + value + "'");
    return v;
}

bool parse_bool(const std::string &key, const std::string &value) {
    if (value == "true" || value == "1" || value == "yes" || value == "on") return true;
    if (value == "false" || value == "0" || value == "no" || value == "off") return false;
    throw ParameterError("config key '" + key + "': expected a boolean, got '" + value + "'");
}

std::string bool_string(bool b) { return b ? "true" : "false"; }

std::string join_doubles(const std::vector<double> &values) {
    std::string out;
    for (std::size_t i = 0; i < values.size(); ++i) out += (i ? "," : "") + format_double(values[i]);
    return out;
}

std::string rng_state_string(const std::mt19937_64 &dropout, const std::mt19937_64 &word_drop) {
    std::ostringstream out;
    out << dropout << '|' << word_drop;
    return out.str();
}

void restore_rng_state(const std::string &state, std::mt19937_64 &dropout, std::mt19937_64 &word_drop) {
    const auto bar = state.find('|');
    if (bar == std::string::npos) throw IncompatibleCheckpointError("checkpoint rng state is malformed");
    std::istringstream a(state.substr(0, bar)), b(state.substr(bar + 1));
    a >> dropout;
    b >> word_drop;
    if (a.fail() || b.fail()) throw IncompatibleCheckpointError("checkpoint rng state is malformed");
}

}  // namespace

// Shortest text that parses back to v.
std::string format_double(double v) {
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

KeyValues parse_key_values(std::string_view text) {
    KeyValues out;
    std::size_t line_no = 0, pos = 0;
    while (pos <= text.size()) {
        const auto end = std::min(text.find('\n', pos), text.size());
        std::string_view line = text.substr(pos, end - pos);
        ++line_no;
        pos = end + 1;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        const std::string stripped = trim(line);
        if (stripped.empty()) {
            if (end == text.size()) break;
            continue;
        }
        const auto eq = stripped.find('=');
        if (eq == std::string::npos) throw ParseError(line_no, "expected key=value");
        auto key = trim(std::string_view(stripped).substr(0, eq));
        auto value = trim(std::string_view(stripped).substr(eq + 1));
        if (key.empty()) throw ParseError(line_no, "empty key");
        out[key] = value;
        if (end == text.size()) break;
    }
    return out;
}

KeyValues load_key_values(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config " + path.string());
    std::stringstream buffer;
    buffer << in.rdbuf();
    return parse_key_values(buffer.str());
}

void TrainConfig::validate() const {
    if (steps < 1) throw ParameterError("train: steps must be positive");
    if (batch_size < 1) throw ParameterError("train: batch_size must be positive");
    if (checkpoint_every < 1 || checkpoint_every > steps)
        throw ParameterError("train: checkpoint_every must lie in [1, steps]");
    if (keep_last < 1) throw ParameterError("train: keep_last must be at least 1");
    if (average_last > keep_last) throw ParameterError("train: average_last exceeds keep_last");
    if (warmup_steps < 1) throw ParameterError("train: warmup_steps must be positive");
    if (!(lr_scale > 0.0)) throw ParameterError("train: lr_scale must be positive");
}

Dataset prepare_data(const DataSource &source) {
    Dataset data;
    if (source.task) {
        const auto &task = *source.task;
        data.train = generate(task, source.train_pairs, 0);
        if (source.valid_pairs) data.valid = generate(task, source.valid_pairs, source.train_pairs);
        if (source.test_pairs) data.test = generate(task, source.test_pairs, source.train_pairs + source.valid_pairs);
        data.vocab_size = task.vocab_size;
        return data;
    }
    if (source.corpus.empty()) throw ParameterError("data: neither a task nor a corpus was given");
    const auto text = load_tsv(source.corpus);
    if (text.size() < source.valid_pairs + source.test_pairs + 1)
        throw ParameterError("data: corpus has " + std::to_string(text.size()) + " pairs, fewer than the held-out splits");
    const std::size_t n_train = text.size() - source.valid_pairs - source.test_pairs;
    const std::span<const TextPair> all(text);
    auto vocab = build_vocabulary(all.first(n_train), VocabularyPolicy{source.min_frequency});
    data.train = encode_pairs(all.first(n_train), vocab);
    data.valid = encode_pairs(all.subspan(n_train, source.valid_pairs), vocab);
    data.test = encode_pairs(all.subspan(n_train + source.valid_pairs), vocab);
    data.vocab_size = vocab.size();
    data.vocabulary = std::move(vocab);
    return data;
}

void apply_key_values(const KeyValues &values, RunSpec &spec) {
    if (auto it = values.find("preset"); it != values.end()) {
        spec.preset = it->second;
        spec.model = preset_config(it->second, spec.model.vocab_size, spec.model.max_len);
    }
    auto &m = spec.model;
    auto &s = spec.stack;
    auto &t = spec.train;
    auto &w = spec.word_drop;
    auto &d = spec.data;
    auto task = [&]() -> SyntheticTask & {
        if (!d.task) d.task = SyntheticTask{};
        return *d.task;
    };
    for (const auto &[key, value] : values) {
        const std::string &k = key, &v = value;
        if (k == "preset") continue;
        else if (k == "vocab_size") m.vocab_size = parse_size(k, v);
        else if (k == "d_model") m.d_model = parse_size(k, v);
        else if (k == "d_ff") m.d_ff = parse_size(k, v);
        else if (k == "heads") m.heads = parse_size(k, v);
        else if (k == "encoder_layers") m.encoder_layers = parse_size(k, v);
        else if (k == "decoder_layers") m.decoder_layers = parse_size(k, v);
        else if (k == "dropout") m.dropout = parse_double(k, v);
        else if (k == "max_len") m.max_len = parse_size(k, v);
        else if (k == "tie_embeddings") m.tie_embeddings = parse_bool(k, v);
        else if (k == "label_smoothing") m.label_smoothing = parse_double(k, v);
        else if (k == "n_grams") s.n = parse_size(k, v);
        else if (k == "lambda") s.lambda = parse_double(k, v);
        else if (k == "share_weights") s.share_weights = parse_bool(k, v);
        else if (k == "mode") s.mode = parse_feeding_mode(v);
        else if (k == "topk") s.top_k = parse_size(k, v);
        else if (k == "reuse_dropout_masks") s.reuse_dropout_masks = parse_bool(k, v);
        else if (k == "offset_weights") {
            s.weight_override.clear();
            std::stringstream in(v);
            std::string item;
            while (std::getline(in, item, ','))
                if (!trim(item).empty()) s.weight_override.push_back(parse_double(k, trim(item)));
        }
        else if (k == "word_drop") w.p_drop = parse_double(k, v);
        else if (k == "word_drop_rescale") w.rescale = parse_bool(k, v);
        else if (k == "word_drop_before_timing") w.before_timing = parse_bool(k, v);
        else if (k == "steps") t.steps = parse_size(k, v);
        else if (k == "batch_size") t.batch_size = parse_size(k, v);
        else if (k == "seed") t.seed = parse_size(k, v);
        else if (k == "lr_scale") t.lr_scale = parse_double(k, v);
        else if (k == "warmup_steps") t.warmup_steps = parse_size(k, v);
        else if (k == "beta1") t.adam.beta1 = parse_double(k, v);
        else if (k == "beta2") t.adam.beta2 = parse_double(k, v);
        else if (k == "epsilon") t.adam.epsilon = parse_double(k, v);
        else if (k == "clip_norm") t.adam.clip_norm = parse_double(k, v);
        else if (k == "checkpoint_every") t.checkpoint_every = parse_size(k, v);
        else if (k == "keep_last") t.keep_last = parse_size(k, v);
        else if (k == "eval_every") t.eval_every = parse_size(k, v);
        else if (k == "selection_metric") t.selection_metric = v;
        else if (k == "eval_sentences") t.eval_sentences = parse_size(k, v);
        else if (k == "average_last") t.average_last = parse_size(k, v);
        else if (k == "out_dir") t.out_dir = v;
        else if (k == "resume_from") t.resume_from = v;
        else if (k == "task") {
            if (v.empty() || v == "none") d.task.reset();
            else task().kind = parse_task_kind(v);
        }
        else if (k == "task_vocab") task().vocab_size = parse_size(k, v);
        else if (k == "min_length") task().min_length = parse_size(k, v);
        else if (k == "max_length") task().max_length = parse_size(k, v);
        else if (k == "shift") task().shift = parse_size(k, v);
        else if (k == "data_seed") task().seed = parse_size(k, v);
        else if (k == "corpus") {
            d.corpus = v;
            if (!v.empty()) d.task.reset();
        }
        else if (k == "train_pairs") d.train_pairs = parse_size(k, v);
        else if (k == "valid_pairs") d.valid_pairs = parse_size(k, v);
        else if (k == "test_pairs") d.test_pairs = parse_size(k, v);
        else if (k == "min_frequency") d.min_frequency = parse_size(k, v);
        else throw ParameterError("unknown config key '" + k + "'");
    }
}

KeyValues to_key_values(const RunSpec &spec) {
    KeyValues kv;
    const auto &m = spec.model;
    const auto &s = spec.stack;
    const auto &t = spec.train;
    kv["preset"] = spec.preset;
    kv["vocab_size"] = std::to_string(m.vocab_size);
    kv["d_model"] = std::to_string(m.d_model);
    kv["d_ff"] = std::to_string(m.d_ff);
    kv["heads"] = std::to_string(m.heads);
    kv["encoder_layers"] = std::to_string(m.encoder_layers);
    kv["decoder_layers"] = std::to_string(m.decoder_layers);
    kv["dropout"] = format_double(m.dropout);
    kv["max_len"] = std::to_string(m.max_len);
    kv["tie_embeddings"] = bool_string(m.tie_embeddings);
    kv["label_smoothing"] = format_double(m.label_smoothing);
    kv["n_grams"] = std::to_string(s.n);
    kv["lambda"] = format_double(s.lambda);
    kv["share_weights"] = bool_string(s.share_weights);
    kv["mode"] = std::string(to_string(s.mode));
    kv["topk"] = std::to_string(s.top_k);
    kv["reuse_dropout_masks"] = bool_string(s.reuse_dropout_masks);
    kv["offset_weights"] = join_doubles(s.weight_override);
    kv["word_drop"] = format_double(spec.word_drop.p_drop);
    kv["word_drop_rescale"] = bool_string(spec.word_drop.rescale);
    kv["word_drop_before_timing"] = bool_string(spec.word_drop.before_timing);
    kv["steps"] = std::to_string(t.steps);
    kv["batch_size"] = std::to_string(t.batch_size);
    kv["seed"] = std::to_string(t.seed);
    kv["lr_scale"] = format_double(t.lr_scale);
    kv["warmup_steps"] = std::to_string(t.warmup_steps);
    kv["beta1"] = format_double(t.adam.beta1);
    kv["beta2"] = format_double(t.adam.beta2);
    kv["epsilon"] = format_double(t.adam.epsilon);
    kv["clip_norm"] = format_double(t.adam.clip_norm);
    kv["checkpoint_every"] = std::to_string(t.checkpoint_every);
    kv["keep_last"] = std::to_string(t.keep_last);
    kv["eval_every"] = std::to_string(t.eval_every);
    kv["selection_metric"] = t.selection_metric;
    kv["eval_sentences"] = std::to_string(t.eval_sentences);
    kv["average_last"] = std::to_string(t.average_last);
    if (spec.data.task) {
        const auto &task = *spec.data.task;
        kv["task"] = std::string(to_string(task.kind));
        kv["task_vocab"] = std::to_string(task.vocab_size);
        kv["min_length"] = std::to_string(task.min_length);
        kv["max_length"] = std::to_string(task.max_length);
        kv["shift"] = std::to_string(task.shift);
        kv["data_seed"] = std::to_string(task.seed);
    } else {
        kv["task"] = "none";
        kv["corpus"] = spec.data.corpus.string();
    }
    kv["train_pairs"] = std::to_string(spec.data.train_pairs);
    kv["valid_pairs"] = std::to_string(spec.data.valid_pairs);
    kv["test_pairs"] = std::to_string(spec.data.test_pairs);
    kv["min_frequency"] = std::to_string(spec.data.min_frequency);
    return kv;
}

Checkpoint make_checkpoint(const RunSpec &spec, const Seq2Seq<float> &model, const Adam &adam, std::uint64_t step,
                           std::string rng_state) {
    Checkpoint c;
    c.config = to_key_values(spec);
    c.step = step;
    c.rng_state = std::move(rng_state);
    c.parameters = snapshot_parameters(model);
    c.optimizer_steps = adam.steps();
    c.optimizer_state = snapshot_optimizer(adam, model);
    return c;
}

RunSpec spec_from_checkpoint(const Checkpoint &checkpoint) {
    RunSpec spec;
    auto kv = checkpoint.config;
    kv.erase("preset");
    if (auto it = checkpoint.config.find("preset"); it != checkpoint.config.end()) spec.preset = it->second;
    apply_key_values(kv, spec);
    return spec;
}

Seq2Seq<float> model_from_checkpoint(const Checkpoint &checkpoint) {
    const auto spec = spec_from_checkpoint(checkpoint);
    Seq2Seq<float> model(spec.model, spec.stack.decoder_stacks(), 0);
    restore_parameters(model, checkpoint.parameters);
    return model;
}

TrainResult train(const RunSpec &input, const Dataset &data, const TrainHooks &hooks) {
    tune_allocator();
    RunSpec spec = input;
    spec.model.vocab_size = data.vocab_size;
    spec.model.validate();
    spec.stack.validate(spec.model.vocab_size);
    spec.word_drop.validate();
    spec.train.validate();
    if (data.train.empty()) throw ParameterError("train: no training pairs");
    const auto &tc = spec.train;

    TrainResult result(Seq2Seq<float>(spec.model, spec.stack.decoder_stacks(), mix_seed(tc.seed, 0)));
    auto &model = result.model;
    Adam adam(tc.adam);
    const InverseSqrtSchedule schedule{tc.lr_scale, tc.warmup_steps, spec.model.d_model};
    std::mt19937_64 dropout_rng(mix_seed(tc.seed, 1)), word_drop_rng(mix_seed(tc.seed, 3));
    BatchIterator batches(data.train, tc.batch_size, mix_seed(tc.seed, 2));

    std::uint64_t step = 0;
    if (!tc.resume_from.empty()) {
        const auto ckpt = load_checkpoint(tc.resume_from);
        const auto saved = spec_from_checkpoint(ckpt);
        if (!(saved.model == spec.model) || saved.stack.decoder_stacks() != spec.stack.decoder_stacks())
            throw IncompatibleCheckpointError("checkpoint " + tc.resume_from.string() +
                                              " was written for a different model configuration");
        restore_parameters(model, ckpt.parameters);
        restore_optimizer(adam, ckpt.optimizer_steps, ckpt.optimizer_state, model);
        restore_rng_state(ckpt.rng_state, dropout_rng, word_drop_rng);
        step = ckpt.step;
    }
    result.first_step = step;

    const auto params = model.parameters();
    const bool selecting = tc.eval_every > 0 && !data.valid.empty();
    std::vector<TensorRecord> best;
    double best_metric = -std::numeric_limits<double>::infinity();
    const auto start = Clock::now();

    for (; step < tc.steps; ++step) {
        const Batch batch = batches.batch_at(step);
        const ForwardContext<float> ctx{true, &dropout_rng, nullptr};
        double value = 0.0;
        {
            Tensor<float> loss;
            if (spec.stack.n == 1) {
                loss = teacher_forcing_loss(model, batch, ctx, &spec.word_drop, &word_drop_rng);
            } else {
                auto stack_loss = teaforn_loss(model, batch, spec.stack, ctx, &spec.word_drop, &word_drop_rng);
                std::vector<double> offsets;
                for (const auto &l : stack_loss.offset_losses) offsets.push_back(l.item());
                result.offset_losses.push_back(std::move(offsets));
                loss = stack_loss.total;
            }
            value = loss.item();
            if (!std::isfinite(value)) {
                auto snapshot = make_checkpoint(spec, model, adam, step, rng_state_string(dropout_rng, word_drop_rng));
                const auto dir = tc.out_dir.empty() ? std::filesystem::temp_directory_path() : tc.out_dir;
                const auto path = dir / ("diverged-seed" + std::to_string(tc.seed) + "-step" + std::to_string(step) + ".ckpt");
                save_checkpoint(path, snapshot);
                throw DivergenceError("loss became " + std::to_string(value) + " at step " + std::to_string(step),
                                      path.string());
            }
            backward(loss);
        }
        adam.step(params, schedule(step + 1));
        model.zero_grad();
        result.losses.push_back(value);
        if (hooks.on_step) hooks.on_step(step, value);

        const std::uint64_t done = step + 1;
        if (done % tc.checkpoint_every == 0 || done == tc.steps) {
            result.trail.push_back(
                make_checkpoint(spec, model, adam, done, rng_state_string(dropout_rng, word_drop_rng)));
            if (!tc.out_dir.empty()) {
                const auto path = tc.out_dir / ("ckpt-" + std::to_string(done) + ".bin");
                save_checkpoint(path, result.trail.back());
                result.trail_files.push_back(path);
                while (result.trail_files.size() > tc.keep_last) {
                    std::filesystem::remove(result.trail_files.front());
                    result.trail_files.erase(result.trail_files.begin());
                }
            }
            while (result.trail.size() > tc.keep_last) result.trail.erase(result.trail.begin());
        }
        if (selecting && done % tc.eval_every == 0) {
            const std::size_t n = std::min(tc.eval_sentences, data.valid.size());
            std::vector<Sequence> candidates, references;
            for (std::size_t i = 0; i < n; ++i) {
                candidates.push_back(strip_special(greedy_decode(model, data.valid[i].source).tokens));
                references.push_back(data.valid[i].target);
            }
            const double metric = metric_value(tc.selection_metric, candidates, references);
            result.validation.emplace_back(done, metric);
            if (hooks.on_eval) hooks.on_eval(done, metric);
            if (metric > best_metric) {
                best_metric = metric;
                best = snapshot_parameters(model);
                result.selected_step = done;
            }
        }
    }
    result.seconds = seconds_since(start);

    if (selecting && !best.empty()) {
        restore_parameters(model, best);
    } else if (tc.average_last > 0 && result.trail.size() >= tc.average_last) {
        restore_parameters(model, average_checkpoints(result.trail, tc.average_last).parameters);
    }
    return result;
}

double metric_value(std::string_view metric, std::span<const Sequence> candidates,
                    std::span<const Sequence> references) {
    if (metric == "bleu") return bleu(candidates, references).value;
    if (metric == "accuracy") return 100.0 * token_accuracy(candidates, references);
    if (metric == "rouge1" || metric == "rouge2" || metric == "rougeL") {
        const auto r = rouge(candidates, references);
        return metric == "rouge1" ? r.rouge1.value : metric == "rouge2" ? r.rouge2.value : r.rouge_l.value;
    }
    throw ParameterError("unknown metric '" + std::string(metric) + "'");
}

std::vector<EvalRow> evaluate(const Seq2Seq<float> &model, std::span<const SequencePair> pairs,
                              std::span<const std::size_t> beams, std::span<const std::string> metrics,
                              const DecodeOptions &options) {
    tune_allocator();
    std::vector<EvalRow> rows;
    if (pairs.empty()) throw ContractError("evaluate: empty evaluation set");
    std::vector<Sequence> references;
    for (const auto &p : pairs) references.push_back(p.target);
    for (std::size_t k : beams) {
        if (k == 0) throw ParameterError("evaluate: beam width must be at least 1");
        std::vector<Sequence> candidates;
        candidates.reserve(pairs.size());
        for (const auto &p : pairs) {
            const auto tokens = k == 1 ? greedy_decode(model, p.source, options).tokens
                                       : beam_search(model, p.source, k, options).front().tokens;
            candidates.push_back(strip_special(tokens));
        }
        for (const auto &m : metrics) rows.push_back({k, m, metric_value(m, candidates, references)});
    }
    return rows;
}

std::vector<SweepCell> expand_grid(const SweepGrid &grid) {
    if (grid.n.empty() || grid.lambda.empty() || grid.modes.empty() || grid.shared.empty() || grid.p_drop.empty())
        throw ParameterError("sweep: every grid axis needs at least one value");
    std::vector<SweepCell> cells;
    std::set<std::string> seen;
    auto push = [&](SweepCell cell) {
        if (seen.insert(cell.config_id).second) cells.push_back(std::move(cell));
    };
    for (double p : grid.p_drop) {
        const std::string drop = p > 0.0 ? "_wd" + format_double(p) : "";
        for (double lambda : grid.lambda) {
            if (lambda < 0.0 || lambda > 1.0) throw ParameterError("sweep: lambda " + format_double(lambda) + " outside [0, 1]");
            if (lambda == 0.0) {
                push({"tf" + drop, 1, 0.0, FeedingMode::direct, true, p});
                continue;
            }
            for (std::size_t n : grid.n)
                for (FeedingMode mode : grid.modes)
                    for (bool shared : grid.shared) {
                        if (n < 1) throw ParameterError("sweep: N must be at least 1");
                        std::string id = "n" + std::to_string(n) + "_l" + format_double(lambda) + "_" +
                                         std::string(to_string(mode)) + (shared ? "_shared" : "_unshared") + drop;
                        push({std::move(id), n, lambda, mode, shared, p});
                    }
        }
    }
    return cells;
}

std::vector<RunReport> aggregate(std::span<const SweepCell> cells, std::span<const SeedResult> per_seed) {
    std::vector<RunReport> reports;
    for (const auto &cell : cells) {
        std::vector<std::pair<std::size_t, std::string>> keys;
        for (const auto &r : per_seed)
            if (r.config_id == cell.config_id &&
                std::find(keys.begin(), keys.end(), std::make_pair(r.k, r.metric)) == keys.end())
                keys.emplace_back(r.k, r.metric);
        std::sort(keys.begin(), keys.end());
        for (const auto &[k, metric] : keys) {
            RunReport report{cell, k, metric, {}, 0.0, std::nullopt};
            for (const auto &r : per_seed)
                if (r.config_id == cell.config_id && r.k == k && r.metric == metric) report.values.push_back(r.value);
            const double n = static_cast<double>(report.values.size());
            double sum = 0.0;
            for (double v : report.values) sum += v;
            report.mean = sum / n;
            if (report.values.size() > 1) {
                double ss = 0.0;
                for (double v : report.values) ss += (v - report.mean) * (v - report.mean);
                report.se = std::sqrt(ss / (n - 1.0)) / std::sqrt(n);
            }
            reports.push_back(std::move(report));
        }
    }
    return reports;
}

namespace {

std::string cell_columns(const SweepCell &c) {
    return c.config_id + "," + std::to_string(c.n) + "," + format_double(c.lambda) + "," +
           std::string(to_string(c.mode)) + "," + bool_string(c.shared) + "," + format_double(c.p_drop);
}

}  // namespace

std::string sweep_csv(std::span<const RunReport> reports) {
    std::string out(kSweepHeader);
    out += '\n';
    for (const auto &r : reports) {
        out += cell_columns(r.cell) + "," + std::to_string(r.k) + "," + std::to_string(r.values.size()) + "," +
               r.metric + "," + format_double(r.mean) + "," + (r.se ? format_double(*r.se) : "") + "\n";
    }
    return out;
}

std::string seed_csv(std::span<const SweepCell> cells, std::span<const SeedResult> per_seed) {
    std::string out(kSeedHeader);
    out += '\n';
    for (const auto &cell : cells)
        for (const auto &r : per_seed)
            if (r.config_id == cell.config_id)
                out += cell_columns(cell) + "," + std::to_string(r.k) + "," + std::to_string(r.seed) + "," + r.metric +
                       "," + format_double(r.value) + "\n";
    return out;
}

std::string figure_csv(std::span<const RunReport> reports, std::string_view metric) {
    std::vector<std::string> ids;
    std::set<std::size_t> ks;
    for (const auto &r : reports) {
        if (r.metric != metric) continue;
        if (std::find(ids.begin(), ids.end(), r.cell.config_id) == ids.end()) ids.push_back(r.cell.config_id);
        ks.insert(r.k);
    }
    std::string out = "beam_width";
    for (const auto &id : ids) out += "," + id;
    out += '\n';
    for (std::size_t k : ks) {
        out += std::to_string(k);
        for (const auto &id : ids) {
            out += ',';
            for (const auto &r : reports)
                if (r.metric == metric && r.k == k && r.cell.config_id == id) out += format_double(r.mean);
        }
        out += '\n';
    }
    return out;
}

std::string gnuplot_script(std::string_view csv_name, std::span<const RunReport> reports, std::string_view metric) {
    std::set<std::string> ids;
    for (const auto &r : reports)
        if (r.metric == metric) ids.insert(r.cell.config_id);
    std::string base(csv_name);
    if (auto dot = base.rfind('.'); dot != std::string::npos) base = base.substr(0, dot);
    std::ostringstream gp;
    gp << "set datafile separator ','\n"
       << "set key autotitle columnhead left bottom\n"
       << "set xlabel 'Beam width'\n"
       << "set ylabel '" << metric << "'\n"
       << "set xtics 1\n"
       << "set grid\n"
       << "set terminal pngcairo size 800,600\n"
       << "set output '" << base << ".png'\n"
       << "plot for [i=2:" << ids.size() + 1 << "] '" << csv_name << "' using 1:i with linespoints\n";
    return gp.str();
}

void write_sweep_outputs(const std::filesystem::path &dir, const SweepResult &result) {
    std::filesystem::create_directories(dir);
    auto write = [&](const std::string &name, const std::string &text) {
        std::ofstream out(dir / name, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
        out << text;
    };
    write("sweep.csv", sweep_csv(result.reports));
    write("sweep_seeds.csv", seed_csv(result.cells, result.per_seed));
    std::set<std::string> metrics;
    for (const auto &r : result.reports) metrics.insert(r.metric);
    for (const auto &m : metrics) {
        const std::string csv = "figure_" + m + ".csv";
        write(csv, figure_csv(result.reports, m));
        write("figure_" + m + ".gp", gnuplot_script(csv, result.reports, m));
    }
    if (!result.failures.empty()) {
        std::string text = "config_id,seed,message\n";
        for (const auto &f : result.failures) {
            std::string msg = f.message;
            std::replace(msg.begin(), msg.end(), ',', ';');
            std::replace(msg.begin(), msg.end(), '\n', ' ');
            text += f.config_id + "," + std::to_string(f.seed) + "," + msg + "\n";
        }
        write("failures.csv", text);
    }
}

SweepResult sweep(const SweepConfig &config, const Dataset &data, const SweepProgress &progress) {
    if (config.seeds.empty()) throw ParameterError("sweep: at least one seed is required");
    if (config.beams.empty()) throw ParameterError("sweep: at least one beam width is required");
    SweepResult result;
    result.cells = expand_grid(config.grid);

    struct Job {
        std::size_t cell;
        std::uint64_t seed;
    };
    std::vector<Job> jobs;
    for (std::size_t c = 0; c < result.cells.size(); ++c)
        for (auto seed : config.seeds) jobs.push_back({c, seed});
    std::vector<std::vector<SeedResult>> outputs(jobs.size());
    std::vector<std::optional<std::string>> errors(jobs.size());
    std::atomic<std::size_t> next{0};
    std::mutex progress_mutex;

    auto worker = [&] {
        for (std::size_t j; (j = next.fetch_add(1)) < jobs.size();) {
            const auto &cell = result.cells[jobs[j].cell];
            const auto start = Clock::now();
            try {
                RunSpec spec = config.base;
                spec.train.seed = jobs[j].seed;
                spec.stack.n = cell.lambda == 0.0 ? 1 : cell.n;
                spec.stack.lambda = cell.lambda == 0.0 ? 1.0 : cell.lambda;
                spec.stack.mode = cell.mode;
                spec.stack.share_weights = cell.shared;
                spec.word_drop.p_drop = cell.p_drop;
                if (!config.base.train.out_dir.empty())
                    spec.train.out_dir = config.base.train.out_dir / cell.config_id / ("seed" + std::to_string(jobs[j].seed));
                auto trained = train(spec, data, {});
                for (const auto &row : evaluate(trained.model, data.test, config.beams, config.metrics))
                    outputs[j].push_back({cell.config_id, jobs[j].seed, row.k, row.metric, row.value});
            } catch (const std::exception &e) {
                errors[j] = e.what();
            }
            if (progress) {
                std::lock_guard lock(progress_mutex);
                progress(cell, jobs[j].seed, seconds_since(start));
            }
        }
    };
    const std::size_t workers = std::max<std::size_t>(1, std::min(config.workers, jobs.size()));
    if (workers == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
        for (auto &t : pool) t.join();
    }

    for (std::size_t j = 0; j < jobs.size(); ++j) {
        if (errors[j]) result.failures.push_back({result.cells[jobs[j].cell].config_id, jobs[j].seed, *errors[j]});
        for (auto &r : outputs[j]) result.per_seed.push_back(std::move(r));
    }
    result.reports = aggregate(result.cells, result.per_seed);
    if (!config.out_dir.empty()) write_sweep_outputs(config.out_dir, result);
    return result;
}

std::vector<ThroughputRow> measure_throughput(std::span<const ThroughputSpec> configs, const Dataset &data,
                                              std::size_t steps, std::size_t warmup) {
    tune_allocator();
    if (steps < 50) throw ParameterError("measure_throughput: at least 50 timed steps are required");
    std::vector<ThroughputRow> rows;
    for (const auto &[label, input] : configs) {
        RunSpec spec = input;
        spec.model.vocab_size = data.vocab_size;
        spec.stack.validate(spec.model.vocab_size);
        const auto &tc = spec.train;
        Seq2Seq<float> model(spec.model, spec.stack.decoder_stacks(), mix_seed(tc.seed, 0));
        Adam adam(tc.adam);
        const InverseSqrtSchedule schedule{tc.lr_scale, tc.warmup_steps, spec.model.d_model};
        std::mt19937_64 dropout_rng(mix_seed(tc.seed, 1)), word_drop_rng(mix_seed(tc.seed, 3));
        BatchIterator batches(data.train, tc.batch_size, mix_seed(tc.seed, 2));
        const auto params = model.parameters();
        auto run_step = [&](std::uint64_t step) {
            const Batch batch = batches.batch_at(step);
            const ForwardContext<float> ctx{true, &dropout_rng, nullptr};
            {
                auto loss = spec.stack.n == 1
                                ? teacher_forcing_loss(model, batch, ctx, &spec.word_drop, &word_drop_rng)
                                : teaforn_loss(model, batch, spec.stack, ctx, &spec.word_drop, &word_drop_rng).total;
                backward(loss);
            }
            adam.step(params, schedule(step + 1));
            model.zero_grad();
        };
        for (std::size_t s = 0; s < warmup; ++s) run_step(s);
        reset_peak_memory();
        const auto start = Clock::now();
        for (std::size_t s = 0; s < steps; ++s) run_step(warmup + s);
        const double elapsed = seconds_since(start);

        ThroughputRow row;
        row.label = label;
        row.n = spec.stack.n;
        row.shared = spec.stack.share_weights;
        row.steps_per_second = static_cast<double>(steps) / elapsed;
        row.peak_tensor_bytes = memory_stats().peak_bytes;
        struct rusage usage {};
        getrusage(RUSAGE_SELF, &usage);
        row.peak_rss_bytes = static_cast<std::int64_t>(usage.ru_maxrss) * 1024;
        row.parameter_count = model.parameter_count();
        rows.push_back(row);
    }
    for (auto &row : rows) row.ratio = row.steps_per_second / rows.front().steps_per_second;
    return rows;
}

double parity_ratio(double baseline_steps_per_second, double teaforn_steps_per_second) {
    if (!(baseline_steps_per_second > 0.0) || !(teaforn_steps_per_second > 0.0))
        throw ParameterError("parity: throughputs must be positive");
    return baseline_steps_per_second / teaforn_steps_per_second;
}

ParityReport step_parity_run(const RunSpec &baseline, const RunSpec &teaforn, const Dataset &data,
                             std::size_t throughput_steps, std::span<const std::size_t> beams,
                             std::span<const std::string> metrics) {
    const std::vector<ThroughputSpec> configs{{"baseline", baseline}, {"teaforn", teaforn}};
    const auto rows = measure_throughput(configs, data, throughput_steps);
    ParityReport report;
    report.baseline_steps_per_second = rows[0].steps_per_second;
    report.teaforn_steps_per_second = rows[1].steps_per_second;
    report.iteration_ratio = parity_ratio(rows[0].steps_per_second, rows[1].steps_per_second);

    std::vector<std::size_t> widths(beams.begin(), beams.end());
    if (std::find(widths.begin(), widths.end(), 1) == widths.end()) widths.insert(widths.begin(), 1);

    RunSpec base = baseline;
    base.train.steps = static_cast<std::size_t>(
        std::llround(static_cast<double>(teaforn.train.steps) * report.iteration_ratio));
    base.train.steps = std::max<std::size_t>(base.train.steps, 1);
    base.train.checkpoint_every = std::min(base.train.checkpoint_every, base.train.steps);
    auto base_run = train(base, data);
    report.baseline = {"baseline", base.train.steps, evaluate(base_run.model, data.test, widths, metrics)};
    auto tea_run = train(teaforn, data);
    report.teaforn = {"teaforn", teaforn.train.steps, evaluate(tea_run.model, data.test, widths, metrics)};
    return report;
}

}  // namespace teaforn
