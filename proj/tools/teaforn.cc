// teaforn command line: train, decode, eval, sweep, bench, parity.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "teaforn/errors.h"
#include "teaforn/experiment.h"

using namespace teaforn;

namespace {

struct Common {
    std::string config_file;
    KeyValues flags;  // flag values, applied over the config file
};

void add_value(CLI::App *app, Common &c, const std::string &flag, const std::string &key, const std::string &help) {
    app->add_option_function<std::string>(flag, [&c, key](const std::string &v) { c.flags[key] = v; }, help);
}

// Run options shared by every subcommand that builds a model.
void add_run_options(CLI::App *app, Common &c, bool grid_axes = true) {
    app->add_option("--config", c.config_file, "key=value config file; flags override it")->check(CLI::ExistingFile);
    add_value(app, c, "--preset", "preset", "base-like or big-like");
    add_value(app, c, "--task", "task", "copy, reverse or rotate_map");
    add_value(app, c, "--corpus", "corpus", "TSV corpus (source<TAB>target per line)");
    add_value(app, c, "--steps", "steps", "training steps");
    add_value(app, c, "--seed", "seed", "run seed");
    add_value(app, c, "--batch-size", "batch_size", "sentences per batch");
    add_value(app, c, "--topk", "topk", "K for topk feeding");
    if (grid_axes) {
        add_value(app, c, "--n-grams", "n_grams", "stack depth N");
        add_value(app, c, "--lambda", "lambda", "discount factor");
        add_value(app, c, "--mode", "mode", "direct, argmax or topk");
        add_value(app, c, "--word-drop", "word_drop", "decoder input drop probability");
        app->add_flag_function("--share-weights", [&c](std::int64_t) { c.flags["share_weights"] = "true"; },
                               "one parameter set for every decoder in the stack");
        app->add_flag_function("--unshared", [&c](std::int64_t) { c.flags["share_weights"] = "false"; },
                               "separate parameters per decoder");
    }
}

RunSpec build_spec(const Common &c, const std::string &out_dir) {
    KeyValues kv;
    if (!c.config_file.empty()) kv = load_key_values(c.config_file);
    for (const auto &[k, v] : c.flags) kv[k] = v;
    if (kv.count("corpus") && !kv.count("task")) kv["task"] = "none";
    RunSpec spec;
    apply_key_values(kv, spec);
    if (!out_dir.empty()) spec.train.out_dir = out_dir;
    spec.train.checkpoint_every = std::min(spec.train.checkpoint_every, spec.train.steps);
    return spec;
}

void print_rows(const std::vector<EvalRow> &rows, const std::string &label = "") {
    for (const auto &r : rows)
        std::printf("%s%sk=%zu %s=%s\n", label.c_str(), label.empty() ? "" : " ", r.k, r.metric.c_str(),
                    format_double(r.value).c_str());
}

std::vector<TokenId> parse_source(const std::string &line, const Dataset &data) {
    const auto words = tokenize(line);
    if (data.vocabulary) return data.vocabulary->encode(words);
    std::vector<TokenId> ids;
    for (const auto &w : words) {
        std::size_t used = 0;
        const long v = std::stol(w, &used);
        if (used != w.size()) throw ParameterError("decode: '" + w + "' is not a token id");
        ids.push_back(static_cast<TokenId>(v));
    }
    return ids;
}

std::string render(const std::vector<TokenId> &tokens, const Dataset &data) {
    const auto clean = strip_special(tokens);
    if (data.vocabulary) return detokenize(data.vocabulary->decode(clean));
    std::string out;
    for (auto t : clean) out += (out.empty() ? "" : " ") + std::to_string(t);
    return out;
}

int run_train(const Common &c, const std::string &out_dir, std::size_t log_every) {
    auto spec = build_spec(c, out_dir);
    const auto data = prepare_data(spec.data);
    if (!spec.train.out_dir.empty()) std::filesystem::create_directories(spec.train.out_dir);
    TrainHooks hooks;
    hooks.on_step = [&](std::uint64_t step, double loss) {
        if (log_every && (step + 1) % log_every == 0) std::fprintf(stderr, "step %llu loss %.4f\n", (unsigned long long)(step + 1), loss);
    };
    hooks.on_eval = [](std::uint64_t step, double metric) {
        std::fprintf(stderr, "step %llu validation %.3f\n", (unsigned long long)step, metric);
    };
    auto result = train(spec, data, hooks);
    spec.model.vocab_size = data.vocab_size;
    std::printf("trained %zu steps in %.1f s, final loss %.4f\n", result.losses.size(), result.seconds,
                result.losses.empty() ? 0.0 : result.losses.back());
    if (!spec.train.out_dir.empty()) {
        const auto path = spec.train.out_dir / "model.bin";
        save_checkpoint(path, make_checkpoint(spec, result.model, Adam(spec.train.adam), spec.train.steps, ""));
        if (data.vocabulary) data.vocabulary->save(spec.train.out_dir / "vocab.txt");
        std::printf("wrote %s\n", path.c_str());
    }
    if (!data.test.empty()) {
        const std::vector<std::size_t> greedy{1};
        const std::vector<std::string> metrics{"bleu", "accuracy"};
        print_rows(evaluate(result.model, data.test, greedy, metrics), "test");
    }
    return 0;
}

Dataset data_for(const RunSpec &spec, const std::filesystem::path &checkpoint) {
    auto data = prepare_data(spec.data);
    const auto vocab_file = checkpoint.parent_path() / "vocab.txt";
    if (std::filesystem::exists(vocab_file)) data.vocabulary = Vocabulary::load(vocab_file);
    return data;
}

int run_decode(const std::string &checkpoint, std::size_t beam, const std::string &input) {
    const auto model = model_from_checkpoint(load_checkpoint(checkpoint));
    Dataset data;
    const auto vocab_file = std::filesystem::path(checkpoint).parent_path() / "vocab.txt";
    if (std::filesystem::exists(vocab_file)) data.vocabulary = Vocabulary::load(vocab_file);
    std::ifstream file;
    if (!input.empty()) {
        file.open(input);
        if (!file) throw std::runtime_error("cannot read " + input);
    }
    std::istream &in = input.empty() ? std::cin : file;
    for (std::string line; std::getline(in, line);) {
        const auto src = parse_source(line, data);
        if (src.empty()) {
            std::printf("\n");
            continue;
        }
        const auto h = beam <= 1 ? greedy_decode(model, src) : beam_search(model, src, beam).front();
        std::printf("%s\n", render(h.tokens, data).c_str());
    }
    return 0;
}

int run_eval(const std::string &checkpoint, const std::vector<std::size_t> &beams,
             const std::vector<std::string> &metrics) {
    const auto ckpt = load_checkpoint(checkpoint);
    const auto spec = spec_from_checkpoint(ckpt);
    const auto model = model_from_checkpoint(ckpt);
    const auto data = data_for(spec, checkpoint);
    print_rows(evaluate(model, data.test, beams, metrics));
    return 0;
}

int main_impl(int argc, char **argv) {
    CLI::App app{"TeaForN sequence-to-sequence training lab"};
    app.require_subcommand(1);

    Common train_c, sweep_c, bench_c, parity_c;
    std::string out_dir;
    std::size_t log_every = 100;
    auto *train_cmd = app.add_subcommand("train", "train one model");
    add_run_options(train_cmd, train_c);
    train_cmd->add_option("--out", out_dir, "checkpoint directory");
    train_cmd->add_option("--log-every", log_every, "print the loss every n steps (0 = never)");

    std::string checkpoint, input;
    std::size_t beam = 1;
    auto *decode_cmd = app.add_subcommand("decode", "decode source lines from stdin or a file");
    decode_cmd->add_option("checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
    decode_cmd->add_option("--beam", beam, "beam width; 1 decodes greedily");
    decode_cmd->add_option("--input", input, "file with one source per line");

    std::vector<std::size_t> beams{1, 2, 3, 4, 5, 6, 7, 8};
    std::vector<std::string> metrics{"bleu"};
    auto *eval_cmd = app.add_subcommand("eval", "score a checkpoint on its test split");
    eval_cmd->add_option("checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
    eval_cmd->add_option("--beam", beams, "beam widths")->delimiter(',');
    eval_cmd->add_option("--metrics", metrics, "bleu, rouge1, rouge2, rougeL, accuracy")->delimiter(',');

    SweepGrid grid;
    std::vector<std::string> modes{"direct"};
    std::vector<std::string> shared{"true"};
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::size_t workers = 1;
    auto *sweep_cmd = app.add_subcommand("sweep", "train and evaluate a grid of configurations over seeds");
    add_run_options(sweep_cmd, sweep_c, false);
    sweep_cmd->add_option("--n-grams", grid.n, "stack depths")->delimiter(',');
    sweep_cmd->add_option("--lambda", grid.lambda, "discount factors; 0 is plain teacher forcing")->delimiter(',');
    sweep_cmd->add_option("--mode", modes, "feeding modes")->delimiter(',');
    sweep_cmd->add_option("--share-weights", shared, "true and/or false")->delimiter(',');
    sweep_cmd->add_option("--word-drop", grid.p_drop, "word drop probabilities")->delimiter(',');
    sweep_cmd->add_option("--seeds", seeds, "seeds per cell")->delimiter(',');
    sweep_cmd->add_option("--beam", beams, "beam widths")->delimiter(',');
    sweep_cmd->add_option("--metrics", metrics, "metrics")->delimiter(',');
    sweep_cmd->add_option("--workers", workers, "parallel training runs");
    sweep_cmd->add_option("--out", out_dir, "directory for CSVs and plot scripts")->required();

    std::size_t bench_steps = 50;
    auto *bench_cmd = app.add_subcommand("bench", "steps/sec of teacher forcing against TeaFor2 and TeaFor3");
    add_run_options(bench_cmd, bench_c, false);
    bench_cmd->add_option("--bench-steps", bench_steps, "timed steps per configuration (>= 50)");
    bench_cmd->add_flag_function("--unshared", [&](std::int64_t) { bench_c.flags["share_weights"] = "false"; },
                                 "separate parameters per decoder");

    auto *parity_cmd = app.add_subcommand("parity", "baseline trained for the TeaForN run's wall-clock budget");
    add_run_options(parity_cmd, parity_c);
    parity_cmd->add_option("--bench-steps", bench_steps, "timed steps used to measure the iteration ratio");
    parity_cmd->add_option("--beam", beams, "beam widths")->delimiter(',');

    CLI11_PARSE(app, argc, argv);

    if (*train_cmd) return run_train(train_c, out_dir, log_every);
    if (*decode_cmd) return run_decode(checkpoint, beam, input);
    if (*eval_cmd) return run_eval(checkpoint, beams, metrics);

    if (*sweep_cmd) {
        SweepConfig config;
        config.base = build_spec(sweep_c, "");
        config.grid = grid;
        config.grid.modes.clear();
        for (const auto &m : modes) config.grid.modes.push_back(parse_feeding_mode(m));
        config.grid.shared.clear();
        for (const auto &s : shared) config.grid.shared.push_back(s == "true" || s == "1");
        config.seeds = seeds;
        config.beams = beams;
        config.metrics = metrics;
        config.workers = workers;
        config.out_dir = out_dir;
        const auto data = prepare_data(config.base.data);
        auto result = sweep(config, data, [](const SweepCell &cell, std::uint64_t seed, double seconds) {
            std::fprintf(stderr, "%s seed %llu: %.1f s\n", cell.config_id.c_str(), (unsigned long long)seed, seconds);
        });
        std::fputs(sweep_csv(result.reports).c_str(), stdout);
        for (const auto &f : result.failures)
            std::fprintf(stderr, "failed: %s seed %llu: %s\n", f.config_id.c_str(), (unsigned long long)f.seed,
                         f.message.c_str());
        return result.failures.empty() ? 0 : 1;
    }

    if (*bench_cmd) {
        const auto base = build_spec(bench_c, "");
        const auto data = prepare_data(base.data);
        std::vector<ThroughputSpec> configs;
        for (std::size_t n : {1, 2, 3}) {
            auto spec = base;
            spec.stack.n = n;
            configs.push_back({n == 1 ? "teacher-forcing" : "TeaFor" + std::to_string(n), spec});
        }
        std::printf("%-16s %10s %7s %14s %14s %12s\n", "config", "steps/s", "ratio", "peak_tensor_MB", "peak_rss_MB",
                    "params");
        for (const auto &r : measure_throughput(configs, data, bench_steps))
            std::printf("%-16s %10.3f %7.3f %14.1f %14.1f %12zu\n", r.label.c_str(), r.steps_per_second, r.ratio,
                        r.peak_tensor_bytes / 1e6, r.peak_rss_bytes / 1e6, r.parameter_count);
        return 0;
    }

    if (*parity_cmd) {
        auto tea = build_spec(parity_c, "");
        if (tea.stack.n < 2) tea.stack.n = 2;
        auto baseline = tea;
        baseline.stack = StackConfig{};
        const auto data = prepare_data(tea.data);
        const auto report = step_parity_run(baseline, tea, data, bench_steps, beams, metrics);
        std::printf("baseline %.3f steps/s, teaforn %.3f steps/s, iteration ratio %.3f\n",
                    report.baseline_steps_per_second, report.teaforn_steps_per_second, report.iteration_ratio);
        print_rows(report.baseline.rows, "baseline(" + std::to_string(report.baseline.steps) + ")");
        print_rows(report.teaforn.rows, "teaforn(" + std::to_string(report.teaforn.steps) + ")");
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char **argv) {
    try {
        return main_impl(argc, argv);
    } catch (const DivergenceError &e) {
        std::fprintf(stderr, "error: %s (snapshot: %s)\n", e.what(), e.snapshot_path().c_str());
    } catch (const std::exception &e) {
        std::fprintf(stderr, "error: %s\n", e.what());
    }
    return 2;
}
