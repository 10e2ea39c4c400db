#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "teaforn/checkpoint.h"
#include "teaforn/data.h"
#include "teaforn/decoding.h"
#include "teaforn/metrics.h"
#include "teaforn/optimizer.h"
#include "teaforn/stack.h"
#include "teaforn/transformer.h"
#include "teaforn/word_drop.h"

namespace teaforn {

using KeyValues = std::map<std::string, std::string>;

// Flat "key = value" text; '#' starts a comment. Duplicate keys keep the last value.
KeyValues parse_key_values(std::string_view text);
KeyValues load_key_values(const std::filesystem::path &path);

struct TrainConfig {
    std::size_t steps = 5000;
    std::size_t batch_size = 64;
    std::uint64_t seed = 1;
    double lr_scale = 1.0;
    std::size_t warmup_steps = 400;
    AdamConfig adam{};
    std::size_t checkpoint_every = 1000;
    std::size_t keep_last = 5;
    // Validation-metric selection every eval_every steps; 0 disables.
    std::size_t eval_every = 0;
    std::string selection_metric = "rougeL";
    std::size_t eval_sentences = 200;
    // Average the last m checkpoints of the trail into the final model; 0 disables.
    std::size_t average_last = 0;
    std::filesystem::path out_dir;        // empty keeps the trail in memory only
    std::filesystem::path resume_from;    // checkpoint to continue from

    void validate() const;
};

struct DataSource {
    std::optional<SyntheticTask> task = SyntheticTask{TaskKind::rotate_map};
    std::filesystem::path corpus;  // TSV; used when task is empty
    std::size_t train_pairs = 20000;
    std::size_t valid_pairs = 200;
    std::size_t test_pairs = 200;
    std::size_t min_frequency = 1;
};

struct Dataset {
    std::vector<SequencePair> train, valid, test;
    std::size_t vocab_size = 0;
    std::optional<Vocabulary> vocabulary;  // corpus data only
};

// Synthetic: train/valid/test are consecutive index ranges of one generator.
// Corpus: the file is split in order into train, valid and test; the
// vocabulary comes from the train split only.
Dataset prepare_data(const DataSource &source);

struct RunSpec {
    std::string preset = "base-like";
    ModelConfig model = preset_config("base-like", 64);
    StackConfig stack{};
    WordDropConfig word_drop{};
    TrainConfig train{};
    DataSource data{};
};

// Applies keys onto `spec`; "preset" is applied before every other key.
// Unknown keys raise ParameterError.
void apply_key_values(const KeyValues &values, RunSpec &spec);
KeyValues to_key_values(const RunSpec &spec);

struct TrainResult {
    explicit TrainResult(Seq2Seq<float> trained) : model(std::move(trained)) {}

    Seq2Seq<float> model;
    std::vector<double> losses;  // total loss of every step run
    std::vector<std::vector<double>> offset_losses;
    std::uint64_t first_step = 0;  // step index of losses[0]
    std::vector<Checkpoint> trail;  // last keep_last checkpoints
    std::vector<std::filesystem::path> trail_files;
    std::optional<std::uint64_t> selected_step;
    std::vector<std::pair<std::uint64_t, double>> validation;
    double seconds = 0.0;
};

struct TrainHooks {
    std::function<void(std::uint64_t step, double loss)> on_step;
    std::function<void(std::uint64_t step, double metric)> on_eval;
};

Checkpoint make_checkpoint(const RunSpec &spec, const Seq2Seq<float> &model, const Adam &adam, std::uint64_t step,
                           std::string rng_state);
// Rebuilds the run spec and model stored in a checkpoint.
RunSpec spec_from_checkpoint(const Checkpoint &checkpoint);
Seq2Seq<float> model_from_checkpoint(const Checkpoint &checkpoint);

TrainResult train(const RunSpec &spec, const Dataset &data, const TrainHooks &hooks = {});

struct EvalRow {
    std::size_t k = 1;
    std::string metric;
    double value = 0.0;
};

// Metric names: bleu, rouge1, rouge2, rougeL, accuracy. k = 1 uses greedy decoding.
std::vector<EvalRow> evaluate(const Seq2Seq<float> &model, std::span<const SequencePair> pairs,
                              std::span<const std::size_t> beams, std::span<const std::string> metrics,
                              const DecodeOptions &options = {});

double metric_value(std::string_view metric, std::span<const Sequence> candidates,
                    std::span<const Sequence> references);

struct SweepGrid {
    std::vector<std::size_t> n{2};
    std::vector<double> lambda{0.0, 0.2, 0.5, 1.0};
    std::vector<FeedingMode> modes{FeedingMode::direct};
    std::vector<bool> shared{true};
    std::vector<double> p_drop{0.0};
};

struct SweepCell {
    std::string config_id;
    std::size_t n = 1;
    double lambda = 1.0;  // 0 marks plain teacher forcing
    FeedingMode mode = FeedingMode::direct;
    bool shared = true;
    double p_drop = 0.0;
};

// Cartesian product with lambda = 0 collapsed to one teacher-forcing cell per p_drop.
std::vector<SweepCell> expand_grid(const SweepGrid &grid);

struct SeedResult {
    std::string config_id;
    std::uint64_t seed = 0;
    std::size_t k = 1;
    std::string metric;
    double value = 0.0;
};

struct RunReport {
    SweepCell cell;
    std::size_t k = 1;
    std::string metric;
    std::vector<double> values;  // one per seed
    double mean = 0.0;
    std::optional<double> se;    // sample stddev / sqrt(n); absent when n = 1
};

struct SweepConfig {
    RunSpec base;
    SweepGrid grid;
    std::vector<std::uint64_t> seeds{1, 2, 3};
    std::vector<std::size_t> beams{1, 2, 3, 4, 5, 6, 7, 8};
    std::vector<std::string> metrics{"bleu"};
    std::size_t workers = 1;
    std::filesystem::path out_dir;  // CSVs and plot scripts; empty skips files
};

struct SweepFailure {
    std::string config_id;
    std::uint64_t seed = 0;
    std::string message;
};

struct SweepResult {
    std::vector<SweepCell> cells;
    std::vector<SeedResult> per_seed;
    std::vector<RunReport> reports;
    std::vector<SweepFailure> failures;
};

using SweepProgress = std::function<void(const SweepCell &, std::uint64_t seed, double seconds)>;

SweepResult sweep(const SweepConfig &config, const Dataset &data, const SweepProgress &progress = {});

// Groups per-seed values into report rows (mean and sample standard error).
std::vector<RunReport> aggregate(std::span<const SweepCell> cells, std::span<const SeedResult> per_seed);

inline constexpr std::string_view kSweepHeader = "config_id,N,lambda,mode,shared,p_drop,k,seed_count,metric,mean,se";
inline constexpr std::string_view kSeedHeader = "config_id,N,lambda,mode,shared,p_drop,k,seed,metric,value";

std::string sweep_csv(std::span<const RunReport> reports);
std::string seed_csv(std::span<const SweepCell> cells, std::span<const SeedResult> per_seed);
// One row per k, one column per cell: beam width against the metric mean.
std::string figure_csv(std::span<const RunReport> reports, std::string_view metric);
std::string gnuplot_script(std::string_view csv_name, std::span<const RunReport> reports, std::string_view metric);
// Writes sweep.csv, sweep_seeds.csv, and a figure CSV plus .gp script per metric.
void write_sweep_outputs(const std::filesystem::path &dir, const SweepResult &result);

struct ThroughputRow {
    std::string label;
    std::size_t n = 1;
    bool shared = true;
    double steps_per_second = 0.0;
    double ratio = 1.0;  // against the first row
    std::int64_t peak_tensor_bytes = 0;
    std::int64_t peak_rss_bytes = 0;
    std::size_t parameter_count = 0;
};

struct ThroughputSpec {
    std::string label;
    RunSpec spec;
};

// Times `steps` optimizer steps after `warmup` untimed ones, per configuration.
std::vector<ThroughputRow> measure_throughput(std::span<const ThroughputSpec> configs, const Dataset &data,
                                              std::size_t steps, std::size_t warmup = 5);

struct ParityArm {
    std::string label;
    std::size_t steps = 0;
    std::vector<EvalRow> rows;  // greedy (k = 1) and beam rows
};

struct ParityReport {
    double baseline_steps_per_second = 0.0;
    double teaforn_steps_per_second = 0.0;
    double iteration_ratio = 1.0;
    ParityArm baseline, teaforn;
};

// Baseline steps = round(teaforn steps * baseline throughput / teaforn throughput).
double parity_ratio(double baseline_steps_per_second, double teaforn_steps_per_second);

ParityReport step_parity_run(const RunSpec &baseline, const RunSpec &teaforn, const Dataset &data,
                             std::size_t throughput_steps, std::span<const std::size_t> beams,
                             std::span<const std::string> metrics);

std::string format_double(double v);

}  // namespace teaforn
