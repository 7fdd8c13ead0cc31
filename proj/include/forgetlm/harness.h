// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: the variant x language x budget x seed matrix,
// budget and forgetting-interval sweeps, convergence statistics, metrics
// records and report rendering to CSV tables and SVG charts.

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "forgetlm/pipeline.h"

namespace forgetlm {

enum class Variant { Standard, Forgetting };

const char* variant_name(Variant v);
Variant parse_variant(const std::string& text);

// Target language levels: "close", "medium", "distant" or "base" (pseudo-adaptation).
LanguageSpec target_language(const LanguageSpec& base, const std::string& level);

struct StageConfigs {
    PretrainOptions pretrain;
    AdaptLanguageOptions adapt;
    AdaptTaskOptions task;
    std::int64_t pretrain_corpus_tokens = 1'000'000;
    std::int64_t target_corpus_tokens = 1'000'000;
    int task_train_examples = 3000;
    int task_val_examples = 300;
    int eval_examples = 300;
    std::uint64_t grammar_seed = 1;
};

struct ExperimentPlan {
    std::string id = "desk";
    std::vector<Variant> variants{Variant::Standard, Variant::Forgetting};
    std::vector<std::string> languages{"close", "medium", "distant"};
    std::vector<std::int64_t> budgets{1'000, 10'000, 100'000, 1'000'000};
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::vector<std::int64_t> k_values{25, 250, 1250};
    StageConfigs stages;

    // Throws ConfigError naming the offending field.
    void validate() const;
    std::size_t cell_count() const;
};

// Desk defaults with the forgetting interval and schedules wired consistently.
ExperimentPlan default_plan();

// `key=value` lines; `#` starts a comment. Throws ConfigError on unknown keys or bad values.
std::map<std::string, std::string> parse_config_text(const std::string& text);
std::map<std::string, std::string> read_config_file(const std::filesystem::path& path);
void apply_config(ExperimentPlan& plan, const std::map<std::string, std::string>& values);

// Stage inputs derived from a plan and a run seed. Every cell of a plan uses these.
PretrainOptions pretrain_options(const ExperimentPlan& plan, Variant variant, std::uint64_t seed, std::int64_t interval);
Corpus pretrain_corpus(const ExperimentPlan& plan, std::uint64_t seed);
Corpus target_corpus(const ExperimentPlan& plan, const std::string& level, std::uint64_t seed);
ClsDataset task_train_set(const ExperimentPlan& plan, std::uint64_t seed);
ClsDataset task_val_set(const ExperimentPlan& plan, std::uint64_t seed);
ClsDataset eval_set(const ExperimentPlan& plan, const std::string& level, std::uint64_t seed);

struct MetricsRecord {
    std::string run_id;
    std::string stage;
    std::int64_t step = 0;
    double loss = 0.0;
    std::optional<double> accuracy;
    double lr_body = 0.0;
    double lr_emb = 0.0;
    std::string event;
    double wall_seconds = 0.0;
};

std::string metrics_line(const MetricsRecord& r);
MetricsRecord parse_metrics_line(const std::string& line);

// Append-only JSONL writer. Rejects non-increasing steps within a (run, stage).
class MetricsWriter {
  public:
    explicit MetricsWriter(const std::filesystem::path& path);
    void append(const MetricsRecord& r);

  private:
    std::filesystem::path path_;
    std::map<std::pair<std::string, std::string>, std::int64_t> last_step_;
};

struct PretrainTrace {
    Variant variant = Variant::Standard;
    std::uint64_t seed = 0;
    std::int64_t interval = 0; // K, 0 for standard runs
    std::vector<double> losses; // per update, index 0 is update 1
    std::vector<std::int64_t> resets;
    std::vector<EvalPoint> evals;
    std::int64_t selected_update = 0;
    std::string ckpt_hash;
    bool diverged = false;
    std::string divergence_report;
};

struct AdaptTrace {
    Variant variant = Variant::Standard;
    std::string distance;
    std::int64_t budget = 0;
    std::uint64_t seed = 0;
    std::int64_t updates = 0;
    std::vector<EvalPoint> evals;
};

struct ResultRow {
    Variant variant = Variant::Standard;
    std::string language;
    std::string distance;
    std::int64_t budget = 0;
    std::uint64_t seed = 0;
    double accuracy = 0.0;
    std::string ckpt_hash;
    bool failed = false;
    std::string error;
};

struct MatrixResult {
    std::vector<ResultRow> rows;
    std::vector<AdaptTrace> adapt_traces;
    std::vector<PretrainTrace> pretrain_traces;
    int pretrain_runs = 0; // executed in this invocation, cache hits excluded
    int task_runs = 0;
    int cell_runs = 0;
    int failures = 0;
};

inline constexpr const char* kResultsHeader = "variant,language,distance,budget,seed,accuracy,ckpt_hash";

// Runs every cell through pretrain, language adaptation, task adaptation,
// assembly and zero-shot evaluation. Pretrain and task checkpoints are cached
// under <out>/cache and reused across cells and invocations; cells run in up
// to `jobs` child processes and write under <out>/cells.
MatrixResult run_matrix(const ExperimentPlan& plan, const std::filesystem::path& out, int jobs = 1);

std::string results_csv(const std::vector<ResultRow>& rows);
void save_matrix_result(const MatrixResult& result, const std::filesystem::path& out);
MatrixResult load_matrix_result(const std::filesystem::path& out);

struct CurvePoint {
    Variant variant = Variant::Standard;
    std::string distance;
    std::int64_t budget = 0;
    double median_accuracy = 0.0;
    int seeds = 0;
};

// Median-over-seeds accuracy per (variant, distance, budget); failed rows are skipped.
std::vector<CurvePoint> budget_curves(const std::vector<ResultRow>& rows);

// Runs the matrix over the budget grid for the plan's languages plus the
// base-language pseudo-adaptation and returns the aggregated curves.
struct BudgetSweep {
    MatrixResult matrix;
    std::vector<CurvePoint> curves;
};
BudgetSweep sweep_adaptation_budget(ExperimentPlan plan, const std::filesystem::path& out, int jobs = 1);

struct Convergence {
    std::int64_t threshold_step = 0;  // first update >= 1 with accuracy >= 0.9 * final; updates + 1 if never
    double fraction_at_tenth = 0.0;   // accuracy at 10% of updates divided by final accuracy
    double final_accuracy = 0.0;
};

// Uses the accuracy points of an adaptation trace (updates >= 1 for the threshold).
Convergence adaptation_convergence(std::span<const EvalPoint> evals, std::int64_t total_updates);

struct KSweepEntry {
    std::int64_t interval = 0;
    PretrainTrace trace;
    double accuracy = 0.0;
    bool failed = false;
    std::string error;
};

// One forgetting pretrain per K on the first plan seed, followed by the
// downstream pipeline on the first plan language at the largest plan budget.
std::vector<KSweepEntry> sweep_forgetting_interval(const ExperimentPlan& plan, const std::filesystem::path& out,
                                                   int jobs = 1);

// (forgetting - standard) / standard.
double relative_gain(double forgetting, double standard);
// Mean of per-language relative gains.
double averaged_relative_gain(std::span<const std::pair<double, double>> forgetting_standard);

struct SvgSeries {
    std::string name;
    std::vector<std::pair<double, double>> points;
};

struct LineChart {
    std::string title;
    std::string x_label;
    std::string y_label;
    bool log_x = false;
    std::vector<SvgSeries> series;
    std::vector<double> markers; // vertical dashed lines at these x values
};

std::string render_line_chart(const LineChart& chart);

struct BarChart {
    std::string title;
    std::string y_label;
    std::vector<std::pair<std::string, double>> bars;
};

std::string render_bar_chart(const BarChart& chart);

// Writes results.csv, per-figure CSVs, SVG charts and summary.md into `dir`.
// Throws IoError when the directory cannot be written.
void render_report(const MatrixResult& result, const std::filesystem::path& dir);
void render_k_sweep(const std::vector<KSweepEntry>& entries, const std::filesystem::path& dir);

} // namespace forgetlm
