// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end: single pipeline stages, the experiment matrix,
// the budget and forgetting-interval sweeps, and report rendering.
// Exit codes: 0 success, 1 failed cells or runtime error, 2 invalid config.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "forgetlm/errors.h"
#include "forgetlm/harness.h"
#include "forgetlm/hash.h"

using namespace forgetlm;
namespace fs = std::filesystem;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailed = 1;
constexpr int kExitConfig = 2;

struct Globals {
    std::string config;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;
    std::string out = "out";
    int jobs = 1;
};

ExperimentPlan build_plan(const Globals& g) {
    ExperimentPlan plan = default_plan();
    if (!g.config.empty()) apply_config(plan, read_config_file(g.config));
    std::string joined;
    for (const auto& o : g.overrides) joined += o + "\n";
    apply_config(plan, parse_config_text(joined));
    if (g.seed) plan.seeds = {*g.seed};
    plan.validate();
    return plan;
}

std::uint64_t run_seed(const Globals& g, const ExperimentPlan& plan) { return g.seed ? *g.seed : plan.seeds.front(); }

void print_checkpoint(const std::string& what, const Checkpoint& c, const fs::path& dir) {
    std::printf("%s: %s  hash=%s  stage=%s  language=%s  updates=%lld\n", what.c_str(), dir.string().c_str(),
                checkpoint_hash(c).c_str(), c.provenance.stage.c_str(), c.provenance.language.c_str(),
                static_cast<long long>(c.provenance.updates));
}

int write_results(const MatrixResult& r, const fs::path& out) {
    save_matrix_result(r, out);
    render_report(r, out / "report");
    std::printf("cells=%zu failed=%d  pretrain runs=%d task runs=%d cell runs=%d (cache hits excluded)\n", r.rows.size(),
                r.failures, r.pretrain_runs, r.task_runs, r.cell_runs);
    std::printf("results: %s\nreport:  %s\n", (out / "results.csv").string().c_str(), (out / "report").string().c_str());
    for (const auto& row : r.rows)
        if (row.failed)
            std::fprintf(stderr, "FAILED %s %s budget=%lld seed=%llu: %s\n", variant_name(row.variant), row.distance.c_str(),
                         static_cast<long long>(row.budget), static_cast<unsigned long long>(row.seed), row.error.c_str());
    return r.failures > 0 ? kExitFailed : kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"forgetlm: embedding-forgetting pretraining and cross-lingual rewiring on synthetic languages"};
    app.require_subcommand(1);
    Globals g;
    app.add_option("--config", g.config, "key=value plan file")->check(CLI::ExistingFile);
    app.add_option("--set", g.overrides, "override one plan key (key=value); repeatable");
    app.add_option("--seed", g.seed, "run seed (replaces the plan's seed list)");
    app.add_option("--out", g.out, "output directory")->capture_default_str();
    app.add_option("--jobs", g.jobs, "concurrent worker processes")->capture_default_str()->check(CLI::PositiveNumber);

    // pretrain
    auto* pre = app.add_subcommand("pretrain", "pretrain on the base language");
    std::string variant = "forgetting";
    std::int64_t k_override = 0;
    pre->add_option("--variant", variant, "standard or forgetting")->capture_default_str();
    pre->add_option("--k", k_override, "forgetting interval (defaults to the plan's pretrain.k)");

    // adapt-lang
    auto* al = app.add_subcommand("adapt-lang", "relearn the embeddings on a target language");
    std::string parent, language = "distant";
    std::int64_t budget = 100'000;
    al->add_option("--parent", parent, "pretrain checkpoint directory")->required();
    al->add_option("--language", language, "close, medium, distant or base")->capture_default_str();
    al->add_option("--budget", budget, "adaptation tokens")->capture_default_str();

    // adapt-task
    auto* at = app.add_subcommand("adapt-task", "train the body and classification head on the base-language task");
    bool full_model = false;
    at->add_option("--parent", parent, "pretrain checkpoint directory")->required();
    at->add_flag("--full-model", full_model, "also train the embeddings");

    // assemble
    auto* as = app.add_subcommand("assemble", "combine language embeddings with a task-adapted body");
    std::string lang_dir, task_dir;
    as->add_option("--lang", lang_dir, "adapt-lang checkpoint directory")->required();
    as->add_option("--task", task_dir, "adapt-task checkpoint directory")->required();

    // eval
    auto* ev = app.add_subcommand("eval", "zero-shot accuracy on a target-language task set");
    std::string ckpt_dir;
    ev->add_option("--ckpt", ckpt_dir, "checkpoint directory")->required();
    ev->add_option("--language", language, "close, medium, distant or base")->capture_default_str();

    auto* mx = app.add_subcommand("matrix", "run every variant x language x budget x seed cell");
    auto* sb = app.add_subcommand("sweep-budget", "accuracy vs adaptation budget, with base-language pseudo-adaptation");
    auto* sk = app.add_subcommand("sweep-k", "pretrain once per forgetting interval and report the traces");
    std::vector<std::int64_t> ks;
    sk->add_option("--k", ks, "forgetting intervals (defaults to the plan's sweep.k_values)")->delimiter(',');
    auto* rp = app.add_subcommand("report", "render CSV, SVG and summary files from stored results");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        const ExperimentPlan plan = build_plan(g);
        const fs::path out = g.out;
        const std::uint64_t seed = run_seed(g, plan);

        if (pre->parsed()) {
            const Variant v = parse_variant(variant);
            const std::int64_t k = k_override > 0 ? k_override : plan.stages.pretrain.forgetting.interval;
            PretrainOptions o = pretrain_options(plan, v, seed, k);
            MetricsWriter metrics(out / "metrics.jsonl");
            const std::string run = std::string("pretrain-") + variant_name(v) + "-s" + std::to_string(seed);
            o.on_step = [&](const StepMetrics& m) {
                metrics.append({run, "pretrain", m.update, m.loss, std::nullopt, m.lr_body, m.lr_emb, m.reset ? "reset" : "", 0.0});
            };
            o.on_eval = [&](const EvalPoint& e) {
                metrics.append({run, "pretrain/eval", e.update, e.loss, std::nullopt, 0.0, 0.0, "val", 0.0});
            };
            const StageResult r = pretrain(o, pretrain_corpus(plan, seed));
            save_checkpoint(r.checkpoint, out / "ckpt");
            print_checkpoint("pretrain", r.checkpoint, out / "ckpt");
            std::printf("resets=%zu selected_update=%lld\n", r.log.resets.size(),
                        static_cast<long long>(r.checkpoint.provenance.selected_update));
            if (r.log.diverged) {
                std::fprintf(stderr, "%s\n", r.log.divergence_report.c_str());
                return kExitFailed;
            }
            return kExitOk;
        }
        if (al->parsed()) {
            AdaptLanguageOptions o = plan.stages.adapt;
            o.budget_tokens = budget;
            o.seed = seed;
            MetricsWriter metrics(out / "metrics.jsonl");
            const std::string run = "adapt-" + language + "-b" + std::to_string(budget);
            o.on_step = [&](const StepMetrics& m) {
                metrics.append({run, "adapt_language", m.update, m.loss, std::nullopt, m.lr_body, m.lr_emb, "", 0.0});
            };
            o.on_eval = [&](const EvalPoint& e) {
                metrics.append({run, "adapt_language/eval", e.update, e.loss, std::nullopt, 0.0, 0.0, "eval", 0.0});
            };
            const StageResult r = adapt_language(load_checkpoint(parent), target_corpus(plan, language, seed), o);
            save_checkpoint(r.checkpoint, out / "ckpt");
            print_checkpoint("adapt-lang", r.checkpoint, out / "ckpt");
            return r.log.diverged ? kExitFailed : kExitOk;
        }
        if (at->parsed()) {
            AdaptTaskOptions o = plan.stages.task;
            o.seed = seed;
            if (full_model) o.freeze = {false, false};
            o.on_eval = [](const EvalPoint& e) {
                std::printf("epoch %lld  train loss %.4f  val accuracy %.4f\n", static_cast<long long>(e.update), e.loss,
                            e.accuracy);
            };
            const StageResult r =
                adapt_task(load_checkpoint(parent), task_train_set(plan, seed), task_val_set(plan, seed), o);
            save_checkpoint(r.checkpoint, out / "ckpt");
            print_checkpoint("adapt-task", r.checkpoint, out / "ckpt");
            return r.log.diverged ? kExitFailed : kExitOk;
        }
        if (as->parsed()) {
            const Checkpoint c = assemble(load_checkpoint(lang_dir), load_checkpoint(task_dir));
            save_checkpoint(c, out / "ckpt");
            print_checkpoint("assemble", c, out / "ckpt");
            return kExitOk;
        }
        if (ev->parsed()) {
            const double acc = evaluate_zero_shot(load_checkpoint(ckpt_dir), eval_set(plan, language, seed));
            std::printf("accuracy %.6f\n", acc);
            return kExitOk;
        }
        if (mx->parsed()) return write_results(run_matrix(plan, out, g.jobs), out);
        if (sb->parsed()) {
            const BudgetSweep s = sweep_adaptation_budget(plan, out, g.jobs);
            for (const auto& c : s.curves)
                std::printf("%-10s %-8s budget %8lld  median accuracy %.4f  (%d seeds)\n", variant_name(c.variant),
                            c.distance.c_str(), static_cast<long long>(c.budget), c.median_accuracy, c.seeds);
            return write_results(s.matrix, out);
        }
        if (sk->parsed()) {
            ExperimentPlan p = plan;
            if (!ks.empty()) p.k_values = ks;
            p.validate();
            const auto entries = sweep_forgetting_interval(p, out, g.jobs);
            render_k_sweep(entries, out / "report");
            int failed = 0;
            for (const auto& e : entries) {
                std::printf("K=%-6lld resets=%-4zu selected=%-6lld accuracy=%.4f%s\n", static_cast<long long>(e.interval),
                            e.trace.resets.size(), static_cast<long long>(e.trace.selected_update), e.accuracy,
                            e.failed ? "  FAILED" : "");
                if (e.failed) {
                    ++failed;
                    std::fprintf(stderr, "K=%lld: %s\n", static_cast<long long>(e.interval), e.error.c_str());
                }
            }
            return failed > 0 ? kExitFailed : kExitOk;
        }
        if (rp->parsed()) {
            const MatrixResult r = load_matrix_result(out);
            render_report(r, out / "report");
            std::printf("report: %s\n", (out / "report").string().c_str());
            return kExitOk;
        }
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "invalid config: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitFailed;
    }
    return kExitOk;
}
