// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <regex>
#include <sstream>

#include "forgetlm/errors.h"
#include "forgetlm/harness.h"
#include "support/xnli_reference.h"

using namespace forgetlm;
using Catch::Approx;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("forgetlm_test_harness_" + name);
    fs::remove_all(dir);
    return dir;
}

ExperimentPlan tiny_plan() {
    ExperimentPlan plan = default_plan();
    apply_config(plan, read_config_file(FORGETLM_TEST_DATA "/tiny.conf"));
    plan.validate();
    return plan;
}

// Minimal XML well-formedness check: balanced, properly nested tags and quoted attributes.
bool well_formed(const std::string& xml, std::string& why) {
    std::vector<std::string> stack;
    std::size_t i = 0;
    bool root_seen = false;
    while ((i = xml.find('<', i)) != std::string::npos) {
        const std::size_t end = xml.find('>', i);
        if (end == std::string::npos) return why = "unterminated tag", false;
        std::string tag = xml.substr(i + 1, end - i - 1);
        i = end + 1;
        if (tag.starts_with("?") || tag.starts_with("!")) continue;
        if (std::count(tag.begin(), tag.end(), '"') % 2 != 0) return why = "unbalanced quotes in <" + tag + ">", false;
        if (tag.starts_with("/")) {
            if (stack.empty() || stack.back() != tag.substr(1)) return why = "mismatched </" + tag.substr(1) + ">", false;
            stack.pop_back();
            continue;
        }
        const bool self_closing = tag.ends_with("/");
        const std::string name = tag.substr(0, tag.find_first_of(" \t\n/"));
        if (stack.empty() && root_seen) return why = "multiple roots", false;
        root_seen = true;
        if (!self_closing) stack.push_back(name);
    }
    if (!stack.empty()) return why = "unclosed <" + stack.back() + ">", false;
    return root_seen;
}

std::size_t count(const std::string& text, const std::string& needle) {
    std::size_t n = 0;
    for (std::size_t p = text.find(needle); p != std::string::npos; p = text.find(needle, p + 1)) ++n;
    return n;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(FORGETLM_CLI_PATH) + " " + args + " > /dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

} // namespace

TEST_CASE("relative gain definition", "[harness]") {
    CHECK(relative_gain(0.6, 0.5) == Approx(0.2));
    CHECK(relative_gain(0.5, 0.5) == 0.0);
    CHECK(relative_gain(0.4, 0.5) == Approx(-0.2));
    CHECK_THROWS_AS(relative_gain(0.4, 0.0), PreconditionError);
    const std::vector<std::pair<double, double>> two{{0.6, 0.5}, {0.5, 0.5}};
    CHECK(averaged_relative_gain(two) == Approx(0.1));
}

TEST_CASE("published XNLI relative gains are reproduced", "[harness]") {
    std::vector<std::pair<double, double>> pairs;
    double std_sum = 0.0, fgt_sum = 0.0;
    for (const auto& row : xnli::kTargets) {
        INFO(row.language);
        CHECK(std::abs(100.0 * relative_gain(row.forgetting, row.standard) - row.printed_gain_pct) <= 0.1);
        pairs.emplace_back(row.forgetting, row.standard);
        std_sum += row.standard;
        fgt_sum += row.forgetting;
    }
    CHECK(std::abs(100.0 * averaged_relative_gain(pairs) - xnli::kPrintedAverageGainPct) <= 0.1);
    CHECK(std::abs(100.0 * relative_gain(xnli::kEnglish.forgetting, xnli::kEnglish.standard) - xnli::kEnglish.printed_gain_pct) <=
          0.1);
    CHECK(std::abs(std_sum / 14.0 - xnli::kPrintedStandardAverage) <= 0.05);
    CHECK(std::abs(fgt_sum / 14.0 - xnli::kPrintedForgettingAverage) <= 0.05);
}

TEST_CASE("adaptation convergence statistics", "[harness]") {
    std::vector<EvalPoint> constant;
    for (int u = 1; u <= 100; ++u) constant.push_back({u, NAN, 0.5});
    CHECK(adaptation_convergence(constant, 100).threshold_step == 1);
    CHECK(adaptation_convergence(constant, 100).fraction_at_tenth == Approx(1.0));

    // Reaches 90% of its final value only at the last update.
    std::vector<EvalPoint> rising;
    for (int u = 0; u <= 100; ++u) rising.push_back({u, NAN, u < 100 ? 0.3 + 0.0025 * u : 1.0});
    const auto r = adaptation_convergence(rising, 100);
    CHECK(r.threshold_step == 100);
    CHECK(r.final_accuracy == 1.0);
    CHECK(r.fraction_at_tenth == Approx(0.325));

    const std::vector<EvalPoint> only_start{{0, NAN, 0.4}};
    CHECK(adaptation_convergence(only_start, 100).threshold_step == 101);
    const std::vector<EvalPoint> no_acc{{10, 1.0, NAN}};
    CHECK_THROWS_AS(adaptation_convergence(no_acc, 100), PreconditionError);
}

TEST_CASE("config parsing", "[harness]") {
    const auto kv = parse_config_text("# comment\n budgets = 1000, 2000 \nseeds=4\n\npretrain.k = 50 # trailing\n");
    CHECK(kv.at("budgets") == "1000, 2000");
    ExperimentPlan plan = default_plan();
    apply_config(plan, kv);
    CHECK(plan.budgets == std::vector<std::int64_t>{1000, 2000});
    CHECK(plan.seeds == std::vector<std::uint64_t>{4});
    CHECK(plan.stages.pretrain.forgetting.interval == 50);
    CHECK(plan.stages.pretrain.forgetting.emb_schedule.total_updates == 50);
    CHECK(plan.stages.pretrain.forgetting.emb_schedule.warmup_updates == 5);

    CHECK_THROWS_AS(apply_config(plan, parse_config_text("no_such_key = 1")), ConfigError);
    CHECK_THROWS_AS(apply_config(plan, parse_config_text("seeds = one")), ConfigError);
    CHECK_THROWS_AS(parse_config_text("just text"), ConfigError);
    ExperimentPlan bad = default_plan();
    bad.languages = {"martian"};
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    CHECK(default_plan().cell_count() == 72);
}

TEST_CASE("metrics records", "[harness]") {
    const MetricsRecord r{"run", "pretrain", 7, 2.5, 0.75, 1e-4, 2e-4, "reset", 1.25};
    const auto back = parse_metrics_line(metrics_line(r));
    CHECK(back.run_id == "run");
    CHECK(back.step == 7);
    CHECK(back.accuracy.value() == 0.75);
    CHECK(back.event == "reset");
    CHECK_FALSE(parse_metrics_line(metrics_line({"r", "s", 1, 1.0, std::nullopt, 0, 0, "", 0})).accuracy.has_value());

    const auto dir = scratch("metrics");
    MetricsWriter w(dir / "m.jsonl");
    w.append({"a", "s", 1, 1.0, std::nullopt, 0, 0, "", 0});
    w.append({"a", "s", 2, 1.0, std::nullopt, 0, 0, "", 0});
    w.append({"a", "other", 1, 1.0, std::nullopt, 0, 0, "", 0});
    CHECK_THROWS_AS(w.append({"a", "s", 2, 1.0, std::nullopt, 0, 0, "", 0}), PreconditionError);
    std::ifstream is(dir / "m.jsonl");
    std::string line;
    int lines = 0;
    while (std::getline(is, line)) {
        CHECK_NOTHROW(parse_metrics_line(line));
        ++lines;
    }
    CHECK(lines == 3);
    fs::remove_all(dir);
}

TEST_CASE("budget curves take medians over seeds", "[harness]") {
    std::vector<ResultRow> rows;
    for (double a : {0.4, 0.9, 0.5}) rows.push_back({Variant::Standard, "x", "distant", 1000, 0, a, "h", false, ""});
    rows.push_back({Variant::Standard, "x", "distant", 1000, 3, NAN, "", true, "boom"});
    const auto curves = budget_curves(rows);
    REQUIRE(curves.size() == 1);
    CHECK(curves[0].median_accuracy == 0.5);
    CHECK(curves[0].seeds == 3);
}

TEST_CASE("SVG charts are well formed", "[harness]") {
    LineChart chart{"A & B <test>", "x", "y", true, {}, {10.0, 100.0}};
    chart.series.push_back({"one", {{1, 0.2}, {10, 0.4}, {1000, 0.5}}});
    chart.series.push_back({"two \"quoted\"", {{1, 0.3}, {10, NAN}, {1000, 0.6}}});
    chart.series.push_back({"three", {{1, 0.1}}});
    const std::string svg = render_line_chart(chart);
    std::string why;
    CHECK(well_formed(svg, why));
    INFO(why);
    CHECK(count(svg, "<polyline") == 3);

    BarChart bars{"gains", "gain", {{"close", 0.1}, {"distant", -0.05}}};
    const std::string b = render_bar_chart(bars);
    CHECK(well_formed(b, why));
    CHECK(count(b, "<rect") == 3); // background plus two bars
}

TEST_CASE("matrix runs, caches and reports", "[harness][matrix]") {
    const ExperimentPlan plan = tiny_plan();
    const auto dir = scratch("matrix");
    const auto first = run_matrix(plan, dir, 1);
    CHECK(first.rows.size() == plan.cell_count());
    CHECK(first.rows.size() == 16);
    CHECK(first.pretrain_runs == 4);
    CHECK(first.task_runs == 4);
    CHECK(first.failures == 0);
    for (const auto& r : first.rows) {
        CHECK(r.accuracy >= 0.0);
        CHECK(r.accuracy <= 1.0);
        CHECK(r.ckpt_hash.size() == 16);
    }
    const std::string csv = results_csv(first.rows);
    CHECK(csv.substr(0, csv.find('\n')) == kResultsHeader);

    const auto again = run_matrix(plan, dir, 1);
    CHECK(again.pretrain_runs == 0);
    CHECK(again.task_runs == 0);
    CHECK(again.cell_runs == 0);
    CHECK(results_csv(again.rows) == csv);

    // A different process layout in a fresh directory reproduces the table.
    const auto other = scratch("matrix_jobs");
    const auto forked = run_matrix(plan, other, 3);
    CHECK(results_csv(forked.rows) == csv);

    save_matrix_result(first, dir);
    const auto loaded = load_matrix_result(dir);
    CHECK(results_csv(loaded.rows) == csv);
    CHECK(loaded.pretrain_traces.size() == 4);
    render_report(loaded, dir / "report");
    for (const char* f : {"results.csv", "budget_curve.csv", "accuracy_vs_budget.svg", "loss_vs_step.svg",
                          "adaptation_distant.svg", "adaptation_all.svg", "relative_gain.svg", "relative_gain.csv",
                          "convergence.csv", "summary.md"}) {
        INFO(f);
        CHECK(fs::exists(dir / "report" / f));
    }
    std::string why;
    CHECK(well_formed(slurp(dir / "report" / "loss_vs_step.svg"), why));
    CHECK(count(slurp(dir / "report" / "accuracy_vs_budget.svg"), "<polyline") == 4);

    fs::create_directories(dir / "blocker");
    std::ofstream(dir / "blocker" / "file") << "x";
    CHECK_THROWS_AS(render_report(loaded, dir / "blocker" / "file" / "report"), IoError);
    fs::remove_all(dir);
    fs::remove_all(other);
}

TEST_CASE("forgetting-interval sweep", "[harness][matrix]") {
    const ExperimentPlan plan = tiny_plan();
    const auto dir = scratch("ksweep");
    const auto entries = sweep_forgetting_interval(plan, dir, 1);
    REQUIRE(entries.size() == 3);
    CHECK(entries[0].interval == 5);
    CHECK(entries[0].trace.resets.size() == 12);
    CHECK(entries[1].trace.resets.size() == 3);
    CHECK(entries[2].trace.resets.size() == 2);
    for (const auto& e : entries) CHECK_FALSE(e.failed);
    render_k_sweep(entries, dir / "report");
    std::string why;
    const std::string svg = slurp(dir / "report" / "k_sweep_loss.svg");
    CHECK(well_formed(svg, why));
    CHECK(count(svg, "<polyline") == 3);

    const auto again = sweep_forgetting_interval(plan, scratch("ksweep2"), 1);
    for (std::size_t i = 0; i < 3; ++i) CHECK(again[i].trace.losses == entries[i].trace.losses);
    fs::remove_all(dir);
    fs::remove_all(scratch("ksweep2"));
}

TEST_CASE("command-line exit codes", "[harness][cli]") {
    const auto dir = scratch("cli");
    const std::string conf = std::string("--config ") + FORGETLM_TEST_DATA + "/tiny.conf --out " + dir.string();
    CHECK(run_cli(conf + " matrix") == 0);
    CHECK(fs::exists(dir / "results.csv"));
    CHECK(slurp(dir / "results.csv").starts_with(kResultsHeader));
    CHECK(run_cli(conf + " report") == 0);
    CHECK(run_cli(conf + " --set no.such.key=1 matrix") == 2);
    CHECK(run_cli(conf + " --set budgets=10000000 matrix") == 2);
    CHECK(run_cli(conf + " frobnicate") == 2);
    CHECK(run_cli(conf + " eval --ckpt " + (dir / "missing").string()) == 1);
    // A learning rate this large overflows the parameters and every cell fails.
    CHECK(run_cli(conf + "_bad --set adapt.lr=1e38 matrix") == 1);

    const std::string stage = std::string("--config ") + FORGETLM_TEST_DATA + "/tiny.conf --seed 0 --out ";
    CHECK(run_cli(stage + (dir / "p").string() + " pretrain --variant forgetting") == 0);
    CHECK(run_cli(stage + (dir / "l").string() + " adapt-lang --parent " + (dir / "p" / "ckpt").string() +
                  " --language distant --budget 2000") == 0);
    CHECK(run_cli(stage + (dir / "t").string() + " adapt-task --parent " + (dir / "p" / "ckpt").string()) == 0);
    CHECK(run_cli(stage + (dir / "a").string() + " assemble --lang " + (dir / "l" / "ckpt").string() + " --task " +
                  (dir / "t" / "ckpt").string()) == 0);
    CHECK(run_cli(stage + (dir / "a").string() + " eval --ckpt " + (dir / "a" / "ckpt").string() + " --language distant") == 0);
    CHECK(run_cli(stage + (dir / "a").string() + " eval --ckpt " + (dir / "a" / "ckpt").string() + " --language close") == 1);
    fs::remove_all(dir);
    fs::remove_all(dir.string() + "_bad");
}
