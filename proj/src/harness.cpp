// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlm/harness.h"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <set>
#include <sstream>

#include "forgetlm/errors.h"
#include "forgetlm/hash.h"
#include "json.hpp"

namespace forgetlm {

namespace {

using json = nlohmann::json;
namespace fs = std::filesystem;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Small utilities

std::string read_text(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw IoError("cannot read " + p.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_text_atomic(const fs::path& p, const std::string& text) {
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    const fs::path tmp = p.string() + ".tmp" + std::to_string(::getpid());
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw IoError("cannot write " + tmp.string());
        os << text;
        if (!os) throw IoError("short write to " + tmp.string());
    }
    fs::rename(tmp, p, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + p.string() + ": " + ec.message());
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

double median(std::vector<double> v) {
    if (v.empty()) return kNaN;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double json_number(const json& j) { return j.is_null() ? kNaN : j.get<double>(); }

json eval_to_json(const EvalPoint& e) {
    return json::array({e.update, std::isnan(e.loss) ? json(nullptr) : json(e.loss),
                        std::isnan(e.accuracy) ? json(nullptr) : json(e.accuracy)});
}

EvalPoint eval_from_json(const json& j) {
    return {j.at(0).get<std::int64_t>(), json_number(j.at(1)), json_number(j.at(2))};
}

json evals_to_json(const std::vector<EvalPoint>& evals) {
    json a = json::array();
    for (const auto& e : evals) a.push_back(eval_to_json(e));
    return a;
}

std::vector<EvalPoint> evals_from_json(const json& a) {
    std::vector<EvalPoint> out;
    for (const auto& e : a) out.push_back(eval_from_json(e));
    return out;
}

json pretrain_trace_json(const PretrainTrace& t) {
    return {{"variant", variant_name(t.variant)},
            {"seed", t.seed},
            {"interval", t.interval},
            {"losses", t.losses},
            {"resets", t.resets},
            {"evals", evals_to_json(t.evals)},
            {"selected_update", t.selected_update},
            {"ckpt_hash", t.ckpt_hash},
            {"diverged", t.diverged},
            {"divergence_report", t.divergence_report}};
}

PretrainTrace pretrain_trace_from_json(const json& j) {
    PretrainTrace t;
    t.variant = parse_variant(j.at("variant").get<std::string>());
    t.seed = j.at("seed").get<std::uint64_t>();
    t.interval = j.at("interval").get<std::int64_t>();
    for (const auto& x : j.at("losses")) t.losses.push_back(json_number(x));
    t.resets = j.at("resets").get<std::vector<std::int64_t>>();
    t.evals = evals_from_json(j.at("evals"));
    t.selected_update = j.at("selected_update").get<std::int64_t>();
    t.ckpt_hash = j.at("ckpt_hash").get<std::string>();
    t.diverged = j.at("diverged").get<bool>();
    t.divergence_report = j.at("divergence_report").get<std::string>();
    return t;
}

json adapt_trace_json(const AdaptTrace& t) {
    return {{"variant", variant_name(t.variant)}, {"distance", t.distance}, {"budget", t.budget},
            {"seed", t.seed},                     {"updates", t.updates},   {"evals", evals_to_json(t.evals)}};
}

AdaptTrace adapt_trace_from_json(const json& j) {
    AdaptTrace t;
    t.variant = parse_variant(j.at("variant").get<std::string>());
    t.distance = j.at("distance").get<std::string>();
    t.budget = j.at("budget").get<std::int64_t>();
    t.seed = j.at("seed").get<std::uint64_t>();
    t.updates = j.at("updates").get<std::int64_t>();
    t.evals = evals_from_json(j.at("evals"));
    return t;
}

json row_json(const ResultRow& r) {
    return {{"variant", variant_name(r.variant)},
            {"language", r.language},
            {"distance", r.distance},
            {"budget", r.budget},
            {"seed", r.seed},
            {"accuracy", std::isnan(r.accuracy) ? json(nullptr) : json(r.accuracy)},
            {"ckpt_hash", r.ckpt_hash},
            {"failed", r.failed},
            {"error", r.error}};
}

ResultRow row_from_json(const json& j) {
    ResultRow r;
    r.variant = parse_variant(j.at("variant").get<std::string>());
    r.language = j.at("language").get<std::string>();
    r.distance = j.at("distance").get<std::string>();
    r.budget = j.at("budget").get<std::int64_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.accuracy = json_number(j.at("accuracy"));
    r.ckpt_hash = j.at("ckpt_hash").get<std::string>();
    r.failed = j.at("failed").get<bool>();
    r.error = j.at("error").get<std::string>();
    return r;
}

// Canonical text of everything that determines a stage's output.
json model_json(const ModelConfig& c) {
    return {c.vocab_size, c.d_model,    c.n_layers,  c.n_heads, c.d_ff,  c.max_seq_len,
            c.dropout,    c.tie_lm_head, c.n_classes, c.init_std, c.ln_eps};
}

json schedule_json(const ScheduleSpec& s) { return {s.peak_lr, s.warmup_updates, s.total_updates, s.end_lr}; }

json adam_json(const AdamHyper& h) { return {h.beta1, h.beta2, h.eps}; }

// ---------------------------------------------------------------------------
// Process pool

// Runs each job inline (jobs <= 1) or in forked children, at most `jobs` at a
// time. Jobs report through files; a child that exits abnormally leaves none.
void run_jobs(const std::vector<std::function<void()>>& work, int jobs) {
    if (jobs <= 1) {
        for (const auto& w : work) w();
        return;
    }
    std::fflush(nullptr);
    std::size_t next = 0;
    int running = 0;
    while (next < work.size() || running > 0) {
        while (running < jobs && next < work.size()) {
            const pid_t pid = ::fork();
            if (pid < 0) {
                // Out of processes: fall back to running inline.
                work[next++]();
                continue;
            }
            if (pid == 0) {
                int code = 0;
                try {
                    work[next]();
                } catch (...) {
                    code = 1;
                }
                std::fflush(nullptr);
                ::_exit(code);
            }
            ++next;
            ++running;
        }
        if (running > 0) {
            int status = 0;
            if (::wait(&status) > 0) --running;
        }
    }
}

// ---------------------------------------------------------------------------
// Stage runners with on-disk caching

struct RunKey {
    Variant variant = Variant::Standard;
    std::uint64_t seed = 0;
    std::int64_t interval = 0;
};

PretrainOptions run_options(const ExperimentPlan& plan, const RunKey& k) {
    return pretrain_options(plan, k.variant, k.seed, k.interval);
}

std::string pretrain_key(const ExperimentPlan& plan, const RunKey& k) {
    const PretrainOptions o = run_options(plan, k);
    const json j = {"pretrain",
                    model_json(o.model),
                    schedule_json(o.schedule),
                    o.forgetting.enabled,
                    o.forgetting.enabled ? o.forgetting.interval : 0,
                    o.forgetting.reset_std,
                    schedule_json(o.forgetting.emb_schedule),
                    o.total_updates,
                    o.batch_size,
                    o.checkpoint_interval,
                    o.val_fraction,
                    o.val_sequences,
                    o.clip_norm,
                    adam_json(o.adam),
                    o.seed,
                    plan.stages.pretrain_corpus_tokens,
                    plan.stages.grammar_seed};
    return hex64(fnv1a64(j.dump()));
}

std::string task_key(const ExperimentPlan& plan, const RunKey& k) {
    const AdaptTaskOptions& t = plan.stages.task;
    const json j = {"task",
                    pretrain_key(plan, k),
                    t.epochs,
                    t.batch_size,
                    t.peak_lr,
                    t.warmup_fraction,
                    t.clip_norm,
                    adam_json(t.adam),
                    t.freeze.embedding_frozen,
                    t.freeze.body_frozen,
                    plan.stages.task_train_examples,
                    plan.stages.task_val_examples};
    return hex64(fnv1a64(j.dump()));
}

std::string cell_key(const ExperimentPlan& plan, const RunKey& k, const std::string& level, std::int64_t budget) {
    const AdaptLanguageOptions& a = plan.stages.adapt;
    const json j = {"cell",
                    task_key(plan, k),
                    level,
                    budget,
                    a.updates,
                    a.batch_size,
                    a.peak_lr,
                    a.warmup_fraction,
                    a.init_std,
                    a.clip_norm,
                    adam_json(a.adam),
                    a.eval_sequences,
                    a.loss_every,
                    a.probe_every,
                    plan.stages.target_corpus_tokens,
                    plan.stages.eval_examples};
    return hex64(fnv1a64(j.dump()));
}

std::string run_label(const RunKey& k) {
    std::string s = variant_name(k.variant);
    if (k.variant == Variant::Forgetting) s += "-k" + std::to_string(k.interval);
    return s + "-s" + std::to_string(k.seed);
}

fs::path pretrain_dir(const fs::path& out, const ExperimentPlan& plan, const RunKey& k) {
    return out / "cache" / ("pretrain-" + run_label(k) + "-" + pretrain_key(plan, k));
}

fs::path task_dir(const fs::path& out, const ExperimentPlan& plan, const RunKey& k) {
    return out / "cache" / ("task-" + run_label(k) + "-" + task_key(plan, k));
}

fs::path cell_dir(const fs::path& out, const ExperimentPlan& plan, const RunKey& k, const std::string& level,
                  std::int64_t budget) {
    return out / "cells" /
           (run_label(k) + "-" + level + "-b" + std::to_string(budget) + "-" + cell_key(plan, k, level, budget));
}

double elapsed(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void execute_pretrain(const ExperimentPlan& plan, const RunKey& k, const fs::path& dir) {
    PretrainOptions o = run_options(plan, k);
    const Corpus corpus = pretrain_corpus(plan, k.seed);
    fs::remove_all(dir);
    fs::create_directories(dir);
    MetricsWriter metrics(dir / "metrics.jsonl");
    const std::string run = "pretrain-" + run_label(k);
    const auto t0 = std::chrono::steady_clock::now();
    o.on_step = [&](const StepMetrics& m) {
        metrics.append({run, "pretrain", m.update, m.loss, std::nullopt, m.lr_body, m.lr_emb, m.reset ? "reset" : "",
                        elapsed(t0)});
    };
    o.on_eval = [&](const EvalPoint& e) {
        metrics.append({run, "pretrain/eval", e.update, e.loss, std::nullopt, 0.0, 0.0, "val", elapsed(t0)});
    };
    const StageResult r = pretrain(o, corpus);
    save_checkpoint(r.checkpoint, dir / "ckpt");

    PretrainTrace t;
    t.variant = k.variant;
    t.seed = k.seed;
    t.interval = k.variant == Variant::Forgetting ? k.interval : 0;
    for (const auto& s : r.log.steps) t.losses.push_back(s.loss);
    t.resets = r.log.resets;
    t.evals = r.log.evals;
    t.selected_update = r.checkpoint.provenance.selected_update;
    t.ckpt_hash = checkpoint_hash(r.checkpoint);
    t.diverged = r.log.diverged;
    t.divergence_report = r.log.divergence_report;
    write_text_atomic(dir / "trace.json", pretrain_trace_json(t).dump());
}

void execute_task(const ExperimentPlan& plan, const RunKey& k, const Checkpoint& parent, const fs::path& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    MetricsWriter metrics(dir / "metrics.jsonl");
    const std::string run = "task-" + run_label(k);
    const auto t0 = std::chrono::steady_clock::now();
    AdaptTaskOptions o = plan.stages.task;
    o.seed = k.seed;
    o.on_eval = [&](const EvalPoint& e) {
        metrics.append({run, "adapt_task/epoch", e.update, e.loss, e.accuracy, 0.0, 0.0, "val", elapsed(t0)});
    };
    const StageResult r = adapt_task(parent, task_train_set(plan, k.seed), task_val_set(plan, k.seed), o);
    save_checkpoint(r.checkpoint, dir / "ckpt");
    write_text_atomic(dir / "trace.json", json{{"evals", evals_to_json(r.log.evals)}}.dump());
}

struct CellOutput {
    ResultRow row;
    AdaptTrace trace;
};

CellOutput execute_cell(const ExperimentPlan& plan, const RunKey& k, const std::string& level, std::int64_t budget,
                        const Checkpoint& pre, const Checkpoint& task, const fs::path& dir) {
    const LanguageSpec base = base_language(plan.stages.grammar_seed);
    const LanguageSpec lang = target_language(base, level);
    CellOutput out;
    out.row = {k.variant, lang.name, level, budget, k.seed, kNaN, "", false, ""};
    out.trace = {k.variant, level, budget, k.seed, plan.stages.adapt.updates, {}};

    fs::create_directories(dir);
    fs::remove(dir / "metrics.jsonl");
    MetricsWriter metrics(dir / "metrics.jsonl");
    const std::string run = run_label(k) + "-" + level + "-b" + std::to_string(budget);
    const auto t0 = std::chrono::steady_clock::now();

    const Corpus corpus = target_corpus(plan, level, k.seed);
    const ClsDataset eval = eval_set(plan, level, k.seed);

    AdaptLanguageOptions o = plan.stages.adapt;
    o.budget_tokens = budget;
    o.seed = k.seed;
    TransformerModel scratch = task.model.clone();
    if (o.probe_every > 0) {
        o.probe = [&](const TransformerModel& m) {
            for (std::size_t i = 0; i < scratch.params().size(); ++i) {
                if (scratch.params()[i].group != ParamGroup::Embedding) continue;
                const auto src = m.params()[i].tensor.data();
                std::copy(src.begin(), src.end(), scratch.params()[i].tensor.data().begin());
            }
            return classification_accuracy(scratch, eval.examples);
        };
    }
    o.on_step = [&](const StepMetrics& m) {
        metrics.append({run, "adapt_language", m.update, m.loss, std::nullopt, m.lr_body, m.lr_emb, "", elapsed(t0)});
    };
    o.on_eval = [&](const EvalPoint& e) {
        metrics.append({run, "adapt_language/eval", e.update, e.loss,
                        std::isnan(e.accuracy) ? std::nullopt : std::optional<double>(e.accuracy), 0.0, 0.0, "eval",
                        elapsed(t0)});
    };
    const StageResult adapted = adapt_language(pre, corpus, o);
    out.trace.evals = adapted.log.evals;
    if (adapted.log.diverged) throw NumericError(adapted.log.divergence_report);
    const Checkpoint assembled = assemble(adapted.checkpoint, task);
    out.row.accuracy = evaluate_zero_shot(assembled, eval);
    out.row.ckpt_hash = checkpoint_hash(assembled);
    metrics.append({run, "evaluate", 1, kNaN, out.row.accuracy, 0.0, 0.0, "zero_shot", elapsed(t0)});
    return out;
}

void write_cell(const fs::path& dir, const CellOutput& c) {
    write_text_atomic(dir / "result.json", json{{"row", row_json(c.row)}, {"trace", adapt_trace_json(c.trace)}}.dump());
}

std::optional<CellOutput> read_cell(const fs::path& dir) {
    if (!fs::exists(dir / "result.json")) return std::nullopt;
    const json j = json::parse(read_text(dir / "result.json"));
    return CellOutput{row_from_json(j.at("row")), adapt_trace_from_json(j.at("trace"))};
}

bool pretrain_cached(const fs::path& dir) { return fs::exists(dir / "trace.json") && fs::exists(dir / "ckpt" / "manifest"); }

struct CellSpec {
    RunKey run;
    std::string level;
    std::int64_t budget = 0;
};

// Shared driver for the matrix and the K sweep.
struct Driver {
    const ExperimentPlan& plan;
    fs::path out;
    int jobs = 1;
    MatrixResult result;
    std::map<std::string, Checkpoint> pretrained;
    std::map<std::string, Checkpoint> tasks;
    std::map<std::string, std::string> run_errors;

    void prepare(const std::vector<RunKey>& runs) {
        std::vector<std::function<void()>> work;
        for (const auto& k : runs) {
            const fs::path dir = pretrain_dir(out, plan, k);
            if (pretrain_cached(dir)) continue;
            ++result.pretrain_runs;
            work.push_back([this, k, dir] {
                try {
                    execute_pretrain(plan, k, dir);
                } catch (const std::exception& e) {
                    write_text_atomic(dir / "error.txt", e.what());
                    throw;
                }
            });
        }
        run_jobs(work, jobs);

        work.clear();
        for (const auto& k : runs) {
            const fs::path pdir = pretrain_dir(out, plan, k);
            const fs::path tdir = task_dir(out, plan, k);
            if (!pretrain_cached(pdir) || pretrain_cached(tdir)) continue;
            ++result.task_runs;
            work.push_back([this, k, pdir, tdir] {
                try {
                    execute_task(plan, k, load_checkpoint(pdir / "ckpt"), tdir);
                } catch (const std::exception& e) {
                    write_text_atomic(tdir / "error.txt", e.what());
                    throw;
                }
            });
        }
        run_jobs(work, jobs);

        for (const auto& k : runs) {
            const std::string label = run_label(k);
            const fs::path pdir = pretrain_dir(out, plan, k);
            const fs::path tdir = task_dir(out, plan, k);
            if (!pretrain_cached(pdir)) {
                run_errors[label] = fs::exists(pdir / "error.txt") ? "pretrain failed: " + read_text(pdir / "error.txt")
                                                                   : "pretrain failed";
                continue;
            }
            result.pretrain_traces.push_back(pretrain_trace_from_json(json::parse(read_text(pdir / "trace.json"))));
            if (!pretrain_cached(tdir)) {
                run_errors[label] = fs::exists(tdir / "error.txt") ? "task adaptation failed: " + read_text(tdir / "error.txt")
                                                                   : "task adaptation failed";
                continue;
            }
            pretrained.emplace(label, load_checkpoint(pdir / "ckpt"));
            tasks.emplace(label, load_checkpoint(tdir / "ckpt"));
        }
    }

    std::vector<CellOutput> cells(const std::vector<CellSpec>& specs) {
        std::vector<std::function<void()>> work;
        for (const auto& c : specs) {
            const std::string label = run_label(c.run);
            const fs::path dir = cell_dir(out, plan, c.run, c.level, c.budget);
            if (run_errors.contains(label) || fs::exists(dir / "result.json")) continue;
            ++result.cell_runs;
            work.push_back([this, c, dir, label] {
                CellOutput o;
                try {
                    o = execute_cell(plan, c.run, c.level, c.budget, pretrained.at(label), tasks.at(label), dir);
                } catch (const std::exception& e) {
                    o.row = {c.run.variant, target_language(base_language(plan.stages.grammar_seed), c.level).name,
                             c.level, c.budget, c.run.seed, kNaN, "", true, e.what()};
                    o.trace = {c.run.variant, c.level, c.budget, c.run.seed, plan.stages.adapt.updates, {}};
                }
                write_cell(dir, o);
            });
        }
        run_jobs(work, jobs);

        std::vector<CellOutput> outs;
        for (const auto& c : specs) {
            const std::string label = run_label(c.run);
            const fs::path dir = cell_dir(out, plan, c.run, c.level, c.budget);
            std::optional<CellOutput> o;
            if (!run_errors.contains(label)) o = read_cell(dir);
            if (!o) {
                CellOutput f;
                f.row = {c.run.variant, target_language(base_language(plan.stages.grammar_seed), c.level).name, c.level,
                         c.budget, c.run.seed, kNaN, "", true,
                         run_errors.contains(label) ? run_errors.at(label) : "cell process exited without a result"};
                f.trace = {c.run.variant, c.level, c.budget, c.run.seed, plan.stages.adapt.updates, {}};
                o = f;
            }
            outs.push_back(*o);
        }
        return outs;
    }
};

std::string format_double(double x) {
    if (std::isnan(x)) return "nan";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", x);
    return buf;
}

// ---------------------------------------------------------------------------
// SVG helpers

std::string xml_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
        case '&': out += "&amp;"; break;
        case '<': out += "&lt;"; break;
        case '>': out += "&gt;"; break;
        case '"': out += "&quot;"; break;
        default: out += c;
        }
    }
    return out;
}

std::string fmt(double x, int precision = 2) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", precision, x);
    return buf;
}

std::string tick_label(double x) {
    const double a = std::abs(x);
    char buf[64];
    if (a >= 1e6 && std::fmod(a, 1e6) == 0) std::snprintf(buf, sizeof buf, "%gM", x / 1e6);
    else if (a >= 1e3 && std::fmod(a, 1e3) == 0) std::snprintf(buf, sizeof buf, "%gK", x / 1e3);
    else std::snprintf(buf, sizeof buf, "%.3g", x);
    return buf;
}

const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};

constexpr double kWidth = 720, kHeight = 440, kLeft = 70, kRight = 180, kTop = 40, kBottom = 60;

std::string svg_open(const std::string& title) {
    std::ostringstream s;
    s << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
      << "\" viewBox=\"0 0 " << kWidth << " " << kHeight << "\" font-family=\"sans-serif\" font-size=\"12\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << kWidth << "\" height=\"" << kHeight << "\" fill=\"white\"/>\n"
      << "<text x=\"" << kWidth / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << xml_escape(title)
      << "</text>\n";
    return s.str();
}

} // namespace

// ---------------------------------------------------------------------------
// Plan and configuration

const char* variant_name(Variant v) { return v == Variant::Standard ? "standard" : "forgetting"; }

Variant parse_variant(const std::string& text) {
    if (text == "standard") return Variant::Standard;
    if (text == "forgetting") return Variant::Forgetting;
    throw ConfigError("unknown variant '" + text + "' (expected standard or forgetting)");
}

LanguageSpec target_language(const LanguageSpec& base, const std::string& level) {
    if (level == "base") return base;
    return make_language(base, parse_distance(level));
}

void ExperimentPlan::validate() const {
    if (id.empty()) throw ConfigError("plan.id must not be empty");
    if (variants.empty()) throw ConfigError("variants must not be empty");
    if (languages.empty()) throw ConfigError("languages must not be empty");
    for (const auto& l : languages)
        if (l != "base") parse_distance(l);
    if (budgets.empty()) throw ConfigError("budgets must not be empty");
    for (auto b : budgets)
        if (b <= 0 || b > stages.target_corpus_tokens)
            throw ConfigError("budgets: " + std::to_string(b) + " is outside (0, adapt.corpus_tokens]");
    if (seeds.empty()) throw ConfigError("seeds must not be empty");
    for (auto k : k_values)
        if (k < 1) throw ConfigError("sweep.k_values must be positive");
    stages.pretrain.model.validate();
    stages.pretrain.schedule.validate();
    if (stages.pretrain.forgetting.interval < 1) throw ConfigError("pretrain.k must be positive");
    if (stages.pretrain.total_updates < 1) throw ConfigError("pretrain.updates must be positive");
    if (stages.pretrain.batch_size < 1) throw ConfigError("pretrain.batch must be positive");
    if (stages.pretrain.checkpoint_interval < 1) throw ConfigError("pretrain.checkpoint_interval must be positive");
    if (stages.pretrain_corpus_tokens < stages.pretrain.model.max_seq_len)
        throw ConfigError("pretrain.corpus_tokens must be at least model.max_seq_len");
    if (stages.adapt.updates < 1) throw ConfigError("adapt.updates must be positive");
    if (stages.adapt.batch_size < 1) throw ConfigError("adapt.batch must be positive");
    if (stages.task.epochs < 0) throw ConfigError("task.epochs must be non-negative");
    if (stages.task.batch_size < 1) throw ConfigError("task.batch must be positive");
    if (stages.task.freeze.embedding_frozen && stages.task.freeze.body_frozen)
        throw ConfigError("task.freeze_embeddings and task.freeze_body cannot both be set");
    if (stages.task_train_examples < 3 || stages.task_val_examples < 3 || stages.eval_examples < 3)
        throw ConfigError("task.train_examples, task.val_examples and eval.examples must be at least 3");
    if (stages.pretrain.model.max_seq_len < 42)
        throw ConfigError("model.max_seq_len must be at least 42 to fit classification pairs");
}

PretrainOptions pretrain_options(const ExperimentPlan& plan, Variant variant, std::uint64_t seed, std::int64_t interval) {
    PretrainOptions o = plan.stages.pretrain;
    o.seed = seed;
    o.forgetting.enabled = variant == Variant::Forgetting;
    if (o.forgetting.enabled) {
        o.forgetting.interval = interval;
        o.forgetting.emb_schedule = embedding_episode_schedule(o.schedule.peak_lr, interval);
    }
    o.on_step = nullptr;
    o.on_eval = nullptr;
    return o;
}

Corpus pretrain_corpus(const ExperimentPlan& plan, std::uint64_t seed) {
    return generate_corpus(base_language(plan.stages.grammar_seed), plan.stages.pretrain_corpus_tokens,
                           derive_seed(seed, "pretrain-corpus"), plan.stages.pretrain.model.max_seq_len);
}

Corpus target_corpus(const ExperimentPlan& plan, const std::string& level, std::uint64_t seed) {
    return generate_corpus(target_language(base_language(plan.stages.grammar_seed), level), plan.stages.target_corpus_tokens,
                           derive_seed(seed, "target-corpus:" + level), plan.stages.pretrain.model.max_seq_len);
}

ClsDataset task_train_set(const ExperimentPlan& plan, std::uint64_t seed) {
    const LanguageSpec base = base_language(plan.stages.grammar_seed);
    return {base, make_cls_dataset(base, plan.stages.task_train_examples, derive_seed(seed, "task-train"))};
}

ClsDataset task_val_set(const ExperimentPlan& plan, std::uint64_t seed) {
    const LanguageSpec base = base_language(plan.stages.grammar_seed);
    return {base, make_cls_dataset(base, plan.stages.task_val_examples, derive_seed(seed, "task-val"))};
}

ClsDataset eval_set(const ExperimentPlan& plan, const std::string& level, std::uint64_t seed) {
    const LanguageSpec lang = target_language(base_language(plan.stages.grammar_seed), level);
    return {lang, make_cls_dataset(lang, plan.stages.eval_examples, derive_seed(seed, "eval:" + level))};
}

std::size_t ExperimentPlan::cell_count() const { return variants.size() * languages.size() * budgets.size() * seeds.size(); }

ExperimentPlan default_plan() {
    ExperimentPlan p;
    auto& pre = p.stages.pretrain;
    pre.total_updates = 5000;
    pre.schedule = {7e-4, 400, 5000, 0.0};
    pre.forgetting.interval = 250;
    pre.forgetting.emb_schedule = embedding_episode_schedule(pre.schedule.peak_lr, 250);
    p.stages.adapt.probe_every = 50;
    p.stages.adapt.loss_every = 50;
    return p;
}

std::map<std::string, std::string> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> out;
    std::stringstream ss(text);
    std::string line;
    int number = 0;
    while (std::getline(ss, line)) {
        ++number;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(number) + ": expected key=value");
        const std::string key = trim(line.substr(0, eq));
        if (key.empty()) throw ConfigError("config line " + std::to_string(number) + ": empty key");
        out[key] = trim(line.substr(eq + 1));
    }
    return out;
}

std::map<std::string, std::string> read_config_file(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse_config_text(ss.str());
}

void apply_config(ExperimentPlan& plan, const std::map<std::string, std::string>& values) {
    auto& st = plan.stages;
    auto& pre = st.pretrain;
    auto as_int = [](const std::string& key, const std::string& v) -> std::int64_t {
        try {
            std::size_t used = 0;
            const long long x = std::stoll(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return x;
        } catch (const std::exception&) {
            throw ConfigError(key + ": '" + v + "' is not an integer");
        }
    };
    auto as_double = [](const std::string& key, const std::string& v) -> double {
        try {
            std::size_t used = 0;
            const double x = std::stod(v, &used);
            if (used != v.size()) throw std::invalid_argument(v);
            return x;
        } catch (const std::exception&) {
            throw ConfigError(key + ": '" + v + "' is not a number");
        }
    };
    auto as_bool = [](const std::string& key, const std::string& v) {
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw ConfigError(key + ": '" + v + "' is not a boolean");
    };
    auto as_int_list = [&](const std::string& key, const std::string& v) {
        std::vector<std::int64_t> out;
        for (const auto& item : split_list(v)) out.push_back(as_int(key, item));
        return out;
    };

    bool k_changed = false;
    bool pretrain_lr_changed = false;
    for (const auto& [key, v] : values) {
        if (key == "plan.id") plan.id = v;
        else if (key == "variants") {
            plan.variants.clear();
            for (const auto& item : split_list(v)) plan.variants.push_back(parse_variant(item));
        } else if (key == "languages") plan.languages = split_list(v);
        else if (key == "budgets") plan.budgets = as_int_list(key, v);
        else if (key == "seeds") {
            plan.seeds.clear();
            for (auto s : as_int_list(key, v)) plan.seeds.push_back(static_cast<std::uint64_t>(s));
        } else if (key == "sweep.k_values") plan.k_values = as_int_list(key, v);
        else if (key == "grammar_seed") st.grammar_seed = static_cast<std::uint64_t>(as_int(key, v));
        else if (key == "model.vocab_size") pre.model.vocab_size = static_cast<int>(as_int(key, v));
        else if (key == "model.d_model") pre.model.d_model = static_cast<int>(as_int(key, v));
        else if (key == "model.n_layers") pre.model.n_layers = static_cast<int>(as_int(key, v));
        else if (key == "model.n_heads") pre.model.n_heads = static_cast<int>(as_int(key, v));
        else if (key == "model.d_ff") pre.model.d_ff = static_cast<int>(as_int(key, v));
        else if (key == "model.max_seq_len") pre.model.max_seq_len = static_cast<int>(as_int(key, v));
        else if (key == "model.dropout") pre.model.dropout = static_cast<float>(as_double(key, v));
        else if (key == "model.tie_lm_head") pre.model.tie_lm_head = as_bool(key, v);
        else if (key == "pretrain.updates") {
            pre.total_updates = as_int(key, v);
            pre.schedule.total_updates = pre.total_updates;
        } else if (key == "pretrain.warmup") pre.schedule.warmup_updates = as_int(key, v);
        else if (key == "pretrain.lr") {
            pre.schedule.peak_lr = as_double(key, v);
            pretrain_lr_changed = true;
        } else if (key == "pretrain.batch") pre.batch_size = static_cast<int>(as_int(key, v));
        else if (key == "pretrain.k") {
            pre.forgetting.interval = as_int(key, v);
            k_changed = true;
        } else if (key == "pretrain.checkpoint_interval") pre.checkpoint_interval = as_int(key, v);
        else if (key == "pretrain.val_fraction") pre.val_fraction = as_double(key, v);
        else if (key == "pretrain.val_sequences") pre.val_sequences = static_cast<int>(as_int(key, v));
        else if (key == "pretrain.clip") pre.clip_norm = as_double(key, v);
        else if (key == "pretrain.corpus_tokens") st.pretrain_corpus_tokens = as_int(key, v);
        else if (key == "adapt.updates") st.adapt.updates = as_int(key, v);
        else if (key == "adapt.batch") st.adapt.batch_size = static_cast<int>(as_int(key, v));
        else if (key == "adapt.lr") st.adapt.peak_lr = as_double(key, v);
        else if (key == "adapt.warmup_fraction") st.adapt.warmup_fraction = as_double(key, v);
        else if (key == "adapt.probe_every") st.adapt.probe_every = static_cast<int>(as_int(key, v));
        else if (key == "adapt.loss_every") st.adapt.loss_every = static_cast<int>(as_int(key, v));
        else if (key == "adapt.eval_sequences") st.adapt.eval_sequences = static_cast<int>(as_int(key, v));
        else if (key == "adapt.corpus_tokens") st.target_corpus_tokens = as_int(key, v);
        else if (key == "eval.examples") st.eval_examples = static_cast<int>(as_int(key, v));
        else if (key == "task.epochs") st.task.epochs = static_cast<int>(as_int(key, v));
        else if (key == "task.batch") st.task.batch_size = static_cast<int>(as_int(key, v));
        else if (key == "task.lr") st.task.peak_lr = as_double(key, v);
        else if (key == "task.train_examples") st.task_train_examples = static_cast<int>(as_int(key, v));
        else if (key == "task.val_examples") st.task_val_examples = static_cast<int>(as_int(key, v));
        else if (key == "task.freeze_embeddings") st.task.freeze.embedding_frozen = as_bool(key, v);
        else if (key == "task.freeze_body") st.task.freeze.body_frozen = as_bool(key, v);
        else throw ConfigError("unknown config key '" + key + "'");
    }
    if (k_changed || pretrain_lr_changed)
        pre.forgetting.emb_schedule = embedding_episode_schedule(pre.schedule.peak_lr, pre.forgetting.interval);
}

// ---------------------------------------------------------------------------
// Metrics

std::string metrics_line(const MetricsRecord& r) {
    json j = {{"run_id", r.run_id},
              {"stage", r.stage},
              {"step", r.step},
              {"loss", std::isnan(r.loss) ? json(nullptr) : json(r.loss)},
              {"accuracy", r.accuracy ? json(*r.accuracy) : json(nullptr)},
              {"lr_body", r.lr_body},
              {"lr_emb", r.lr_emb},
              {"event", r.event},
              {"wall", r.wall_seconds}};
    return j.dump();
}

MetricsRecord parse_metrics_line(const std::string& line) {
    json j;
    try {
        j = json::parse(line);
    } catch (const json::exception& e) {
        throw IoError(std::string("malformed metrics record: ") + e.what());
    }
    MetricsRecord r;
    r.run_id = j.at("run_id").get<std::string>();
    r.stage = j.at("stage").get<std::string>();
    r.step = j.at("step").get<std::int64_t>();
    r.loss = json_number(j.at("loss"));
    if (!j.at("accuracy").is_null()) r.accuracy = j.at("accuracy").get<double>();
    r.lr_body = j.at("lr_body").get<double>();
    r.lr_emb = j.at("lr_emb").get<double>();
    r.event = j.at("event").get<std::string>();
    r.wall_seconds = j.at("wall").get<double>();
    return r;
}

MetricsWriter::MetricsWriter(const fs::path& path) : path_(path) {
    std::error_code ec;
    if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
    std::ofstream os(path_, std::ios::app);
    if (!os) throw IoError("cannot open metrics file " + path_.string());
}

void MetricsWriter::append(const MetricsRecord& r) {
    const auto key = std::make_pair(r.run_id, r.stage);
    if (const auto it = last_step_.find(key); it != last_step_.end() && r.step <= it->second) {
        throw PreconditionError("metrics: step " + std::to_string(r.step) + " does not increase for " + r.run_id + "/" +
                                r.stage);
    }
    last_step_[key] = r.step;
    std::ofstream os(path_, std::ios::app);
    os << metrics_line(r) << '\n';
    if (!os) throw IoError("cannot append to " + path_.string());
}

// ---------------------------------------------------------------------------
// Matrix and sweeps

MatrixResult run_matrix(const ExperimentPlan& plan, const fs::path& out, int jobs) {
    plan.validate();
    Driver d{plan, out, jobs, {}, {}, {}, {}};
    std::vector<RunKey> runs;
    for (auto v : plan.variants)
        for (auto s : plan.seeds) runs.push_back({v, s, plan.stages.pretrain.forgetting.interval});
    d.prepare(runs);

    std::vector<CellSpec> specs;
    for (const auto& k : runs)
        for (const auto& l : plan.languages)
            for (auto b : plan.budgets) specs.push_back({k, l, b});
    for (auto& c : d.cells(specs)) {
        d.result.failures += c.row.failed ? 1 : 0;
        d.result.rows.push_back(std::move(c.row));
        d.result.adapt_traces.push_back(std::move(c.trace));
    }
    return d.result;
}

std::string results_csv(const std::vector<ResultRow>& rows) {
    std::ostringstream s;
    s << kResultsHeader << '\n';
    for (const auto& r : rows) {
        s << variant_name(r.variant) << ',' << r.language << ',' << r.distance << ',' << r.budget << ',' << r.seed << ','
          << format_double(r.accuracy) << ',' << (r.failed ? "FAILED" : r.ckpt_hash) << '\n';
    }
    return s.str();
}

void save_matrix_result(const MatrixResult& result, const fs::path& out) {
    write_text_atomic(out / "results.csv", results_csv(result.rows));
    json j;
    j["rows"] = json::array();
    for (const auto& r : result.rows) j["rows"].push_back(row_json(r));
    j["adapt"] = json::array();
    for (const auto& t : result.adapt_traces) j["adapt"].push_back(adapt_trace_json(t));
    j["pretrain"] = json::array();
    for (const auto& t : result.pretrain_traces) j["pretrain"].push_back(pretrain_trace_json(t));
    write_text_atomic(out / "traces.json", j.dump());
}

MatrixResult load_matrix_result(const fs::path& out) {
    const fs::path p = out / "traces.json";
    if (!fs::exists(p)) throw IoError("no results under " + out.string() + " (missing traces.json)");
    json j;
    try {
        j = json::parse(read_text(p));
    } catch (const json::exception& e) {
        throw IoError(p.string() + ": " + e.what());
    }
    MatrixResult r;
    for (const auto& x : j.at("rows")) {
        r.rows.push_back(row_from_json(x));
        r.failures += r.rows.back().failed ? 1 : 0;
    }
    for (const auto& x : j.at("adapt")) r.adapt_traces.push_back(adapt_trace_from_json(x));
    for (const auto& x : j.at("pretrain")) r.pretrain_traces.push_back(pretrain_trace_from_json(x));
    return r;
}

std::vector<CurvePoint> budget_curves(const std::vector<ResultRow>& rows) {
    std::map<std::tuple<int, std::string, std::int64_t>, std::vector<double>> groups;
    for (const auto& r : rows) {
        auto& g = groups[{static_cast<int>(r.variant), r.distance, r.budget}];
        if (!r.failed) g.push_back(r.accuracy);
    }
    std::vector<CurvePoint> out;
    for (const auto& [key, accs] : groups) {
        out.push_back({static_cast<Variant>(std::get<0>(key)), std::get<1>(key), std::get<2>(key), median(accs),
                       static_cast<int>(accs.size())});
    }
    return out;
}

BudgetSweep sweep_adaptation_budget(ExperimentPlan plan, const fs::path& out, int jobs) {
    if (std::find(plan.languages.begin(), plan.languages.end(), "base") == plan.languages.end())
        plan.languages.push_back("base");
    BudgetSweep s;
    s.matrix = run_matrix(plan, out, jobs);
    s.curves = budget_curves(s.matrix.rows);
    return s;
}

Convergence adaptation_convergence(std::span<const EvalPoint> evals, std::int64_t total_updates) {
    std::vector<EvalPoint> acc;
    for (const auto& e : evals)
        if (!std::isnan(e.accuracy)) acc.push_back(e);
    if (acc.empty()) throw PreconditionError("adaptation_convergence: trace has no accuracy points");
    Convergence c;
    c.final_accuracy = acc.back().accuracy;
    c.threshold_step = total_updates + 1;
    for (const auto& e : acc) {
        if (e.update >= 1 && e.accuracy >= 0.9 * c.final_accuracy) {
            c.threshold_step = e.update;
            break;
        }
    }
    const double tenth = 0.1 * static_cast<double>(total_updates);
    double at = acc.front().accuracy;
    for (const auto& e : acc)
        if (static_cast<double>(e.update) <= tenth) at = e.accuracy;
    c.fraction_at_tenth = c.final_accuracy > 0.0 ? at / c.final_accuracy : 0.0;
    return c;
}

std::vector<KSweepEntry> sweep_forgetting_interval(const ExperimentPlan& plan, const fs::path& out, int jobs) {
    plan.validate();
    if (plan.k_values.empty()) throw ConfigError("sweep.k_values must not be empty");
    Driver d{plan, out, jobs, {}, {}, {}, {}};
    std::vector<RunKey> runs;
    for (auto k : plan.k_values) runs.push_back({Variant::Forgetting, plan.seeds.front(), k});
    d.prepare(runs);

    const std::int64_t budget = *std::max_element(plan.budgets.begin(), plan.budgets.end());
    std::vector<CellSpec> specs;
    for (const auto& k : runs) specs.push_back({k, plan.languages.front(), budget});
    const auto cells = d.cells(specs);

    std::vector<KSweepEntry> entries;
    for (std::size_t i = 0; i < runs.size(); ++i) {
        KSweepEntry e;
        e.interval = runs[i].interval;
        const auto it = std::find_if(d.result.pretrain_traces.begin(), d.result.pretrain_traces.end(),
                                     [&](const PretrainTrace& t) { return t.interval == e.interval; });
        if (it != d.result.pretrain_traces.end()) e.trace = *it;
        e.accuracy = cells[i].row.accuracy;
        e.failed = cells[i].row.failed || e.trace.diverged;
        e.error = cells[i].row.failed ? cells[i].row.error : e.trace.divergence_report;
        entries.push_back(std::move(e));
    }
    return entries;
}

double relative_gain(double forgetting, double standard) {
    if (standard == 0.0) throw PreconditionError("relative_gain: standard score is zero");
    return (forgetting - standard) / standard;
}

double averaged_relative_gain(std::span<const std::pair<double, double>> forgetting_standard) {
    if (forgetting_standard.empty()) throw PreconditionError("averaged_relative_gain: no languages");
    double total = 0.0;
    for (const auto& [f, s] : forgetting_standard) total += relative_gain(f, s);
    return total / static_cast<double>(forgetting_standard.size());
}

// ---------------------------------------------------------------------------
// Rendering

std::string render_line_chart(const LineChart& chart) {
    double x0 = std::numeric_limits<double>::infinity(), x1 = -x0, y0 = x0, y1 = -x0;
    auto tx = [&](double x) { return chart.log_x ? std::log10(x) : x; };
    for (const auto& s : chart.series)
        for (const auto& [x, y] : s.points) {
            if (!std::isfinite(y) || (chart.log_x && x <= 0)) continue;
            x0 = std::min(x0, tx(x));
            x1 = std::max(x1, tx(x));
            y0 = std::min(y0, y);
            y1 = std::max(y1, y);
        }
    if (!std::isfinite(x0)) x0 = 0, x1 = 1, y0 = 0, y1 = 1;
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    const double pad = 0.05 * (y1 - y0);
    y0 -= pad;
    y1 += pad;
    const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
    auto px = [&](double x) { return kLeft + (tx(x) - x0) / (x1 - x0) * pw; };
    auto py = [&](double y) { return kTop + (1.0 - (y - y0) / (y1 - y0)) * ph; };

    std::ostringstream s;
    s << svg_open(chart.title);
    s << "<g stroke=\"#444\" stroke-width=\"1\">\n"
      << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + ph << "\" x2=\"" << kLeft + pw << "\" y2=\"" << kTop + ph
      << "\"/>\n"
      << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + ph << "\"/>\n"
      << "</g>\n";
    for (int i = 0; i <= 4; ++i) {
        const double yv = y0 + (y1 - y0) * i / 4.0;
        s << "<text x=\"" << kLeft - 6 << "\" y=\"" << fmt(py(yv) + 4) << "\" text-anchor=\"end\">" << tick_label(yv)
          << "</text>\n";
        const double xv = chart.log_x ? std::pow(10.0, x0 + (x1 - x0) * i / 4.0) : x0 + (x1 - x0) * i / 4.0;
        s << "<text x=\"" << fmt(px(xv)) << "\" y=\"" << kTop + ph + 18 << "\" text-anchor=\"middle\">"
          << tick_label(chart.log_x ? std::round(xv) : xv) << "</text>\n";
    }
    s << "<text x=\"" << kLeft + pw / 2 << "\" y=\"" << kHeight - 16 << "\" text-anchor=\"middle\">"
      << xml_escape(chart.x_label) << "</text>\n";
    s << "<text x=\"16\" y=\"" << kTop + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << kTop + ph / 2 << ")\">" << xml_escape(chart.y_label) << "</text>\n";
    for (double m : chart.markers) {
        if (chart.log_x && m <= 0) continue;
        s << "<line x1=\"" << fmt(px(m)) << "\" y1=\"" << kTop << "\" x2=\"" << fmt(px(m)) << "\" y2=\"" << kTop + ph
          << "\" stroke=\"#999\" stroke-dasharray=\"4 3\" stroke-width=\"0.8\"/>\n";
    }
    for (std::size_t i = 0; i < chart.series.size(); ++i) {
        const auto& ser = chart.series[i];
        const char* color = kPalette[i % std::size(kPalette)];
        s << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        bool first = true;
        for (const auto& [x, y] : ser.points) {
            if (!std::isfinite(y) || (chart.log_x && x <= 0)) continue;
            s << (first ? "" : " ") << fmt(px(x)) << ',' << fmt(py(y));
            first = false;
        }
        s << "\"/>\n";
        const double ly = kTop + 14 + 18.0 * static_cast<double>(i);
        s << "<line x1=\"" << kWidth - kRight + 12 << "\" y1=\"" << ly << "\" x2=\"" << kWidth - kRight + 36 << "\" y2=\""
          << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        s << "<text x=\"" << kWidth - kRight + 42 << "\" y=\"" << ly + 4 << "\">" << xml_escape(ser.name) << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

std::string render_bar_chart(const BarChart& chart) {
    double lo = 0.0, hi = 0.0;
    for (const auto& [_, v] : chart.bars)
        if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
    if (hi == lo) hi = lo + 1;
    const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
    auto py = [&](double y) { return kTop + (1.0 - (y - lo) / (hi - lo)) * ph; };
    std::ostringstream s;
    s << svg_open(chart.title);
    s << "<line x1=\"" << kLeft << "\" y1=\"" << fmt(py(0)) << "\" x2=\"" << kLeft + pw << "\" y2=\"" << fmt(py(0))
      << "\" stroke=\"#444\"/>\n";
    s << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft << "\" y2=\"" << kTop + ph
      << "\" stroke=\"#444\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double yv = lo + (hi - lo) * i / 4.0;
        s << "<text x=\"" << kLeft - 6 << "\" y=\"" << fmt(py(yv) + 4) << "\" text-anchor=\"end\">" << tick_label(yv)
          << "</text>\n";
    }
    s << "<text x=\"16\" y=\"" << kTop + ph / 2 << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
      << kTop + ph / 2 << ")\">" << xml_escape(chart.y_label) << "</text>\n";
    const double slot = chart.bars.empty() ? pw : pw / static_cast<double>(chart.bars.size());
    for (std::size_t i = 0; i < chart.bars.size(); ++i) {
        const auto& [name, v] = chart.bars[i];
        const double value = std::isfinite(v) ? v : 0.0;
        const double top = py(std::max(value, 0.0)), bottom = py(std::min(value, 0.0));
        const double x = kLeft + slot * static_cast<double>(i) + slot * 0.2;
        s << "<rect x=\"" << fmt(x) << "\" y=\"" << fmt(top) << "\" width=\"" << fmt(slot * 0.6) << "\" height=\""
          << fmt(bottom - top) << "\" fill=\"" << kPalette[i % std::size(kPalette)] << "\"/>\n";
        s << "<text x=\"" << fmt(x + slot * 0.3) << "\" y=\"" << kTop + ph + 18 << "\" text-anchor=\"middle\">"
          << xml_escape(name) << "</text>\n";
        s << "<text x=\"" << fmt(x + slot * 0.3) << "\" y=\"" << fmt(top - 4) << "\" text-anchor=\"middle\">"
          << fmt(value, 3) << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

namespace {

void ensure_dir(const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw IoError("cannot create report directory " + dir.string());
    const fs::path probe = dir / ".write-probe";
    std::ofstream os(probe);
    if (!os) throw IoError("report directory " + dir.string() + " is not writable");
    os.close();
    fs::remove(probe, ec);
}

std::int64_t low_data_budget(const std::vector<ResultRow>& rows) {
    std::set<std::int64_t> budgets;
    for (const auto& r : rows) budgets.insert(r.budget);
    if (budgets.contains(100'000)) return 100'000;
    return budgets.empty() ? 0 : *budgets.rbegin();
}

// Median over seeds of an accuracy trace at each update.
std::vector<std::pair<double, double>> median_trace(const std::vector<const AdaptTrace*>& traces) {
    std::map<std::int64_t, std::vector<double>> at;
    for (const auto* t : traces)
        for (const auto& e : t->evals)
            if (!std::isnan(e.accuracy)) at[e.update].push_back(e.accuracy);
    std::vector<std::pair<double, double>> out;
    for (const auto& [u, v] : at) out.emplace_back(static_cast<double>(u), median(v));
    return out;
}

} // namespace

void render_report(const MatrixResult& result, const fs::path& dir) {
    if (result.rows.empty()) throw PreconditionError("render_report: no results");
    ensure_dir(dir);
    write_text_atomic(dir / "results.csv", results_csv(result.rows));

    std::set<std::string> distances;
    std::set<int> variants;
    for (const auto& r : result.rows) distances.insert(r.distance), variants.insert(static_cast<int>(r.variant));

    // Accuracy vs budget.
    const auto curves = budget_curves(result.rows);
    {
        std::ostringstream csv;
        csv << "variant,distance,budget,median_accuracy,seeds\n";
        LineChart chart{"Zero-shot accuracy vs adaptation budget", "adaptation tokens", "accuracy (median over seeds)", true,
                        {}, {}};
        std::map<std::string, SvgSeries> series;
        for (const auto& c : curves) {
            csv << variant_name(c.variant) << ',' << c.distance << ',' << c.budget << ',' << format_double(c.median_accuracy)
                << ',' << c.seeds << '\n';
            const std::string name = std::string(variant_name(c.variant)) + " / " + c.distance;
            series[name].name = name;
            series[name].points.emplace_back(static_cast<double>(c.budget), c.median_accuracy);
        }
        for (auto& [_, s] : series) chart.series.push_back(s);
        write_text_atomic(dir / "budget_curve.csv", csv.str());
        write_text_atomic(dir / "accuracy_vs_budget.svg", render_line_chart(chart));
    }

    // Pretraining loss with reset markers.
    if (!result.pretrain_traces.empty()) {
        std::ostringstream csv;
        csv << "variant,seed,interval,update,loss,reset\n";
        for (const auto& t : result.pretrain_traces) {
            std::set<std::int64_t> resets(t.resets.begin(), t.resets.end());
            for (std::size_t i = 0; i < t.losses.size(); ++i) {
                const auto u = static_cast<std::int64_t>(i + 1);
                csv << variant_name(t.variant) << ',' << t.seed << ',' << t.interval << ',' << u << ','
                    << format_double(t.losses[i]) << ',' << (resets.contains(u) ? 1 : 0) << '\n';
            }
        }
        write_text_atomic(dir / "pretrain_loss.csv", csv.str());
        const std::uint64_t seed = result.pretrain_traces.front().seed;
        LineChart chart{"Pretraining loss (seed " + std::to_string(seed) + ")", "update", "MLM loss", false, {}, {}};
        for (const auto& t : result.pretrain_traces) {
            if (t.seed != seed) continue;
            SvgSeries s{variant_name(t.variant), {}};
            for (std::size_t i = 0; i < t.losses.size(); ++i) s.points.emplace_back(static_cast<double>(i + 1), t.losses[i]);
            chart.series.push_back(std::move(s));
            for (auto r : t.resets) chart.markers.push_back(static_cast<double>(r));
        }
        write_text_atomic(dir / "loss_vs_step.svg", render_line_chart(chart));
    }

    // Accuracy during language adaptation, per distance at the largest budget plus an aggregate.
    std::int64_t largest = 0;
    for (const auto& r : result.rows) largest = std::max(largest, r.budget);
    {
        std::ostringstream csv;
        csv << "variant,distance,budget,seed,update,accuracy\n";
        for (const auto& t : result.adapt_traces)
            for (const auto& e : t.evals)
                if (!std::isnan(e.accuracy))
                    csv << variant_name(t.variant) << ',' << t.distance << ',' << t.budget << ',' << t.seed << ','
                        << e.update << ',' << format_double(e.accuracy) << '\n';
        write_text_atomic(dir / "adaptation_accuracy.csv", csv.str());

        LineChart all{"Adaptation accuracy, median over languages and seeds (budget " + tick_label(double(largest)) + ")",
                      "language-adaptation update", "zero-shot accuracy", false, {}, {}};
        for (int v : variants) {
            std::vector<const AdaptTrace*> pooled;
            for (const auto& d : distances) {
                std::vector<const AdaptTrace*> picked;
                for (const auto& t : result.adapt_traces)
                    if (static_cast<int>(t.variant) == v && t.distance == d && t.budget == largest) picked.push_back(&t);
                pooled.insert(pooled.end(), picked.begin(), picked.end());
            }
            all.series.push_back({variant_name(static_cast<Variant>(v)), median_trace(pooled)});
        }
        for (const auto& d : distances) {
            LineChart chart{"Adaptation accuracy, " + d + " (budget " + tick_label(double(largest)) + ", median over seeds)",
                            "language-adaptation update", "zero-shot accuracy", false, {}, {}};
            for (int v : variants) {
                std::vector<const AdaptTrace*> picked;
                for (const auto& t : result.adapt_traces)
                    if (static_cast<int>(t.variant) == v && t.distance == d && t.budget == largest) picked.push_back(&t);
                chart.series.push_back({variant_name(static_cast<Variant>(v)), median_trace(picked)});
            }
            write_text_atomic(dir / ("adaptation_" + d + ".svg"), render_line_chart(chart));
        }
        write_text_atomic(dir / "adaptation_all.svg", render_line_chart(all));
    }

    // Convergence statistics per run.
    std::ostringstream conv;
    conv << "variant,distance,budget,seed,threshold_step,fraction_at_tenth,final_accuracy\n";
    for (const auto& t : result.adapt_traces) {
        bool has_acc = false;
        for (const auto& e : t.evals) has_acc = has_acc || !std::isnan(e.accuracy);
        if (!has_acc) continue;
        const auto c = adaptation_convergence(t.evals, t.updates);
        conv << variant_name(t.variant) << ',' << t.distance << ',' << t.budget << ',' << t.seed << ',' << c.threshold_step
             << ',' << format_double(c.fraction_at_tenth) << ',' << format_double(c.final_accuracy) << '\n';
    }
    write_text_atomic(dir / "convergence.csv", conv.str());

    // Relative gain per distance and budget.
    std::map<std::pair<std::string, std::int64_t>, std::pair<double, double>> pairs; // (std, fgt)
    for (const auto& c : curves) {
        auto& p = pairs.try_emplace({c.distance, c.budget}, kNaN, kNaN).first->second;
        (c.variant == Variant::Standard ? p.first : p.second) = c.median_accuracy;
    }
    std::ostringstream gain_csv;
    gain_csv << "distance,budget,standard,forgetting,relative_gain\n";
    std::ostringstream md;
    md << "# Summary\n\n"
       << "Accuracies are medians over seeds. Relative gain is (forgetting - standard) / standard; "
       << "the averaged relative gain is the mean of the per-language gains.\n\n"
       << "| distance | budget | standard | forgetting | relative gain |\n|---|---:|---:|---:|---:|\n";
    std::map<std::int64_t, std::vector<std::pair<double, double>>> by_budget;
    for (const auto& [key, p] : pairs) {
        const double g = (std::isnan(p.first) || std::isnan(p.second) || p.first == 0.0) ? kNaN : relative_gain(p.second, p.first);
        gain_csv << key.first << ',' << key.second << ',' << format_double(p.first) << ',' << format_double(p.second) << ','
                 << format_double(g) << '\n';
        md << "| " << key.first << " | " << key.second << " | " << fmt(p.first, 3) << " | " << fmt(p.second, 3) << " | "
           << (std::isnan(g) ? "n/a" : (g >= 0 ? "+" : "") + fmt(100.0 * g, 1) + "%") << " |\n";
        if (!std::isnan(g) && key.first != "base") by_budget[key.second].emplace_back(p.second, p.first);
    }
    write_text_atomic(dir / "relative_gain.csv", gain_csv.str());
    md << "\n| budget | averaged relative gain over languages |\n|---:|---:|\n";
    for (const auto& [b, v] : by_budget) {
        const double g = averaged_relative_gain(v);
        md << "| " << b << " | " << (g >= 0 ? "+" : "") << fmt(100.0 * g, 1) << "% |\n";
    }

    const std::int64_t low = low_data_budget(result.rows);
    BarChart bars{"Relative gain of forgetting at budget " + tick_label(double(low)), "relative gain", {}};
    for (const auto& d : distances)
        if (const auto it = pairs.find({d, low}); it != pairs.end() && it->second.first > 0)
            bars.bars.emplace_back(d, relative_gain(it->second.second, it->second.first));
    write_text_atomic(dir / "relative_gain.svg", render_bar_chart(bars));

    if (result.failures > 0) {
        md << "\n## Failed cells\n\n";
        for (const auto& r : result.rows)
            if (r.failed)
                md << "- " << variant_name(r.variant) << " " << r.distance << " budget " << r.budget << " seed " << r.seed
                   << ": " << r.error << "\n";
    }
    write_text_atomic(dir / "summary.md", md.str());
}

void render_k_sweep(const std::vector<KSweepEntry>& entries, const fs::path& dir) {
    if (entries.empty()) throw PreconditionError("render_k_sweep: no entries");
    ensure_dir(dir);
    std::ostringstream csv;
    csv << "k,resets,selected_update,final_loss,accuracy,diverged\n";
    std::ostringstream traces;
    traces << "k,update,loss,reset\n";
    LineChart chart{"Pretraining loss per forgetting interval (50-update means)", "update", "MLM loss", false, {}, {}};
    for (const auto& e : entries) {
        const double last = e.trace.losses.empty() ? kNaN : e.trace.losses.back();
        csv << e.interval << ',' << e.trace.resets.size() << ',' << e.trace.selected_update << ',' << format_double(last)
            << ',' << format_double(e.accuracy) << ',' << (e.failed ? 1 : 0) << '\n';
        std::set<std::int64_t> resets(e.trace.resets.begin(), e.trace.resets.end());
        SvgSeries s{"K=" + std::to_string(e.interval) + (e.failed ? " (failed)" : ""), {}};
        double block = 0.0;
        int n = 0;
        for (std::size_t i = 0; i < e.trace.losses.size(); ++i) {
            const auto u = static_cast<std::int64_t>(i + 1);
            traces << e.interval << ',' << u << ',' << format_double(e.trace.losses[i]) << ',' << (resets.contains(u) ? 1 : 0)
                   << '\n';
            block += e.trace.losses[i];
            if (++n == 50) {
                s.points.emplace_back(static_cast<double>(u), block / n);
                block = 0.0;
                n = 0;
            }
        }
        chart.series.push_back(std::move(s));
    }
    write_text_atomic(dir / "k_sweep.csv", csv.str());
    write_text_atomic(dir / "k_sweep_traces.csv", traces.str());
    write_text_atomic(dir / "k_sweep_loss.svg", render_line_chart(chart));
}

} // namespace forgetlm
