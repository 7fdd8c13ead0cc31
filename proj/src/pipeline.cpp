// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlm/pipeline.h"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "forgetlm/errors.h"
#include "forgetlm/hash.h"

namespace forgetlm {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::uint64_t indexed_seed(std::uint64_t seed, std::string_view tag, std::uint64_t index) {
    return derive_seed(seed ^ (0x9e3779b97f4a7c15ULL * (index + 1)), tag);
}

using Values = std::vector<std::vector<float>>;

Values copy_values(const TransformerModel& model) {
    Values v;
    for (const auto& p : model.params()) v.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
    return v;
}

void restore_values(TransformerModel& model, const Values& v) {
    const auto& params = model.params();
    for (std::size_t i = 0; i < params.size(); ++i) std::copy(v[i].begin(), v[i].end(), params[i].tensor.data().begin());
}

double mean_mlm_loss(const TransformerModel& model, std::span<const MaskedSequence> set) {
    Tape tape(false);
    return model.mlm_loss(tape, set, ForwardMode::eval()).item();
}

bool is_base_language(const LanguageSpec& spec) {
    return spec.script_offset == 0 && spec.swap_fraction == 0.0 && !spec.reverse_word_order;
}

Provenance child_provenance(const Checkpoint& parent, std::string stage) {
    Provenance p;
    p.stage = std::move(stage);
    p.parent_hash = checkpoint_hash(parent);
    p.lineage = parent.provenance.lineage;
    p.lineage.push_back({parent.provenance.stage, p.parent_hash});
    return p;
}

ScheduleSpec stage_schedule(double peak, double warmup_fraction, std::int64_t total) {
    ScheduleSpec s;
    s.peak_lr = peak;
    s.warmup_updates = std::min<std::int64_t>(std::llround(warmup_fraction * static_cast<double>(total)), total - 1);
    s.total_updates = total;
    s.end_lr = 0.0;
    s.validate();
    return s;
}

} // namespace

void FreezeMask::validate() const {
    if (embedding_frozen && body_frozen) throw PreconditionError("freeze mask: at least one group must be trainable");
}

OptimizerSnapshot snapshot_optimizer(const TrainState& state) {
    OptimizerSnapshot o;
    const auto& emb = state.emb_state();
    const auto& body = state.body_state();
    std::size_t ie = 0, ib = 0;
    for (const auto& p : state.model().params()) {
        const bool is_emb = p.group == ParamGroup::Embedding;
        o.m.push_back(is_emb ? emb.m[ie] : body.m[ib]);
        o.v.push_back(is_emb ? emb.v[ie] : body.v[ib]);
        (is_emb ? ie : ib)++;
    }
    o.emb_step = emb.step;
    o.body_step = body.step;
    return o;
}

MaskedSequence make_mlm_example(std::span<const TokenId> sequence, TokenRange content, int max_seq_len,
                                std::uint64_t seed) {
    const std::size_t keep = std::min(sequence.size(), static_cast<std::size_t>(std::max(0, max_seq_len - 2)));
    const auto body = sequence.first(keep);
    MaskResult r = mlm_mask(body, content, seed);
    MaskedSequence out;
    out.input.reserve(keep + 2);
    out.input.push_back(kClsId);
    out.input.insert(out.input.end(), r.masked.input.begin(), r.masked.input.end());
    out.input.push_back(kSepId);
    out.target.push_back(kClsId);
    out.target.insert(out.target.end(), body.begin(), body.end());
    out.target.push_back(kSepId);
    for (int pos : r.masked.positions) out.positions.push_back(pos + 1);
    return out;
}

StageResult pretrain(const PretrainOptions& options, const Corpus& corpus) {
    if (!is_base_language(corpus.language)) {
        throw PreconditionError("pretrain: corpus language '" + corpus.language.name + "' is not a base language");
    }
    options.model.validate();
    options.schedule.validate();
    options.forgetting.validate();
    if (options.total_updates < 1 || options.batch_size < 1 || options.checkpoint_interval < 1) {
        throw ConfigError("pretrain: total_updates, batch_size and checkpoint_interval must be positive");
    }
    if (corpus.sequences.size() < 2) throw SizeError("pretrain: corpus needs at least two sequences");

    const TokenRange content = corpus.language.content_range();
    std::vector<std::size_t> order(corpus.sequences.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 split_rng(derive_seed(options.seed, "split"));
    std::shuffle(order.begin(), order.end(), split_rng);
    const std::size_t n_val = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(options.val_fraction * static_cast<double>(order.size()))), 1,
        order.size() - 1);
    std::vector<MaskedSequence> val_set;
    for (std::size_t i = 0; i < n_val && static_cast<int>(i) < options.val_sequences; ++i) {
        val_set.push_back(make_mlm_example(corpus.sequences[order[i]], content, options.model.max_seq_len,
                                           indexed_seed(options.seed, "val-mask", i)));
    }
    const std::vector<std::size_t> train(order.begin() + static_cast<std::ptrdiff_t>(n_val), order.end());

    TransformerModel model = TransformerModel::init(options.model, options.seed);
    TrainState state(model, options.adam, derive_seed(options.seed, "reset"));
    std::mt19937_64 batch_rng(derive_seed(options.seed, "batch"));
    std::mt19937_64 dropout_rng(derive_seed(options.seed, "dropout"));
    std::uniform_int_distribution<std::size_t> pick(0, train.size() - 1);

    StageResult result{Checkpoint{model, {}, std::nullopt}, {}};
    TrainLog& log = result.log;
    Values best;
    std::optional<OptimizerSnapshot> best_optim;
    double best_val = std::numeric_limits<double>::infinity();
    std::int64_t selected = 0;
    std::int64_t done = 0;

    for (std::int64_t n = 1; n <= options.total_updates; ++n) {
        std::vector<MaskedSequence> batch;
        batch.reserve(static_cast<std::size_t>(options.batch_size));
        for (int b = 0; b < options.batch_size; ++b) {
            batch.push_back(make_mlm_example(corpus.sequences[train[pick(batch_rng)]], content, options.model.max_seq_len,
                                             indexed_seed(options.seed, "mask", static_cast<std::uint64_t>(n) * 4096 +
                                                                                    static_cast<std::uint64_t>(b))));
        }
        StepMetrics m;
        try {
            m = training_step(
                state, [&](Tape& tape) { return model.mlm_loss(tape, batch, ForwardMode::training(dropout_rng)); },
                options.schedule, options.forgetting, n, options.clip_norm);
        } catch (const NumericError& e) {
            log.diverged = true;
            log.divergence_report = "diverged at update " + std::to_string(n) + ": " + e.what();
            break;
        }
        done = n;
        log.steps.push_back(m);
        if (m.reset) log.resets.push_back(n);
        if (options.on_step) options.on_step(m);

        if (n % options.checkpoint_interval == 0 || n == options.total_updates) {
            const double val = mean_mlm_loss(model, val_set);
            EvalPoint ep{n, val, kNaN};
            log.evals.push_back(ep);
            if (options.on_eval) options.on_eval(ep);
            if (options.forgetting.enabled && val < best_val) {
                best_val = val;
                best = copy_values(model);
                if (options.keep_optimizer) best_optim = snapshot_optimizer(state);
                selected = n;
            }
        }
    }

    Checkpoint& ckpt = result.checkpoint;
    if (options.forgetting.enabled && !best.empty()) {
        restore_values(model, best);
        ckpt.optim = best_optim;
    } else {
        selected = done;
        if (options.keep_optimizer) ckpt.optim = snapshot_optimizer(state);
    }
    model.set_trainable(ParamGroup::Embedding, true);
    model.set_trainable(ParamGroup::Body, true);
    ckpt.model = model;
    ckpt.provenance.stage = "pretrain";
    ckpt.provenance.language = corpus.language.name;
    ckpt.provenance.updates = done;
    ckpt.provenance.seed = options.seed;
    ckpt.provenance.forgetting = options.forgetting;
    ckpt.provenance.selected_update = selected;
    return result;
}

StageResult adapt_language(const Checkpoint& parent, const Corpus& target, const AdaptLanguageOptions& options) {
    if (parent.provenance.stage != "pretrain") {
        throw PreconditionError("adapt_language: parent is a '" + parent.provenance.stage + "' checkpoint, not pretrain");
    }
    if (options.updates < 1 || options.batch_size < 1) throw ConfigError("adapt_language: updates and batch_size must be positive");
    const Corpus data = subsample_budget(target, options.budget_tokens, derive_seed(options.seed, "budget"));
    const TokenRange content = target.language.content_range();
    const int max_len = parent.config().max_seq_len;

    std::vector<MaskedSequence> heldout;
    if (options.eval_sequences > 0) {
        const Corpus h = generate_corpus(target.language, static_cast<std::int64_t>(options.eval_sequences) * max_len,
                                         derive_seed(target.seed, "heldout"), max_len);
        for (std::size_t i = 0; i < h.sequences.size() && static_cast<int>(i) < options.eval_sequences; ++i) {
            heldout.push_back(make_mlm_example(h.sequences[i], content, max_len, indexed_seed(target.seed, "heldout-mask", i)));
        }
    }

    TransformerModel model = parent.model.clone();
    std::mt19937_64 init_rng(derive_seed(options.seed, "embedding-init"));
    model.reinit_embeddings(init_rng, options.init_std);
    model.set_trainable(ParamGroup::Embedding, true);
    model.set_trainable(ParamGroup::Body, false);

    TrainState state(model, options.adam, derive_seed(options.seed, "reset"));
    const ScheduleSpec schedule = stage_schedule(options.peak_lr, options.warmup_fraction, options.updates);
    ForgettingConfig no_forgetting;
    no_forgetting.enabled = false;
    std::mt19937_64 batch_rng(derive_seed(options.seed, "batch"));
    std::mt19937_64 dropout_rng(derive_seed(options.seed, "dropout"));
    std::uniform_int_distribution<std::size_t> pick(0, data.sequences.size() - 1);

    StageResult result{Checkpoint{model, child_provenance(parent, "adapt_language"), std::nullopt}, {}};
    TrainLog& log = result.log;
    std::int64_t done = 0;
    auto evaluate = [&](std::int64_t n) {
        const bool want_loss = !heldout.empty() && options.loss_every > 0 && n % options.loss_every == 0;
        const bool want_acc = options.probe && options.probe_every > 0 && n % options.probe_every == 0;
        if (!want_loss && !want_acc) return;
        EvalPoint ep{n, want_loss ? mean_mlm_loss(model, heldout) : kNaN, want_acc ? options.probe(model) : kNaN};
        log.evals.push_back(ep);
        if (options.on_eval) options.on_eval(ep);
    };
    evaluate(0);
    for (std::int64_t n = 1; n <= options.updates; ++n) {
        std::vector<MaskedSequence> batch;
        for (int b = 0; b < options.batch_size; ++b) {
            batch.push_back(make_mlm_example(data.sequences[pick(batch_rng)], content, max_len,
                                             indexed_seed(options.seed, "mask", static_cast<std::uint64_t>(n) * 4096 +
                                                                                    static_cast<std::uint64_t>(b))));
        }
        StepMetrics m;
        try {
            m = training_step(
                state, [&](Tape& tape) { return model.mlm_loss(tape, batch, ForwardMode::training(dropout_rng)); },
                schedule, no_forgetting, n, options.clip_norm);
        } catch (const NumericError& e) {
            log.diverged = true;
            log.divergence_report = "diverged at update " + std::to_string(n) + ": " + e.what();
            break;
        }
        done = n;
        log.steps.push_back(m);
        if (options.on_step) options.on_step(m);

        evaluate(n);
    }

    model.set_trainable(ParamGroup::Body, true);
    Checkpoint& ckpt = result.checkpoint;
    ckpt.model = model;
    ckpt.provenance.language = target.language.name;
    ckpt.provenance.updates = done;
    ckpt.provenance.seed = options.seed;
    ckpt.provenance.forgetting = no_forgetting;
    ckpt.provenance.selected_update = done;
    return result;
}

StageResult adapt_task(const Checkpoint& parent, const ClsDataset& train, const ClsDataset& val,
                       const AdaptTaskOptions& options) {
    if (train.examples.empty()) throw PreconditionError("adapt_task: empty training set");
    options.freeze.validate();
    if (options.epochs < 0 || options.batch_size < 1) throw ConfigError("adapt_task: invalid epochs or batch_size");

    TransformerModel model = parent.model.clone();
    model.reinit_cls_head(derive_seed(options.seed, "cls-head"));
    model.set_trainable(ParamGroup::Embedding, !options.freeze.embedding_frozen);
    model.set_trainable(ParamGroup::Body, !options.freeze.body_frozen);

    const std::size_t n_train = train.examples.size();
    const std::int64_t per_epoch =
        static_cast<std::int64_t>((n_train + static_cast<std::size_t>(options.batch_size) - 1) /
                                  static_cast<std::size_t>(options.batch_size));
    const std::int64_t total = per_epoch * options.epochs;

    StageResult result{Checkpoint{model, child_provenance(parent, "adapt_task"), std::nullopt}, {}};
    TrainLog& log = result.log;
    std::int64_t n = 0;
    if (total > 0) {
        TrainState state(model, options.adam, derive_seed(options.seed, "reset"));
        const ScheduleSpec schedule = stage_schedule(options.peak_lr, options.warmup_fraction, total);
        ForgettingConfig no_forgetting;
        no_forgetting.enabled = false;
        std::mt19937_64 order_rng(derive_seed(options.seed, "order"));
        std::mt19937_64 dropout_rng(derive_seed(options.seed, "dropout"));
        std::vector<std::size_t> order(n_train);
        std::iota(order.begin(), order.end(), std::size_t{0});

        for (int epoch = 0; epoch < options.epochs && !log.diverged; ++epoch) {
            std::shuffle(order.begin(), order.end(), order_rng);
            double loss_sum = 0.0;
            int batches = 0;
            for (std::size_t start = 0; start < n_train; start += static_cast<std::size_t>(options.batch_size)) {
                const std::size_t end = std::min(n_train, start + static_cast<std::size_t>(options.batch_size));
                std::vector<PairExample> batch;
                for (std::size_t i = start; i < end; ++i) batch.push_back(train.examples[order[i]]);
                StepMetrics m;
                try {
                    m = training_step(
                        state,
                        [&](Tape& tape) { return model.cls_loss(tape, batch, ForwardMode::training(dropout_rng)); },
                        schedule, no_forgetting, n + 1, options.clip_norm);
                } catch (const NumericError& e) {
                    log.diverged = true;
                    log.divergence_report = "diverged at update " + std::to_string(n + 1) + ": " + e.what();
                    break;
                }
                ++n;
                log.steps.push_back(m);
                loss_sum += m.loss;
                ++batches;
            }
            if (batches == 0) break;
            EvalPoint ep{n, loss_sum / batches,
                         val.examples.empty() ? kNaN : classification_accuracy(model, val.examples)};
            log.evals.push_back(ep);
            if (options.on_eval) options.on_eval(ep);
        }
    }

    model.set_trainable(ParamGroup::Embedding, true);
    model.set_trainable(ParamGroup::Body, true);
    Checkpoint& ckpt = result.checkpoint;
    ckpt.model = model;
    ckpt.provenance.language = train.language.name;
    ckpt.provenance.updates = n;
    ckpt.provenance.seed = options.seed;
    ckpt.provenance.forgetting.enabled = false;
    ckpt.provenance.selected_update = n;
    return result;
}

Checkpoint assemble(const Checkpoint& lang_ckpt, const Checkpoint& task_ckpt) {
    if (!(lang_ckpt.config() == task_ckpt.config())) throw AssemblyError("assemble: model configs differ");
    const std::string lang_root = root_hash(lang_ckpt);
    const std::string task_root = root_hash(task_ckpt);
    if (lang_root != task_root) {
        throw AssemblyError("assemble: checkpoints descend from different pretrain checkpoints (" + lang_root +
                            " vs " + task_root + ")");
    }
    TransformerModel model = task_ckpt.model.clone();
    const auto& src = lang_ckpt.model.params();
    const auto& dst = model.params();
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (dst[i].group != ParamGroup::Embedding) continue;
        std::copy(src[i].tensor.data().begin(), src[i].tensor.data().end(), dst[i].tensor.data().begin());
    }
    Checkpoint out{model, child_provenance(lang_ckpt, "assemble"), std::nullopt};
    out.provenance.second_parent_hash = checkpoint_hash(task_ckpt);
    out.provenance.language = lang_ckpt.provenance.language;
    out.provenance.seed = lang_ckpt.provenance.seed;
    out.provenance.forgetting.enabled = false;
    return out;
}

double classification_accuracy(const TransformerModel& model, std::span<const ClsExample> examples) {
    if (examples.empty()) throw PreconditionError("classification_accuracy: empty dataset");
    constexpr std::size_t kChunk = 64;
    std::size_t correct = 0;
    for (std::size_t start = 0; start < examples.size(); start += kChunk) {
        const auto chunk = examples.subspan(start, std::min(kChunk, examples.size() - start));
        Tape tape(false);
        const Tensor logits = model.cls_logits(tape, chunk, ForwardMode::eval());
        const int c = logits.dim(1);
        const auto data = logits.data();
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            const auto row = data.subspan(i * static_cast<std::size_t>(c), static_cast<std::size_t>(c));
            const auto best = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
            correct += best == chunk[i].label;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(examples.size());
}

double evaluate_zero_shot(const Checkpoint& ckpt, const ClsDataset& dataset) {
    if (ckpt.provenance.language != dataset.language.name) {
        throw EvaluationError("evaluate_zero_shot: checkpoint language '" + ckpt.provenance.language +
                              "' does not match dataset language '" + dataset.language.name + "'");
    }
    return classification_accuracy(ckpt.model, dataset.examples);
}

} // namespace forgetlm
