// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// The four training stages (pretrain, language adaptation, task adaptation,
// assembly), zero-shot evaluation, and the on-disk checkpoint container.

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "forgetlm/model.h"
#include "forgetlm/optim.h"
#include "forgetlm/synth.h"

namespace forgetlm {

inline constexpr int kCheckpointFormatVersion = 1;

struct FreezeMask {
    bool embedding_frozen = true;
    bool body_frozen = false;

    // Throws PreconditionError when both groups are frozen.
    void validate() const;
};

struct LineageEntry {
    std::string stage;
    std::string hash;
    bool operator==(const LineageEntry&) const = default;
};

struct Provenance {
    std::string stage; // pretrain | adapt_language | adapt_task | assemble
    std::string parent_hash;
    std::string second_parent_hash; // assemble only: the task checkpoint
    std::string language;
    std::int64_t updates = 0;
    std::uint64_t seed = 0;
    ForgettingConfig forgetting;
    std::int64_t selected_update = 0; // update whose parameters were kept
    // Ancestors from the pretrain checkpoint down to the parent, root first.
    std::vector<LineageEntry> lineage;

    bool operator==(const Provenance&) const = default;
};

struct OptimizerSnapshot {
    // Per parameter, in model order.
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;
    std::int64_t emb_step = 0;
    std::int64_t body_step = 0;

    bool operator==(const OptimizerSnapshot&) const = default;
};

OptimizerSnapshot snapshot_optimizer(const TrainState& state);

struct Checkpoint {
    TransformerModel model;
    Provenance provenance;
    std::optional<OptimizerSnapshot> optim;

    const ModelConfig& config() const { return model.config(); }
    // Deep copy (the model is a set of shared tensor handles).
    Checkpoint clone() const;
};

// Canonical single-line text of a provenance record.
std::string provenance_text(const Provenance& p);
// FNV-1a over the parameter bytes in model order followed by the provenance.
std::string checkpoint_hash(const Checkpoint& ckpt);
// FNV-1a over one group's parameter bytes in model order.
std::string group_hash(const TransformerModel& model, ParamGroup group);
// Hash of the pretrain checkpoint this one descends from (itself for a pretrain).
std::string root_hash(const Checkpoint& ckpt);

// Writes <dir>/manifest, <dir>/params.bin and, when present, <dir>/optim.bin.
// The directory is staged under a temporary name and renamed into place.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
// Throws LoadError naming the offending field.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

struct EvalPoint {
    std::int64_t update = 0;
    double loss = 0.0;     // NaN when not measured
    double accuracy = 0.0; // NaN when not measured
};

struct TrainLog {
    std::vector<StepMetrics> steps;
    std::vector<EvalPoint> evals;
    std::vector<std::int64_t> resets;
    bool diverged = false;
    std::string divergence_report;
};

struct StageResult {
    Checkpoint checkpoint;
    TrainLog log;
};

using StepHook = std::function<void(const StepMetrics&)>;
using EvalHook = std::function<void(const EvalPoint&)>;

struct PretrainOptions {
    ModelConfig model;
    ScheduleSpec schedule;
    ForgettingConfig forgetting;
    std::int64_t total_updates = 5000;
    int batch_size = 16;
    std::int64_t checkpoint_interval = 100;
    double val_fraction = 0.05;
    int val_sequences = 64;
    double clip_norm = 0.5;
    AdamHyper adam;
    std::uint64_t seed = 0;
    bool keep_optimizer = false;
    StepHook on_step;
    EvalHook on_eval;
};

// Trains from scratch on a base-language corpus. Standard runs keep the last
// parameters; forgetting runs keep the checkpoint with the lowest validation
// loss. A non-finite loss stops the run and returns the last valid state.
StageResult pretrain(const PretrainOptions& options, const Corpus& corpus);

// Per-sequence MLM example: [CLS] s [SEP] with s cropped to max_seq_len - 2,
// masking only the content positions.
MaskedSequence make_mlm_example(std::span<const TokenId> sequence, TokenRange content, int max_seq_len,
                                std::uint64_t seed);

struct AdaptLanguageOptions {
    std::int64_t budget_tokens = 100'000;
    std::int64_t updates = 1000;
    int batch_size = 16;
    double peak_lr = 7e-4;
    double warmup_fraction = 0.1;
    float init_std = 0.02f;
    double clip_norm = 0.5;
    AdamHyper adam;
    std::uint64_t seed = 0;
    // Held-out MLM loss on a fixed target-language set, measured at update 0 and every `loss_every` updates.
    int eval_sequences = 32;
    int loss_every = 1;
    // Zero-shot accuracy probe at update 0 and every `probe_every` updates when set.
    std::function<double(const TransformerModel&)> probe;
    int probe_every = 50;
    StepHook on_step;
    EvalHook on_eval;
};

// Fresh embeddings, frozen body, no forgetting, MLM on the budgeted subsample.
StageResult adapt_language(const Checkpoint& parent, const Corpus& target, const AdaptLanguageOptions& options);

struct ClsDataset {
    LanguageSpec language;
    std::vector<ClsExample> examples;
};

struct AdaptTaskOptions {
    int epochs = 10;
    int batch_size = 32;
    double peak_lr = 7e-4;
    double warmup_fraction = 0.1;
    double clip_norm = 0.5;
    AdamHyper adam;
    FreezeMask freeze;
    std::uint64_t seed = 0;
    EvalHook on_eval; // once per epoch: accuracy is validation accuracy, loss is mean train loss
};

// Fresh classification head, then `epochs` passes over `train`.
StageResult adapt_task(const Checkpoint& parent, const ClsDataset& train, const ClsDataset& val,
                       const AdaptTaskOptions& options);

// Embedding group from `lang_ckpt`, body and classification head from `task_ckpt`.
Checkpoint assemble(const Checkpoint& lang_ckpt, const Checkpoint& task_ckpt);

// Plain accuracy with dropout off; no provenance check.
double classification_accuracy(const TransformerModel& model, std::span<const ClsExample> examples);

// Zero-shot accuracy of an assembled (or task) checkpoint. Throws EvaluationError
// when the dataset language differs from the checkpoint's language.
double evaluate_zero_shot(const Checkpoint& ckpt, const ClsDataset& dataset);

} // namespace forgetlm
