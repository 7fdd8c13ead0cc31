// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0
//
// Adam with per-group schedules, global-norm clipping, and the periodic
// token-embedding reset ("active forgetting").

#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "forgetlm/model.h"
#include "forgetlm/tensor.h"

namespace forgetlm {

// Piecewise-linear learning rate: 0 -> peak over warmup, then peak -> end_lr
// until total; end_lr afterwards.
struct ScheduleSpec {
    double peak_lr = 7e-4;
    std::int64_t warmup_updates = 400;
    std::int64_t total_updates = 5000;
    double end_lr = 0.0;

    void validate() const;
    bool operator==(const ScheduleSpec&) const = default;
};

double lr_schedule(const ScheduleSpec& spec, std::int64_t n);

// Episode-local schedule for the embedding group: warmup round(0.1 K), horizon K,
// decaying from the body peak to a tenth of it.
ScheduleSpec embedding_episode_schedule(double peak_lr, std::int64_t interval);

struct ForgettingConfig {
    bool enabled = false;
    std::int64_t interval = 250; // K
    float reset_std = 0.02f;
    ScheduleSpec emb_schedule = embedding_episode_schedule(7e-4, 250);

    void validate() const;
    bool operator==(const ForgettingConfig&) const = default;
};

struct AdamHyper {
    float beta1 = 0.9f;
    float beta2 = 0.98f;
    float eps = 1e-6f;
};

struct AdamState {
    AdamHyper hyper;
    std::vector<std::vector<float>> m;
    std::vector<std::vector<float>> v;
    std::int64_t step = 0; // updates applied since the moments were last zeroed

    static AdamState zeros_like(std::span<const Tensor> params, AdamHyper hyper = {});
    void zero();
    bool all_zero() const;
};

// Scales every gradient by max_norm / g when the global L2 norm g exceeds
// max_norm. Returns g. Throws NumericError if any gradient is non-finite.
double clip_global_norm(std::span<Tensor> params, double max_norm);

// One bias-corrected Adam update in place. step_index >= 1.
void adam_step(std::span<Tensor> params, AdamState& state, double lr, std::int64_t step_index);

struct StepMetrics {
    std::int64_t update = 0;
    double loss = 0.0;
    double lr_body = 0.0;
    double lr_emb = 0.0;
    double grad_norm = 0.0;
    std::int64_t n_emb = 0;
    bool reset = false;
};

// Parameters + optimizer state + effective update counters for one training loop.
class TrainState {
  public:
    TrainState(TransformerModel& model, AdamHyper hyper, std::uint64_t reset_seed);

    TransformerModel& model() { return *model_; }
    const TransformerModel& model() const { return *model_; }
    AdamState& emb_state() { return emb_; }
    AdamState& body_state() { return body_; }
    const AdamState& emb_state() const { return emb_; }
    const AdamState& body_state() const { return body_; }
    std::int64_t n_body() const { return n_body_; }
    std::int64_t n_emb() const { return n_emb_; }

    // Draws a fresh embedding group and zeroes its Adam moments and counter.
    void reset_embeddings(float std);

  private:
    friend StepMetrics training_step(TrainState&, const std::function<Tensor(Tape&)>&, const ScheduleSpec&,
                                     const ForgettingConfig&, std::int64_t, double);
    TransformerModel* model_;
    std::vector<Tensor> emb_params_;
    std::vector<Tensor> body_params_;
    std::vector<Tensor> all_params_; // model order, used for the clipping norm
    AdamState emb_;
    AdamState body_;
    std::int64_t n_body_ = 0;
    std::int64_t n_emb_ = 0;
    std::mt19937_64 reset_rng_;
};

// One update n >= 1 in the order: n_emb = n mod K; body and embedding learning
// rates; gradients; clip; body update; reset on n_emb == 0; embedding update.
// Frozen groups (requires_grad off) are neither updated nor reset. With
// forgetting disabled both groups follow `body_schedule` at index n. On a
// numeric error the model and optimizer state are restored and the error
// rethrown.
StepMetrics training_step(TrainState& state, const std::function<Tensor(Tape&)>& loss_fn,
                          const ScheduleSpec& body_schedule, const ForgettingConfig& forgetting, std::int64_t n,
                          double clip_norm = 0.5);

struct TensorStats {
    double mean = 0.0;
    double std = 0.0;
};

// Sample mean and standard deviation over all entries of the given tensors.
TensorStats post_reset_statistics(std::span<const Tensor> embedding_params);

} // namespace forgetlm
