// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlm/optim.h"

#include <algorithm>
#include <cmath>

#include "forgetlm/errors.h"

namespace forgetlm {

void ScheduleSpec::validate() const {
    if (!(peak_lr > 0.0)) throw ConfigError("schedule: peak_lr must be positive");
    if (warmup_updates < 0) throw ConfigError("schedule: warmup_updates must be nonnegative");
    if (total_updates <= warmup_updates) throw ConfigError("schedule: total_updates must exceed warmup_updates");
    if (!(end_lr >= 0.0)) throw ConfigError("schedule: end_lr must be nonnegative");
}

double lr_schedule(const ScheduleSpec& spec, std::int64_t n) {
    if (n <= 0) return spec.warmup_updates == 0 ? spec.peak_lr : 0.0;
    if (n < spec.warmup_updates) {
        return spec.peak_lr * static_cast<double>(n) / static_cast<double>(spec.warmup_updates);
    }
    if (n >= spec.total_updates) return spec.end_lr;
    const double frac = static_cast<double>(n - spec.warmup_updates) /
                        static_cast<double>(spec.total_updates - spec.warmup_updates);
    return spec.peak_lr + (spec.end_lr - spec.peak_lr) * frac;
}

ScheduleSpec embedding_episode_schedule(double peak_lr, std::int64_t interval) {
    ScheduleSpec s;
    s.peak_lr = peak_lr;
    s.warmup_updates = std::llround(0.1 * static_cast<double>(interval));
    s.total_updates = interval;
    s.end_lr = 0.1 * peak_lr;
    return s;
}

void ForgettingConfig::validate() const {
    if (interval < 1) throw ConfigError("forgetting: interval K must be >= 1");
    if (!(reset_std > 0.0f)) throw ConfigError("forgetting: reset_std must be positive");
    if (enabled) emb_schedule.validate();
}

AdamState AdamState::zeros_like(std::span<const Tensor> params, AdamHyper hyper) {
    AdamState s;
    s.hyper = hyper;
    for (const auto& p : params) {
        s.m.emplace_back(p.numel(), 0.0f);
        s.v.emplace_back(p.numel(), 0.0f);
    }
    return s;
}

void AdamState::zero() {
    for (auto& x : m) std::fill(x.begin(), x.end(), 0.0f);
    for (auto& x : v) std::fill(x.begin(), x.end(), 0.0f);
    step = 0;
}

bool AdamState::all_zero() const {
    auto zero = [](const std::vector<float>& x) {
        return std::all_of(x.begin(), x.end(), [](float f) { return f == 0.0f; });
    };
    return std::all_of(m.begin(), m.end(), zero) && std::all_of(v.begin(), v.end(), zero);
}

double clip_global_norm(std::span<Tensor> params, double max_norm) {
    if (!(max_norm > 0.0)) throw PreconditionError("clip_global_norm: max_norm must be positive");
    double sq = 0.0;
    for (const auto& p : params) {
        for (float g : p.grad()) sq += static_cast<double>(g) * g;
    }
    if (!std::isfinite(sq)) throw NumericError("clip_global_norm: non-finite gradient");
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const float factor = static_cast<float>(max_norm / norm);
        for (auto& p : params)
            for (auto& g : p.grad()) g *= factor;
    }
    return norm;
}

void adam_step(std::span<Tensor> params, AdamState& state, double lr, std::int64_t step_index) {
    if (step_index < 1) throw PreconditionError("adam_step: step_index must be >= 1");
    if (state.m.size() != params.size()) {
        throw DimensionError("adam_step: " + std::to_string(params.size()) + " parameters but state holds " +
                             std::to_string(state.m.size()));
    }
    const auto& h = state.hyper;
    const double t = static_cast<double>(step_index);
    const float step_size = static_cast<float>(lr / (1.0 - std::pow(static_cast<double>(h.beta1), t)));
    const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(1.0 - std::pow(static_cast<double>(h.beta2), t)));
    const float b1 = h.beta1, b2 = h.beta2, one_b1 = 1.0f - h.beta1, one_b2 = 1.0f - h.beta2, eps = h.eps;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto p = params[i].data();
        auto g = params[i].grad();
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (m.size() != p.size() || g.size() != p.size()) {
            throw DimensionError("adam_step: moment/gradient size mismatch for parameter " + std::to_string(i) +
                                 " of shape " + shape_str(params[i].shape()));
        }
        for (std::size_t j = 0; j < p.size(); ++j) {
            m[j] = b1 * m[j] + one_b1 * g[j];
            v[j] = b2 * v[j] + one_b2 * g[j] * g[j];
            p[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
        }
    }
    state.step = step_index;
}

TrainState::TrainState(TransformerModel& model, AdamHyper hyper, std::uint64_t reset_seed)
    : model_(&model), reset_rng_(reset_seed) {
    for (const auto& p : model.params()) {
        (p.group == ParamGroup::Embedding ? emb_params_ : body_params_).push_back(p.tensor);
        all_params_.push_back(p.tensor);
    }
    emb_ = AdamState::zeros_like(emb_params_, hyper);
    body_ = AdamState::zeros_like(body_params_, hyper);
}

void TrainState::reset_embeddings(float std) {
    model_->reinit_embeddings(reset_rng_, std);
    emb_.zero();
    n_emb_ = 0;
}

namespace {

struct Snapshot {
    std::vector<std::vector<float>> values;
    AdamState emb, body;
    std::int64_t n_body = 0, n_emb = 0;
    std::mt19937_64 rng;
};

} // namespace

StepMetrics training_step(TrainState& state, const std::function<Tensor(Tape&)>& loss_fn,
                          const ScheduleSpec& body_schedule, const ForgettingConfig& forgetting, std::int64_t n,
                          double clip_norm) {
    if (n < 1) throw PreconditionError("training_step: update index must be >= 1");
    const bool emb_trainable = state.model_->trainable(ParamGroup::Embedding);
    const bool body_trainable = state.model_->trainable(ParamGroup::Body);
    if (!emb_trainable && !body_trainable) throw PreconditionError("training_step: every group is frozen");

    StepMetrics out;
    out.update = n;
    out.n_emb = forgetting.enabled ? n % forgetting.interval : n;
    out.lr_body = lr_schedule(body_schedule, n);
    out.lr_emb = forgetting.enabled ? lr_schedule(forgetting.emb_schedule, out.n_emb) : out.lr_body;

    Snapshot snap;
    for (const auto& p : state.all_params_) snap.values.emplace_back(p.data().begin(), p.data().end());
    snap.emb = state.emb_;
    snap.body = state.body_;
    snap.n_body = state.n_body_;
    snap.n_emb = state.n_emb_;
    snap.rng = state.reset_rng_;

    std::vector<Tensor> trainable;
    for (auto& p : state.all_params_)
        if (p.requires_grad()) {
            p.zero_grad();
            trainable.push_back(p);
        }

    try {
        Tape tape;
        Tensor loss = loss_fn(tape);
        out.loss = loss.item();
        if (!std::isfinite(out.loss)) throw NumericError("training_step: non-finite loss at update " + std::to_string(n));
        tape.backward(loss);
        out.grad_norm = clip_global_norm(trainable, clip_norm);

        if (body_trainable) adam_step(state.body_params_, state.body_, out.lr_body, n);
        state.n_body_ = n;

        if (emb_trainable) {
            const bool reset_now = forgetting.enabled && out.n_emb == 0;
            if (reset_now) {
                state.reset_embeddings(forgetting.reset_std);
                out.reset = true;
                // The gradient belongs to the discarded table; the fresh moments stay zero
                // and the first real embedding update happens at n_emb = 1.
            } else {
                adam_step(state.emb_params_, state.emb_, out.lr_emb, out.n_emb);
            }
            state.n_emb_ = out.n_emb;
        }
        for (const auto& p : state.all_params_) {
            for (float x : p.data()) {
                if (!std::isfinite(x)) throw NumericError("training_step: non-finite parameter after update " + std::to_string(n));
            }
        }
    } catch (const NumericError&) {
        for (std::size_t i = 0; i < state.all_params_.size(); ++i) {
            std::copy(snap.values[i].begin(), snap.values[i].end(), state.all_params_[i].data().begin());
        }
        state.emb_ = std::move(snap.emb);
        state.body_ = std::move(snap.body);
        state.n_body_ = snap.n_body;
        state.n_emb_ = snap.n_emb;
        state.reset_rng_ = snap.rng;
        throw;
    }
    return out;
}

TensorStats post_reset_statistics(std::span<const Tensor> embedding_params) {
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& t : embedding_params) {
        for (float x : t.data()) sum += x;
        n += t.numel();
    }
    TensorStats s;
    if (n == 0) return s;
    s.mean = sum / static_cast<double>(n);
    double sq = 0.0;
    for (const auto& t : embedding_params)
        for (float x : t.data()) sq += (x - s.mean) * (x - s.mean);
    s.std = n > 1 ? std::sqrt(sq / static_cast<double>(n - 1)) : 0.0;
    return s;
}

} // namespace forgetlm
