// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlm/model.h"

#include <algorithm>
#include <cmath>

#include "forgetlm/errors.h"
#include "forgetlm/ops.h"

namespace forgetlm {

namespace {

std::vector<float> normal_values(std::mt19937_64& rng, std::size_t n, float std) {
    std::normal_distribution<double> dist(0.0, std);
    std::vector<float> v(n);
    for (auto& x : v) x = static_cast<float>(dist(rng));
    return v;
}

Tensor normal_param(std::mt19937_64& rng, Shape shape, float std) {
    const std::size_t n = shape_numel(shape);
    return Tensor::parameter(std::move(shape), normal_values(rng, n, std));
}

Tensor const_param(Shape shape, float value) {
    const std::size_t n = shape_numel(shape);
    return Tensor::parameter(std::move(shape), std::vector<float>(n, value));
}

} // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& field, const std::string& why) {
        throw ConfigError("model config: " + field + " " + why);
    };
    if (vocab_size <= kNumReserved) fail("vocab_size", "must exceed the reserved ids");
    if (d_model <= 0) fail("d_model", "must be positive");
    if (n_heads <= 0) fail("n_heads", "must be positive");
    if (d_model % n_heads != 0) fail("d_model", "must be divisible by n_heads");
    if (n_layers < 0) fail("n_layers", "must be nonnegative");
    if (d_ff <= 0) fail("d_ff", "must be positive");
    if (max_seq_len < 2) fail("max_seq_len", "must be at least 2");
    if (!(dropout >= 0.0f && dropout < 1.0f)) fail("dropout", "must be in [0,1)");
    if (n_classes < 2) fail("n_classes", "must be at least 2");
    if (!(init_std > 0.0f)) fail("init_std", "must be positive");
    if (!(ln_eps > 0.0f)) fail("ln_eps", "must be positive");
}

const char* group_name(ParamGroup g) { return g == ParamGroup::Embedding ? "embedding" : "body"; }

std::size_t ParamPartition::embedding_count() const {
    std::size_t n = 0;
    for (const auto& p : embedding) n += p.tensor.numel();
    return n;
}

std::size_t ParamPartition::body_count() const {
    std::size_t n = 0;
    for (const auto& p : body) n += p.tensor.numel();
    return n;
}

TransformerModel TransformerModel::init(const ModelConfig& config, std::uint64_t seed) {
    config.validate();
    TransformerModel m;
    m.config_ = config;
    m.seed_ = seed;
    std::mt19937_64 rng(seed);
    const int v = config.vocab_size, d = config.d_model, f = config.d_ff;
    const float s = config.init_std;

    m.tok_emb_ = normal_param(rng, {v, d}, s);
    if (!config.tie_lm_head) m.lm_out_ = normal_param(rng, {d, v}, s);
    m.lm_bias_ = const_param({v}, 0.0f);
    m.pos_emb_ = normal_param(rng, {config.max_seq_len, d}, s);
    for (int l = 0; l < config.n_layers; ++l) {
        Layer layer;
        layer.ln1_g = const_param({d}, 1.0f);
        layer.ln1_b = const_param({d}, 0.0f);
        layer.wq = normal_param(rng, {d, d}, s);
        layer.bq = const_param({d}, 0.0f);
        layer.wk = normal_param(rng, {d, d}, s);
        layer.bk = const_param({d}, 0.0f);
        layer.wv = normal_param(rng, {d, d}, s);
        layer.bv = const_param({d}, 0.0f);
        layer.wo = normal_param(rng, {d, d}, s);
        layer.bo = const_param({d}, 0.0f);
        layer.ln2_g = const_param({d}, 1.0f);
        layer.ln2_b = const_param({d}, 0.0f);
        layer.w1 = normal_param(rng, {d, f}, s);
        layer.b1 = const_param({f}, 0.0f);
        layer.w2 = normal_param(rng, {f, d}, s);
        layer.b2 = const_param({d}, 0.0f);
        m.layers_.push_back(std::move(layer));
    }
    m.lnf_g_ = const_param({d}, 1.0f);
    m.lnf_b_ = const_param({d}, 0.0f);
    m.cls_w1_ = normal_param(rng, {d, d}, s);
    m.cls_b1_ = const_param({d}, 0.0f);
    m.cls_w2_ = normal_param(rng, {d, config.n_classes}, s);
    m.cls_b2_ = const_param({config.n_classes}, 0.0f);
    m.build_param_list();
    return m;
}

void TransformerModel::build_param_list() {
    params_.clear();
    auto emb = [this](std::string name, Tensor t) { params_.push_back({std::move(name), ParamGroup::Embedding, t}); };
    auto body = [this](std::string name, Tensor t) { params_.push_back({std::move(name), ParamGroup::Body, t}); };
    emb("tok_emb", tok_emb_);
    if (!config_.tie_lm_head) emb("lm_out", lm_out_);
    emb("lm_bias", lm_bias_);
    body("pos_emb", pos_emb_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        const Layer& L = layers_[l];
        body(p + "ln1.g", L.ln1_g);
        body(p + "ln1.b", L.ln1_b);
        body(p + "attn.wq", L.wq);
        body(p + "attn.bq", L.bq);
        body(p + "attn.wk", L.wk);
        body(p + "attn.bk", L.bk);
        body(p + "attn.wv", L.wv);
        body(p + "attn.bv", L.bv);
        body(p + "attn.wo", L.wo);
        body(p + "attn.bo", L.bo);
        body(p + "ln2.g", L.ln2_g);
        body(p + "ln2.b", L.ln2_b);
        body(p + "ffn.w1", L.w1);
        body(p + "ffn.b1", L.b1);
        body(p + "ffn.w2", L.w2);
        body(p + "ffn.b2", L.b2);
    }
    body("ln_f.g", lnf_g_);
    body("ln_f.b", lnf_b_);
    body("cls.w1", cls_w1_);
    body("cls.b1", cls_b1_);
    body("cls.w2", cls_w2_);
    body("cls.b2", cls_b2_);
}

std::vector<Tensor> TransformerModel::group_tensors(ParamGroup group) const {
    std::vector<Tensor> out;
    for (const auto& p : params_)
        if (p.group == group) out.push_back(p.tensor);
    return out;
}

ParamPartition TransformerModel::partition() const {
    ParamPartition part;
    for (const auto& p : params_) (p.group == ParamGroup::Embedding ? part.embedding : part.body).push_back(p);
    return part;
}

std::size_t TransformerModel::param_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
}

void TransformerModel::set_trainable(ParamGroup group, bool trainable) {
    for (auto& p : params_)
        if (p.group == group && p.tensor.requires_grad() != trainable) p.tensor.set_requires_grad(trainable);
}

bool TransformerModel::trainable(ParamGroup group) const {
    for (const auto& p : params_)
        if (p.group == group) return p.tensor.requires_grad();
    return false;
}

std::vector<TokenId> TransformerModel::encode_pair(std::span<const TokenId> a, std::span<const TokenId> b) const {
    const std::size_t len = a.size() + b.size() + 2;
    if (len > static_cast<std::size_t>(config_.max_seq_len)) {
        throw LengthError("pair of lengths " + std::to_string(a.size()) + "+" + std::to_string(b.size()) +
                          " encodes to " + std::to_string(len) + " tokens, max_seq_len is " +
                          std::to_string(config_.max_seq_len));
    }
    std::vector<TokenId> ids;
    ids.reserve(len);
    ids.push_back(kClsId);
    ids.insert(ids.end(), a.begin(), a.end());
    ids.push_back(kSepId);
    ids.insert(ids.end(), b.begin(), b.end());
    return ids;
}

TransformerModel::Packed TransformerModel::pack(std::span<const std::vector<TokenId>> seqs) const {
    if (seqs.empty()) throw PreconditionError("empty batch");
    Packed p;
    for (const auto& s : seqs) {
        if (s.empty()) throw LengthError("empty sequence");
        if (s.size() > static_cast<std::size_t>(config_.max_seq_len)) {
            throw LengthError("sequence of length " + std::to_string(s.size()) + " exceeds max_seq_len " +
                              std::to_string(config_.max_seq_len));
        }
        p.segments.emplace_back(static_cast<int>(p.ids.size()), static_cast<int>(s.size()));
        for (std::size_t i = 0; i < s.size(); ++i) {
            p.ids.push_back(s[i]);
            p.pos.push_back(static_cast<int>(i));
        }
    }
    return p;
}

Tensor TransformerModel::encode(Tape& tape, const Packed& packed, ForwardMode mode) const {
    const float p_drop = mode.train ? config_.dropout : 0.0f;
    if (p_drop > 0.0f && mode.rng == nullptr) throw PreconditionError("training forward needs a dropout rng");
    auto drop = [&](const Tensor& t) { return p_drop > 0.0f ? dropout(tape, t, p_drop, *mode.rng) : t; };

    const int d = config_.d_model;
    const int heads = config_.n_heads;
    const int dh = d / heads;
    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));

    Tensor x = add(tape, embedding(tape, tok_emb_, packed.ids), embedding(tape, pos_emb_, packed.pos));
    x = drop(x);
    for (const Layer& L : layers_) {
        Tensor h = layer_norm(tape, x, L.ln1_g, L.ln1_b, config_.ln_eps);
        Tensor q = add_bias(tape, matmul(tape, h, L.wq), L.bq);
        Tensor k = add_bias(tape, matmul(tape, h, L.wk), L.bk);
        Tensor v = add_bias(tape, matmul(tape, h, L.wv), L.bv);
        std::vector<Tensor> seq_ctx;
        seq_ctx.reserve(packed.segments.size());
        for (auto [off, len] : packed.segments) {
            std::vector<Tensor> head_ctx;
            head_ctx.reserve(static_cast<std::size_t>(heads));
            for (int hd = 0; hd < heads; ++hd) {
                const int c0 = hd * dh, c1 = c0 + dh;
                Tensor qh = block(tape, q, off, off + len, c0, c1);
                Tensor kh = block(tape, k, off, off + len, c0, c1);
                Tensor vh = block(tape, v, off, off + len, c0, c1);
                Tensor att = softmax_rows(tape, scale(tape, matmul_nt(tape, qh, kh), inv_sqrt_dh));
                head_ctx.push_back(matmul(tape, att, vh));
            }
            seq_ctx.push_back(heads == 1 ? head_ctx.front() : concat_cols(tape, head_ctx));
        }
        Tensor ctx = seq_ctx.size() == 1 ? seq_ctx.front() : concat_rows(tape, seq_ctx);
        Tensor attn_out = add_bias(tape, matmul(tape, ctx, L.wo), L.bo);
        x = add(tape, x, drop(attn_out));

        Tensor h2 = layer_norm(tape, x, L.ln2_g, L.ln2_b, config_.ln_eps);
        Tensor ff = gelu(tape, add_bias(tape, matmul(tape, h2, L.w1), L.b1));
        ff = add_bias(tape, matmul(tape, ff, L.w2), L.b2);
        x = add(tape, x, drop(ff));
    }
    return layer_norm(tape, x, lnf_g_, lnf_b_, config_.ln_eps);
}

Tensor TransformerModel::lm_project(Tape& tape, const Tensor& hidden) const {
    Tensor logits = config_.tie_lm_head ? matmul_nt(tape, hidden, tok_emb_) : matmul(tape, hidden, lm_out_);
    return add_bias(tape, logits, lm_bias_);
}

Tensor TransformerModel::cls_head(Tape& tape, const Tensor& pooled) const {
    Tensor h = tanh(tape, add_bias(tape, matmul(tape, pooled, cls_w1_), cls_b1_));
    return add_bias(tape, matmul(tape, h, cls_w2_), cls_b2_);
}

Tensor TransformerModel::forward_mlm(Tape& tape, std::span<const TokenId> ids, ForwardMode mode) const {
    const std::vector<TokenId> seq(ids.begin(), ids.end());
    Packed p = pack(std::span(&seq, 1));
    return lm_project(tape, encode(tape, p, mode));
}

Tensor TransformerModel::forward_cls(Tape& tape, std::span<const TokenId> a, std::span<const TokenId> b,
                                     ForwardMode mode) const {
    PairExample ex{{a.begin(), a.end()}, {b.begin(), b.end()}, 0};
    Tensor logits = cls_logits(tape, std::span(&ex, 1), mode);
    return reshape(tape, logits, {config_.n_classes});
}

Tensor TransformerModel::mlm_loss(Tape& tape, std::span<const MaskedSequence> batch, ForwardMode mode) const {
    std::vector<std::vector<TokenId>> inputs;
    inputs.reserve(batch.size());
    for (const auto& s : batch) {
        if (s.target.size() != s.input.size()) throw DimensionError("masked sequence: input/target lengths differ");
        inputs.push_back(s.input);
    }
    Packed p = pack(inputs);
    std::vector<int> rows;
    std::vector<int> targets;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const int off = p.segments[i].first;
        for (int pos : batch[i].positions) {
            if (pos < 0 || pos >= static_cast<int>(batch[i].input.size())) {
                throw DimensionError("masked position " + std::to_string(pos) + " outside sequence");
            }
            rows.push_back(off + pos);
            targets.push_back(batch[i].target[static_cast<std::size_t>(pos)]);
        }
    }
    if (rows.empty()) throw PreconditionError("mlm_loss: batch has no masked positions");
    Tensor hidden = encode(tape, p, mode);
    Tensor logits = lm_project(tape, gather_rows(tape, hidden, rows));
    return cross_entropy(tape, logits, targets);
}

Tensor TransformerModel::cls_logits(Tape& tape, std::span<const PairExample> batch, ForwardMode mode) const {
    std::vector<std::vector<TokenId>> inputs;
    inputs.reserve(batch.size());
    for (const auto& ex : batch) inputs.push_back(encode_pair(ex.a, ex.b));
    Packed p = pack(inputs);
    std::vector<int> rows;
    for (auto [off, len] : p.segments) rows.push_back(off);
    Tensor hidden = encode(tape, p, mode);
    return cls_head(tape, gather_rows(tape, hidden, rows));
}

Tensor TransformerModel::cls_loss(Tape& tape, std::span<const PairExample> batch, ForwardMode mode) const {
    std::vector<int> labels;
    for (const auto& ex : batch) {
        if (ex.label < 0 || ex.label >= config_.n_classes) throw PreconditionError("label outside class range");
        labels.push_back(ex.label);
    }
    return cross_entropy(tape, cls_logits(tape, batch, mode), labels);
}

void TransformerModel::reinit_embeddings(std::mt19937_64& rng, float std) {
    for (auto& p : params_) {
        if (p.group != ParamGroup::Embedding) continue;
        auto data = p.tensor.data();
        if (p.tensor.rank() == 1) {
            std::fill(data.begin(), data.end(), 0.0f);
        } else {
            auto v = normal_values(rng, data.size(), std);
            std::copy(v.begin(), v.end(), data.begin());
        }
    }
}

void TransformerModel::reinit_cls_head(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    auto fill = [&](Tensor& t) {
        auto v = normal_values(rng, t.numel(), config_.init_std);
        std::copy(v.begin(), v.end(), t.data().begin());
    };
    fill(cls_w1_);
    std::fill(cls_b1_.data().begin(), cls_b1_.data().end(), 0.0f);
    fill(cls_w2_);
    std::fill(cls_b2_.data().begin(), cls_b2_.data().end(), 0.0f);
}

TransformerModel TransformerModel::clone() const {
    TransformerModel m;
    m.config_ = config_;
    m.seed_ = seed_;
    m.tok_emb_ = tok_emb_.clone();
    if (lm_out_.defined()) m.lm_out_ = lm_out_.clone();
    m.lm_bias_ = lm_bias_.clone();
    m.pos_emb_ = pos_emb_.clone();
    for (const Layer& L : layers_) {
        m.layers_.push_back(Layer{L.ln1_g.clone(), L.ln1_b.clone(), L.wq.clone(), L.bq.clone(), L.wk.clone(),
                                  L.bk.clone(), L.wv.clone(), L.bv.clone(), L.wo.clone(), L.bo.clone(),
                                  L.ln2_g.clone(), L.ln2_b.clone(), L.w1.clone(), L.b1.clone(), L.w2.clone(),
                                  L.b2.clone()});
    }
    m.lnf_g_ = lnf_g_.clone();
    m.lnf_b_ = lnf_b_.clone();
    m.cls_w1_ = cls_w1_.clone();
    m.cls_b1_ = cls_b1_.clone();
    m.cls_w2_ = cls_w2_.clone();
    m.cls_b2_ = cls_b2_.clone();
    m.build_param_list();
    return m;
}

void TransformerModel::load_values(const TransformerModel& other) {
    if (!(other.config_ == config_)) throw ConfigError("load_values: model configs differ");
    for (std::size_t i = 0; i < params_.size(); ++i) {
        auto src = other.params_[i].tensor.data();
        std::copy(src.begin(), src.end(), params_[i].tensor.data().begin());
    }
}

Tensor& TransformerModel::param(const std::string& name) {
    for (auto& p : params_)
        if (p.name == name) return p.tensor;
    throw PreconditionError("no parameter named " + name);
}

const Tensor& TransformerModel::param(const std::string& name) const {
    for (const auto& p : params_)
        if (p.name == name) return p.tensor;
    throw PreconditionError("no parameter named " + name);
}

} // namespace forgetlm
