// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0

#include <atomic>
#include <cstring>
#include <fstream>
#include <sstream>
#include <unistd.h>

#include <json.hpp>

#include "forgetlm/errors.h"
#include "forgetlm/hash.h"
#include "forgetlm/pipeline.h"

namespace forgetlm {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

json to_json(const ModelConfig& c) {
    return {{"vocab_size", c.vocab_size}, {"d_model", c.d_model},         {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},       {"d_ff", c.d_ff},               {"max_seq_len", c.max_seq_len},
            {"dropout", c.dropout},       {"tie_lm_head", c.tie_lm_head}, {"n_classes", c.n_classes},
            {"init_std", c.init_std},     {"ln_eps", c.ln_eps}};
}

json to_json(const ScheduleSpec& s) {
    return {{"peak_lr", s.peak_lr}, {"warmup_updates", s.warmup_updates}, {"total_updates", s.total_updates},
            {"end_lr", s.end_lr}};
}

json to_json(const ForgettingConfig& f) {
    return {{"enabled", f.enabled},
            {"interval", f.interval},
            {"reset_std", f.reset_std},
            {"emb_schedule", to_json(f.emb_schedule)}};
}

json to_json(const Provenance& p) {
    json lineage = json::array();
    for (const auto& e : p.lineage) lineage.push_back({{"stage", e.stage}, {"hash", e.hash}});
    return {{"stage", p.stage},
            {"parent_hash", p.parent_hash},
            {"second_parent_hash", p.second_parent_hash},
            {"language", p.language},
            {"updates", p.updates},
            {"seed", p.seed},
            {"forgetting", to_json(p.forgetting)},
            {"selected_update", p.selected_update},
            {"lineage", lineage}};
}

// Reads `key` from `obj`, naming the full field path on failure.
template <typename T>
T field(const json& obj, const std::string& key, const std::string& path) {
    const std::string name = path.empty() ? key : path + "." + key;
    if (!obj.is_object() || !obj.contains(key)) throw LoadError(name, "missing");
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw LoadError(name, e.what());
    }
}

ModelConfig config_from_json(const json& j) {
    ModelConfig c;
    c.vocab_size = field<int>(j, "vocab_size", "config");
    c.d_model = field<int>(j, "d_model", "config");
    c.n_layers = field<int>(j, "n_layers", "config");
    c.n_heads = field<int>(j, "n_heads", "config");
    c.d_ff = field<int>(j, "d_ff", "config");
    c.max_seq_len = field<int>(j, "max_seq_len", "config");
    c.dropout = field<float>(j, "dropout", "config");
    c.tie_lm_head = field<bool>(j, "tie_lm_head", "config");
    c.n_classes = field<int>(j, "n_classes", "config");
    c.init_std = field<float>(j, "init_std", "config");
    c.ln_eps = field<float>(j, "ln_eps", "config");
    try {
        c.validate();
    } catch (const ConfigError& e) {
        throw LoadError("config", e.what());
    }
    return c;
}

ScheduleSpec schedule_from_json(const json& j, const std::string& path) {
    ScheduleSpec s;
    s.peak_lr = field<double>(j, "peak_lr", path);
    s.warmup_updates = field<std::int64_t>(j, "warmup_updates", path);
    s.total_updates = field<std::int64_t>(j, "total_updates", path);
    s.end_lr = field<double>(j, "end_lr", path);
    return s;
}

Provenance provenance_from_json(const json& j) {
    const std::string path = "provenance";
    Provenance p;
    p.stage = field<std::string>(j, "stage", path);
    p.parent_hash = field<std::string>(j, "parent_hash", path);
    p.second_parent_hash = field<std::string>(j, "second_parent_hash", path);
    p.language = field<std::string>(j, "language", path);
    p.updates = field<std::int64_t>(j, "updates", path);
    p.seed = field<std::uint64_t>(j, "seed", path);
    p.selected_update = field<std::int64_t>(j, "selected_update", path);
    const json f = field<json>(j, "forgetting", path);
    p.forgetting.enabled = field<bool>(f, "enabled", path + ".forgetting");
    p.forgetting.interval = field<std::int64_t>(f, "interval", path + ".forgetting");
    p.forgetting.reset_std = field<float>(f, "reset_std", path + ".forgetting");
    p.forgetting.emb_schedule = schedule_from_json(field<json>(f, "emb_schedule", path + ".forgetting"),
                                                   path + ".forgetting.emb_schedule");
    const json lineage = field<json>(j, "lineage", path);
    if (!lineage.is_array()) throw LoadError(path + ".lineage", "not an array");
    for (std::size_t i = 0; i < lineage.size(); ++i) {
        const std::string ep = path + ".lineage." + std::to_string(i);
        p.lineage.push_back({field<std::string>(lineage[i], "stage", ep), field<std::string>(lineage[i], "hash", ep)});
    }
    return p;
}

std::string read_file(const fs::path& path, const std::string& field_name) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LoadError(field_name, "cannot open " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

void write_file(const fs::path& path, const void* bytes, std::size_t n) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os.write(static_cast<const char*>(bytes), static_cast<std::streamsize>(n));
    os.flush();
    if (!os) throw IoError("write failed for " + path.string());
}

std::vector<float> flatten(const std::vector<std::vector<float>>& parts) {
    std::vector<float> out;
    for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
    return out;
}

} // namespace

std::string provenance_text(const Provenance& p) { return to_json(p).dump(); }

std::string checkpoint_hash(const Checkpoint& ckpt) {
    Fnv1a64 h;
    for (const auto& p : ckpt.model.params()) h.update(std::span<const float>(p.tensor.data()));
    h.update(provenance_text(ckpt.provenance));
    return hex64(h.digest());
}

std::string group_hash(const TransformerModel& model, ParamGroup group) {
    Fnv1a64 h;
    for (const auto& p : model.params())
        if (p.group == group) h.update(std::span<const float>(p.tensor.data()));
    return hex64(h.digest());
}

std::string root_hash(const Checkpoint& ckpt) {
    return ckpt.provenance.lineage.empty() ? checkpoint_hash(ckpt) : ckpt.provenance.lineage.front().hash;
}

Checkpoint Checkpoint::clone() const { return {model.clone(), provenance, optim}; }

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
    static std::atomic<int> counter{0};
    const fs::path target = fs::absolute(dir);
    fs::create_directories(target.parent_path());
    const fs::path staging = target.parent_path() / (target.filename().string() + ".tmp-" +
                                                     std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(staging);
    fs::create_directories(staging);

    json params = json::array();
    std::vector<float> blob;
    for (const auto& p : ckpt.model.params()) {
        const auto values = p.tensor.data();
        params.push_back({{"name", p.name},
                          {"group", group_name(p.group)},
                          {"shape", p.tensor.shape()},
                          {"offset", blob.size() * sizeof(float)},
                          {"hash", hex64(fnv1a64(std::span<const float>(values)))}});
        blob.insert(blob.end(), values.begin(), values.end());
    }
    write_file(staging / "params.bin", blob.data(), blob.size() * sizeof(float));

    json manifest = {{"format_version", kCheckpointFormatVersion},
                     {"model_seed", ckpt.model.seed()},
                     {"config", to_json(ckpt.config())},
                     {"provenance", to_json(ckpt.provenance)},
                     {"param_count", ckpt.model.params().size()},
                     {"params", params},
                     {"params_hash", hex64(fnv1a64(std::span<const float>(blob)))}};
    if (ckpt.optim) {
        const auto& o = *ckpt.optim;
        if (o.m.size() != ckpt.model.params().size() || o.v.size() != o.m.size()) {
            throw DimensionError("save_checkpoint: optimizer state does not match the parameter list");
        }
        std::vector<float> ob = flatten(o.m);
        const std::vector<float> vb = flatten(o.v);
        ob.insert(ob.end(), vb.begin(), vb.end());
        write_file(staging / "optim.bin", ob.data(), ob.size() * sizeof(float));
        manifest["optim"] = {{"emb_step", o.emb_step},
                             {"body_step", o.body_step},
                             {"hash", hex64(fnv1a64(std::span<const float>(ob)))}};
    }
    const std::string text = manifest.dump(2) + "\n";
    write_file(staging / "manifest", text.data(), text.size());

    fs::remove_all(target);
    fs::rename(staging, target);
}

Checkpoint load_checkpoint(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw LoadError("manifest", dir.string() + " is not a checkpoint directory");
    json manifest;
    try {
        manifest = json::parse(read_file(dir / "manifest", "manifest"));
    } catch (const json::parse_error& e) {
        throw LoadError("manifest", std::string("malformed: ") + e.what());
    }
    const int version = field<int>(manifest, "format_version", "");
    if (version != kCheckpointFormatVersion) {
        throw LoadError("format_version", "expected " + std::to_string(kCheckpointFormatVersion) + ", found " +
                                              std::to_string(version));
    }
    const ModelConfig config = config_from_json(field<json>(manifest, "config", ""));
    const auto seed = field<std::uint64_t>(manifest, "model_seed", "");
    Checkpoint ckpt{TransformerModel::init(config, seed), provenance_from_json(field<json>(manifest, "provenance", "")),
                    std::nullopt};

    const auto& expected = ckpt.model.params();
    const json table = field<json>(manifest, "params", "");
    const auto declared = field<std::size_t>(manifest, "param_count", "");
    if (!table.is_array() || declared != table.size() || declared != expected.size()) {
        throw LoadError("param_count", "manifest declares " + std::to_string(declared) + " parameters, table has " +
                                           std::to_string(table.is_array() ? table.size() : 0) +
                                           ", the configured model has " + std::to_string(expected.size()));
    }

    const std::string blob = read_file(dir / "params.bin", "params.bin");
    std::size_t total = 0;
    for (const auto& p : expected) total += p.tensor.numel() * sizeof(float);
    if (blob.size() != total) {
        throw LoadError("params.bin", "size " + std::to_string(blob.size()) + " bytes, expected " +
                                          std::to_string(total) + " (truncated or padded file)");
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
        const auto& p = expected[i];
        const json& entry = table[i];
        const std::string path = "params." + p.name;
        if (field<std::string>(entry, "name", "params." + std::to_string(i)) != p.name) {
            throw LoadError("params." + std::to_string(i) + ".name", "expected " + p.name);
        }
        if (field<Shape>(entry, "shape", path) != p.tensor.shape()) throw LoadError(path + ".shape", "shape mismatch");
        const auto offset = field<std::size_t>(entry, "offset", path);
        const std::size_t bytes = p.tensor.numel() * sizeof(float);
        if (offset + bytes > blob.size()) throw LoadError(path + ".offset", "outside params.bin");
        std::memcpy(p.tensor.data().data(), blob.data() + offset, bytes);
        const std::string hash = hex64(fnv1a64(std::span<const float>(p.tensor.data())));
        if (hash != field<std::string>(entry, "hash", path)) {
            throw LoadError(path + ".hash", "content hash " + hash + " does not match the manifest");
        }
    }

    if (manifest.contains("optim")) {
        const json& oj = manifest["optim"];
        const std::string ob = read_file(dir / "optim.bin", "optim.bin");
        if (ob.size() != 2 * total) {
            throw LoadError("optim.bin", "size " + std::to_string(ob.size()) + " bytes, expected " +
                                             std::to_string(2 * total));
        }
        if (hex64(fnv1a64(std::as_bytes(std::span(ob.data(), ob.size())))) != field<std::string>(oj, "hash", "optim")) {
            throw LoadError("optim.hash", "content hash does not match the manifest");
        }
        OptimizerSnapshot o;
        o.emb_step = field<std::int64_t>(oj, "emb_step", "optim");
        o.body_step = field<std::int64_t>(oj, "body_step", "optim");
        std::size_t pos = 0;
        for (auto* moments : {&o.m, &o.v}) {
            for (const auto& p : expected) {
                std::vector<float> x(p.tensor.numel());
                std::memcpy(x.data(), ob.data() + pos, x.size() * sizeof(float));
                pos += x.size() * sizeof(float);
                moments->push_back(std::move(x));
            }
        }
        ckpt.optim = std::move(o);
    }
    return ckpt;
}

} // namespace forgetlm
