// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0

#include "forgetlm/synth.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "forgetlm/errors.h"
#include "forgetlm/hash.h"

namespace forgetlm {

namespace {

constexpr int kClasses = 8;
constexpr int kPerClass = kContentTokens / kClasses;
constexpr int kContexts = kContentTokens * kContentTokens;
constexpr int kRowWidth = 6;
constexpr int kMinSentence = 16;

using Row = std::array<std::pair<int, double>, kRowWidth>;

double uniform01(std::mt19937_64& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(rng);
}

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
    x ^= x >> 31;
    x *= 0xbf58476d1ce4e5b9ULL;
    x ^= x >> 27;
    return x;
}

struct Grammar {
    std::vector<Row> rows; // indexed by prev2 * 64 + prev1

    int sample_next(std::mt19937_64& rng, int prev2, int prev1) const {
        const Row& row = rows[static_cast<std::size_t>(prev2 * kContentTokens + prev1)];
        double u = uniform01(rng);
        for (const auto& [tok, p] : row) {
            if (u < p) return tok;
            u -= p;
        }
        return row.back().first;
    }
};

// Class-structured base table, then the language's row permutation.
Grammar build_grammar(const LanguageSpec& spec) {
    std::mt19937_64 rng(mix(spec.grammar_seed, 0x6772616d6d6172ULL));

    std::vector<int> order(kContentTokens);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::array<int, kContentTokens> token_class{};
    std::array<std::array<int, kPerClass>, kClasses> members{};
    for (int i = 0; i < kContentTokens; ++i) {
        token_class[static_cast<std::size_t>(order[i])] = i / kPerClass;
        members[static_cast<std::size_t>(i / kPerClass)][static_cast<std::size_t>(i % kPerClass)] = order[i];
    }

    // Two successor classes per class context, weighted 3:1.
    std::array<std::array<int, 2>, kClasses * kClasses> next_classes{};
    for (auto& nc : next_classes) {
        nc[0] = uniform_int(rng, 0, kClasses - 1);
        do {
            nc[1] = uniform_int(rng, 0, kClasses - 1);
        } while (nc[1] == nc[0]);
    }
    // Three preferred members of each successor class given the previous token.
    std::vector<std::array<std::array<int, 3>, kClasses>> emit(kContentTokens);
    for (auto& per_class : emit) {
        for (int c = 0; c < kClasses; ++c) {
            auto pool = members[static_cast<std::size_t>(c)];
            std::shuffle(pool.begin(), pool.end(), rng);
            per_class[static_cast<std::size_t>(c)] = {pool[0], pool[1], pool[2]};
        }
    }

    constexpr std::array<double, 2> kClassW = {0.75, 0.25};
    constexpr std::array<double, 3> kTokW = {0.6, 0.3, 0.1};
    std::vector<Row> base(kContexts);
    for (int p2 = 0; p2 < kContentTokens; ++p2) {
        for (int p1 = 0; p1 < kContentTokens; ++p1) {
            const auto& nc = next_classes[static_cast<std::size_t>(token_class[static_cast<std::size_t>(p2)] * kClasses +
                                                                   token_class[static_cast<std::size_t>(p1)])];
            Row& row = base[static_cast<std::size_t>(p2 * kContentTokens + p1)];
            std::size_t k = 0;
            for (int ci = 0; ci < 2; ++ci)
                for (int ti = 0; ti < 3; ++ti)
                    row[k++] = {emit[static_cast<std::size_t>(p1)][static_cast<std::size_t>(nc[static_cast<std::size_t>(ci)])]
                                    [static_cast<std::size_t>(ti)],
                                kClassW[static_cast<std::size_t>(ci)] * kTokW[static_cast<std::size_t>(ti)]};
        }
    }

    Grammar g;
    g.rows = base;
    const int n_swap = static_cast<int>(std::lround(std::clamp(spec.swap_fraction, 0.0, 1.0) * kContexts));
    if (n_swap > 1) {
        std::mt19937_64 srng(mix(spec.grammar_seed, 0x73776170ULL));
        std::vector<int> idx(kContexts);
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), srng);
        std::vector<int> chosen(idx.begin(), idx.begin() + n_swap);
        std::vector<int> source = chosen;
        std::shuffle(source.begin(), source.end(), srng);
        for (int i = 0; i < n_swap; ++i) {
            g.rows[static_cast<std::size_t>(chosen[static_cast<std::size_t>(i)])] =
                base[static_cast<std::size_t>(source[static_cast<std::size_t>(i)])];
        }
    }
    return g;
}

// Abstract tokens (0..63) in generation order.
std::vector<int> sample_abstract(const Grammar& g, std::mt19937_64& rng, int length) {
    std::vector<int> s(static_cast<std::size_t>(length));
    s[0] = uniform_int(rng, 0, kContentTokens - 1);
    if (length > 1) s[1] = uniform_int(rng, 0, kContentTokens - 1);
    for (int i = 2; i < length; ++i) s[static_cast<std::size_t>(i)] = g.sample_next(rng, s[static_cast<std::size_t>(i - 2)], s[static_cast<std::size_t>(i - 1)]);
    return s;
}

std::vector<TokenId> render(const LanguageSpec& spec, std::vector<int> abstract) {
    if (spec.reverse_word_order) std::reverse(abstract.begin(), abstract.end());
    const TokenId base = spec.content_range().begin;
    std::vector<TokenId> ids(abstract.size());
    for (std::size_t i = 0; i < abstract.size(); ++i) ids[i] = base + abstract[i];
    return ids;
}

std::uint64_t language_salt(const LanguageSpec& spec) {
    Fnv1a64 h;
    h.update(spec.name);
    return h.digest();
}

} // namespace

const char* distance_name(Distance d) {
    switch (d) {
    case Distance::Close: return "close";
    case Distance::Medium: return "medium";
    case Distance::Distant: return "distant";
    }
    return "?";
}

Distance parse_distance(const std::string& text) {
    if (text == "close") return Distance::Close;
    if (text == "medium") return Distance::Medium;
    if (text == "distant") return Distance::Distant;
    throw ConfigError("unknown distance level '" + text + "'");
}

LanguageSpec base_language(std::uint64_t grammar_seed) {
    LanguageSpec s;
    s.name = "base";
    s.grammar_seed = grammar_seed;
    return s;
}

LanguageSpec make_language(const LanguageSpec& base, Distance distance) {
    LanguageSpec s = base;
    s.name = distance_name(distance);
    s.script_offset = base.script_offset == kContentTokens ? 2 * kContentTokens : kContentTokens;
    switch (distance) {
    case Distance::Close:
        s.swap_fraction = 0.0;
        s.reverse_word_order = false;
        break;
    case Distance::Medium:
        s.swap_fraction = 0.5;
        s.reverse_word_order = false;
        break;
    case Distance::Distant:
        s.swap_fraction = 1.0;
        s.reverse_word_order = true;
        break;
    }
    return s;
}

std::uint64_t Corpus::hash() const {
    Fnv1a64 h;
    for (const auto& s : sequences) {
        h.update(std::as_bytes(std::span(s)));
        const std::int32_t sep = -1;
        h.update(std::as_bytes(std::span(&sep, 1)));
    }
    return h.digest();
}

Corpus generate_corpus(const LanguageSpec& spec, std::int64_t n_tokens, std::uint64_t seed, int max_seq_len) {
    if (max_seq_len < kMinSentence) throw ConfigError("generate_corpus: max_seq_len must be >= 16");
    if (n_tokens < max_seq_len) {
        throw SizeError("generate_corpus: n_tokens " + std::to_string(n_tokens) + " is below max_seq_len " +
                        std::to_string(max_seq_len));
    }
    const Grammar g = build_grammar(spec);
    std::mt19937_64 rng(mix(seed, language_salt(spec)));
    Corpus c;
    c.language = spec;
    c.seed = seed;
    while (c.total_tokens < n_tokens) {
        const int len = uniform_int(rng, kMinSentence, max_seq_len);
        c.sequences.push_back(render(spec, sample_abstract(g, rng, len)));
        c.total_tokens += len;
    }
    return c;
}

std::vector<std::pair<int, double>> transition_row(const LanguageSpec& spec, int prev2, int prev1) {
    if (prev2 < 0 || prev2 >= kContentTokens || prev1 < 0 || prev1 >= kContentTokens) {
        throw PreconditionError("transition_row: abstract token outside [0,64)");
    }
    const Grammar g = build_grammar(spec);
    const Row& row = g.rows[static_cast<std::size_t>(prev2 * kContentTokens + prev1)];
    return {row.begin(), row.end()};
}

MaskResult mlm_mask(std::span<const TokenId> sequence, TokenRange content, std::uint64_t seed) {
    const int len = static_cast<int>(sequence.size());
    if (len < 2) throw PreconditionError("mlm_mask: sequence length must be >= 2");
    std::mt19937_64 rng(mix(seed, 0x6d61736bULL));
    const int k = std::max(1, static_cast<int>(std::lround(0.15 * len)));
    std::vector<int> idx(static_cast<std::size_t>(len));
    std::iota(idx.begin(), idx.end(), 0);
    for (int i = 0; i < k; ++i) std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(uniform_int(rng, i, len - 1))]);
    std::vector<int> chosen(idx.begin(), idx.begin() + k);
    std::sort(chosen.begin(), chosen.end());

    MaskResult r;
    r.masked.input.assign(sequence.begin(), sequence.end());
    r.masked.target.assign(sequence.begin(), sequence.end());
    r.masked.positions = chosen;
    for (int pos : chosen) {
        const double u = uniform01(rng);
        auto& slot = r.masked.input[static_cast<std::size_t>(pos)];
        if (u < 0.8) {
            slot = kMaskId;
            r.kinds.push_back(MaskKind::Mask);
        } else if (u < 0.9) {
            slot = uniform_int(rng, content.begin, content.end - 1);
            r.kinds.push_back(MaskKind::Random);
        } else {
            r.kinds.push_back(MaskKind::Keep);
        }
    }
    return r;
}

int cls_rule(std::span<const TokenId> a, std::span<const TokenId> b) {
    if (a.size() == b.size()) {
        std::size_t mismatches = 0;
        for (std::size_t i = 0; i < a.size(); ++i) mismatches += a[i] != b[i];
        if (mismatches * 10 <= a.size()) return 0;
        std::vector<TokenId> sa(a.begin(), a.end()), sb(b.begin(), b.end());
        std::sort(sa.begin(), sa.end());
        std::sort(sb.begin(), sb.end());
        if (sa == sb) return 1;
    }
    return 2;
}

std::vector<ClsExample> make_cls_dataset(const LanguageSpec& spec, int n_examples, std::uint64_t seed,
                                         ClsDatasetOptions options) {
    if (n_examples < 3) throw SizeError("make_cls_dataset: need at least 3 examples");
    if (options.min_len < 2 || options.max_len < options.min_len) {
        throw ConfigError("make_cls_dataset: invalid sentence length range");
    }
    const Grammar g = build_grammar(spec);
    std::mt19937_64 rng(mix(mix(seed, language_salt(spec)), 0x636c73ULL));
    const TokenRange content = spec.content_range();

    std::vector<int> labels(static_cast<std::size_t>(n_examples));
    for (int i = 0; i < n_examples; ++i) labels[static_cast<std::size_t>(i)] = i % 3;
    std::shuffle(labels.begin(), labels.end(), rng);

    std::vector<ClsExample> out;
    out.reserve(labels.size());
    for (int label : labels) {
        ClsExample ex;
        ex.label = label;
        for (;;) {
            const int len = uniform_int(rng, options.min_len, options.max_len);
            ex.a = render(spec, sample_abstract(g, rng, len));
            if (label == 0) {
                ex.b = ex.a;
                const int noise = len / 10;
                std::vector<int> pos(static_cast<std::size_t>(len));
                std::iota(pos.begin(), pos.end(), 0);
                std::shuffle(pos.begin(), pos.end(), rng);
                for (int i = 0; i < noise; ++i) ex.b[static_cast<std::size_t>(pos[static_cast<std::size_t>(i)])] = uniform_int(rng, content.begin, content.end - 1);
            } else if (label == 1) {
                ex.b = ex.a;
                for (int attempt = 0; attempt < 16 && cls_rule(ex.a, ex.b) != 1; ++attempt) std::shuffle(ex.b.begin(), ex.b.end(), rng);
            } else {
                ex.b = render(spec, sample_abstract(g, rng, len));
            }
            if (cls_rule(ex.a, ex.b) == label) break;
        }
        out.push_back(std::move(ex));
    }
    return out;
}

Corpus subsample_budget(const Corpus& corpus, std::int64_t budget_tokens, std::uint64_t seed) {
    if (budget_tokens > corpus.total_tokens) {
        throw SizeError("subsample_budget: budget " + std::to_string(budget_tokens) + " exceeds corpus total " +
                        std::to_string(corpus.total_tokens));
    }
    if (budget_tokens <= 0) throw SizeError("subsample_budget: budget must be positive");
    std::vector<std::size_t> order(corpus.sequences.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix(seed, 0x627564676574ULL));
    std::shuffle(order.begin(), order.end(), rng);
    Corpus out;
    out.language = corpus.language;
    out.seed = corpus.seed;
    for (std::size_t i : order) {
        if (out.total_tokens >= budget_tokens) break;
        out.sequences.push_back(corpus.sequences[i]);
        out.total_tokens += static_cast<std::int64_t>(corpus.sequences[i].size());
    }
    return out;
}

void write_corpus(const Corpus& corpus, const std::filesystem::path& path) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << "#lang=" << corpus.language.name << " seed=" << corpus.seed << " tokens=" << corpus.total_tokens << '\n';
    for (const auto& s : corpus.sequences) {
        for (std::size_t i = 0; i < s.size(); ++i) {
            if (i) os << ' ';
            os << s[i];
        }
        os << '\n';
    }
    if (!os) throw IoError("write failed for " + path.string());
}

Corpus read_corpus(const std::filesystem::path& path, const LanguageSpec& spec) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::string header;
    std::getline(is, header);
    Corpus c;
    c.language = spec;
    std::int64_t declared = -1;
    std::string lang;
    {
        std::istringstream hs(header);
        std::string field;
        while (hs >> field) {
            if (field.rfind("#lang=", 0) == 0) lang = field.substr(6);
            else if (field.rfind("seed=", 0) == 0) c.seed = std::stoull(field.substr(5));
            else if (field.rfind("tokens=", 0) == 0) declared = std::stoll(field.substr(7));
        }
    }
    if (lang.empty() || declared < 0) throw IoError(path.string() + ": malformed corpus header");
    if (lang != spec.name) throw IoError(path.string() + ": corpus language '" + lang + "' is not '" + spec.name + "'");
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::vector<TokenId> seq;
        TokenId id = 0;
        while (ls >> id) seq.push_back(id);
        c.total_tokens += static_cast<std::int64_t>(seq.size());
        c.sequences.push_back(std::move(seq));
    }
    if (c.total_tokens != declared) {
        throw IoError(path.string() + ": header declares " + std::to_string(declared) + " tokens, found " +
                      std::to_string(c.total_tokens));
    }
    return c;
}

std::uint64_t file_hash(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    Fnv1a64 h;
    std::array<char, 1 << 14> buf{};
    while (is) {
        is.read(buf.data(), buf.size());
        const auto got = static_cast<std::size_t>(is.gcount());
        h.update(std::as_bytes(std::span(buf.data(), got)));
    }
    return h.digest();
}

} // namespace forgetlm
