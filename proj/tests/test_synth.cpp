// Copyright (c) 2026, The forgetlm Authors
// SPDX-License-Identifier: Apache-2.0

#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <set>

#include "forgetlm/errors.h"
#include "forgetlm/synth.h"

using namespace forgetlm;

namespace {

// Upper-tail chi-square quantile via the Wilson-Hilferty cube approximation.
double chi2_critical(double dof, double z) {
    const double a = 2.0 / (9.0 * dof);
    return dof * std::pow(1.0 - a + z * std::sqrt(a), 3.0);
}

using Bigram = std::pair<int, int>;

// Bigram counts in abstract (un-shifted) ids, read in generation order.
std::map<Bigram, double> bigram_counts(const Corpus& c) {
    const int shift = c.language.content_range().begin;
    std::map<Bigram, double> out;
    for (auto seq : c.sequences) {
        if (c.language.reverse_word_order) std::reverse(seq.begin(), seq.end());
        for (std::size_t i = 1; i < seq.size(); ++i) out[{seq[i - 1] - shift, seq[i] - shift}] += 1.0;
    }
    return out;
}

// Chi-square homogeneity statistic of two count tables plus its degrees of freedom.
std::pair<double, double> homogeneity(const std::map<Bigram, double>& x, const std::map<Bigram, double>& y) {
    std::set<Bigram> keys;
    for (const auto& [k, _] : x) keys.insert(k);
    for (const auto& [k, _] : y) keys.insert(k);
    double nx = 0, ny = 0;
    for (const auto& [_, v] : x) nx += v;
    for (const auto& [_, v] : y) ny += v;
    double stat = 0.0;
    double cells = 0.0;
    for (const auto& k : keys) {
        const double cx = x.contains(k) ? x.at(k) : 0.0;
        const double cy = y.contains(k) ? y.at(k) : 0.0;
        const double total = cx + cy;
        if (total < 20.0) continue; // sparse cells are pooled out
        const double ex = total * nx / (nx + ny);
        const double ey = total * ny / (nx + ny);
        stat += (cx - ex) * (cx - ex) / ex + (cy - ey) * (cy - ey) / ey;
        cells += 1.0;
    }
    return {stat, cells - 1.0};
}

} // namespace

TEST_CASE("corpus size, ranges and determinism", "[synth]") {
    const auto base = base_language();
    const auto c = generate_corpus(base, 10000, 3);
    CHECK(c.total_tokens >= 10000);
    CHECK(c.total_tokens < 10000 + 64);
    std::int64_t counted = 0;
    for (const auto& s : c.sequences) {
        CHECK(s.size() >= 16);
        CHECK(s.size() <= 64);
        counted += static_cast<std::int64_t>(s.size());
        for (TokenId t : s) CHECK(base.content_range().contains(t));
    }
    CHECK(counted == c.total_tokens);
    CHECK(c.hash() == generate_corpus(base, 10000, 3).hash());
    CHECK(c.hash() != generate_corpus(base, 10000, 4).hash());

    auto shifted = base;
    shifted.name = "shifted";
    shifted.script_offset = 64;
    for (const auto& s : generate_corpus(shifted, 5000, 1).sequences)
        for (TokenId t : s) {
            CHECK(t >= 4 + 64);
            CHECK(t < 4 + 128);
        }
    CHECK_THROWS_AS(generate_corpus(base, 10, 1), SizeError);
}

TEST_CASE("language distances", "[synth]") {
    const auto base = base_language();
    const auto close = make_language(base, Distance::Close);
    const auto medium = make_language(base, Distance::Medium);
    const auto distant = make_language(base, Distance::Distant);
    CHECK(close.swap_fraction == 0.0);
    CHECK_FALSE(close.reverse_word_order);
    CHECK(medium.swap_fraction == 0.5);
    CHECK(distant.swap_fraction == 1.0);
    CHECK(distant.reverse_word_order);
    for (const auto& l : {close, medium, distant}) {
        CHECK((l.content_range().begin >= base.content_range().end ||
               l.content_range().end <= base.content_range().begin));
        CHECK(l.content_range().end <= 256);
    }
    for (int p2 = 0; p2 < kContentTokens; p2 += 7)
        for (int p1 = 0; p1 < kContentTokens; p1 += 5) CHECK(transition_row(close, p2, p1) == transition_row(base, p2, p1));
    int differing = 0;
    for (int p2 = 0; p2 < kContentTokens; ++p2)
        for (int p1 = 0; p1 < kContentTokens; ++p1) differing += transition_row(distant, p2, p1) != transition_row(base, p2, p1);
    CHECK(differing > kContentTokens * kContentTokens / 2);
    CHECK_THROWS_AS(parse_distance("far"), ConfigError);
}

TEST_CASE("close corpora share bigram statistics with base", "[synth][stats]") {
    const auto base = base_language();
    const auto b = bigram_counts(generate_corpus(base, 200000, 5));
    const auto c = bigram_counts(generate_corpus(make_language(base, Distance::Close), 200000, 6));
    const auto [stat, dof] = homogeneity(b, c);
    INFO("chi2 " << stat << " dof " << dof);
    CHECK(stat < chi2_critical(dof, 3.09)); // p = 0.001

    const auto d = bigram_counts(generate_corpus(make_language(base, Distance::Distant), 200000, 6));
    const auto [dstat, ddof] = homogeneity(b, d);
    CHECK(dstat > chi2_critical(ddof, 3.09));
}

TEST_CASE("masking", "[synth]") {
    const auto base = base_language();
    std::vector<TokenId> seq(20);
    std::iota(seq.begin(), seq.end(), base.content_range().begin);
    const auto m = mlm_mask(seq, base.content_range(), 9);
    CHECK(m.masked.positions.size() == 3);
    const auto again = mlm_mask(seq, base.content_range(), 9);
    CHECK(m.masked.positions == again.masked.positions);
    CHECK(m.masked.input == again.masked.input);
    for (int p : m.masked.positions) CHECK(m.masked.target[static_cast<std::size_t>(p)] == seq[static_cast<std::size_t>(p)]);

    std::array<int, 3> kinds{};
    int total = 0;
    const auto corpus = generate_corpus(base, 80000, 2);
    for (std::size_t i = 0; i < corpus.sequences.size(); ++i) {
        const auto r = mlm_mask(corpus.sequences[i], base.content_range(), i);
        for (std::size_t j = 0; j < r.kinds.size(); ++j) {
            const auto p = static_cast<std::size_t>(r.masked.positions[j]);
            ++kinds[static_cast<std::size_t>(r.kinds[j])];
            ++total;
            if (r.kinds[j] == MaskKind::Mask) CHECK(r.masked.input[p] == kMaskId);
            if (r.kinds[j] == MaskKind::Random) CHECK(base.content_range().contains(r.masked.input[p]));
            if (r.kinds[j] == MaskKind::Keep) CHECK(r.masked.input[p] == corpus.sequences[i][p]);
        }
    }
    REQUIRE(total >= 10000);
    CHECK(std::abs(kinds[0] / double(total) - 0.8) <= 0.02);
    CHECK(std::abs(kinds[1] / double(total) - 0.1) <= 0.02);
    CHECK(std::abs(kinds[2] / double(total) - 0.1) <= 0.02);
}

TEST_CASE("classification rule and dataset", "[synth]") {
    const std::vector<TokenId> a{10, 11, 12, 13, 14, 15, 16, 17, 18, 19, 20};
    CHECK(cls_rule(a, a) == 0);
    std::vector<TokenId> rev(a.rbegin(), a.rend());
    CHECK(cls_rule(a, rev) == 1);
    const std::vector<TokenId> other{30, 31, 32};
    CHECK(cls_rule(a, other) == 2);

    const auto base = base_language();
    const auto data = make_cls_dataset(base, 999, 4);
    std::array<int, 3> counts{};
    for (const auto& ex : data) {
        ++counts[static_cast<std::size_t>(ex.label)];
        CHECK(cls_rule(ex.a, ex.b) == ex.label);
    }
    for (int c : counts) CHECK(std::abs(c - 333) <= 1);
    CHECK_THROWS_AS(make_cls_dataset(base, 2, 1), SizeError);

    std::vector<TokenId> perm(256);
    std::iota(perm.begin(), perm.end(), 0);
    std::mt19937_64 rng(17);
    std::shuffle(perm.begin() + kNumReserved, perm.end(), rng);
    for (const auto& ex : data) {
        std::vector<TokenId> pa, pb;
        for (TokenId t : ex.a) pa.push_back(perm[static_cast<std::size_t>(t)]);
        for (TokenId t : ex.b) pb.push_back(perm[static_cast<std::size_t>(t)]);
        CHECK(cls_rule(pa, pb) == ex.label);
    }

    const auto distant = make_language(base, Distance::Distant);
    for (const auto& ex : make_cls_dataset(distant, 30, 4)) {
        for (TokenId t : ex.a) CHECK(distant.content_range().contains(t));
        CHECK(cls_rule(ex.a, ex.b) == ex.label);
    }
}

TEST_CASE("budget subsampling", "[synth]") {
    const auto corpus = generate_corpus(base_language(), 100000, 8);
    const auto small = subsample_budget(corpus, 1000, 3);
    CHECK(small.total_tokens >= 1000);
    CHECK(small.total_tokens < 1000 + 64);
    const auto mid = subsample_budget(corpus, 10000, 3);
    REQUIRE(mid.sequences.size() >= small.sequences.size());
    for (std::size_t i = 0; i < small.sequences.size(); ++i) CHECK(small.sequences[i] == mid.sequences[i]);

    const auto all = subsample_budget(corpus, corpus.total_tokens, 3);
    auto x = all.sequences, y = corpus.sequences;
    std::sort(x.begin(), x.end());
    std::sort(y.begin(), y.end());
    CHECK(x == y);
    CHECK_THROWS_AS(subsample_budget(corpus, corpus.total_tokens + 1, 3), SizeError);
}

TEST_CASE("corpus file round trip", "[synth]") {
    const auto lang = make_language(base_language(), Distance::Medium);
    const auto corpus = generate_corpus(lang, 3000, 12);
    const auto dir = std::filesystem::temp_directory_path() / "forgetlm_test_synth";
    std::filesystem::create_directories(dir);
    const auto path = dir / "corpus.txt";
    write_corpus(corpus, path);
    const auto back = read_corpus(path, lang);
    CHECK(back.hash() == corpus.hash());
    CHECK(back.total_tokens == corpus.total_tokens);
    const auto h = file_hash(path);
    write_corpus(corpus, dir / "again.txt");
    CHECK(file_hash(dir / "again.txt") == h);
    CHECK_THROWS(read_corpus(path, base_language()));
    std::filesystem::remove_all(dir);
}
