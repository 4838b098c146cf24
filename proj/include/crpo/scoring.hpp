#pragma once
// Pair scores (CR+, CR×, reward gap), MBR expected utility, and the
// built-in character n-gram utility used when no precomputed utility
// matrix is supplied.

#include <cmath>
#include <cstddef>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "crpo/core.hpp"

namespace crpo {

struct PairScoreInput {
    double r_w = 0.0;
    double r_l = 0.0;
    double logp_w = 0.0;
    double logp_l = 0.0;
};

namespace detail {
inline void require_finite(const PairScoreInput& in) {
    if (!(std::isfinite(in.r_w) && std::isfinite(in.r_l) && std::isfinite(in.logp_w) &&
          std::isfinite(in.logp_l))) {
        fail("non-finite pair score input");
    }
}
} // namespace detail

// Trust-weighted reward gap plus the reference-policy confidence gap.
inline double cr_plus(const PairScoreInput& in, double k_trust) {
    detail::require_finite(in);
    if (!std::isfinite(k_trust) || k_trust < 0) fail("k_trust must be finite and >= 0");
    return k_trust * (in.r_w - in.r_l) + (in.logp_l - in.logp_w);
}

inline double cr_times(const PairScoreInput& in) {
    detail::require_finite(in);
    return (in.r_w - in.r_l) * (in.logp_l - in.logp_w);
}

inline double reward_gap(double r_w, double r_l) {
    if (!(r_w >= 0.0 && r_w <= 1.0 && r_l >= 0.0 && r_l <= 1.0)) fail("reward out of range");
    return r_w - r_l;
}

// values[i][j] = U(candidate i as hypothesis, candidate j as pseudo-reference).
struct UtilityMatrix {
    std::vector<std::string> ids;
    std::vector<std::vector<double>> values;

    std::size_t size() const noexcept { return ids.size(); }

    void validate() const {
        require(values.size() == ids.size(), "utility matrix must be square");
        for (const auto& row : values) {
            require(row.size() == ids.size(), "utility matrix must be square");
            for (double v : row) require(std::isfinite(v), "utility matrix entries must be finite");
        }
    }
};

// Mean utility of candidate j against every other candidate; the diagonal
// is not a pseudo-reference.
inline double mbr_expected_utility(const UtilityMatrix& m, std::size_t j) {
    const std::size_t k = m.size();
    if (k < 2) fail("MBR scoring needs at least 2 candidates");
    if (j >= k) fail("MBR candidate index out of range");
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        if (i != j) sum += m.values[j][i];
    return sum / static_cast<double>(k - 1);
}

inline std::vector<double> mbr_scores(const UtilityMatrix& m) {
    std::vector<double> out(m.size());
    for (std::size_t j = 0; j < m.size(); ++j) out[j] = mbr_expected_utility(m, j);
    return out;
}

// Decodes UTF-8 into code points. Invalid bytes decode to U+FFFD.
inline std::u32string decode_utf8(std::string_view s) {
    std::u32string out;
    out.reserve(s.size());
    std::size_t i = 0;
    while (i < s.size()) {
        const auto b0 = static_cast<unsigned char>(s[i]);
        int extra = 0;
        char32_t cp = 0;
        if (b0 < 0x80) {
            cp = b0;
        } else if ((b0 & 0xE0) == 0xC0) {
            cp = b0 & 0x1F;
            extra = 1;
        } else if ((b0 & 0xF0) == 0xE0) {
            cp = b0 & 0x0F;
            extra = 2;
        } else if ((b0 & 0xF8) == 0xF0) {
            cp = b0 & 0x07;
            extra = 3;
        } else {
            out.push_back(0xFFFD);
            ++i;
            continue;
        }
        bool ok = true;
        for (int k = 1; k <= extra; ++k) {
            if (i + k >= s.size()) {
                ok = false;
                break;
            }
            const auto b = static_cast<unsigned char>(s[i + k]);
            if ((b & 0xC0) != 0x80) {
                ok = false;
                break;
            }
            cp = (cp << 6) | (b & 0x3F);
        }
        if (!ok) {
            out.push_back(0xFFFD);
            ++i;
            continue;
        }
        out.push_back(cp);
        i += static_cast<std::size_t>(extra) + 1;
    }
    return out;
}

struct ChrfParams {
    int max_order = 6;
    double beta = 2.0;
};

namespace detail {
inline bool is_space(char32_t c) {
    return c == U' ' || c == U'\t' || c == U'\n' || c == U'\r' || c == U'\v' || c == U'\f' ||
           c == 0x00A0 || c == 0x3000;
}

inline std::u32string strip_spaces(std::u32string s) {
    std::erase_if(s, is_space);
    return s;
}

inline std::map<std::u32string, int> char_ngrams(const std::u32string& s, int n) {
    std::map<std::u32string, int> counts;
    const auto len = static_cast<int>(s.size());
    for (int i = 0; i + n <= len; ++i) ++counts[s.substr(static_cast<std::size_t>(i), static_cast<std::size_t>(n))];
    return counts;
}
} // namespace detail

// Character n-gram F-score (chrF). Whitespace is removed; precision and
// recall are averaged over the orders 1..max_order at which both strings
// have at least one n-gram, then combined with recall weighted by beta.
inline double builtin_utility(std::string_view hypothesis, std::string_view reference,
                              const ChrfParams& params = {}) {
    const auto hyp = detail::strip_spaces(decode_utf8(hypothesis));
    const auto ref = detail::strip_spaces(decode_utf8(reference));
    if (hyp.empty() && ref.empty()) return 1.0;
    if (hyp.empty() || ref.empty()) return 0.0;

    double precision = 0.0;
    double recall = 0.0;
    int orders = 0;
    for (int n = 1; n <= params.max_order; ++n) {
        const auto h = detail::char_ngrams(hyp, n);
        const auto r = detail::char_ngrams(ref, n);
        if (h.empty() || r.empty()) break;
        long matched = 0;
        long hyp_total = 0;
        long ref_total = 0;
        for (const auto& [gram, count] : h) {
            hyp_total += count;
            if (auto it = r.find(gram); it != r.end()) matched += std::min(count, it->second);
        }
        for (const auto& [gram, count] : r) ref_total += count;
        precision += static_cast<double>(matched) / static_cast<double>(hyp_total);
        recall += static_cast<double>(matched) / static_cast<double>(ref_total);
        ++orders;
    }
    precision /= orders;
    recall /= orders;
    if (precision <= 0.0 && recall <= 0.0) return 0.0;
    const double b2 = params.beta * params.beta;
    return (1.0 + b2) * precision * recall / (b2 * precision + recall);
}

inline UtilityMatrix builtin_utility_matrix(const CandidateSet& set, const ChrfParams& params = {}) {
    UtilityMatrix m;
    const std::size_t k = set.size();
    m.ids.reserve(k);
    for (const auto& c : set.candidates) m.ids.push_back(c.id);
    m.values.assign(k, std::vector<double>(k, 0.0));
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j)
            m.values[i][j] = builtin_utility(set.candidates[i].text, set.candidates[j].text, params);
    return m;
}

} // namespace crpo
