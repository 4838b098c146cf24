#pragma once
// File formats:
//
//   candidates   JSON Lines, one candidate per line:
//                {"source_id", "source_text", "direction", "candidate_id",
//                 "text", "logprob", "rewards": {name: value}, "token_count"?}
//                An optional first line {"header": {"reference_policy": ...}}
//                names the policy that produced the log-probabilities.
//   pairs        JSON Lines, one pair per line:
//                {"source_id", "chosen_id", "rejected_id", "method", "score",
//                 "extras": {...}}
//                Fine-tuning targets use {"source_id", "sft_target", "method"}.
//                Provenance goes to a sidecar "<pairs>.provenance.json".
//   utility      JSON Lines, one matrix per source:
//                {"source_id", "ids": [...], "values": [row-major K*K]}
//
// Numbers are written in the shortest form that parses back to the same
// double, so every emitted file re-ingests without loss.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include "crpo/core.hpp"
#include "crpo/scoring.hpp"

namespace crpo::io {

using Json = nlohmann::json;
using OrderedJson = nlohmann::ordered_json;

inline std::string sha256_hex(std::string_view bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 failed");
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
    return out.str();
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline std::ofstream open_output(const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot write '" + path + "'");
    return out;
}

// ---------------------------------------------------------------------------
// Candidates

struct CandidateFileHeader {
    std::optional<std::string> reference_policy;

    bool operator==(const CandidateFileHeader&) const = default;
};

struct CandidateFile {
    CandidateFileHeader header;
    std::vector<CandidateSet> sets;
};

struct IngestOptions {
    // Extra candidate pools may arrive without log-probabilities; they are
    // rejected later, at merge time.
    bool require_logprob = true;
};

namespace detail {

inline const Json& field(const Json& obj, const char* key, const std::string& where) {
    const auto it = obj.find(key);
    if (it == obj.end()) fail(where + "missing field '" + key + "'");
    return *it;
}

inline std::string string_field(const Json& obj, const char* key, const std::string& where) {
    const auto& v = field(obj, key, where);
    if (!v.is_string()) fail(where + "field '" + key + "' must be a string");
    return v.get<std::string>();
}

inline double number_value(const Json& v, const std::string& what) {
    if (!v.is_number()) fail(what + " must be a number");
    const double x = v.get<double>();
    if (!std::isfinite(x)) fail(what + " must be finite");
    return x;
}

inline Candidate parse_candidate(const Json& rec, const IngestOptions& opts) {
    Candidate c;
    c.id = string_field(rec, "candidate_id", "");
    c.text = string_field(rec, "text", "");
    if (const auto it = rec.find("logprob"); it != rec.end() && !it->is_null()) {
        c.logprob = number_value(*it, "logprob");
    } else if (opts.require_logprob) {
        fail("missing field 'logprob'");
    }
    const auto& rewards = field(rec, "rewards", "");
    if (!rewards.is_object() || rewards.empty()) fail("field 'rewards' must be a non-empty object");
    for (const auto& [name, value] : rewards.items()) {
        const double r = number_value(value, "reward '" + name + "'");
        if (!(r >= 0.0 && r <= 1.0)) fail("reward out of range: '" + name + "'");
        c.rewards[name] = r;
    }
    if (const auto it = rec.find("token_count"); it != rec.end() && !it->is_null()) {
        if (!it->is_number_integer()) fail("field 'token_count' must be an integer");
        c.token_count = it->get<std::int64_t>();
    }
    c.reward_agg = aggregate_reward(c.rewards);
    validate(c, opts.require_logprob);
    return c;
}

} // namespace detail

// Groups records by source_id in order of first appearance; candidates keep
// file order. Errors carry the 1-based line number.
inline CandidateFile read_candidates(std::istream& in, const std::string& label, const IngestOptions& opts = {}) {
    CandidateFile file;
    std::map<std::string, std::size_t> index;
    std::map<std::pair<std::string, std::string>, std::size_t> seen;
    std::string line;
    std::size_t lineno = 0;
    bool first_record = true;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        try {
            const Json rec = Json::parse(line);
            if (!rec.is_object()) fail("record must be a JSON object");
            if (const auto h = rec.find("header"); h != rec.end()) {
                if (!first_record) fail("header must be the first record");
                if (!h->is_object()) fail("header must be an object");
                if (const auto p = h->find("reference_policy"); p != h->end()) {
                    if (!p->is_string()) fail("header reference_policy must be a string");
                    file.header.reference_policy = p->get<std::string>();
                }
                first_record = false;
                continue;
            }
            first_record = false;
            const auto sid = detail::string_field(rec, "source_id", "");
            const auto source_text = detail::string_field(rec, "source_text", "");
            const auto direction = Direction::parse(detail::string_field(rec, "direction", ""));
            auto cand = detail::parse_candidate(rec, opts);
            if (const auto [it, fresh] = seen.emplace(std::pair{sid, cand.id}, lineno); !fresh) {
                fail("duplicate candidate (" + sid + ", " + cand.id + "), first seen on line " +
                     std::to_string(it->second));
            }
            auto [it, fresh] = index.emplace(sid, file.sets.size());
            if (fresh) {
                file.sets.push_back({sid, source_text, direction, {}});
            } else {
                const auto& set = file.sets[it->second];
                if (set.source_text != source_text) fail("source_text differs from earlier records of '" + sid + "'");
                if (set.direction != direction) fail("direction differs from earlier records of '" + sid + "'");
            }
            file.sets[it->second].candidates.push_back(std::move(cand));
        } catch (const RecordError&) {
            throw;
        } catch (const Json::exception& e) {
            throw RecordError(label, lineno, std::string("malformed JSON: ") + e.what());
        } catch (const ValidationError& e) {
            throw RecordError(label, lineno, e.what());
        }
    }
    return file;
}

inline CandidateFile load_candidates(const std::string& path, const IngestOptions& opts = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open '" + path + "'");
    return read_candidates(in, path, opts);
}

inline std::vector<CandidateSet> ingest_candidates(const std::string& path) { return load_candidates(path).sets; }

inline void write_candidates(std::ostream& out, const CandidateFile& file) {
    if (file.header.reference_policy) {
        OrderedJson h;
        h["header"]["reference_policy"] = *file.header.reference_policy;
        out << h.dump() << '\n';
    }
    for (const auto& set : file.sets) {
        for (const auto& c : set.candidates) {
            OrderedJson rec;
            rec["source_id"] = set.source_id;
            rec["source_text"] = set.source_text;
            rec["direction"] = set.direction.str();
            rec["candidate_id"] = c.id;
            rec["text"] = c.text;
            rec["logprob"] = c.logprob ? OrderedJson(*c.logprob) : OrderedJson(nullptr);
            rec["rewards"] = OrderedJson::object();
            for (const auto& [name, value] : c.rewards) rec["rewards"][name] = value;
            if (c.token_count) rec["token_count"] = *c.token_count;
            out << rec.dump() << '\n';
        }
    }
}

inline void write_candidates(std::ostream& out, const std::vector<CandidateSet>& sets) {
    write_candidates(out, CandidateFile{{}, sets});
}

// Per-source union of candidate pools. Extra candidates must carry
// log-probabilities under the same reference policy as the primary pool.
inline std::vector<CandidateSet> merge_candidate_sources(const std::vector<CandidateSet>& primary,
                                                         const std::vector<CandidateSet>& extra) {
    std::vector<CandidateSet> out = primary;
    std::map<std::string, std::size_t> index;
    for (std::size_t i = 0; i < out.size(); ++i) index[out[i].source_id] = i;
    for (const auto& set : extra) {
        for (const auto& c : set.candidates) {
            if (!c.logprob)
                fail("extra candidate '" + c.id + "' of source '" + set.source_id +
                     "' has no logprob; CR scores require reference-policy likelihoods");
        }
        auto it = index.find(set.source_id);
        if (it == index.end()) {
            index[set.source_id] = out.size();
            out.push_back(set);
            continue;
        }
        auto& target = out[it->second];
        if (target.direction != set.direction)
            fail("source '" + set.source_id + "': extra pool direction " + set.direction.str() + " differs");
        for (const auto& c : set.candidates) {
            if (target.find(c.id))
                fail("source '" + set.source_id + "': candidate id '" + c.id + "' collides with the primary pool");
            target.candidates.push_back(c);
        }
    }
    for (const auto& set : out) validate(set);
    return out;
}

inline CandidateFile merge_candidate_sources(const CandidateFile& primary, const CandidateFile& extra) {
    if (!extra.header.reference_policy)
        fail("extra candidate pool does not declare its reference_policy in the file header");
    if (primary.header.reference_policy && *primary.header.reference_policy != *extra.header.reference_policy) {
        fail("reference policy mismatch: primary '" + *primary.header.reference_policy + "' vs extra '" +
             *extra.header.reference_policy + "'");
    }
    return {extra.header, merge_candidate_sources(primary.sets, extra.sets)};
}

// ---------------------------------------------------------------------------
// Configuration snapshot

inline OrderedJson to_json(const SelectionConfig& c) {
    OrderedJson j;
    j["method"] = std::string(to_string(c.method));
    j["k_trust"] = c.k_trust;
    j["beta"] = c.beta;
    j["eta"] = {{"out_of_english", c.eta.out_of_english}, {"into_english", c.eta.into_english}};
    j["gate_mode"] = std::string(to_string(c.gate_mode));
    j["epsilon"] = c.epsilon;
    j["rso_samples"] = c.rso_samples;
    j["top_n"] = c.top_n;
    j["seed"] = c.seed;
    j["logprob_norm"] = std::string(to_string(c.logprob_norm));
    return j;
}

inline SelectionConfig config_from_json(const Json& j) {
    SelectionConfig c;
    c.method = parse_method(j.at("method").get<std::string>());
    c.k_trust = j.at("k_trust").get<double>();
    c.beta = j.at("beta").get<double>();
    c.eta.out_of_english = j.at("eta").at("out_of_english").get<double>();
    c.eta.into_english = j.at("eta").at("into_english").get<double>();
    c.gate_mode = parse_gate_mode(j.at("gate_mode").get<std::string>());
    c.epsilon = j.at("epsilon").get<double>();
    c.rso_samples = j.at("rso_samples").get<int>();
    c.top_n = j.at("top_n").get<int>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.logprob_norm = parse_logprob_norm(j.at("logprob_norm").get<std::string>());
    return c;
}

// ---------------------------------------------------------------------------
// Pairs

inline void write_pairs(std::ostream& out, const PreferenceDataset& data) {
    for (const auto& p : data.pairs) {
        OrderedJson rec;
        rec["source_id"] = p.source_id;
        rec["chosen_id"] = p.chosen_id;
        rec["rejected_id"] = p.rejected_id;
        rec["method"] = std::string(to_string(p.method));
        rec["score"] = p.score;
        rec["extras"] = OrderedJson::object();
        for (const auto& [k, v] : p.extras) rec["extras"][k] = v;
        out << rec.dump() << '\n';
    }
    for (const auto& t : data.sft_targets) {
        OrderedJson rec;
        rec["source_id"] = t.source_id;
        rec["sft_target"] = t.candidate_id;
        rec["method"] = std::string(to_string(Method::qe_best));
        out << rec.dump() << '\n';
    }
}

inline PreferenceDataset read_pairs(std::istream& in, const std::string& label) {
    PreferenceDataset data;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        try {
            const Json rec = Json::parse(line);
            if (!rec.is_object()) fail("record must be a JSON object");
            const auto sid = detail::string_field(rec, "source_id", "");
            if (rec.contains("sft_target")) {
                data.sft_targets.push_back({sid, detail::string_field(rec, "sft_target", "")});
                continue;
            }
            PreferencePair p;
            p.source_id = sid;
            p.chosen_id = detail::string_field(rec, "chosen_id", "");
            p.rejected_id = detail::string_field(rec, "rejected_id", "");
            p.method = parse_method(detail::string_field(rec, "method", ""));
            p.score = detail::number_value(detail::field(rec, "score", ""), "score");
            if (const auto it = rec.find("extras"); it != rec.end()) {
                if (!it->is_object()) fail("field 'extras' must be an object");
                for (const auto& [k, v] : it->items()) p.extras[k] = detail::number_value(v, "extra '" + k + "'");
            }
            if (p.chosen_id == p.rejected_id) fail("chosen_id equals rejected_id");
            data.pairs.push_back(std::move(p));
        } catch (const Json::exception& e) {
            throw RecordError(label, lineno, std::string("malformed JSON: ") + e.what());
        } catch (const ValidationError& e) {
            throw RecordError(label, lineno, e.what());
        }
    }
    return data;
}

inline PreferenceDataset load_pairs(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open '" + path + "'");
    return read_pairs(in, path);
}

inline std::string provenance_path(const std::string& pairs_path) { return pairs_path + ".provenance.json"; }

inline OrderedJson to_json(const Provenance& p) {
    OrderedJson j;
    j["candidates_sha256"] = p.input_digest;
    j["config"] = to_json(p.config);
    return j;
}

inline Provenance provenance_from_json(const Json& j) {
    return {config_from_json(j.at("config")), j.at("candidates_sha256").get<std::string>()};
}

// Every pair and target must resolve inside the candidate pool.
inline void check_resolves(const PreferenceDataset& data, const std::vector<CandidateSet>& sets) {
    std::map<std::string, const CandidateSet*, std::less<>> by_id;
    for (const auto& s : sets) by_id[s.source_id] = &s;
    auto lookup = [&](const std::string& sid) {
        const auto it = by_id.find(sid);
        if (it == by_id.end()) fail("pair source '" + sid + "' does not resolve against the candidates");
        return it->second;
    };
    for (const auto& p : data.pairs) {
        const auto* set = lookup(p.source_id);
        if (!set->find(p.chosen_id) || !set->find(p.rejected_id))
            fail("pair (" + p.chosen_id + ", " + p.rejected_id + ") does not resolve in source '" + p.source_id + "'");
    }
    for (const auto& t : data.sft_targets) {
        if (!lookup(t.source_id)->find(t.candidate_id))
            fail("sft target '" + t.candidate_id + "' does not resolve in source '" + t.source_id + "'");
    }
}

// ---------------------------------------------------------------------------
// Utility matrices

struct SourceUtility {
    std::string source_id;
    UtilityMatrix matrix;
};

inline void write_utility(std::ostream& out, const std::vector<SourceUtility>& mats) {
    for (const auto& su : mats) {
        OrderedJson rec;
        rec["source_id"] = su.source_id;
        rec["ids"] = su.matrix.ids;
        auto& values = rec["values"] = OrderedJson::array();
        for (const auto& row : su.matrix.values)
            for (double v : row) values.push_back(v);
        out << rec.dump() << '\n';
    }
}

inline std::map<std::string, UtilityMatrix> read_utility(std::istream& in, const std::string& label) {
    std::map<std::string, UtilityMatrix> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const Json rec = Json::parse(line);
            const auto sid = detail::string_field(rec, "source_id", "");
            UtilityMatrix m;
            m.ids = detail::field(rec, "ids", "").get<std::vector<std::string>>();
            const auto& flat = detail::field(rec, "values", "");
            if (!flat.is_array() || flat.size() != m.ids.size() * m.ids.size())
                fail("'values' must hold K*K numbers in row-major order");
            const std::size_t k = m.ids.size();
            m.values.assign(k, std::vector<double>(k));
            for (std::size_t i = 0; i < k; ++i)
                for (std::size_t j = 0; j < k; ++j) m.values[i][j] = detail::number_value(flat[i * k + j], "utility");
            m.validate();
            if (!out.emplace(sid, std::move(m)).second) fail("duplicate utility matrix for '" + sid + "'");
        } catch (const Json::exception& e) {
            throw RecordError(label, lineno, std::string("malformed JSON: ") + e.what());
        } catch (const ValidationError& e) {
            throw RecordError(label, lineno, e.what());
        }
    }
    return out;
}

inline std::map<std::string, UtilityMatrix> load_utility(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail("cannot open '" + path + "'");
    return read_utility(in, path);
}

// ---------------------------------------------------------------------------
// Statistics

struct Histogram {
    std::vector<double> edges; // bins + 1 ascending edges
    std::vector<std::size_t> counts;

    static Histogram with_edges(double lo, double hi, std::size_t bins) {
        require(bins >= 1, "histogram needs at least one bin");
        if (!(hi > lo)) hi = lo + 1.0;
        Histogram h;
        h.edges.resize(bins + 1);
        for (std::size_t i = 0; i <= bins; ++i)
            h.edges[i] = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(bins);
        h.counts.assign(bins, 0);
        return h;
    }

    // Values outside the edges land in the first or last bin.
    void add(double x) {
        const std::size_t bins = counts.size();
        const double lo = edges.front();
        const double hi = edges.back();
        auto b = static_cast<std::ptrdiff_t>(std::floor((x - lo) / (hi - lo) * static_cast<double>(bins)));
        b = std::clamp<std::ptrdiff_t>(b, 0, static_cast<std::ptrdiff_t>(bins) - 1);
        ++counts[static_cast<std::size_t>(b)];
    }

    std::size_t total() const {
        std::size_t n = 0;
        for (auto c : counts) n += c;
        return n;
    }
};

struct Population {
    std::size_t count = 0;
    double mean = 0.0;
    Histogram histogram;
};

struct ScatterPoint {
    std::string source_id;
    std::string chosen_id;
    std::string rejected_id;
    double reward_gap = 0.0;  // R(chosen) - R(rejected)
    double logprob_gap = 0.0; // logp(chosen) - logp(rejected)
};

struct MethodStats {
    Method method = Method::cr_plus;
    std::size_t pairs = 0;
    Population chosen_reward;
    Population rejected_reward;
    Population chosen_logprob;
    Population rejected_logprob;
    std::vector<ScatterPoint> scatter;
};

struct StatsReport {
    std::vector<double> reward_edges;
    std::vector<double> logprob_edges;
    Population pool_reward;
    Population pool_logprob;
    std::vector<MethodStats> methods;
};

namespace detail {
inline Population population(const std::vector<double>& xs, const Histogram& shape) {
    Population p;
    p.histogram = shape;
    p.count = xs.size();
    double sum = 0.0;
    for (double x : xs) {
        p.histogram.add(x);
        sum += x;
    }
    p.mean = xs.empty() ? 0.0 : sum / static_cast<double>(xs.size());
    return p;
}
} // namespace detail

// Histograms of reward and log-likelihood for the whole pool and for the
// chosen/rejected sides of each method's pairs. Reward bins span [0,1];
// log-likelihood bins span the pool's range, so edges are identical across
// methods drawn from one pool.
inline StatsReport emit_stats(const PreferenceDataset& data, const std::vector<CandidateSet>& sets, std::size_t bins,
                              LogprobNorm norm = LogprobNorm::sum) {
    check_resolves(data, sets);
    std::vector<double> pool_r;
    std::vector<double> pool_lp;
    for (const auto& s : sets) {
        for (const auto& c : s.candidates) {
            pool_r.push_back(aggregate_reward(c));
            pool_lp.push_back(effective_logprob(c, norm));
        }
    }
    const double lp_lo = pool_lp.empty() ? -1.0 : *std::min_element(pool_lp.begin(), pool_lp.end());
    const double lp_hi = pool_lp.empty() ? 0.0 : *std::max_element(pool_lp.begin(), pool_lp.end());
    const auto r_shape = Histogram::with_edges(0.0, 1.0, bins);
    const auto lp_shape = Histogram::with_edges(lp_lo, lp_hi, bins);

    StatsReport report;
    report.reward_edges = r_shape.edges;
    report.logprob_edges = lp_shape.edges;
    report.pool_reward = detail::population(pool_r, r_shape);
    report.pool_logprob = detail::population(pool_lp, lp_shape);

    std::map<std::string, const CandidateSet*, std::less<>> by_id;
    for (const auto& s : sets) by_id[s.source_id] = &s;

    std::vector<Method> order;
    std::map<Method, std::vector<const PreferencePair*>> grouped;
    for (const auto& p : data.pairs) {
        if (!grouped.count(p.method)) order.push_back(p.method);
        grouped[p.method].push_back(&p);
    }
    for (Method m : order) {
        std::vector<double> cr, rr, cl, rl;
        MethodStats ms;
        ms.method = m;
        for (const auto* p : grouped[m]) {
            const auto* set = by_id.at(p->source_id);
            const auto& w = *set->find(p->chosen_id);
            const auto& l = *set->find(p->rejected_id);
            cr.push_back(aggregate_reward(w));
            rr.push_back(aggregate_reward(l));
            cl.push_back(effective_logprob(w, norm));
            rl.push_back(effective_logprob(l, norm));
            ms.scatter.push_back({p->source_id, p->chosen_id, p->rejected_id, cr.back() - rr.back(), cl.back() - rl.back()});
        }
        ms.pairs = grouped[m].size();
        ms.chosen_reward = detail::population(cr, r_shape);
        ms.rejected_reward = detail::population(rr, r_shape);
        ms.chosen_logprob = detail::population(cl, lp_shape);
        ms.rejected_logprob = detail::population(rl, lp_shape);
        report.methods.push_back(std::move(ms));
    }
    return report;
}

inline OrderedJson to_json(const Population& p) {
    OrderedJson j;
    j["count"] = p.count;
    j["mean"] = p.mean;
    j["counts"] = p.histogram.counts;
    return j;
}

inline OrderedJson to_json(const StatsReport& r) {
    OrderedJson j;
    j["reward_edges"] = r.reward_edges;
    j["logprob_edges"] = r.logprob_edges;
    j["pool"] = {{"reward", to_json(r.pool_reward)}, {"logprob", to_json(r.pool_logprob)}};
    j["methods"] = OrderedJson::array();
    for (const auto& m : r.methods) {
        OrderedJson mj;
        mj["method"] = std::string(to_string(m.method));
        mj["pairs"] = m.pairs;
        mj["chosen_reward"] = to_json(m.chosen_reward);
        mj["rejected_reward"] = to_json(m.rejected_reward);
        mj["chosen_logprob"] = to_json(m.chosen_logprob);
        mj["rejected_logprob"] = to_json(m.rejected_logprob);
        auto& sc = mj["scatter"] = OrderedJson::array();
        for (const auto& p : m.scatter) sc.push_back({p.reward_gap, p.logprob_gap});
        j["methods"].push_back(std::move(mj));
    }
    return j;
}

inline void write_scatter_csv(std::ostream& out, const StatsReport& r) {
    out << "method,source_id,chosen_id,rejected_id,reward_gap,logprob_gap\n";
    for (const auto& m : r.methods) {
        for (const auto& p : m.scatter) {
            out << to_string(m.method) << ',' << p.source_id << ',' << p.chosen_id << ',' << p.rejected_id << ','
                << OrderedJson(p.reward_gap).dump() << ',' << OrderedJson(p.logprob_gap).dump() << '\n';
        }
    }
}

} // namespace crpo::io
