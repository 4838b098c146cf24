#pragma once
// Command-line front end:
//
//   crpo select  --method <tag> --in <candidates> --out <pairs> [options]
//   crpo stats   --pairs <pairs> --candidates <candidates> --out <report>
//   crpo losses  check-grad --seed N
//   crpo toy     compare --methods a,b,c --seeds 20 --out <report>
//   crpo toy     sample --out <candidates>
//   crpo utility matrix --in <candidates> --out <matrix>
//
// Exit codes: 0 success, 2 invalid input or usage, 1 anything else.

#include <cstdint>
#include <filesystem>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "crpo/gradcheck.hpp"
#include "crpo/io.hpp"
#include "crpo/pipeline.hpp"
#include "crpo/stat_tests.hpp"
#include "crpo/toylab.hpp"

namespace crpo::cli {

namespace detail {

// Writes via a buffer so a failed run leaves no partial file behind.
inline void write_text(const std::string& path, const std::string& text) {
    auto out = io::open_output(path);
    out << text;
    if (!out.flush()) fail("failed writing '" + path + "'");
}

inline std::string num(double x) { return io::OrderedJson(x).dump(); }

inline std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream in(s);
    while (std::getline(in, item, ',')) {
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

struct SelectArgs {
    std::string method;
    std::string in;
    std::string out;
    std::string extra;
    std::string utility;
    std::string gate = "off";
    std::string logprob_norm = "sum";
    SelectionConfig config;
    unsigned threads = 1;
};

struct StatsArgs {
    std::string pairs;
    std::string candidates;
    std::string extra;
    std::string out;
    std::string csv;
    std::string logprob_norm = "sum";
    std::size_t bins = 20;
};

struct ToyArgs {
    std::string methods = "cr_plus,cr_times,minmax_r,random_pair";
    std::size_t seeds = 20;
    std::uint64_t first_seed = 0;
    std::uint64_t seed = 0;
    std::string out;
    ToyWorldConfig world;
    ComparisonConfig compare;
};

inline io::CandidateFile load_pool(const std::string& in, const std::string& extra) {
    auto primary = io::load_candidates(in);
    if (extra.empty()) return primary;
    return io::merge_candidate_sources(primary, io::load_candidates(extra, {.require_logprob = false}));
}

inline int run_select(SelectArgs& a, std::ostream& out) {
    auto& c = a.config;
    c.method = parse_method(a.method);
    c.gate_mode = parse_gate_mode(a.gate);
    c.logprob_norm = parse_logprob_norm(a.logprob_norm);
    c.validate();

    const auto pool = load_pool(a.in, a.extra);
    std::map<std::string, UtilityMatrix> utilities;
    if (!a.utility.empty()) utilities = io::load_utility(a.utility);
    auto run = select_dataset(pool.sets, c, a.utility.empty() ? nullptr : &utilities, a.threads);

    std::ostringstream pairs;
    io::write_pairs(pairs, run.data);
    auto prov = io::to_json(Provenance{c, io::sha256_hex(io::read_file(a.in))});
    if (!a.extra.empty()) prov["extra_sha256"] = io::sha256_hex(io::read_file(a.extra));
    write_text(a.out, pairs.str());
    write_text(io::provenance_path(a.out), prov.dump(2) + "\n");

    out << to_string(c.method) << ": " << run.data.pairs.size() << " pairs, " << run.data.sft_targets.size()
        << " sft targets, " << run.skipped << " of " << pool.sets.size() << " sources without output\n";
    return 0;
}

// When the pair file has a provenance sidecar, the candidate files must be
// the ones it was produced from.
inline void check_digest(const StatsArgs& a) {
    const auto side = io::provenance_path(a.pairs);
    if (!std::filesystem::exists(side)) return;
    const auto prov = io::Json::parse(io::read_file(side));
    if (prov.value("candidates_sha256", "") != io::sha256_hex(io::read_file(a.candidates)))
        fail("'" + a.candidates + "' is not the candidate file '" + a.pairs + "' was selected from (digest mismatch)");
    const bool has_extra = prov.contains("extra_sha256");
    if (has_extra != !a.extra.empty())
        fail(has_extra ? "pairs were selected from a merged pool; pass the same --extra file"
                       : "pairs were selected without an extra pool; drop --extra");
    if (has_extra && prov["extra_sha256"] != io::sha256_hex(io::read_file(a.extra)))
        fail("'" + a.extra + "' is not the extra pool '" + a.pairs + "' was selected from (digest mismatch)");
}

inline int run_stats(const StatsArgs& a, std::ostream& out) {
    require(a.bins >= 1, "--bins must be >= 1");
    check_digest(a);
    const auto pool = load_pool(a.candidates, a.extra);
    const auto data = io::load_pairs(a.pairs);
    const auto report = io::emit_stats(data, pool.sets, a.bins, parse_logprob_norm(a.logprob_norm));
    write_text(a.out, io::to_json(report).dump(2) + "\n");
    if (!a.csv.empty()) {
        std::ostringstream csv;
        io::write_scatter_csv(csv, report);
        write_text(a.csv, csv.str());
    }
    for (const auto& m : report.methods) {
        out << to_string(m.method) << ": " << m.pairs << " pairs, mean reward chosen "
            << num(m.chosen_reward.mean) << " rejected " << num(m.rejected_reward.mean) << ", mean logprob chosen "
            << num(m.chosen_logprob.mean) << " rejected " << num(m.rejected_logprob.mean) << "\n";
    }
    return 0;
}

inline int run_check_grad(std::uint64_t seed, std::size_t instances, std::ostream& out, std::ostream& err) {
    GradCheckConfig cfg;
    cfg.instances = instances;
    const auto res = check_gradients(seed, cfg);
    out << "max relative error " << num(res.max_rel_error) << " over " << res.instances << " instances ("
        << res.entries << " entries)\n";
    if (res.max_rel_error < 1e-4) return 0;
    err << "error: gradient check failed (tolerance 1e-4)\n";
    return 1;
}

inline io::OrderedJson to_json(const ComparisonReport& r, const ToyWorldConfig& w, const ComparisonConfig& c) {
    io::OrderedJson j;
    j["world"] = {{"seed", w.seed},         {"sources", w.n_sources}, {"outputs", w.outputs},
                  {"logit_scale", w.logit_scale}, {"rho", w.rho},      {"direction", w.direction}};
    j["sampling"] = {{"k", c.k}, {"temperature", c.temperature}, {"top_p", c.top_p}};
    j["selection"] = io::to_json(c.selection);
    j["selection"].erase("method");
    j["selection"].erase("seed");
    j["trainer"] = {{"objective", c.trainer.objective.kind == Objective::dpo ? "dpo" : "cpo"},
                    {"beta", c.trainer.objective.beta},
                    {"sft_coef", c.trainer.objective.sft_coef},
                    {"lr", c.trainer.lr},
                    {"steps", c.trainer.steps}};
    j["seeds"] = r.seeds;
    j["reference_reward"] = r.reference_reward;
    auto& methods = j["methods"] = io::OrderedJson::array();
    for (const auto& m : r.methods) {
        io::OrderedJson mj;
        mj["method"] = std::string(to_string(m.method));
        mj["mean_gain"] = m.mean_gain;
        mj["stderr_gain"] = m.stderr_gain;
        mj["gains"] = m.gains;
        mj["pair_counts"] = m.pair_counts;
        methods.push_back(std::move(mj));
    }
    j["win_rate"] = r.win_rate;
    // One-sided paired t-tests, H1: gain(a) > gain(b).
    auto& tests = j["paired_tests"] = io::OrderedJson::array();
    if (r.seeds.size() >= 2) {
        for (const auto& a : r.methods) {
            for (const auto& b : r.methods) {
                if (&a == &b) continue;
                const auto t = stats::paired_t_test(a.gains, b.gains);
                tests.push_back({{"a", std::string(to_string(a.method))},
                                 {"b", std::string(to_string(b.method))},
                                 {"mean_diff", t.mean_diff},
                                 {"t", std::isfinite(t.t) ? io::OrderedJson(t.t) : io::OrderedJson(nullptr)},
                                 {"p_greater", t.p_greater}});
            }
        }
    }
    return j;
}

inline int run_toy_compare(ToyArgs& a, std::ostream& out) {
    require(a.seeds >= 1, "--seeds must be >= 1");
    std::vector<Method> methods;
    for (const auto& tag : split_list(a.methods)) methods.push_back(parse_method(tag));
    std::vector<std::uint64_t> seeds;
    for (std::size_t i = 0; i < a.seeds; ++i) seeds.push_back(a.first_seed + i);
    const auto world = make_world(a.world);
    const auto report = run_comparison(world, methods, seeds, a.compare);
    write_text(a.out, to_json(report, a.world, a.compare).dump(2) + "\n");
    for (const auto& m : report.methods) {
        out << to_string(m.method) << ": mean gain " << num(m.mean_gain) << " (stderr " << num(m.stderr_gain)
            << ")\n";
    }
    return 0;
}

inline int run_toy_sample(ToyArgs& a, std::ostream& out) {
    const auto world = make_world(a.world);
    io::CandidateFile file;
    file.header.reference_policy = "toy-world-" + std::to_string(a.world.seed);
    file.sets = sample_pools(world, a.seed, a.compare);
    std::ostringstream text;
    io::write_candidates(text, file);
    write_text(a.out, text.str());
    out << "wrote " << file.sets.size() << " sources x " << a.compare.k << " candidates\n";
    return 0;
}

inline int run_utility(const std::string& in, const std::string& out_path, const ChrfParams& params,
                       std::ostream& out) {
    require(params.max_order >= 1, "--max-order must be >= 1");
    require(params.beta > 0.0 && std::isfinite(params.beta), "--chrf-beta must be finite and > 0");
    const auto pool = io::load_candidates(in, {.require_logprob = false});
    std::vector<io::SourceUtility> mats;
    for (const auto& set : pool.sets) mats.push_back({set.source_id, builtin_utility_matrix(set, params)});
    std::ostringstream text;
    io::write_utility(text, mats);
    write_text(out_path, text.str());
    out << "wrote " << mats.size() << " utility matrices\n";
    return 0;
}

inline void add_world_options(CLI::App* cmd, ToyArgs& a) {
    cmd->add_option("--world-seed", a.world.seed, "Seed of the toy world")->capture_default_str();
    cmd->add_option("--sources", a.world.n_sources, "Number of sources")->capture_default_str();
    cmd->add_option("--outputs", a.world.outputs, "Outputs per source (M)")->capture_default_str();
    cmd->add_option("--rho", a.world.rho, "Weight of reference likelihood in the reward")->capture_default_str();
    cmd->add_option("--logit-scale", a.world.logit_scale, "Std. dev. of reference logits")->capture_default_str();
    cmd->add_option("--direction", a.world.direction, "Language direction tag")->capture_default_str();
    cmd->add_option("--k", a.compare.k, "Candidates per source")->capture_default_str();
    cmd->add_option("--temperature", a.compare.temperature, "Sampling temperature")->capture_default_str();
    cmd->add_option("--top-p", a.compare.top_p, "Nucleus mass")->capture_default_str();
}

} // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Confidence-reward preference data selection and toy experiments", "crpo"};
    app.require_subcommand(1);

    detail::SelectArgs sel;
    auto* select = app.add_subcommand("select", "Select preference pairs from a candidate pool");
    select->add_option("--method", sel.method, "Selection method: " + method_list())->required();
    select->add_option("--in", sel.in, "Candidate JSONL file")->required();
    select->add_option("--out", sel.out, "Output pair JSONL file")->required();
    select->add_option("--extra", sel.extra, "Extra candidate pool to merge (same reference policy)");
    select->add_option("--k-trust", sel.config.k_trust, "Trust weight of CR+")->capture_default_str();
    select->add_option("--beta", sel.config.beta, "RSO temperature")->capture_default_str();
    select->add_option("--eta-out", sel.config.eta.out_of_english, "RS-DPO threshold, out of English")
        ->capture_default_str();
    select->add_option("--eta-in", sel.config.eta.into_english, "RS-DPO threshold, into English")
        ->capture_default_str();
    select->add_option("--gate", sel.gate, "Confidence gate: off, log_space, probability")->capture_default_str();
    select->add_option("--epsilon", sel.config.epsilon, "Gate tolerance")->capture_default_str();
    select->add_option("--rso-samples", sel.config.rso_samples, "RSO sub-sample size")->capture_default_str();
    select->add_option("--top-n", sel.config.top_n, "Top-scores pool size")->capture_default_str();
    select->add_option("--seed", sel.config.seed, "Random seed")->capture_default_str();
    select->add_option("--logprob-norm", sel.logprob_norm, "sum or per_token")->capture_default_str();
    select->add_option("--utility", sel.utility, "Utility matrix JSONL for MBR methods");
    select->add_option("--threads", sel.threads, "Worker threads")->capture_default_str();

    detail::StatsArgs st;
    auto* stats = app.add_subcommand("stats", "Reward and likelihood statistics of selected pairs");
    stats->add_option("--pairs", st.pairs, "Pair JSONL file")->required();
    stats->add_option("--candidates", st.candidates, "Candidate JSONL file the pairs came from")->required();
    stats->add_option("--extra", st.extra, "Extra candidate pool merged at selection time");
    stats->add_option("--out", st.out, "Output JSON report")->required();
    stats->add_option("--csv", st.csv, "Optional per-pair scatter CSV");
    stats->add_option("--bins", st.bins, "Histogram bins")->capture_default_str();
    stats->add_option("--logprob-norm", st.logprob_norm, "sum or per_token")->capture_default_str();

    std::uint64_t grad_seed = 0;
    std::size_t grad_instances = 100;
    auto* losses = app.add_subcommand("losses", "Loss utilities");
    losses->require_subcommand(1);
    auto* check_grad = losses->add_subcommand("check-grad", "Finite-difference check of loss gradients");
    check_grad->add_option("--seed", grad_seed, "Random seed")->capture_default_str();
    check_grad->add_option("--instances", grad_instances, "Random instances")->capture_default_str();

    detail::ToyArgs toy_args;
    auto* toy = app.add_subcommand("toy", "Tabular toy experiments");
    toy->require_subcommand(1);
    auto* compare = toy->add_subcommand("compare", "Compare selection methods by expected-reward gain");
    compare->add_option("--methods", toy_args.methods, "Comma-separated methods")->capture_default_str();
    compare->add_option("--seeds", toy_args.seeds, "Number of seeds")->capture_default_str();
    compare->add_option("--first-seed", toy_args.first_seed, "First seed")->capture_default_str();
    compare->add_option("--out", toy_args.out, "Output JSON report")->required();
    detail::add_world_options(compare, toy_args);
    compare->add_option("--k-trust", toy_args.compare.selection.k_trust, "Trust weight of CR+")->capture_default_str();
    compare->add_option("--lr", toy_args.compare.trainer.lr, "Learning rate")->capture_default_str();
    compare->add_option("--steps", toy_args.compare.trainer.steps, "Gradient steps")->capture_default_str();
    compare->add_option("--sft-coef", toy_args.compare.trainer.objective.sft_coef, "SFT term weight")
        ->capture_default_str();
    compare->add_option("--dpo-beta", toy_args.compare.trainer.objective.beta, "DPO beta")->capture_default_str();
    auto* sample = toy->add_subcommand("sample", "Write a sampled toy candidate pool");
    sample->add_option("--out", toy_args.out, "Output candidate JSONL file")->required();
    sample->add_option("--seed", toy_args.seed, "Sampling seed")->capture_default_str();
    detail::add_world_options(sample, toy_args);

    std::string util_in;
    std::string util_out;
    ChrfParams chrf;
    auto* utility = app.add_subcommand("utility", "Pairwise utility matrices");
    utility->require_subcommand(1);
    auto* matrix = utility->add_subcommand("matrix", "Character n-gram F-score between all candidate pairs");
    matrix->add_option("--in", util_in, "Candidate JSONL file")->required();
    matrix->add_option("--out", util_out, "Output utility JSONL file")->required();
    matrix->add_option("--max-order", chrf.max_order, "Largest n-gram order")->capture_default_str();
    matrix->add_option("--chrf-beta", chrf.beta, "Recall weight")->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*select) return detail::run_select(sel, out);
        if (*stats) return detail::run_stats(st, out);
        if (*check_grad) return detail::run_check_grad(grad_seed, grad_instances, out, err);
        if (*compare) return detail::run_toy_compare(toy_args, out);
        if (*sample) return detail::run_toy_sample(toy_args, out);
        if (*matrix) return detail::run_utility(util_in, util_out, chrf, out);
        err << "error: no command\n";
        return 2;
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return 1;
    }
}

} // namespace crpo::cli
