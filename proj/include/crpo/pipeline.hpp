#pragma once
// Selection over a whole candidate pool. Sets are processed by a worker pool;
// each set draws from its own generator seeded by (seed, set index) and
// results are assembled in input order, so output does not depend on the
// number of workers.

#include <algorithm>
#include <atomic>
#include <exception>
#include <map>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "crpo/selectors.hpp"

namespace crpo {

struct SelectionRun {
    PreferenceDataset data;
    std::size_t skipped = 0;
};

inline SelectionRun select_dataset(const std::vector<CandidateSet>& sets, const SelectionConfig& config,
                                   const std::map<std::string, UtilityMatrix>* utilities = nullptr,
                                   unsigned threads = 1) {
    config.validate();
    std::vector<SelectionOutcome> outcomes(sets.size());
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;

    auto work = [&] {
        for (std::size_t i = next++; i < sets.size(); i = next++) {
            try {
                const UtilityMatrix* u = nullptr;
                if (utilities) {
                    const auto it = utilities->find(sets[i].source_id);
                    if (it == utilities->end()) fail("no utility matrix for source '" + sets[i].source_id + "'");
                    u = &it->second;
                }
                Rng rng(derive_seed(config.seed, i));
                outcomes[i] = select(sets[i], config, rng, u);
            } catch (...) {
                std::lock_guard lock(error_mu);
                if (!error) error = std::current_exception();
                next = sets.size();
            }
        }
    };

    const unsigned n = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(sets.size())));
    if (n <= 1) {
        work();
    } else {
        std::vector<std::jthread> pool;
        for (unsigned t = 0; t < n; ++t) pool.emplace_back(work);
    }
    if (error) std::rethrow_exception(error);

    SelectionRun run;
    run.data.provenance.config = config;
    for (std::size_t i = 0; i < sets.size(); ++i) {
        auto& out = outcomes[i];
        if (out.pairs.empty() && !out.sft_target) ++run.skipped;
        for (auto& p : out.pairs) run.data.pairs.push_back(std::move(p));
        if (out.sft_target) run.data.sft_targets.push_back({sets[i].source_id, *out.sft_target});
    }
    return run;
}

} // namespace crpo
