#pragma once
// Tabular softmax policies over a finite output space: one row of logits per
// source, one column per enumerable output.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "crpo/error.hpp"

namespace crpo {

inline double log_sum_exp(std::span<const double> x) {
    if (x.empty()) return -std::numeric_limits<double>::infinity();
    const double m = *std::max_element(x.begin(), x.end());
    if (!std::isfinite(m)) return m;
    double s = 0.0;
    for (double v : x) s += std::exp(v - m);
    return m + std::log(s);
}

inline std::vector<double> log_softmax(std::span<const double> x) {
    const double lse = log_sum_exp(x);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - lse;
    return out;
}

inline std::vector<double> softmax(std::span<const double> x) {
    auto out = log_softmax(x);
    for (double& v : out) v = std::exp(v);
    return out;
}

// Row-major rows x cols matrix of reals.
class Table {
public:
    Table() = default;
    Table(std::size_t rows, std::size_t cols, double fill = 0.0)
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    bool operator==(const Table&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

// A single categorical distribution held as log-probabilities.
class CategoricalPolicy {
public:
    explicit CategoricalPolicy(std::span<const double> logits) : logp_(log_softmax(logits)) {}

    double log_prob(std::size_t output) const {
        require(output < logp_.size(), "output index out of range");
        return logp_[output];
    }
    std::size_t size() const noexcept { return logp_.size(); }
    std::span<const double> log_probs() const noexcept { return logp_; }

private:
    std::vector<double> logp_;
};

class TabularPolicy {
public:
    TabularPolicy() = default;
    explicit TabularPolicy(Table logits) : logits_(std::move(logits)) {
        for (double v : logits_.data()) require(std::isfinite(v), "policy logits must be finite");
    }

    std::size_t n_sources() const noexcept { return logits_.rows(); }
    std::size_t n_outputs() const noexcept { return logits_.cols(); }

    const Table& logits() const noexcept { return logits_; }
    Table& logits() noexcept { return logits_; }

    CategoricalPolicy row(std::size_t source) const {
        require(source < n_sources(), "source index out of range");
        return CategoricalPolicy(logits_.row(source));
    }

    double log_prob(std::size_t source, std::size_t output) const { return row(source).log_prob(output); }

    std::vector<double> probs(std::size_t source) const {
        require(source < n_sources(), "source index out of range");
        return softmax(logits_.row(source));
    }

private:
    Table logits_;
};

} // namespace crpo
