#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace ssmcond {

// ─── Errors ──────────────────────────────────────────────────────────────────

class Error : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
  public:
    using Error::Error;
};

class NonFiniteError : public Error {
  public:
    using Error::Error;
};

namespace detail {

template <class... Args> std::string concat(const Args &...args) {
    std::ostringstream os;
    (os << ... << args);
    return os.str();
}

} // namespace detail

// ─── Allocation audit ────────────────────────────────────────────────────────
//
// Every Tensor buffer is allocated through CountingAllocator, so the number of
// live activation elements on the current thread is always known. Memory
// claims are checked against these counts rather than OS RSS.

namespace audit {

struct Counters {
    std::int64_t live = 0;
    std::int64_t peak = 0;
    std::int64_t allocated = 0; // cumulative
};

inline Counters &counters() {
    thread_local Counters c;
    return c;
}

template <class T> struct CountingAllocator {
    using value_type = T;

    CountingAllocator() noexcept = default;
    template <class U> CountingAllocator(const CountingAllocator<U> &) noexcept {}

    T *allocate(std::size_t n) {
        auto &c = counters();
        c.live += static_cast<std::int64_t>(n);
        c.allocated += static_cast<std::int64_t>(n);
        c.peak = std::max(c.peak, c.live);
        return std::allocator<T>{}.allocate(n);
    }

    void deallocate(T *p, std::size_t n) noexcept {
        counters().live -= static_cast<std::int64_t>(n);
        std::allocator<T>{}.deallocate(p, n);
    }

    template <class U> bool operator==(const CountingAllocator<U> &) const noexcept { return true; }
};

// Measures the peak number of elements allocated above the level that was live
// when the scope opened.
class Scope {
  public:
    Scope() : baseline_(counters().live), saved_peak_(counters().peak), start_alloc_(counters().allocated) {
        counters().peak = baseline_;
    }
    ~Scope() { counters().peak = std::max(saved_peak_, counters().peak); }

    Scope(const Scope &) = delete;
    Scope &operator=(const Scope &) = delete;

    std::int64_t peak_delta() const { return counters().peak - baseline_; }
    std::int64_t allocated() const { return counters().allocated - start_alloc_; }

  private:
    std::int64_t baseline_;
    std::int64_t saved_peak_;
    std::int64_t start_alloc_;
};

} // namespace audit

// ─── Tensor ──────────────────────────────────────────────────────────────────

// Rank-2, time-major, row-major array of doubles.
class Tensor {
  public:
    using Storage = std::vector<double, audit::CountingAllocator<double>>;

    Tensor() = default;
    Tensor(std::size_t rows, std::size_t cols, double fill = 0.0) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        const std::size_t r = rows.size();
        const std::size_t c = r == 0 ? 0 : rows.begin()->size();
        Tensor t(r, c);
        std::size_t i = 0;
        for (const auto &row : rows) {
            if (row.size() != c)
                throw ShapeError("Tensor::from_rows: ragged rows");
            std::copy(row.begin(), row.end(), t.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
            ++i;
        }
        return t;
    }

    static Tensor row_vector(std::span<const double> values) {
        Tensor t(1, values.size());
        std::copy(values.begin(), values.end(), t.data_.begin());
        return t;
    }

    static Tensor column_vector(std::span<const double> values) {
        Tensor t(values.size(), 1);
        std::copy(values.begin(), values.end(), t.data_.begin());
        return t;
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double &operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    double &operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> values() { return {data_.data(), data_.size()}; }
    std::span<const double> values() const { return {data_.data(), data_.size()}; }

    bool same_shape(const Tensor &o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

    // Exact (bitwise for non-NaN) comparison.
    friend bool operator==(const Tensor &a, const Tensor &b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && std::equal(a.data_.begin(), a.data_.end(), b.data_.begin());
    }

    std::string shape_str() const { return detail::concat(rows_, "x", cols_); }

  private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    Storage data_;
};

inline double max_abs_diff(const Tensor &a, const Tensor &b) {
    if (!a.same_shape(b))
        throw ShapeError(detail::concat("max_abs_diff: ", a.shape_str(), " vs ", b.shape_str()));
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline void require_finite(const Tensor &t, const char *what) {
    for (std::size_t i = 0; i < t.size(); ++i)
        if (!std::isfinite(t[i]))
            throw NonFiniteError(detail::concat(what, ": non-finite value at row ", i / std::max<std::size_t>(t.cols(), 1),
                                                ", col ", i % std::max<std::size_t>(t.cols(), 1)));
}

} // namespace ssmcond
