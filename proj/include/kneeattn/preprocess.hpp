#pragma once

// Outlier cleaning, Savitzky-Golay smoothing, resampling and min-max scaling
// that turn a CellRecord into the model input matrix
//   rows = variables, columns = n_cy blocks of n_ts timesteps.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <spdlog/spdlog.h>

#include "kneeattn/cell.hpp"
#include "kneeattn/error.hpp"
#include "kneeattn/tensor.hpp"

namespace kneeattn {

// ---------------------------------------------------------------------------
// Robust cleaning

namespace detail {

inline double median_of(std::vector<double> v) {
    std::size_t n = v.size();
    std::nth_element(v.begin(), v.begin() + n / 2, v.end());
    double hi = v[n / 2];
    if (n % 2) return hi;
    double lo = *std::max_element(v.begin(), v.begin() + n / 2);
    return 0.5 * (lo + hi);
}

}  // namespace detail

/// Hampel filter. A point deviating from its window median by more than
/// k·1.4826·MAD is replaced by the straight line through its two nearest
/// retained neighbours (interpolation inside, extrapolation at the ends).
/// The window is shifted, not truncated, near the edges.
inline std::vector<double> clean_outliers(std::span<const double> series, std::size_t window = 11,
                                          double k = 6.0) {
    require(series.size() >= 4, "clean_outliers: series needs at least 4 points");
    require(window >= 3, "clean_outliers: window must be >= 3");
    const std::size_t n = series.size();
    const std::size_t w = std::min(window, n);
    std::vector<bool> outlier(n, false);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t lo = i >= w / 2 ? i - w / 2 : 0;
        lo = std::min(lo, n - w);
        std::vector<double> win(series.begin() + lo, series.begin() + lo + w);
        double med = detail::median_of(win);
        for (double& x : win) x = std::abs(x - med);
        double mad = detail::median_of(win);
        outlier[i] = std::abs(series[i] - med) > k * 1.4826 * mad;
    }
    std::vector<double> out(series.begin(), series.end());
    std::vector<std::size_t> kept;
    for (std::size_t i = 0; i < n; ++i)
        if (!outlier[i]) kept.push_back(i);
    if (kept.size() < 2) return out;
    for (std::size_t i = 0; i < n; ++i) {
        if (!outlier[i]) continue;
        // two retained indices closest to i (ties favour the left one)
        auto it = std::lower_bound(kept.begin(), kept.end(), i);
        std::size_t right = static_cast<std::size_t>(it - kept.begin());
        std::size_t left = right;  // kept[left-1] < i <= kept[right]
        std::size_t a, b;
        std::vector<std::size_t> pick;
        while (pick.size() < 2) {
            bool has_l = left > 0, has_r = right < kept.size();
            if (has_l && (!has_r || i - kept[left - 1] <= kept[right] - i))
                pick.push_back(kept[--left]);
            else
                pick.push_back(kept[right++]);
        }
        a = std::min(pick[0], pick[1]);
        b = std::max(pick[0], pick[1]);
        double slope = (series[b] - series[a]) / static_cast<double>(b - a);
        out[i] = series[a] + slope * (static_cast<double>(i) - static_cast<double>(a));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Savitzky-Golay

/// Least-squares weights that evaluate a degree-`order` fit over `window`
/// points at `offset` (0 = first point of the window).
inline std::vector<double> savgol_weights(std::size_t window, std::size_t order, std::size_t offset) {
    require(window % 2 == 1, "savitzky_golay: window must be odd");
    require(order < window, "savitzky_golay: order must be smaller than window");
    require(offset < window, "savitzky_golay: offset outside window");
    const int half = static_cast<int>(window / 2);
    Eigen::MatrixXd a(window, order + 1);
    for (std::size_t r = 0; r < window; ++r) {
        double u = static_cast<double>(static_cast<int>(r) - half);
        double p = 1.0;
        for (std::size_t c = 0; c <= order; ++c, p *= u) a(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = p;
    }
    Eigen::MatrixXd pinv = a.colPivHouseholderQr().solve(Eigen::MatrixXd::Identity(window, window));
    Eigen::RowVectorXd basis(order + 1);
    double u = static_cast<double>(static_cast<int>(offset) - half), p = 1.0;
    for (std::size_t c = 0; c <= order; ++c, p *= u) basis(static_cast<Eigen::Index>(c)) = p;
    Eigen::RowVectorXd w = basis * pinv;
    return {w.data(), w.data() + w.size()};
}

/// Interior points take the centre value of the local polynomial fit; the
/// first/last half-window points are evaluated on the first/last full window.
inline std::vector<double> savitzky_golay(std::span<const double> series, std::size_t window = 11,
                                          std::size_t order = 2) {
    require(window % 2 == 1, "savitzky_golay: window must be odd");
    require(order < window, "savitzky_golay: order must be smaller than window");
    require(series.size() >= window, "savitzky_golay: series shorter than window");
    const std::size_t n = series.size(), half = window / 2;
    std::vector<std::vector<double>> weights(window);
    for (std::size_t o = 0; o < window; ++o) weights[o] = savgol_weights(window, order, o);
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t start, offset;
        if (i < half) {
            start = 0;
            offset = i;
        } else if (i + half >= n) {
            start = n - window;
            offset = i - start;
        } else {
            start = i - half;
            offset = half;
        }
        double acc = 0.0;
        for (std::size_t j = 0; j < window; ++j) acc += weights[offset][j] * series[start + j];
        out[i] = acc;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Resampling

/// Linear interpolation of (xs, ys) at x; xs strictly increasing. Outside the
/// range the end values are held.
inline double interp_linear(std::span<const double> xs, std::span<const double> ys, double x) {
    if (x <= xs.front()) return ys.front();
    if (x >= xs.back()) return ys.back();
    auto it = std::upper_bound(xs.begin(), xs.end(), x);
    std::size_t j = static_cast<std::size_t>(it - xs.begin());
    double f = (x - xs[j - 1]) / (xs[j] - xs[j - 1]);
    return ys[j - 1] + f * (ys[j] - ys[j - 1]);
}

enum class Variant { combined, charging_only, discharging_only };

inline std::string to_string(Variant v) {
    switch (v) {
        case Variant::combined: return "combined";
        case Variant::charging_only: return "charging_only";
        case Variant::discharging_only: return "discharging_only";
    }
    return "combined";
}

inline Variant parse_variant(const std::string& s) {
    if (s == "combined") return Variant::combined;
    if (s == "charging_only") return Variant::charging_only;
    if (s == "discharging_only") return Variant::discharging_only;
    throw ConfigError("unknown dataset variant \"" + s + "\"");
}

/// Number of variables and timesteps per cycle of each variant.
struct VariantShape {
    std::size_t n_vars;
    std::size_t n_steps;
};

inline VariantShape variant_shape(Variant v) {
    switch (v) {
        case Variant::combined: return {5, 120};
        case Variant::charging_only: return {4, 40};
        case Variant::discharging_only: return {3, 1000};
    }
    return {5, 120};
}

struct PreprocessOptions {
    bool clean = true;
    bool smooth = true;
    std::size_t sg_window = 11;
    std::size_t sg_order = 2;
    double step_minutes = 0.5;      // combined grid spacing
    double voltage_high = 3.5;      // discharge grid start (V)
    double voltage_low = 2.0;       // discharge grid end (V)
};

/// Un-normalised model input: rows = variables, columns = n_cy·n_ts.
struct RawInput {
    Variant variant = Variant::combined;
    std::size_t n_vars = 0, n_cycles = 0, n_steps = 0;
    Tensor data;
    std::vector<std::size_t> active;  // per cycle: leading columns holding samples; the rest is padding

    bool is_padding(std::size_t col) const { return col % n_steps >= active.at(col / n_steps); }
};

namespace detail {

inline CycleTrace denoise(const CycleTrace& c, const PreprocessOptions& opt) {
    CycleTrace out = c;
    auto fix = [&](std::vector<double>& s) {
        if (opt.clean && s.size() >= 4) s = clean_outliers(s);
        if (opt.smooth && s.size() >= opt.sg_window) s = savitzky_golay(s, opt.sg_window, opt.sg_order);
    };
    // Current is piecewise constant by protocol and is left untouched.
    fix(out.V);
    fix(out.T);
    fix(out.Qc);
    fix(out.Qd);
    return out;
}

/// [first, last] sample indices where pred(I) holds; nullopt-like {1, 0} if none.
template <class Pred>
std::pair<std::size_t, std::size_t> segment(const CycleTrace& c, Pred pred) {
    std::size_t first = c.size(), last = 0;
    for (std::size_t i = 0; i < c.size(); ++i)
        if (pred(c.I[i])) {
            first = std::min(first, i);
            last = i;
        }
    return {first, last};
}

/// Returns the number of grid columns inside the cycle.
inline std::size_t fill_combined(const CycleTrace& c, std::size_t n_steps, double step, Tensor& out, std::size_t col0,
                                 const std::string& cell, std::size_t cycle) {
    const double t0 = c.t.front();
    std::vector<double> rel(c.t.size());
    for (std::size_t i = 0; i < rel.size(); ++i) rel[i] = c.t[i] - t0;
    const double duration = rel.back();
    if (duration > step * static_cast<double>(n_steps))
        spdlog::warn("cell {} cycle {}: {:.2f} min cycle truncated to {:.1f} min", cell, cycle, duration,
                     step * static_cast<double>(n_steps));
    const std::vector<double>* series[5] = {&c.V, &c.I, &c.T, &c.Qc, &c.Qd};
    std::size_t active = 0;
    for (std::size_t j = 0; j < n_steps; ++j) {
        double g = step * static_cast<double>(j);
        bool inside = j == 0 || g < duration;
        active += inside;
        for (std::size_t v = 0; v < 5; ++v) out(v, col0 + j) = inside ? interp_linear(rel, *series[v], g) : 0.0;
    }
    return active;
}

inline void fill_charging(const CycleTrace& c, std::size_t n_steps, Tensor& out, std::size_t col0,
                          const std::string& cell, std::size_t cycle) {
    auto [a, b] = segment(c, [](double i) { return i > 1e-9; });
    if (a >= b) throw IngestError("cell " + cell + " cycle " + std::to_string(cycle) + ": no charge segment");
    std::span<const double> t(c.t.data() + a, b - a + 1);
    const std::vector<double>* series[4] = {&c.V, &c.I, &c.T, &c.Qc};
    for (std::size_t j = 0; j < n_steps; ++j) {
        double g = t.front() + (t.back() - t.front()) * static_cast<double>(j) / static_cast<double>(n_steps - 1);
        for (std::size_t v = 0; v < 4; ++v)
            out(v, col0 + j) = interp_linear(t, std::span<const double>(series[v]->data() + a, b - a + 1), g);
    }
}

inline void fill_discharging(const CycleTrace& c, std::size_t n_steps, const PreprocessOptions& opt, Tensor& out,
                             std::size_t col0, const std::string& cell, std::size_t cycle) {
    auto [a, b] = segment(c, [](double i) { return i < -1e-9; });
    if (a >= b) throw IngestError("cell " + cell + " cycle " + std::to_string(cycle) + ": no discharge segment");
    // Re-index by voltage: ascending V with duplicate voltages dropped.
    std::vector<std::size_t> idx(b - a + 1);
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = a + i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return c.V[x] < c.V[y]; });
    std::vector<double> volts, charge, temp;
    for (std::size_t i : idx) {
        if (!volts.empty() && c.V[i] <= volts.back()) continue;
        volts.push_back(c.V[i]);
        charge.push_back(c.Qd[i]);
        temp.push_back(c.T[i]);
    }
    if (volts.size() < 2) throw IngestError("cell " + cell + " cycle " + std::to_string(cycle) + ": degenerate discharge voltage span");
    std::vector<double> grid(n_steps), q(n_steps);
    for (std::size_t j = 0; j < n_steps; ++j) {
        grid[j] = opt.voltage_high -
                  (opt.voltage_high - opt.voltage_low) * static_cast<double>(j) / static_cast<double>(n_steps - 1);
        q[j] = interp_linear(volts, charge, grid[j]);
        out(1, col0 + j) = q[j];
        out(2, col0 + j) = interp_linear(volts, temp, grid[j]);
    }
    if (n_steps >= opt.sg_window) q = savitzky_golay(q, opt.sg_window, opt.sg_order);
    for (std::size_t j = 0; j < n_steps; ++j) {
        std::size_t lo = j ? j - 1 : 0, hi = std::min(j + 1, n_steps - 1);
        out(0, col0 + j) = (q[hi] - q[lo]) / (grid[hi] - grid[lo]);
    }
}

}  // namespace detail

/// Builds the un-normalised input matrix from the first `n_cycles` cycles.
inline RawInput build_raw_input(const CellRecord& record, Variant variant, std::size_t n_cycles,
                                const PreprocessOptions& opt = {}) {
    require(n_cycles >= 1, "build_input: n_cy must be >= 1");
    if (record.cycles.size() < n_cycles)
        throw IngestError("cell " + record.cell_id + " has " + std::to_string(record.cycles.size()) +
                          " cycles, fewer than n_cy = " + std::to_string(n_cycles));
    VariantShape vs = variant_shape(variant);
    RawInput raw{variant, vs.n_vars, n_cycles, vs.n_steps, Tensor({vs.n_vars, n_cycles * vs.n_steps}),
                 std::vector<std::size_t>(n_cycles, vs.n_steps)};
    for (std::size_t k = 0; k < n_cycles; ++k) {
        CycleTrace c = detail::denoise(record.cycles[k], opt);
        std::size_t col0 = k * vs.n_steps;
        switch (variant) {
            case Variant::combined:
                raw.active[k] =
                    detail::fill_combined(c, vs.n_steps, opt.step_minutes, raw.data, col0, record.cell_id, k + 1);
                break;
            case Variant::charging_only:
                detail::fill_charging(c, vs.n_steps, raw.data, col0, record.cell_id, k + 1);
                break;
            case Variant::discharging_only:
                detail::fill_discharging(c, vs.n_steps, opt, raw.data, col0, record.cell_id, k + 1);
                break;
        }
    }
    return raw;
}

/// Normalised model input; values in [0, 1].
struct InputTensor {
    Variant variant = Variant::combined;
    std::size_t n_vars = 0, n_cycles = 0, n_steps = 0;
    Tensor data;                    // n_vars × (n_cycles·n_steps)
    std::vector<double> var_min, var_max;
    std::vector<std::size_t> active;  // per cycle, as in RawInput
};

/// Per-variable min-max scaler fitted on training inputs only.
class MinMaxNormalizer {
public:
    MinMaxNormalizer() = default;
    MinMaxNormalizer(std::vector<double> mins, std::vector<double> maxs)
        : min_(std::move(mins)), max_(std::move(maxs)) {
        require(min_.size() == max_.size(), "normalizer: min/max length mismatch");
    }

    /// `values[v]` holds every training value of variable v.
    static MinMaxNormalizer fit(const std::vector<std::vector<double>>& values) {
        std::vector<double> lo, hi;
        for (const auto& col : values) {
            require(!col.empty(), "normalizer: variable without values");
            auto [mn, mx] = std::minmax_element(col.begin(), col.end());
            lo.push_back(*mn);
            hi.push_back(*mx);
        }
        return {std::move(lo), std::move(hi)};
    }

    static MinMaxNormalizer fit(std::span<const RawInput* const> train) {
        require(!train.empty(), "normalizer: empty training set");
        std::size_t nv = train.front()->n_vars;
        std::vector<double> lo(nv, INFINITY), hi(nv, -INFINITY);
        for (const RawInput* r : train) {
            require(r->n_vars == nv, "normalizer: variable count differs between inputs");
            std::size_t cols = r->data.cols();
            for (std::size_t j = 0; j < cols; ++j) {
                if (r->is_padding(j)) continue;
                for (std::size_t v = 0; v < nv; ++v) {
                    lo[v] = std::min(lo[v], r->data(v, j));
                    hi[v] = std::max(hi[v], r->data(v, j));
                }
            }
        }
        return {std::move(lo), std::move(hi)};
    }

    /// (x − min)/(max − min) clamped to [0, 1]; constant variables map to 0.
    /// Statistics come from measured columns only; padded columns stay 0.
    double apply(std::size_t var, double x) const {
        double span = max_.at(var) - min_.at(var);
        if (!(span > 0.0)) return 0.0;
        return std::clamp((x - min_[var]) / span, 0.0, 1.0);
    }

    InputTensor apply(const RawInput& raw) const {
        require(raw.n_vars == min_.size(), "normalizer: variable count mismatch");
        InputTensor out{raw.variant, raw.n_vars, raw.n_cycles, raw.n_steps, raw.data, min_, max_, raw.active};
        std::size_t cols = raw.data.cols();
        for (std::size_t j = 0; j < cols; ++j) {
            bool pad = raw.is_padding(j);
            for (std::size_t v = 0; v < raw.n_vars; ++v) out.data(v, j) = pad ? 0.0 : apply(v, raw.data(v, j));
        }
        return out;
    }

    const std::vector<double>& mins() const noexcept { return min_; }
    const std::vector<double>& maxs() const noexcept { return max_; }

private:
    std::vector<double> min_, max_;
};

inline InputTensor build_input(const CellRecord& record, Variant variant, std::size_t n_cycles,
                               const MinMaxNormalizer& normalizer, const PreprocessOptions& opt = {}) {
    return normalizer.apply(build_raw_input(record, variant, n_cycles, opt));
}

}  // namespace kneeattn
