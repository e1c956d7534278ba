#pragma once

// Knee-onset labels from the double Bacon-Watts capacity-fade model
//
//   Q(c) = a0 + a1 (c − c_ko) + a2 (c − c_ko) tanh((c − c_ko)/γ)
//             + a3 (c − c_2nd) tanh((c − c_2nd)/γ) + noise
//
// With γ fixed the model is linear in a0..a3, so the fit profiles the
// coefficients out by least squares and searches only over the breakpoints.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "kneeattn/cell.hpp"
#include "kneeattn/error.hpp"
#include "kneeattn/io.hpp"
#include "kneeattn/preprocess.hpp"

namespace kneeattn {

struct KneeLabel {
    double c_ko = 0.0;
    double c_2nd = 0.0;
    std::array<double, 4> alpha{};
    double gamma = 10.0;
    double sse = 0.0;
    bool low_confidence = false;

    std::string flag() const { return low_confidence ? "low-confidence" : "ok"; }
};

struct KneeFitOptions {
    double gamma = 10.0;
    std::size_t min_points = 20;
    double min_sse_reduction = 0.05;  // vs a single straight line
    std::size_t max_iterations = 1000;
};

/// Double Bacon-Watts regressors at cycle c.
inline std::array<double, 4> dbw_regressors(double c, double c_ko, double c_2nd, double gamma) {
    double u = c - c_ko, w = c - c_2nd;
    return {1.0, u, u * std::tanh(u / gamma), w * std::tanh(w / gamma)};
}

inline double dbw_model(const std::array<double, 4>& alpha, double c, double c_ko, double c_2nd, double gamma) {
    auto x = dbw_regressors(c, c_ko, c_2nd, gamma);
    return alpha[0] * x[0] + alpha[1] * x[1] + alpha[2] * x[2] + alpha[3] * x[3];
}

namespace detail {

struct ProfileFit {
    std::array<double, 4> alpha{};
    double sse = std::numeric_limits<double>::infinity();
    Eigen::Index rank = 0;
};

/// Least squares in the coefficients for fixed breakpoints. Breakpoints are
/// offsets from `origin`; `cycles` are offsets too.
inline ProfileFit profile(std::span<const double> cycles, std::span<const double> q, double c_ko, double c_2nd,
                          double gamma) {
    const auto n = static_cast<Eigen::Index>(cycles.size());
    Eigen::MatrixXd x(n, 4);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        auto r = dbw_regressors(cycles[static_cast<std::size_t>(i)], c_ko, c_2nd, gamma);
        for (Eigen::Index j = 0; j < 4; ++j) x(i, j) = r[static_cast<std::size_t>(j)];
        y(i) = q[static_cast<std::size_t>(i)];
    }
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(x);
    cod.setThreshold(1e-12);
    Eigen::VectorXd a = cod.solve(y);
    ProfileFit fit;
    fit.rank = cod.rank();
    for (std::size_t j = 0; j < 4; ++j) fit.alpha[j] = a(static_cast<Eigen::Index>(j));
    fit.sse = (y - x * a).squaredNorm();
    return fit;
}

inline double line_sse(std::span<const double> cycles, std::span<const double> q) {
    const auto n = static_cast<Eigen::Index>(cycles.size());
    Eigen::MatrixXd x(n, 2);
    Eigen::VectorXd y(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        x(i, 0) = 1.0;
        x(i, 1) = cycles[static_cast<std::size_t>(i)];
        y(i) = q[static_cast<std::size_t>(i)];
    }
    Eigen::VectorXd a = x.colPivHouseholderQr().solve(y);
    return (y - x * a).squaredNorm();
}

/// Plain Nelder-Mead on R²; returns the best vertex seen.
template <class F>
std::pair<std::array<double, 2>, double> nelder_mead(F f, std::array<double, 2> start, double step,
                                                     std::size_t max_iter) {
    using P = std::array<double, 2>;
    std::array<P, 3> s{start, P{start[0] + step, start[1]}, P{start[0], start[1] + step}};
    std::array<double, 3> fv{f(s[0]), f(s[1]), f(s[2])};
    auto lerp = [](const P& a, const P& b, double t) { return P{a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])}; };
    for (std::size_t it = 0; it < max_iter; ++it) {
        std::array<std::size_t, 3> o{0, 1, 2};
        std::sort(o.begin(), o.end(), [&](std::size_t a, std::size_t b) { return fv[a] < fv[b]; });
        std::array<P, 3> ss{s[o[0]], s[o[1]], s[o[2]]};
        std::array<double, 3> ff{fv[o[0]], fv[o[1]], fv[o[2]]};
        s = ss;
        fv = ff;
        double size = std::max(std::hypot(s[1][0] - s[0][0], s[1][1] - s[0][1]),
                               std::hypot(s[2][0] - s[0][0], s[2][1] - s[0][1]));
        if (size < 1e-9) break;
        P centroid{0.5 * (s[0][0] + s[1][0]), 0.5 * (s[0][1] + s[1][1])};
        P xr = lerp(centroid, s[2], -1.0);
        double fr = f(xr);
        if (fr < fv[0]) {
            P xe = lerp(centroid, s[2], -2.0);
            double fe = f(xe);
            if (fe < fr) {
                s[2] = xe;
                fv[2] = fe;
            } else {
                s[2] = xr;
                fv[2] = fr;
            }
        } else if (fr < fv[1]) {
            s[2] = xr;
            fv[2] = fr;
        } else {
            bool outside = fr < fv[2];
            P xc = outside ? lerp(centroid, xr, 0.5) : lerp(centroid, s[2], 0.5);
            double fc = f(xc);
            if (fc < (outside ? fr : fv[2])) {
                s[2] = xc;
                fv[2] = fc;
            } else {
                for (std::size_t i = 1; i < 3; ++i) {
                    s[i] = lerp(s[0], s[i], 0.5);
                    fv[i] = f(s[i]);
                }
            }
        }
    }
    std::size_t best = static_cast<std::size_t>(std::min_element(fv.begin(), fv.end()) - fv.begin());
    return {s[best], fv[best]};
}

}  // namespace detail

/// Coarse grid over (c_ko ≤ c_2nd) with step max(1, N/100) cycles, then
/// Nelder-Mead on (c_ko, δ = c_2nd − c_ko ≥ 0) from the best grid point.
inline KneeLabel fit_double_bacon_watts(std::span<const std::pair<double, double>> fade,
                                        const KneeFitOptions& opt = {}) {
    if (fade.size() < opt.min_points)
        throw LabelError("need at least " + std::to_string(opt.min_points) + " fade points, got " +
                         std::to_string(fade.size()));
    require(opt.gamma > 0.0, "fit_double_bacon_watts: gamma must be positive");
    const double origin = fade.front().first;
    std::vector<double> xs, qs;
    for (const auto& [c, q] : fade) {
        if (!(q > 0.0) || !std::isfinite(q)) throw LabelError("non-positive or non-finite capacity at cycle " + std::to_string(c));
        if (!xs.empty() && !(c - origin > xs.back())) throw LabelError("fade cycles must be strictly increasing");
        xs.push_back(c - origin);
        qs.push_back(q);
    }
    const double span = xs.back();
    const double gamma = opt.gamma;
    const double step = std::max(1.0, std::floor(static_cast<double>(fade.size()) / 100.0));

    auto sse_at = [&](double ko, double second) { return detail::profile(xs, qs, ko, second, gamma).sse; };

    double best_ko = 0.0, best_2nd = 0.0, best = std::numeric_limits<double>::infinity();
    for (double ko = 0.0; ko <= span; ko += step)
        for (double second = ko; second <= span; second += step) {
            double s = sse_at(ko, second);
            if (s < best) {
                best = s;
                best_ko = ko;
                best_2nd = second;
            }
        }
    if (!std::isfinite(best)) throw LabelError("least-squares profile failed on every grid point");

    auto objective = [&](const std::array<double, 2>& p) {
        double ko = std::clamp(p[0], 0.0, span);
        double second = std::clamp(ko + std::abs(p[1]), 0.0, span);
        double penalty = std::max(0.0, -p[0]) + std::max(0.0, p[0] - span) +
                         std::max(0.0, p[0] + std::abs(p[1]) - span);
        return sse_at(ko, second) * (1.0 + penalty);
    };
    auto [pt, val] = detail::nelder_mead(objective, {best_ko, best_2nd - best_ko}, step, opt.max_iterations);
    double ko = best_ko, second = best_2nd;
    if (val < best) {
        ko = std::clamp(pt[0], 0.0, span);
        second = std::clamp(ko + std::abs(pt[1]), 0.0, span);
    }

    detail::ProfileFit fit = detail::profile(xs, qs, ko, second, gamma);
    if (fit.rank < 3) throw LabelError("singular least-squares system (rank " + std::to_string(fit.rank) + ")");

    KneeLabel label;
    label.c_ko = origin + ko;
    label.c_2nd = origin + second;
    label.alpha = fit.alpha;
    label.gamma = gamma;
    label.sse = fit.sse;

    double line = detail::line_sse(xs, qs);
    double q_max = *std::max_element(qs.begin(), qs.end());
    double rounding = static_cast<double>(qs.size()) * std::pow(1e-9 * q_max, 2);
    if (!(line > rounding) || (line - fit.sse) / line < opt.min_sse_reduction) {
        label.low_confidence = true;
        label.c_ko = label.c_2nd = origin + span;
        detail::ProfileFit edge = detail::profile(xs, qs, span, span, gamma);
        label.alpha = edge.alpha;
        label.sse = edge.sse;
    }
    return label;
}

struct LabelResult {
    std::map<std::string, KneeLabel> labels;
    std::vector<std::pair<std::string, std::string>> failures;  // cell id, reason
};

/// Labels every cell; failures are collected, not thrown. The fade curve is
/// passed through the outlier cleaner first when `clean` is set.
inline LabelResult label_corpus(std::span<const CellRecord> records, const KneeFitOptions& opt = {},
                                bool clean = true) {
    LabelResult result;
    for (const CellRecord& rec : records) {
        try {
            auto fade = rec.fade_curve();
            if (clean && fade.size() >= 4) {
                std::vector<double> q;
                for (const auto& p : fade) q.push_back(p.second);
                q = clean_outliers(q);
                for (std::size_t i = 0; i < fade.size(); ++i) fade[i].second = q[i];
            }
            result.labels[rec.cell_id] = fit_double_bacon_watts(fade, opt);
        } catch (const Error& e) {
            result.failures.emplace_back(rec.cell_id, e.what());
        }
    }
    return result;
}

inline void write_labels_csv(std::ostream& out, const std::map<std::string, KneeLabel>& labels) {
    out << "cell_id,c_ko,c_2nd,alpha0,alpha1,alpha2,alpha3,gamma,sse,flag\n";
    for (const auto& [id, l] : labels) {
        out << id << ',' << format_double(l.c_ko) << ',' << format_double(l.c_2nd);
        for (double a : l.alpha) out << ',' << format_double(a);
        out << ',' << format_double(l.gamma) << ',' << format_double(l.sse) << ',' << l.flag() << '\n';
    }
}

inline std::map<std::string, KneeLabel> read_labels_csv(std::istream& in) {
    std::string line;
    if (!std::getline(in, line)) throw IngestError("empty labels-csv input");
    csv::Header h(line);
    const std::size_t c_id = h.require("cell_id"), c_ko = h.require("c_ko"), c_2 = h.require("c_2nd"),
                      c_g = h.require("gamma"), c_sse = h.require("sse"), c_flag = h.require("flag");
    const std::array<std::size_t, 4> c_a{h.require("alpha0"), h.require("alpha1"), h.require("alpha2"),
                                         h.require("alpha3")};
    std::map<std::string, KneeLabel> labels;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (csv::trim(line).empty()) continue;
        auto f = csv::split_line(line);
        if (f.size() < h.size()) throw IngestError("labels line " + std::to_string(line_no) + ": too few fields");
        KneeLabel l;
        l.c_ko = csv::parse_number(f[c_ko], line_no, "c_ko");
        l.c_2nd = csv::parse_number(f[c_2], line_no, "c_2nd");
        for (std::size_t j = 0; j < 4; ++j) l.alpha[j] = csv::parse_number(f[c_a[j]], line_no, "alpha");
        l.gamma = csv::parse_number(f[c_g], line_no, "gamma");
        l.sse = csv::parse_number(f[c_sse], line_no, "sse");
        l.low_confidence = csv::trim(f[c_flag]) == "low-confidence";
        labels[csv::trim(f[c_id])] = l;
    }
    return labels;
}

}  // namespace kneeattn
