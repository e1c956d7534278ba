#pragma once

// Attention export, key-cycle importance and input-size recommendation,
// batch statistics and the elastic-net benchmark.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>
#include <spdlog/spdlog.h>

#include "kneeattn/cell.hpp"
#include "kneeattn/error.hpp"
#include "kneeattn/io.hpp"
#include "kneeattn/model.hpp"
#include "kneeattn/trainer.hpp"

namespace kneeattn {

enum class ScoreType { ta, ca, all };

inline ScoreType parse_score_type(const std::string& s) {
    if (s == "ta") return ScoreType::ta;
    if (s == "ca") return ScoreType::ca;
    if (s == "all") return ScoreType::all;
    throw ConfigError("unknown attention type \"" + s + "\" (expected ta, ca or all)");
}

struct BatchAttention {
    int batch = 0;
    std::size_t cells = 0;
    std::optional<Tensor> ta;  // n_cy × n_ts
    std::vector<Tensor> ca;    // per head, n_cy × n_cy, rows = query
};

struct AttentionReport {
    std::string checkpoint_id;
    Architecture architecture = Architecture::rnn_ta_ca_1dcnn;
    Variant variant = Variant::combined;
    std::vector<BatchAttention> batches;  // ascending batch number

    const BatchAttention& batch(int b) const {
        for (const auto& x : batches)
            if (x.batch == b) return x;
        throw ContractError("attention report has no batch " + std::to_string(b));
    }
};

/// Mean TA per (cycle, timestep) and CA per (query, key) within each batch.
inline AttentionReport export_attention(const Checkpoint& ck, const RawInputCache& cache,
                                        std::span<const std::string> ids, const std::map<std::string, int>& batches,
                                        ScoreType type, const std::string& checkpoint_id = "", std::size_t jobs = 1) {
    const Architecture arch = ck.config.architecture;
    const bool want_ta = type != ScoreType::ca, want_ca = type != ScoreType::ta;
    if (type == ScoreType::ta && !has_ta(arch))
        throw NotAvailableError("temporal attention not available for " + to_string(arch));
    if (type == ScoreType::ca && !has_ca(arch))
        throw NotAvailableError("cyclic attention not available for " + to_string(arch));
    if (type == ScoreType::all && !has_ta(arch) && !has_ca(arch))
        throw NotAvailableError("attention scores not available for " + to_string(arch));

    Model model(ck.config, ck.params);
    std::vector<Model::Inference> out(ids.size());
    parallel_for(ids.size(), jobs, [&](std::size_t i) {
        auto it = cache.find(ids[i]);
        if (it == cache.end()) throw ContractError("no input for cell " + ids[i]);
        out[i] = model.infer(ck.input_normalizer.apply(it->second));
    });

    AttentionReport report{checkpoint_id, arch, ck.config.variant, {}};
    std::map<int, BatchAttention> acc;
    for (std::size_t i = 0; i < ids.size(); ++i) {
        int b = batches.count(ids[i]) ? batches.at(ids[i]) : 0;
        BatchAttention& a = acc[b];
        a.batch = b;
        ++a.cells;
        if (want_ta && out[i].ta_scores) {
            if (!a.ta) a.ta = Tensor(out[i].ta_scores->shape(), 0.0);
            for (std::size_t k = 0; k < a.ta->size(); ++k) (*a.ta)[k] += (*out[i].ta_scores)[k];
        }
        if (want_ca && !out[i].ca_scores.empty()) {
            if (a.ca.empty())
                for (const Tensor& t : out[i].ca_scores) a.ca.emplace_back(t.shape(), 0.0);
            for (std::size_t h = 0; h < a.ca.size(); ++h)
                for (std::size_t k = 0; k < a.ca[h].size(); ++k) a.ca[h][k] += out[i].ca_scores[h][k];
        }
    }
    for (auto& [b, a] : acc) {
        double inv = 1.0 / static_cast<double>(a.cells);
        if (a.ta)
            for (double& v : a.ta->data()) v *= inv;
        for (Tensor& t : a.ca)
            for (double& v : t.data()) v *= inv;
        report.batches.push_back(std::move(a));
    }
    return report;
}

/// Ratio of the mean TA score on rest timesteps (|I| below `tol`) to the mean
/// on other measured timesteps. Padding is excluded. NaN without rest samples.
inline double rest_attention_ratio(const Checkpoint& ck, const RawInputCache& cache, std::span<const std::string> ids,
                                   double tol = 1e-6) {
    if (!has_ta(ck.config.architecture))
        throw NotAvailableError("temporal attention not available for " + to_string(ck.config.architecture));
    require(ck.config.variant == Variant::combined, "rest_attention_ratio: needs the combined-cycle variant");
    Model model(ck.config, ck.params);
    double rest = 0.0, other = 0.0;
    std::size_t n_rest = 0, n_other = 0;
    for (const std::string& id : ids) {
        const RawInput& raw = cache.at(id);
        Tensor ta = *model.infer(ck.input_normalizer.apply(raw)).ta_scores;
        for (std::size_t k = 0; k < raw.n_cycles; ++k)
            for (std::size_t j = 0; j < raw.active[k]; ++j) {
                double s = ta(k, j);
                if (std::abs(raw.data(1, k * raw.n_steps + j)) < tol)
                    rest += s, ++n_rest;
                else
                    other += s, ++n_other;
            }
    }
    if (!n_rest || !n_other) return NAN;
    return (rest / static_cast<double>(n_rest)) / (other / static_cast<double>(n_other));
}

inline void write_matrix_csv(std::ostream& out, const Tensor& m) {
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) out << (c ? "," : "") << format_double(m(r, c));
        out << '\n';
    }
}

/// Binary 8-bit PGM, linear scaling of [min, max] to [0, 255].
inline void write_pgm(std::ostream& out, const Tensor& m) {
    auto [lo, hi] = std::minmax_element(m.data().begin(), m.data().end());
    double span = *hi - *lo;
    out << "P5\n" << m.cols() << ' ' << m.rows() << "\n255\n";
    for (std::size_t r = 0; r < m.rows(); ++r)
        for (std::size_t c = 0; c < m.cols(); ++c) {
            double u = span > 0.0 ? (m(r, c) - *lo) / span : 0.0;
            out.put(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * u))));
        }
}

inline nlohmann::json to_json(const AttentionReport& r) {
    nlohmann::json batches = nlohmann::json::array();
    for (const auto& b : r.batches)
        batches.push_back({{"batch", b.batch}, {"cells", b.cells}, {"ta", b.ta.has_value()}, {"ca_heads", b.ca.size()}});
    return {{"checkpoint", r.checkpoint_id},
            {"architecture", to_string(r.architecture)},
            {"variant", to_string(r.variant)},
            {"batches", batches}};
}

/// One CSV and one PGM per batch (and head); returns the written paths.
inline std::vector<std::filesystem::path> write_attention(const std::filesystem::path& dir, const AttentionReport& r) {
    std::filesystem::create_directories(dir);
    std::vector<std::filesystem::path> written;
    auto emit = [&](const std::string& stem, const Tensor& m) {
        auto csv = dir / (stem + ".csv"), pgm = dir / (stem + ".pgm");
        std::ofstream c(csv), p(pgm, std::ios::binary);
        if (!c || !p) throw IngestError("cannot write " + csv.string());
        write_matrix_csv(c, m);
        write_pgm(p, m);
        written.push_back(csv);
        written.push_back(pgm);
    };
    for (const auto& b : r.batches) {
        std::string tag = "batch" + std::to_string(b.batch);
        if (b.ta) emit("ta_" + tag, *b.ta);
        for (std::size_t h = 0; h < b.ca.size(); ++h) emit("ca_" + tag + "_head" + std::to_string(h + 1), b.ca[h]);
    }
    std::ofstream meta(dir / "attention.json");
    meta << to_json(r).dump(2) << '\n';
    written.push_back(dir / "attention.json");
    return written;
}

/// importance[k] = mean over matrices and query rows of AS[q, k].
inline std::vector<double> key_importance(std::span<const Tensor> matrices) {
    require(!matrices.empty(), "key_importance: no attention matrices");
    const std::size_t n = matrices.front().rows();
    std::vector<double> imp(n, 0.0);
    for (const Tensor& m : matrices) {
        require(m.rank() == 2 && m.rows() == n && m.cols() == n, "key_importance: matrices must be square with shared n_cy");
        for (std::size_t q = 0; q < n; ++q)
            for (std::size_t k = 0; k < n; ++k) imp[k] += m(q, k);
    }
    const double denom = static_cast<double>(matrices.size() * n);
    for (double& v : imp) v /= denom;
    return imp;
}

/// Every CA matrix of every batch in the report.
inline std::vector<Tensor> ca_matrices(const AttentionReport& r) {
    std::vector<Tensor> out;
    for (const auto& b : r.batches) out.insert(out.end(), b.ca.begin(), b.ca.end());
    return out;
}

struct ReductionPlan {
    std::vector<double> importance;
    double threshold = 0.0;        // 0.5 × max importance
    std::size_t last_marked = 0;   // largest key index above threshold
    double coverage = 0.0;         // prefix mass of the recommendation
    std::size_t recommended = 100;
    bool fallback = false;
};

inline ReductionPlan recommend_input_size(std::vector<double> importance,
                                          std::vector<std::size_t> allowed = {30, 50, 80, 100}, double tau = 0.90) {
    require(!importance.empty(), "recommend_input_size: empty importance profile");
    double total = std::accumulate(importance.begin(), importance.end(), 0.0);
    require(std::abs(total - 1.0) < 1e-6, "recommend_input_size: importance must sum to 1");
    std::sort(allowed.begin(), allowed.end());

    ReductionPlan plan;
    plan.importance = std::move(importance);
    const std::vector<double>& imp = plan.importance;
    plan.threshold = 0.5 * *std::max_element(imp.begin(), imp.end());
    for (std::size_t k = 0; k < imp.size(); ++k)
        if (imp[k] > plan.threshold) plan.last_marked = k;
    auto prefix = [&](std::size_t n) {
        return std::accumulate(imp.begin(), imp.begin() + static_cast<std::ptrdiff_t>(std::min(n, imp.size())), 0.0);
    };
    for (std::size_t a : allowed)
        if (a >= plan.last_marked + 1 && prefix(a) >= tau - 1e-12) {
            plan.recommended = a;
            plan.coverage = prefix(a);
            return plan;
        }
    spdlog::warn("no allowed input size covers the key cycles; falling back to 100");
    plan.recommended = 100;
    plan.coverage = prefix(100);
    plan.fallback = true;
    return plan;
}

inline nlohmann::json to_json(const ReductionPlan& p) {
    return {{"importance", p.importance}, {"threshold", p.threshold}, {"last_marked_key", p.last_marked},
            {"coverage", p.coverage},     {"recommended_n_cy", p.recommended}, {"fallback", p.fallback}};
}

/// Average C-rate until 80% SOC for one policy.
inline double average_crate(const ChargingPolicy& p) {
    return p.first_rate * p.transition_soc / 80.0 + p.second_rate * (80.0 - p.transition_soc) / 80.0;
}

inline double average_crate(std::span<const ChargingPolicy> batch) {
    require(!batch.empty(), "average_crate: empty batch");
    double acc = 0.0;
    for (const auto& p : batch) acc += average_crate(p);
    return acc / static_cast<double>(batch.size());
}

struct BatchStats {
    int batch = 0;
    std::size_t cells = 0;
    double mean_knee = NAN, std_knee = NAN;  // population std
    double mean_crate = NAN;
};

/// Per-batch knee-onset statistics over labelled cells; batches with no
/// labelled cell are dropped with a warning.
inline std::vector<BatchStats> batch_stats(std::span<const CellRecord> cells,
                                           const std::map<std::string, KneeLabel>& labels) {
    std::map<int, std::pair<std::vector<double>, std::vector<ChargingPolicy>>> groups;
    for (const CellRecord& c : cells) {
        auto& g = groups[c.batch];
        auto it = labels.find(c.cell_id);
        if (it == labels.end()) continue;
        g.first.push_back(it->second.c_ko);
        g.second.push_back(c.policy);
    }
    std::vector<BatchStats> out;
    for (const auto& [b, g] : groups) {
        if (g.first.empty()) {
            spdlog::warn("batch {} has no labelled cells; omitted", b);
            continue;
        }
        out.push_back({b, g.first.size(), mean_of(g.first), std_of(g.first), average_crate(g.second)});
    }
    return out;
}

inline void write_batch_stats_csv(std::ostream& out, const std::vector<BatchStats>& rows) {
    out << "batch,cells,mean_knee_onset,std_knee_onset,mean_crate\n";
    for (const auto& r : rows)
        out << r.batch << ',' << r.cells << ',' << format_double(r.mean_knee) << ',' << format_double(r.std_knee) << ','
            << format_double(r.mean_crate) << '\n';
}

// Elastic net

/// Mean, std, min, max of V, I and T for each of the first `n_cy` cycles.
inline std::vector<double> cycle_summary_features(const CellRecord& cell, std::size_t n_cy) {
    if (cell.cycles.size() < n_cy)
        throw IngestError("cell " + cell.cell_id + " has fewer than " + std::to_string(n_cy) + " cycles");
    std::vector<double> f;
    f.reserve(n_cy * 12);
    for (std::size_t k = 0; k < n_cy; ++k)
        for (const std::vector<double>* s : {&cell.cycles[k].V, &cell.cycles[k].I, &cell.cycles[k].T}) {
            require(!s->empty(), "cycle_summary_features: empty cycle");
            auto [lo, hi] = std::minmax_element(s->begin(), s->end());
            f.push_back(mean_of(*s));
            f.push_back(std_of(*s));
            f.push_back(*lo);
            f.push_back(*hi);
        }
    return f;
}

struct ElasticNetOptions {
    double lambda = 0.0;
    double rho = 1.0;  // 1: lasso, 0: ridge
    double tol = 1e-12;
    std::size_t max_sweeps = 100000;
};

struct ElasticNetFit {
    Eigen::VectorXd w;
    double b = 0.0;
    std::size_t sweeps = 0;
    std::vector<double> objective;  // after each sweep

    double predict(const Eigen::VectorXd& x) const { return w.dot(x) + b; }
};

/// (1/2n)‖y − Xw − b‖² + λ(ρ‖w‖₁ + (1−ρ)/2·‖w‖²)
inline double elastic_net_objective(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                                    double b, double lambda, double rho) {
    const double n = static_cast<double>(x.rows());
    Eigen::VectorXd r = y - x * w - Eigen::VectorXd::Constant(x.rows(), b);
    return r.squaredNorm() / (2.0 * n) + lambda * (rho * w.lpNorm<1>() + 0.5 * (1.0 - rho) * w.squaredNorm());
}

inline double soft_threshold(double c, double t) { return c > t ? c - t : c < -t ? c + t : 0.0; }

/// Cyclic coordinate descent with an unpenalised intercept.
inline ElasticNetFit fit_elastic_net(const Eigen::MatrixXd& x, const Eigen::VectorXd& y,
                                     const ElasticNetOptions& opt = {}) {
    require(x.rows() == y.size() && x.rows() >= 1, "elastic net: X and y row counts differ");
    require(opt.lambda >= 0.0, "elastic net: lambda must be >= 0");
    require(opt.rho >= 0.0 && opt.rho <= 1.0, "elastic net: rho must lie in [0, 1]");
    const double n = static_cast<double>(x.rows());
    Eigen::RowVectorXd mean = x.colwise().mean();
    Eigen::MatrixXd xc = x.rowwise() - mean;
    const double y_mean = y.mean();
    Eigen::VectorXd yc = y.array() - y_mean;
    Eigen::VectorXd sq = xc.colwise().squaredNorm().transpose() / n;

    ElasticNetFit fit;
    fit.w = Eigen::VectorXd::Zero(x.cols());
    Eigen::VectorXd r = yc;
    const double l1 = opt.lambda * opt.rho, l2 = opt.lambda * (1.0 - opt.rho);
    for (fit.sweeps = 1; fit.sweeps <= opt.max_sweeps; ++fit.sweeps) {
        double max_step = 0.0, scale = 0.0;
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            if (!(sq(j) > 0.0)) continue;
            double old = fit.w(j);
            double c = xc.col(j).dot(r) / n + sq(j) * old;
            double nw = soft_threshold(c, l1) / (sq(j) + l2);
            if (nw != old) {
                r -= (nw - old) * xc.col(j);
                fit.w(j) = nw;
            }
            max_step = std::max(max_step, std::abs(nw - old) * std::sqrt(sq(j)));
            scale = std::max(scale, std::abs(nw) * std::sqrt(sq(j)));
        }
        fit.b = y_mean - mean.dot(fit.w);
        fit.objective.push_back(elastic_net_objective(x, y, fit.w, fit.b, opt.lambda, opt.rho));
        if (max_step <= opt.tol * std::max(1.0, scale)) break;
    }
    fit.sweeps = std::min(fit.sweeps, opt.max_sweeps);
    return fit;
}

/// Column z-scores fitted on training rows; constant columns map to 0.
struct Standardizer {
    Eigen::RowVectorXd mean, scale;

    static Standardizer fit(const Eigen::MatrixXd& x) {
        Standardizer s;
        s.mean = x.colwise().mean();
        s.scale = ((x.rowwise() - s.mean).colwise().squaredNorm() / static_cast<double>(x.rows())).array().sqrt();
        return s;
    }
    Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
        Eigen::MatrixXd out = x.rowwise() - mean;
        for (Eigen::Index j = 0; j < out.cols(); ++j) out.col(j) = scale(j) > 0.0 ? Eigen::VectorXd(out.col(j) / scale(j)) : Eigen::VectorXd::Zero(out.rows());
        return out;
    }
};

struct BenchmarkOptions {
    std::vector<double> lambdas{1e-4, 1e-3, 1e-2, 3e-2, 0.1, 0.3, 1.0};
    std::vector<double> rhos{0.1, 0.5, 0.9, 1.0};
    std::size_t max_sweeps = 20000;
};

struct BenchmarkResult {
    std::size_t n_cy = 0;
    double lambda = NAN, rho = NAN;
    double train_rmse = NAN, val_rmse = NAN, test_rmse = NAN;
    std::size_t nonzero = 0;
};

/// Elastic net on per-cycle V/I/T summaries; features and targets are
/// standardised on the training split and (λ, ρ) is chosen on validation.
inline BenchmarkResult elastic_net_benchmark(std::span<const CellRecord> cells,
                                             const std::map<std::string, KneeLabel>& labels, std::size_t n_cy,
                                             const Split& split, const BenchmarkOptions& opt = {}) {
    std::map<std::string, const CellRecord*> by_id;
    for (const CellRecord& c : cells) by_id[c.cell_id] = &c;
    auto design = [&](std::span<const std::string> ids, Eigen::MatrixXd& x, Eigen::VectorXd& y) {
        x.resize(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(n_cy * 12));
        y.resize(static_cast<Eigen::Index>(ids.size()));
        for (std::size_t i = 0; i < ids.size(); ++i) {
            auto f = cycle_summary_features(*by_id.at(ids[i]), n_cy);
            x.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(f.data(), static_cast<Eigen::Index>(f.size()));
            y(static_cast<Eigen::Index>(i)) = labels.at(ids[i]).c_ko;
        }
    };
    require(!split.train.empty() && !split.val.empty(), "elastic net benchmark: empty train or validation split");
    Eigen::MatrixXd xtr, xva, xte;
    Eigen::VectorXd ytr, yva, yte;
    design(split.train, xtr, ytr);
    design(split.val, xva, yva);
    design(split.test, xte, yte);
    Standardizer st = Standardizer::fit(xtr);
    xtr = st.apply(xtr);
    xva = st.apply(xva);
    if (xte.rows()) xte = st.apply(xte);
    const double y_mean = ytr.mean();
    double y_scale = std::sqrt((ytr.array() - y_mean).square().mean());
    if (!(y_scale > 0.0)) y_scale = 1.0;
    Eigen::VectorXd ztr = (ytr.array() - y_mean) / y_scale;

    auto score = [&](const ElasticNetFit& f, const Eigen::MatrixXd& x, const Eigen::VectorXd& y) {
        if (!x.rows()) return std::numeric_limits<double>::quiet_NaN();
        Eigen::VectorXd p = ((x * f.w).array() + f.b) * y_scale + y_mean;
        return std::sqrt((p - y).squaredNorm() / static_cast<double>(y.size()));
    };

    BenchmarkResult best;
    best.n_cy = n_cy;
    std::optional<ElasticNetFit> kept;
    for (double rho : opt.rhos)
        for (double lambda : opt.lambdas) {
            ElasticNetFit f = fit_elastic_net(xtr, ztr, {lambda, rho, 1e-9, opt.max_sweeps});
            double v = score(f, xva, yva);
            if (!kept || v < best.val_rmse) {
                best.val_rmse = v;
                best.lambda = lambda;
                best.rho = rho;
                kept = std::move(f);
            }
        }
    best.train_rmse = score(*kept, xtr, ytr);
    best.test_rmse = score(*kept, xte, yte);
    best.nonzero = static_cast<std::size_t>((kept->w.array() != 0.0).count());
    return best;
}

}  // namespace kneeattn
