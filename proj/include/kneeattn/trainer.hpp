#pragma once

// Supervised training: RMSE objective, Adam, early stopping, seeded splits,
// multi-seed reports and a parallel hyperparameter grid.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <limits>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>
#include <spdlog/spdlog.h>

#include "kneeattn/cell.hpp"
#include "kneeattn/error.hpp"
#include "kneeattn/io.hpp"
#include "kneeattn/knee.hpp"
#include "kneeattn/model.hpp"
#include "kneeattn/preprocess.hpp"

namespace kneeattn {

inline double rmse(std::span<const double> preds, std::span<const double> targets) {
    require(!preds.empty() && preds.size() == targets.size(), "rmse: need equal, non-empty lengths");
    double acc = 0.0;
    for (std::size_t i = 0; i < preds.size(); ++i) acc += (preds[i] - targets[i]) * (preds[i] - targets[i]);
    return std::sqrt(acc / static_cast<double>(preds.size()));
}

inline double mean_of(std::span<const double> v) {
    require(!v.empty(), "mean of empty sequence");
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Population standard deviation.
inline double std_of(std::span<const double> v) {
    double m = mean_of(v), acc = 0.0;
    for (double x : v) acc += (x - m) * (x - m);
    return std::sqrt(acc / static_cast<double>(v.size()));
}

struct AdamOptions {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::vector<Tensor> m, v;
    std::size_t step = 0;
};

inline void adam_step(ParamStore& params, const std::vector<Tensor>& grads, AdamState& state, double lr,
                      const AdamOptions& opt = {}) {
    require(grads.size() == params.size(), "adam_step: gradient count mismatch");
    if (state.m.empty())
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m.emplace_back(params[i].shape(), 0.0);
            state.v.emplace_back(params[i].shape(), 0.0);
        }
    ++state.step;
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        require(grads[i].shape() == params[i].shape(), "adam_step: shape mismatch for " + params.name(i));
        Tensor& p = params[i];
        Tensor& m = state.m[i];
        Tensor& v = state.v[i];
        for (std::size_t k = 0; k < p.size(); ++k) {
            double g = grads[i][k];
            m[k] = opt.beta1 * m[k] + (1.0 - opt.beta1) * g;
            v[k] = opt.beta2 * v[k] + (1.0 - opt.beta2) * g * g;
            p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + opt.eps);
        }
    }
}

/// Stops once `patience` epochs pass without a strictly lower validation loss.
class EarlyStopping {
public:
    explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

    /// Returns true when this epoch is the new best.
    bool update(double val) {
        ++epoch_;
        if (val < best_) {
            best_ = val;
            best_epoch_ = epoch_;
            since_best_ = 0;
            return true;
        }
        ++since_best_;
        return false;
    }

    bool should_stop() const { return since_best_ >= patience_; }
    std::size_t best_epoch() const { return best_epoch_; }
    double best() const { return best_; }

private:
    std::size_t patience_;
    std::size_t epoch_ = 0, best_epoch_ = 0, since_best_ = 0;
    double best_ = std::numeric_limits<double>::infinity();
};

struct Split {
    std::vector<std::string> train, val, test;
};

struct SplitCounts {
    std::size_t train, val, test;
};

/// 80/20/24 for the 124-cell corpus, proportional with floor rounding otherwise.
inline SplitCounts split_counts(std::size_t n) {
    std::size_t val = n * 20 / 124, test = n * 24 / 124;
    return {n - val - test, val, test};
}

/// Seeded random split; ids are sorted first so the result ignores corpus order.
inline Split make_split(std::vector<std::string> ids, std::uint64_t seed) {
    std::sort(ids.begin(), ids.end());
    require(std::adjacent_find(ids.begin(), ids.end()) == ids.end(), "make_split: duplicate cell ids");
    SplitCounts c = split_counts(ids.size());
    if (c.train == 0 || c.val == 0)
        throw ConfigError("corpus of " + std::to_string(ids.size()) + " labelled cells is too small to split");
    std::mt19937_64 rng(seed);
    std::shuffle(ids.begin(), ids.end(), rng);
    Split s;
    s.val.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(c.val));
    s.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(c.val),
                  ids.begin() + static_cast<std::ptrdiff_t>(c.val + c.test));
    s.train.assign(ids.begin() + static_cast<std::ptrdiff_t>(c.val + c.test), ids.end());
    return s;
}

struct TrainSpec {
    double lr = 1e-2;
    std::size_t max_epochs = 500;
    std::size_t patience = 30;
    std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
    PreprocessOptions preprocess;

    void validate() const {
        if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
        if (max_epochs < 1) throw ConfigError("max_epochs must be >= 1");
        if (patience > max_epochs) throw ConfigError("patience must not exceed max_epochs");
        if (seeds.empty()) throw ConfigError("at least one seed required");
    }
};

/// Un-normalised inputs keyed by cell id, shared read-only between runs.
using RawInputCache = std::map<std::string, RawInput>;

inline RawInputCache build_raw_cache(std::span<const CellRecord> cells, Variant variant, std::size_t n_cy,
                                     const PreprocessOptions& opt) {
    RawInputCache cache;
    for (const CellRecord& c : cells) cache.emplace(c.cell_id, build_raw_input(c, variant, n_cy, opt));
    return cache;
}

struct SeedResult {
    std::uint64_t seed = 0;
    std::size_t best_epoch = 0;
    std::size_t epochs_run = 0;
    double train_rmse = NAN, val_rmse = NAN, test_rmse = NAN;  // raw cycles
    std::vector<double> train_curve, val_curve;
    bool diverged = false;
    double wall_seconds = 0.0;
    Checkpoint checkpoint;
};

struct EvalRow {
    std::string cell_id;
    int batch = 0;
    double target = 0.0, prediction = 0.0;
};

/// Predictions in raw cycles for the listed cells.
inline std::vector<EvalRow> predict_cells(const Model& model, const Checkpoint& ck, const RawInputCache& cache,
                                          std::span<const std::string> ids,
                                          const std::map<std::string, KneeLabel>& labels,
                                          const std::map<std::string, int>& batches = {}) {
    std::vector<EvalRow> rows;
    for (const std::string& id : ids) {
        auto it = cache.find(id);
        if (it == cache.end()) continue;
        InputTensor x = ck.input_normalizer.apply(it->second);
        EvalRow r{id, batches.count(id) ? batches.at(id) : 0, labels.at(id).c_ko,
                  ck.target.denormalize(model.infer(x).prediction)};
        rows.push_back(r);
    }
    return rows;
}

inline double rows_rmse(const std::vector<EvalRow>& rows) {
    if (rows.empty()) return NAN;
    std::vector<double> p, t;
    for (const auto& r : rows) p.push_back(r.prediction), t.push_back(r.target);
    return rmse(p, t);
}

/// One training run. `config.seed` initialises the parameters; test cells
/// missing from `cache` are skipped when scoring.
inline SeedResult train_model(ModelConfig config, const RawInputCache& cache,
                              const std::map<std::string, KneeLabel>& labels, const Split& split,
                              const TrainSpec& spec) {
    spec.validate();
    config.validate();
    auto start = std::chrono::steady_clock::now();
    require(!split.train.empty() && !split.val.empty(), "train_model: empty train or validation split");

    SeedResult res;
    res.seed = config.seed;
    Checkpoint& ck = res.checkpoint;
    ck.config = config;
    ck.train_ids = split.train;
    ck.val_ids = split.val;
    ck.test_ids = split.test;
    ck.preprocess = spec.preprocess;

    std::vector<const RawInput*> train_raw;
    std::vector<double> train_y;
    for (const std::string& id : split.train) {
        train_raw.push_back(&cache.at(id));
        train_y.push_back(labels.at(id).c_ko);
    }
    ck.input_normalizer = MinMaxNormalizer::fit(train_raw);
    ck.target = TargetScaler::fit(train_y);

    std::vector<Tensor> train_x;
    std::vector<double> train_yn;
    for (std::size_t i = 0; i < train_raw.size(); ++i) {
        train_x.push_back(ck.input_normalizer.apply(*train_raw[i]).data);
        train_yn.push_back(ck.target.normalize(train_y[i]));
    }

    Model model(config);
    ParamStore best = model.params();
    AdamState adam;
    EarlyStopping stopper(spec.patience);
    const double n = static_cast<double>(train_x.size());

    for (std::size_t epoch = 1; epoch <= spec.max_epochs; ++epoch) {
        std::vector<Tensor> grads;
        for (std::size_t i = 0; i < model.params().size(); ++i) grads.emplace_back(model.params()[i].shape(), 0.0);
        double sq = 0.0;
        for (std::size_t c = 0; c < train_x.size(); ++c) {
            Tape tape;
            auto vars = model.bind(tape, true);
            Var pred = model.forward(tape, vars, train_x[c]).prediction;
            double diff = pred.value().item() - train_yn[c];
            sq += diff * diff;
            tape.backward(scale(pred, 2.0 * diff / n));
            for (std::size_t k = 0; k < vars.size(); ++k) {
                const Tensor& g = vars[k].grad();
                for (std::size_t e = 0; e < g.size(); ++e) grads[k][e] += g[e];
            }
        }
        double loss = std::sqrt(sq / n);
        if (!std::isfinite(loss)) {
            res.diverged = true;
            spdlog::warn("seed {}: non-finite training loss at epoch {}, run aborted", config.seed, epoch);
            break;
        }
        res.train_curve.push_back(loss * ck.target.span());
        // d sqrt(mse) = d mse / (2 sqrt(mse))
        double factor = loss > 0.0 ? 1.0 / (2.0 * loss) : 0.0;
        for (Tensor& g : grads)
            for (double& v : g.data()) v *= factor;
        adam_step(model.params(), grads, adam, spec.lr);

        ck.params = model.params();
        double val = rows_rmse(predict_cells(model, ck, cache, split.val, labels));
        if (!std::isfinite(val)) {
            res.diverged = true;
            spdlog::warn("seed {}: non-finite validation loss at epoch {}, run aborted", config.seed, epoch);
            break;
        }
        res.val_curve.push_back(val);
        res.epochs_run = epoch;
        if (stopper.update(val)) best = model.params();
        if (stopper.should_stop()) break;
    }

    ck.params = best;
    Model kept(config, best);
    res.best_epoch = stopper.best_epoch();
    if (res.best_epoch > 0) {
        res.val_rmse = stopper.best();
        res.train_rmse = rows_rmse(predict_cells(kept, ck, cache, split.train, labels));
        res.test_rmse = rows_rmse(predict_cells(kept, ck, cache, split.test, labels));
    }
    res.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return res;
}

struct TrainReport {
    ModelConfig config;
    TrainSpec spec;
    std::vector<SeedResult> runs;
    double mean_train = NAN, mean_val = NAN, mean_test = NAN;
    double std_train = NAN, std_val = NAN, std_test = NAN;
    double wall_seconds = 0.0;

    void summarise() {
        std::vector<double> tr, va, te;
        for (const auto& r : runs) {
            if (std::isfinite(r.train_rmse)) tr.push_back(r.train_rmse);
            if (std::isfinite(r.val_rmse)) va.push_back(r.val_rmse);
            if (std::isfinite(r.test_rmse)) te.push_back(r.test_rmse);
        }
        if (!tr.empty()) mean_train = mean_of(tr), std_train = std_of(tr);
        if (!va.empty()) mean_val = mean_of(va), std_val = std_of(va);
        if (!te.empty()) mean_test = mean_of(te), std_test = std_of(te);
    }
};

/// Runs `fn(i)` for i in [0, n) on up to `jobs` threads.
template <class Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn fn) {
    jobs = std::max<std::size_t>(1, std::min(jobs, n));
    if (jobs == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::mutex err_mu;
    std::exception_ptr first_error;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < jobs; ++w)
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(err_mu);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

/// Cell ids that have a label and enough cycles for `n_cy`.
inline std::vector<std::string> usable_cells(std::span<const CellRecord> cells,
                                             const std::map<std::string, KneeLabel>& labels, std::size_t n_cy) {
    std::vector<std::string> ids;
    for (const CellRecord& c : cells)
        if (labels.count(c.cell_id) && c.cycles.size() >= n_cy) ids.push_back(c.cell_id);
    return ids;
}

/// Trains once per seed; seed s drives both the split and the initialisation.
inline TrainReport train_seeds(const ModelConfig& config, std::span<const CellRecord> cells,
                               const std::map<std::string, KneeLabel>& labels, const TrainSpec& spec,
                               std::size_t jobs = 1, const RawInputCache* shared_cache = nullptr) {
    auto start = std::chrono::steady_clock::now();
    spec.validate();
    config.validate();
    RawInputCache own;
    if (!shared_cache) {
        std::vector<CellRecord> usable;
        auto ids = usable_cells(cells, labels, config.n_cy);
        for (const CellRecord& c : cells)
            if (std::find(ids.begin(), ids.end(), c.cell_id) != ids.end()) usable.push_back(c);
        own = build_raw_cache(usable, config.variant, config.n_cy, spec.preprocess);
        shared_cache = &own;
    }
    std::vector<std::string> ids;
    for (const auto& [id, _] : *shared_cache)
        if (labels.count(id)) ids.push_back(id);

    TrainReport report{config, spec, std::vector<SeedResult>(spec.seeds.size())};
    parallel_for(spec.seeds.size(), jobs, [&](std::size_t i) {
        ModelConfig c = config;
        c.seed = spec.seeds[i];
        report.runs[i] = train_model(c, *shared_cache, labels, make_split(ids, spec.seeds[i]), spec);
        spdlog::info("seed {}: best epoch {}, val {:.3f}, test {:.3f}", spec.seeds[i], report.runs[i].best_epoch,
                     report.runs[i].val_rmse, report.runs[i].test_rmse);
    });
    report.summarise();
    report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

inline nlohmann::json to_json(const TrainSpec& s) {
    return {{"lr", s.lr}, {"max_epochs", s.max_epochs}, {"patience", s.patience}, {"seeds", s.seeds}};
}

inline nlohmann::json to_json(const TrainReport& r) {
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    nlohmann::json runs = nlohmann::json::array();
    for (const auto& s : r.runs) {
        nlohmann::json val = nlohmann::json::array(), tr = nlohmann::json::array();
        for (double v : s.val_curve) val.push_back(num(v));
        for (double v : s.train_curve) tr.push_back(num(v));
        runs.push_back({{"seed", s.seed},
                        {"split", {{"train", s.checkpoint.train_ids}, {"val", s.checkpoint.val_ids}, {"test", s.checkpoint.test_ids}}},
                        {"best_epoch", s.best_epoch},
                        {"epochs_run", s.epochs_run},
                        {"diverged", s.diverged},
                        {"train_rmse", num(s.train_rmse)},
                        {"val_rmse", num(s.val_rmse)},
                        {"test_rmse", num(s.test_rmse)},
                        {"train_curve", tr},
                        {"val_curve", val},
                        {"wall_seconds", s.wall_seconds}});
    }
    return {{"config", to_json(r.config)},
            {"train_spec", to_json(r.spec)},
            {"runs", runs},
            {"mean", {{"train_rmse", num(r.mean_train)}, {"val_rmse", num(r.mean_val)}, {"test_rmse", num(r.mean_test)}}},
            {"std", {{"train_rmse", num(r.std_train)}, {"val_rmse", num(r.std_val)}, {"test_rmse", num(r.std_test)}}},
            {"wall_seconds", r.wall_seconds}};
}

struct GridPoint {
    ModelConfig config;
    double lr = 1e-2;
};

struct GridRow {
    GridPoint point;
    std::vector<double> val, test;  // per seed
    double mean_val = NAN, mean_test = NAN, std_test = NAN;
};

struct GridReport {
    std::vector<GridRow> rows;
    std::size_t best = 0;
};

/// Every (config, seed) pair is an independent job; results are stored by
/// index, so enumeration order never changes a row.
inline GridReport grid_search(const std::vector<GridPoint>& grid, std::span<const CellRecord> cells,
                              const std::map<std::string, KneeLabel>& labels, const TrainSpec& spec,
                              std::size_t jobs = 1) {
    if (grid.empty()) throw ConfigError("hyperparameter grid is empty");
    spec.validate();
    std::map<std::pair<Variant, std::size_t>, RawInputCache> caches;
    for (const GridPoint& g : grid) {
        g.config.validate();
        auto key = std::make_pair(g.config.variant, g.config.n_cy);
        if (caches.count(key)) continue;
        std::vector<CellRecord> usable;
        auto ids = usable_cells(cells, labels, g.config.n_cy);
        for (const CellRecord& c : cells)
            if (std::find(ids.begin(), ids.end(), c.cell_id) != ids.end()) usable.push_back(c);
        caches[key] = build_raw_cache(usable, g.config.variant, g.config.n_cy, spec.preprocess);
    }

    GridReport report;
    report.rows.resize(grid.size());
    const std::size_t n_seeds = spec.seeds.size();
    for (std::size_t i = 0; i < grid.size(); ++i) {
        report.rows[i].point = grid[i];
        report.rows[i].val.assign(n_seeds, NAN);
        report.rows[i].test.assign(n_seeds, NAN);
    }
    parallel_for(grid.size() * n_seeds, jobs, [&](std::size_t job) {
        std::size_t gi = job / n_seeds, si = job % n_seeds;
        const GridPoint& g = grid[gi];
        const RawInputCache& cache = caches.at({g.config.variant, g.config.n_cy});
        std::vector<std::string> ids;
        for (const auto& [id, _] : cache) ids.push_back(id);
        TrainSpec s = spec;
        s.lr = g.lr;
        ModelConfig c = g.config;
        c.seed = spec.seeds[si];
        SeedResult r = train_model(c, cache, labels, make_split(ids, spec.seeds[si]), s);
        report.rows[gi].val[si] = r.val_rmse;
        report.rows[gi].test[si] = r.test_rmse;
    });

    double best = INFINITY;
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        GridRow& row = report.rows[i];
        std::vector<double> v, t;
        for (double x : row.val) if (std::isfinite(x)) v.push_back(x);
        for (double x : row.test) if (std::isfinite(x)) t.push_back(x);
        if (!v.empty()) row.mean_val = mean_of(v);
        if (!t.empty()) row.mean_test = mean_of(t), row.std_test = std_of(t);
        if (std::isfinite(row.mean_val) && row.mean_val < best) {
            best = row.mean_val;
            report.best = i;
        }
    }
    return report;
}

inline void write_grid_csv(std::ostream& out, const GridReport& report, const std::vector<std::uint64_t>& seeds) {
    out << "config,architecture,lr,h_size,n_he,f_i,k_i,n_p,n_np,n_cy,seed,val_rmse,test_rmse,best\n";
    for (std::size_t i = 0; i < report.rows.size(); ++i) {
        const GridRow& r = report.rows[i];
        const ModelConfig& c = r.point.config;
        for (std::size_t s = 0; s < seeds.size(); ++s)
            out << i << ',' << to_string(c.architecture) << ',' << format_double(r.point.lr) << ',' << c.h_size << ','
                << c.n_he << ',' << c.cnn.initial_filters << ',' << c.cnn.kernel << ',' << c.cnn.pooling_layers << ','
                << c.cnn.plain_layers << ',' << c.n_cy << ',' << seeds[s] << ',' << format_double(r.val[s]) << ','
                << format_double(r.test[s]) << ',' << (i == report.best ? 1 : 0) << '\n';
    }
}

/// Hyperparameter grid of the published search for an architecture.
inline std::vector<GridPoint> published_grid(Architecture arch, const ModelConfig& base) {
    std::vector<GridPoint> grid;
    const bool baseline = arch == Architecture::rnn_1dcnn;
    std::vector<double> lrs = baseline ? std::vector<double>{1e-5, 1e-4, 1e-3, 1e-2}
                                       : std::vector<double>{1e-4, 5e-4, 1e-3, 5e-3, 1e-2};
    std::vector<std::size_t> filters = baseline ? std::vector<std::size_t>{8} : std::vector<std::size_t>{3, 5, 7};
    std::vector<std::size_t> kernels = baseline ? std::vector<std::size_t>{2, 3, 4, 5} : std::vector<std::size_t>{3};
    std::vector<std::size_t> heads = arch == Architecture::rnn_ta_ca_1dcnn ? std::vector<std::size_t>{1, 2, 3, 4, 5}
                                                                           : std::vector<std::size_t>{1};
    for (double lr : lrs)
        for (std::size_t f : filters)
            for (std::size_t k : kernels)
                for (std::size_t np : {1u, 2u})
                    for (std::size_t nnp : {1u, 2u})
                        for (std::size_t h : {3u, 5u, 7u})
                            for (std::size_t he : heads) {
                                ModelConfig c = base;
                                c.architecture = arch;
                                c.cnn.initial_filters = f;
                                c.cnn.kernel = k;
                                c.cnn.pooling_layers = np;
                                c.cnn.plain_layers = nnp;
                                c.h_size = h;
                                c.he_size = 0;
                                c.n_he = he;
                                grid.push_back({c, lr});
                            }
    return grid;
}

}  // namespace kneeattn
