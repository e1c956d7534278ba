#include <algorithm>
#include <cmath>
#include <sstream>

#include <gtest/gtest.h>

#include "kneeattn/synthetic.hpp"
#include "kneeattn/trainer.hpp"

using namespace kneeattn;

namespace {

struct Fixture {
    std::vector<CellRecord> cells;
    std::map<std::string, KneeLabel> labels;
};

// Labelled from the generator truth; fitting is covered elsewhere.
Fixture make_corpus(std::size_t n_cells, std::size_t cycles) {
    SyntheticSpec spec;
    spec.n_cells = n_cells;
    spec.profile_cycles = cycles;
    auto corpus = generate_synthetic(spec, 3);
    Fixture out;
    out.cells = corpus.cells;
    for (const auto& t : corpus.truth) out.labels[t.cell_id] = KneeLabel{t.c_ko, t.c_2nd};
    return out;
}

const Fixture& small_corpus() {
    static const Fixture f = make_corpus(16, 5);
    return f;
}

ModelConfig toy_config() {
    ModelConfig c;
    c.architecture = Architecture::rnn_ta_ca_1dcnn;
    c.h_size = 3;
    c.n_he = 2;
    c.n_cy = 5;
    c.cnn = CnnConfig{3, 2, 1, 1, 0};
    return c;
}

TrainSpec toy_spec(std::size_t epochs = 12, std::size_t patience = 4) {
    TrainSpec s;
    s.max_epochs = epochs;
    s.patience = patience;
    s.seeds = {0, 1, 2};
    return s;
}

RawInputCache toy_cache() {
    return build_raw_cache(small_corpus().cells, Variant::combined, 5, PreprocessOptions{});
}

std::vector<std::string> ids_of(const RawInputCache& cache) {
    std::vector<std::string> ids;
    for (const auto& [id, _] : cache) ids.push_back(id);
    return ids;
}

}  // namespace

TEST(Rmse, HandValues) {
    std::vector<double> a{1, 2, 3};
    EXPECT_EQ(rmse(a, a), 0.0);
    EXPECT_NEAR(rmse(std::vector<double>{1, 3}, std::vector<double>{0, 0}), std::sqrt(5.0), 1e-15);
    EXPECT_THROW(rmse(std::vector<double>{}, std::vector<double>{}), ContractError);
    EXPECT_THROW(rmse(std::vector<double>{1}, std::vector<double>{1, 2}), ContractError);
}

TEST(Rmse, MeanIsBestConstantAndEqualsPopulationStd) {
    std::vector<double> t{120, 450, 380, 910, 640, 205};
    double m = mean_of(t);
    std::vector<double> c(t.size(), m);
    double at_mean = rmse(c, t);
    EXPECT_NEAR(at_mean, std_of(t), 1e-12);
    for (double k = 0; k <= 1000; k += 0.5) {
        std::fill(c.begin(), c.end(), k);
        EXPECT_GE(rmse(c, t), at_mean - 1e-12) << k;
    }
}

TEST(Adam, ZeroGradientLeavesParameters) {
    ParamStore p;
    p.add("w", Tensor({2}, {0.3, -1.2}));
    ParamStore before = p;
    AdamState st;
    adam_step(p, {Tensor({2}, 0.0)}, st, 0.1);
    EXPECT_TRUE(p == before);
    EXPECT_EQ(st.step, 1u);
    EXPECT_EQ(st.m[0][0], 0.0);
    EXPECT_EQ(st.v[0][1], 0.0);
}

TEST(Adam, FirstStepMovesByLearningRate) {
    ParamStore p;
    p.add("w", Tensor({1}, {2.0}));
    AdamState st;
    adam_step(p, {Tensor({1}, {1.0})}, st, 0.1);
    // m_hat = 1, v_hat = 1
    EXPECT_NEAR(p[0][0], 2.0 - 0.1 / (1.0 + 1e-8), 1e-15);
}

TEST(Adam, DecreasesConvexQuadratic) {
    ParamStore p;
    p.add("w", Tensor({1}, {1.5}));
    AdamState st;
    double prev = 1.5 * 1.5;
    for (int i = 0; i < 2; ++i) {
        adam_step(p, {Tensor({1}, {2.0 * p[0][0]})}, st, 0.05);
        double f = p[0][0] * p[0][0];
        EXPECT_LT(f, prev);
        prev = f;
    }
    EXPECT_THROW(adam_step(p, {}, st, 0.1), ContractError);
}

TEST(EarlyStopping, RuleTrace) {
    EarlyStopping es(2);
    std::vector<double> losses{5, 4, 4.1, 4.2};
    std::size_t stopped = 0;
    for (std::size_t e = 0; e < losses.size(); ++e) {
        es.update(losses[e]);
        if (es.should_stop()) {
            stopped = e + 1;
            break;
        }
    }
    EXPECT_EQ(stopped, 4u);
    EXPECT_EQ(es.best_epoch(), 2u);
    EXPECT_EQ(es.best(), 4.0);
}

TEST(EarlyStopping, TiesDoNotReset) {
    EarlyStopping es(2);
    EXPECT_TRUE(es.update(3.0));
    EXPECT_FALSE(es.update(3.0));
    EXPECT_FALSE(es.update(3.0));
    EXPECT_TRUE(es.should_stop());
    EXPECT_EQ(es.best_epoch(), 1u);
}

TEST(Split, Counts) {
    auto full = split_counts(124);
    EXPECT_EQ(full.train, 80u);
    EXPECT_EQ(full.val, 20u);
    EXPECT_EQ(full.test, 24u);
    auto small = split_counts(40);
    EXPECT_EQ(small.val, 6u);
    EXPECT_EQ(small.test, 7u);
    EXPECT_EQ(small.train, 27u);
}

TEST(Split, DisjointExhaustiveAndSeeded) {
    std::vector<std::string> ids;
    for (int i = 0; i < 40; ++i) ids.push_back("b1c" + std::to_string(i));
    Split s = make_split(ids, 11);
    std::vector<std::string> all = s.train;
    all.insert(all.end(), s.val.begin(), s.val.end());
    all.insert(all.end(), s.test.begin(), s.test.end());
    std::sort(all.begin(), all.end());
    std::vector<std::string> sorted = ids;
    std::sort(sorted.begin(), sorted.end());
    EXPECT_EQ(all, sorted);

    std::vector<std::string> reversed(ids.rbegin(), ids.rend());
    Split again = make_split(reversed, 11);
    EXPECT_EQ(again.train, s.train);
    EXPECT_EQ(again.test, s.test);
    EXPECT_NE(make_split(ids, 12).val, s.val);
}

TEST(Split, TooSmallOrDuplicate) {
    EXPECT_THROW(make_split({"a", "b", "c"}, 0), ConfigError);
    std::vector<std::string> dup(10, "b1c0");
    EXPECT_THROW(make_split(dup, 0), ContractError);
}

TEST(TrainSpec, Validation) {
    TrainSpec s;
    s.patience = s.max_epochs + 1;
    EXPECT_THROW(s.validate(), ConfigError);
    s = TrainSpec{};
    s.lr = 0.0;
    EXPECT_THROW(s.validate(), ConfigError);
    s = TrainSpec{};
    s.seeds.clear();
    EXPECT_THROW(s.validate(), ConfigError);
}

TEST(TrainModel, SameSeedIsBitIdentical) {
    auto cache = toy_cache();
    Split split = make_split(ids_of(cache), 4);
    ModelConfig c = toy_config();
    c.seed = 4;
    SeedResult a = train_model(c, cache, small_corpus().labels, split, toy_spec());
    SeedResult b = train_model(c, cache, small_corpus().labels, split, toy_spec());
    EXPECT_TRUE(a.checkpoint.params == b.checkpoint.params);
    EXPECT_EQ(a.val_curve, b.val_curve);
    EXPECT_EQ(a.train_curve, b.train_curve);
    EXPECT_EQ(a.test_rmse, b.test_rmse);
}

TEST(TrainModel, EarlyStoppingBookkeeping) {
    auto cache = toy_cache();
    Split split = make_split(ids_of(cache), 1);
    TrainSpec spec = toy_spec(40, 3);
    SeedResult r = train_model(toy_config(), cache, small_corpus().labels, split, spec);
    ASSERT_FALSE(r.diverged);
    ASSERT_EQ(r.val_curve.size(), r.epochs_run);
    auto best = std::min_element(r.val_curve.begin(), r.val_curve.end());
    EXPECT_EQ(r.val_rmse, *best);
    EXPECT_EQ(r.best_epoch, static_cast<std::size_t>(best - r.val_curve.begin()) + 1);
    EXPECT_TRUE(r.epochs_run == spec.max_epochs || r.epochs_run - r.best_epoch == spec.patience);

    // The kept parameters reproduce the best validation score.
    Model kept(r.checkpoint.config, r.checkpoint.params);
    EXPECT_NEAR(rows_rmse(predict_cells(kept, r.checkpoint, cache, split.val, small_corpus().labels)), r.val_rmse,
                1e-9);
    EXPECT_TRUE(std::isfinite(r.test_rmse));
}

TEST(TrainModel, TestCellsNeverInfluenceTraining) {
    auto cache = toy_cache();
    Split split = make_split(ids_of(cache), 2);
    ModelConfig c = toy_config();
    c.seed = 2;
    SeedResult full = train_model(c, cache, small_corpus().labels, split, toy_spec());
    RawInputCache pruned = cache;
    for (const auto& id : split.test) pruned.erase(id);
    SeedResult cut = train_model(c, pruned, small_corpus().labels, split, toy_spec());
    EXPECT_TRUE(full.checkpoint.params == cut.checkpoint.params);
    EXPECT_EQ(full.val_curve, cut.val_curve);
    EXPECT_EQ(full.checkpoint.input_normalizer.mins(), cut.checkpoint.input_normalizer.mins());
    EXPECT_TRUE(std::isnan(cut.test_rmse));
}

TEST(TrainModel, NonFiniteTargetDivergesAndAborts) {
    auto cache = toy_cache();
    Split split = make_split(ids_of(cache), 0);
    auto labels = small_corpus().labels;
    labels.at(split.train.front()).c_ko = NAN;
    SeedResult r = train_model(toy_config(), cache, labels, split, toy_spec());
    EXPECT_TRUE(r.diverged);
    EXPECT_EQ(r.epochs_run, 0u);
    EXPECT_EQ(r.best_epoch, 0u);
    EXPECT_TRUE(std::isnan(r.test_rmse));
}

TEST(TrainSeeds, SummaryMatchesRecomputationAndJobsAgree) {
    const auto& f = small_corpus();
    TrainReport one = train_seeds(toy_config(), f.cells, f.labels, toy_spec(), 1);
    TrainReport two = train_seeds(toy_config(), f.cells, f.labels, toy_spec(), 2);
    ASSERT_EQ(one.runs.size(), 3u);
    std::vector<double> te, va;
    for (std::size_t i = 0; i < one.runs.size(); ++i) {
        EXPECT_EQ(one.runs[i].seed, one.spec.seeds[i]);
        EXPECT_EQ(one.runs[i].test_rmse, two.runs[i].test_rmse);
        EXPECT_TRUE(one.runs[i].checkpoint.params == two.runs[i].checkpoint.params);
        te.push_back(one.runs[i].test_rmse);
        va.push_back(one.runs[i].val_rmse);
    }
    double m = (te[0] + te[1] + te[2]) / 3.0;
    double sd = std::sqrt(((te[0] - m) * (te[0] - m) + (te[1] - m) * (te[1] - m) + (te[2] - m) * (te[2] - m)) / 3.0);
    EXPECT_NEAR(one.mean_test, m, 1e-12);
    EXPECT_NEAR(one.std_test, sd, 1e-12);
    EXPECT_NEAR(one.mean_val, (va[0] + va[1] + va[2]) / 3.0, 1e-12);

    // Seed s drives the split as well as the initialisation.
    auto ids = ids_of(toy_cache());
    EXPECT_EQ(one.runs[1].checkpoint.test_ids, make_split(ids, 1).test);

    nlohmann::json j = to_json(one);
    EXPECT_EQ(j["runs"].size(), 3u);
    EXPECT_EQ(j["runs"][0]["val_curve"].size(), one.runs[0].val_curve.size());
}

TEST(GridSearch, SingleConfig) {
    const auto& f = small_corpus();
    TrainSpec spec = toy_spec(4, 2);
    spec.seeds = {0};
    GridReport r = grid_search({{toy_config(), 1e-2}}, f.cells, f.labels, spec);
    ASSERT_EQ(r.rows.size(), 1u);
    EXPECT_EQ(r.best, 0u);
    EXPECT_EQ(r.rows[0].point.config, toy_config());
    EXPECT_THROW(grid_search({}, f.cells, f.labels, spec), ConfigError);
}

TEST(GridSearch, FrozenLearningRateLoses) {
    Fixture f = make_corpus(30, 10);
    TrainSpec spec = toy_spec(80, 20);
    spec.seeds = {0, 1};
    ModelConfig c = toy_config();
    c.n_cy = 10;
    std::vector<GridPoint> grid{{c, 1e-12}, {c, 1e-2}};
    GridReport r = grid_search(grid, f.cells, f.labels, spec);
    EXPECT_EQ(r.best, 1u);
    EXPECT_EQ(r.rows[r.best].point.lr, 1e-2);
}

TEST(GridSearch, OrderIndependentAndBestIsArgmin) {
    const auto& f = small_corpus();
    TrainSpec spec = toy_spec(5, 2);
    spec.seeds = {0, 1};
    ModelConfig a = toy_config(), b = toy_config(), c = toy_config();
    b.h_size = 2;
    c.architecture = Architecture::rnn_ta_1dcnn;
    std::vector<GridPoint> grid{{a, 1e-2}, {b, 5e-3}, {c, 1e-2}};
    std::vector<GridPoint> permuted{grid[2], grid[0], grid[1]};
    GridReport r1 = grid_search(grid, f.cells, f.labels, spec, 2);
    GridReport r2 = grid_search(permuted, f.cells, f.labels, spec, 1);
    std::vector<std::size_t> where{1, 2, 0};
    for (std::size_t i = 0; i < grid.size(); ++i) {
        EXPECT_EQ(r1.rows[i].val, r2.rows[where[i]].val) << i;
        EXPECT_EQ(r1.rows[i].test, r2.rows[where[i]].test) << i;
    }
    EXPECT_EQ(where[r1.best], r2.best);

    for (const auto& row : r1.rows) EXPECT_LE(r1.rows[r1.best].mean_val, row.mean_val);
    for (const auto& row : r1.rows) {
        EXPECT_NEAR(row.mean_val, (row.val[0] + row.val[1]) / 2.0, 1e-12);
        EXPECT_NEAR(row.std_test, std::abs(row.test[0] - row.test[1]) / 2.0, 1e-12);
    }

    std::stringstream csv;
    write_grid_csv(csv, r1, spec.seeds);
    std::string line;
    std::size_t lines = 0, flagged = 0;
    while (std::getline(csv, line)) {
        ++lines;
        flagged += line.back() == '1' && lines > 1;
    }
    EXPECT_EQ(lines, 1 + grid.size() * spec.seeds.size());
    EXPECT_EQ(flagged, spec.seeds.size());
}

TEST(GridSearch, PublishedGridSizes) {
    ModelConfig base;
    EXPECT_EQ(published_grid(Architecture::rnn_1dcnn, base).size(), 4u * 4u * 2u * 2u * 3u);
    EXPECT_EQ(published_grid(Architecture::rnn_ta_1dcnn, base).size(), 5u * 3u * 2u * 2u * 3u);
    auto full = published_grid(Architecture::rnn_ta_ca_1dcnn, base);
    EXPECT_EQ(full.size(), 5u * 3u * 2u * 2u * 3u * 5u);
    for (const auto& g : full) EXPECT_NO_THROW(g.config.validate());
}
