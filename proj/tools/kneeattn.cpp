// kneeattn command-line interface.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <memory>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "kneeattn/analyzer.hpp"
#include "kneeattn/io.hpp"
#include "kneeattn/knee.hpp"
#include "kneeattn/model.hpp"
#include "kneeattn/synthetic.hpp"
#include "kneeattn/trainer.hpp"

using namespace kneeattn;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Flags that were given on the command line, keyed by config name.
struct Overrides {
    std::vector<std::pair<CLI::Option*, std::function<void(json&)>>> items;

    template <class T>
    CLI::Option* add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
        auto value = std::make_shared<T>();
        CLI::Option* opt = app->add_option(flag, *value, help);
        items.emplace_back(opt, [value, key](json& cfg) { cfg[key] = *value; });
        return opt;
    }

    void apply(json& cfg) const {
        for (const auto& [opt, set] : items)
            if (opt->count()) set(cfg);
    }
};

template <class T>
T get(const json& cfg, const std::string& key, T fallback) {
    if (!cfg.contains(key) || cfg.at(key).is_null()) return fallback;
    try {
        return cfg.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError("config key \"" + key + "\": " + e.what());
    }
}

std::string need(const json& cfg, const std::string& key) {
    std::string v = get<std::string>(cfg, key, "");
    if (v.empty()) throw ConfigError("missing required setting \"" + key + "\"");
    return v;
}

std::vector<CellRecord> read_corpus(const json& cfg) {
    fs::path p = need(cfg, "corpus");
    if (!fs::exists(p)) throw IngestError("cannot read " + p.string());
    return load_corpus(p);
}

std::map<std::string, KneeLabel> read_or_make_labels(const json& cfg, const std::vector<CellRecord>& cells) {
    std::string path = get<std::string>(cfg, "labels", "");
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw IngestError("cannot read " + path);
        return read_labels_csv(in);
    }
    spdlog::info("no labels given; fitting knee-onset for {} cells", cells.size());
    auto result = label_corpus(cells);
    for (const auto& [id, why] : result.failures) spdlog::warn("cell {} not labelled: {}", id, why);
    return result.labels;
}

std::map<std::string, int> batch_map(const std::vector<CellRecord>& cells) {
    std::map<std::string, int> m;
    for (const auto& c : cells) m[c.cell_id] = c.batch;
    return m;
}

TrainSpec train_spec(const json& cfg) {
    TrainSpec s;
    s.lr = get(cfg, "lr", s.lr);
    s.max_epochs = get(cfg, "max_epochs", s.max_epochs);
    s.patience = get(cfg, "patience", s.patience);
    s.seeds = get(cfg, "seeds", s.seeds);
    s.validate();
    return s;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw IngestError("cannot write " + path.string());
    out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::vector<std::string> split_ids(const Checkpoint& ck, const std::string& which) {
    std::vector<std::string> ids;
    auto add = [&](const std::vector<std::string>& v) { ids.insert(ids.end(), v.begin(), v.end()); };
    if (which == "train" || which == "all") add(ck.train_ids);
    if (which == "val" || which == "valtest" || which == "all") add(ck.val_ids);
    if (which == "test" || which == "valtest" || which == "all") add(ck.test_ids);
    if (ids.empty() && which != "train" && which != "val" && which != "test")
        throw ConfigError("unknown split \"" + which + "\" (expected train, val, test, valtest or all)");
    return ids;
}

RawInputCache cache_for(const std::vector<CellRecord>& cells, const std::vector<std::string>& ids,
                        const Checkpoint& ck) {
    std::set<std::string> want(ids.begin(), ids.end());
    std::vector<CellRecord> pick;
    for (const auto& c : cells)
        if (want.count(c.cell_id)) pick.push_back(c);
    if (pick.size() < want.size())
        spdlog::warn("{} of {} requested cells are not in the corpus", want.size() - pick.size(), want.size());
    return build_raw_cache(pick, ck.config.variant, ck.config.n_cy, ck.preprocess);
}

Checkpoint read_checkpoint(const json& cfg) {
    fs::path p = need(cfg, "checkpoint");
    if (!fs::exists(p)) throw IngestError("cannot read " + p.string());
    Checkpoint ck = load_checkpoint(p);
    // Settings given explicitly must agree with the checkpoint.
    if (cfg.contains("architecture") && parse_architecture(cfg["architecture"]) != ck.config.architecture)
        throw ConfigError("config architecture " + cfg["architecture"].get<std::string>() +
                          " does not match checkpoint architecture " + to_string(ck.config.architecture));
    if (cfg.contains("n_cy") && cfg["n_cy"].get<std::size_t>() != ck.config.n_cy)
        throw ConfigError("config n_cy does not match checkpoint n_cy " + std::to_string(ck.config.n_cy));
    if (cfg.contains("variant") && parse_variant(cfg["variant"]) != ck.config.variant)
        throw ConfigError("config variant does not match checkpoint variant " + to_string(ck.config.variant));
    return ck;
}

std::size_t best_run(const TrainReport& r) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < r.runs.size(); ++i)
        if (r.runs[i].val_rmse < r.runs[best].val_rmse) best = i;
    return best;
}

void save_runs(const fs::path& out, const TrainReport& report, const std::string& tag = "") {
    write_json(out / ("report" + tag + ".json"), to_json(report));
    for (const auto& run : report.runs)
        save_checkpoint(out / ("checkpoint" + tag + "_seed" + std::to_string(run.seed) + ".json"), run.checkpoint);
    save_checkpoint(out / ("checkpoint" + tag + ".json"), report.runs[best_run(report)].checkpoint);
}

// Commands

int cmd_convert(const json& cfg, const fs::path& out) {
    fs::path in_path = need(cfg, "input");
    fs::path out_path = get<std::string>(cfg, "output", (out / "cells.csv").string());
    std::ifstream in(in_path);
    if (!in) throw IngestError("cannot read " + in_path.string());
    std::ofstream o(out_path);
    if (!o) throw IngestError("cannot write " + out_path.string());
    std::size_t rows = convert_public_dump(in, o);
    std::cout << "converted " << rows << " sample rows -> " << out_path.string() << "\n";
    return 0;
}

int cmd_synth(const json& cfg, const fs::path& out) {
    SyntheticSpec spec;
    spec.n_cells = get(cfg, "cells", spec.n_cells);
    spec.profile_cycles = get(cfg, "profile_cycles", spec.profile_cycles);
    auto corpus = generate_synthetic(spec, get<std::uint64_t>(cfg, "seed", 0));
    std::string format = get<std::string>(cfg, "format", "cells-csv");
    fs::path path = out / (format == "cells-json" ? "cells.json" : "cells.csv");
    save_corpus(path, corpus.cells, parse_corpus_format(format));
    std::ofstream truth(out / "truth.csv");
    truth << "cell_id,batch,c_ko,c_2nd,rest_after_charge,rest_after_discharge\n";
    for (const auto& t : corpus.truth)
        truth << t.cell_id << ',' << t.batch << ',' << format_double(t.c_ko) << ',' << format_double(t.c_2nd) << ','
              << format_double(t.rest_after_charge) << ',' << format_double(t.rest_after_discharge) << '\n';
    std::cout << "wrote " << corpus.cells.size() << " cells -> " << path.string() << "\n";
    return 0;
}

int cmd_label(const json& cfg, const fs::path& out) {
    auto cells = read_corpus(cfg);
    auto result = label_corpus(cells);
    std::ofstream o(out / "labels.csv");
    write_labels_csv(o, result.labels);
    std::ofstream f(out / "label_failures.csv");
    f << "cell_id,reason\n";
    for (const auto& [id, why] : result.failures) {
        spdlog::warn("cell {} not labelled: {}", id, why);
        f << id << ",\"" << why << "\"\n";
    }
    std::ofstream s(out / "batch_stats.csv");
    write_batch_stats_csv(s, batch_stats(cells, result.labels));
    std::cout << "labelled " << result.labels.size() << " cells, " << result.failures.size() << " failures\n";
    return 0;
}

int cmd_train(const json& cfg, const fs::path& out, std::size_t jobs) {
    auto cells = read_corpus(cfg);
    auto labels = read_or_make_labels(cfg, cells);
    ModelConfig mc = model_config_from_json(cfg);
    mc.validate();
    TrainSpec spec = train_spec(cfg);
    std::string grid = get<std::string>(cfg, "grid", "");
    if (!grid.empty()) {
        if (grid != "published") throw ConfigError("unknown grid \"" + grid + "\" (expected published)");
        auto points = published_grid(mc.architecture, mc);
        spdlog::info("grid search over {} configurations x {} seeds", points.size(), spec.seeds.size());
        GridReport g = grid_search(points, cells, labels, spec, jobs);
        std::ofstream csv(out / "grid.csv");
        write_grid_csv(csv, g, spec.seeds);
        mc = g.rows[g.best].point.config;
        spec.lr = g.rows[g.best].point.lr;
        write_json(out / "grid_best.json", {{"config", to_json(mc)}, {"lr", spec.lr}, {"mean_val_rmse", g.rows[g.best].mean_val}});
    }
    TrainReport report = train_seeds(mc, cells, labels, spec, jobs);
    save_runs(out, report);
    std::cout << "test RMSE " << format_double(report.mean_test) << " +- " << format_double(report.std_test)
              << " cycles over " << report.runs.size() << " seeds\n";
    return 0;
}

int cmd_evaluate(const json& cfg, const fs::path& out) {
    Checkpoint ck = read_checkpoint(cfg);
    auto cells = read_corpus(cfg);
    auto labels = read_or_make_labels(cfg, cells);
    auto ids = split_ids(ck, get<std::string>(cfg, "split", "test"));
    auto cache = cache_for(cells, ids, ck);
    Model model(ck.config, ck.params);
    auto rows = predict_cells(model, ck, cache, ids, labels, batch_map(cells));
    if (rows.empty()) throw ConfigError("no evaluable cells in the requested split");
    std::ofstream csv(out / "predictions.csv");
    csv << "cell_id,batch,target,prediction,error\n";
    std::map<int, std::vector<EvalRow>> per_batch;
    for (const auto& r : rows) {
        csv << r.cell_id << ',' << r.batch << ',' << format_double(r.target) << ',' << format_double(r.prediction)
            << ',' << format_double(r.prediction - r.target) << '\n';
        per_batch[r.batch].push_back(r);
    }
    json batches = json::object();
    for (const auto& [b, v] : per_batch) batches[std::to_string(b)] = {{"cells", v.size()}, {"rmse", rows_rmse(v)}};
    double total = rows_rmse(rows);
    write_json(out / "evaluation.json", {{"split", get<std::string>(cfg, "split", "test")},
                                         {"cells", rows.size()},
                                         {"rmse", total},
                                         {"per_batch", batches},
                                         {"config", to_json(ck.config)}});
    std::cout << "RMSE " << format_double(total) << " cycles on " << rows.size() << " cells\n";
    return 0;
}

int cmd_attention(const json& cfg, const fs::path& out, std::size_t jobs) {
    Checkpoint ck = read_checkpoint(cfg);
    ScoreType type = parse_score_type(get<std::string>(cfg, "type", "all"));
    auto cells = read_corpus(cfg);
    auto ids = split_ids(ck, get<std::string>(cfg, "split", "valtest"));
    auto cache = cache_for(cells, ids, ck);
    std::vector<std::string> present;
    for (const auto& id : ids)
        if (cache.count(id)) present.push_back(id);
    std::string id = fs::path(need(cfg, "checkpoint")).stem().string();
    auto report = export_attention(ck, cache, present, batch_map(cells), type, id, jobs);
    write_attention(out / "attention", report);
    json summary = to_json(report);
    if (type != ScoreType::ta && has_ca(ck.config.architecture)) {
        auto plan = recommend_input_size(key_importance(ca_matrices(report)));
        write_json(out / "reduction_plan.json", to_json(plan));
        summary["recommended_n_cy"] = plan.recommended;
    }
    if (type != ScoreType::ca && has_ta(ck.config.architecture) && ck.config.variant == Variant::combined) {
        auto bm = batch_map(cells);
        for (const auto& b : report.batches) {
            std::vector<std::string> in_batch;
            for (const auto& c : present)
                if (bm.at(c) == b.batch) in_batch.push_back(c);
            double ratio = rest_attention_ratio(ck, cache, in_batch);
            summary["rest_ta_ratio"][std::to_string(b.batch)] = std::isfinite(ratio) ? json(ratio) : json(nullptr);
        }
    }
    write_json(out / "attention_summary.json", summary);
    std::cout << "attention for " << present.size() << " cells -> " << (out / "attention").string() << "\n";
    return 0;
}

int cmd_reduce(const json& cfg, const fs::path& out, std::size_t jobs) {
    auto cells = read_corpus(cfg);
    auto labels = read_or_make_labels(cfg, cells);
    ModelConfig mc = model_config_from_json(cfg);
    mc.n_cy = get<std::size_t>(cfg, "full_n_cy", 100);
    if (!has_ca(mc.architecture))
        throw NotAvailableError("input reduction needs cyclic attention; " + to_string(mc.architecture) + " has none");
    TrainSpec spec = train_spec(cfg);
    auto allowed = get<std::vector<std::size_t>>(cfg, "allowed", {30, 50, 80, 100});
    double tau = get(cfg, "tau", 0.90);

    TrainReport full = train_seeds(mc, cells, labels, spec, jobs);
    save_runs(out, full, "_full");
    const Checkpoint& ck = full.runs[best_run(full)].checkpoint;
    RawInputCache cache = build_raw_cache(
        [&] {
            std::vector<CellRecord> v;
            auto ids = usable_cells(cells, labels, mc.n_cy);
            std::set<std::string> want(ids.begin(), ids.end());
            for (const auto& c : cells)
                if (want.count(c.cell_id)) v.push_back(c);
            return v;
        }(),
        mc.variant, mc.n_cy, spec.preprocess);
    auto ids = split_ids(ck, "valtest");
    auto report = export_attention(ck, cache, ids, batch_map(cells), ScoreType::ca, "checkpoint_full", jobs);
    write_attention(out / "attention", report);
    auto plan = recommend_input_size(key_importance(ca_matrices(report)), allowed, tau);
    write_json(out / "reduction_plan.json", to_json(plan));

    std::ofstream csv(out / "reduction.csv");
    csv << "n_cy,role,mean_val_rmse,mean_test_rmse,std_test_rmse\n";
    auto row = [&](const TrainReport& r, const char* role) {
        csv << r.config.n_cy << ',' << role << ',' << format_double(r.mean_val) << ',' << format_double(r.mean_test)
            << ',' << format_double(r.std_test) << '\n';
    };
    row(full, "full");
    if (plan.recommended == mc.n_cy) {
        row(full, "recommended");
    } else {
        ModelConfig reduced = mc;
        reduced.n_cy = plan.recommended;
        TrainReport small = train_seeds(reduced, cells, labels, spec, jobs);
        save_runs(out, small, "_reduced");
        row(small, "recommended");
    }
    std::cout << "recommended n_cy " << plan.recommended << " (from " << mc.n_cy << ")\n";
    return 0;
}

int cmd_benchmark(const json& cfg, const fs::path& out, std::size_t jobs) {
    auto cells = read_corpus(cfg);
    auto labels = read_or_make_labels(cfg, cells);
    auto sizes = get<std::vector<std::size_t>>(cfg, "n_cy_list", {100, 80, 50, 30});
    TrainSpec spec = train_spec(cfg);

    std::vector<std::pair<std::string, int>> datasets{{"All batches", 0}};
    std::set<int> seen;
    for (const auto& c : cells) seen.insert(c.batch);
    for (int b : seen) datasets.emplace_back("Batch " + std::to_string(b), b);

    struct Job {
        std::size_t d, s, k;
    };
    std::vector<Job> jobs_list;
    for (std::size_t d = 0; d < datasets.size(); ++d)
        for (std::size_t s = 0; s < sizes.size(); ++s)
            for (std::size_t k = 0; k < spec.seeds.size(); ++k) jobs_list.push_back({d, s, k});
    std::vector<BenchmarkResult> results(jobs_list.size());
    std::vector<char> ok(jobs_list.size(), 0);
    parallel_for(jobs_list.size(), jobs, [&](std::size_t i) {
        const Job& j = jobs_list[i];
        std::vector<std::string> ids;
        for (const auto& c : cells)
            if ((datasets[j.d].second == 0 || c.batch == datasets[j.d].second) && labels.count(c.cell_id) &&
                c.cycles.size() >= sizes[j.s])
                ids.push_back(c.cell_id);
        if (split_counts(ids.size()).val == 0) return;
        results[i] = elastic_net_benchmark(cells, labels, sizes[j.s], make_split(ids, spec.seeds[j.k]));
        ok[i] = 1;
    });

    std::ofstream runs(out / "benchmark_runs.csv");
    runs << "dataset,n_cy,seed,lambda,rho,val_rmse,test_rmse,nonzero\n";
    std::ofstream table(out / "benchmark.csv");
    table << "dataset,method";
    for (auto n : sizes) table << ',' << n << " cycles";
    table << '\n';
    for (std::size_t d = 0; d < datasets.size(); ++d) {
        table << datasets[d].first << ",Benchmark 1";
        for (std::size_t s = 0; s < sizes.size(); ++s) {
            std::vector<double> test;
            for (std::size_t i = 0; i < jobs_list.size(); ++i) {
                const Job& j = jobs_list[i];
                if (j.d != d || j.s != s || !ok[i]) continue;
                const auto& r = results[i];
                runs << datasets[d].first << ',' << r.n_cy << ',' << spec.seeds[j.k] << ',' << format_double(r.lambda)
                     << ',' << format_double(r.rho) << ',' << format_double(r.val_rmse) << ','
                     << format_double(r.test_rmse) << ',' << r.nonzero << '\n';
                if (std::isfinite(r.test_rmse)) test.push_back(r.test_rmse);
            }
            table << ',' << (test.empty() ? std::string("-") : format_double(mean_of(test)));
            if (test.empty()) spdlog::warn("{} at {} cycles: too few cells for a split", datasets[d].first, sizes[s]);
        }
        table << '\n';
    }
    std::cout << "benchmark table -> " << (out / "benchmark.csv").string() << "\n";
    return 0;
}

int emit_error(const std::string& kind, const std::string& what, int code = 1) {
    std::cerr << json{{"error", what}, {"kind", kind}}.dump() << std::endl;
    return code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Knee-onset prediction with attention-augmented recurrent models"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path, out_dir = "out", log_level = "info";
    std::size_t jobs = 1;
    std::uint64_t seed = 0;
    app.add_option("--config", config_path, "Run configuration (flat JSON); flags override its values");
    app.add_option("--out", out_dir, "Output directory");
    auto* seed_opt = app.add_option("--seed", seed, "Seed (synth seed; single training seed)");
    app.add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error, off")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "critical", "off"}));

    Overrides ov;
    auto model_flags = [&](CLI::App* s) {
        ov.add<std::string>(s, "--architecture", "architecture", "rnn_1dcnn, rnn_ta_1dcnn, rnn_ca_1dcnn, rnn_ta_ca_1dcnn");
        ov.add<std::string>(s, "--variant", "variant", "combined, charging_only, discharging_only");
        ov.add<std::size_t>(s, "--h-size", "h_size", "GRU hidden size");
        ov.add<std::size_t>(s, "--n-he", "n_he", "Attention heads");
        ov.add<std::size_t>(s, "--he-size", "he_size", "Head size (0: h_size)");
        ov.add<std::size_t>(s, "--filters", "cnn_initial_filters", "CNN initial filters");
        ov.add<std::size_t>(s, "--kernel", "cnn_kernel", "CNN kernel size");
        ov.add<std::size_t>(s, "--pooling-layers", "cnn_pooling_layers", "CNN pooling layers");
        ov.add<std::size_t>(s, "--plain-layers", "cnn_plain_layers", "CNN non-pooling layers");
        ov.add<std::size_t>(s, "--dense-hidden", "cnn_dense_hidden", "Hidden dense width (0: none)");
        ov.add<std::string>(s, "--ta-mode", "ta_mode", "learned, constant, last_step");
    };
    auto train_flags = [&](CLI::App* s) {
        ov.add<double>(s, "--lr", "lr", "Adam learning rate");
        ov.add<std::size_t>(s, "--epochs", "max_epochs", "Maximum epochs");
        ov.add<std::size_t>(s, "--patience", "patience", "Early-stopping patience");
        ov.add<std::vector<std::uint64_t>>(s, "--seeds", "seeds", "Seeds (split and initialisation)")->delimiter(',');
    };
    auto data_flags = [&](CLI::App* s, bool labels) {
        ov.add<std::string>(s, "--corpus", "corpus", "cells-csv or cells-json corpus");
        if (labels) ov.add<std::string>(s, "--labels", "labels", "labels-csv (fitted when absent)");
    };

    auto* convert = app.add_subcommand("convert", "Public dataset CSV dump -> cells-csv");
    ov.add<std::string>(convert, "--input", "input", "Dump CSV");
    ov.add<std::string>(convert, "--output", "output", "cells-csv path (default <out>/cells.csv)");

    auto* synth = app.add_subcommand("synth", "Generate a synthetic corpus");
    ov.add<std::size_t>(synth, "--cells", "cells", "Number of cells");
    ov.add<std::size_t>(synth, "--profile-cycles", "profile_cycles", "Cycles with full time series");
    ov.add<std::string>(synth, "--format", "format", "cells-csv or cells-json");

    auto* label = app.add_subcommand("label", "Fit knee-onset labels");
    data_flags(label, false);

    auto* train = app.add_subcommand("train", "Train over seeds (optionally after a grid search)");
    data_flags(train, true);
    model_flags(train);
    train_flags(train);
    ov.add<std::size_t>(train, "--n-cy", "n_cy", "Input cycles");
    ov.add<std::string>(train, "--grid", "grid", "Hyperparameter grid (published)");

    auto* evaluate = app.add_subcommand("evaluate", "Score a checkpoint");
    data_flags(evaluate, true);
    ov.add<std::string>(evaluate, "--checkpoint", "checkpoint", "Checkpoint JSON");
    ov.add<std::string>(evaluate, "--split", "split", "train, val, test, valtest or all");
    ov.add<std::string>(evaluate, "--architecture", "architecture", "Expected architecture");
    ov.add<std::size_t>(evaluate, "--n-cy", "n_cy", "Expected input cycles");

    auto* attention = app.add_subcommand("attention", "Export batch-mean attention scores");
    data_flags(attention, false);
    ov.add<std::string>(attention, "--checkpoint", "checkpoint", "Checkpoint JSON");
    ov.add<std::string>(attention, "--type", "type", "ta, ca or all");
    ov.add<std::string>(attention, "--split", "split", "train, val, test, valtest or all");
    ov.add<std::string>(attention, "--architecture", "architecture", "Expected architecture");

    auto* reduce = app.add_subcommand("reduce", "Train, read cyclic attention, retrain at the recommended size");
    data_flags(reduce, true);
    model_flags(reduce);
    train_flags(reduce);
    ov.add<std::size_t>(reduce, "--full-n-cy", "full_n_cy", "Input cycles of the first model");
    ov.add<std::vector<std::size_t>>(reduce, "--allowed", "allowed", "Allowed input sizes")->delimiter(',');
    ov.add<double>(reduce, "--tau", "tau", "Prefix mass coverage");

    auto* benchmark = app.add_subcommand("benchmark", "Elastic-net benchmark on V/I/T cycle summaries");
    data_flags(benchmark, true);
    ov.add<std::vector<std::size_t>>(benchmark, "--n-cy-list", "n_cy_list", "Input sizes")->delimiter(',');
    ov.add<std::vector<std::uint64_t>>(benchmark, "--seeds", "seeds", "Split seeds")->delimiter(',');

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return emit_error("usage_error", e.what(), 2);
    }

    try {
        spdlog::set_default_logger(spdlog::stderr_color_mt("kneeattn"));
        spdlog::set_level(spdlog::level::from_str(log_level));

        json cfg = json::object();
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) throw IngestError("cannot read " + config_path);
            try {
                cfg = json::parse(in);
            } catch (const json::exception& e) {
                throw ConfigError("config " + config_path + ": " + e.what());
            }
            if (!cfg.is_object()) throw ConfigError("config must be a JSON object");
        }
        ov.apply(cfg);
        CLI::App* sub = app.get_subcommands().front();
        cfg["command"] = sub->get_name();
        if (seed_opt->count()) {
            cfg["seed"] = seed;
            if (sub != synth && !cfg.contains("seeds")) cfg["seeds"] = std::vector<std::uint64_t>{seed};
        }

        fs::path out = out_dir;
        fs::create_directories(out);
        write_json(out / "run_config.json", cfg);

        if (sub == convert) return cmd_convert(cfg, out);
        if (sub == synth) return cmd_synth(cfg, out);
        if (sub == label) return cmd_label(cfg, out);
        if (sub == train) return cmd_train(cfg, out, jobs);
        if (sub == evaluate) return cmd_evaluate(cfg, out);
        if (sub == attention) return cmd_attention(cfg, out, jobs);
        if (sub == reduce) return cmd_reduce(cfg, out, jobs);
        if (sub == benchmark) return cmd_benchmark(cfg, out, jobs);
    } catch (const Error& e) {
        return emit_error(e.kind(), e.what());
    } catch (const fs::filesystem_error& e) {
        return emit_error("io_error", e.what());
    } catch (const std::exception& e) {
        return emit_error("internal_error", e.what());
    }
    return 1;
}
