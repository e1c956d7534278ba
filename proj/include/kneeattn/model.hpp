#pragma once

// The four assembled architectures: GRU encoder per cycle, optional temporal
// attention, optional multi-head cyclic attention, 1D CNN regression head.
// Also parameter storage, initialisation and JSON checkpoints.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "kneeattn/error.hpp"
#include "kneeattn/layers.hpp"
#include "kneeattn/preprocess.hpp"
#include "kneeattn/tensor.hpp"

namespace kneeattn {

enum class Architecture { rnn_1dcnn, rnn_ta_1dcnn, rnn_ca_1dcnn, rnn_ta_ca_1dcnn };

inline std::string to_string(Architecture a) {
    switch (a) {
        case Architecture::rnn_1dcnn: return "rnn_1dcnn";
        case Architecture::rnn_ta_1dcnn: return "rnn_ta_1dcnn";
        case Architecture::rnn_ca_1dcnn: return "rnn_ca_1dcnn";
        case Architecture::rnn_ta_ca_1dcnn: return "rnn_ta_ca_1dcnn";
    }
    return "?";
}

inline Architecture parse_architecture(const std::string& s) {
    for (Architecture a : {Architecture::rnn_1dcnn, Architecture::rnn_ta_1dcnn, Architecture::rnn_ca_1dcnn,
                           Architecture::rnn_ta_ca_1dcnn})
        if (to_string(a) == s) return a;
    throw ConfigError("unknown architecture \"" + s + "\"");
}

inline bool has_ta(Architecture a) { return a == Architecture::rnn_ta_1dcnn || a == Architecture::rnn_ta_ca_1dcnn; }
inline bool has_ca(Architecture a) { return a == Architecture::rnn_ca_1dcnn || a == Architecture::rnn_ta_ca_1dcnn; }

inline std::string to_string(TemporalScoreMode m) {
    switch (m) {
        case TemporalScoreMode::learned: return "learned";
        case TemporalScoreMode::constant: return "constant";
        case TemporalScoreMode::last_step: return "last_step";
    }
    return "?";
}

inline TemporalScoreMode parse_ta_mode(const std::string& s) {
    if (s == "learned") return TemporalScoreMode::learned;
    if (s == "constant") return TemporalScoreMode::constant;
    if (s == "last_step") return TemporalScoreMode::last_step;
    throw ConfigError("unknown temporal attention mode \"" + s + "\"");
}

struct ModelConfig {
    Architecture architecture = Architecture::rnn_ta_ca_1dcnn;
    std::size_t h_size = 3;
    std::size_t n_he = 3;
    std::size_t he_size = 0;  // 0: same as h_size
    CnnConfig cnn;
    std::size_t n_cy = 30;
    Variant variant = Variant::combined;
    std::uint64_t seed = 0;
    TemporalScoreMode ta_mode = TemporalScoreMode::learned;
    std::size_t n_ts = 0;  // 0: the variant's resampling length

    std::size_t head_size() const { return he_size ? he_size : h_size; }
    std::size_t n_vars() const { return variant_shape(variant).n_vars; }
    std::size_t n_steps() const { return n_ts ? n_ts : variant_shape(variant).n_steps; }
    /// Width of the per-cycle vectors entering the CNN head.
    std::size_t context_width() const { return has_ca(architecture) ? head_size() : h_size; }

    void validate() const {
        if (h_size < 1) throw ConfigError("h_size must be >= 1");
        if (n_cy < 1) throw ConfigError("n_cy must be >= 1");
        if (has_ca(architecture) && n_he < 1) throw ConfigError("CA architectures need n_he >= 1");
        if (cnn.initial_filters < 1) throw ConfigError("CNN initial filters must be >= 1");
        cnn_output_length(n_cy, cnn);
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline nlohmann::json to_json(const ModelConfig& c) {
    return {{"architecture", to_string(c.architecture)},
            {"h_size", c.h_size},
            {"n_he", c.n_he},
            {"he_size", c.he_size},
            {"cnn_initial_filters", c.cnn.initial_filters},
            {"cnn_kernel", c.cnn.kernel},
            {"cnn_pooling_layers", c.cnn.pooling_layers},
            {"cnn_plain_layers", c.cnn.plain_layers},
            {"cnn_dense_hidden", c.cnn.dense_hidden},
            {"n_cy", c.n_cy},
            {"variant", to_string(c.variant)},
            {"seed", c.seed},
            {"ta_mode", to_string(c.ta_mode)},
            {"n_ts", c.n_ts}};
}

/// Reads the keys present in `j`; absent keys keep the values of `base`.
inline ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {}) {
    try {
        if (j.contains("architecture")) base.architecture = parse_architecture(j.at("architecture").get<std::string>());
        if (j.contains("h_size")) base.h_size = j.at("h_size").get<std::size_t>();
        if (j.contains("n_he")) base.n_he = j.at("n_he").get<std::size_t>();
        if (j.contains("he_size")) base.he_size = j.at("he_size").get<std::size_t>();
        if (j.contains("cnn_initial_filters")) base.cnn.initial_filters = j.at("cnn_initial_filters").get<std::size_t>();
        if (j.contains("cnn_kernel")) base.cnn.kernel = j.at("cnn_kernel").get<std::size_t>();
        if (j.contains("cnn_pooling_layers")) base.cnn.pooling_layers = j.at("cnn_pooling_layers").get<std::size_t>();
        if (j.contains("cnn_plain_layers")) base.cnn.plain_layers = j.at("cnn_plain_layers").get<std::size_t>();
        if (j.contains("cnn_dense_hidden")) base.cnn.dense_hidden = j.at("cnn_dense_hidden").get<std::size_t>();
        if (j.contains("n_cy")) base.n_cy = j.at("n_cy").get<std::size_t>();
        if (j.contains("variant")) base.variant = parse_variant(j.at("variant").get<std::string>());
        if (j.contains("seed")) base.seed = j.at("seed").get<std::uint64_t>();
        if (j.contains("ta_mode")) base.ta_mode = parse_ta_mode(j.at("ta_mode").get<std::string>());
        if (j.contains("n_ts")) base.n_ts = j.at("n_ts").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad model config: ") + e.what());
    }
    return base;
}

/// Named parameter tensors in a fixed order.
class ParamStore {
public:
    void add(std::string name, Tensor value) {
        require(!find(name), "duplicate parameter " + name);
        items_.emplace_back(std::move(name), std::move(value));
    }

    std::size_t size() const noexcept { return items_.size(); }
    const std::string& name(std::size_t i) const { return items_.at(i).first; }
    Tensor& operator[](std::size_t i) { return items_.at(i).second; }
    const Tensor& operator[](std::size_t i) const { return items_.at(i).second; }

    std::optional<std::size_t> find(const std::string& name) const {
        for (std::size_t i = 0; i < items_.size(); ++i)
            if (items_[i].first == name) return i;
        return std::nullopt;
    }

    Tensor& at(const std::string& name) {
        auto i = find(name);
        require(i.has_value(), "no parameter named " + name);
        return items_[*i].second;
    }
    const Tensor& at(const std::string& name) const { return const_cast<ParamStore*>(this)->at(name); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& [_, t] : items_) n += t.size();
        return n;
    }

    friend bool operator==(const ParamStore&, const ParamStore&) = default;

private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

/// Parameter layout: (name, shape, fan_in). fan_in 0 means zero-initialised.
struct ParamSpec {
    std::string name;
    Shape shape;
    std::size_t fan_in;
};

inline std::vector<ParamSpec> param_layout(const ModelConfig& c) {
    std::vector<ParamSpec> out;
    const std::size_t h = c.h_size, nv = c.n_vars();
    out.push_back({"gru.input_weights", {nv, 3 * h}, nv});
    out.push_back({"gru.hidden_weights", {h, 3 * h}, h});
    out.push_back({"gru.input_bias", {1, 3 * h}, h});
    out.push_back({"gru.hidden_bias", {1, 3 * h}, h});
    if (has_ta(c.architecture)) out.push_back({"ta.w_b", {1, h}, 0});
    if (has_ca(c.architecture)) {
        const std::size_t he = c.head_size();
        for (std::size_t p = 0; p < c.n_he; ++p) {
            std::string pre = "ca.head" + std::to_string(p);
            out.push_back({pre + ".query", {h, he}, h});
            out.push_back({pre + ".key", {h, he}, h});
            out.push_back({pre + ".value", {h, he}, h});
        }
        out.push_back({"ca.out", {he, c.n_he * he}, c.n_he * he});
    }
    auto convs = cnn_layers(c.context_width(), c.cnn);
    for (std::size_t i = 0; i < convs.size(); ++i) {
        std::string pre = "cnn.conv" + std::to_string(i);
        std::size_t fan = convs[i].in_channels * c.cnn.kernel;
        out.push_back({pre + ".kernel", {convs[i].out_channels, convs[i].in_channels, c.cnn.kernel}, fan});
        out.push_back({pre + ".bias", {1, convs[i].out_channels}, fan});
    }
    std::size_t width = cnn_output_length(c.n_cy, c.cnn) * (convs.empty() ? c.context_width() : convs.back().out_channels);
    if (c.cnn.dense_hidden > 0) {
        out.push_back({"cnn.dense_hidden.w", {width, c.cnn.dense_hidden}, width});
        out.push_back({"cnn.dense_hidden.b", {1, c.cnn.dense_hidden}, width});
        width = c.cnn.dense_hidden;
    }
    out.push_back({"cnn.dense.w", {width, 1}, width});
    out.push_back({"cnn.dense.b", {1, 1}, width});
    return out;
}

/// Uniform ±1/√fan_in from a per-seed stream; the TA score vector starts at zero.
inline ParamStore init_params(const ModelConfig& c) {
    c.validate();
    std::mt19937_64 gen(c.seed);
    ParamStore store;
    for (const ParamSpec& spec : param_layout(c)) {
        Tensor t(spec.shape);
        if (spec.fan_in > 0) {
            double bound = 1.0 / std::sqrt(static_cast<double>(spec.fan_in));
            for (double& v : t.data()) {
                double u = static_cast<double>(gen() >> 11) * 0x1.0p-53;
                v = (2.0 * u - 1.0) * bound;
            }
        }
        store.add(spec.name, std::move(t));
    }
    return store;
}

struct ForwardResult {
    Var prediction;               // 1×1, normalised target space
    std::optional<Var> ta_scores; // n_cy × n_ts
    std::vector<Var> ca_scores;   // per head, n_cy × n_cy
    Var contexts;                 // n_cy × context width, input of the CNN head
};

class Model {
public:
    explicit Model(ModelConfig config) : config_(std::move(config)), params_(init_params(config_)) {}

    Model(ModelConfig config, ParamStore params) : config_(std::move(config)), params_(std::move(params)) {
        config_.validate();
        auto layout = param_layout(config_);
        require(layout.size() == params_.size(), "parameter count does not match configuration");
        for (std::size_t i = 0; i < layout.size(); ++i) {
            require(params_.name(i) == layout[i].name, "parameter order mismatch at " + layout[i].name);
            require(params_[i].shape() == layout[i].shape, "parameter shape mismatch for " + layout[i].name);
        }
    }

    const ModelConfig& config() const noexcept { return config_; }
    ParamStore& params() noexcept { return params_; }
    const ParamStore& params() const noexcept { return params_; }

    /// Puts every parameter on `tape`, as trainable leaves or as constants.
    std::vector<Var> bind(Tape& tape, bool trainable) const {
        std::vector<Var> vars;
        vars.reserve(params_.size());
        for (std::size_t i = 0; i < params_.size(); ++i)
            vars.push_back(trainable ? tape.leaf(params_[i]) : tape.constant(params_[i]));
        return vars;
    }

    /// `x` is n_v × (n_cy·n_ts), already normalised.
    ForwardResult forward(Tape& tape, std::span<const Var> p, const Tensor& x) const {
        const ModelConfig& c = config_;
        const std::size_t n_ts = c.n_steps();
        require(p.size() == params_.size(), "forward: parameter count mismatch");
        require(x.rank() == 2 && x.rows() == c.n_vars() && x.cols() == c.n_cy * n_ts,
                "forward: input shape " + shape_str(x.shape()) + " does not match " + to_string(c.variant) +
                    " with n_cy = " + std::to_string(c.n_cy));
        GruWeights gru{p[0], p[1], p[2], p[3]};
        std::size_t k = 4;
        Var steps = tape.constant(transpose_of(x));
        Var hidden = gru_forward(gru, steps, c.n_cy);

        ForwardResult r;
        Var ctx;
        if (has_ta(c.architecture)) {
            auto ta = temporal_attention(hidden, p[k++], c.n_cy, c.ta_mode);
            ctx = ta.context;
            r.ta_scores = ta.scores;
        } else {
            ctx = last_hidden(hidden, c.n_cy);
        }
        if (has_ca(c.architecture)) {
            std::vector<HeadWeights> heads;
            for (std::size_t h = 0; h < c.n_he; ++h, k += 3) heads.push_back({p[k], p[k + 1], p[k + 2]});
            auto mha = multi_head_attention(ctx, heads, p[k++]);
            ctx = mha.output;
            r.ca_scores = std::move(mha.scores);
        }
        r.contexts = ctx;

        CnnWeights cw;
        std::size_t n_conv = c.cnn.plain_layers + c.cnn.pooling_layers;
        for (std::size_t i = 0; i < n_conv; ++i) {
            cw.kernels.push_back(p[k++]);
            cw.biases.push_back(p[k++]);
        }
        if (c.cnn.dense_hidden > 0) {
            cw.dense_hidden_w = p[k++];
            cw.dense_hidden_b = p[k++];
        }
        cw.dense_w = p[k++];
        cw.dense_b = p[k++];
        r.prediction = cnn_head(ctx, cw, c.cnn);
        return r;
    }

    struct Inference {
        double prediction = 0.0;  // normalised target space
        std::optional<Tensor> ta_scores;
        std::vector<Tensor> ca_scores;
    };

    Inference infer(const Tensor& x) const {
        Tape tape;
        auto vars = bind(tape, false);
        ForwardResult r = forward(tape, vars, x);
        Inference out;
        out.prediction = r.prediction.value().item();
        if (r.ta_scores) out.ta_scores = r.ta_scores->value();
        for (const Var& s : r.ca_scores) out.ca_scores.push_back(s.value());
        return out;
    }

    Inference infer(const InputTensor& x) const {
        require(x.variant == config_.variant && x.n_cycles == config_.n_cy && x.n_steps == config_.n_steps(),
                "input tensor variant/n_cy does not match the model configuration");
        return infer(x.data);
    }

private:
    static Tensor transpose_of(const Tensor& x) {
        Tensor t({x.cols(), x.rows()});
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < x.cols(); ++j) t(j, i) = x(i, j);
        return t;
    }

    ModelConfig config_;
    ParamStore params_;
};

/// Min-max scaling of the knee-onset target, fitted on training labels.
struct TargetScaler {
    double min = 0.0;
    double max = 1.0;

    static TargetScaler fit(std::span<const double> y) {
        require(!y.empty(), "target scaler: no training targets");
        auto [lo, hi] = std::minmax_element(y.begin(), y.end());
        return {*lo, *hi};
    }
    double span() const { return max > min ? max - min : 1.0; }
    double normalize(double y) const { return (y - min) / span(); }
    double denormalize(double z) const { return z * span() + min; }
};

struct Checkpoint {
    ModelConfig config;
    ParamStore params;
    MinMaxNormalizer input_normalizer;
    TargetScaler target;
    std::vector<std::string> train_ids, val_ids, test_ids;
    PreprocessOptions preprocess;
};

inline constexpr int checkpoint_version = 1;

inline nlohmann::json to_json(const Checkpoint& ck) {
    nlohmann::json params = nlohmann::json::array();
    for (std::size_t i = 0; i < ck.params.size(); ++i)
        params.push_back({{"name", ck.params.name(i)},
                          {"shape", ck.params[i].shape()},
                          {"data", ck.params[i].values()}});
    return {{"format", "kneeattn-checkpoint"},
            {"version", checkpoint_version},
            {"config", to_json(ck.config)},
            {"params", params},
            {"input_normalizer", {{"min", ck.input_normalizer.mins()}, {"max", ck.input_normalizer.maxs()}}},
            {"target", {{"min", ck.target.min}, {"max", ck.target.max}}},
            {"split", {{"train", ck.train_ids}, {"val", ck.val_ids}, {"test", ck.test_ids}}},
            {"preprocess",
             {{"clean", ck.preprocess.clean},
              {"smooth", ck.preprocess.smooth},
              {"sg_window", ck.preprocess.sg_window},
              {"sg_order", ck.preprocess.sg_order},
              {"step_minutes", ck.preprocess.step_minutes},
              {"voltage_high", ck.preprocess.voltage_high},
              {"voltage_low", ck.preprocess.voltage_low}}}};
}

inline Checkpoint checkpoint_from_json(const nlohmann::json& j) {
    try {
        if (j.value("format", "") != "kneeattn-checkpoint") throw ConfigError("not a kneeattn checkpoint");
        if (j.at("version").get<int>() != checkpoint_version)
            throw ConfigError("unsupported checkpoint version " + j.at("version").dump());
        Checkpoint ck;
        ck.config = model_config_from_json(j.at("config"));
        for (const auto& p : j.at("params"))
            ck.params.add(p.at("name").get<std::string>(),
                          Tensor(p.at("shape").get<Shape>(), p.at("data").get<std::vector<double>>()));
        Model check(ck.config, ck.params);
        const auto& n = j.at("input_normalizer");
        ck.input_normalizer = MinMaxNormalizer(n.at("min").get<std::vector<double>>(), n.at("max").get<std::vector<double>>());
        ck.target = {j.at("target").at("min").get<double>(), j.at("target").at("max").get<double>()};
        const auto& s = j.at("split");
        ck.train_ids = s.at("train").get<std::vector<std::string>>();
        ck.val_ids = s.at("val").get<std::vector<std::string>>();
        ck.test_ids = s.at("test").get<std::vector<std::string>>();
        if (j.contains("preprocess")) {
            const auto& pp = j.at("preprocess");
            ck.preprocess.clean = pp.at("clean").get<bool>();
            ck.preprocess.smooth = pp.at("smooth").get<bool>();
            ck.preprocess.sg_window = pp.at("sg_window").get<std::size_t>();
            ck.preprocess.sg_order = pp.at("sg_order").get<std::size_t>();
            ck.preprocess.step_minutes = pp.at("step_minutes").get<double>();
            ck.preprocess.voltage_high = pp.at("voltage_high").get<double>();
            ck.preprocess.voltage_low = pp.at("voltage_low").get<double>();
        }
        return ck;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed checkpoint: ") + e.what());
    } catch (const ContractError& e) {
        throw ConfigError(std::string("inconsistent checkpoint: ") + e.what());
    }
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
    std::ofstream out(path);
    if (!out) throw IngestError("cannot write " + path.string());
    out << to_json(ck).dump(1) << '\n';
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot read " + path.string());
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
    }
    return checkpoint_from_json(j);
}

}  // namespace kneeattn
