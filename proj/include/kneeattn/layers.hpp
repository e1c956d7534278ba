#pragma once

// GRU encoder, temporal attention, (multi-head) self-attention and the 1D CNN
// regression head, all built from the ops in tensor.hpp.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "kneeattn/error.hpp"
#include "kneeattn/tensor.hpp"

namespace kneeattn {

/// Hidden-state sequences for every cycle: (n_seq·n_ts)×h. The recurrent state
/// starts from zero at each cycle boundary.
inline Var gru_forward(const GruWeights& weights, Var inputs, std::size_t n_seq) {
    return gru_sequence(inputs, weights, n_seq);
}

enum class TemporalScoreMode {
    learned,    // softmax of w_b · h_i
    constant,   // fixed 1/n_ts on every step
    last_step,  // all mass on the final hidden state
};

struct TemporalAttentionOutput {
    Var context;  // n_seq × h
    Var scores;   // n_seq × n_ts, rows are probability vectors
};

/// alpha_i = exp(w_b·h_i) / Σ exp(w_b·h_i'), ct = Σ alpha_i h_i, per sequence.
/// `w_b` is 1×h; `hidden` is (n_seq·n_ts)×h.
inline TemporalAttentionOutput temporal_attention(Var hidden, Var w_b, std::size_t n_seq,
                                                  TemporalScoreMode mode = TemporalScoreMode::learned) {
    const Tensor& hv = hidden.value();
    require(n_seq >= 1 && hv.rows() % n_seq == 0, "temporal_attention: rows must be a multiple of n_seq");
    std::size_t n_ts = hv.rows() / n_seq;
    Var scores;
    switch (mode) {
        case TemporalScoreMode::learned: {
            Var refined = matmul(hidden, transpose(w_b));  // (n_seq·n_ts)×1
            scores = softmax_rows(reshape(refined, {n_seq, n_ts}), 1.0);
            break;
        }
        case TemporalScoreMode::constant:
            scores = hidden.tape().constant(Tensor({n_seq, n_ts}, 1.0 / static_cast<double>(n_ts)));
            break;
        case TemporalScoreMode::last_step: {
            Tensor onehot({n_seq, n_ts});
            for (std::size_t s = 0; s < n_seq; ++s) onehot(s, n_ts - 1) = 1.0;
            scores = hidden.tape().constant(std::move(onehot));
            break;
        }
    }
    return {segment_weighted_sum(scores, hidden), scores};
}

/// Last hidden state of each sequence.
inline Var last_hidden(Var hidden, std::size_t n_seq) {
    std::size_t n_ts = hidden.value().rows() / n_seq;
    std::vector<std::size_t> idx(n_seq);
    for (std::size_t s = 0; s < n_seq; ++s) idx[s] = s * n_ts + n_ts - 1;
    return gather_rows(hidden, std::move(idx));
}

struct HeadWeights {
    Var query;  // d_model × he_size
    Var key;    // d_model × he_size
    Var value;  // d_model × he_size
};

struct SelfAttentionOutput {
    Var head;    // n × d_v
    Var scores;  // n × n (query × key)
};

/// Q = XW^Q, K = XW^K, V = XW^V; AS = softmax(QKᵀ/√d_k); HE = AS·V.
inline SelfAttentionOutput self_attention(Var x, const HeadWeights& w) {
    require(w.query.value().rank() == 2 && w.key.value().rank() == 2 && w.value.value().rank() == 2,
            "self_attention: projection weights must be matrices");
    require(w.query.value().cols() == w.key.value().cols(), "self_attention: d_q must equal d_k");
    Var q = matmul(x, w.query);
    Var k = matmul(x, w.key);
    Var v = matmul(x, w.value);
    double dk = static_cast<double>(w.key.value().cols());
    Var scores = softmax_rows(matmul(q, transpose(k)), std::sqrt(dk));
    return {matmul(scores, v), scores};
}

struct MultiHeadOutput {
    Var output;               // n × he_size
    std::vector<Var> scores;  // per head, n × n
};

/// Concat(HE_1..HE_p)·(W^O)ᵀ with W^O of shape he_size × (n_he·he_size).
inline MultiHeadOutput multi_head_attention(Var x, const std::vector<HeadWeights>& heads, Var w_out) {
    require(!heads.empty(), "multi_head_attention: at least one head required");
    std::vector<Var> outs;
    MultiHeadOutput result;
    for (const HeadWeights& hw : heads) {
        SelfAttentionOutput sa = self_attention(x, hw);
        outs.push_back(sa.head);
        result.scores.push_back(sa.scores);
    }
    Var cat = outs.size() == 1 ? outs.front() : concat_cols(outs);
    require(w_out.value().rank() == 2 && w_out.value().cols() == cat.value().cols(),
            "multi_head_attention: W^O must be he_size x (n_he*he_size)");
    result.output = matmul(cat, transpose(w_out));
    return result;
}

/// Hyperparameters of the 1D CNN head (Table S2 naming: f_i, k_i, n_p, n_np).
struct CnnConfig {
    std::size_t initial_filters = 5;
    std::size_t kernel = 3;
    std::size_t pooling_layers = 1;
    std::size_t plain_layers = 1;
    std::size_t dense_hidden = 0;  // 0: flatten maps straight to the scalar

    friend bool operator==(const CnnConfig&, const CnnConfig&) = default;
};

struct ConvLayerSpec {
    std::size_t in_channels;
    std::size_t out_channels;
    bool pooled;
};

/// Plain conv layers at f_i filters come first, then conv+maxpool(2) blocks
/// whose filter count doubles after every pooling layer.
inline std::vector<ConvLayerSpec> cnn_layers(std::size_t channels, const CnnConfig& cfg) {
    std::vector<ConvLayerSpec> layers;
    std::size_t in = channels;
    for (std::size_t i = 0; i < cfg.plain_layers; ++i) {
        layers.push_back({in, cfg.initial_filters, false});
        in = cfg.initial_filters;
    }
    std::size_t filters = cfg.initial_filters;
    for (std::size_t i = 0; i < cfg.pooling_layers; ++i) {
        layers.push_back({in, filters, true});
        in = filters;
        filters *= 2;
    }
    return layers;
}

/// Length of the feature map entering the dense layer. Throws ConfigError if
/// the conv/pool stack does not fit into `length` cycles.
inline std::size_t cnn_output_length(std::size_t length, const CnnConfig& cfg) {
    if (cfg.kernel < 1) throw ConfigError("CNN kernel size must be >= 1");
    std::size_t len = length;
    std::size_t layer = 0;
    for (const ConvLayerSpec& spec : cnn_layers(1, cfg)) {
        ++layer;
        if (len < cfg.kernel)
            throw ConfigError("CNN length underflow at layer " + std::to_string(layer) + ": length " +
                              std::to_string(len) + " < kernel " + std::to_string(cfg.kernel));
        len = len - cfg.kernel + 1;
        if (spec.pooled) {
            if (len < 2)
                throw ConfigError("CNN length underflow at pooling layer " + std::to_string(layer));
            len /= 2;
        }
    }
    return len;
}

struct CnnWeights {
    std::vector<Var> kernels;  // c_out × c_in × k
    std::vector<Var> biases;   // 1 × c_out
    Var dense_hidden_w;        // flat × dense_hidden (unused when dense_hidden == 0)
    Var dense_hidden_b;
    Var dense_w;               // width × 1
    Var dense_b;               // 1 × 1
};

/// Treats the context matrix (n_cy × d) as d channels over n_cy positions.
/// conv layers use tanh; the dense head is linear.
inline Var cnn_head(Var context, const CnnWeights& w, const CnnConfig& cfg) {
    require(w.kernels.size() == cfg.plain_layers + cfg.pooling_layers, "cnn_head: layer count mismatch");
    std::vector<ConvLayerSpec> specs = cnn_layers(context.value().cols(), cfg);
    Var feat = transpose(context);
    for (std::size_t i = 0; i < specs.size(); ++i) {
        feat = tanh(conv1d(feat, w.kernels[i], &w.biases[i], 1));
        if (specs[i].pooled) feat = max_pool1d(feat, 2);
    }
    Var flat = reshape(feat, {1, feat.value().size()});
    if (cfg.dense_hidden > 0) flat = tanh(add_row_bias(matmul(flat, w.dense_hidden_w), w.dense_hidden_b));
    return add_row_bias(matmul(flat, w.dense_w), w.dense_b);
}

}  // namespace kneeattn
