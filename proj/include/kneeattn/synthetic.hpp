#pragma once

// Synthetic cycling corpus with the structure of the public fast-charging
// dataset: three batches that differ in rest length, two-step CC charge to
// 80% SOC, 1C top-up, 4C discharge, and a double Bacon-Watts capacity fade
// with known breakpoints. A per-cell stress level couples the charge policy,
// internal resistance and (in the long-rest batch) the rest length to the
// knee-onset, so early cycles carry information about lifespan.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "kneeattn/cell.hpp"
#include "kneeattn/error.hpp"
#include "kneeattn/knee.hpp"

namespace kneeattn {

struct SyntheticSpec {
    std::size_t n_cells = 40;
    std::array<double, 3> batch_fractions{0.35, 0.30, 0.35};
    double knee_min = 300.0;          // cycles, short-rest batches
    double knee_max = 1100.0;
    double long_rest_knee_scale = 0.45;
    double capacity_noise = 0.002;    // Ah, on each cycle's discharge capacity
    double voltage_noise = 0.001;     // V
    double temperature_noise = 0.05;  // °C
    std::size_t profile_cycles = 100; // cycles with full time series
    double sample_minutes = 0.25;
    std::optional<double> fixed_knee; // force every cell's knee-onset
};

struct SyntheticTruth {
    std::string cell_id;
    int batch = 1;
    double c_ko = 0.0;
    double c_2nd = 0.0;
    double rest_after_charge = 0.0;     // minutes
    double rest_after_discharge = 0.0;  // minutes
    double stress = 0.0;                // latent in [0, 1]
};

struct SyntheticCorpus {
    std::vector<CellRecord> cells;
    std::vector<SyntheticTruth> truth;
};

/// Fade segment slopes (Ah/cycle) before, between and after the breakpoints.
struct FadeShape {
    double q0 = 1.07;
    double c_ko = 500.0;
    double c_2nd = 700.0;
    double slope_pre = -4e-5;
    double slope_mid = -3e-4;
    double slope_post = -1.5e-3;
    double gamma = 10.0;

    /// Coefficients of the double Bacon-Watts model with these slopes and Q(1) = q0.
    std::array<double, 4> alpha() const {
        double a2 = 0.5 * (slope_mid - slope_pre);
        double a3 = 0.5 * (slope_post - slope_mid);
        double a1 = slope_post - a2 - a3;
        std::array<double, 4> a{0.0, a1, a2, a3};
        a[0] = q0 - dbw_model(a, 1.0, c_ko, c_2nd, gamma);
        return a;
    }

    double capacity(double cycle) const { return dbw_model(alpha(), cycle, c_ko, c_2nd, gamma); }
};

/// Knee-shaped fade typical of a cell with the given knee-onset.
inline FadeShape typical_fade(double c_ko, double q0 = 1.07, double gamma = 10.0) {
    FadeShape f;
    f.q0 = q0;
    f.c_ko = c_ko;
    f.c_2nd = c_ko + 0.35 * c_ko + 30.0;
    f.slope_pre = -0.02 / c_ko;
    f.slope_mid = -0.07 / (f.c_2nd - c_ko);
    f.slope_post = -0.5 / c_ko;
    f.gamma = gamma;
    return f;
}

/// Capacity at cycles 1..n with optional Gaussian noise.
inline std::vector<std::pair<double, double>> sample_fade(const FadeShape& f, std::size_t n, double noise,
                                                          std::mt19937_64& rng) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::vector<std::pair<double, double>> out;
    out.reserve(n);
    for (std::size_t c = 1; c <= n; ++c) {
        double q = f.capacity(static_cast<double>(c));
        if (noise > 0.0) q += noise * gauss(rng);
        out.emplace_back(static_cast<double>(c), q);
    }
    return out;
}

/// Cycles until end of life (the post-transition segment has lasted 25% of c_ko).
inline std::size_t fade_length(const FadeShape& f) {
    return static_cast<std::size_t>(std::ceil(f.c_2nd + 0.25 * f.c_ko));
}

namespace detail {

/// Policies of the public dataset grouped by batch (a subset of each batch).
inline const std::vector<std::string>& batch_policies(int batch) {
    static const std::vector<std::string> b1{"3.6C(80%)-3.6C", "4C(80%)-4C",    "4.4C(80%)-4.4C", "4.8C(80%)-4.8C",
                                             "5.4C(40%)-3.6C", "5.4C(50%)-3C",  "5.4C(60%)-3C",   "5.4C(70%)-3C",
                                             "6C(40%)-3C",     "6C(50%)-3.6C",  "7C(30%)-3.6C",   "7C(40%)-3.6C",
                                             "8C(15%)-3.6C",   "8C(35%)-3.6C",  "5.4C(80%)-5.4C"};
    static const std::vector<std::string> b2{"1C(4%)-6C",      "2C(10%)-6C",    "3.6C(22%)-5.5C", "4C(13%)-5C",
                                             "4.4C(24%)-5C",   "4.65C(44%)-5C", "4.8C(80%)-4.8C", "4.9C(61%)-4.5C",
                                             "5.2C(50%)-4.25C", "5.6C(47%)-4C", "6C(40%)-4C",     "6C(60%)-3C"};
    static const std::vector<std::string> b3{"3.7C(31%)-5.9C", "4.8C(80%)-4.8C", "5C(67%)-4C",     "5.3C(54%)-4C",
                                             "5.6C(19%)-4.6C", "5.6C(36%)-4.3C", "5.9C(15%)-4.6C", "5.9C(60%)-3.1C"};
    return batch == 1 ? b1 : batch == 2 ? b2 : b3;
}

inline double average_rate(const ChargingPolicy& p) {
    return p.first_rate * p.transition_soc / 80.0 + p.second_rate * (80.0 - p.transition_soc) / 80.0;
}

inline double open_circuit_voltage(double soc) {
    soc = std::clamp(soc, 0.0, 1.0);
    return 3.0 + 0.42 * soc + 0.12 * (1.0 - std::exp(-soc / 0.06));
}

struct Phase {
    double duration;  // minutes
    double current;   // A, charge positive
    enum Kind { charge, rest, discharge } kind;
};

struct CellParams {
    ChargingPolicy policy;
    double resistance0;  // Ω at cycle 1
    double resistance_growth;
    double rest_charge;
    double rest_discharge;
    double c_ko;
};

inline CycleTrace simulate_cycle(const CellParams& cell, double capacity, double cycle, const SyntheticSpec& spec,
                                 std::mt19937_64& rng) {
    constexpr double amps_per_c = 1.1;
    constexpr double ambient = 30.0;
    const double ir = cell.resistance0 * (1.0 + cell.resistance_growth * cycle / cell.c_ko);
    const ChargingPolicy& p = cell.policy;
    double i1 = p.first_rate * amps_per_c, i2 = p.second_rate * amps_per_c;
    std::vector<Phase> phases{
        {p.transition_soc / 100.0 * capacity / i1 * 60.0, i1, Phase::charge},
        {(80.0 - p.transition_soc) / 100.0 * capacity / i2 * 60.0, i2, Phase::charge},
        {cell.rest_charge, 0.0, Phase::rest},
        {0.2 * capacity / amps_per_c * 60.0, amps_per_c, Phase::charge},
        {capacity / (4.0 * amps_per_c) * 60.0, -4.0 * amps_per_c, Phase::discharge},
        {cell.rest_discharge, 0.0, Phase::rest},
    };
    phases.erase(std::remove_if(phases.begin(), phases.end(), [](const Phase& ph) { return ph.duration <= 1e-9; }),
                 phases.end());

    // Sample times: uniform grid plus each phase boundary (and just before it)
    // so that current steps are sharp after interpolation.
    std::vector<double> bounds{0.0};
    for (const Phase& ph : phases) bounds.push_back(bounds.back() + ph.duration);
    const double total = bounds.back();
    std::vector<double> times;
    for (double t = 0.0; t < total; t += spec.sample_minutes) times.push_back(t);
    for (std::size_t k = 1; k < bounds.size(); ++k) {
        times.push_back(bounds[k]);
        times.push_back(bounds[k] - 1e-6);
    }
    std::sort(times.begin(), times.end());
    times.erase(std::unique(times.begin(), times.end(), [](double a, double b) { return b - a < 1e-7; }), times.end());

    std::normal_distribution<double> gauss(0.0, 1.0);
    CycleTrace c;
    double soc = 0.0, qc = 0.0, qd = 0.0, temp = ambient, v_last = open_circuit_voltage(0.0), prev_t = 0.0;
    std::size_t phase = 0;
    double rest_start_v = v_last;
    for (double t : times) {
        while (phase + 1 < phases.size() && t >= bounds[phase + 1]) {
            ++phase;
            if (phases[phase].kind == Phase::rest) rest_start_v = v_last;
        }
        const Phase& ph = phases[phase];
        double dt = t - prev_t;
        prev_t = t;
        // Charge/discharge throughput over the step comes from the phase that
        // was active during it; with sharp boundary samples this is exact up to 1e-6 min.
        double di = ph.current * dt / 60.0;
        if (ph.kind == Phase::charge) {
            qc += di;
            soc += di / capacity;
        } else if (ph.kind == Phase::discharge) {
            qd -= di;
            soc += di / capacity;
        }
        soc = std::clamp(soc, 0.0, 1.0);
        double heat = ph.current * ph.current * ir * 1.6;
        temp += dt * (heat - 0.12 * (temp - ambient));
        double v;
        if (ph.kind == Phase::rest) {
            double ocv = open_circuit_voltage(soc);
            v = ocv + (rest_start_v - ocv) * std::exp(-(t - bounds[phase]) / 1.5);
        } else {
            double polar = ph.kind == Phase::discharge ? 0.55 * std::pow(1.0 - soc, 8.0) : 0.04 * soc * soc;
            v = open_circuit_voltage(soc) + ph.current * ir + (ph.kind == Phase::discharge ? -polar : polar);
            v = std::clamp(v, 2.0, 3.6);
        }
        v_last = v;
        c.t.push_back(t);
        c.V.push_back(v + spec.voltage_noise * gauss(rng));
        c.I.push_back(ph.current);
        c.T.push_back(temp + spec.temperature_noise * gauss(rng));
        c.Qc.push_back(qc);
        c.Qd.push_back(qd);
    }
    // Discharge throughput equals this cycle's capacity by construction;
    // rescale to remove the integration error.
    if (qd > 0.0)
        for (double& x : c.Qd) x *= capacity / qd;
    return c;
}

}  // namespace detail

/// Deterministic for a fixed (spec, seed).
inline SyntheticCorpus generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
    require(spec.n_cells >= 1, "generate_synthetic: n_cells must be >= 1");
    require(spec.knee_max >= spec.knee_min && spec.knee_min > 0.0, "generate_synthetic: invalid knee range");
    require(spec.sample_minutes > 0.0, "generate_synthetic: sample_minutes must be positive");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> gauss(0.0, 1.0);

    std::array<std::size_t, 3> counts{};
    std::size_t assigned = 0;
    for (std::size_t b = 1; b < 3; ++b) {
        counts[b] = static_cast<std::size_t>(std::floor(spec.batch_fractions[b] * static_cast<double>(spec.n_cells)));
        assigned += counts[b];
    }
    counts[0] = spec.n_cells - std::min(assigned, spec.n_cells);

    SyntheticCorpus corpus;
    for (int batch = 1; batch <= 3; ++batch) {
        const auto& policies = detail::batch_policies(batch);
        std::vector<ChargingPolicy> sorted;
        for (const auto& s : policies) sorted.push_back(parse_policy(s));
        std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
            return detail::average_rate(a) < detail::average_rate(b);
        });
        for (std::size_t k = 0; k < counts[static_cast<std::size_t>(batch - 1)]; ++k) {
            double stress = unit(rng);
            SyntheticTruth truth;
            truth.cell_id = "b" + std::to_string(batch) + "c" + std::to_string(k);
            truth.batch = batch;
            truth.stress = stress;

            double knee = spec.knee_min + (1.0 - stress) * (spec.knee_max - spec.knee_min);
            if (batch == 2) knee *= spec.long_rest_knee_scale;
            knee *= 1.0 + 0.02 * gauss(rng);
            if (spec.fixed_knee) knee = *spec.fixed_knee;

            detail::CellParams params;
            double pick = std::clamp(stress + 0.1 * gauss(rng), 0.0, 1.0);
            params.policy = sorted[static_cast<std::size_t>(std::lround(pick * static_cast<double>(sorted.size() - 1)))];
            params.resistance0 = 0.016 + 0.010 * stress;
            params.resistance_growth = 0.3;
            params.c_ko = knee;
            switch (batch) {
                case 1:
                    params.rest_charge = 1.0;
                    params.rest_discharge = 1.0 / 60.0;
                    break;
                case 2:
                    params.rest_charge = params.rest_discharge = 3.0 + 4.0 * stress;
                    params.resistance0 += 0.002 * params.rest_charge;
                    break;
                default:
                    params.rest_charge = params.rest_discharge = 5.0 / 60.0;
                    break;
            }
            truth.rest_after_charge = params.rest_charge;
            truth.rest_after_discharge = params.rest_discharge;

            FadeShape fade = typical_fade(knee, 1.07 + 0.01 * gauss(rng));
            truth.c_ko = fade.c_ko;
            truth.c_2nd = fade.c_2nd;

            CellRecord rec;
            rec.cell_id = truth.cell_id;
            rec.batch = batch;
            rec.policy = params.policy;
            std::size_t n_cycles = std::max(fade_length(fade), spec.profile_cycles);
            auto caps = sample_fade(fade, n_cycles, spec.capacity_noise, rng);
            for (std::size_t c = 1; c <= n_cycles; ++c) {
                double cap = std::max(caps[c - 1].second, 0.05);
                if (c <= spec.profile_cycles) {
                    rec.cycles.push_back(detail::simulate_cycle(params, cap, static_cast<double>(c), spec, rng));
                } else {
                    // summary-only cycle: enough to carry the discharge capacity
                    CycleTrace s;
                    s.t = {0.0, 45.0};
                    s.V = {3.3, 2.3};
                    s.I = {1.1, -4.4};
                    s.T = {30.0, 31.0};
                    s.Qc = {0.0, cap};
                    s.Qd = {0.0, cap};
                    rec.cycles.push_back(std::move(s));
                }
            }
            corpus.cells.push_back(std::move(rec));
            corpus.truth.push_back(truth);
        }
    }
    return corpus;
}

}  // namespace kneeattn
