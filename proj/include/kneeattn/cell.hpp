#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <iomanip>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "kneeattn/error.hpp"

namespace kneeattn {

/// Two-step constant-current charging policy "C1(Q1%)-C2" up to 80% SOC.
struct ChargingPolicy {
    double first_rate = 1.0;        // C-rate from 0 to transition_soc
    double transition_soc = 80.0;   // percent SOC, in (0, 80]
    double second_rate = 1.0;       // C-rate from transition_soc to 80%

    friend bool operator==(const ChargingPolicy&, const ChargingPolicy&) = default;
};

/// Parses "5.4C(40%)-3.6C". The trailing "C" is optional because a few
/// published policy strings omit it ("4C(31%)-5").
inline ChargingPolicy parse_policy(const std::string& text) {
    static const std::regex pattern(R"(^\s*([0-9]*\.?[0-9]+)C\(([0-9]*\.?[0-9]+)%\)-([0-9]*\.?[0-9]+)C?\s*$)");
    std::smatch m;
    if (!std::regex_match(text, m, pattern)) throw IngestError("unrecognised charging policy \"" + text + "\"");
    ChargingPolicy p{std::stod(m[1].str()), std::stod(m[2].str()), std::stod(m[3].str())};
    if (!(p.first_rate > 0.0 && p.second_rate > 0.0))
        throw IngestError("charging policy \"" + text + "\" has a non-positive C-rate");
    if (!(p.transition_soc > 0.0 && p.transition_soc <= 80.0))
        throw IngestError("charging policy \"" + text + "\" has transition SOC outside (0, 80]");
    return p;
}

inline std::string format_policy(const ChargingPolicy& p) {
    auto num = [](double v) {
        std::ostringstream os;
        os << std::setprecision(6) << v;
        return os.str();
    };
    return num(p.first_rate) + "C(" + num(p.transition_soc) + "%)-" + num(p.second_rate) + "C";
}

/// One charge-rest-discharge-rest cycle sampled in time.
struct CycleTrace {
    std::vector<double> t;   // minutes, strictly increasing
    std::vector<double> V;   // volts
    std::vector<double> I;   // amperes, charge positive
    std::vector<double> T;   // degrees C
    std::vector<double> Qc;  // Ah charged
    std::vector<double> Qd;  // Ah discharged

    std::size_t size() const noexcept { return t.size(); }

    /// Summary discharge capacity of the cycle.
    double discharge_capacity() const { return Qd.empty() ? 0.0 : *std::max_element(Qd.begin(), Qd.end()); }

    friend bool operator==(const CycleTrace&, const CycleTrace&) = default;
};

struct CellRecord {
    std::string cell_id;
    int batch = 1;
    ChargingPolicy policy;
    std::vector<CycleTrace> cycles;  // cycles[k] is cycle k+1

    /// (cycle, Q_end) pairs for the capacity-fade curve.
    std::vector<std::pair<double, double>> fade_curve() const {
        std::vector<std::pair<double, double>> out;
        out.reserve(cycles.size());
        for (std::size_t k = 0; k < cycles.size(); ++k)
            out.emplace_back(static_cast<double>(k + 1), cycles[k].discharge_capacity());
        return out;
    }

    friend bool operator==(const CellRecord&, const CellRecord&) = default;
};

/// Checks the per-cycle invariants; `cycle` is 1-based for the message.
inline void validate_cycle(const CycleTrace& c, const std::string& cell_id, std::size_t cycle) {
    auto where = [&] { return "cell " + cell_id + " cycle " + std::to_string(cycle); };
    std::size_t n = c.t.size();
    if (c.V.size() != n || c.I.size() != n || c.T.size() != n || c.Qc.size() != n || c.Qd.size() != n)
        throw IngestError(where() + ": series lengths differ");
    if (n < 2) throw IngestError(where() + ": fewer than 2 samples");
    constexpr double tol = 1e-9;
    for (std::size_t i = 0; i < n; ++i) {
        if (!std::isfinite(c.t[i]) || !std::isfinite(c.V[i]) || !std::isfinite(c.I[i]) || !std::isfinite(c.T[i]) ||
            !std::isfinite(c.Qc[i]) || !std::isfinite(c.Qd[i]))
            throw IngestError(where() + ": non-finite value at sample " + std::to_string(i));
        if (i == 0) continue;
        if (!(c.t[i] > c.t[i - 1]))
            throw IngestError(where() + ": time not strictly increasing at sample " + std::to_string(i));
        if (c.Qc[i] < c.Qc[i - 1] - tol)
            throw IngestError(where() + ": Qc decreases at sample " + std::to_string(i));
        if (c.Qd[i] < c.Qd[i - 1] - tol)
            throw IngestError(where() + ": Qd decreases at sample " + std::to_string(i));
    }
}

inline void validate_cell(const CellRecord& cell) {
    if (cell.cell_id.empty()) throw IngestError("cell with empty id");
    for (std::size_t k = 0; k < cell.cycles.size(); ++k) validate_cycle(cell.cycles[k], cell.cell_id, k + 1);
}

}  // namespace kneeattn
