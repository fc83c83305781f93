#pragma once

#include <charconv>
#include <cmath>
#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "meswitch/error.hpp"
#include "meswitch/numerics.hpp"
#include "meswitch/svd.hpp"

namespace meswitch {

/// Sizes for the shared-base serving layout: one base of size psi, M
/// compressed deltas of size psi_tilde each, and a router of size phi.
struct SizeModel {
    double psi = 0.0;
    double psi_tilde = 0.0;
    double phi = 0.0;
    std::size_t m = 1;

    void validate() const {
        require(std::isfinite(psi) && psi > 0.0, ErrorKind::invalid_argument, "SizeModel: base size must be positive");
        require(std::isfinite(psi_tilde) && psi_tilde > 0.0, ErrorKind::invalid_argument,
                "SizeModel: delta size must be positive");
        require(std::isfinite(phi) && phi >= 0.0, ErrorKind::invalid_argument,
                "SizeModel: router size must be non-negative");
        require(m >= 1, ErrorKind::invalid_argument, "SizeModel: need at least one expert");
    }
};

/// Storage of M full experts over storage of base + M deltas + router.
inline double compression_ratio(const SizeModel& s) {
    s.validate();
    const double m = static_cast<double>(s.m);
    return m * s.psi / (s.psi + m * s.psi_tilde + s.phi);
}

struct RatioPoint {
    std::size_t m = 0;
    double ratio = 0.0;
};

inline std::vector<RatioPoint> ratio_curve(SizeModel s, std::size_t m_lo, std::size_t m_hi) {
    require(m_lo >= 1 && m_lo <= m_hi, ErrorKind::invalid_argument,
            "ratio_curve: bad range " + std::to_string(m_lo) + ".." + std::to_string(m_hi));
    std::vector<RatioPoint> out;
    for (std::size_t m = m_lo; m <= m_hi; ++m) {
        s.m = m;
        out.push_back(RatioPoint{m, compression_ratio(s)});
    }
    return out;
}

/// Locale-independent shortest round-trip formatting.
inline std::string format_double(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

inline std::string format_fixed(double v, int precision) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, precision);
    return std::string(buf, res.ptr);
}

inline void write_ratio_csv(std::ostream& out, const std::vector<RatioPoint>& curve) {
    out << "m,ratio\n";
    for (const auto& p : curve) {
        out << p.m << ',' << format_fixed(p.ratio, 6) << '\n';
    }
}

/// c_r = sum_{i<=r} sigma_i^2 / sum_i sigma_i^2 for r = 1..min(m, n).
inline std::vector<double> cumulative_energy(const DenseMatrix& delta) {
    require(!delta.empty(), ErrorKind::invalid_argument, "cumulative_energy: empty matrix");
    const SvdResult f = svd(delta);
    double total = 0.0;
    for (double s : f.s) {
        total += s * s;
    }
    std::vector<double> c;
    c.reserve(f.s.size());
    double acc = 0.0;
    for (double s : f.s) {
        acc += s * s;
        c.push_back(total > 0.0 ? acc / total : 1.0);
    }
    if (!c.empty()) {
        c.back() = 1.0;
    }
    return c;
}

inline std::vector<std::vector<double>> cumulative_energy_report(const std::vector<DenseMatrix>& deltas) {
    std::vector<std::vector<double>> out;
    out.reserve(deltas.size());
    for (const auto& d : deltas) {
        out.push_back(cumulative_energy(d));
    }
    return out;
}

inline void write_energy_csv(std::ostream& out, const std::vector<std::vector<double>>& report) {
    out << "layer,rank,energy\n";
    for (std::size_t l = 0; l < report.size(); ++l) {
        for (std::size_t r = 0; r < report[l].size(); ++r) {
            out << l << ',' << (r + 1) << ',' << format_fixed(report[l][r], 6) << '\n';
        }
    }
}

}  // namespace meswitch
