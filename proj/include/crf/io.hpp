#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "crf/flow.hpp"

namespace crf::io {

// ── CRF1 field dumps ────────────────────────────────────────────────────────
//
// Layout (little-endian): "CRF1", uint32 rank, uint32 dims[rank], then
// prod(dims) complex doubles (re, im) in row-major order.

struct FieldDump {
    std::vector<std::uint32_t> dims;
    std::vector<cplx> data;

    std::size_t count() const {
        std::size_t c = 1;
        for (auto d : dims) c *= d;
        return c;
    }
};

namespace detail {

inline bool little_endian() {
    const std::uint16_t x = 1;
    unsigned char b;
    std::memcpy(&b, &x, 1);
    return b == 1;
}

template <class T>
void put(std::ostream& os, T v) {
    if (!little_endian()) throw Error("CRF1 dumps need a little-endian host");
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get(std::istream& is) {
    T v{};
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw InvalidInput("truncated CRF1 file");
    return v;
}

}  // namespace detail

inline void write_dump(const std::filesystem::path& path, const FieldDump& d) {
    if (d.data.size() != d.count()) throw InvalidInput("dump data does not match its dims");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path.string() + " for writing");
    os.write("CRF1", 4);
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(d.dims.size()));
    for (auto x : d.dims) detail::put<std::uint32_t>(os, x);
    for (const auto& z : d.data) {
        detail::put<double>(os, z.real());
        detail::put<double>(os, z.imag());
    }
}

inline FieldDump read_dump(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InvalidInput("cannot open " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "CRF1", 4) != 0) throw InvalidInput(path.string() + " is not a CRF1 dump");
    FieldDump d;
    const auto rank = detail::get<std::uint32_t>(is);
    if (rank == 0 || rank > 8) throw InvalidInput("CRF1 rank out of range");
    for (std::uint32_t k = 0; k < rank; ++k) d.dims.push_back(detail::get<std::uint32_t>(is));
    d.data.resize(d.count());
    for (auto& z : d.data) {
        const double re = detail::get<double>(is);
        const double im = detail::get<double>(is);
        z = cplx(re, im);
    }
    return d;
}

inline std::vector<std::uint32_t> grid_dims(const GridChart& c) {
    return std::vector<std::uint32_t>(c.real_dim(), static_cast<std::uint32_t>(c.resolution()));
}

inline FieldDump dump_of(const ScalarField& f) {
    FieldDump d;
    d.dims = grid_dims(f.chart);
    d.data.assign(f.v.begin(), f.v.end());
    return d;
}

inline FieldDump dump_of(const Form11Field& f) {
    FieldDump d;
    d.dims = grid_dims(f.chart());
    d.dims.push_back(f.dim());
    d.dims.push_back(f.dim());
    d.data.assign(f.raw().begin(), f.raw().end());
    return d;
}

inline ScalarField scalar_from(const FieldDump& d, const GridChart& c) {
    if (d.dims != grid_dims(c)) throw InvalidInput("scalar dump shape does not match the chart");
    ScalarField f(c);
    for (std::size_t p = 0; p < f.size(); ++p) f[p] = d.data[p].real();
    return f;
}

inline Form11Field form_from(const FieldDump& d, const GridChart& c) {
    auto dims = grid_dims(c);
    dims.push_back(c.complex_dim());
    dims.push_back(c.complex_dim());
    if (d.dims != dims) throw InvalidInput("(1,1)-form dump shape does not match the chart");
    Form11Field f(c);
    std::copy(d.data.begin(), d.data.end(), f.raw().begin());
    return f;
}

/// Infers the chart of a scalar dump (all dims equal, rank 2 or 4).
inline GridChart chart_of_scalar(const FieldDump& d, DiffMode mode = DiffMode::spectral) {
    if ((d.dims.size() != 2 && d.dims.size() != 4) ||
        std::any_of(d.dims.begin(), d.dims.end(), [&](auto x) { return x != d.dims[0]; }))
        throw InvalidInput("dump is not a scalar field on a square grid");
    return GridChart(static_cast<int>(d.dims.size() / 2), static_cast<int>(d.dims[0]), mode);
}

/// Trajectory: dims [S, 2, N, ...] with φ then φ̇ per snapshot; times are
/// stored separately by the caller.
inline void write_trajectory(const std::filesystem::path& path, const Trajectory& tr) {
    FieldDump d;
    const auto& c = tr.snapshots.front().phi.chart;
    d.dims = {static_cast<std::uint32_t>(tr.snapshots.size()), 2u};
    for (auto x : grid_dims(c)) d.dims.push_back(x);
    d.data.reserve(d.count());
    for (const auto& s : tr.snapshots) {
        d.data.insert(d.data.end(), s.phi.v.begin(), s.phi.v.end());
        d.data.insert(d.data.end(), s.phidot.v.begin(), s.phidot.v.end());
    }
    write_dump(path, d);
}

inline Trajectory read_trajectory(const std::filesystem::path& path, const GridChart& c,
                                  const std::vector<double>& times) {
    auto d = read_dump(path);
    auto g = grid_dims(c);
    if (d.dims.size() != g.size() + 2 || d.dims[1] != 2 || !std::equal(g.begin(), g.end(), d.dims.begin() + 2))
        throw InvalidInput("trajectory dump shape does not match the chart");
    if (d.dims[0] != times.size()) throw InvalidInput("trajectory dump and time list disagree");
    Trajectory tr;
    const std::size_t N = c.size();
    for (std::size_t k = 0; k < times.size(); ++k) {
        Snapshot s;
        s.t = times[k];
        s.phi = ScalarField(c);
        s.phidot = ScalarField(c);
        for (std::size_t p = 0; p < N; ++p) {
            s.phi[p] = d.data[(2 * k) * N + p].real();
            s.phidot[p] = d.data[(2 * k + 1) * N + p].real();
        }
        tr.snapshots.push_back(std::move(s));
    }
    return tr;
}

// ── Background save/load ────────────────────────────────────────────────────

inline void save_background(const std::filesystem::path& dir, const BackgroundData& bg) {
    std::filesystem::create_directories(dir);
    write_dump(dir / "omega0.crf", dump_of(bg.omega0.form()));
    write_dump(dir / "omega_inf.crf", dump_of(bg.omega_inf));
    write_dump(dir / "Omega.crf", dump_of(ScalarField(bg.chart, bg.Omega.density)));
    write_dump(dir / "psi.crf", dump_of(bg.psi));
    std::ofstream os(dir / "background.txt");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", bg.r_mask);
    os << "r_mask = " << buf << "\n";
    os << "mass_normalized = " << (bg.mass_normalized ? "true" : "false") << "\n";
    os << "diff_mode = " << to_string(bg.chart.mode()) << "\n";
}

/// Rebuilds a background from save_background output. ψ derivatives are
/// recomputed spectrally, so pole profiles thinner than a few cells lose
/// the accuracy of the closed forms used by the scenario constructors.
inline BackgroundData load_background(const std::filesystem::path& dir) {
    auto psi_d = read_dump(dir / "psi.crf");
    std::map<std::string, std::string> kv;
    {
        std::ifstream is(dir / "background.txt");
        if (!is) throw InvalidInput("missing background.txt in " + dir.string());
        std::string line;
        while (std::getline(is, line)) {
            auto eq = line.find('=');
            if (eq == std::string::npos) continue;
            auto trim = [](std::string s) {
                s.erase(0, s.find_first_not_of(" \t"));
                s.erase(s.find_last_not_of(" \t\r") + 1);
                return s;
            };
            kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
        }
    }
    const DiffMode mode = kv["diff_mode"] == "fd4" ? DiffMode::fd4 : DiffMode::spectral;
    BackgroundData bg;
    bg.chart = chart_of_scalar(psi_d, mode);
    bg.psi = scalar_from(psi_d, bg.chart);
    bg.omega0 = MetricField(form_from(read_dump(dir / "omega0.crf"), bg.chart));
    bg.omega_inf = form_from(read_dump(dir / "omega_inf.crf"), bg.chart);
    bg.Omega = VolumeFormField(bg.chart, scalar_from(read_dump(dir / "Omega.crf"), bg.chart).v);
    bg.r_mask = kv.count("r_mask") ? std::stod(kv["r_mask"]) : 0.0;
    bg.mass_normalized = kv["mass_normalized"] != "false";
    if (bg.r_mask > 0.0) bg.pole_mask = pole_mask(bg.chart, bg.r_mask);
    bg.info.name = "from-file";
    measure_constants(bg);
    validate(bg);
    return bg;
}

// ── Text outputs ────────────────────────────────────────────────────────────

inline std::string fmt_e(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12e", v);
    return buf;
}

/// CSV with a header row; every value printed as %.12e.
inline void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& rows) {
    std::ofstream os(path);
    if (!os) throw Error("cannot open " + path.string() + " for writing");
    for (std::size_t k = 0; k < header.size(); ++k) os << (k ? "," : "") << header[k];
    os << "\n";
    for (const auto& r : rows) {
        for (std::size_t k = 0; k < r.size(); ++k) os << (k ? "," : "") << fmt_e(r[k]);
        os << "\n";
    }
}

/// 8-bit binary PGM of a scalar field, linearly scaled between its unmasked
/// min and max; masked points are black. For n = 2 the slice z₂ = 0 is shown.
inline void write_pgm(const std::filesystem::path& path, const ScalarField& f, const Mask& m = {}) {
    const auto& c = f.chart;
    const int N = c.resolution();
    double lo = masked_inf(f.v, m), hi = masked_sup(f.v, m);
    if (!(hi > lo)) hi = lo + 1.0;
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open " + path.string() + " for writing");
    os << "P5\n" << N << " " << N << "\n255\n";
    for (int j = N - 1; j >= 0; --j)
        for (int i = 0; i < N; ++i) {
            const std::size_t p = c.flat_index({i, j, 0, 0});
            unsigned char px = 0;
            if (!excluded(m, p)) {
                const double s = (f[p] - lo) / (hi - lo);
                px = static_cast<unsigned char>(std::lround(1.0 + 254.0 * std::clamp(s, 0.0, 1.0)));
            }
            os.put(static_cast<char>(px));
        }
}

// ── key = value configuration ───────────────────────────────────────────────

using KeyValues = std::map<std::string, std::string>;

/// Parses "key = value" lines; '#' starts a comment. Duplicate keys are an error.
inline KeyValues parse_key_values(std::istream& is, const std::string& source = "config") {
    KeyValues kv;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
        line.erase(0, line.find_first_not_of(" \t"));
        if (line.empty()) continue;
        line.erase(line.find_last_not_of(" \t\r") + 1);
        auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(source + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        key.erase(key.find_last_not_of(" \t") + 1);
        val.erase(0, val.find_first_not_of(" \t"));
        if (key.empty()) throw ConfigError(source + ":" + std::to_string(lineno) + ": empty key");
        if (kv.count(key)) throw ConfigError(source + ": duplicate key '" + key + "'");
        kv[key] = val;
    }
    return kv;
}

inline KeyValues read_key_values(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    return parse_key_values(is, path.string());
}

/// Applies "--key=value" arguments on top of kv.
inline void apply_overrides(KeyValues& kv, const std::vector<std::string>& args) {
    for (const auto& a : args) {
        if (a.rfind("--", 0) != 0 || a.find('=') == std::string::npos)
            throw ConfigError("override '" + a + "' is not of the form --key=value");
        const auto eq = a.find('=');
        kv[a.substr(2, eq - 2)] = a.substr(eq + 1);
    }
}

}  // namespace crf::io
