#ifndef IONFRINGE_IO_HPP
#define IONFRINGE_IO_HPP

// File formats: fringe and series CSV, 16-bit PGM camera images, crystal
// geometry and fit results as JSON.
//
// CSV files are comma separated. Lines starting with '#' carry metadata and
// are skipped on input; a single non-numeric header row is allowed before the
// data.

#include <charconv>
#include <cstdio>
#include <cstdint>
#include <fstream>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "core.hpp"
#include "crystal.hpp"
#include "fit.hpp"
#include "optics.hpp"

namespace ionfringe::io {

using json = nlohmann::ordered_json;

#ifdef IONFRINGE_VERSION
inline constexpr const char* version = IONFRINGE_VERSION;
#else
inline constexpr const char* version = "0.0.0";
#endif

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Shortest decimal string that reads back to the same double.
inline std::string format_double(double v) {
    if (std::isnan(v))
        return "nan";
    if (std::isinf(v))
        return v > 0 ? "inf" : "-inf";
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, v);
    return {buf, r.ptr};
}

/// JSON has no infinities; they are written as null.
inline json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json to_json(const Eigen::VectorXd& v) {
    json a = json::array();
    for (double x : v)
        a.push_back(number(x));
    return a;
}

inline json to_json(const std::vector<double>& v) {
    json a = json::array();
    for (double x : v)
        a.push_back(number(x));
    return a;
}

/// Provenance written at the top of every output.
struct Metadata {
    std::string command;
    std::uint64_t config_hash = 0;
    std::optional<std::uint64_t> seed;
    std::vector<std::pair<std::string, std::string>> extra;

    std::vector<std::pair<std::string, std::string>> fields() const {
        std::vector<std::pair<std::string, std::string>> f{
            {"tool", "ionfringe"}, {"version", version}, {"command", command},
            {"config_hash", hex64(config_hash)}};
        if (seed)
            f.emplace_back("seed", std::to_string(*seed));
        f.insert(f.end(), extra.begin(), extra.end());
        return f;
    }

    void write_csv_header(std::ostream& os) const {
        for (const auto& [k, v] : fields())
            os << "# " << k << ": " << v << '\n';
    }

    json to_json() const {
        json j = json::object();
        for (const auto& [k, v] : fields())
            j[k] = v;
        return j;
    }
};

// ---------------------------------------------------------------------------
// Generic numeric CSV

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<double>> rows;
};

namespace impl {

inline std::string_view trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos)
        return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

inline std::vector<std::string_view> split(std::string_view line) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const auto comma = line.find(',', start);
        out.push_back(trim(line.substr(start, comma - start)));
        if (comma == std::string_view::npos)
            break;
        start = comma + 1;
    }
    return out;
}

inline std::optional<double> parse_number(std::string_view s) {
    if (s.empty())
        return std::nullopt;
    if (s.front() == '+')
        s.remove_prefix(1);
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        return std::nullopt;
    return v;
}

inline std::ifstream open_in(const std::string& path, std::ios::openmode mode = std::ios::in) {
    std::ifstream f(path, mode);
    if (!f)
        throw IoError("cannot open " + path + " for reading");
    return f;
}

inline std::ofstream open_out(const std::string& path, std::ios::openmode mode = std::ios::out) {
    std::ofstream f(path, mode);
    if (!f)
        throw IoError("cannot open " + path + " for writing");
    return f;
}

} // namespace impl

/// Reads a numeric table. Every data row must have the same number of
/// fields; `source` names the input in error messages.
inline CsvTable read_csv(std::istream& is, const std::string& source = "<input>") {
    CsvTable t;
    std::string line;
    std::size_t lineno = 0, width = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const std::string_view s = impl::trim(line);
        if (s.empty() || s.front() == '#')
            continue;
        const auto fields = impl::split(s);
        std::vector<double> row;
        row.reserve(fields.size());
        bool numeric = true;
        for (auto f : fields) {
            const auto v = impl::parse_number(f);
            if (!v) {
                numeric = false;
                break;
            }
            row.push_back(*v);
        }
        const auto where = source + ":" + std::to_string(lineno);
        if (!numeric) {
            if (!t.rows.empty() || !t.header.empty())
                throw ParseError(where + ": non-numeric field in data row");
            for (auto f : fields)
                t.header.emplace_back(f);
            width = fields.size();
            continue;
        }
        if (width == 0)
            width = row.size();
        if (row.size() != width)
            throw ParseError(where + ": expected " + std::to_string(width) + " fields, found "
                             + std::to_string(row.size()));
        t.rows.push_back(std::move(row));
    }
    if (is.bad())
        throw IoError("read error on " + source);
    if (t.rows.empty())
        throw ParseError(source + ": no data rows");
    return t;
}

inline void write_csv(std::ostream& os, const std::vector<std::string>& header,
                      const std::vector<Eigen::VectorXd>& columns, const Metadata* meta = nullptr) {
    detail::require(!columns.empty() && header.size() == columns.size(), "CSV header and columns differ");
    for (const auto& c : columns)
        detail::require(c.size() == columns.front().size(), "CSV columns differ in length");
    if (meta)
        meta->write_csv_header(os);
    for (std::size_t k = 0; k < header.size(); ++k)
        os << (k ? "," : "") << header[k];
    os << '\n';
    for (Eigen::Index i = 0; i < columns.front().size(); ++i) {
        for (std::size_t k = 0; k < columns.size(); ++k)
            os << (k ? "," : "") << format_double(columns[k][i]);
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
// Fringe data

/// Two or three columns: position (m), intensity (counts)[, standard error].
/// Without the error column the errors are Poisson, sqrt(max(counts, 1)).
inline fit::FringeData1D read_fringe_csv(std::istream& is, const std::string& source = "<input>") {
    const CsvTable t = read_csv(is, source);
    const std::size_t width = t.rows.front().size();
    if (width != 2 && width != 3)
        throw ParseError(source + ": fringe data needs 2 or 3 columns, found " + std::to_string(width));
    const auto n = static_cast<Eigen::Index>(t.rows.size());
    fit::FringeData1D d;
    d.x.resize(n);
    d.y.resize(n);
    d.sigma.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = t.rows[static_cast<std::size_t>(i)];
        d.x[i] = r[0];
        d.y[i] = r[1];
        if (width == 3) {
            if (!(r[2] > 0.0))
                throw ParseError(source + ": standard error must be positive (row "
                                 + std::to_string(i + 1) + ")");
            d.sigma[i] = r[2];
        }
    }
    if (width == 2)
        d.sigma = fit::poisson_errors(d.y);
    if (!d.x.allFinite() || !d.y.allFinite() || !d.sigma.allFinite())
        throw ParseError(source + ": non-finite value in fringe data");
    return d;
}

inline fit::FringeData1D load_fringe_csv(const std::string& path) {
    auto f = impl::open_in(path);
    return read_fringe_csv(f, path);
}

inline void write_fringe_csv(std::ostream& os, const fit::FringeData1D& d, const Metadata* meta = nullptr) {
    write_csv(os, {"x_m", "counts", "sigma"}, {d.x, d.y, d.sigma}, meta);
}

inline void write_pattern_csv(std::ostream& os, const optics::FringePattern& p, const Metadata* meta = nullptr) {
    write_csv(os, {"x_m", "intensity"}, {p.x, p.intensity}, meta);
}

// ---------------------------------------------------------------------------
// Camera images

/// Binary 16-bit PGM (P5, big-endian). Counts above 65535 saturate, as on
/// a 16-bit detector. Pixel size, exposure and seed go into comment lines.
inline void write_pgm(std::ostream& os, const optics::CameraImage& img, const Metadata* meta = nullptr) {
    detail::require(img.rows > 0 && img.cols > 0 && img.counts.size() == img.rows * img.cols,
                    "camera image has inconsistent dimensions");
    os << "P5\n";
    if (meta)
        meta->write_csv_header(os);
    os << "# pixel_size_m: " << format_double(img.pixel_size) << '\n'
       << "# exposure: " << format_double(img.exposure) << '\n'
       << "# background: " << format_double(img.background) << '\n'
       << "# image_seed: " << img.seed << '\n'
       << img.cols << ' ' << img.rows << '\n'
       << 65535 << '\n';
    std::string buf(img.counts.size() * 2, '\0');
    for (std::size_t i = 0; i < img.counts.size(); ++i) {
        const auto v = static_cast<std::uint16_t>(std::min<std::uint32_t>(img.counts[i], 65535u));
        buf[2 * i] = static_cast<char>(v >> 8);
        buf[2 * i + 1] = static_cast<char>(v & 0xff);
    }
    os.write(buf.data(), static_cast<std::streamsize>(buf.size()));
}

inline optics::CameraImage read_pgm(std::istream& is, const std::string& source = "<input>") {
    auto fail = [&](const std::string& what) { return ParseError(source + ": " + what); };
    std::string magic;
    if (!(is >> magic) || magic != "P5")
        throw fail("not a binary PGM (P5) file");

    optics::CameraImage img;
    // Header tokens, with '#' comments that may carry image metadata.
    auto next_token = [&]() -> std::string {
        while (true) {
            is >> std::ws;
            if (is.peek() == '#') {
                std::string comment;
                std::getline(is, comment);
                const auto colon = comment.find(':');
                if (colon != std::string::npos) {
                    const std::string key{impl::trim(std::string_view(comment).substr(1, colon - 1))};
                    const auto val = impl::parse_number(impl::trim(std::string_view(comment).substr(colon + 1)));
                    if (val && key == "pixel_size_m")
                        img.pixel_size = *val;
                    else if (val && key == "exposure")
                        img.exposure = *val;
                    else if (val && key == "background")
                        img.background = *val;
                    else if (val && key == "image_seed")
                        img.seed = static_cast<std::uint64_t>(*val);
                }
                continue;
            }
            std::string tok;
            if (!(is >> tok))
                throw fail("truncated header");
            return tok;
        }
    };
    auto to_size = [&](const std::string& tok) {
        const auto v = impl::parse_number(tok);
        if (!v || *v < 1 || *v != std::floor(*v))
            throw fail("bad header value '" + tok + "'");
        return static_cast<std::size_t>(*v);
    };
    img.cols = to_size(next_token());
    img.rows = to_size(next_token());
    const std::size_t maxval = to_size(next_token());
    if (maxval > 65535)
        throw fail("maxval above 65535");
    is.get(); // single whitespace before the raster
    const std::size_t bytes_per = maxval > 255 ? 2 : 1;
    std::string buf(img.rows * img.cols * bytes_per, '\0');
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(is.gcount()) != buf.size())
        throw fail("raster shorter than " + std::to_string(img.cols) + "x" + std::to_string(img.rows));
    img.counts.resize(img.rows * img.cols);
    for (std::size_t i = 0; i < img.counts.size(); ++i) {
        if (bytes_per == 2)
            img.counts[i] = (static_cast<std::uint32_t>(static_cast<unsigned char>(buf[2 * i])) << 8)
                            | static_cast<unsigned char>(buf[2 * i + 1]);
        else
            img.counts[i] = static_cast<unsigned char>(buf[i]);
    }
    return img;
}

inline void save_pgm(const std::string& path, const optics::CameraImage& img, const Metadata* meta = nullptr) {
    auto f = impl::open_out(path, std::ios::out | std::ios::binary);
    write_pgm(f, img, meta);
    if (!f)
        throw IoError("write error on " + path);
}

inline optics::CameraImage load_pgm(const std::string& path) {
    auto f = impl::open_in(path, std::ios::in | std::ios::binary);
    return read_pgm(f, path);
}

/// Camera image as CSV: one line per row of counts.
inline void write_image_csv(std::ostream& os, const optics::CameraImage& img, const Metadata* meta = nullptr) {
    if (meta)
        meta->write_csv_header(os);
    os << "# pixel_size_m: " << format_double(img.pixel_size) << '\n';
    for (std::size_t r = 0; r < img.rows; ++r) {
        for (std::size_t c = 0; c < img.cols; ++c)
            os << (c ? "," : "") << img.at(r, c);
        os << '\n';
    }
}

// ---------------------------------------------------------------------------
// Crystal geometry

inline void write_geometry_csv(std::ostream& os, const crystal::CrystalGeometry& g, const Metadata* meta = nullptr) {
    if (meta)
        meta->write_csv_header(os);
    os << "ion,z_m\n";
    for (Eigen::Index i = 0; i < g.positions.size(); ++i)
        os << i << ',' << format_double(g.positions[i]) << '\n';
}

/// Positions from a geometry CSV: either "ion,z_m" or a single z column.
inline Eigen::VectorXd read_geometry_csv(std::istream& is, const std::string& source = "<input>") {
    const CsvTable t = read_csv(is, source);
    const std::size_t width = t.rows.front().size();
    if (width != 1 && width != 2)
        throw ParseError(source + ": geometry needs 1 or 2 columns");
    Eigen::VectorXd z(static_cast<Eigen::Index>(t.rows.size()));
    for (std::size_t i = 0; i < t.rows.size(); ++i)
        z[static_cast<Eigen::Index>(i)] = t.rows[i][width - 1];
    for (Eigen::Index i = 1; i < z.size(); ++i)
        if (!(z[i] > z[i - 1]))
            throw ParseError(source + ": positions must be strictly increasing");
    return z;
}

inline json mode_set_json(const crystal::ModeSet& m) {
    json j;
    j["direction"] = {m.direction.x(), m.direction.y(), m.direction.z()};
    json f = json::array();
    for (double w : m.frequencies)
        f.push_back(w / two_pi);
    j["frequencies_hz"] = f;
    json vecs = json::array();
    for (Eigen::Index c = 0; c < m.vectors.cols(); ++c)
        vecs.push_back(to_json(Eigen::VectorXd(m.vectors.col(c))));
    j["vectors"] = vecs;
    return j;
}

inline json geometry_json(const crystal::CrystalGeometry& g, const crystal::NormalModes* modes = nullptr) {
    json j;
    j["positions_m"] = to_json(g.positions);
    j["spacings_m"] = to_json(g.spacings());
    j["length_scale_m"] = number(g.length_scale);
    j["force_residual"] = number(g.residual);
    json trap;
    trap["mass_kg"] = g.trap.mass;
    if (g.trap.is_harmonic())
        trap["omega_z_hz"] = g.trap.omega_z / two_pi;
    else
        trap["axial_poly"] = to_json(g.trap.axial_poly);
    trap["omega_r1_hz"] = g.trap.omega_r1 / two_pi;
    trap["omega_r2_hz"] = g.trap.omega_r2 / two_pi;
    j["trap"] = trap;
    if (modes) {
        json m;
        m["axial"] = mode_set_json(modes->axial);
        json r = json::array();
        for (const auto& set : modes->radial)
            r.push_back(mode_set_json(set));
        m["radial"] = r;
        j["modes"] = m;
    }
    return j;
}

// ---------------------------------------------------------------------------
// Fit results and visibility series

inline json fit_result_json(const fit::FitResult& r) {
    json j;
    j["model"] = {{"kind", r.model.name()}, {"order", r.model.order}};
    json params = json::array();
    for (std::size_t i = 0; i < r.names.size(); ++i) {
        const auto k = static_cast<Eigen::Index>(i);
        params.push_back({{"name", r.names[i]},
                          {"value", number(r.params[k])},
                          {"error", number(r.errors[k])},
                          {"error_asymptotic", number(r.errors_asymptotic[k])}});
    }
    j["parameters"] = params;
    json terms = json::array();
    for (const auto& t : r.terms)
        terms.push_back({{"kappa", number(t.kappa)},
                         {"kappa_err", number(t.kappa_err)},
                         {"phase", number(t.phase)},
                         {"phase_err", number(t.phase_err)},
                         {"visibility", number(t.visibility)},
                         {"visibility_err", number(t.visibility_err)}});
    j["terms"] = terms;
    j["visibility"] = {{"value", number(r.visibility)}, {"error", number(r.visibility_err)}};
    j["spacings_m"] = {{"value", to_json(r.spacings)}, {"error", to_json(r.spacing_errors)}};
    j["psf_width_m"] = {{"value", number(r.psf_width)}, {"error", number(r.psf_width_err)}};
    j["envelope_width_m"] = {{"value", number(r.envelope_width)}, {"error", number(r.envelope_width_err)}};
    j["centre_m"] = {{"value", number(r.centre)}, {"error", number(r.centre_err)}};
    j["statistics"] = {{"chi2", number(r.chi2)},
                       {"reduced_chi2", number(r.reduced_chi2)},
                       {"dof", r.dof},
                       {"iterations", r.iterations},
                       {"gradient", number(r.gradient_norm)},
                       {"converged", r.converged}};
    json cov = json::array();
    for (Eigen::Index i = 0; i < r.covariance.rows(); ++i)
        cov.push_back(to_json(Eigen::VectorXd(r.covariance.row(i).transpose())));
    j["covariance"] = cov;
    j["residuals"] = to_json(r.residuals);
    return j;
}

inline json decay_fit_json(const fit::DecayFit& f) {
    return {{"v0", number(f.v0)},
            {"v0_err", number(f.v0_err)},
            {"v_inf", number(f.v_inf)},
            {"v_inf_err", number(f.v_inf_err)},
            {"tau_s", number(f.tau)},
            {"tau_err_s", number(f.tau_err)},
            {"tau_infinite", f.tau_infinite},
            {"chi2", number(f.chi2)},
            {"reduced_chi2", number(f.reduced_chi2)},
            {"delta_chi2", number(f.delta_chi2)}};
}

/// Columns: delay (s), visibility, standard error.
inline void write_series_csv(std::ostream& os, const fit::DecaySeries& s, const Metadata* meta = nullptr) {
    write_csv(os, {"dt_s", "visibility", "sigma"}, {s.t, s.v, s.sigma}, meta);
}

inline fit::DecaySeries read_series_csv(std::istream& is, const std::string& source = "<input>") {
    const CsvTable t = read_csv(is, source);
    if (t.rows.front().size() != 3)
        throw ParseError(source + ": visibility series needs 3 columns (dt_s, visibility, sigma)");
    const auto n = static_cast<Eigen::Index>(t.rows.size());
    fit::DecaySeries s;
    s.t.resize(n);
    s.v.resize(n);
    s.sigma.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = t.rows[static_cast<std::size_t>(i)];
        s.t[i] = r[0];
        s.v[i] = r[1];
        s.sigma[i] = r[2];
    }
    return s;
}

} // namespace ionfringe::io

#endif
