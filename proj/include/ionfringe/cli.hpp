#ifndef IONFRINGE_CLI_HPP
#define IONFRINGE_CLI_HPP

// Command-line front end. Each subcommand reads a JSON config, runs one
// pipeline stage and writes CSV or JSON. Everything is reachable through
// run() so the commands can be driven in-process.

#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bloch.hpp"
#include "core.hpp"
#include "crystal.hpp"
#include "fit.hpp"
#include "io.hpp"
#include "optics.hpp"
#include "thermal.hpp"

namespace ionfringe::cli {

using config_json = nlohmann::json; // sorted keys: dump() is canonical
using out_json = io::json;

enum ExitCode : int {
    exit_ok = 0,
    exit_internal = 1,
    exit_config = 2,
    exit_numerical = 3,
    exit_io = 4,
};

/// Schema violation; the message starts with the path of the offending key.
class ConfigError : public Error {
public:
    using Error::Error;
};

enum class Dim { frequency, length, time, temperature, mass };

namespace impl {

struct UnitEntry {
    std::string_view name;
    Dim dim;
    double scale;
};

// Frequencies in Hz units are cycles per second and come out angular.
inline constexpr UnitEntry units[] = {
    {"Hz", Dim::frequency, two_pi},       {"kHz", Dim::frequency, two_pi * 1e3},
    {"MHz", Dim::frequency, two_pi * 1e6}, {"GHz", Dim::frequency, two_pi * 1e9},
    {"rad/s", Dim::frequency, 1.0},       {"m", Dim::length, 1.0},
    {"mm", Dim::length, 1e-3},            {"um", Dim::length, 1e-6},
    {"µm", Dim::length, 1e-6},            {"nm", Dim::length, 1e-9},
    {"s", Dim::time, 1.0},                {"ms", Dim::time, 1e-3},
    {"us", Dim::time, 1e-6},              {"µs", Dim::time, 1e-6},
    {"ns", Dim::time, 1e-9},              {"K", Dim::temperature, 1.0},
    {"mK", Dim::temperature, 1e-3},       {"uK", Dim::temperature, 1e-6},
    {"µK", Dim::temperature, 1e-6},       {"kg", Dim::mass, 1.0},
    {"u", Dim::mass, constants::atomic_mass_unit},
};

inline const char* dim_name(Dim d) {
    switch (d) {
    case Dim::frequency: return "frequency";
    case Dim::length: return "length";
    case Dim::time: return "time";
    case Dim::temperature: return "temperature";
    case Dim::mass: return "mass";
    }
    return "?";
}

/// Splits "12.5 MHz" into value and unit.
inline std::pair<double, std::string> split_quantity(const std::string& text, const std::string& path) {
    const std::string_view s = io::impl::trim(text);
    const auto space = s.find_first_of(" \t");
    if (space == std::string_view::npos)
        throw ConfigError(path + ": expected \"<number> <unit>\", got \"" + text + "\"");
    const auto value = io::impl::parse_number(s.substr(0, space));
    if (!value || !std::isfinite(*value))
        throw ConfigError(path + ": bad number in \"" + text + "\"");
    return {*value, std::string(io::impl::trim(s.substr(space)))};
}

} // namespace impl

/// One JSON object of the config. Every key read is recorded; finish()
/// rejects the rest.
class Section {
public:
    Section(const config_json& j, std::string path, const bloch::AtomLevels* atom = nullptr)
        : j_(&j), path_(std::move(path)), atom_(atom) {
        if (!j.is_object())
            throw ConfigError(where() + ": expected an object");
    }

    const std::string& path() const { return path_; }
    void set_atom(const bloch::AtomLevels* atom) { atom_ = atom; }

    bool has(const std::string& key) const { return j_->contains(key); }

    const config_json& raw(const std::string& key) {
        used_.insert(key);
        return j_->at(key);
    }

    Section child(const std::string& key) {
        if (!has(key))
            throw ConfigError(at(key) + ": missing");
        return Section(raw(key), at(key), atom_);
    }

    std::optional<Section> optional_child(const std::string& key) {
        if (!has(key))
            return std::nullopt;
        return child(key);
    }

    double quantity(const std::string& key, Dim dim, std::optional<double> fallback = std::nullopt) {
        if (!has(key)) {
            if (!fallback)
                throw ConfigError(at(key) + ": missing (" + impl::dim_name(dim) + " with unit)");
            return *fallback;
        }
        return parse_quantity(raw(key), dim, at(key));
    }

    double parse_quantity(const config_json& v, Dim dim, const std::string& where) const {
        if (v.is_number())
            throw ConfigError(where + ": physical quantity needs an explicit unit, e.g. \"" + v.dump() + " "
                              + unit_hint(dim) + "\"");
        if (!v.is_string())
            throw ConfigError(where + ": expected a quantity string");
        const auto [value, unit] = impl::split_quantity(v.get<std::string>(), where);
        for (const auto& u : impl::units)
            if (u.name == unit) {
                if (u.dim != dim)
                    throw ConfigError(where + ": unit \"" + unit + "\" is not a " + impl::dim_name(dim));
                return value * u.scale;
            }
        if (dim == Dim::frequency && (unit == "Gamma" || unit == "Gamma_ps" || unit == "Gamma_pd")) {
            if (!atom_)
                throw ConfigError(where + ": linewidth units need the atom section");
            const double g = unit == "Gamma" ? atom_->gamma_total()
                             : unit == "Gamma_ps" ? atom_->gamma_ps
                                                  : atom_->gamma_pd;
            return value * g;
        }
        throw ConfigError(where + ": unknown unit \"" + unit + "\"");
    }

    double number(const std::string& key, std::optional<double> fallback = std::nullopt) {
        if (!has(key)) {
            if (!fallback)
                throw ConfigError(at(key) + ": missing");
            return *fallback;
        }
        const auto& v = raw(key);
        if (!v.is_number())
            throw ConfigError(at(key) + ": expected a number");
        return v.get<double>();
    }

    long long integer(const std::string& key, std::optional<long long> fallback, long long lo, long long hi) {
        if (!has(key)) {
            if (!fallback)
                throw ConfigError(at(key) + ": missing");
            return *fallback;
        }
        const auto& v = raw(key);
        if (!v.is_number_integer())
            throw ConfigError(at(key) + ": expected an integer");
        const auto n = v.get<long long>();
        if (n < lo || n > hi)
            throw ConfigError(at(key) + ": must lie in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
        return n;
    }

    std::string text(const std::string& key, std::optional<std::string> fallback = std::nullopt) {
        if (!has(key)) {
            if (!fallback)
                throw ConfigError(at(key) + ": missing");
            return *fallback;
        }
        const auto& v = raw(key);
        if (!v.is_string())
            throw ConfigError(at(key) + ": expected a string");
        return v.get<std::string>();
    }

    std::string choice(const std::string& key, const std::vector<std::string>& allowed,
                       std::optional<std::string> fallback = std::nullopt) {
        const std::string s = text(key, std::move(fallback));
        if (std::find(allowed.begin(), allowed.end(), s) == allowed.end()) {
            std::string list;
            for (const auto& a : allowed)
                list += (list.empty() ? "" : ", ") + a;
            throw ConfigError(at(key) + ": \"" + s + "\" is not one of " + list);
        }
        return s;
    }

    bool flag(const std::string& key, bool fallback) {
        if (!has(key))
            return fallback;
        const auto& v = raw(key);
        if (!v.is_boolean())
            throw ConfigError(at(key) + ": expected true or false");
        return v.get<bool>();
    }

    /// Dimensionless direction, normalised.
    Vec3 direction(const std::string& key, const Vec3& fallback) {
        if (!has(key))
            return fallback;
        const auto& v = raw(key);
        if (!v.is_array() || v.size() != 3 || !v[0].is_number() || !v[1].is_number() || !v[2].is_number())
            throw ConfigError(at(key) + ": expected [x, y, z]");
        const Vec3 d(v[0].get<double>(), v[1].get<double>(), v[2].get<double>());
        if (!(d.norm() > 0.0) || !d.allFinite())
            throw ConfigError(at(key) + ": direction must be non-zero");
        return d.normalized();
    }

    const config_json& array(const std::string& key) {
        const auto& v = raw(key);
        if (!v.is_array())
            throw ConfigError(at(key) + ": expected an array");
        return v;
    }

    void exclusive(const std::vector<std::string>& keys, bool required) const {
        std::vector<std::string> present;
        for (const auto& k : keys)
            if (has(k))
                present.push_back(k);
        std::string list;
        for (const auto& k : keys)
            list += (list.empty() ? "" : ", ") + k;
        if (present.size() > 1)
            throw ConfigError(where() + ": give only one of " + list);
        if (required && present.empty())
            throw ConfigError(where() + ": needs one of " + list);
    }

    void finish() const {
        for (auto it = j_->begin(); it != j_->end(); ++it)
            if (!used_.count(it.key()))
                throw ConfigError(at(it.key()) + ": unknown key");
    }

    std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
    std::string where() const { return path_.empty() ? "config" : path_; }

private:
    static const char* unit_hint(Dim d) {
        switch (d) {
        case Dim::frequency: return "MHz";
        case Dim::length: return "um";
        case Dim::time: return "us";
        case Dim::temperature: return "mK";
        case Dim::mass: return "u";
        }
        return "";
    }

    const config_json* j_;
    std::string path_;
    const bloch::AtomLevels* atom_;
    std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// Config blocks shared by several commands

/// "atom": {"linewidth": "21.57 MHz", "branching_pd": 0.07}; 40Ca+ when absent.
inline bloch::AtomLevels parse_atom(Section& root) {
    auto s = root.optional_child("atom");
    if (!s)
        return bloch::AtomLevels::calcium40();
    const double width = s->quantity("linewidth", Dim::frequency, two_pi * 21.57e6);
    const double branching = s->number("branching_pd", 0.07);
    s->finish();
    if (!(width > 0.0) || !(branching >= 0.0 && branching < 1.0))
        throw ConfigError(s->path() + ": linewidth must be positive and branching_pd in [0, 1)");
    return bloch::AtomLevels::from_total(width, branching);
}

/// A laser given by detuning and either "rabi" or "saturation". The cooling
/// saturation refers to the s-p width, the repump one to the total width.
inline bloch::LaserField parse_laser(Section& s, const bloch::AtomLevels& atom, bool cooling,
                                     bool drive_required = true) {
    bloch::LaserField l;
    l.detuning = s.quantity("detuning", Dim::frequency);
    l.k_dir = s.direction("direction", cooling ? Vec3(1, 0, -1).normalized() : Vec3(-1, 0, -1).normalized());
    l.wavelength = s.quantity("wavelength", Dim::length, cooling ? 397e-9 : 866e-9);
    s.exclusive({"rabi", "saturation"}, drive_required);
    if (s.has("rabi"))
        l.rabi = s.quantity("rabi", Dim::frequency);
    else if (s.has("saturation"))
        l.rabi = bloch::rabi_from_saturation(s.number("saturation"), l.detuning,
                                             cooling ? atom.gamma_ps : atom.gamma_total());
    s.finish();
    return l;
}

inline crystal::TrapConfig parse_trap(Section& s) {
    crystal::TrapConfig t;
    t.mass = s.quantity("mass", Dim::mass, constants::mass_ca40_ion);
    s.exclusive({"omega_z", "axial_poly"}, true);
    if (s.has("omega_z")) {
        t.omega_z = s.quantity("omega_z", Dim::frequency);
    } else {
        // {"2": "1.5e-3 J/m^2", "4": "..."}: keys are the powers of z.
        Section poly = s.child("axial_poly");
        const auto& j = s.raw("axial_poly");
        for (auto it = j.begin(); it != j.end(); ++it) {
            const std::string where = poly.at(it.key());
            const auto k = io::impl::parse_number(it.key());
            if (!k || *k < 2 || *k > 32 || *k != std::floor(*k))
                throw ConfigError(where + ": key must be a power of z between 2 and 32");
            const auto power = static_cast<std::size_t>(*k);
            if (!it.value().is_string())
                throw ConfigError(where + ": expected \"<number> J/m^" + it.key() + "\"");
            const auto [value, unit] = impl::split_quantity(it.value().get<std::string>(), where);
            if (unit != "J/m^" + it.key())
                throw ConfigError(where + ": unit must be J/m^" + it.key());
            if (t.axial_poly.size() <= power)
                t.axial_poly.resize(power + 1, 0.0);
            t.axial_poly[power] = value;
            poly.raw(it.key());
        }
        poly.finish();
    }
    t.omega_r1 = s.quantity("omega_r1", Dim::frequency, 0.0);
    t.omega_r2 = s.quantity("omega_r2", Dim::frequency, 0.0);
    s.finish();
    return t;
}

/// Named crystal setups.
inline const std::map<std::string, config_json>& crystal_presets() {
    static const std::map<std::string, config_json> p{
        {"two-ion",
         {{"ions", 2},
          {"trap", {{"omega_z", "0.977 MHz"}, {"omega_r1", "1.853 MHz"}, {"omega_r2", "2.620 MHz"}}}}},
        {"four-ion", {{"ions", 4}, {"trap", {{"omega_z", "0.429 MHz"}}}}},
        {"equidistant", {{"design", {{"ions", 4}, {"spacing", "9.1 um"}, {"max_degree", 8}}}}},
    };
    return p;
}

struct Crystal {
    crystal::CrystalGeometry geometry;
    std::optional<crystal::NormalModes> modes; ///< absent for explicit positions
    bool designed = false;
};

/// "crystal": one of {"preset"}, {"ions", "trap"}, {"design"} or
/// {"positions": ["-3.2 um", "3.2 um"]}.
inline Crystal parse_crystal(Section& root) {
    Section s = root.child("crystal");
    s.exclusive({"preset", "trap", "design", "positions"}, true);
    if (s.has("preset")) {
        const std::string name = s.text("preset");
        const auto& presets = crystal_presets();
        const auto it = presets.find(name);
        if (it == presets.end())
            throw ConfigError(s.at("preset") + ": unknown preset \"" + name + "\"");
        s.finish();
        config_json wrapped{{"crystal", it->second}};
        Section inner(wrapped, "");
        Crystal c = parse_crystal(inner);
        inner.finish();
        return c;
    }
    Crystal c;
    if (s.has("positions")) {
        const auto& arr = s.array("positions");
        if (arr.empty() || arr.size() > crystal::max_ions)
            throw ConfigError(s.at("positions") + ": needs 1..32 entries");
        c.geometry.positions.resize(static_cast<Eigen::Index>(arr.size()));
        for (std::size_t i = 0; i < arr.size(); ++i)
            c.geometry.positions[static_cast<Eigen::Index>(i)] =
                s.parse_quantity(arr[i], Dim::length, s.at("positions") + "[" + std::to_string(i) + "]");
        for (Eigen::Index i = 1; i < c.geometry.positions.size(); ++i)
            if (!(c.geometry.positions[i] > c.geometry.positions[i - 1]))
                throw ConfigError(s.at("positions") + ": must be strictly increasing");
        s.finish();
        return c;
    }
    crystal::TrapConfig trap;
    std::size_t ions = 0;
    if (s.has("design")) {
        Section d = s.child("design");
        ions = static_cast<std::size_t>(d.integer("ions", std::nullopt, 2, 32));
        const double spacing = d.quantity("spacing", Dim::length);
        const double mass = d.quantity("mass", Dim::mass, constants::mass_ca40_ion);
        const int degree = static_cast<int>(d.integer("max_degree", 8, 4, 32));
        const double r1 = d.quantity("omega_r1", Dim::frequency, 0.0);
        const double r2 = d.quantity("omega_r2", Dim::frequency, 0.0);
        d.finish();
        trap = crystal::design_equidistant_potential(ions, spacing, mass, degree);
        trap.omega_r1 = r1;
        trap.omega_r2 = r2;
        c.designed = true;
    } else {
        ions = static_cast<std::size_t>(s.integer("ions", std::nullopt, 1, 32));
        Section t = s.child("trap");
        trap = parse_trap(t);
    }
    s.finish();
    c.geometry = crystal::equilibrium_positions(trap, ions);
    c.modes = crystal::normal_modes(c.geometry);
    return c;
}

/// "detection": laser direction and wavelength, detector axis, screen axis
/// and imaging scale. Defaults: laser (1,0,-1), 397 nm, detection along x,
/// screen along z, 20 mm focal length, magnification 10.
inline optics::DetectionGeometry parse_detection(Section& root) {
    auto s = root.optional_child("detection");
    config_json empty = config_json::object();
    Section fallback(empty, "detection");
    Section& d = s ? *s : fallback;
    const Vec3 laser = d.direction("laser_direction", Vec3(1, 0, -1).normalized());
    const double wavelength = d.quantity("wavelength", Dim::length, 397e-9);
    const Vec3 detect = d.direction("detect_axis", Vec3::UnitX());
    const Vec3 screen = d.direction("screen_axis", Vec3::UnitZ());
    const double focal = d.quantity("focal_length", Dim::length, 0.02);
    const double mag = d.number("magnification", 10.0);
    d.finish();
    auto det = optics::DetectionGeometry::make(laser, wavelength, detect, screen, focal, mag);
    det.validate();
    return det;
}

// ---------------------------------------------------------------------------
// Running commands

struct Options {
    std::string command;
    config_json config = config_json::object();
    std::optional<std::uint64_t> seed;
    std::optional<std::string> output_dir;
    std::string format = "csv";
    unsigned threads = 0;
    std::optional<std::string> input; ///< fit only
};

/// Collects the files a command produces; they go to the output directory,
/// or to stdout when none is set.
class Sink {
public:
    Sink(const Options& opt, std::ostream& out) : dir_(opt.output_dir), out_(out) {}

    bool has_dir() const { return dir_.has_value(); }

    void write(const std::string& name, const std::string& content, bool binary = false) {
        if (!dir_) {
            out_ << content;
            return;
        }
        std::error_code ec;
        std::filesystem::create_directories(*dir_, ec);
        if (ec)
            throw IoError("cannot create output directory " + *dir_ + ": " + ec.message());
        const std::string path = (std::filesystem::path(*dir_) / name).string();
        auto f = io::impl::open_out(path, binary ? std::ios::out | std::ios::binary : std::ios::out);
        f << content;
        f.close();
        if (!f)
            throw IoError("write error on " + path);
    }

private:
    std::optional<std::string> dir_;
    std::ostream& out_;
};

inline io::Metadata metadata(const Options& opt) {
    io::Metadata m;
    m.command = opt.command;
    m.config_hash = io::fnv1a64(opt.config.dump());
    return m;
}

/// Runs f(i) for i in [0, n) on up to `threads` threads; the first
/// exception is rethrown.
template <class F>
void parallel_for(std::size_t n, unsigned threads, F&& f) {
    if (threads == 0)
        threads = std::max(1u, std::thread::hardware_concurrency());
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i)
            f(i);
        return;
    }
    std::vector<std::exception_ptr> errors(threads);
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t)
        pool.emplace_back([&, t] {
            try {
                for (std::size_t i = t; i < n; i += threads)
                    f(i);
            } catch (...) {
                errors[t] = std::current_exception();
            }
        });
    for (auto& th : pool)
        th.join();
    for (auto& e : errors)
        if (e)
            std::rethrow_exception(e);
}

/// Named numeric columns, written as CSV or as a JSON object of arrays.
inline std::string table_output(const Options& opt, const io::Metadata& meta, const std::vector<std::string>& names,
                                const std::vector<Eigen::VectorXd>& cols, const out_json& extra = out_json::object()) {
    std::ostringstream os;
    if (opt.format == "json") {
        out_json j;
        j["meta"] = meta.to_json();
        for (auto it = extra.begin(); it != extra.end(); ++it)
            j[it.key()] = it.value();
        out_json t = out_json::object();
        for (std::size_t k = 0; k < names.size(); ++k)
            t[names[k]] = io::to_json(cols[k]);
        j["table"] = t;
        os << j.dump(2) << '\n';
    } else {
        io::write_csv(os, names, cols, &meta);
    }
    return os.str();
}

// --- visibility-scan -------------------------------------------------------

/// V against the cooling drive for the two-level model and any number of
/// repump settings.
///
/// "scan": {"variable": "rabi" | "saturation", "start", "stop", "points",
///          "spacing": "linear" | "log"}
/// "cooling": {"detuning", ["direction", "wavelength"]}
/// "repump": [{"label", "detuning", "rabi" | "saturation"}, ...]
/// "two_level": true
inline void cmd_visibility_scan(const Options& opt, Sink& sink) {
    Section root(opt.config, "");
    const auto atom = parse_atom(root);
    root.set_atom(&atom);

    Section scan = root.child("scan");
    scan.set_atom(&atom);
    const std::string variable = scan.choice("variable", {"rabi", "saturation"}, "rabi");
    const double start = variable == "rabi" ? scan.quantity("start", Dim::frequency) : scan.number("start");
    const double stop = variable == "rabi" ? scan.quantity("stop", Dim::frequency) : scan.number("stop");
    const auto points = static_cast<std::size_t>(scan.integer("points", 101, 1, 1000000));
    const std::string spacing = scan.choice("spacing", {"linear", "log"}, "linear");
    scan.finish();
    if (!(start >= 0.0 && stop >= start))
        throw ConfigError(scan.path() + ": need 0 <= start <= stop");
    if (spacing == "log" && !(start > 0.0))
        throw ConfigError(scan.at("start") + ": log spacing needs start > 0");

    Section cs = root.child("cooling");
    cs.set_atom(&atom);
    bloch::LaserField cooling = parse_laser(cs, atom, true, false);
    if (cs.has("rabi") || cs.has("saturation"))
        throw ConfigError(cs.path() + ": the drive is set by scan");

    std::vector<std::string> labels;
    std::vector<bloch::LaserField> repumps;
    if (root.has("repump")) {
        const auto& arr = root.array("repump");
        for (std::size_t i = 0; i < arr.size(); ++i) {
            Section r(arr[i], "repump[" + std::to_string(i) + "]", &atom);
            std::string label = r.text("label", "repump_" + std::to_string(i + 1));
            for (char ch : label)
                if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_'))
                    throw ConfigError(r.at("label") + ": use letters, digits and '_' only");
            labels.push_back("v_" + label);
            repumps.push_back(parse_laser(r, atom, false));
        }
    }
    const bool two_level = root.flag("two_level", true);
    root.finish();
    if (!two_level && repumps.empty())
        throw ConfigError("config: nothing to compute (two_level is false and no repump given)");

    const auto n = static_cast<Eigen::Index>(points);
    Eigen::VectorXd rabi(n), sat(n), v2 = Eigen::VectorXd::Zero(n);
    std::vector<Eigen::VectorXd> v3(repumps.size(), Eigen::VectorXd::Zero(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        const double u = n == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(n - 1);
        const double x = spacing == "log" ? start * std::pow(stop / start, u) : start + u * (stop - start);
        if (variable == "rabi") {
            rabi[i] = x;
            bloch::LaserField l = cooling;
            l.rabi = x;
            sat[i] = bloch::saturation_param(l, atom);
        } else {
            sat[i] = x;
            rabi[i] = bloch::rabi_from_saturation(x, cooling.detuning, atom.gamma_ps);
        }
    }
    parallel_for(points, opt.threads, [&](std::size_t k) {
        const auto i = static_cast<Eigen::Index>(k);
        bloch::LaserField l = cooling;
        l.rabi = rabi[i];
        if (two_level)
            v2[i] = bloch::visibility_two_level(l, atom);
        for (std::size_t r = 0; r < repumps.size(); ++r)
            v3[r][i] = bloch::visibility_three_level(l, repumps[r], atom);
    });

    std::vector<std::string> names{"omega397_rad_s", "s397"};
    std::vector<Eigen::VectorXd> cols{rabi, sat};
    if (two_level) {
        names.push_back("v_two_level");
        cols.push_back(v2);
    }
    for (std::size_t r = 0; r < repumps.size(); ++r) {
        names.push_back(labels[r]);
        cols.push_back(v3[r]);
    }
    const std::set<std::string> unique(names.begin(), names.end());
    if (unique.size() != names.size())
        throw ConfigError("repump: labels must be distinct");
    sink.write(opt.format == "json" ? "scan.json" : "scan.csv", table_output(opt, metadata(opt), names, cols));
}

// --- crystal ---------------------------------------------------------------

/// Equilibrium positions, spacings and normal modes of "crystal".
inline void cmd_crystal(const Options& opt, Sink& sink) {
    Section root(opt.config, "");
    const Crystal c = parse_crystal(root);
    root.finish();
    auto meta = metadata(opt);
    std::ostringstream os;
    if (opt.format == "json") {
        out_json j;
        j["meta"] = meta.to_json();
        j["crystal"] = io::geometry_json(c.geometry, c.modes ? &*c.modes : nullptr);
        j["crystal"]["designed"] = c.designed;
        os << j.dump(2) << '\n';
    } else {
        auto join = [](const Eigen::VectorXd& v, double scale) {
            std::string out;
            for (double x : v)
                out += (out.empty() ? "" : " ") + io::format_double(x * scale);
            return out;
        };
        meta.extra.emplace_back("spacings_m", join(c.geometry.spacings(), 1.0));
        if (c.modes) {
            meta.extra.emplace_back("axial_modes_hz", join(c.modes->axial.frequencies, 1.0 / two_pi));
            for (std::size_t r = 0; r < c.modes->radial.size(); ++r)
                meta.extra.emplace_back("radial" + std::to_string(r + 1) + "_modes_hz",
                                        join(c.modes->radial[r].frequencies, 1.0 / two_pi));
        }
        io::write_geometry_csv(os, c.geometry, &meta);
    }
    sink.write(opt.format == "json" ? "crystal.json" : "crystal.csv", os.str());
}

// --- simulate --------------------------------------------------------------

/// Pair coherence from "coherence" ({"visibility"} or {"rho_pp", "coh2"}) or
/// from the steady state of "lasers" ({"cooling", ["repump"]}).
inline optics::CoherencePair parse_coherence(Section& root, const bloch::AtomLevels& atom) {
    root.exclusive({"coherence", "lasers"}, true);
    if (root.has("coherence")) {
        Section c = root.child("coherence");
        c.exclusive({"visibility", "rho_pp"}, true);
        optics::CoherencePair p;
        if (c.has("visibility")) {
            // Equivalent single-atom state with coh2 / rho_pp = V.
            const double v = c.number("visibility");
            if (!(v >= 0.0 && v < 1.0))
                throw ConfigError(c.at("visibility") + ": must lie in [0, 1)");
            p.rho_pp = 0.5 * (1.0 - v);
            p.coh2 = v * p.rho_pp;
        } else {
            p.rho_pp = c.number("rho_pp");
            p.coh2 = c.number("coh2");
        }
        c.finish();
        p.validate();
        return p;
    }
    Section l = root.child("lasers");
    l.set_atom(&atom);
    Section cs = l.child("cooling");
    const auto cooling = parse_laser(cs, atom, true);
    optics::CoherencePair p;
    if (l.has("repump")) {
        Section rs = l.child("repump");
        const auto repump = parse_laser(rs, atom, false);
        p = optics::CoherencePair::from(bloch::steady_state_three_level(cooling, repump, atom));
    } else {
        p = optics::CoherencePair::from(bloch::steady_state_two_level(cooling, atom));
    }
    l.finish();
    return p;
}

/// Pair covariances from "thermal": {"temperature"}, {"occupation"} (both
/// need a trap) or {"ion_rms"} (isotropic, uncorrelated ions). Frozen when
/// absent.
inline optics::ThermalSpread parse_thermal(Section& root, const Crystal& c) {
    const std::size_t n = c.geometry.size();
    auto s = root.optional_child("thermal");
    if (!s)
        return optics::ThermalSpread::frozen(n);
    s->exclusive({"temperature", "occupation", "ion_rms"}, true);
    optics::ThermalSpread spread;
    if (s->has("ion_rms")) {
        const double rms = s->quantity("ion_rms", Dim::length);
        if (!(rms >= 0.0))
            throw ConfigError(s->at("ion_rms") + ": must be non-negative");
        spread = optics::ThermalSpread::independent(n, rms * rms * Mat3::Identity());
    } else {
        if (!c.modes)
            throw ConfigError(s->path() + ": mode occupations need a trap, not explicit positions");
        const double mass = c.geometry.trap.mass;
        if (s->has("temperature")) {
            const double t = s->quantity("temperature", Dim::temperature);
            if (!(t >= 0.0))
                throw ConfigError(s->at("temperature") + ": must be non-negative");
            spread = thermal::relative_covariance(*c.modes, mass, thermal::ModeOccupation::thermal(*c.modes, t));
        } else {
            const double nbar = s->number("occupation");
            if (!(nbar >= 0.0))
                throw ConfigError(s->at("occupation") + ": must be non-negative");
            spread = thermal::relative_covariance(*c.modes, mass, thermal::ModeOccupation::uniform(*c.modes, nbar));
        }
    }
    s->finish();
    return spread;
}

/// Noiseless pattern plus, with "camera", a Poisson image and its column
/// sums.
///
/// "screen": {"pixels": 128, "pitch" | "span_envelopes": 8}
/// "camera": {"exposure", "background", "rows", "vertical_sigma",
///            "read_noise", "seed"}
inline void cmd_simulate(const Options& opt, Sink& sink) {
    Section root(opt.config, "");
    const auto atom = parse_atom(root);
    root.set_atom(&atom);
    const Crystal c = parse_crystal(root);
    const auto pair = parse_coherence(root, atom);
    const auto spread = parse_thermal(root, c);
    const auto det = parse_detection(root);
    const double psf = root.quantity("psf_width", Dim::length);
    if (!(psf > 0.0))
        throw ConfigError("psf_width: must be positive");

    optics::ScreenAxis screen;
    {
        auto s = root.optional_child("screen");
        config_json empty = config_json::object();
        Section fallback(empty, "screen");
        Section& sc = s ? *s : fallback;
        screen.pixels = static_cast<std::size_t>(sc.integer("pixels", 128, 1, 1 << 20));
        sc.exclusive({"pitch", "span_envelopes"}, false);
        if (sc.has("pitch"))
            screen.pitch = sc.quantity("pitch", Dim::length);
        else
            screen.pitch = sc.number("span_envelopes", 8.0) * optics::envelope_width(det, psf)
                           / static_cast<double>(screen.pixels);
        screen.centre = sc.quantity("centre", Dim::length, 0.0);
        sc.finish();
        if (!(screen.pitch > 0.0))
            throw ConfigError(sc.path() + ": pitch must be positive");
    }

    std::optional<optics::CameraOptions> cam;
    double exposure = 0.0, background = 0.0;
    std::uint64_t seed = 0;
    if (auto s = root.optional_child("camera")) {
        cam.emplace();
        exposure = s->number("exposure");
        background = s->number("background", 0.0);
        cam->rows = static_cast<std::size_t>(s->integer("rows", 48, 1, 1 << 16));
        cam->vertical_sigma = s->number("vertical_sigma", 0.0);
        cam->read_noise = s->number("read_noise", 0.0);
        seed = static_cast<std::uint64_t>(s->integer("seed", 0, 0, std::numeric_limits<long long>::max()));
        s->finish();
        cam->threads = opt.threads;
        if (opt.seed)
            seed = *opt.seed;
    }
    root.finish();

    const auto pattern = optics::render_pattern(c.geometry, pair, spread, det, screen, psf);
    auto meta = metadata(opt);
    std::ostringstream os;
    if (opt.format == "json") {
        out_json j;
        j["meta"] = meta.to_json();
        j["positions_m"] = io::to_json(c.geometry.positions);
        j["coherence"] = {{"rho_pp", pair.rho_pp}, {"coh2", pair.coh2}, {"visibility", pair.visibility()}};
        j["envelope_width_m"] = optics::envelope_width(det, psf);
        j["pattern"] = {{"x_m", io::to_json(pattern.x)}, {"intensity", io::to_json(pattern.intensity)}};
        os << j.dump(2) << '\n';
    } else {
        io::write_pattern_csv(os, pattern, &meta);
    }

    if (!cam) {
        sink.write(opt.format == "json" ? "pattern.json" : "pattern.csv", os.str());
        return;
    }
    if (!sink.has_dir())
        throw ConfigError("camera: image output needs --output DIR");
    sink.write(opt.format == "json" ? "pattern.json" : "pattern.csv", os.str());
    const auto img = optics::render_camera_image(pattern, exposure, background, seed, *cam);
    meta.seed = seed;
    std::ostringstream pgm, cols;
    io::write_pgm(pgm, img, &meta);
    sink.write("image.pgm", pgm.str(), true);
    io::write_fringe_csv(cols, fit::integrate_columns(img), &meta);
    sink.write("columns.csv", cols.str());
}

// --- fit -------------------------------------------------------------------

/// Fit of a fringe CSV (x, counts[, sigma]) or a 16-bit PGM image.
///
/// "model": {"kind": "free" | "harmonic" | "array", "order"}
/// "imaging": {"wavelength", "focal_length", "magnification"}
/// "region": {"rows": [begin, end], "cols": [begin, end]}   (images only)
/// "starts", "max_iterations"
inline void cmd_fit(const Options& opt, Sink& sink) {
    if (!opt.input)
        throw ConfigError("fit: missing input file");
    Section root(opt.config, "");
    fit::SourceModel model;
    if (auto m = root.optional_child("model")) {
        const std::string kind = m->choice("kind", {"free", "harmonic", "array"}, "free");
        const int order = static_cast<int>(m->integer("order", kind == "array" ? 2 : 1, 1, 32));
        m->finish();
        model = kind == "free" ? fit::SourceModel::free_terms(order)
                : kind == "harmonic" ? fit::SourceModel::harmonics(order)
                                     : fit::SourceModel::ion_array(order);
        try {
            model.validate();
        } catch (const InvalidArgument& e) {
            throw ConfigError(m->path() + ": " + e.what());
        }
    }
    fit::FitOptions fo;
    {
        auto s = root.optional_child("imaging");
        config_json empty = config_json::object();
        Section fallback(empty, "imaging");
        Section& im = s ? *s : fallback;
        fo.imaging.wavelength = im.quantity("wavelength", Dim::length, 397e-9);
        fo.imaging.screen_scale = im.quantity("focal_length", Dim::length, 0.02) * im.number("magnification", 10.0);
        im.finish();
        if (!(fo.imaging.wavelength > 0.0 && fo.imaging.screen_scale > 0.0))
            throw ConfigError(im.path() + ": wavelength, focal_length and magnification must be positive");
    }
    fo.starts = static_cast<int>(root.integer("starts", 3, 1, 64));
    fo.max_iterations = static_cast<int>(root.integer("max_iterations", 500, 1, 1000000));

    const std::string& path = *opt.input;
    const bool image = std::filesystem::path(path).extension() == ".pgm";
    fit::Region region;
    if (auto r = root.optional_child("region")) {
        if (!image)
            throw ConfigError(r->path() + ": only applies to image input");
        auto range = [&](const std::string& key, std::size_t& b, std::size_t& e) {
            if (!r->has(key))
                return;
            const auto& a = r->array(key);
            if (a.size() != 2 || !a[0].is_number_unsigned() || !a[1].is_number_unsigned())
                throw ConfigError(r->at(key) + ": expected [begin, end] pixel indices");
            b = a[0].get<std::size_t>();
            e = a[1].get<std::size_t>();
            if (e <= b)
                throw ConfigError(r->at(key) + ": end must exceed begin");
        };
        range("rows", region.row_begin, region.row_end);
        range("cols", region.col_begin, region.col_end);
        r->finish();
    }
    root.finish();

    std::string bytes;
    {
        auto f = io::impl::open_in(path, std::ios::in | std::ios::binary);
        std::ostringstream ss;
        ss << f.rdbuf();
        bytes = ss.str();
    }
    fit::FringeData1D data;
    std::istringstream in(bytes);
    if (image) {
        const auto img = io::read_pgm(in, path);
        try {
            data = fit::integrate_columns(img, region);
        } catch (const InvalidArgument& e) {
            throw ConfigError(std::string("region: ") + e.what());
        }
    } else {
        data = io::read_fringe_csv(in, path);
    }
    try {
        data.validate();
    } catch (const InvalidArgument& e) {
        throw ParseError(path + ": " + e.what());
    }

    auto meta = metadata(opt);
    meta.extra.emplace_back("input_hash", io::hex64(io::fnv1a64(bytes)));
    auto emit = [&](const fit::FitResult& r) {
        std::ostringstream os;
        if (opt.format == "json") {
            out_json j;
            j["meta"] = meta.to_json();
            j["fit"] = io::fit_result_json(r);
            os << j.dump(2) << '\n';
        } else {
            meta.write_csv_header(os);
            os << "# chi2: " << io::format_double(r.chi2) << '\n'
               << "# reduced_chi2: " << io::format_double(r.reduced_chi2) << '\n'
               << "# dof: " << r.dof << '\n'
               << "# converged: " << (r.converged ? "true" : "false") << '\n'
               << "name,value,error,error_asymptotic\n";
            for (std::size_t i = 0; i < r.names.size(); ++i) {
                const auto k = static_cast<Eigen::Index>(i);
                os << r.names[i] << ',' << io::format_double(r.params[k]) << ','
                   << io::format_double(r.errors[k]) << ',' << io::format_double(r.errors_asymptotic[k]) << '\n';
            }
            os << "visibility," << io::format_double(r.visibility) << ',' << io::format_double(r.visibility_err)
               << ",\n";
            for (std::size_t i = 0; i < r.spacings.size(); ++i)
                os << "spacing_" << i + 1 << "_m," << io::format_double(r.spacings[i]) << ','
                   << io::format_double(r.spacing_errors[i]) << ",\n";
            os << "psf_width_m," << io::format_double(r.psf_width) << ',' << io::format_double(r.psf_width_err)
               << ",\n";
        }
        sink.write(opt.format == "json" ? "fit.json" : "fit.csv", os.str());
    };
    try {
        emit(fit::fit_fringes(data, model, fo));
    } catch (const fit::FitFailure& e) {
        emit(e.best());
        throw;
    }
}

// --- gcpd ------------------------------------------------------------------

inline thermal::ModeOccupation parse_occupation(Section& s, const crystal::NormalModes& modes) {
    s.exclusive({"temperature", "occupation"}, true);
    thermal::ModeOccupation o;
    if (s.has("temperature")) {
        const double t = s.quantity("temperature", Dim::temperature);
        if (!(t >= 0.0))
            throw ConfigError(s.at("temperature") + ": must be non-negative");
        o = thermal::ModeOccupation::thermal(modes, t);
    } else {
        const double n = s.number("occupation");
        if (!(n >= 0.0))
            throw ConfigError(s.at("occupation") + ": must be non-negative");
        o = thermal::ModeOccupation::uniform(modes, n);
    }
    s.finish();
    return o;
}

/// Fringe visibility against the delay after a switch of the cooling
/// saturation, and its exponential fit.
///
/// "probe": {"cooling_detuning", "repump_detuning", "repump_saturation",
///           "saturation_before", "saturation_after"}
/// "heating": {"tau", ["initial", "final": {"temperature"} | {"occupation"}]}
///            Doppler temperatures of the two saturations when initial and
///            final are absent; frozen motion when tau is absent.
/// "schedule": {"init_duration", "settle_delay", "gate",
///              "offsets": [times] | {"start", "stop", "step"}}
/// "pair": [i, j], "prefactor", "sigma", "noise"
inline void cmd_gcpd(const Options& opt, Sink& sink) {
    Section root(opt.config, "");
    const auto atom = parse_atom(root);
    root.set_atom(&atom);
    const Crystal c = parse_crystal(root);
    if (!c.modes)
        throw ConfigError("crystal: gcpd needs a trap for the normal modes");
    const auto det = parse_detection(root);

    Section p = root.child("probe");
    p.set_atom(&atom);
    const double d397 = p.quantity("cooling_detuning", Dim::frequency);
    const double d866 = p.quantity("repump_detuning", Dim::frequency);
    const double s866 = p.number("repump_saturation");
    const double s_before = p.number("saturation_before");
    const double s_after = p.number("saturation_after");
    p.finish();
    if (!(s_before >= 0.0 && s_after >= 0.0 && s866 >= 0.0))
        throw ConfigError(p.path() + ": saturations must be non-negative");

    thermal::HeatingModel heating;
    {
        Section h = root.child("heating");
        heating.tau = h.quantity("tau", Dim::time, std::numeric_limits<double>::infinity());
        if (!(heating.tau > 0.0))
            throw ConfigError(h.at("tau") + ": must be positive");
        if (h.has("initial") || h.has("final")) {
            Section a = h.child("initial");
            heating.initial = parse_occupation(a, *c.modes);
            Section b = h.child("final");
            heating.final = parse_occupation(b, *c.modes);
        } else {
            if (!(d397 < 0.0))
                throw ConfigError(p.at("cooling_detuning") + ": Doppler temperatures need red detuning");
            heating = thermal::HeatingModel::doppler_step(*c.modes, atom, s_before, s_after, d397, heating.tau);
        }
        h.finish();
    }

    thermal::GcpdSchedule sched;
    {
        Section s = root.child("schedule");
        sched.init_duration = s.quantity("init_duration", Dim::time, sched.init_duration);
        sched.settle_delay = s.quantity("settle_delay", Dim::time, sched.settle_delay);
        sched.gate_duration = s.quantity("gate", Dim::time, sched.gate_duration);
        sched.offsets.clear();
        const auto& o = s.raw("offsets");
        if (o.is_array()) {
            for (std::size_t i = 0; i < o.size(); ++i)
                sched.offsets.push_back(
                    s.parse_quantity(o[i], Dim::time, s.at("offsets") + "[" + std::to_string(i) + "]"));
        } else {
            Section r(o, s.at("offsets"));
            const double a = r.quantity("start", Dim::time), b = r.quantity("stop", Dim::time);
            const double step = r.quantity("step", Dim::time);
            r.finish();
            if (!(step > 0.0 && b >= a))
                throw ConfigError(r.path() + ": need step > 0 and stop >= start");
            const auto count = static_cast<long long>(std::floor((b - a) / step * (1.0 + 1e-12))) + 1;
            if (count > 100000)
                throw ConfigError(r.path() + ": more than 100000 offsets");
            for (long long i = 0; i < count; ++i)
                sched.offsets.push_back(a + static_cast<double>(i) * step);
        }
        s.finish();
        try {
            sched.validate();
        } catch (const InvalidArgument& e) {
            throw ConfigError(s.path() + ": " + e.what());
        }
    }

    thermal::VisibilityModel vm;
    vm.modes = *c.modes;
    vm.mass = c.geometry.trap.mass;
    vm.k_eff = thermal::VisibilityModel::k_eff_on_axis(det);
    if (root.has("pair")) {
        const auto& a = root.array("pair");
        if (a.size() != 2 || !a[0].is_number_unsigned() || !a[1].is_number_unsigned())
            throw ConfigError("pair: expected [i, j]");
        vm.ion_i = a[0].get<std::size_t>();
        vm.ion_j = a[1].get<std::size_t>();
        if (vm.ion_i == vm.ion_j || vm.ion_i >= c.geometry.size() || vm.ion_j >= c.geometry.size())
            throw ConfigError("pair: need two distinct ions of the crystal");
    }
    vm.prefactor = root.number("prefactor", 1.0);
    vm.sigma = root.number("sigma", 1e-3);
    if (!(vm.sigma > 0.0) || !(vm.prefactor > 0.0))
        throw ConfigError("config: prefactor and sigma must be positive");
    const bool noise = root.flag("noise", false);
    const auto seed = static_cast<std::uint64_t>(root.integer("seed", 0, 0, std::numeric_limits<long long>::max()));
    root.finish();

    const auto before = thermal::ProbeLasers::from_saturation(atom, s_before, s866, d397, d866);
    const auto after = thermal::ProbeLasers::from_saturation(atom, s_after, s866, d397, d866);
    const auto settling = thermal::internal_settling(atom, before, after, sched.settle_delay);
    vm.internal_visibility = settling.visibility;

    auto series = thermal::gcpd_visibility_series(sched, heating, vm);
    auto meta = metadata(opt);
    if (noise) {
        const std::uint64_t s = opt.seed.value_or(seed);
        meta.seed = s;
        std::mt19937_64 rng(optics::impl::splitmix64(s));
        std::normal_distribution<double> gauss(0.0, 1.0);
        for (Eigen::Index i = 0; i < series.v.size(); ++i)
            series.v[i] += series.sigma[i] * gauss(rng);
    }
    const auto decay = fit::fit_visibility_decay(series);
    const double occupation_change = heating.relative_change(sched.settle_delay);

    std::ostringstream os;
    if (opt.format == "json") {
        out_json j;
        j["meta"] = meta.to_json();
        j["settling"] = {{"residual", settling.residual},
                         {"settled", settling.settled},
                         {"internal_visibility", settling.visibility},
                         {"occupation_change", occupation_change}};
        j["decay_fit"] = io::decay_fit_json(decay);
        j["series"] = {{"dt_s", io::to_json(series.t)},
                       {"visibility", io::to_json(series.v)},
                       {"sigma", io::to_json(series.sigma)}};
        os << j.dump(2) << '\n';
    } else {
        meta.extra.emplace_back("settling_residual", io::format_double(settling.residual));
        meta.extra.emplace_back("occupation_change", io::format_double(occupation_change));
        meta.extra.emplace_back("tau_s", decay.tau_infinite ? "inf" : io::format_double(decay.tau));
        meta.extra.emplace_back("tau_err_s", io::format_double(decay.tau_err));
        meta.extra.emplace_back("v0", io::format_double(decay.v0));
        meta.extra.emplace_back("v_inf", io::format_double(decay.v_inf));
        io::write_series_csv(os, series, &meta);
    }
    sink.write(opt.format == "json" ? "gcpd.json" : "series.csv", os.str());
}

// ---------------------------------------------------------------------------
// Entry point

inline config_json load_config(const std::string& path) {
    auto f = io::impl::open_in(path);
    std::ostringstream ss;
    ss << f.rdbuf();
    try {
        auto j = config_json::parse(ss.str());
        if (!j.is_object())
            throw ConfigError(path + ": top level must be an object");
        return j;
    } catch (const config_json::parse_error& e) {
        throw ConfigError(path + ": invalid JSON: " + e.what());
    }
}

inline int dispatch(const Options& opt, std::ostream& out) {
    Sink sink(opt, out);
    if (opt.command == "visibility-scan")
        cmd_visibility_scan(opt, sink);
    else if (opt.command == "crystal")
        cmd_crystal(opt, sink);
    else if (opt.command == "simulate")
        cmd_simulate(opt, sink);
    else if (opt.command == "fit")
        cmd_fit(opt, sink);
    else if (opt.command == "gcpd")
        cmd_gcpd(opt, sink);
    else
        throw ConfigError("unknown command " + opt.command);
    return exit_ok;
}

/// Parses argv, runs the subcommand and maps errors to exit codes.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Young interference from small trapped-ion crystals"};
    app.set_version_flag("--version", std::string("ionfringe ") + io::version);
    app.require_subcommand(1);

    std::string config_path, output, format = "csv", preset, input;
    std::uint64_t seed = 0;
    unsigned threads = 0;
    auto common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "JSON config file");
        sub->add_option("--seed", seed, "random seed, overrides the config");
        sub->add_option("--output", output, "output directory (default: stdout)");
        sub->add_option("--format", format, "output format")->check(CLI::IsMember({"csv", "json"}));
        sub->add_option("--threads", threads, "worker threads (0 = all cores)");
    };
    std::vector<CLI::App*> subs{
        app.add_subcommand("visibility-scan", "fringe visibility against the cooling drive"),
        app.add_subcommand("crystal", "equilibrium positions and normal modes"),
        app.add_subcommand("simulate", "fringe pattern and camera image"),
        app.add_subcommand("fit", "fit a fringe profile or image"),
        app.add_subcommand("gcpd", "visibility after a saturation switch and its decay time"),
    };
    for (auto* s : subs)
        common(s);
    subs[1]->add_option("--preset", preset, "two-ion, four-ion or equidistant");
    subs[3]->add_option("input", input, "fringe CSV or 16-bit PGM image")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_config;
    }

    Options opt;
    for (auto* s : subs)
        if (s->parsed())
            opt.command = s->get_name();
    opt.format = format;
    opt.threads = threads;
    if (!output.empty())
        opt.output_dir = output;
    if (!input.empty())
        opt.input = input;

    try {
        if (!config_path.empty())
            opt.config = load_config(config_path);
        if (!preset.empty()) {
            if (opt.config.contains("crystal"))
                throw ConfigError("--preset: the config already has a crystal section");
            opt.config["crystal"] = {{"preset", preset}};
        }
        if (subs[0]->count("--seed") + subs[2]->count("--seed") + subs[4]->count("--seed")
            + subs[1]->count("--seed") + subs[3]->count("--seed"))
            opt.seed = seed;
        return dispatch(opt, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const InvalidArgument& e) {
        err << "config error: " << e.what() << '\n';
        return exit_config;
    } catch (const NumericalError& e) {
        err << "numerical error: " << e.what() << '\n';
        return exit_numerical;
    } catch (const IoError& e) {
        err << "i/o error: " << e.what() << '\n';
        return exit_io;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return exit_internal;
    }
}

} // namespace ionfringe::cli

#endif
