#ifndef IONFRINGE_THERMAL_HPP
#define IONFRINGE_THERMAL_HPP

// Thermal occupation of crystal normal modes, the relative-displacement
// covariance behind the Debye-Waller factor, and gated cooling/probe timing.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>
#include <Eigen/Dense>

#include "bloch.hpp"
#include "core.hpp"
#include "crystal.hpp"
#include "fit.hpp"
#include "optics.hpp"

namespace ionfringe::thermal {

/// T_D = hbar Gamma / (2 k_B) with Gamma the total P-state width.
inline double doppler_limit_temperature(const bloch::AtomLevels& atom) {
    atom.validate();
    return constants::hbar * atom.gamma_total() / (2.0 * constants::boltzmann);
}

/// Doppler cooling equilibrium for a red-detuned beam of saturation s:
/// k_B T = (hbar Gamma / 4) (1 + s + (2 Delta / Gamma)^2) / (2 |Delta| / Gamma).
/// Reduces to the Doppler limit at s = 0 and Delta = -Gamma / 2.
inline double doppler_temperature(const bloch::AtomLevels& atom, double saturation, double detuning) {
    atom.validate();
    detail::require(saturation >= 0.0 && std::isfinite(saturation), "saturation must be non-negative");
    detail::require(detuning < 0.0, "Doppler cooling needs a red-detuned laser");
    const double g = atom.gamma_total();
    const double x = 2.0 * std::abs(detuning) / g;
    return constants::hbar * g / (4.0 * constants::boltzmann) * (1.0 + saturation + x * x) / x;
}

/// Bose-Einstein occupation of a mode of angular frequency omega.
inline double mean_occupation(double omega, double temperature) {
    detail::require(omega > 0.0, "mode frequency must be positive");
    detail::require(temperature >= 0.0 && std::isfinite(temperature), "temperature must be non-negative");
    if (temperature == 0.0)
        return 0.0;
    return 1.0 / std::expm1(constants::hbar * omega / (constants::boltzmann * temperature));
}

/// r.m.s. extent of a mode coordinate: sigma^2 = hbar / (2 m omega) (2 nbar + 1).
inline double wavepacket_rms(double omega, double mass, double nbar) {
    detail::require(omega > 0.0 && mass > 0.0, "frequency and mass must be positive");
    detail::require(nbar >= 0.0 && std::isfinite(nbar), "occupation must be non-negative");
    return std::sqrt(constants::hbar / (2.0 * mass * omega) * (2.0 * nbar + 1.0));
}

/// Mean phonon number per mode, laid out like crystal::NormalModes.
struct ModeOccupation {
    Eigen::VectorXd axial;
    std::vector<Eigen::VectorXd> radial;

    static ModeOccupation uniform(const crystal::NormalModes& modes, double nbar) {
        detail::require(nbar >= 0.0 && std::isfinite(nbar), "occupation must be non-negative");
        ModeOccupation o;
        o.axial = Eigen::VectorXd::Constant(modes.axial.frequencies.size(), nbar);
        for (const auto& set : modes.radial)
            o.radial.push_back(Eigen::VectorXd::Constant(set.frequencies.size(), nbar));
        return o;
    }

    /// Every mode in equilibrium at one temperature.
    static ModeOccupation thermal(const crystal::NormalModes& modes, double temperature) {
        auto fill = [&](const Eigen::VectorXd& w) {
            Eigen::VectorXd n(w.size());
            for (Eigen::Index m = 0; m < w.size(); ++m)
                n[m] = mean_occupation(w[m], temperature);
            return n;
        };
        ModeOccupation o;
        o.axial = fill(modes.axial.frequencies);
        for (const auto& set : modes.radial)
            o.radial.push_back(fill(set.frequencies));
        return o;
    }

    void validate(const crystal::NormalModes& modes) const {
        auto check = [](const Eigen::VectorXd& n, const Eigen::VectorXd& w) {
            detail::require(n.size() == w.size(), "occupation count does not match the modes");
            detail::require(n.allFinite() && (n.array() >= 0.0).all(), "occupations must be non-negative");
        };
        check(axial, modes.axial.frequencies);
        detail::require(radial.size() == modes.radial.size(), "radial occupation sets do not match the modes");
        for (std::size_t r = 0; r < radial.size(); ++r)
            check(radial[r], modes.radial[r].frequencies);
    }

    /// this + f (to - this), mode by mode.
    ModeOccupation blend(const ModeOccupation& to, double f) const {
        detail::require(to.axial.size() == axial.size() && to.radial.size() == radial.size(),
                        "occupation layouts differ");
        ModeOccupation o;
        o.axial = axial + f * (to.axial - axial);
        for (std::size_t r = 0; r < radial.size(); ++r) {
            detail::require(to.radial[r].size() == radial[r].size(), "occupation layouts differ");
            o.radial.push_back(radial[r] + f * (to.radial[r] - radial[r]));
        }
        return o;
    }
};

namespace impl {

template <class F>
void for_each_mode(const crystal::NormalModes& modes, const ModeOccupation& occ, F&& f) {
    f(modes.axial, occ.axial);
    for (std::size_t r = 0; r < modes.radial.size(); ++r)
        f(modes.radial[r], occ.radial[r]);
}

// Centre-of-mass modes move every ion alike.
inline bool is_common_mode(const crystal::ModeSet& set, Eigen::Index m) {
    const auto n = static_cast<double>(set.vectors.rows());
    return std::abs(set.vectors.col(m).sum()) / std::sqrt(n) > 1.0 - 1e-9;
}

} // namespace impl

/// Covariance of the displacement of one ion.
inline Mat3 ion_covariance(const crystal::NormalModes& modes, double mass, const ModeOccupation& occ,
                           std::size_t ion) {
    occ.validate(modes);
    detail::require(ion < static_cast<std::size_t>(modes.axial.vectors.rows()), "ion index out of range");
    Mat3 cov = Mat3::Zero();
    impl::for_each_mode(modes, occ, [&](const crystal::ModeSet& set, const Eigen::VectorXd& n) {
        const Mat3 dd = set.direction * set.direction.transpose();
        for (Eigen::Index m = 0; m < set.frequencies.size(); ++m) {
            const double s = wavepacket_rms(set.frequencies[m], mass, n[m]);
            const double e = set.vectors(static_cast<Eigen::Index>(ion), m);
            cov += s * s * e * e * dd;
        }
    });
    return cov;
}

/// Pair covariances of u_i - u_j summed over modes:
/// sum_m sigma_m^2 (e_mi - e_mj)^2 d_m d_m^T. Centre-of-mass modes are left
/// out, so their occupation never enters.
inline optics::ThermalSpread relative_covariance(const crystal::NormalModes& modes, double mass,
                                                 const ModeOccupation& occ) {
    occ.validate(modes);
    detail::require(mass > 0.0, "mass must be positive");
    const auto n = static_cast<std::size_t>(modes.axial.vectors.rows());
    optics::ThermalSpread spread(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            Mat3 cov = Mat3::Zero();
            impl::for_each_mode(modes, occ, [&](const crystal::ModeSet& set, const Eigen::VectorXd& nb) {
                detail::require(static_cast<std::size_t>(set.vectors.rows()) == n, "mode sets differ in size");
                const Mat3 dd = set.direction * set.direction.transpose();
                for (Eigen::Index m = 0; m < set.frequencies.size(); ++m) {
                    if (impl::is_common_mode(set, m))
                        continue;
                    const double diff = set.vectors(static_cast<Eigen::Index>(i), m)
                                        - set.vectors(static_cast<Eigen::Index>(j), m);
                    const double s = wavepacket_rms(set.frequencies[m], mass, nb[m]);
                    cov += s * s * diff * diff * dd;
                }
            });
            spread.set(i, j, cov);
        }
    return spread;
}

/// Wavepacket sizes of the modes that move ions relative to each other
/// (breathing and rocking for two ions).
struct WavepacketSummary {
    std::vector<double> mode_rms;  ///< per relative mode, mode coordinate, m
    std::vector<double> frequency; ///< matching angular frequencies
    double combined = 0.0;         ///< r.m.s. over the relative modes, m
};

inline WavepacketSummary relative_mode_wavepackets(const crystal::NormalModes& modes, double mass,
                                                   const ModeOccupation& occ) {
    occ.validate(modes);
    WavepacketSummary out;
    double sum = 0.0;
    impl::for_each_mode(modes, occ, [&](const crystal::ModeSet& set, const Eigen::VectorXd& nb) {
        for (Eigen::Index m = 0; m < set.frequencies.size(); ++m) {
            if (impl::is_common_mode(set, m))
                continue;
            const double s = wavepacket_rms(set.frequencies[m], mass, nb[m]);
            out.mode_rms.push_back(s);
            out.frequency.push_back(set.frequencies[m]);
            sum += s * s;
        }
    });
    if (!out.mode_rms.empty())
        out.combined = std::sqrt(sum / static_cast<double>(out.mode_rms.size()));
    return out;
}

// ---------------------------------------------------------------------------
// Gated cooling and probe detection

struct GcpdSchedule {
    double init_duration = 175e-6;
    double settle_delay = 5e-6;
    double gate_duration = 10e-6;
    std::vector<double> offsets{0.0}; ///< gate start after the settle delay, s

    /// Gate of 250 us stepped from 0 to 2.5 ms.
    static GcpdSchedule heating_scan() {
        GcpdSchedule s;
        s.gate_duration = 250e-6;
        s.offsets.clear();
        for (int i = 0; i <= 10; ++i)
            s.offsets.push_back(250e-6 * i);
        return s;
    }

    void validate() const {
        for (double v : {init_duration, settle_delay, gate_duration})
            detail::require(v >= 0.0 && std::isfinite(v), "schedule durations must be non-negative");
        detail::require(!offsets.empty(), "schedule needs at least one gate");
        for (double v : offsets)
            detail::require(v >= 0.0 && std::isfinite(v), "gate offsets must be non-negative");
    }
};

/// Exponential relaxation of every mode from `initial` to `final` after the
/// switch at t = 0. An infinite tau freezes the motion.
struct HeatingModel {
    double tau = std::numeric_limits<double>::infinity();
    ModeOccupation initial;
    ModeOccupation final;

    ModeOccupation at(double t) const {
        detail::require(t >= 0.0, "time must be non-negative");
        const double f = std::isinf(tau) ? 0.0 : -std::expm1(-t / tau);
        return initial.blend(final, f);
    }

    /// Largest relative change of any mode occupation between 0 and t.
    double relative_change(double t) const {
        const ModeOccupation now = at(t);
        double worst = 0.0;
        auto cmp = [&](const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
            for (Eigen::Index m = 0; m < a.size(); ++m) {
                const double ref = std::max(a[m], 1e-300);
                worst = std::max(worst, std::abs(b[m] - a[m]) / ref);
            }
        };
        cmp(initial.axial, now.axial);
        for (std::size_t r = 0; r < initial.radial.size(); ++r)
            cmp(initial.radial[r], now.radial[r]);
        return worst;
    }

    void validate(const crystal::NormalModes& modes) const {
        detail::require(tau > 0.0, "heating time constant must be positive");
        initial.validate(modes);
        final.validate(modes);
    }

    /// Thermal occupations before and after a change of cooling saturation.
    static HeatingModel doppler_step(const crystal::NormalModes& modes, const bloch::AtomLevels& atom,
                                     double s_before, double s_after, double detuning, double tau) {
        return {tau, ModeOccupation::thermal(modes, doppler_temperature(atom, s_before, detuning)),
                ModeOccupation::thermal(modes, doppler_temperature(atom, s_after, detuning))};
    }
};

/// Cooling (397 nm) and repump (866 nm) beams from saturation parameters.
/// The cooling saturation refers to the s-p width, the repump one to the
/// total P width.
struct ProbeLasers {
    bloch::LaserField cooling;
    bloch::LaserField repump;

    static ProbeLasers from_saturation(const bloch::AtomLevels& atom, double s397, double s866, double detuning397,
                                       double detuning866) {
        atom.validate();
        ProbeLasers p;
        p.cooling.rabi = bloch::rabi_from_saturation(s397, detuning397, atom.gamma_ps);
        p.cooling.detuning = detuning397;
        p.cooling.k_dir = Vec3(1, 0, -1).normalized();
        p.cooling.wavelength = 397e-9;
        p.repump.rabi = bloch::rabi_from_saturation(s866, detuning866, atom.gamma_total());
        p.repump.detuning = detuning866;
        p.repump.k_dir = Vec3(-1, 0, -1).normalized();
        p.repump.wavelength = 866e-9;
        return p;
    }
};

struct SettlingReport {
    double residual = 0.0;   ///< Frobenius norm of rho(t) - rho_ss(after)
    double visibility = 0.0; ///< steady-state |rho_sp|^2 / rho_pp after the switch
    bool settled = false;    ///< residual < tolerance
};

/// Start in the steady state for `before`, switch to `after` and integrate for
/// `delay` seconds.
inline SettlingReport internal_settling(const bloch::AtomLevels& atom, const ProbeLasers& before,
                                        const ProbeLasers& after, double delay, double tolerance = 1e-3) {
    detail::require(delay >= 0.0, "delay must be non-negative");
    const auto rho0 = bloch::steady_state_three_level(before.cooling, before.repump, atom);
    const auto rho_ss = bloch::steady_state_three_level(after.cooling, after.repump, atom);
    bloch::EvolveOptions opt;
    opt.n_output = 2;
    const auto traj = bloch::evolve(rho0, after.cooling, after.repump, atom, delay, opt);
    SettlingReport r;
    r.residual = (traj.final_state().matrix() - rho_ss.matrix()).norm();
    r.visibility = bloch::coherence_ratio(rho_ss);
    r.settled = r.residual < tolerance;
    return r;
}

/// Inputs that turn occupations into a fringe visibility for one ion pair.
struct VisibilityModel {
    crystal::NormalModes modes;
    double mass = constants::mass_ca40_ion;
    Vec3 k_eff = Vec3::Zero(); ///< absorbed minus emitted wave vector
    std::size_t ion_i = 0, ion_j = 1;
    double internal_visibility = 1.0;
    double prefactor = 1.0;
    double sigma = 1e-3; ///< standard error attached to each series point

    /// k_eff for emission along the detection axis.
    static Vec3 k_eff_on_axis(const optics::DetectionGeometry& det) {
        det.validate();
        return det.k_laser - det.wavenumber() * det.detect_axis;
    }

    double debye_waller(const ModeOccupation& occ) const {
        const optics::ThermalSpread spread = relative_covariance(modes, mass, occ);
        detail::require(ion_i != ion_j && ion_i < spread.size() && ion_j < spread.size(), "bad ion pair");
        return optics::debye_waller_factor(k_eff, spread.pair(ion_i, ion_j));
    }

    double visibility(const ModeOccupation& occ) const {
        return prefactor * internal_visibility * debye_waller(occ);
    }
};

/// V(dt) = prefactor V_internal <DW>_gate for each gate offset of the
/// schedule. Times count from the saturation switch; the Debye-Waller factor
/// is averaged over the gate.
inline fit::DecaySeries gcpd_visibility_series(const GcpdSchedule& schedule, const HeatingModel& heating,
                                               const VisibilityModel& model) {
    schedule.validate();
    heating.validate(model.modes);
    detail::require(model.sigma > 0.0, "series standard error must be positive");
    const auto n = static_cast<Eigen::Index>(schedule.offsets.size());
    fit::DecaySeries s;
    s.t.resize(n);
    s.v.resize(n);
    s.sigma = Eigen::VectorXd::Constant(n, model.sigma);
    for (Eigen::Index k = 0; k < n; ++k) {
        const double t0 = schedule.settle_delay + schedule.offsets[static_cast<std::size_t>(k)];
        double dw;
        if (schedule.gate_duration == 0.0) {
            dw = model.debye_waller(heating.at(t0));
        } else {
            const double g = schedule.gate_duration;
            dw = boost::math::quadrature::gauss<double, 20>::integrate(
                     [&](double u) { return model.debye_waller(heating.at(t0 + u)); }, 0.0, g)
                 / g;
        }
        s.t[k] = schedule.offsets[static_cast<std::size_t>(k)];
        s.v[k] = model.prefactor * model.internal_visibility * dw;
    }
    return s;
}

} // namespace ionfringe::thermal

#endif
