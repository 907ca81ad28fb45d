#ifndef IONFRINGE_BLOCH_HPP
#define IONFRINGE_BLOCH_HPP

// Two- and three-level optical Bloch equations for a single driven ion:
// steady states, time evolution, and the fringe-visibility functionals built
// from the single-atom density matrix.
//
// Level labels: s = ground (S1/2), p = excited (P1/2), d = metastable (D3/2).
// Coherences are stored in the frames co-rotating with the lasers. All rates
// and frequencies are angular (rad/s).

#include <array>
#include <complex>
#include <cstddef>
#include <sstream>
#include <vector>

#include <boost/numeric/odeint.hpp>

#include "core.hpp"

namespace ionfringe::bloch {

using cplx = std::complex<double>;

struct AtomLevels {
    double gamma_ps = 0.0; ///< P->S decay rate
    double gamma_pd = 0.0; ///< P->D decay rate

    double gamma_total() const { return gamma_ps + gamma_pd; }
    double branching_ratio() const { return gamma_pd / gamma_total(); }

    /// Split a total P-state width into the two decay channels.
    static AtomLevels from_total(double gamma_total, double branching_pd) {
        detail::require(gamma_total > 0.0, "total decay rate must be positive");
        detail::require(branching_pd >= 0.0 && branching_pd < 1.0,
                        "branching ratio must lie in [0, 1)");
        return {gamma_total * (1.0 - branching_pd), gamma_total * branching_pd};
    }

    /// 40Ca+: 2 pi x 21.57 MHz total width, 7 % of decays into D3/2.
    static AtomLevels calcium40() { return from_total(two_pi * 21.57e6, 0.07); }

    void validate() const {
        detail::require_finite(gamma_ps, "gamma_ps");
        detail::require_finite(gamma_pd, "gamma_pd");
        detail::require(gamma_ps > 0.0, "gamma_ps must be positive");
        detail::require(gamma_pd >= 0.0, "gamma_pd must be non-negative");
    }
};

struct LaserField {
    double rabi = 0.0;        ///< Rabi frequency, >= 0
    double detuning = 0.0;    ///< laser minus atomic resonance, signed
    Vec3 k_dir = Vec3::UnitZ();
    double wavelength = 397e-9;

    Vec3 wavevector() const { return (two_pi / wavelength) * k_dir; }

    void validate() const {
        detail::require_finite(rabi, "rabi");
        detail::require_finite(detuning, "detuning");
        detail::require_finite(k_dir, "k_dir");
        detail::require(rabi >= 0.0, "rabi frequency must be non-negative");
        detail::require(detail::is_unit(k_dir), "k_dir must be a unit vector");
        detail::require(wavelength > 0.0 && std::isfinite(wavelength),
                        "wavelength must be positive");
    }
};

struct DensityMatrix2 {
    double rho_ss = 1.0;
    double rho_pp = 0.0;
    cplx rho_ps{0.0, 0.0};

    cplx rho_sp() const { return std::conj(rho_ps); }
    double trace() const { return rho_ss + rho_pp; }

    /// Ordered (s, p).
    Eigen::Matrix2cd matrix() const {
        Eigen::Matrix2cd m;
        m << rho_ss, rho_sp(), rho_ps, rho_pp;
        return m;
    }

    static DensityMatrix2 ground() { return {}; }
};

struct DensityMatrix3 {
    double rho_ss = 1.0;
    double rho_pp = 0.0;
    double rho_dd = 0.0;
    cplx rho_sp{0.0, 0.0};
    cplx rho_dp{0.0, 0.0};
    cplx rho_sd{0.0, 0.0};

    cplx rho_ps() const { return std::conj(rho_sp); }
    cplx rho_pd() const { return std::conj(rho_dp); }
    cplx rho_ds() const { return std::conj(rho_sd); }
    double trace() const { return rho_ss + rho_pp + rho_dd; }

    /// Ordered (s, p, d).
    Eigen::Matrix3cd matrix() const {
        Eigen::Matrix3cd m;
        m << rho_ss, rho_sp, rho_sd,
             rho_ps(), rho_pp, rho_pd(),
             rho_ds(), rho_dp, rho_dd;
        return m;
    }

    static DensityMatrix3 ground() { return {}; }
};

/// Smallest eigenvalue of the Hermitian density matrix.
template <class DM>
double min_eigenvalue(const DM& rho) {
    auto m = rho.matrix();
    using M = decltype(m);
    Eigen::SelfAdjointEigenSolver<M> es(m, Eigen::EigenvaluesOnly);
    return es.eigenvalues().minCoeff();
}

/// Saturation parameter S = (Omega^2/2) / (Delta^2 + Gamma_ps^2/4).
inline double saturation_param(const LaserField& laser, const AtomLevels& atom) {
    laser.validate();
    atom.validate();
    const double g = atom.gamma_ps;
    return 0.5 * laser.rabi * laser.rabi / (laser.detuning * laser.detuning + 0.25 * g * g);
}

/// Inverse of the saturation law for a transition of width `linewidth`.
inline double rabi_from_saturation(double s, double detuning, double linewidth) {
    detail::require(s >= 0.0 && std::isfinite(s), "saturation must be non-negative");
    detail::require(linewidth > 0.0, "linewidth must be positive");
    return std::sqrt(2.0 * s * (detuning * detuning + 0.25 * linewidth * linewidth));
}

// ---------------------------------------------------------------------------
// Equations of motion

/// Time derivative of the two-level density matrix.
inline DensityMatrix2 derivative(const DensityMatrix2& r, const LaserField& l,
                                 const AtomLevels& atom) {
    const cplx i{0.0, 1.0};
    const double g = atom.gamma_ps;
    DensityMatrix2 d;
    d.rho_ps = -(0.5 * g - i * l.detuning) * r.rho_ps - 0.5 * i * l.rabi * (r.rho_pp - r.rho_ss);
    d.rho_pp = -g * r.rho_pp + l.rabi * r.rho_ps.imag();
    d.rho_ss = -d.rho_pp;
    return d;
}

/// Time derivative of the three-level density matrix; l397 drives s-p, l866 drives d-p.
inline DensityMatrix3 derivative(const DensityMatrix3& r, const LaserField& l397,
                                 const LaserField& l866, const AtomLevels& atom) {
    const cplx i{0.0, 1.0};
    const double o1 = l397.rabi, o2 = l866.rabi;
    const double d1 = l397.detuning, d2 = l866.detuning;
    const double half_g = 0.5 * atom.gamma_total();
    DensityMatrix3 d;
    d.rho_ss = o1 * r.rho_sp.imag() + atom.gamma_ps * r.rho_pp;
    d.rho_dd = o2 * r.rho_dp.imag() + atom.gamma_pd * r.rho_pp;
    d.rho_pp = -d.rho_ss - d.rho_dd;
    d.rho_sp = (-i * d1 - half_g) * r.rho_sp - 0.5 * i * o2 * r.rho_sd
               + 0.5 * i * o1 * (r.rho_pp - r.rho_ss);
    d.rho_dp = (-i * d2 - half_g) * r.rho_dp - 0.5 * i * o1 * r.rho_ds()
               + 0.5 * i * o2 * (r.rho_pp - r.rho_dd);
    d.rho_sd = -i * (d1 - d2) * r.rho_sd + 0.5 * i * o1 * r.rho_pd() - 0.5 * i * o2 * r.rho_sp;
    return d;
}

// ---------------------------------------------------------------------------
// Steady states

/// Closed-form two-level steady state (rho_ps = i Omega / (2 (Gamma/2 - i Delta)(1 + S)),
/// rho_pp = S / (2 (1 + S))).
inline DensityMatrix2 steady_state_two_level_closed_form(const LaserField& laser,
                                                         const AtomLevels& atom) {
    const double s = saturation_param(laser, atom);
    const cplx i{0.0, 1.0};
    DensityMatrix2 r;
    r.rho_pp = s / (2.0 * (1.0 + s));
    r.rho_ss = 1.0 - r.rho_pp;
    r.rho_ps = i * laser.rabi / (2.0 * (0.5 * atom.gamma_ps - i * laser.detuning) * (1.0 + s));
    return r;
}

/// Two-level steady state by direct solve of {d/dt = 0, trace = 1}.
///
/// Unknowns (rho_pp, Re rho_ps, Im rho_ps) with rho_ss = 1 - rho_pp. The system
/// is always regular for gamma_ps > 0.
inline DensityMatrix2 steady_state_two_level(const LaserField& laser, const AtomLevels& atom) {
    laser.validate();
    atom.validate();
    const double g = atom.gamma_ps;
    const LaserField l{laser.rabi / g, laser.detuning / g, laser.k_dir, laser.wavelength};
    const AtomLevels unit{1.0, 0.0};

    auto unpack = [](const Eigen::Vector3d& x) {
        return DensityMatrix2{1.0 - x[0], x[0], {x[1], x[2]}};
    };
    auto rhs = [&](const Eigen::Vector3d& x) {
        const DensityMatrix2 d = derivative(unpack(x), l, unit);
        return Eigen::Vector3d(d.rho_pp, d.rho_ps.real(), d.rho_ps.imag());
    };
    const Eigen::Vector3d offset = rhs(Eigen::Vector3d::Zero());
    Eigen::Matrix3d m;
    for (int c = 0; c < 3; ++c)
        m.col(c) = rhs(Eigen::Vector3d::Unit(c)) - offset;
    return unpack(m.fullPivLu().solve(-offset));
}

/// Three-level steady state from the linear system {d/dt = 0, trace = 1}.
///
/// Throws DegenerateSteadyState when the system does not fix a unique state,
/// e.g. both lasers off, or the d level decoupled (gamma_pd = 0 and no repumper).
inline DensityMatrix3 steady_state_three_level(const LaserField& l397, const LaserField& l866,
                                               const AtomLevels& atom) {
    l397.validate();
    l866.validate();
    atom.validate();

    // Work in units of the total width so the matrix entries are O(1).
    const double g = atom.gamma_total();
    LaserField a = l397, b = l866;
    a.rabi /= g;
    a.detuning /= g;
    b.rabi /= g;
    b.detuning /= g;

    // Unknowns y = (ss, pp, dd, Re sp, Im sp, Re dp, Im dp, Re sd, Im sd). All
    // three populations are kept: when one level holds nearly everything,
    // recovering a small population from the trace loses it to cancellation.
    // The p equation is redundant and replaced by the trace condition.
    const double o1 = a.rabi, o2 = b.rabi, d1 = a.detuning, d2 = b.detuning;
    const double gps = atom.gamma_ps / g, gpd = atom.gamma_pd / g, h = 0.5 * (gps + gpd);
    const double dd = d1 - d2;
    Eigen::Matrix<double, 9, 9> m;
    // clang-format off
    m <<  0.0,     gps,     0.0,     0.0,     o1,      0.0,     0.0,     0.0,      0.0,
          0.0,     gpd,     0.0,     0.0,     0.0,     0.0,     o2,      0.0,      0.0,
          0.0,     0.0,     0.0,    -h,       d1,      0.0,     0.0,     0.0,      0.5 * o2,
         -0.5*o1,  0.5*o1,  0.0,    -d1,     -h,       0.0,     0.0,    -0.5 * o2, 0.0,
          0.0,     0.0,     0.0,     0.0,     0.0,    -h,       d2,      0.0,     -0.5 * o1,
          0.0,     0.5*o2, -0.5*o2,  0.0,     0.0,    -d2,     -h,      -0.5 * o1, 0.0,
          0.0,     0.0,     0.0,     0.0,     0.5*o2,  0.0,     0.5*o1,  0.0,      dd,
          0.0,     0.0,     0.0,    -0.5*o2,  0.0,     0.5*o1,  0.0,    -dd,       0.0,
          1.0,     1.0,     1.0,     0.0,     0.0,     0.0,     0.0,     0.0,      0.0;
    // clang-format on
    Eigen::Matrix<double, 9, 1> rhs = Eigen::Matrix<double, 9, 1>::Zero();
    rhs[8] = 1.0;

    const Eigen::FullPivLU<Eigen::Matrix<double, 9, 9>> lu(m);
    if (lu.rank() < 9 || lu.rcond() < 1e-13)
        throw DegenerateSteadyState("three-level steady state is not unique for these parameters");
    Eigen::Matrix<double, 9, 1> y = lu.solve(rhs);
    y += lu.solve(rhs - m * y);

    DensityMatrix3 r;
    r.rho_ss = y[0];
    r.rho_pp = y[1];
    r.rho_dd = y[2];
    r.rho_sp = {y[3], y[4]};
    r.rho_dp = {y[5], y[6]};
    r.rho_sd = {y[7], y[8]};
    return r;
}

// ---------------------------------------------------------------------------
// Time evolution

struct EvolveOptions {
    double rel_tol = 1e-10;
    double abs_tol = 1e-12;
    /// Output points are spaced evenly over [0, t_span], endpoints included.
    std::size_t n_output = 100;
    std::size_t max_steps = 50'000'000;
};

template <class DM>
struct Trajectory {
    std::vector<double> times;
    std::vector<DM> states;

    const DM& final_state() const { return states.back(); }
};

namespace impl {

using State2 = std::array<double, 4>;
using State3 = std::array<double, 9>;

inline State2 to_state(const DensityMatrix2& r) {
    return {r.rho_ss, r.rho_pp, r.rho_ps.real(), r.rho_ps.imag()};
}
inline DensityMatrix2 from_state(const State2& x) {
    return {x[0], x[1], {x[2], x[3]}};
}
inline State3 to_state(const DensityMatrix3& r) {
    return {r.rho_ss, r.rho_pp, r.rho_dd, r.rho_sp.real(), r.rho_sp.imag(),
            r.rho_dp.real(), r.rho_dp.imag(), r.rho_sd.real(), r.rho_sd.imag()};
}
inline DensityMatrix3 from_state(const State3& x) {
    DensityMatrix3 r;
    r.rho_ss = x[0];
    r.rho_pp = x[1];
    r.rho_dd = x[2];
    r.rho_sp = {x[3], x[4]};
    r.rho_dp = {x[5], x[6]};
    r.rho_sd = {x[7], x[8]};
    return r;
}

template <class DM>
void check_state(const DM& r, double trace_tol, double positivity_tol, const char* what) {
    if (!(std::abs(r.trace() - 1.0) < trace_tol))
        throw InvalidArgument(std::string(what) + ": trace deviates from 1");
    if (!(min_eigenvalue(r) > -positivity_tol))
        throw InvalidArgument(std::string(what) + ": density matrix is not positive semidefinite");
}

template <class DM, class Rhs>
Trajectory<DM> integrate(const DM& rho0, Rhs&& rhs, double t_span, const EvolveOptions& opt,
                         double rate_scale) {
    using namespace boost::numeric::odeint;
    using State = decltype(to_state(rho0));

    detail::require(t_span >= 0.0 && std::isfinite(t_span), "t_span must be non-negative");
    detail::require(opt.n_output >= 1, "n_output must be at least 1");
    check_state(rho0, 1e-10, 1e-9, "initial state");

    Trajectory<DM> out;
    out.times.push_back(0.0);
    out.states.push_back(rho0);
    if (t_span == 0.0)
        return out;

    auto system = [&](const State& x, State& dxdt, double) {
        dxdt = to_state(rhs(from_state(x)));
    };
    auto stepper = make_controlled<runge_kutta_dopri5<State>>(opt.abs_tol, opt.rel_tol);

    State x = to_state(rho0);
    double t = 0.0;
    double dt = 0.01 / rate_scale;
    std::size_t steps = 0;
    const double min_dt = 1e-15 * t_span;

    for (std::size_t k = 1; k <= opt.n_output; ++k) {
        const double t_out = t_span * static_cast<double>(k) / static_cast<double>(opt.n_output);
        while (t < t_out) {
            const double remaining = t_out - t;
            if (remaining <= 1e-14 * t_span) {
                t = t_out;
                break;
            }
            double h = std::min(dt, remaining);
            const bool truncated = h < dt;
            if (stepper.try_step(system, x, t, h) == fail) {
                if (h < min_dt) {
                    std::ostringstream msg;
                    msg << "step size underflow at t=" << t << " s (dt=" << h << " s, trace="
                        << from_state(x).trace() << ")";
                    throw IntegrationFailure(msg.str());
                }
                dt = h;
                continue;
            }
            // A step shortened to land on an output point says nothing about
            // the admissible step size; keep the previous proposal then.
            if (!truncated)
                dt = h;
            if (++steps > opt.max_steps)
                throw IntegrationFailure("maximum number of integration steps exceeded");
        }
        t = t_out;
        DM r = from_state(x);
        if (!(std::abs(r.trace() - 1.0) < 1e-8) || !(min_eigenvalue(r) > -1e-7)) {
            std::ostringstream msg;
            msg << "state left the physical domain at t=" << t << " s (trace=" << r.trace()
                << ", min eigenvalue=" << min_eigenvalue(r) << ")";
            throw IntegrationFailure(msg.str());
        }
        out.times.push_back(t);
        out.states.push_back(r);
    }
    return out;
}

} // namespace impl

/// Integrate the two-level equations from rho0 over [0, t_span] seconds.
inline Trajectory<DensityMatrix2> evolve(const DensityMatrix2& rho0, const LaserField& laser,
                                         const AtomLevels& atom, double t_span,
                                         const EvolveOptions& opt = {}) {
    laser.validate();
    atom.validate();
    const double scale = std::max({atom.gamma_ps, laser.rabi, std::abs(laser.detuning)});
    return impl::integrate(
        rho0, [&](const DensityMatrix2& r) { return derivative(r, laser, atom); }, t_span, opt,
        scale);
}

/// Integrate the three-level equations from rho0 over [0, t_span] seconds.
inline Trajectory<DensityMatrix3> evolve(const DensityMatrix3& rho0, const LaserField& l397,
                                         const LaserField& l866, const AtomLevels& atom,
                                         double t_span, const EvolveOptions& opt = {}) {
    l397.validate();
    l866.validate();
    atom.validate();
    const double scale = std::max({atom.gamma_total(), l397.rabi, l866.rabi,
                                   std::abs(l397.detuning), std::abs(l866.detuning)});
    return impl::integrate(
        rho0, [&](const DensityMatrix3& r) { return derivative(r, l397, l866, atom); }, t_span,
        opt, scale);
}

// ---------------------------------------------------------------------------
// Visibility

/// |rho_sp|^2 / rho_pp of a given state. Undefined (NaN) when rho_pp == 0.
inline double coherence_ratio(const DensityMatrix2& r) { return std::norm(r.rho_ps) / r.rho_pp; }
inline double coherence_ratio(const DensityMatrix3& r) { return std::norm(r.rho_sp) / r.rho_pp; }

/// Two-level fringe visibility 1/(1+S); equals 1 at zero drive.
inline double visibility_two_level(const LaserField& laser, const AtomLevels& atom) {
    return 1.0 / (1.0 + saturation_param(laser, atom));
}

/// Closed-form three-level fringe visibility |rho_sp|^2 / rho_pp.
///
/// The expression stays finite at Omega_397 = 0 (where it gives the elastic
/// limit), so no special casing is needed there. With the repumper off and
/// gamma_pd > 0 the ion is shelved in d and the result is 0.
inline double visibility_three_level(const LaserField& l397, const LaserField& l866,
                                     const AtomLevels& atom) {
    l397.validate();
    l866.validate();
    atom.validate();

    const double g = atom.gamma_total();
    const double gps = atom.gamma_ps / g, gpd = atom.gamma_pd / g;
    const double o1 = l397.rabi / g, o2 = l866.rabi / g;
    const double d1 = l397.detuning / g, d2 = l866.detuning / g;
    const double gt = gps + gpd;

    const double dd = d1 - d2;
    const double dd2 = dd * dd;
    const double o1s = o1 * o1, o1q = o1s * o1s;
    const double o2s = o2 * o2, o2q = o2s * o2s;
    const double shift = 4.0 * d1 * (d2 - d1) + o2s;

    const double num =
        o2s * (gpd * gpd * (4.0 * gps * gps * dd2 + o1q)
               + 2.0 * gpd * gps * (4.0 * gps * gps * dd2 + o1s * shift)
               + gps * gps * (4.0 * gps * gps * dd2 + shift * shift));

    const double den =
        gt * (gpd * o1s * (4.0 * dd2 * (gt * gt + 4.0 * d2 * d2) + 8.0 * dd * d2 * o1s + o1q)
              + (4.0 * gps * (gt * gt + 4.0 * d1 * d1) * dd2 + 8.0 * gt * dd2 * o1s
                 + (2.0 * gpd + gps) * o1q) * o2s
              + (8.0 * gps * d1 * (d2 - d1) + (gpd + 2.0 * gps) * o1s) * o2q
              + gps * o2q * o2s);

    if (!(den > 0.0))
        throw DegenerateSteadyState("three-level steady state is not unique for these parameters");
    return num / den;
}

} // namespace ionfringe::bloch

#endif
