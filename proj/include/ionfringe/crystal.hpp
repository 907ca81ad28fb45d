#ifndef IONFRINGE_CRYSTAL_HPP
#define IONFRINGE_CRYSTAL_HPP

// Linear ion crystals: axial equilibrium positions in harmonic or polynomial
// potentials, normal modes, and the inverse problem of shaping a potential so
// that the ions sit equidistantly.
//
// Internally everything is dimensionless: lengths in units of L (the harmonic
// length scale for harmonic traps) and energies in units of k q^2 / L, where
// k q^2 = q^2 / (4 pi eps0).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "core.hpp"

namespace ionfringe::crystal {

inline constexpr std::size_t max_ions = 32;

/// ell^3 = q^2 / (4 pi eps0 m omega_z^2).
inline double length_scale(double mass, double omega_z) {
    detail::require(mass > 0.0 && std::isfinite(mass), "mass must be positive");
    detail::require(omega_z > 0.0 && std::isfinite(omega_z), "omega_z must be positive");
    return std::cbrt(constants::coulomb_constant_q2 / (mass * omega_z * omega_z));
}

/// Axial potential U(z) = sum_k c_k z^k plus uniform radial confinement.
///
/// A harmonic trap sets omega_z and leaves axial_poly empty. Radial frequencies
/// of zero mean "not modelled"; normal_modes then returns no radial modes.
struct TrapConfig {
    double mass = constants::mass_ca40_ion;
    double omega_z = 0.0;
    std::vector<double> axial_poly; ///< c_k at index k, J/m^k; c_0 and c_1 must be 0
    double omega_r1 = 0.0;
    double omega_r2 = 0.0;
    Vec3 axis = Vec3::UnitZ();
    Vec3 radial_dir1 = Vec3(1.0, 1.0, 0.0).normalized();
    Vec3 radial_dir2 = Vec3(-1.0, 1.0, 0.0).normalized();

    static TrapConfig harmonic(double mass, double omega_z, double omega_r1 = 0.0,
                               double omega_r2 = 0.0) {
        TrapConfig t;
        t.mass = mass;
        t.omega_z = omega_z;
        t.omega_r1 = omega_r1;
        t.omega_r2 = omega_r2;
        return t;
    }

    static TrapConfig polynomial(double mass, std::vector<double> coefficients) {
        TrapConfig t;
        t.mass = mass;
        t.axial_poly = std::move(coefficients);
        return t;
    }

    bool is_harmonic() const { return axial_poly.empty(); }

    /// Coefficients c_k of U(z); for a harmonic trap only c_2 = m omega_z^2 / 2.
    std::vector<double> coefficients() const {
        if (is_harmonic())
            return {0.0, 0.0, 0.5 * mass * omega_z * omega_z};
        std::vector<double> c = axial_poly;
        while (!c.empty() && c.back() == 0.0)
            c.pop_back();
        return c;
    }

    double potential(double z) const {
        const std::vector<double> c = coefficients();
        double u = 0.0;
        for (std::size_t k = c.size(); k-- > 0;)
            u = u * z + c[k];
        return u;
    }

    void validate() const {
        detail::require(mass > 0.0 && std::isfinite(mass), "mass must be positive");
        detail::require_finite(omega_r1, "omega_r1");
        detail::require_finite(omega_r2, "omega_r2");
        detail::require(omega_r1 >= 0.0 && omega_r2 >= 0.0,
                        "radial frequencies must be non-negative");
        detail::require(detail::is_unit(axis, 1e-9) && detail::is_unit(radial_dir1, 1e-9)
                            && detail::is_unit(radial_dir2, 1e-9),
                        "trap axes must be unit vectors");
        if (is_harmonic()) {
            detail::require(omega_z > 0.0 && std::isfinite(omega_z),
                            "harmonic trap needs omega_z > 0");
            return;
        }
        detail::require(omega_z == 0.0, "set either omega_z or axial_poly, not both");
        for (double ck : axial_poly)
            detail::require_finite(ck, "axial_poly coefficient");
        detail::require(axial_poly.size() < 2 || (axial_poly[0] == 0.0 && axial_poly[1] == 0.0),
                        "axial_poly must start at the quadratic term (c_0 = c_1 = 0)");
        const std::vector<double> c = coefficients();
        detail::require(c.size() >= 3, "axial potential is not confining");
        const std::size_t lead = c.size() - 1;
        detail::require(lead % 2 == 0 && c[lead] > 0.0,
                        "axial potential is not confining (leading even coefficient must be > 0)");
    }
};

struct CrystalGeometry {
    Eigen::VectorXd positions; ///< axial coordinates, m, ascending
    double length_scale = 0.0; ///< L, m
    TrapConfig trap;
    double residual = 0.0; ///< max |net force| in units of k q^2 / L^2

    std::size_t size() const { return static_cast<std::size_t>(positions.size()); }

    Eigen::VectorXd spacings() const {
        const Eigen::Index n = positions.size();
        if (n < 2)
            return {};
        return positions.tail(n - 1) - positions.head(n - 1);
    }

    /// Ion positions as 3D points along the trap axis.
    std::vector<Vec3> points() const {
        std::vector<Vec3> p;
        p.reserve(size());
        for (Eigen::Index i = 0; i < positions.size(); ++i)
            p.push_back(positions[i] * trap.axis);
        return p;
    }
};

struct ModeSet {
    Vec3 direction = Vec3::UnitZ();
    Eigen::VectorXd frequencies; ///< angular, ascending
    Eigen::MatrixXd vectors;     ///< column m is mode m, orthonormal
};

struct NormalModes {
    ModeSet axial;
    std::vector<ModeSet> radial; ///< empty when radial frequencies are not set
};

struct SolverOptions {
    int max_iterations = 200;
    double force_tolerance = 1e-13; ///< dimensionless
};

namespace impl {

// Trap potential in dimensionless form u(x) = sum_k a_k x^k.
struct Scaled {
    Eigen::VectorXd a;
    double L = 0.0;
    double omega0_sq = 0.0; ///< k q^2 / (m L^3)

    double u(double x) const {
        double r = 0.0;
        for (Eigen::Index k = a.size(); k-- > 0;)
            r = r * x + a[k];
        return r;
    }
    double du(double x) const {
        double r = 0.0;
        for (Eigen::Index k = a.size(); k-- > 1;)
            r = r * x + static_cast<double>(k) * a[k];
        return r;
    }
    double d2u(double x) const {
        double r = 0.0;
        for (Eigen::Index k = a.size(); k-- > 2;)
            r = r * x + static_cast<double>(k * (k - 1)) * a[k];
        return r;
    }
};

// Harmonic traps use ell. Polynomial traps use the harmonic scale of c_2 when
// it confines, otherwise the length at which the leading term balances the
// Coulomb energy.
inline Scaled scale(const TrapConfig& trap) {
    Scaled s;
    const double kq2 = constants::coulomb_constant_q2;
    if (trap.is_harmonic()) {
        s.L = length_scale(trap.mass, trap.omega_z);
        s.a = Eigen::VectorXd::Zero(3);
        s.a[2] = 0.5;
        s.omega0_sq = trap.omega_z * trap.omega_z;
        return s;
    }
    const std::vector<double> c = trap.coefficients();
    const std::size_t lead = c.size() - 1;
    if (c[2] > 0.0)
        s.L = length_scale(trap.mass, std::sqrt(2.0 * c[2] / trap.mass));
    else
        s.L = std::pow(kq2 / c[lead], 1.0 / static_cast<double>(lead + 1));
    s.a = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(c.size()));
    for (std::size_t k = 2; k < c.size(); ++k)
        s.a[static_cast<Eigen::Index>(k)] = c[k] * std::pow(s.L, static_cast<double>(k + 1)) / kq2;
    s.omega0_sq = kq2 / (trap.mass * s.L * s.L * s.L);
    return s;
}

inline double energy(const Scaled& s, const Eigen::VectorXd& x) {
    double e = 0.0;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        e += s.u(x[i]);
        for (Eigen::Index j = i + 1; j < x.size(); ++j)
            e += 1.0 / std::abs(x[j] - x[i]);
    }
    return e;
}

inline Eigen::VectorXd gradient(const Scaled& s, const Eigen::VectorXd& x) {
    Eigen::VectorXd g(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        g[i] = s.du(x[i]);
        for (Eigen::Index j = 0; j < x.size(); ++j) {
            if (j == i)
                continue;
            const double r = x[i] - x[j];
            g[i] -= std::copysign(1.0 / (r * r), r);
        }
    }
    return g;
}

// Coulomb curvature matrix C: C_ii = sum_j 1/|r_ij|^3, C_ij = -1/|r_ij|^3.
inline Eigen::MatrixXd coulomb_curvature(const Eigen::VectorXd& x) {
    const Eigen::Index n = x.size();
    Eigen::MatrixXd c = Eigen::MatrixXd::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) {
            if (j == i)
                continue;
            const double r = std::abs(x[i] - x[j]);
            const double v = 1.0 / (r * r * r);
            c(i, j) = -v;
            c(i, i) += v;
        }
    return c;
}

inline Eigen::MatrixXd hessian(const Scaled& s, const Eigen::VectorXd& x) {
    Eigen::MatrixXd h = 2.0 * coulomb_curvature(x);
    for (Eigen::Index i = 0; i < x.size(); ++i)
        h(i, i) += s.d2u(x[i]);
    return h;
}

// Global minimum of u from the real roots of u'.
inline double potential_minimum(const Scaled& s) {
    const Eigen::Index deg = s.a.size() - 2; // degree of u'
    std::vector<double> candidates;
    if (deg == 1) {
        candidates.push_back(0.0);
    } else {
        // Companion matrix of u'(x) / (leading coefficient).
        Eigen::MatrixXd comp = Eigen::MatrixXd::Zero(deg, deg);
        const double lead = static_cast<double>(deg + 1) * s.a[deg + 1];
        for (Eigen::Index k = 0; k < deg; ++k)
            comp(0, k) = -static_cast<double>(deg - k) * s.a[deg - k] / lead;
        for (Eigen::Index k = 1; k < deg; ++k)
            comp(k, k - 1) = 1.0;
        const Eigen::VectorXcd roots = Eigen::EigenSolver<Eigen::MatrixXd>(comp).eigenvalues();
        for (const auto& r : roots) {
            if (std::abs(r.imag()) > 1e-6 * (1.0 + std::abs(r.real())))
                continue;
            double x = r.real();
            for (int it = 0; it < 20; ++it) {
                const double h = s.d2u(x);
                if (h == 0.0)
                    break;
                x -= s.du(x) / h;
            }
            candidates.push_back(x);
        }
        if (candidates.empty())
            candidates.push_back(0.0);
    }
    return *std::min_element(candidates.begin(), candidates.end(),
                             [&](double p, double q) { return s.u(p) < s.u(q); });
}

} // namespace impl

/// Axial equilibrium of n_ions in the trap by damped Newton iteration.
///
/// Throws ConvergenceError when the force residual does not reach the
/// tolerance within the iteration budget.
inline CrystalGeometry equilibrium_positions(const TrapConfig& trap, std::size_t n_ions,
                                             const SolverOptions& opt = {}) {
    trap.validate();
    detail::require(n_ions >= 1 && n_ions <= max_ions, "n_ions must be in [1, 32]");
    const impl::Scaled s = impl::scale(trap);
    const auto n = static_cast<Eigen::Index>(n_ions);

    const double centre = impl::potential_minimum(s);
    const double curv = s.d2u(centre);
    const double width = curv > 0.0 ? std::cbrt(1.0 / curv) : 1.0;
    Eigen::VectorXd x(n);
    const double half = 0.7 * std::pow(static_cast<double>(n), 0.56) * width;
    for (Eigen::Index i = 0; i < n; ++i)
        x[i] = n == 1 ? centre : centre - half + 2.0 * half * static_cast<double>(i) / (n - 1);

    Eigen::VectorXd g = impl::gradient(s, x);
    double e = impl::energy(s, x);
    int it = 0;
    for (; it < opt.max_iterations && g.cwiseAbs().maxCoeff() > opt.force_tolerance; ++it) {
        // Newton step on the Hessian with its spectrum made positive, so the
        // direction is always downhill.
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(impl::hessian(s, x));
        const Eigen::VectorXd& lam = es.eigenvalues();
        const double floor = 1e-10 * std::max(1.0, lam.cwiseAbs().maxCoeff());
        const Eigen::VectorXd inv = lam.cwiseAbs().cwiseMax(floor).cwiseInverse();
        const Eigen::VectorXd p = -es.eigenvectors() * inv.asDiagonal()
                                  * (es.eigenvectors().transpose() * g);

        // Keep ions ordered: no gap may shrink by more than half in one step.
        double alpha = 1.0;
        for (Eigen::Index i = 0; i + 1 < n; ++i) {
            const double gap = x[i + 1] - x[i], dgap = p[i + 1] - p[i];
            if (dgap < 0.0)
                alpha = std::min(alpha, 0.5 * gap / -dgap);
        }
        const double slope = g.dot(p);
        const double gnorm = g.cwiseAbs().maxCoeff();
        bool accepted = false;
        for (; alpha > 1e-14; alpha *= 0.5) {
            const Eigen::VectorXd xn = x + alpha * p;
            const double en = impl::energy(s, xn);
            const Eigen::VectorXd gn = impl::gradient(s, xn);
            // Near the minimum energy differences drown in rounding; fall back
            // to requiring a smaller force.
            if (en <= e + 1e-4 * alpha * slope || gn.cwiseAbs().maxCoeff() < 0.5 * gnorm) {
                x = xn;
                e = en;
                g = gn;
                accepted = true;
                break;
            }
        }
        if (!accepted)
            break;
    }
    const double residual = g.cwiseAbs().maxCoeff();
    if (!(residual <= opt.force_tolerance) && !(residual <= 1e-10))
        throw ConvergenceError("crystal equilibrium did not converge", residual);

    CrystalGeometry geom;
    geom.positions = x * s.L;
    geom.length_scale = s.L;
    geom.trap = trap;
    geom.residual = residual;
    return geom;
}

/// Net axial force on each ion in units of k q^2 / L^2.
inline Eigen::VectorXd force_residuals(const CrystalGeometry& geom) {
    const impl::Scaled s = impl::scale(geom.trap);
    return -impl::gradient(s, geom.positions / s.L);
}

/// Total potential energy in units of k q^2 / L.
inline double potential_energy(const TrapConfig& trap, const Eigen::VectorXd& positions) {
    trap.validate();
    const impl::Scaled s = impl::scale(trap);
    return impl::energy(s, positions / s.L);
}

/// Axial Hessian at the equilibrium, dimensionless.
inline Eigen::MatrixXd axial_hessian(const CrystalGeometry& geom) {
    const impl::Scaled s = impl::scale(geom.trap);
    return impl::hessian(s, geom.positions / s.L);
}

/// Axial and radial normal modes of the crystal.
///
/// The radial confinement is taken uniform along the axis. Throws
/// InstabilityError when any mode has omega^2 <= 0.
inline NormalModes normal_modes(const CrystalGeometry& geom) {
    geom.trap.validate();
    detail::require(geom.size() >= 1, "empty crystal");
    const impl::Scaled s = impl::scale(geom.trap);
    const Eigen::VectorXd x = geom.positions / s.L;

    auto diagonalize = [](const Eigen::MatrixXd& k, double unit, const Vec3& dir,
                          const char* what) {
        const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(k);
        if (es.info() != Eigen::Success)
            throw NumericalError(std::string(what) + " eigensolver failed");
        ModeSet m;
        m.direction = dir;
        if (es.eigenvalues().minCoeff() <= 0.0)
            throw InstabilityError(std::string(what) + " Hessian is not positive definite");
        m.frequencies = (unit * es.eigenvalues()).cwiseSqrt();
        m.vectors = es.eigenvectors();
        return m;
    };

    NormalModes modes;
    modes.axial = diagonalize(impl::hessian(s, x), s.omega0_sq, geom.trap.axis, "axial");

    const Eigen::MatrixXd c = impl::coulomb_curvature(x);
    const auto n = x.size();
    const double wr[2] = {geom.trap.omega_r1, geom.trap.omega_r2};
    const Vec3 dirs[2] = {geom.trap.radial_dir1, geom.trap.radial_dir2};
    for (int r = 0; r < 2; ++r) {
        if (wr[r] <= 0.0)
            continue;
        const double ratio = wr[r] * wr[r] / s.omega0_sq;
        const Eigen::MatrixXd k = ratio * Eigen::MatrixXd::Identity(n, n) - c;
        modes.radial.push_back(diagonalize(k, s.omega0_sq, dirs[r], "radial"));
    }
    return modes;
}

/// Polynomial axial potential that holds n_ions at the given equal spacing.
///
/// Even coefficients c_2 .. c_deg are fitted by least squares to the force
/// balance at the target positions, raising the degree until the round trip
/// through equilibrium_positions reproduces the targets within 0.1 % of the
/// spacing. Throws DesignFailure when no degree up to basis_degree does.
inline TrapConfig design_equidistant_potential(std::size_t n_ions, double spacing, double mass,
                                               int basis_degree = 8) {
    detail::require(n_ions >= 2 && n_ions <= max_ions, "n_ions must be in [2, 32]");
    detail::require(spacing > 0.0 && std::isfinite(spacing), "spacing must be positive");
    detail::require(mass > 0.0 && std::isfinite(mass), "mass must be positive");
    detail::require(basis_degree >= 4 && basis_degree % 2 == 0,
                    "basis_degree must be even and >= 4");

    // Targets in units of the spacing, centred on zero.
    const auto n = static_cast<Eigen::Index>(n_ions);
    Eigen::VectorXd t(n);
    for (Eigen::Index i = 0; i < n; ++i)
        t[i] = static_cast<double>(i) - 0.5 * static_cast<double>(n - 1);
    impl::Scaled coulomb_only;
    coulomb_only.a = Eigen::VectorXd::Zero(2);
    const Eigen::VectorXd force = -impl::gradient(coulomb_only, t); // Coulomb push on each ion

    double best = std::numeric_limits<double>::infinity();
    for (int deg = 2; deg <= basis_degree; deg += 2) {
        // u'(t_i) = sum_k k a_k t_i^(k-1) must equal the Coulomb push.
        const int terms = deg / 2;
        Eigen::MatrixXd a(n, terms);
        for (Eigen::Index i = 0; i < n; ++i)
            for (int j = 0; j < terms; ++j) {
                const int k = 2 * (j + 1);
                a(i, j) = k * std::pow(t[i], k - 1);
            }
        const Eigen::VectorXd coef = a.completeOrthogonalDecomposition().solve(force);
        if (!(coef[terms - 1] > 0.0))
            continue;

        const double kq2 = constants::coulomb_constant_q2;
        std::vector<double> c(static_cast<std::size_t>(deg) + 1, 0.0);
        for (int j = 0; j < terms; ++j) {
            const int k = 2 * (j + 1);
            c[static_cast<std::size_t>(k)] = coef[j] * kq2 / std::pow(spacing, k + 1);
        }
        TrapConfig trap = TrapConfig::polynomial(mass, c);
        try {
            const CrystalGeometry g = equilibrium_positions(trap, n_ions);
            const double dev = ((g.positions / spacing) - t).cwiseAbs().maxCoeff();
            best = std::min(best, dev);
            if (dev < 1e-3)
                return trap;
        } catch (const NumericalError&) {
        }
    }
    throw DesignFailure("no even polynomial up to degree " + std::to_string(basis_degree)
                        + " holds the ions equidistant (best deviation "
                        + std::to_string(best) + " of the spacing)");
}

} // namespace ionfringe::crystal

#endif
