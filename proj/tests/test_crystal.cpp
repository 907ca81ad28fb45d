#include <ionfringe/crystal.hpp>

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

using namespace ionfringe;
using namespace ionfringe::crystal;

namespace {

const double mca = constants::mass_ca40_ion;
const double w0977 = two_pi * 0.977e6;
const double w0429 = two_pi * 0.429e6;

// Brute-force oracle: multi-start gradient descent on the total energy with
// lengths in micrometres and energies in k q^2 / (1 um).
std::vector<double> oracle_positions(const std::vector<double>& c_si, std::size_t n,
                                     std::uint64_t seed = 7) {
    const double um = 1e-6;
    std::vector<double> a(c_si.size());
    for (std::size_t k = 0; k < c_si.size(); ++k)
        a[k] = c_si[k] * std::pow(um, static_cast<double>(k) + 1.0) / constants::coulomb_constant_q2;
    auto energy = [&](const std::vector<double>& x) {
        double e = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 0; k < a.size(); ++k)
                e += a[k] * std::pow(x[i], static_cast<double>(k));
            for (std::size_t j = i + 1; j < n; ++j)
                e += 1.0 / std::abs(x[i] - x[j]);
        }
        return e;
    };
    auto grad = [&](const std::vector<double>& x) {
        std::vector<double> g(n, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t k = 1; k < a.size(); ++k)
                g[i] += static_cast<double>(k) * a[k] * std::pow(x[i], static_cast<double>(k) - 1.0);
            for (std::size_t j = 0; j < n; ++j)
                if (j != i) {
                    const double r = x[i] - x[j];
                    g[i] -= (r > 0 ? 1.0 : -1.0) / (r * r);
                }
        }
        return g;
    };
    auto sq = [](const std::vector<double>& g) {
        double s = 0.0;
        for (double gi : g)
            s += gi * gi;
        return s;
    };
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-30.0, 30.0);
    std::vector<double> best;
    double best_e = 1e300;
    for (int start = 0; start < 8; ++start) {
        std::vector<double> x(n);
        for (auto& xi : x)
            xi = u(rng);
        double step = 1.0;
        std::vector<double> g = grad(x);
        for (int it = 0; it < 100000 && sq(g) > 1e-28; ++it) {
            const double e = energy(x), gg = sq(g);
            std::vector<double> xn(n), gn;
            for (;;) {
                for (std::size_t i = 0; i < n; ++i)
                    xn[i] = x[i] - step * g[i];
                gn = grad(xn);
                // Energy decrease drives the search; once it is lost in
                // rounding, a shrinking gradient still makes progress.
                if (energy(xn) <= e - 0.25 * step * gg || sq(gn) < gg || step < 1e-20)
                    break;
                step *= 0.5;
            }
            x = xn;
            g = gn;
            step *= 1.5;
        }
        const double e = energy(x);
        if (e < best_e) {
            best_e = e;
            best = x;
        }
    }
    std::sort(best.begin(), best.end());
    for (auto& b : best)
        b *= um;
    return best;
}

double max_orthonormality_error(const Eigen::MatrixXd& v) {
    return (v.transpose() * v - Eigen::MatrixXd::Identity(v.cols(), v.cols()))
        .cwiseAbs()
        .maxCoeff();
}

} // namespace

TEST(LengthScale, CubeRootScaling) {
    EXPECT_NEAR(length_scale(8.0 * mca, w0977) / length_scale(mca, w0977), 0.5, 1e-15);
    EXPECT_NEAR(length_scale(mca, w0977), 4.52e-6, 0.01e-6);
    EXPECT_NEAR(length_scale(mca, w0429), 7.8e-6, 0.05e-6);
    EXPECT_THROW(length_scale(0.0, w0977), InvalidArgument);
    EXPECT_THROW(length_scale(mca, -1.0), InvalidArgument);
}

TEST(TrapConfig, RejectsNonConfiningPotentials) {
    EXPECT_THROW(TrapConfig::harmonic(mca, 0.0).validate(), InvalidArgument);
    EXPECT_THROW(TrapConfig::polynomial(mca, {0, 0, 1e-12, 1e-7}).validate(), InvalidArgument);
    EXPECT_THROW(TrapConfig::polynomial(mca, {0, 0, 1e-12, 0, -1e-3}).validate(), InvalidArgument);
    EXPECT_THROW(TrapConfig::polynomial(mca, {0, 1e-20, 1e-12}).validate(), InvalidArgument);
    EXPECT_NO_THROW(TrapConfig::polynomial(mca, {0, 0, -1e-12, 0, 1e-2}).validate());
    TrapConfig both = TrapConfig::harmonic(mca, w0977);
    both.axial_poly = {0, 0, 1e-12};
    EXPECT_THROW(both.validate(), InvalidArgument);
}

TEST(Equilibrium, TwoAndThreeIonClosedForms) {
    const TrapConfig trap = TrapConfig::harmonic(mca, w0977);
    const double l = length_scale(mca, w0977);
    const CrystalGeometry g2 = equilibrium_positions(trap, 2);
    EXPECT_NEAR(g2.positions[0] / l, -std::pow(0.5, 2.0 / 3.0), 1e-12);
    EXPECT_NEAR(g2.positions[1] / l, std::pow(0.5, 2.0 / 3.0), 1e-12);
    EXPECT_NEAR(g2.spacings()[0] / l, std::cbrt(2.0), 1e-12);

    const CrystalGeometry g3 = equilibrium_positions(trap, 3);
    EXPECT_NEAR(g3.positions[0] / l, -std::cbrt(1.25), 1e-12);
    EXPECT_NEAR(g3.positions[1] / l, 0.0, 1e-12);
    EXPECT_NEAR(g3.positions[2] / l, std::cbrt(1.25), 1e-12);
}

TEST(Equilibrium, CalciumSpacingsMatchObservedCrystals) {
    const CrystalGeometry g2 = equilibrium_positions(TrapConfig::harmonic(mca, w0977), 2);
    EXPECT_NEAR(g2.spacings()[0] / 5.8e-6, 1.0, 0.03);

    const CrystalGeometry g4 = equilibrium_positions(TrapConfig::harmonic(mca, w0429), 4);
    const Eigen::VectorXd d = g4.spacings();
    EXPECT_NEAR(d[1] / 7.2e-6, 1.0, 0.03);
    EXPECT_NEAR(d[0] / 7.6e-6, 1.0, 0.03);
    EXPECT_NEAR(d[2] / 7.6e-6, 1.0, 0.03);
}

TEST(Equilibrium, InvariantsUpToThirtyTwoIons) {
    const TrapConfig trap = TrapConfig::harmonic(mca, w0977);
    for (std::size_t n = 1; n <= max_ions; ++n) {
        const CrystalGeometry g = equilibrium_positions(trap, n);
        const double l = g.length_scale;
        ASSERT_EQ(g.size(), n);
        EXPECT_LT(force_residuals(g).cwiseAbs().maxCoeff(), 1e-9) << n;
        for (std::size_t i = 0; i + 1 < n; ++i)
            EXPECT_GT(g.positions[i + 1], g.positions[i]);
        for (std::size_t i = 0; i < n; ++i)
            EXPECT_NEAR(g.positions[i] / l, -g.positions[n - 1 - i] / l, 1e-12) << n;
        EXPECT_GT(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(axial_hessian(g))
                      .eigenvalues()
                      .minCoeff(),
                  0.0);
    }
}

TEST(Equilibrium, DimensionlessPositionsIndependentOfTrapFrequency) {
    const CrystalGeometry ref = equilibrium_positions(TrapConfig::harmonic(mca, two_pi * 1e6), 6);
    for (double f : {1e4, 1e5, 1e7}) {
        const CrystalGeometry g = equilibrium_positions(TrapConfig::harmonic(mca, two_pi * f), 6);
        EXPECT_LT((g.positions / g.length_scale - ref.positions / ref.length_scale)
                      .cwiseAbs()
                      .maxCoeff(),
                  1e-9);
    }
}

TEST(Equilibrium, MatchesBruteForceMinimisation) {
    const double l = length_scale(mca, w0977);
    const TrapConfig harmonic = TrapConfig::harmonic(mca, w0977);
    const std::vector<double> c_h = harmonic.coefficients();
    // A quartic trap with a weak quadratic part and a cubic tilt.
    const double c2 = 0.1 * c_h[2];
    const std::vector<double> c_q = {0, 0, c2, 2.0 * c2 / l, 4.0 * c2 / (l * l)};
    const TrapConfig quartic = TrapConfig::polynomial(mca, c_q);
    for (std::size_t n = 1; n <= 4; ++n) {
        for (const TrapConfig* t : {&harmonic, &quartic}) {
            const CrystalGeometry g = equilibrium_positions(*t, n);
            const std::vector<double> o = oracle_positions(t->coefficients(), n);
            for (std::size_t i = 0; i < n; ++i)
                EXPECT_NEAR(g.positions[i] / l, o[i] / l, 1e-9) << n << " " << i;
        }
    }
}

TEST(Equilibrium, SingleIonSitsAtPotentialMinimum) {
    const double l = length_scale(mca, w0977);
    EXPECT_EQ(equilibrium_positions(TrapConfig::harmonic(mca, w0977), 1).positions[0], 0.0);
    // Double well u = -x^2 + x^4 / 2 plus a tilt selecting the left well.
    const double e = constants::coulomb_constant_q2 / l;
    const TrapConfig t =
        TrapConfig::polynomial(mca, {0, 0, -e / (l * l), 0.05 * e / (l * l * l), 0.5 * e / std::pow(l, 4)});
    const CrystalGeometry g = equilibrium_positions(t, 1);
    // u'(x) = -2x + 0.15 x^2 + 2x^3 = 0, the left root.
    const double x = g.positions[0] / l;
    EXPECT_NEAR(-2.0 * x + 0.15 * x * x + 2.0 * x * x * x, 0.0, 1e-12);
    EXPECT_LT(x, -0.9);
}

TEST(Equilibrium, ErrorsAreReported) {
    const TrapConfig trap = TrapConfig::harmonic(mca, w0977);
    EXPECT_THROW(equilibrium_positions(trap, 0), InvalidArgument);
    EXPECT_THROW(equilibrium_positions(trap, max_ions + 1), InvalidArgument);
    SolverOptions opt;
    opt.max_iterations = 0;
    try {
        equilibrium_positions(trap, 5, opt);
        FAIL() << "expected ConvergenceError";
    } catch (const ConvergenceError& e) {
        EXPECT_GT(e.residual(), 0.0);
    }
}

TEST(NormalModes, TwoIonAxialAndRocking) {
    const double wr1 = two_pi * 1.853e6, wr2 = two_pi * 2.620e6;
    const CrystalGeometry g = equilibrium_positions(TrapConfig::harmonic(mca, w0977, wr1, wr2), 2);
    const NormalModes m = normal_modes(g);
    EXPECT_NEAR(m.axial.frequencies[0] / w0977, 1.0, 1e-10);
    EXPECT_NEAR(m.axial.frequencies[1] / (std::sqrt(3.0) * w0977), 1.0, 1e-9);
    // Breathing mode moves the ions in antiphase.
    EXPECT_NEAR(std::abs(m.axial.vectors(0, 1)), 1.0 / std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(m.axial.vectors(0, 1), -m.axial.vectors(1, 1), 1e-12);

    ASSERT_EQ(m.radial.size(), 2u);
    EXPECT_NEAR(m.radial[0].frequencies[0] / std::sqrt(wr1 * wr1 - w0977 * w0977), 1.0, 1e-10);
    EXPECT_NEAR(m.radial[0].frequencies[1] / wr1, 1.0, 1e-10);
    EXPECT_NEAR(m.radial[1].frequencies[0] / std::sqrt(wr2 * wr2 - w0977 * w0977), 1.0, 1e-10);
    EXPECT_TRUE(m.radial[0].direction.isApprox(Vec3(1, 1, 0).normalized()));
}

TEST(NormalModes, ThreeIonAxialFrequencies) {
    const CrystalGeometry g = equilibrium_positions(TrapConfig::harmonic(mca, w0977), 3);
    const NormalModes m = normal_modes(g);
    EXPECT_NEAR(m.axial.frequencies[0] / w0977, 1.0, 1e-10);
    EXPECT_NEAR(m.axial.frequencies[1] / w0977, std::sqrt(3.0), 1e-9);
    EXPECT_NEAR(m.axial.frequencies[2] / w0977, std::sqrt(29.0 / 5.0), 1e-9);
    EXPECT_TRUE(m.radial.empty());
}

TEST(NormalModes, SingleIonIsTrapFrequency) {
    const NormalModes m = normal_modes(equilibrium_positions(TrapConfig::harmonic(mca, w0977), 1));
    ASSERT_EQ(m.axial.frequencies.size(), 1);
    EXPECT_EQ(m.axial.frequencies[0], w0977);
}

TEST(NormalModes, ComModeAndOrthonormality) {
    const TrapConfig trap = TrapConfig::harmonic(mca, w0977, 20.0 * w0977, 25.0 * w0977);
    for (std::size_t n = 1; n <= 12; ++n) {
        const NormalModes m = normal_modes(equilibrium_positions(trap, n));
        EXPECT_NEAR(m.axial.frequencies[0] / w0977, 1.0, 1e-10) << n;
        EXPECT_LT(max_orthonormality_error(m.axial.vectors), 1e-10);
        for (const ModeSet& r : m.radial) {
            EXPECT_LT(max_orthonormality_error(r.vectors), 1e-10);
            // Radial COM sits at the bare radial frequency and is the highest.
            EXPECT_NEAR(r.frequencies[static_cast<Eigen::Index>(n) - 1],
                        r.direction.isApprox(trap.radial_dir1) ? trap.omega_r1 : trap.omega_r2,
                        1e-6 * trap.omega_r1);
        }
        for (Eigen::Index k = 1; k < m.axial.frequencies.size(); ++k)
            EXPECT_GE(m.axial.frequencies[k], m.axial.frequencies[k - 1]);
    }
}

TEST(NormalModes, WeakRadialConfinementIsUnstable) {
    const TrapConfig trap = TrapConfig::harmonic(mca, w0977, 1.2 * w0977, 3.0 * w0977);
    EXPECT_THROW(normal_modes(equilibrium_positions(trap, 4)), InstabilityError);
}

TEST(Design, TwoAndThreeIonsNeedOnlyHarmonicTerm) {
    for (std::size_t n : {2u, 3u}) {
        const TrapConfig t = design_equidistant_potential(n, 6e-6, mca, 4);
        const std::vector<double> c = t.coefficients();
        ASSERT_GE(c.size(), 3u);
        EXPECT_GT(c[2], 0.0);
        const double c4 = c.size() > 4 ? c[4] : 0.0;
        EXPECT_NEAR(c4 * std::pow(6e-6, 2) / c[2], 0.0, 1e-9);
        const CrystalGeometry g = equilibrium_positions(t, n);
        for (Eigen::Index i = 0; i < g.spacings().size(); ++i)
            EXPECT_NEAR(g.spacings()[i] / 6e-6, 1.0, 1e-9);
    }
}

TEST(Design, FourIonsAtNinePointOneMicrons) {
    const TrapConfig t = design_equidistant_potential(4, 9.1e-6, mca, 8);
    const CrystalGeometry g = equilibrium_positions(t, 4);
    const Eigen::VectorXd d = g.spacings();
    EXPECT_LT((d / 9.1e-6 - Eigen::VectorXd::Ones(3)).cwiseAbs().maxCoeff(), 1e-3);
    EXPECT_LT(force_residuals(g).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_NO_THROW(normal_modes(g));
}

TEST(Design, LargerCrystalsRaiseTheDegree) {
    const TrapConfig t = design_equidistant_potential(6, 5e-6, mca, 8);
    EXPECT_GE(t.coefficients().size(), 7u);
    const Eigen::VectorXd d = equilibrium_positions(t, 6).spacings();
    EXPECT_LT((d / 5e-6 - Eigen::VectorXd::Ones(5)).cwiseAbs().maxCoeff(), 1e-3);
}

TEST(Design, InfeasibleAndInvalidRequests) {
    EXPECT_THROW(design_equidistant_potential(12, 5e-6, mca, 4), DesignFailure);
    EXPECT_THROW(design_equidistant_potential(1, 5e-6, mca, 4), InvalidArgument);
    EXPECT_THROW(design_equidistant_potential(4, 5e-6, mca, 5), InvalidArgument);
    EXPECT_THROW(design_equidistant_potential(4, 5e-6, mca, 2), InvalidArgument);
    EXPECT_THROW(design_equidistant_potential(4, -1.0, mca, 4), InvalidArgument);
}
