#ifndef IONFRINGE_FIT_HPP
#define IONFRINGE_FIT_HPP

// Weighted least-squares fits of 1-D fringe patterns and visibility time
// series.
//
// Fringe model on the screen:
//   I(x) = B + A exp(-(x - x0)^2 / (2 w^2)) (1 + sum_k V_k cos(kappa_k x + phi_k)).
// The source model decides how kappa_k, phi_k and V_k derive from the fit
// parameters (free terms, integer-locked harmonics, or a symmetric ion chain).

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "core.hpp"
#include "optics.hpp"

namespace ionfringe::fit {

inline constexpr double max_visibility = 1.05;

struct FringeData1D {
    Eigen::VectorXd x;     ///< screen coordinate, m
    Eigen::VectorXd y;     ///< counts
    Eigen::VectorXd sigma; ///< standard errors, counts

    std::size_t size() const { return static_cast<std::size_t>(x.size()); }

    void validate() const {
        detail::require(x.size() == y.size() && y.size() == sigma.size(),
                        "fringe data columns differ in length");
        detail::require(x.size() >= 8, "fringe data needs at least 8 points");
        detail::require(x.allFinite() && y.allFinite() && sigma.allFinite(), "fringe data must be finite");
        detail::require((sigma.array() > 0.0).all(), "standard errors must be positive");
    }
};

/// Poisson standard errors sqrt(counts) with a floor of one count.
inline Eigen::VectorXd poisson_errors(const Eigen::VectorXd& counts) {
    return counts.cwiseMax(1.0).cwiseSqrt();
}

struct Region {
    std::size_t row_begin = 0, row_end = std::numeric_limits<std::size_t>::max();
    std::size_t col_begin = 0, col_end = std::numeric_limits<std::size_t>::max();
};

/// Sum of image columns over the region rows, with Poisson errors. Column
/// positions are centred on the image like ScreenAxis.
inline FringeData1D integrate_columns(const optics::CameraImage& img, const Region& region = {}) {
    const std::size_t r1 = std::min(region.row_end, img.rows), c1 = std::min(region.col_end, img.cols);
    detail::require(region.row_begin < r1 && region.col_begin < c1, "empty integration region");
    const double pitch = img.pixel_size > 0.0 ? img.pixel_size : 1.0;
    const auto n = static_cast<Eigen::Index>(c1 - region.col_begin);
    FringeData1D d;
    d.x.resize(n);
    d.y = Eigen::VectorXd::Zero(n);
    for (std::size_t c = region.col_begin; c < c1; ++c) {
        const auto i = static_cast<Eigen::Index>(c - region.col_begin);
        d.x[i] = (static_cast<double>(c) - 0.5 * static_cast<double>(img.cols - 1)) * pitch;
        for (std::size_t r = region.row_begin; r < r1; ++r)
            d.y[i] += img.at(r, c);
    }
    d.sigma = poisson_errors(d.y);
    return d;
}

struct SourceModel {
    enum class Kind { free, harmonic, array };
    Kind kind = Kind::free;
    /// free: number of independent terms; harmonic: number of harmonics;
    /// array: number of ions.
    int order = 1;

    static SourceModel free_terms(int k) { return {Kind::free, k}; }
    static SourceModel harmonics(int m) { return {Kind::harmonic, m}; }
    static SourceModel ion_array(int n) { return {Kind::array, n}; }

    void validate() const {
        if (kind == Kind::array)
            detail::require(order >= 2 && order <= 32, "ion_array needs 2..32 ions");
        else
            detail::require(order >= 1 && order <= 16, "model order must be in 1..16");
    }

    std::string name() const {
        switch (kind) {
        case Kind::free: return "free";
        case Kind::harmonic: return "harmonic";
        case Kind::array: return "array";
        }
        return "?";
    }
};

/// Screen-to-source conversion: d = lambda D kappa / (2 pi), w = lambda D / (2 pi w_env).
struct Imaging {
    double wavelength = 397e-9;
    double screen_scale = 1.0; ///< D, screen metres per radian

    static Imaging from(const optics::DetectionGeometry& det) {
        return {det.wavelength(), det.screen_scale()};
    }
    double spacing(double kappa) const { return wavelength * screen_scale * kappa / two_pi; }
    double psf_width(double w_env) const { return wavelength * screen_scale / (two_pi * w_env); }
};

struct FitOptions {
    Imaging imaging;
    std::optional<Eigen::VectorXd> init; ///< physical parameters in FitResult::names order
    int max_iterations = 500;
    int starts = 3;
};

struct FitTerm {
    double kappa = 0.0, kappa_err = 0.0;
    double phase = 0.0, phase_err = 0.0;
    double visibility = 0.0, visibility_err = 0.0;
};

struct FitResult {
    SourceModel model;
    std::vector<std::string> names;
    Eigen::VectorXd params;
    Eigen::VectorXd errors;            ///< residual-RMS scaled (primary)
    Eigen::VectorXd errors_asymptotic; ///< from (J^T W J)^-1 alone
    Eigen::MatrixXd covariance;        ///< residual-RMS scaled

    double background = 0.0, background_err = 0.0;
    double amplitude = 0.0, amplitude_err = 0.0;
    double centre = 0.0, centre_err = 0.0;
    double envelope_width = 0.0, envelope_width_err = 0.0; ///< screen, m
    std::vector<FitTerm> terms;

    /// Headline visibility: first term for free and harmonic models, the
    /// single-pair visibility for the array model.
    double visibility = 0.0, visibility_err = 0.0;
    std::vector<double> spacings, spacing_errors; ///< source plane, m
    double psf_width = 0.0, psf_width_err = 0.0;  ///< source plane, m

    double chi2 = 0.0, reduced_chi2 = 0.0;
    int dof = 0;
    int iterations = 0;
    double gradient_norm = 0.0; ///< max |cos| between residual and Jacobian columns
    bool converged = false;
    Eigen::VectorXd residuals; ///< (model - data) / sigma
};

class FitFailure : public NumericalError {
public:
    FitFailure(const std::string& what, FitResult best) : NumericalError(what), best_(std::move(best)) {}
    const FitResult& best() const noexcept { return best_; }

private:
    FitResult best_;
};

namespace impl {

// A term's frequency, phase and visibility as linear maps of the parameters.
struct Term {
    std::vector<std::pair<int, double>> kappa;
    std::vector<std::pair<int, double>> phase;
    int vis_param = -1;
    double vis_weight = 1.0;
};

struct Layout {
    SourceModel model;
    std::vector<std::string> names;
    std::vector<Term> terms;
    std::vector<int> vis_params;
    std::vector<int> kappa_params;
    int n = 0;
};

inline Layout make_layout(const SourceModel& m) {
    Layout L;
    L.model = m;
    L.names = {"background", "amplitude", "centre", "envelope_width"};
    auto add = [&](const std::string& s) {
        L.names.push_back(s);
        return static_cast<int>(L.names.size()) - 1;
    };
    switch (m.kind) {
    case SourceModel::Kind::free:
        for (int k = 0; k < m.order; ++k) {
            const std::string sfx = "_" + std::to_string(k + 1);
            Term t;
            const int ik = add("kappa" + sfx);
            t.kappa = {{ik, 1.0}};
            t.phase = {{add("phase" + sfx), 1.0}};
            t.vis_param = add("visibility" + sfx);
            L.kappa_params.push_back(ik);
            L.vis_params.push_back(t.vis_param);
            L.terms.push_back(t);
        }
        break;
    case SourceModel::Kind::harmonic: {
        const int ik = add("kappa");
        const int ip = add("phase");
        L.kappa_params.push_back(ik);
        for (int h = 1; h <= m.order; ++h) {
            Term t;
            t.kappa = {{ik, static_cast<double>(h)}};
            t.phase = {{ip, static_cast<double>(h)}};
            t.vis_param = add("visibility_" + std::to_string(h));
            L.vis_params.push_back(t.vis_param);
            L.terms.push_back(t);
        }
        break;
    }
    case SourceModel::Kind::array: {
        const int n_ions = m.order;
        const int unique = n_ions / 2; // spacings s_i = s_{N-i}
        // Each gap carries its own frequency and phase; a pair sums its gaps.
        std::vector<int> ik(static_cast<std::size_t>(unique)), ip(static_cast<std::size_t>(unique));
        for (int u = 0; u < unique; ++u) {
            ik[static_cast<std::size_t>(u)] = add("kappa_" + std::to_string(u + 1));
            L.kappa_params.push_back(ik[static_cast<std::size_t>(u)]);
        }
        for (int u = 0; u < unique; ++u)
            ip[static_cast<std::size_t>(u)] = add("phase_" + std::to_string(u + 1));
        const int iv = add("visibility");
        L.vis_params.push_back(iv);
        // Group ion pairs by which spacings they span.
        std::map<std::vector<int>, int> groups;
        for (int i = 0; i < n_ions; ++i)
            for (int j = i + 1; j < n_ions; ++j) {
                std::vector<int> count(static_cast<std::size_t>(unique), 0);
                for (int s = i + 1; s <= j; ++s)
                    ++count[static_cast<std::size_t>(std::min(s, n_ions - s) - 1)];
                ++groups[count];
            }
        for (const auto& [count, mult] : groups) {
            Term t;
            for (int u = 0; u < unique; ++u)
                if (count[static_cast<std::size_t>(u)] > 0) {
                    t.kappa.push_back({ik[static_cast<std::size_t>(u)], count[static_cast<std::size_t>(u)]});
                    t.phase.push_back({ip[static_cast<std::size_t>(u)], count[static_cast<std::size_t>(u)]});
                }
            t.vis_param = iv;
            t.vis_weight = 2.0 * mult / n_ions;
            L.terms.push_back(t);
        }
        // Lowest frequency first.
        std::sort(L.terms.begin(), L.terms.end(), [](const Term& a, const Term& b) {
            double sa = 0.0, sb = 0.0;
            for (auto& [i, c] : a.kappa)
                sa += c;
            for (auto& [i, c] : b.kappa)
                sb += c;
            return sa < sb;
        });
        break;
    }
    }
    L.n = static_cast<int>(L.names.size());
    return L;
}

inline double term_kappa(const Term& t, const Eigen::VectorXd& p) {
    double k = 0.0;
    for (auto& [i, c] : t.kappa)
        k += c * p[i];
    return k;
}

inline double term_phase(const Term& t, const Eigen::VectorXd& p) {
    double phi = 0.0;
    for (auto& [i, c] : t.phase)
        phi += c * p[i];
    return phi;
}

inline double term_vis(const Term& t, const Eigen::VectorXd& p) { return t.vis_weight * p[t.vis_param]; }

// Model values and, optionally, the Jacobian in physical parameters.
inline Eigen::VectorXd evaluate(const Layout& L, const Eigen::VectorXd& p, const Eigen::VectorXd& x,
                                Eigen::MatrixXd* jac) {
    const Eigen::Index n = x.size();
    Eigen::VectorXd out(n);
    if (jac)
        jac->setZero(n, L.n);
    const double B = p[0], A = p[1], x0 = p[2], w = p[3];
    for (Eigen::Index i = 0; i < n; ++i) {
        const double dx = x[i] - x0;
        const double e = std::exp(-0.5 * dx * dx / (w * w));
        double s = 1.0;
        for (const Term& t : L.terms) {
            const double psi = term_kappa(t, p) * x[i] + term_phase(t, p);
            s += term_vis(t, p) * std::cos(psi);
        }
        out[i] = B + A * e * s;
        if (!jac)
            continue;
        auto row = jac->row(i);
        row[0] = 1.0;
        row[1] = e * s;
        row[2] = A * e * s * dx / (w * w);
        row[3] = A * e * s * dx * dx / (w * w * w);
        for (const Term& t : L.terms) {
            const double kap = term_kappa(t, p);
            const double psi = kap * x[i] + term_phase(t, p);
            const double v = term_vis(t, p);
            const double ds = -A * e * v * std::sin(psi); // d I / d psi
            for (auto& [k, c] : t.kappa)
                row[k] += ds * c * x[i];
            for (auto& [k, c] : t.phase)
                row[k] += ds * c;
            row[t.vis_param] += A * e * std::cos(psi) * t.vis_weight;
        }
    }
    return out;
}

// Internal coordinates: visibilities through V = Vmax sin^2 q, width through log.
inline Eigen::VectorXd to_internal(const Layout& L, Eigen::VectorXd p) {
    p[3] = std::log(p[3]);
    for (int i : L.vis_params)
        p[i] = std::asin(std::sqrt(std::clamp(p[i] / max_visibility, 0.0, 1.0)));
    return p;
}

inline Eigen::VectorXd to_physical(const Layout& L, Eigen::VectorXd q) {
    q[3] = std::exp(q[3]);
    for (int i : L.vis_params) {
        const double s = std::sin(q[i]);
        q[i] = max_visibility * s * s;
    }
    return q;
}

inline Eigen::VectorXd chain_factor(const Layout& L, const Eigen::VectorXd& q) {
    Eigen::VectorXd f = Eigen::VectorXd::Ones(q.size());
    f[3] = std::exp(q[3]);
    for (int i : L.vis_params)
        f[i] = max_visibility * std::sin(2.0 * q[i]);
    return f;
}

struct LmOutcome {
    Eigen::VectorXd params; // physical
    double chi2 = 0.0;
    double gradient = 0.0;
    int iterations = 0;
    bool converged = false;
};

inline double max_cosine(const Eigen::MatrixXd& jw, const Eigen::VectorXd& r) {
    const double rn = r.norm();
    if (rn == 0.0)
        return 0.0;
    double g = 0.0;
    for (Eigen::Index c = 0; c < jw.cols(); ++c) {
        const double cn = jw.col(c).norm();
        if (cn > 0.0)
            g = std::max(g, std::abs(jw.col(c).dot(r)) / (cn * rn));
    }
    return g;
}

// Levenberg-Marquardt with Marquardt diagonal scaling on weighted residuals.
template <class Model>
LmOutcome levenberg_marquardt(const Model& model, Eigen::VectorXd q, const Eigen::VectorXd& y,
                              const Eigen::VectorXd& sigma, int max_iterations) {
    const Eigen::VectorXd inv_s = sigma.cwiseInverse();
    auto weighted = [&](const Eigen::VectorXd& qq, Eigen::MatrixXd* jw) {
        Eigen::VectorXd r = (model(qq, jw) - y).cwiseProduct(inv_s);
        if (jw)
            *jw = inv_s.asDiagonal() * *jw;
        return r;
    };
    const double data_scale = y.cwiseProduct(inv_s).squaredNorm() + 1.0;

    Eigen::MatrixXd jw;
    Eigen::VectorXd r = weighted(q, &jw);
    double chi2 = r.squaredNorm();
    double lambda = 1e-3;
    LmOutcome out;
    for (int it = 0; it < max_iterations; ++it) {
        out.iterations = it + 1;
        const double cosine = max_cosine(jw, r);
        if (!std::isfinite(chi2))
            break;
        if (cosine < 1e-10 || chi2 < 1e-28 * data_scale) {
            out.converged = true;
            break;
        }
        // Marquardt scaling done by equilibrating the Jacobian columns.
        Eigen::VectorXd scale(jw.cols());
        for (Eigen::Index c = 0; c < jw.cols(); ++c) {
            const double nrm = jw.col(c).norm();
            scale[c] = nrm > 0.0 ? 1.0 / nrm : 1.0;
        }
        const Eigen::MatrixXd js = jw * scale.asDiagonal();
        const Eigen::Index rows = js.rows(), np = js.cols();
        // Damped step as the least-squares solution of [J; sqrt(lambda) I] s = [-r; 0],
        // which avoids squaring the condition number of J.
        Eigen::MatrixXd aug(rows + np, np);
        Eigen::VectorXd rhs = Eigen::VectorXd::Zero(rows + np);
        aug.topRows(rows) = js;
        rhs.head(rows) = -r;
        bool improved = false;
        while (lambda < 1e20) {
            aug.bottomRows(np) = std::sqrt(lambda) * Eigen::MatrixXd::Identity(np, np);
            const Eigen::VectorXd step = scale.cwiseProduct(aug.householderQr().solve(rhs));
            const Eigen::VectorXd qn = q + step;
            Eigen::MatrixXd jn;
            const Eigen::VectorXd rn = weighted(qn, &jn);
            const double cn = rn.squaredNorm();
            // Near the minimum chi-square changes at rounding level; then a
            // step counts as progress when it lowers the gradient instead.
            const bool flat = std::isfinite(cn) && cn <= chi2 * (1.0 + 1e-12) && max_cosine(jn, rn) < cosine;
            if ((std::isfinite(cn) && cn < chi2) || flat) {
                q = qn;
                r = rn;
                jw = jn;
                chi2 = cn;
                lambda = std::max(lambda / 3.0, 1e-12);
                improved = true;
                break;
            }
            lambda *= 4.0;
        }
        if (!improved) {
            // No downhill step left: the minimum is resolved to rounding.
            out.converged = max_cosine(jw, r) < 1e-5;
            break;
        }
    }
    out.params = q;
    out.chi2 = chi2;
    out.gradient = max_cosine(jw, r);
    return out;
}

// Wrap to (-pi, pi].
inline double wrap(double a) {
    a = std::remainder(a, two_pi);
    return a <= -pi ? a + two_pi : a;
}

struct Moments {
    double background, amplitude, centre, width;
};

inline Moments envelope_moments(const FringeData1D& d) {
    const double lo = d.y.minCoeff();
    const Eigen::VectorXd w = (d.y.array() - lo).matrix();
    const double sw = w.sum();
    Moments m;
    m.background = lo;
    if (!(sw > 0.0))
        throw InvalidArgument("fringe data has zero variance");
    m.centre = w.dot(d.x) / sw;
    m.width = std::sqrt(w.dot((d.x.array() - m.centre).square().matrix()) / sw);
    m.amplitude = d.y.maxCoeff() - lo;
    return m;
}

// Variable-projection scan: for fixed envelope and base frequency the model
// is linear in background, amplitude and the harmonic cos/sin amplitudes.
struct ScanPoint {
    double kappa;
    double chi2;
    Eigen::VectorXd coef; // background, amplitude, then (c_m, s_m) pairs
};

inline ScanPoint project(const FringeData1D& d, const Moments& m, double kappa,
                         const std::vector<double>& mults) {
    const Eigen::Index n = d.x.size();
    const Eigen::Index cols = 2 + 2 * static_cast<Eigen::Index>(mults.size());
    Eigen::MatrixXd a(n, cols);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double dx = d.x[i] - m.centre;
        const double e = std::exp(-0.5 * dx * dx / (m.width * m.width));
        a(i, 0) = 1.0;
        a(i, 1) = e;
        for (std::size_t h = 0; h < mults.size(); ++h) {
            const double psi = mults[h] * kappa * d.x[i];
            a(i, 2 + 2 * static_cast<Eigen::Index>(h)) = e * std::cos(psi);
            a(i, 3 + 2 * static_cast<Eigen::Index>(h)) = e * std::sin(psi);
        }
    }
    const Eigen::VectorXd inv = d.sigma.cwiseInverse();
    const Eigen::MatrixXd aw = inv.asDiagonal() * a;
    const Eigen::VectorXd yw = d.y.cwiseProduct(inv);
    ScanPoint s;
    s.kappa = kappa;
    s.coef = aw.colPivHouseholderQr().solve(yw);
    s.chi2 = (aw * s.coef - yw).squaredNorm();
    return s;
}

inline std::vector<ScanPoint> scan(const FringeData1D& d, const Moments& m, const std::vector<double>& mults,
                                   std::size_t keep, double exclude = -1.0) {
    const double span = d.x.maxCoeff() - d.x.minCoeff();
    Eigen::VectorXd xs = d.x;
    std::sort(xs.data(), xs.data() + xs.size());
    double pitch = span;
    for (Eigen::Index i = 1; i < xs.size(); ++i)
        if (xs[i] > xs[i - 1])
            pitch = std::min(pitch, xs[i] - xs[i - 1]);
    const double top = *std::max_element(mults.begin(), mults.end());
    const double k_lo = pi / span, k_hi = pi / (pitch * top);
    const double dk = pi / (8.0 * span);
    std::vector<ScanPoint> pts;
    for (double k = k_lo; k <= k_hi; k += dk)
        pts.push_back(project(d, m, k, mults));
    std::vector<ScanPoint> minima;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        const bool left = i == 0 || pts[i].chi2 <= pts[i - 1].chi2;
        const bool right = i + 1 == pts.size() || pts[i].chi2 <= pts[i + 1].chi2;
        if (left && right && !(exclude > 0.0 && std::abs(pts[i].kappa - exclude) < 4.0 * dk))
            minima.push_back(pts[i]);
    }
    std::sort(minima.begin(), minima.end(), [](const ScanPoint& a, const ScanPoint& b) { return a.chi2 < b.chi2; });
    if (minima.size() > keep)
        minima.resize(keep);
    return minima;
}

inline double clamp_vis(double v) { return std::clamp(v, 0.02, 1.0); }

inline std::vector<Eigen::VectorXd> initial_guesses(const Layout& L, const FringeData1D& d, int starts) {
    const Moments m = envelope_moments(d);
    std::vector<Eigen::VectorXd> out;
    auto base = [&](const ScanPoint& s) {
        Eigen::VectorXd p = Eigen::VectorXd::Zero(L.n);
        p[0] = s.coef[0];
        p[1] = s.coef[1] != 0.0 ? s.coef[1] : m.amplitude;
        p[2] = m.centre;
        p[3] = m.width;
        return p;
    };
    auto amp_phase = [](const ScanPoint& s, std::size_t h) {
        const double c = s.coef[2 + 2 * static_cast<Eigen::Index>(h)];
        const double sn = s.coef[3 + 2 * static_cast<Eigen::Index>(h)];
        return std::pair<double, double>{std::hypot(c, sn), std::atan2(-sn, c)};
    };
    const auto keep = static_cast<std::size_t>(std::max(1, starts));
    switch (L.model.kind) {
    case SourceModel::Kind::free: {
        for (const ScanPoint& s1 : scan(d, m, {1.0}, keep)) {
            Eigen::VectorXd p = base(s1);
            std::vector<double> found = {s1.kappa};
            for (int k = 0; k < L.model.order; ++k) {
                double kap = s1.kappa, amp = 0.0, ph = 0.0;
                if (k == 0) {
                    std::tie(amp, ph) = amp_phase(s1, 0);
                } else {
                    // Next term from the residual spectrum after the ones found.
                    Eigen::VectorXd model = Eigen::VectorXd::Zero(d.x.size());
                    Layout partial = make_layout(SourceModel::free_terms(k));
                    Eigen::VectorXd pp = p.head(partial.n);
                    model = evaluate(partial, pp, d.x, nullptr);
                    FringeData1D res = d;
                    res.y = d.y - model + Eigen::VectorXd::Constant(d.x.size(), pp[0]);
                    Moments mr = m;
                    const auto next = scan(res, mr, {1.0}, 8);
                    for (const ScanPoint& c : next) {
                        bool dup = false;
                        for (double f : found)
                            dup = dup || std::abs(c.kappa - f) < 0.05 * f;
                        if (!dup) {
                            kap = c.kappa;
                            std::tie(amp, ph) = amp_phase(c, 0);
                            break;
                        }
                    }
                    found.push_back(kap);
                }
                p[4 + 3 * k] = kap;
                p[5 + 3 * k] = ph;
                p[6 + 3 * k] = clamp_vis(amp / p[1]);
            }
            out.push_back(p);
        }
        break;
    }
    case SourceModel::Kind::harmonic: {
        std::vector<double> mults;
        for (int h = 1; h <= L.model.order; ++h)
            mults.push_back(h);
        for (const ScanPoint& s : scan(d, m, mults, keep)) {
            Eigen::VectorXd p = base(s);
            p[4] = s.kappa;
            p[5] = amp_phase(s, 0).second;
            for (int h = 0; h < L.model.order; ++h)
                p[6 + h] = clamp_vis(amp_phase(s, static_cast<std::size_t>(h)).first / p[1]);
            out.push_back(p);
        }
        break;
    }
    case SourceModel::Kind::array: {
        // Start from an equidistant chain: separations are multiples of kappa.
        const int n_ions = L.model.order, unique = n_ions / 2;
        std::vector<double> mults;
        for (int h = 1; h < n_ions; ++h)
            mults.push_back(h);
        for (const ScanPoint& s : scan(d, m, mults, keep)) {
            Eigen::VectorXd p = base(s);
            const auto [amp, ph] = amp_phase(s, 0);
            for (int u = 0; u < unique; ++u) {
                p[4 + u] = s.kappa;
                p[4 + unique + u] = ph;
            }
            p[4 + 2 * unique] = clamp_vis(amp / p[1] / (2.0 * (n_ions - 1) / n_ions));
            out.push_back(p);
        }
        break;
    }
    }
    return out;
}

// Canonical signs: positive frequencies, wrapped phases.
inline void canonicalise(const Layout& L, Eigen::VectorXd& p) {
    p[3] = std::abs(p[3]);
    switch (L.model.kind) {
    case SourceModel::Kind::free:
        for (int k = 0; k < L.model.order; ++k) {
            if (p[4 + 3 * k] < 0.0) {
                p[4 + 3 * k] = -p[4 + 3 * k];
                p[5 + 3 * k] = -p[5 + 3 * k];
            }
            p[5 + 3 * k] = wrap(p[5 + 3 * k]);
        }
        break;
    case SourceModel::Kind::harmonic:
        if (p[4] < 0.0) {
            p[4] = -p[4];
            p[5] = -p[5];
        }
        p[5] = wrap(p[5]);
        break;
    case SourceModel::Kind::array: {
        const int unique = L.model.order / 2;
        double sum = 0.0;
        for (int u = 0; u < unique; ++u)
            sum += p[4 + u];
        for (int u = 0; u < unique; ++u) {
            if (sum < 0.0) {
                p[4 + u] = -p[4 + u];
                p[4 + unique + u] = -p[4 + unique + u];
            }
            p[4 + unique + u] = wrap(p[4 + unique + u]);
        }
        break;
    }
    }
}

} // namespace impl

/// Evaluate the fringe model for physical parameters in FitResult::names order.
inline Eigen::VectorXd fringe_model(const Eigen::VectorXd& x, const SourceModel& model,
                                    const Eigen::VectorXd& params) {
    model.validate();
    const impl::Layout L = impl::make_layout(model);
    detail::require(params.size() == L.n, "parameter vector has the wrong length");
    detail::require(params[3] > 0.0, "envelope width must be positive");
    return impl::evaluate(L, params, x, nullptr);
}

/// Parameter names for a source model, in the order used by init and params.
inline std::vector<std::string> parameter_names(const SourceModel& model) {
    model.validate();
    return impl::make_layout(model).names;
}

/// Weighted least-squares fringe fit.
///
/// Without options.init the fit starts from envelope moments and the best
/// frequencies of a projected periodogram scan, running Levenberg-Marquardt
/// from several starts and keeping the lowest chi-square. Throws FitFailure
/// (carrying the best parameters) when no start converges.
inline FitResult fit_fringes(const FringeData1D& data, const SourceModel& model, const FitOptions& opt = {}) {
    data.validate();
    model.validate();
    detail::require(opt.imaging.wavelength > 0.0 && opt.imaging.screen_scale > 0.0,
                    "imaging wavelength and screen scale must be positive");
    if (data.y.maxCoeff() == data.y.minCoeff())
        throw InvalidArgument("fringe data has zero variance");
    const impl::Layout L = impl::make_layout(model);
    detail::require(static_cast<int>(data.size()) > L.n, "more parameters than data points");

    std::vector<Eigen::VectorXd> starts;
    if (opt.init) {
        detail::require(opt.init->size() == L.n, "init has the wrong length");
        detail::require((*opt.init)[3] > 0.0, "init envelope width must be positive");
        starts.push_back(*opt.init);
    } else {
        starts = impl::initial_guesses(L, data, opt.starts);
    }
    detail::require(!starts.empty(), "no initial guess could be formed");

    auto model_fn = [&](const Eigen::VectorXd& q, Eigen::MatrixXd* jac) {
        const Eigen::VectorXd p = impl::to_physical(L, q);
        Eigen::VectorXd v = impl::evaluate(L, p, data.x, jac);
        if (jac)
            *jac = *jac * impl::chain_factor(L, q).asDiagonal();
        return v;
    };

    impl::LmOutcome best;
    best.chi2 = std::numeric_limits<double>::infinity();
    for (const Eigen::VectorXd& p0 : starts) {
        Eigen::VectorXd p = p0;
        for (int i : L.vis_params)
            p[i] = std::clamp(p[i], 1e-3, 1.0);
        impl::LmOutcome o = impl::levenberg_marquardt(model_fn, impl::to_internal(L, p), data.y, data.sigma,
                                                      opt.max_iterations);
        // Chi-square ties within rounding go to the better converged start.
        const bool tie = std::isfinite(best.chi2) && std::abs(o.chi2 - best.chi2) <= 1e-12 * best.chi2;
        if (tie ? (o.converged > best.converged || (o.converged == best.converged && o.gradient < best.gradient))
                : o.chi2 < best.chi2)
            best = o;
    }

    FitResult res;
    res.model = model;
    res.names = L.names;
    res.params = impl::to_physical(L, best.params);
    impl::canonicalise(L, res.params);
    res.iterations = best.iterations;
    res.converged = best.converged;
    res.gradient_norm = best.gradient;

    Eigen::MatrixXd jac;
    const Eigen::VectorXd fit = impl::evaluate(L, res.params, data.x, &jac);
    const Eigen::VectorXd inv = data.sigma.cwiseInverse();
    res.residuals = (fit - data.y).cwiseProduct(inv);
    res.chi2 = res.residuals.squaredNorm();
    res.dof = static_cast<int>(data.size()) - L.n;
    res.reduced_chi2 = res.chi2 / res.dof;

    // Covariance via the pseudo-inverse of J^T W J so it stays PSD. Columns
    // are equilibrated first: the parameters span many orders of magnitude.
    const Eigen::MatrixXd jw = inv.asDiagonal() * jac;
    Eigen::VectorXd col_scale(L.n);
    for (int c = 0; c < L.n; ++c) {
        const double nrm = jw.col(c).norm();
        col_scale[c] = nrm > 0.0 ? 1.0 / nrm : 1.0;
    }
    const Eigen::MatrixXd js = jw * col_scale.asDiagonal();
    const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(js.transpose() * js);
    const Eigen::VectorXd lam = es.eigenvalues();
    const double cut = 1e-14 * lam.cwiseAbs().maxCoeff();
    Eigen::VectorXd inv_lam(lam.size());
    for (Eigen::Index i = 0; i < lam.size(); ++i)
        inv_lam[i] = lam[i] > cut ? 1.0 / lam[i] : 0.0;
    const Eigen::MatrixXd cov_asym = col_scale.asDiagonal()
                                     * (es.eigenvectors() * inv_lam.asDiagonal() * es.eigenvectors().transpose())
                                     * col_scale.asDiagonal();
    res.covariance = cov_asym * res.reduced_chi2;
    res.errors = res.covariance.diagonal().cwiseMax(0.0).cwiseSqrt();
    res.errors_asymptotic = cov_asym.diagonal().cwiseMax(0.0).cwiseSqrt();

    const Eigen::VectorXd& p = res.params;
    const Eigen::VectorXd& e = res.errors;
    res.background = p[0];
    res.background_err = e[0];
    res.amplitude = p[1];
    res.amplitude_err = e[1];
    res.centre = p[2];
    res.centre_err = e[2];
    res.envelope_width = p[3];
    res.envelope_width_err = e[3];
    for (const impl::Term& t : L.terms) {
        FitTerm ft;
        ft.kappa = impl::term_kappa(t, p);
        ft.phase = impl::wrap(impl::term_phase(t, p));
        ft.visibility = impl::term_vis(t, p);
        // Linear maps of the parameters: propagate the covariance exactly.
        Eigen::VectorXd gk = Eigen::VectorXd::Zero(L.n), gp = Eigen::VectorXd::Zero(L.n),
                        gv = Eigen::VectorXd::Zero(L.n);
        for (auto& [i, c] : t.kappa)
            gk[i] += c;
        for (auto& [i, c] : t.phase)
            gp[i] += c;
        gv[t.vis_param] = t.vis_weight;
        ft.kappa_err = std::sqrt(std::max(0.0, gk.dot(res.covariance * gk)));
        ft.phase_err = std::sqrt(std::max(0.0, gp.dot(res.covariance * gp)));
        ft.visibility_err = std::sqrt(std::max(0.0, gv.dot(res.covariance * gv)));
        res.terms.push_back(ft);
    }
    const int iv = L.vis_params.front();
    res.visibility = p[iv];
    res.visibility_err = e[iv];
    for (int ik : L.kappa_params) {
        res.spacings.push_back(opt.imaging.spacing(p[ik]));
        res.spacing_errors.push_back(opt.imaging.spacing(e[ik]));
    }
    res.psf_width = opt.imaging.psf_width(p[3]);
    res.psf_width_err = res.psf_width * e[3] / p[3];

    if (!res.converged)
        throw FitFailure("fringe fit did not converge (gradient " + std::to_string(res.gradient_norm) + ")", res);
    return res;
}

// ---------------------------------------------------------------------------
// Visibility time series

struct DecaySeries {
    Eigen::VectorXd t;     ///< s
    Eigen::VectorXd v;     ///< visibility
    Eigen::VectorXd sigma; ///< standard error of v

    void validate() const {
        detail::require(t.size() == v.size() && v.size() == sigma.size(), "series columns differ in length");
        detail::require(t.size() >= 4, "decay fit needs at least 4 points");
        detail::require(t.allFinite() && v.allFinite() && sigma.allFinite(), "series must be finite");
        detail::require((sigma.array() > 0.0).all(), "standard errors must be positive");
        detail::require(t.maxCoeff() > t.minCoeff(), "series needs distinct times");
    }
};

struct DecayFit {
    double v0 = 0.0, v0_err = 0.0;
    double v_inf = 0.0, v_inf_err = 0.0;
    double tau = std::numeric_limits<double>::infinity(), tau_err = 0.0;
    bool tau_infinite = true;
    double chi2 = 0.0, reduced_chi2 = 0.0;
    double delta_chi2 = 0.0; ///< improvement over a constant
};

/// Fit V(t) = V_inf + (V0 - V_inf) exp(-t / tau).
///
/// tau is reported infinite when the exponential improves chi-square over a
/// constant by less than 9 or its time constant exceeds 1000 times the span.
inline DecayFit fit_visibility_decay(const DecaySeries& s) {
    s.validate();
    const Eigen::VectorXd inv = s.sigma.cwiseInverse();
    const Eigen::VectorXd wts = inv.cwiseProduct(inv);
    const double span = s.t.maxCoeff() - s.t.minCoeff();

    DecayFit out;
    const double mean = wts.dot(s.v) / wts.sum();
    const double chi2_const = (s.v.array() - mean).matrix().cwiseProduct(inv).squaredNorm();
    out.v0 = out.v_inf = mean;
    out.v0_err = out.v_inf_err = 1.0 / std::sqrt(wts.sum());
    out.chi2 = chi2_const;
    out.reduced_chi2 = chi2_const / static_cast<double>(s.t.size() - 1);

    // Grid over log tau, linear in (V_inf, V0 - V_inf).
    auto linear = [&](double tau, Eigen::Vector2d& ab) {
        Eigen::MatrixXd a(s.t.size(), 2);
        a.col(0).setOnes();
        a.col(1) = (-s.t.array() / tau).exp().matrix();
        const Eigen::MatrixXd aw = inv.asDiagonal() * a;
        ab = aw.colPivHouseholderQr().solve(s.v.cwiseProduct(inv));
        return (aw * ab - s.v.cwiseProduct(inv)).squaredNorm();
    };
    double best_tau = span, best = std::numeric_limits<double>::infinity();
    Eigen::Vector2d ab;
    for (int i = 0; i <= 300; ++i) {
        const double tau = span * std::pow(10.0, -3.0 + 6.0 * i / 300.0);
        const double c = linear(tau, ab);
        if (c < best) {
            best = c;
            best_tau = tau;
        }
    }
    linear(best_tau, ab);

    auto model = [&](const Eigen::VectorXd& q, Eigen::MatrixXd* jac) {
        const double vinf = q[0], dv = q[1], tau = std::exp(q[2]);
        const Eigen::ArrayXd e = (-s.t.array() / tau).exp();
        if (jac) {
            jac->resize(s.t.size(), 3);
            jac->col(0).setOnes();
            jac->col(1) = e.matrix();
            jac->col(2) = (dv * e * s.t.array() / tau).matrix();
        }
        return (vinf + dv * e).matrix().eval();
    };
    Eigen::VectorXd q(3);
    q << ab[0], ab[1], std::log(best_tau);
    const impl::LmOutcome o = impl::levenberg_marquardt(model, q, s.v, s.sigma, 500);
    const double tau = std::exp(o.params[2]);
    out.delta_chi2 = chi2_const - o.chi2;
    if (!(out.delta_chi2 >= 9.0) || tau > 1e3 * span || !std::isfinite(tau))
        return out;

    out.tau_infinite = false;
    out.v_inf = o.params[0];
    out.v0 = o.params[0] + o.params[1];
    out.tau = tau;
    out.chi2 = o.chi2;
    const int dof = static_cast<int>(s.t.size()) - 3;
    out.reduced_chi2 = dof > 0 ? o.chi2 / dof : 0.0;

    // Covariance in (V_inf, V0, tau), scaled by the reduced chi-square when defined.
    Eigen::MatrixXd j(s.t.size(), 3);
    const Eigen::ArrayXd e = (-s.t.array() / tau).exp();
    j.col(0) = (1.0 - e).matrix();
    j.col(1) = e.matrix();
    j.col(2) = ((out.v0 - out.v_inf) * e * s.t.array() / (tau * tau)).matrix();
    const Eigen::MatrixXd jw = inv.asDiagonal() * j;
    const Eigen::MatrixXd cov =
        (jw.transpose() * jw).completeOrthogonalDecomposition().pseudoInverse() * (dof > 0 ? out.reduced_chi2 : 1.0);
    out.v_inf_err = std::sqrt(std::max(0.0, cov(0, 0)));
    out.v0_err = std::sqrt(std::max(0.0, cov(1, 1)));
    out.tau_err = std::sqrt(std::max(0.0, cov(2, 2)));
    return out;
}

} // namespace ionfringe::fit

#endif
