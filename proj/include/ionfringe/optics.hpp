#ifndef IONFRINGE_OPTICS_HPP
#define IONFRINGE_OPTICS_HPP

// Far-field interference of light scattered by a driven ion crystal, the
// imaging onto a 1-D screen axis, and a shot-noise camera model.
//
// The screen is the image of the far field: a screen coordinate x maps to the
// observation direction n = detect_axis + (x / D) screen_axis with
// D = effective_focal_length * magnification (paraxial, linear in x).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "bloch.hpp"
#include "core.hpp"
#include "crystal.hpp"

namespace ionfringe::optics {

struct DetectionGeometry {
    Vec3 k_laser = Vec3(1.0, 0.0, -1.0).normalized() * (two_pi / 397e-9);
    Vec3 detect_axis = Vec3::UnitX();
    Vec3 screen_axis = Vec3::UnitZ(); ///< direction on the sky that maps to +x on screen
    double effective_focal_length = 1.0; ///< m
    double magnification = 1.0;

    static DetectionGeometry make(const Vec3& laser_dir, double wavelength, const Vec3& detect,
                                  const Vec3& screen, double focal_length, double mag) {
        detail::require(wavelength > 0.0 && std::isfinite(wavelength), "wavelength must be positive");
        DetectionGeometry d;
        d.k_laser = laser_dir.normalized() * (two_pi / wavelength);
        d.detect_axis = detect;
        d.screen_axis = screen;
        d.effective_focal_length = focal_length;
        d.magnification = mag;
        return d;
    }

    double wavenumber() const { return k_laser.norm(); }
    double wavelength() const { return two_pi / k_laser.norm(); }
    /// Screen distance per radian of observation angle.
    double screen_scale() const { return effective_focal_length * magnification; }

    void validate() const {
        detail::require_finite(k_laser, "k_laser");
        detail::require(k_laser.norm() > 0.0, "k_laser must be non-zero");
        detail::require(detail::is_unit(detect_axis), "detect_axis must be a unit vector");
        detail::require(detail::is_unit(screen_axis, 1e-9), "screen_axis must be a unit vector");
        detail::require(std::abs(screen_axis.dot(detect_axis)) < 1e-9,
                        "screen_axis must be perpendicular to detect_axis");
        detail::require(effective_focal_length > 0.0 && std::isfinite(effective_focal_length),
                        "effective_focal_length must be positive");
        detail::require(magnification > 0.0 && std::isfinite(magnification),
                        "magnification must be positive");
    }
};

/// Single-atom quantities entering the scattered intensity.
struct CoherencePair {
    double rho_pp = 0.0;
    double coh2 = 0.0; ///< |rho_ps|^2

    static CoherencePair from(const bloch::DensityMatrix2& r) { return {r.rho_pp, std::norm(r.rho_ps)}; }
    static CoherencePair from(const bloch::DensityMatrix3& r) { return {r.rho_pp, std::norm(r.rho_sp)}; }

    double visibility() const { return rho_pp > 0.0 ? coh2 / rho_pp : 0.0; }

    void validate() const {
        detail::require_finite(rho_pp, "rho_pp");
        detail::require_finite(coh2, "coh2");
        detail::require(rho_pp >= 0.0 && rho_pp <= 1.0, "rho_pp must lie in [0, 1]");
        detail::require(coh2 >= 0.0 && coh2 <= rho_pp * (1.0 - rho_pp) + 1e-10,
                        "coh2 exceeds rho_pp (1 - rho_pp)");
    }
};

/// Covariance of the relative displacement u_i - u_j for every ion pair.
class ThermalSpread {
public:
    ThermalSpread() = default;
    explicit ThermalSpread(std::size_t n) : n_(n), cov_(n * n, Mat3::Zero()) {}

    /// Frozen ions: every covariance zero.
    static ThermalSpread frozen(std::size_t n) { return ThermalSpread(n); }

    /// Uncorrelated ions with identical single-ion covariance.
    static ThermalSpread independent(std::size_t n, const Mat3& single_ion) {
        ThermalSpread t(n);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j)
                if (i != j)
                    t.set(i, j, 2.0 * single_ion);
        return t;
    }

    std::size_t size() const { return n_; }
    const Mat3& pair(std::size_t i, std::size_t j) const { return cov_.at(i * n_ + j); }
    void set(std::size_t i, std::size_t j, const Mat3& c) {
        cov_.at(i * n_ + j) = c;
        cov_.at(j * n_ + i) = c;
    }

    void validate() const {
        for (const Mat3& c : cov_) {
            detail::require(c.allFinite(), "pair covariance must be finite");
            detail::require((c - c.transpose()).cwiseAbs().maxCoeff() <= 1e-12 * (1e-18 + c.cwiseAbs().maxCoeff()),
                            "pair covariance must be symmetric");
            detail::require(Eigen::SelfAdjointEigenSolver<Mat3>(c, Eigen::EigenvaluesOnly)
                                    .eigenvalues()
                                    .minCoeff()
                                >= -1e-18,
                            "pair covariance must be positive semidefinite");
        }
    }

private:
    std::size_t n_ = 0;
    std::vector<Mat3> cov_;
};

/// phi = (r_i - r_j) . (k_L - |k_L| n).
inline double pair_phase(const Vec3& r_i, const Vec3& r_j, const DetectionGeometry& det,
                         const Vec3& n) {
    detail::require(detail::is_unit(n), "observation direction must be a unit vector");
    return (r_i - r_j).dot(det.k_laser - det.wavenumber() * n);
}

/// exp(-k^T cov k / 2).
inline double debye_waller_factor(const Vec3& k_eff, const Mat3& cov) {
    const double q = k_eff.dot(cov * k_eff);
    detail::require(q >= -1e-12, "covariance must be positive semidefinite");
    return std::exp(-0.5 * std::max(q, 0.0));
}

namespace impl {

inline double intensity(const std::vector<Vec3>& r, const CoherencePair& pair,
                        const ThermalSpread& thermal, const DetectionGeometry& det,
                        const Vec3& n_phase, const Vec3& n_dw) {
    const double k = det.wavenumber();
    const Vec3 q_phase = det.k_laser - k * n_phase;
    const Vec3 q_dw = det.k_laser - k * n_dw;
    double cross = 0.0;
    for (std::size_t i = 0; i < r.size(); ++i)
        for (std::size_t j = i + 1; j < r.size(); ++j)
            cross += debye_waller_factor(q_dw, thermal.pair(i, j))
                     * std::cos((r[i] - r[j]).dot(q_phase));
    return static_cast<double>(r.size()) * pair.rho_pp + 2.0 * pair.coh2 * cross;
}

inline void check_inputs(const std::vector<Vec3>& r, const CoherencePair& pair,
                         const ThermalSpread& thermal, const DetectionGeometry& det) {
    detail::require(!r.empty(), "crystal has no ions");
    detail::require(thermal.size() == r.size(), "thermal spread does not match the crystal size");
    pair.validate();
    det.validate();
}

} // namespace impl

/// Relative intensity N rho_pp + |rho_ps|^2 sum_{i != j} DW_ij cos phi_ij in
/// direction n. Debye-Waller factors multiply the cross terms only.
inline double far_field_intensity(const std::vector<Vec3>& positions, const CoherencePair& pair,
                                  const ThermalSpread& thermal, const DetectionGeometry& det,
                                  const Vec3& n) {
    impl::check_inputs(positions, pair, thermal, det);
    detail::require(detail::is_unit(n), "observation direction must be a unit vector");
    return impl::intensity(positions, pair, thermal, det, n, n);
}

inline double far_field_intensity(const crystal::CrystalGeometry& geom, const CoherencePair& pair,
                                  const ThermalSpread& thermal, const DetectionGeometry& det,
                                  const Vec3& n) {
    return far_field_intensity(geom.points(), pair, thermal, det, n);
}

/// Evenly spaced pixel centres on the screen, symmetric about `centre`.
struct ScreenAxis {
    std::size_t pixels = 256;
    double pitch = 1e-6; ///< m
    double centre = 0.0;

    double position(std::size_t p) const {
        return centre + (static_cast<double>(p) - 0.5 * static_cast<double>(pixels - 1)) * pitch;
    }
};

struct FringePattern {
    Eigen::VectorXd x;         ///< screen coordinate, m
    Eigen::VectorXd intensity; ///< relative, unit mean
};

/// Gaussian envelope width on the screen produced by a source-plane PSF of
/// rms width psf_width: the envelope is the Fourier transform of the PSF.
inline double envelope_width(const DetectionGeometry& det, double psf_width) {
    return det.screen_scale() / (det.wavenumber() * psf_width);
}

/// Noiseless fringe pattern across the screen, normalised to unit mean.
///
/// Debye-Waller factors are taken on the optical axis; over the small angles
/// covered by the screen they are constant.
inline FringePattern render_pattern(const std::vector<Vec3>& positions, const CoherencePair& pair,
                                    const ThermalSpread& thermal, const DetectionGeometry& det,
                                    const ScreenAxis& screen, double psf_width) {
    impl::check_inputs(positions, pair, thermal, det);
    detail::require(screen.pixels >= 1, "screen needs at least one pixel");
    detail::require(screen.pitch > 0.0 && std::isfinite(screen.pitch), "pixel pitch must be positive");
    detail::require(psf_width > 0.0 && std::isfinite(psf_width), "psf_width must be positive");

    const double scale = det.screen_scale();
    const double w_env = envelope_width(det, psf_width);
    FringePattern out;
    out.x.resize(static_cast<Eigen::Index>(screen.pixels));
    out.intensity.resize(out.x.size());
    for (std::size_t p = 0; p < screen.pixels; ++p) {
        const double x = screen.position(p);
        const Vec3 n = det.detect_axis + (x / scale) * det.screen_axis;
        const double env = std::exp(-0.5 * x * x / (w_env * w_env));
        out.x[static_cast<Eigen::Index>(p)] = x;
        out.intensity[static_cast<Eigen::Index>(p)] =
            env * impl::intensity(positions, pair, thermal, det, n, det.detect_axis);
    }
    const double mean = out.intensity.mean();
    if (mean > 0.0)
        out.intensity /= mean;
    return out;
}

inline FringePattern render_pattern(const crystal::CrystalGeometry& geom, const CoherencePair& pair,
                                    const ThermalSpread& thermal, const DetectionGeometry& det,
                                    const ScreenAxis& screen, double psf_width) {
    return render_pattern(geom.points(), pair, thermal, det, screen, psf_width);
}

struct CameraOptions {
    std::size_t rows = 48;
    /// Vertical Gaussian profile rms in pixels; 0 spreads the light uniformly.
    double vertical_sigma = 0.0;
    double read_noise = 0.0; ///< Gaussian read-noise rms in counts, 0 = off
    unsigned threads = 0;    ///< 0 = hardware concurrency
};

struct CameraImage {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<std::uint32_t> counts; ///< row-major
    double pixel_size = 0.0;           ///< m
    double exposure = 0.0;             ///< expected counts per pixel at unit intensity
    double background = 0.0;           ///< counts per pixel
    std::uint64_t seed = 0;

    std::uint32_t at(std::size_t r, std::size_t c) const { return counts.at(r * cols + c); }
};

namespace impl {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

} // namespace impl

/// Poisson camera frame with mean exposure * pattern * profile + background.
///
/// Each pixel draws from its own generator seeded from (seed, pixel index), so
/// the image does not depend on the thread count.
inline CameraImage render_camera_image(const FringePattern& pattern, double exposure,
                                       double background, std::uint64_t seed,
                                       const CameraOptions& opt = {}) {
    detail::require(exposure >= 0.0 && std::isfinite(exposure), "exposure must be non-negative");
    detail::require(background >= 0.0 && std::isfinite(background), "background must be non-negative");
    detail::require(pattern.x.size() >= 1 && pattern.x.size() == pattern.intensity.size(),
                    "pattern is empty or inconsistent");
    detail::require(opt.rows >= 1, "image needs at least one row");
    detail::require(opt.vertical_sigma >= 0.0 && opt.read_noise >= 0.0,
                    "vertical_sigma and read_noise must be non-negative");
    detail::require((pattern.intensity.array() >= 0.0).all(), "pattern intensity must be non-negative");

    CameraImage img;
    img.rows = opt.rows;
    img.cols = static_cast<std::size_t>(pattern.x.size());
    img.counts.assign(img.rows * img.cols, 0);
    img.pixel_size = img.cols > 1 ? std::abs(pattern.x[1] - pattern.x[0]) : 0.0;
    img.exposure = exposure;
    img.background = background;
    img.seed = seed;

    // Vertical profile with unit mean over the rows.
    std::vector<double> profile(img.rows, 1.0);
    if (opt.vertical_sigma > 0.0) {
        double sum = 0.0;
        for (std::size_t r = 0; r < img.rows; ++r) {
            const double y = static_cast<double>(r) - 0.5 * static_cast<double>(img.rows - 1);
            profile[r] = std::exp(-0.5 * y * y / (opt.vertical_sigma * opt.vertical_sigma));
            sum += profile[r];
        }
        for (double& p : profile)
            p *= static_cast<double>(img.rows) / sum;
    }

    const std::uint64_t base = impl::splitmix64(seed);
    auto work = [&](std::size_t r0, std::size_t r1) {
        for (std::size_t r = r0; r < r1; ++r)
            for (std::size_t c = 0; c < img.cols; ++c) {
                const std::size_t idx = r * img.cols + c;
                const double mean =
                    exposure * pattern.intensity[static_cast<Eigen::Index>(c)] * profile[r] + background;
                std::mt19937_64 gen(impl::splitmix64(base ^ impl::splitmix64(idx)));
                double v = 0.0;
                if (mean > 0.0)
                    v = static_cast<double>(std::poisson_distribution<std::uint64_t>(mean)(gen));
                if (opt.read_noise > 0.0)
                    v += std::normal_distribution<double>(0.0, opt.read_noise)(gen);
                v = std::clamp(std::round(v), 0.0, 4294967295.0);
                img.counts[idx] = static_cast<std::uint32_t>(v);
            }
    };

    unsigned threads = opt.threads ? opt.threads : std::max(1u, std::thread::hardware_concurrency());
    threads = static_cast<unsigned>(std::min<std::size_t>(threads, img.rows));
    if (threads <= 1) {
        work(0, img.rows);
        return img;
    }
    std::vector<std::thread> pool;
    const std::size_t chunk = (img.rows + threads - 1) / threads;
    for (std::size_t r0 = 0; r0 < img.rows; r0 += chunk)
        pool.emplace_back(work, r0, std::min(img.rows, r0 + chunk));
    for (auto& t : pool)
        t.join();
    return img;
}

} // namespace ionfringe::optics

#endif
