// Two ions from trap to fitted fringes: equilibrium positions, Doppler-limit
// motion, the rendered pattern, one noisy camera frame and the fit.
#include <ionfringe/fit.hpp>
#include <ionfringe/thermal.hpp>

#include <cstdio>

using namespace ionfringe;

int main() {
    const auto ca = bloch::AtomLevels::calcium40();
    const double mass = constants::mass_ca40_ion;
    const auto trap = crystal::TrapConfig::harmonic(mass, two_pi * 0.977e6, two_pi * 1.853e6, two_pi * 2.620e6);
    const auto geom = crystal::equilibrium_positions(trap, 2);
    const auto modes = crystal::normal_modes(geom);
    std::printf("spacing %.3f um, axial modes %.3f %.3f MHz\n", geom.spacings()[0] * 1e6,
                modes.axial.frequencies[0] / (two_pi * 1e6), modes.axial.frequencies[1] / (two_pi * 1e6));

    // Internal coherence from the steady state of the cooling and repump beams.
    const auto probe = thermal::ProbeLasers::from_saturation(ca, 1.0, 0.16, -two_pi * 10e6, two_pi * 60e6);
    const auto pair = optics::CoherencePair::from(bloch::steady_state_three_level(probe.cooling, probe.repump, ca));

    const auto occ = thermal::ModeOccupation::thermal(modes, thermal::doppler_limit_temperature(ca));
    const auto spread = thermal::relative_covariance(modes, mass, occ);

    const auto det = optics::DetectionGeometry::make(Vec3(1, 0, -1), 397e-9, Vec3::UnitX(), Vec3::UnitZ(), 0.02, 10.0);
    const double psf = 3.6e-6, we = optics::envelope_width(det, psf);
    const optics::ScreenAxis axis{128, 8.0 * we / 128.0, 0.0};
    const auto pattern = optics::render_pattern(geom, pair, spread, det, axis, psf);

    const auto image = optics::render_camera_image(pattern, 1e5 / 48.0, 0.0, 42);
    fit::FitOptions opt;
    opt.imaging = fit::Imaging::from(det);
    const auto r = fit::fit_fringes(fit::integrate_columns(image), fit::SourceModel::free_terms(1), opt);

    const double dw = optics::debye_waller_factor(det.k_laser - det.wavenumber() * det.detect_axis, spread.pair(0, 1));
    std::printf("single-ion visibility %.4f, Debye-Waller %.4f, expected fringe visibility %.4f\n",
                pair.visibility(), dw, pair.visibility() * dw);
    std::printf("fit: V = %.4f +- %.4f, d = %.3f +- %.3f um, w = %.2f um, chi2_red = %.2f\n", r.visibility,
                r.visibility_err, r.spacings[0] * 1e6, r.spacing_errors[0] * 1e6, r.psf_width * 1e6, r.reduced_chi2);
}
