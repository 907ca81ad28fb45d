#ifndef IONFRINGE_CORE_HPP
#define IONFRINGE_CORE_HPP

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace ionfringe {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double pi = std::numbers::pi;
inline constexpr double two_pi = 2.0 * std::numbers::pi;

/// CODATA 2018 exact / recommended values, SI units.
namespace constants {
inline constexpr double elementary_charge = 1.602176634e-19;   // C
inline constexpr double vacuum_permittivity = 8.8541878128e-12; // F/m
inline constexpr double hbar = 1.054571817e-34;                // J s
inline constexpr double boltzmann = 1.380649e-23;              // J/K
inline constexpr double atomic_mass_unit = 1.66053906660e-27;  // kg
inline constexpr double electron_mass = 9.1093837015e-31;      // kg

/// q^2 / (4 pi eps0) for a singly charged ion, in J m.
inline constexpr double coulomb_constant_q2 =
    elementary_charge * elementary_charge / (4.0 * pi * vacuum_permittivity);

/// Mass of a singly ionised 40Ca atom.
inline constexpr double mass_ca40_ion = 39.962590863 * atomic_mass_unit - electron_mass;
} // namespace constants

/// Base of every error thrown by the library. The CLI maps the subclasses to
/// distinct exit codes.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Numerical failures: singular systems, non-convergence, unstable crystals.
class NumericalError : public Error {
public:
    using Error::Error;
};

class DegenerateSteadyState : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class IntegrationFailure : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class ConvergenceError : public NumericalError {
public:
    ConvergenceError(const std::string& what, double residual)
        : NumericalError(what + " (residual " + std::to_string(residual) + ")"),
          residual_(residual) {}
    double residual() const noexcept { return residual_; }

private:
    double residual_;
};

class InstabilityError : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class DesignFailure : public NumericalError {
public:
    using NumericalError::NumericalError;
};

class IoError : public Error {
public:
    using Error::Error;
};

class ParseError : public IoError {
public:
    using IoError::IoError;
};

namespace detail {

inline void require(bool condition, const std::string& message) {
    if (!condition)
        throw InvalidArgument(message);
}

inline void require_finite(double value, const char* name) {
    if (!std::isfinite(value))
        throw InvalidArgument(std::string(name) + " must be finite");
}

inline void require_finite(const Vec3& v, const char* name) {
    if (!v.allFinite())
        throw InvalidArgument(std::string(name) + " must be finite");
}

inline bool is_unit(const Vec3& v, double tol = 1e-12) {
    return std::abs(v.norm() - 1.0) <= tol;
}

} // namespace detail

} // namespace ionfringe

#endif
