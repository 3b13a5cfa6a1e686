#ifndef RESDF_TYPES_HPP
#define RESDF_TYPES_HPP

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace resdf {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// Universal point type. Two-dimensional fields ignore the z component,
// which is kept at zero by all point-set generators.
using Point = Eigen::Vector3d;

// Requested identifier does not exist in a catalog.
class NotFoundError : public std::runtime_error {
public:
    explicit NotFoundError(const std::string& what) : std::runtime_error(what) {}
};

// A level-set field does not change sign where a sign change is required
// (no interface to work with).
class DegenerateFieldError : public std::runtime_error {
public:
    explicit DegenerateFieldError(const std::string& what) : std::runtime_error(what) {}
};

// A numeric evaluation produced NaN or infinity. The message carries the
// location (node, layer, epoch or parameter index) that first went bad.
class NonFiniteError : public std::runtime_error {
public:
    explicit NonFiniteError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace resdf

#endif  // RESDF_TYPES_HPP
