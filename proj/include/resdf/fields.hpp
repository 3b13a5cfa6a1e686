#ifndef RESDF_FIELDS_HPP
#define RESDF_FIELDS_HPP

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "resdf/types.hpp"

namespace resdf::fields {

// Analytic level-set field phi over the box [-1,1]^dim. The zero level set
// is the interface Gamma; phi is negative inside and positive outside.
//
// `scale` is a positive multiplier applied on top of the raw formula; it is
// 1 for catalog fields and is adjusted by normalize_phi. Exact signed
// distance oracles (when available) describe the geometry of the zero set
// and are unaffected by scaling.
struct LevelSetField {
    std::string name;
    int dim = 2;
    double scale = 1.0;

    std::function<double(const Point&)> raw;        // unscaled formula, total on R^3
    std::function<Point(const Point&)> raw_grad;    // analytic gradient of `raw`
    std::function<double(const Point&)> sdf;        // exact signed distance, may be empty
    std::function<Point(const Point&)> sdf_grad;    // unit gradient of `sdf`, may be empty
    std::map<std::string, double> params;

    bool has_exact_sdf() const { return static_cast<bool>(sdf); }

    double phi(const Point& p) const { return scale * raw(p); }
    Point grad_phi(const Point& p) const { return scale * raw_grad(p); }

    // Batched evaluation over points stored one per column (dim x count).
    Vector phi(const Matrix& pts) const;
    Matrix grad_phi(const Matrix& pts) const;
    Vector sdf_at(const Matrix& pts) const;
    Matrix sdf_grad_at(const Matrix& pts) const;

    Point to_point(const Eigen::Ref<const Vector>& column) const;
};

enum class Provenance { Uniform, Random };

// Ordered set of sample points in [-1,1]^dim, one point per column.
struct CollocationSet {
    int dim = 2;
    Matrix points;  // dim x count
    Provenance provenance = Provenance::Uniform;
    double spacing = 0.0;      // h, uniform grids only
    int n_per_side = 0;        // uniform grids only
    std::uint64_t seed = 0;    // random sets only

    Eigen::Index count() const { return points.cols(); }
};

// Points lying on the interface, with outward unit normals.
struct InterfaceSample {
    int dim = 2;
    Matrix points;   // dim x count
    Matrix normals;  // dim x count

    Eigen::Index count() const { return points.cols(); }
};

// Catalog of named level-set fields. Valid identifiers:
//   phi1, phi_osc, phi_jump, phi4_square, phi5_flower, phi6_dumbbell,
//   phi7_heart, phi8_twocircle, phi9_threecircle, phi10_sphere,
//   phi11_ellipsoids
// plus the aliases phi2 -> phi_jump and phi3 -> phi_osc (numbering follows
// the formulas, not the prose labels, which disagree).
// `overrides` replaces documented parameters (e.g. alpha, r0, variant).
LevelSetField catalog_get(const std::string& name);
LevelSetField catalog_get(const std::string& name,
                          const std::map<std::string, double>& overrides);
std::vector<std::string> catalog_names();

// Signed distance to an axis-aligned square of side length r centered at
// the origin: negative inside, Euclidean (rounded-corner) distance outside.
double exact_sdf_square(const Point& p, double r);

// sign(phi(x)) * min distance to the cloud points.
double approx_sdf_pointcloud(const LevelSetField& field, const Point& x,
                             const InterfaceSample& cloud);
// Batched variant over points stored one per column.
Vector approx_sdf_pointcloud(const LevelSetField& field, const Matrix& pts,
                             const InterfaceSample& cloud);

// Rescale the field by 1/sqrt(max(phi) * max(-phi)), maxima over the probe.
// The zero set and sign pattern are unchanged. Throws DegenerateFieldError
// if phi does not take both signs on the probe.
LevelSetField normalize_phi(const LevelSetField& field, const CollocationSet& probe);

// Uniform tensor grid on [-1,1]^dim with n_per_side points per side and
// spacing h = 2/(n_per_side - 1). Points are in lexicographic index order:
// the first coordinate varies slowest, the last fastest.
CollocationSet grid_points(int dim, int n_per_side);

// Preset grids with 2^k points per side.
CollocationSet omega_grid(int dim, int k);

// i.i.d. uniform points on [-1,1]^dim. Same seed, same points; the
// generator is fixed (not implementation-defined) for portability.
CollocationSet random_points(int dim, long count, std::uint64_t seed);

// Extract points on the zero level set by scanning grid edges for sign
// changes and bisecting each crossing edge. Returns at least target_count/2
// points (scan resolution doubles as needed) with outward unit normals.
InterfaceSample sample_interface(const LevelSetField& field, long target_count);

// Export a point set with field values as CSV (x[,y[,z]],phi).
void write_points_csv(const std::string& path, const CollocationSet& pts,
                      const Vector& values);

}  // namespace resdf::fields

#endif  // RESDF_FIELDS_HPP
