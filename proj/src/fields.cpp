#include "resdf/fields.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace resdf::fields {
namespace {

constexpr double kPi = std::numbers::pi;

// Unit vector x/|x|, with the convention 0 at the origin (the only point
// where radial level-set formulas are non-differentiable).
Point radial_dir(const Point& p) {
    const double rho = p.norm();
    if (rho == 0.0) return Point::Zero();
    return p / rho;
}

double sgn(double v) { return (v > 0.0) ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

// ---------------------------------------------------------------------------
// Exact signed distance to a union of disks.
//
// Outside the union the minimum of the member signed distances is exact.
// Inside, the nearest boundary point is either a radial projection onto a
// member circle that is not swallowed by another disk, or a circle-circle
// intersection corner, so both kinds of candidates are examined.
// ---------------------------------------------------------------------------

struct Disk {
    double cx, cy, r;
};

struct NearestBoundary {
    double sdf;
    double px, py;  // closest point on the union boundary
};

NearestBoundary disk_union_nearest(const std::vector<Disk>& disks, double x, double y) {
    const auto member_sdf = [&](const Disk& d) {
        return std::hypot(x - d.cx, y - d.cy) - d.r;
    };

    std::size_t jmin = 0;
    double smin = member_sdf(disks[0]);
    for (std::size_t j = 1; j < disks.size(); ++j) {
        const double s = member_sdf(disks[j]);
        if (s < smin) {
            smin = s;
            jmin = j;
        }
    }

    const auto radial_point = [&](const Disk& d) {
        double dx = x - d.cx, dy = y - d.cy;
        const double rho = std::hypot(dx, dy);
        if (rho == 0.0) {
            dx = 1.0;
            dy = 0.0;
        } else {
            dx /= rho;
            dy /= rho;
        }
        return std::pair<double, double>{d.cx + d.r * dx, d.cy + d.r * dy};
    };

    if (smin >= 0.0) {
        const auto [px, py] = radial_point(disks[jmin]);
        return {smin, px, py};
    }

    // Inside the union: search visible arcs and corners.
    const auto strictly_inside_other = [&](double px, double py, std::size_t self) {
        for (std::size_t k = 0; k < disks.size(); ++k) {
            if (k == self) continue;
            if (std::hypot(px - disks[k].cx, py - disks[k].cy) < disks[k].r - 1e-12)
                return true;
        }
        return false;
    };

    double best = std::numeric_limits<double>::infinity();
    double bx = x, by = y;
    for (std::size_t j = 0; j < disks.size(); ++j) {
        const auto [px, py] = radial_point(disks[j]);
        if (strictly_inside_other(px, py, j)) continue;
        const double d = std::hypot(x - px, y - py);
        if (d < best) {
            best = d;
            bx = px;
            by = py;
        }
    }
    for (std::size_t j = 0; j < disks.size(); ++j) {
        for (std::size_t k = j + 1; k < disks.size(); ++k) {
            const double ex = disks[k].cx - disks[j].cx;
            const double ey = disks[k].cy - disks[j].cy;
            const double d = std::hypot(ex, ey);
            const double rj = disks[j].r, rk = disks[k].r;
            if (d <= std::abs(rj - rk) || d >= rj + rk || d == 0.0) continue;
            const double a = (d * d + rj * rj - rk * rk) / (2.0 * d);
            const double h2 = rj * rj - a * a;
            if (h2 <= 0.0) continue;
            const double h = std::sqrt(h2);
            const double mx = disks[j].cx + a * ex / d;
            const double my = disks[j].cy + a * ey / d;
            for (const double s : {1.0, -1.0}) {
                const double px = mx + s * h * (-ey / d);
                const double py = my + s * h * (ex / d);
                bool inside_third = false;
                for (std::size_t t = 0; t < disks.size(); ++t) {
                    if (t == j || t == k) continue;
                    if (std::hypot(px - disks[t].cx, py - disks[t].cy) < disks[t].r - 1e-12) {
                        inside_third = true;
                        break;
                    }
                }
                if (inside_third) continue;
                const double dd = std::hypot(x - px, y - py);
                if (dd < best) {
                    best = dd;
                    bx = px;
                    by = py;
                }
            }
        }
    }
    return {-best, bx, by};
}

double disk_union_sdf(const std::vector<Disk>& disks, const Point& p) {
    return disk_union_nearest(disks, p.x(), p.y()).sdf;
}

Point disk_union_sdf_grad(const std::vector<Disk>& disks, const Point& p) {
    const NearestBoundary nb = disk_union_nearest(disks, p.x(), p.y());
    Point d(p.x() - nb.px, p.y() - nb.py, 0.0);
    const double len = d.norm();
    if (len == 0.0) {
        // On the boundary: outward radial direction of the owning circle.
        for (const Disk& disk : disks) {
            Point rd(p.x() - disk.cx, p.y() - disk.cy, 0.0);
            if (std::abs(rd.norm() - disk.r) < 1e-12) return radial_dir(rd);
        }
        return Point::Zero();
    }
    // Outside: d points away from the boundary, the gradient. Inside: the
    // gradient points toward the boundary, i.e. against d.
    return (nb.sdf >= 0.0 ? 1.0 : -1.0) * (d / len);
}

// ---------------------------------------------------------------------------
// Catalog entries
// ---------------------------------------------------------------------------

double cone(const Point& p) { return std::hypot(p.x(), p.y()) - 0.5; }

LevelSetField with_cone_sdf(LevelSetField f) {
    f.sdf = [](const Point& p) { return cone(p); };
    f.sdf_grad = [](const Point& p) { return radial_dir(Point(p.x(), p.y(), 0.0)); };
    return f;
}

LevelSetField make_phi1() {
    LevelSetField f;
    f.name = "phi1";
    f.dim = 2;
    f.raw = [](const Point& p) { return std::exp(p.x() + p.y()) * cone(p); };
    f.raw_grad = [](const Point& p) {
        const double e = std::exp(p.x() + p.y());
        const Point r = radial_dir(Point(p.x(), p.y(), 0.0));
        const double u = cone(p);
        return Point(e * (u + r.x()), e * (u + r.y()), 0.0);
    };
    return with_cone_sdf(std::move(f));
}

LevelSetField make_phi_jump(double r0) {
    LevelSetField f;
    f.name = "phi_jump";
    f.dim = 2;
    f.params["r0"] = r0;
    f.raw = [r0](const Point& p) {
        const double u = cone(p);
        if (u > 0.0) return p.x() * p.x() + 1.5 * p.y() * p.y();
        return (u - r0) * (u - r0) - r0 * r0;
    };
    f.raw_grad = [r0](const Point& p) {
        const double u = cone(p);
        if (u > 0.0) return Point(2.0 * p.x(), 3.0 * p.y(), 0.0);
        const Point r = radial_dir(Point(p.x(), p.y(), 0.0));
        return Point(2.0 * (u - r0) * r.x(), 2.0 * (u - r0) * r.y(), 0.0);
    };
    return with_cone_sdf(std::move(f));
}

LevelSetField make_phi_osc() {
    LevelSetField f;
    f.name = "phi_osc";
    f.dim = 2;
    f.raw = [](const Point& p) {
        const double a = (1.2 * std::sin(4.0 * kPi * p.x()) * std::sin(4.0 * kPi * p.y()) + 2.0) *
                         std::exp(-(p.x() * p.x() + p.y() * p.y()) / 2.0);
        return a * cone(p);
    };
    f.raw_grad = [](const Point& p) {
        const double sx = std::sin(4.0 * kPi * p.x()), cx = std::cos(4.0 * kPi * p.x());
        const double sy = std::sin(4.0 * kPi * p.y()), cy = std::cos(4.0 * kPi * p.y());
        const double g = std::exp(-(p.x() * p.x() + p.y() * p.y()) / 2.0);
        const double m = 1.2 * sx * sy + 2.0;
        const double a = m * g;
        const double dax = g * (4.8 * kPi * cx * sy - p.x() * m);
        const double day = g * (4.8 * kPi * sx * cy - p.y() * m);
        const double u = cone(p);
        const Point r = radial_dir(Point(p.x(), p.y(), 0.0));
        return Point(dax * u + a * r.x(), day * u + a * r.y(), 0.0);
    };
    return with_cone_sdf(std::move(f));
}

LevelSetField make_phi4_square(double r) {
    LevelSetField f;
    f.name = "phi4_square";
    f.dim = 2;
    f.params["r"] = r;
    f.raw = [r](const Point& p) {
        return 0.5 * std::max(std::abs(p.x()) - r / 2.0, std::abs(p.y()) - r / 2.0);
    };
    f.raw_grad = [r](const Point& p) {
        // Ties on the diagonals take the x branch.
        if (std::abs(p.x()) - r / 2.0 >= std::abs(p.y()) - r / 2.0)
            return Point(0.5 * sgn(p.x()), 0.0, 0.0);
        return Point(0.0, 0.5 * sgn(p.y()), 0.0);
    };
    f.sdf = [r](const Point& p) { return exact_sdf_square(p, r); };
    f.sdf_grad = [r](const Point& p) {
        const double qx = std::abs(p.x()) - r / 2.0;
        const double qy = std::abs(p.y()) - r / 2.0;
        if (qx > 0.0 || qy > 0.0) {
            const double vx = std::max(qx, 0.0), vy = std::max(qy, 0.0);
            const double d = std::hypot(vx, vy);
            return Point(sgn(p.x()) * vx / d, sgn(p.y()) * vy / d, 0.0);
        }
        if (qx >= qy) return Point(sgn(p.x()), 0.0, 0.0);
        return Point(0.0, sgn(p.y()), 0.0);
    };
    return f;
}

LevelSetField make_phi5_flower(double alpha) {
    LevelSetField f;
    f.name = "phi5_flower";
    f.dim = 2;
    f.params["alpha"] = alpha;
    f.raw = [alpha](const Point& p) {
        const double rho = std::hypot(p.x(), p.y());
        const double th = std::atan2(p.y(), p.x());
        const double m = 0.5 * std::sin(6.0 * kPi * p.x()) * std::sin(6.0 * kPi * p.y()) + 1.0;
        return m * (5.0 * rho - 2.0 - alpha * std::cos(5.0 * th));
    };
    f.raw_grad = [alpha](const Point& p) {
        const double rho = std::hypot(p.x(), p.y());
        const double th = std::atan2(p.y(), p.x());
        const double sx = std::sin(6.0 * kPi * p.x()), cx = std::cos(6.0 * kPi * p.x());
        const double sy = std::sin(6.0 * kPi * p.y()), cy = std::cos(6.0 * kPi * p.y());
        const double m = 0.5 * sx * sy + 1.0;
        const double body = 5.0 * rho - 2.0 - alpha * std::cos(5.0 * th);
        const double dmx = 3.0 * kPi * cx * sy;
        const double dmy = 3.0 * kPi * sx * cy;
        double dbx = 0.0, dby = 0.0;
        if (rho > 0.0) {
            const double s5 = std::sin(5.0 * th);
            dbx = 5.0 * p.x() / rho + 5.0 * alpha * s5 * (-p.y()) / (rho * rho);
            dby = 5.0 * p.y() / rho + 5.0 * alpha * s5 * p.x() / (rho * rho);
        }
        return Point(dmx * body + m * dbx, dmy * body + m * dby, 0.0);
    };
    return f;
}

LevelSetField make_phi6_dumbbell() {
    LevelSetField f;
    f.name = "phi6_dumbbell";
    f.dim = 2;
    f.raw = [](const Point& p) {
        const double x2 = p.x() * p.x();
        return 10.0 * x2 * x2 * (2.0 * x2 - 1.0) + p.y() * p.y() - 0.1;
    };
    f.raw_grad = [](const Point& p) {
        const double x = p.x(), x2 = x * x;
        return Point(120.0 * x2 * x2 * x - 40.0 * x2 * x, 2.0 * p.y(), 0.0);
    };
    return f;
}

LevelSetField make_phi7_heart(double variant) {
    LevelSetField f;
    f.name = "phi7_heart";
    f.dim = 2;
    f.params["variant"] = variant;
    const bool separable = variant != 0.0;  // cos(pi x)cos(pi y) instead of cos(x+y)
    const auto prefactor = [separable](double x, double y) {
        const double s = x + y;
        const double c = separable ? std::cos(kPi * x) * std::cos(kPi * y) : std::cos(s);
        return c + 2.0 * s * s + 1.5;
    };
    f.raw = [prefactor](const Point& p) {
        const double w = p.y() + 0.2 - std::cbrt(p.x() * p.x());
        const double body = 2.2 * w * w + 1.7 * p.x() * p.x() - 0.6;
        return prefactor(p.x(), p.y()) * body;
    };
    f.raw_grad = [prefactor, separable](const Point& p) {
        const double x = p.x(), y = p.y(), s = x + y;
        const double w = y + 0.2 - std::cbrt(x * x);
        const double body = 2.2 * w * w + 1.7 * x * x - 0.6;
        const double pre = prefactor(x, y);
        double dpx, dpy;
        if (separable) {
            dpx = -kPi * std::sin(kPi * x) * std::cos(kPi * y) + 4.0 * s;
            dpy = -kPi * std::cos(kPi * x) * std::sin(kPi * y) + 4.0 * s;
        } else {
            dpx = dpy = -std::sin(s) + 4.0 * s;
        }
        // d/dx cbrt(x^2) = 2/(3 cbrt(x)); the cusp at x = 0 takes value 0.
        const double dwx = (x == 0.0) ? 0.0 : -2.0 / (3.0 * std::cbrt(x));
        const double dbx = 4.4 * w * dwx + 3.4 * x;
        const double dby = 4.4 * w;
        return Point(dpx * body + pre * dbx, dpy * body + pre * dby, 0.0);
    };
    return f;
}

LevelSetField make_disk_min_field(const std::string& name, const std::vector<Disk>& disks) {
    LevelSetField f;
    f.name = name;
    f.dim = 2;
    f.raw = [disks](const Point& p) {
        double m = std::numeric_limits<double>::infinity();
        for (const Disk& d : disks) {
            const double dx = p.x() - d.cx, dy = p.y() - d.cy;
            m = std::min(m, dx * dx + dy * dy - d.r * d.r);
        }
        return std::exp(p.x() + p.y()) * m;
    };
    f.raw_grad = [disks](const Point& p) {
        double m = std::numeric_limits<double>::infinity();
        std::size_t jm = 0;
        for (std::size_t j = 0; j < disks.size(); ++j) {
            const double dx = p.x() - disks[j].cx, dy = p.y() - disks[j].cy;
            const double v = dx * dx + dy * dy - disks[j].r * disks[j].r;
            if (v < m) {
                m = v;
                jm = j;
            }
        }
        const double e = std::exp(p.x() + p.y());
        const double gx = 2.0 * (p.x() - disks[jm].cx);
        const double gy = 2.0 * (p.y() - disks[jm].cy);
        return Point(e * (m + gx), e * (m + gy), 0.0);
    };
    f.sdf = [disks](const Point& p) { return disk_union_sdf(disks, p); };
    f.sdf_grad = [disks](const Point& p) { return disk_union_sdf_grad(disks, p); };
    return f;
}

LevelSetField make_phi10_sphere() {
    LevelSetField f;
    f.name = "phi10_sphere";
    f.dim = 3;
    f.raw = [](const Point& p) {
        const double g = (p.x() - 1.0) * (p.x() - 1.0) + (p.y() - 1.0) * (p.y() - 1.0) +
                         (p.z() + 1.0) * (p.z() + 1.0) + 0.1;
        return g * (p.squaredNorm() - 0.25);
    };
    f.raw_grad = [](const Point& p) {
        const double g = (p.x() - 1.0) * (p.x() - 1.0) + (p.y() - 1.0) * (p.y() - 1.0) +
                         (p.z() + 1.0) * (p.z() + 1.0) + 0.1;
        const double s = p.squaredNorm() - 0.25;
        return Point(s * 2.0 * (p.x() - 1.0) + g * 2.0 * p.x(),
                     s * 2.0 * (p.y() - 1.0) + g * 2.0 * p.y(),
                     s * 2.0 * (p.z() + 1.0) + g * 2.0 * p.z());
    };
    f.sdf = [](const Point& p) { return p.norm() - 0.5; };
    f.sdf_grad = [](const Point& p) { return radial_dir(p); };
    return f;
}

LevelSetField make_phi11_ellipsoids() {
    LevelSetField f;
    f.name = "phi11_ellipsoids";
    f.dim = 3;
    const double cx[2] = {-0.2, 0.2};
    f.raw = [cx](const Point& p) {
        double m = std::numeric_limits<double>::infinity();
        for (const double c : cx) {
            const double dx = p.x() - c;
            m = std::min(m, 10.0 * dx * dx + 5.0 * p.y() * p.y() + p.z() * p.z() - 1.0);
        }
        return m;
    };
    f.raw_grad = [cx](const Point& p) {
        double m = std::numeric_limits<double>::infinity();
        double best = cx[0];
        for (const double c : cx) {
            const double dx = p.x() - c;
            const double v = 10.0 * dx * dx + 5.0 * p.y() * p.y() + p.z() * p.z() - 1.0;
            if (v < m) {
                m = v;
                best = c;
            }
        }
        return Point(20.0 * (p.x() - best), 10.0 * p.y(), 2.0 * p.z());
    };
    return f;
}

LevelSetField build_field(const std::string& name, const std::map<std::string, double>& ov) {
    const auto param = [&ov](const char* key, double fallback) {
        const auto it = ov.find(key);
        return it == ov.end() ? fallback : it->second;
    };
    if (name == "phi1") return make_phi1();
    // The piecewise formula carries the index 2 and the modulated formula the
    // index 3 in the defining equations, so the numeric aliases bind that way.
    if (name == "phi_jump" || name == "phi2") return make_phi_jump(param("r0", -0.25));
    if (name == "phi_osc" || name == "phi3") return make_phi_osc();
    if (name == "phi4_square") return make_phi4_square(param("r", 1.0));
    if (name == "phi5_flower") return make_phi5_flower(param("alpha", 0.5));
    if (name == "phi6_dumbbell") return make_phi6_dumbbell();
    if (name == "phi7_heart") return make_phi7_heart(param("variant", 0.0));
    if (name == "phi8_twocircle")
        return make_disk_min_field(name, {{-0.2, 0.0, 0.3}, {0.2, 0.0, 0.3}});
    if (name == "phi9_threecircle")
        return make_disk_min_field(name,
                                   {{-0.4, 0.3, 0.45}, {0.5, 0.3, 0.3}, {0.3, -0.5, 0.4}});
    if (name == "phi10_sphere") return make_phi10_sphere();
    if (name == "phi11_ellipsoids") return make_phi11_ellipsoids();

    std::ostringstream msg;
    msg << "unknown field '" << name << "'; valid identifiers:";
    for (const auto& n : catalog_names()) msg << ' ' << n;
    throw NotFoundError(msg.str());
}

// Portable uniform double in [0,1) from a 64-bit generator draw.
double uniform01(std::mt19937_64& rng) {
    return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

}  // namespace

// ---------------------------------------------------------------------------
// LevelSetField batched helpers
// ---------------------------------------------------------------------------

Point LevelSetField::to_point(const Eigen::Ref<const Vector>& column) const {
    Point p = Point::Zero();
    for (int d = 0; d < dim; ++d) p[d] = column[d];
    return p;
}

Vector LevelSetField::phi(const Matrix& pts) const {
    Vector out(pts.cols());
    for (Eigen::Index i = 0; i < pts.cols(); ++i) out[i] = phi(to_point(pts.col(i)));
    return out;
}

Matrix LevelSetField::grad_phi(const Matrix& pts) const {
    Matrix out(dim, pts.cols());
    for (Eigen::Index i = 0; i < pts.cols(); ++i)
        out.col(i) = grad_phi(to_point(pts.col(i))).head(dim);
    return out;
}

Vector LevelSetField::sdf_at(const Matrix& pts) const {
    Vector out(pts.cols());
    for (Eigen::Index i = 0; i < pts.cols(); ++i) out[i] = sdf(to_point(pts.col(i)));
    return out;
}

Matrix LevelSetField::sdf_grad_at(const Matrix& pts) const {
    Matrix out(dim, pts.cols());
    for (Eigen::Index i = 0; i < pts.cols(); ++i)
        out.col(i) = sdf_grad(to_point(pts.col(i))).head(dim);
    return out;
}

// ---------------------------------------------------------------------------
// Catalog
// ---------------------------------------------------------------------------

LevelSetField catalog_get(const std::string& name) { return build_field(name, {}); }

LevelSetField catalog_get(const std::string& name,
                          const std::map<std::string, double>& overrides) {
    return build_field(name, overrides);
}

std::vector<std::string> catalog_names() {
    return {"phi1",          "phi_osc",       "phi_jump",       "phi4_square",
            "phi5_flower",   "phi6_dumbbell", "phi7_heart",     "phi8_twocircle",
            "phi9_threecircle", "phi10_sphere", "phi11_ellipsoids"};
}

double exact_sdf_square(const Point& p, double r) {
    if (r <= 0.0) throw std::invalid_argument("exact_sdf_square: side length must be positive");
    const double qx = std::abs(p.x()) - r / 2.0;
    const double qy = std::abs(p.y()) - r / 2.0;
    const double outside = std::hypot(std::max(qx, 0.0), std::max(qy, 0.0));
    const double inside = std::min(std::max(qx, qy), 0.0);
    return outside + inside;
}

double approx_sdf_pointcloud(const LevelSetField& field, const Point& x,
                             const InterfaceSample& cloud) {
    if (cloud.count() == 0)
        throw std::invalid_argument("approx_sdf_pointcloud: empty interface cloud");
    double best = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < cloud.count(); ++i) {
        double d2 = 0.0;
        for (int d = 0; d < field.dim; ++d) {
            const double diff = x[d] - cloud.points(d, i);
            d2 += diff * diff;
        }
        best = std::min(best, d2);
    }
    return sgn(field.phi(x)) * std::sqrt(best);
}

Vector approx_sdf_pointcloud(const LevelSetField& field, const Matrix& pts,
                             const InterfaceSample& cloud) {
    if (cloud.count() == 0)
        throw std::invalid_argument("approx_sdf_pointcloud: empty interface cloud");
    Vector out(pts.cols());
    const Matrix& c = cloud.points;
    for (Eigen::Index i = 0; i < pts.cols(); ++i) {
        const double d2 = (c.colwise() - pts.col(i)).colwise().squaredNorm().minCoeff();
        out[i] = sgn(field.phi(field.to_point(pts.col(i)))) * std::sqrt(d2);
    }
    return out;
}

LevelSetField normalize_phi(const LevelSetField& field, const CollocationSet& probe) {
    const Vector values = field.phi(probe.points);
    const double max_pos = values.maxCoeff();
    const double max_neg = -values.minCoeff();
    if (max_pos <= 0.0 || max_neg <= 0.0)
        throw DegenerateFieldError("normalize_phi: phi is one-signed on the probe ('" +
                                   field.name + "' has no interface there)");
    LevelSetField out = field;
    out.scale = field.scale / std::sqrt(max_pos * max_neg);
    return out;
}

CollocationSet grid_points(int dim, int n_per_side) {
    if (dim != 2 && dim != 3) throw std::invalid_argument("grid_points: dim must be 2 or 3");
    if (n_per_side < 2) throw std::invalid_argument("grid_points: need at least 2 points per side");

    const double h = 2.0 / (n_per_side - 1);
    CollocationSet set;
    set.dim = dim;
    set.provenance = Provenance::Uniform;
    set.spacing = h;
    set.n_per_side = n_per_side;

    const long n = n_per_side;
    const long total = (dim == 2) ? n * n : n * n * n;
    set.points.resize(dim, total);
    long idx = 0;
    if (dim == 2) {
        for (long i = 0; i < n; ++i)
            for (long j = 0; j < n; ++j) {
                set.points(0, idx) = -1.0 + i * h;
                set.points(1, idx) = -1.0 + j * h;
                ++idx;
            }
    } else {
        for (long i = 0; i < n; ++i)
            for (long j = 0; j < n; ++j)
                for (long k = 0; k < n; ++k) {
                    set.points(0, idx) = -1.0 + i * h;
                    set.points(1, idx) = -1.0 + j * h;
                    set.points(2, idx) = -1.0 + k * h;
                    ++idx;
                }
    }
    return set;
}

CollocationSet omega_grid(int dim, int k) {
    if (k < 1 || k > 20) throw std::invalid_argument("omega_grid: exponent out of range");
    return grid_points(dim, 1 << k);
}

CollocationSet random_points(int dim, long count, std::uint64_t seed) {
    if (dim != 2 && dim != 3) throw std::invalid_argument("random_points: dim must be 2 or 3");
    if (count < 1) throw std::invalid_argument("random_points: count must be positive");

    CollocationSet set;
    set.dim = dim;
    set.provenance = Provenance::Random;
    set.seed = seed;
    set.points.resize(dim, count);
    std::mt19937_64 rng(seed);
    for (long i = 0; i < count; ++i)
        for (int d = 0; d < dim; ++d) set.points(d, i) = 2.0 * uniform01(rng) - 1.0;
    return set;
}

namespace {

// Bisect phi along the segment a->b (phi changes sign between them) and
// return the parameter of the endpoint with the smaller |phi|, which also
// handles fields that jump across the interface.
double bisect_edge(const LevelSetField& field, const Point& a, const Point& b) {
    double ta = 0.0, tb = 1.0;
    const double fa = field.phi(a);
    const Point d = b - a;
    for (int it = 0; it < 60; ++it) {
        const double tm = 0.5 * (ta + tb);
        const double fm = field.phi(a + tm * d);
        if (fm == 0.0) return tm;
        if ((fm > 0.0) == (fa > 0.0))
            ta = tm;
        else
            tb = tm;
    }
    const double va = std::abs(field.phi(a + ta * d));
    const double vb = std::abs(field.phi(a + tb * d));
    return va <= vb ? ta : tb;
}

}  // namespace

InterfaceSample sample_interface(const LevelSetField& field, long target_count) {
    if (target_count < 1)
        throw std::invalid_argument("sample_interface: target_count must be positive");

    const int dim = field.dim;
    int n = (dim == 2) ? 1024 : 128;
    const int n_cap = (dim == 2) ? 4096 : 256;

    std::vector<Point> found;
    while (true) {
        found.clear();
        const double h = 2.0 / (n - 1);
        const auto node = [&](long i, long j, long k) {
            return Point(-1.0 + i * h, -1.0 + j * h, dim == 3 ? -1.0 + k * h : 0.0);
        };
        const long kmax = (dim == 3) ? n : 1;

        // Cache one slab of phi values at a time to bound memory in 3D.
        Matrix slab_a(n, kmax), slab_b(n, kmax);
        const auto fill_slab = [&](Matrix& slab, long i) {
            for (long j = 0; j < n; ++j)
                for (long k = 0; k < kmax; ++k)
                    slab(j, dim == 3 ? k : 0) = field.phi(node(i, j, k));
        };

        fill_slab(slab_a, 0);
        for (long i = 0; i < n; ++i) {
            if (i + 1 < n) fill_slab(slab_b, i + 1);
            for (long j = 0; j < n; ++j) {
                for (long k = 0; k < kmax; ++k) {
                    const double f0 = slab_a(j, dim == 3 ? k : 0);
                    const Point p0 = node(i, j, k);
                    if (f0 == 0.0) {
                        found.push_back(p0);
                        continue;
                    }
                    // Edges leaving this node in +x, +y, +z.
                    const auto consider = [&](double f1, const Point& p1) {
                        if (f1 == 0.0 || (f1 > 0.0) == (f0 > 0.0)) return;
                        const double t = bisect_edge(field, p0, p1);
                        found.push_back(p0 + t * (p1 - p0));
                    };
                    if (i + 1 < n) consider(slab_b(j, dim == 3 ? k : 0), node(i + 1, j, k));
                    if (j + 1 < n) consider(slab_a(j + 1, dim == 3 ? k : 0), node(i, j + 1, k));
                    if (dim == 3 && k + 1 < n) consider(slab_a(j, k + 1), node(i, j, k + 1));
                }
            }
            std::swap(slab_a, slab_b);
        }

        if (static_cast<long>(found.size()) >= (target_count + 1) / 2 || n >= n_cap) break;
        n *= 2;
    }

    if (found.empty())
        throw DegenerateFieldError("sample_interface: no zero crossing found for '" +
                                   field.name + "'");

    // Thin out dense extractions to roughly the requested count.
    if (static_cast<long>(found.size()) > 2 * target_count) {
        const double stride = static_cast<double>(found.size()) / target_count;
        std::vector<Point> kept;
        kept.reserve(target_count + 1);
        for (double pos = 0.0; pos < static_cast<double>(found.size()); pos += stride)
            kept.push_back(found[static_cast<std::size_t>(pos)]);
        found = std::move(kept);
    }

    InterfaceSample sample;
    sample.dim = dim;
    sample.points.resize(dim, static_cast<long>(found.size()));
    sample.normals.resize(dim, static_cast<long>(found.size()));
    for (std::size_t i = 0; i < found.size(); ++i) {
        sample.points.col(static_cast<long>(i)) = found[i].head(dim);
        Point g = field.has_exact_sdf() ? field.sdf_grad(found[i]) : field.grad_phi(found[i]);
        const double len = g.head(dim).norm();
        sample.normals.col(static_cast<long>(i)) =
            (len > 0.0) ? Matrix(g.head(dim) / len) : Matrix(Matrix::Zero(dim, 1));
    }
    return sample;
}

void write_points_csv(const std::string& path, const CollocationSet& pts,
                      const Vector& values) {
    if (values.size() != pts.count())
        throw std::invalid_argument("write_points_csv: value count does not match point count");
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_points_csv: cannot open " + path);
    out << (pts.dim == 2 ? "x,y,phi\n" : "x,y,z,phi\n");
    out.precision(17);
    for (Eigen::Index i = 0; i < pts.count(); ++i) {
        for (int d = 0; d < pts.dim; ++d) out << pts.points(d, i) << ',';
        out << values[i] << '\n';
    }
}

}  // namespace resdf::fields
