#include "resdf/tape.hpp"

#include <cmath>
#include <fstream>
#include <utility>

namespace resdf::ad {

namespace {

// Assign on first touch, accumulate afterwards. Keeping this a template lets
// Eigen evaluate the expression straight into the adjoint buffer.
template <class Expr>
void accum_into(Matrix& dst, bool& set_flag, const Expr& e) {
    if (!set_flag) {
        dst = e;
        set_flag = true;
    } else {
        dst += e;
    }
}

}  // namespace

Tape::Tape(int nlanes) : nlanes_(nlanes) {
    if (nlanes < 0 || nlanes > 3) throw std::invalid_argument("Tape: lane count out of range");
}

Tape::Node& Tape::at(Id id) { return nodes_[static_cast<std::size_t>(id)]; }
const Tape::Node& Tape::at(Id id) const { return nodes_[static_cast<std::size_t>(id)]; }

Tape::Id Tape::push(Node n) {
    for (const Id i : n.in)
        if (i < 0 || i >= size()) throw std::invalid_argument("Tape: bad input node id");
    if (n.lanes) {
        n.tan.resize(static_cast<std::size_t>(nlanes_));
        n.adj_tan.resize(static_cast<std::size_t>(nlanes_));
        n.adj_tan_set.assign(static_cast<std::size_t>(nlanes_), 0);
    }
    nodes_.push_back(std::move(n));
    return size() - 1;
}

Tape::Id Tape::input(int rows, int cols, bool with_lanes, std::string label) {
    Node n;
    n.op = Op::Input;
    n.lanes = with_lanes && nlanes_ > 0;
    n.val.setZero(rows, cols);
    n.label = std::move(label);
    const Id id = push(std::move(n));
    if (at(id).lanes)
        for (int l = 0; l < nlanes_; ++l) at(id).tan[static_cast<std::size_t>(l)].setZero(rows, cols);
    return id;
}

Tape::Id Tape::parameter(int rows, int cols, std::string label) {
    Node n;
    n.op = Op::Param;
    n.val.setZero(rows, cols);
    n.label = std::move(label);
    return push(std::move(n));
}

void Tape::set_value(Id id, const Matrix& v) { at(id).val = v; }

void Tape::set_tangent(Id id, int lane, const Matrix& t) {
    Node& n = at(id);
    if (!n.lanes) throw std::logic_error("Tape: node '" + n.label + "' has no tangent lanes");
    n.tan[static_cast<std::size_t>(lane)] = t;
}

Tape::Id Tape::linear(Id w, Id x, Id b, std::string label) {
    Node n;
    n.op = Op::Linear;
    n.in = {w, x, b};
    n.lanes = at(x).lanes;
    if (at(w).val.cols() != at(x).val.rows() || at(b).val.rows() != at(w).val.rows() ||
        at(b).val.cols() != 1)
        throw std::invalid_argument("Tape::linear: shape mismatch");
    n.label = std::move(label);
    return push(std::move(n));
}

Tape::Id Tape::leaky_relu(Id a) {
    Node n;
    n.op = Op::LeakyRelu;
    n.in = {a};
    n.lanes = at(a).lanes;
    n.label = "leaky_relu";
    return push(std::move(n));
}

Tape::Id Tape::tanh_op(Id a) {
    Node n;
    n.op = Op::Tanh;
    n.in = {a};
    n.lanes = at(a).lanes;
    n.label = "tanh";
    return push(std::move(n));
}

Tape::Id Tape::abs_smooth(Id a, double alpha, double x0, double q) {
    Node n;
    n.op = Op::AbsSmooth;
    n.in = {a};
    n.lanes = at(a).lanes;
    n.s0 = alpha;
    n.s1 = x0;
    n.s2 = q;
    n.label = "abs_smooth";
    return push(std::move(n));
}

Tape::Id Tape::sqrt_op(Id a) {
    Node n;
    n.op = Op::Sqrt;
    n.in = {a};
    n.lanes = at(a).lanes;
    n.label = "sqrt";
    return push(std::move(n));
}

Tape::Id Tape::add(Id a, Id b) {
    Node n;
    n.op = Op::Add;
    n.in = {a, b};
    n.lanes = at(a).lanes || at(b).lanes;
    n.label = "add";
    return push(std::move(n));
}

Tape::Id Tape::sub(Id a, Id b) {
    Node n;
    n.op = Op::Sub;
    n.in = {a, b};
    n.lanes = at(a).lanes || at(b).lanes;
    n.label = "sub";
    return push(std::move(n));
}

Tape::Id Tape::mul(Id a, Id b) {
    Node n;
    n.op = Op::Mul;
    n.in = {a, b};
    n.lanes = at(a).lanes || at(b).lanes;
    n.label = "mul";
    return push(std::move(n));
}

Tape::Id Tape::scale(Id a, double s) {
    Node n;
    n.op = Op::Scale;
    n.in = {a};
    n.lanes = at(a).lanes;
    n.s0 = s;
    n.label = "scale";
    return push(std::move(n));
}

Tape::Id Tape::add_scalar(Id a, double s) {
    Node n;
    n.op = Op::AddScalar;
    n.in = {a};
    n.lanes = at(a).lanes;
    n.s0 = s;
    n.label = "add_scalar";
    return push(std::move(n));
}

Tape::Id Tape::rowwise_mul(Id a, Id s) {
    if (at(s).val.rows() != 1) throw std::invalid_argument("Tape::rowwise_mul: scaler must be 1 x B");
    Node n;
    n.op = Op::RowwiseMul;
    n.in = {a, s};
    n.lanes = at(a).lanes || at(s).lanes;
    n.label = "rowwise_mul";
    return push(std::move(n));
}

Tape::Id Tape::rowwise_div(Id a, Id s) {
    if (at(a).lanes || at(s).lanes)
        throw std::logic_error("Tape::rowwise_div: lane-carrying inputs are not supported");
    if (at(s).val.rows() != 1) throw std::invalid_argument("Tape::rowwise_div: scaler must be 1 x B");
    Node n;
    n.op = Op::RowwiseDiv;
    n.in = {a, s};
    n.label = "rowwise_div";
    return push(std::move(n));
}

Tape::Id Tape::row(Id a, int r) {
    Node n;
    n.op = Op::Row;
    n.in = {a};
    n.lanes = at(a).lanes;
    n.i0 = r;
    n.label = "row";
    return push(std::move(n));
}

Tape::Id Tape::rows(Id a, int r0, int nr, bool keep_lanes) {
    Node n;
    n.op = Op::Rows;
    n.in = {a};
    n.lanes = keep_lanes && at(a).lanes;
    n.i0 = r0;
    n.i1 = nr;
    n.label = "rows";
    return push(std::move(n));
}

Tape::Id Tape::vcat(const std::vector<Id>& parts) {
    if (parts.empty()) throw std::invalid_argument("Tape::vcat: no inputs");
    for (const Id p : parts)
        if (at(p).lanes) throw std::logic_error("Tape::vcat: lane-carrying inputs are not supported");
    Node n;
    n.op = Op::Vcat;
    n.in = parts;
    n.label = "vcat";
    return push(std::move(n));
}

Tape::Id Tape::colwise_sumsq(Id a) {
    if (at(a).lanes) throw std::logic_error("Tape::colwise_sumsq: lane-carrying input not supported");
    Node n;
    n.op = Op::ColwiseSumSq;
    n.in = {a};
    n.label = "colwise_sumsq";
    return push(std::move(n));
}

Tape::Id Tape::mean_all(Id a) {
    if (at(a).val.rows() != 1) throw std::invalid_argument("Tape::mean_all: input must be 1 x B");
    Node n;
    n.op = Op::MeanAll;
    n.in = {a};
    n.label = "mean";
    return push(std::move(n));
}

Tape::Id Tape::tangent_extract(Id a, int lane) {
    if (!at(a).lanes) throw std::logic_error("Tape::tangent_extract: input carries no lanes");
    if (lane < 0 || lane >= nlanes_) throw std::invalid_argument("Tape::tangent_extract: bad lane");
    Node n;
    n.op = Op::TangentExtract;
    n.in = {a};
    n.i0 = lane;
    n.label = "tangent_extract";
    return push(std::move(n));
}

Tape::Id Tape::stop_gradient(Id a, std::function<Matrix(const Matrix&)> fn, int out_rows,
                             std::string label) {
    Node n;
    n.op = Op::StopGrad;
    n.in = {a};
    n.i0 = out_rows;
    n.fn = std::move(fn);
    n.label = std::move(label);
    return push(std::move(n));
}

Tape::Id Tape::external_scalar(Id a, std::function<Vector(const Matrix&)> f,
                               std::function<Matrix(const Matrix&)> gf, std::string label) {
    if (at(a).lanes) throw std::logic_error("Tape::external_scalar: lane-carrying input not supported");
    Node n;
    n.op = Op::ExternalScalar;
    n.in = {a};
    n.f_scalar = std::move(f);
    n.f_grad = std::move(gf);
    n.label = std::move(label);
    return push(std::move(n));
}

// ---------------------------------------------------------------------------
// Forward evaluation
// ---------------------------------------------------------------------------

void Tape::eval_node(Node& n) {
    const auto in0 = [&]() -> Node& { return at(n.in[0]); };
    const auto resize_like = [&](Eigen::Index r, Eigen::Index c) {
        if (n.val.rows() != r || n.val.cols() != c) n.val.resize(r, c);
        if (n.lanes)
            for (auto& t : n.tan)
                if (t.rows() != r || t.cols() != c) t.resize(r, c);
    };

    switch (n.op) {
        case Op::Input:
        case Op::Param:
            return;

        case Op::Linear: {
            const Node& w = at(n.in[0]);
            const Node& x = at(n.in[1]);
            const Node& b = at(n.in[2]);
            resize_like(w.val.rows(), x.val.cols());
            n.val.noalias() = w.val * x.val;
            n.val.colwise() += b.val.col(0);
            if (n.lanes)
                for (int l = 0; l < nlanes_; ++l)
                    n.tan[static_cast<std::size_t>(l)].noalias() =
                        w.val * x.tan[static_cast<std::size_t>(l)];
            return;
        }

        case Op::LeakyRelu: {
            const Node& a = in0();
            resize_like(a.val.rows(), a.val.cols());
            n.val = a.val.unaryExpr([](double v) { return v > 0.0 ? v : 0.01 * v; });
            if (n.lanes) {
                const Matrix fp = a.val.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.01; });
                for (int l = 0; l < nlanes_; ++l)
                    n.tan[static_cast<std::size_t>(l)] =
                        fp.cwiseProduct(a.tan[static_cast<std::size_t>(l)]);
            }
            return;
        }

        case Op::Tanh: {
            const Node& a = in0();
            resize_like(a.val.rows(), a.val.cols());
            n.val = a.val.array().tanh();
            if (n.lanes) {
                const Matrix fp = 1.0 - n.val.array().square();
                for (int l = 0; l < nlanes_; ++l)
                    n.tan[static_cast<std::size_t>(l)] =
                        fp.cwiseProduct(a.tan[static_cast<std::size_t>(l)]);
            }
            return;
        }

        case Op::AbsSmooth: {
            const Node& a = in0();
            const double alpha = n.s0, x0 = n.s1, q = n.s2;
            resize_like(a.val.rows(), a.val.cols());
            n.val = a.val.unaryExpr([alpha, x0, q](double v) {
                return std::abs(v) <= x0 ? alpha * v * v : std::abs(v) + q;
            });
            if (n.lanes) {
                const Matrix fp = a.val.unaryExpr([alpha, x0](double v) {
                    return std::abs(v) <= x0 ? 2.0 * alpha * v : (v > 0.0 ? 1.0 : -1.0);
                });
                for (int l = 0; l < nlanes_; ++l)
                    n.tan[static_cast<std::size_t>(l)] =
                        fp.cwiseProduct(a.tan[static_cast<std::size_t>(l)]);
            }
            return;
        }

        case Op::Sqrt: {
            const Node& a = in0();
            resize_like(a.val.rows(), a.val.cols());
            n.val = a.val.cwiseMax(0.0).cwiseSqrt();
            if (n.lanes) {
                const Matrix fp = a.val.unaryExpr(
                    [](double v) { return v > 0.0 ? 0.5 / std::sqrt(v) : 0.0; });
                for (int l = 0; l < nlanes_; ++l)
                    n.tan[static_cast<std::size_t>(l)] =
                        fp.cwiseProduct(a.tan[static_cast<std::size_t>(l)]);
            }
            return;
        }

        case Op::Add:
        case Op::Sub: {
            const Node& a = at(n.in[0]);
            const Node& b = at(n.in[1]);
            const double sign = (n.op == Op::Add) ? 1.0 : -1.0;
            resize_like(a.val.rows(), a.val.cols());
            n.val = a.val + sign * b.val;
            if (n.lanes)
                for (int l = 0; l < nlanes_; ++l) {
                    const auto sl = static_cast<std::size_t>(l);
                    Matrix& t = n.tan[sl];
                    if (a.lanes && b.lanes)
                        t = a.tan[sl] + sign * b.tan[sl];
                    else if (a.lanes)
                        t = a.tan[sl];
                    else
                        t = sign * b.tan[sl];
                }
            return;
        }

        case Op::Mul: {
            const Node& a = at(n.in[0]);
            const Node& b = at(n.in[1]);
            resize_like(a.val.rows(), a.val.cols());
            n.val = a.val.cwiseProduct(b.val);
            if (n.lanes)
                for (int l = 0; l < nlanes_; ++l) {
                    const auto sl = static_cast<std::size_t>(l);
                    Matrix& t = n.tan[sl];
                    if (a.lanes && b.lanes)
                        t = a.tan[sl].cwiseProduct(b.val) + a.val.cwiseProduct(b.tan[sl]);
                    else if (a.lanes)
                        t = a.tan[sl].cwiseProduct(b.val);
                    else
                        t = a.val.cwiseProduct(b.tan[sl]);
                }
            return;
        }

        case Op::Scale: {
            const Node& a = in0();
            resize_like(a.val.rows(), a.val.cols());
            n.val = n.s0 * a.val;
            if (n.lanes)
                for (int l = 0; l < nlanes_; ++l)
                    n.tan[static_cast<std::size_t>(l)] = n.s0 * a.tan[static_cast<std::size_t>(l)];
            return;
        }

        case Op::AddScalar: {
            const Node& a = in0();
            resize_like(a.val.rows(), a.val.cols());
            n.val = a.val.array() + n.s0;
            if (n.lanes)
                for (int l = 0; l < nlanes_; ++l)
                    n.tan[static_cast<std::size_t>(l)] = a.tan[static_cast<std::size_t>(l)];
            return;
        }

        case Op::RowwiseMul: {
            const Node& a = at(n.in[0]);
            const Node& s = at(n.in[1]);
            resize_like(a.val.rows(), a.val.cols());
            for (Eigen::Index r = 0; r < a.val.rows(); ++r)
                n.val.row(r) = a.val.row(r).cwiseProduct(s.val.row(0));
            if (n.lanes)
                for (int l = 0; l < nlanes_; ++l) {
                    const auto sl = static_cast<std::size_t>(l);
                    Matrix& t = n.tan[sl];
                    for (Eigen::Index r = 0; r < a.val.rows(); ++r) {
                        if (a.lanes && s.lanes)
                            t.row(r) = a.tan[sl].row(r).cwiseProduct(s.val.row(0)) +
                                       a.val.row(r).cwiseProduct(s.tan[sl].row(0));
                        else if (a.lanes)
                            t.row(r) = a.tan[sl].row(r).cwiseProduct(s.val.row(0));
                        else
                            t.row(r) = a.val.row(r).cwiseProduct(s.tan[sl].row(0));
                    }
                }
            return;
        }

        case Op::RowwiseDiv: {
            const Node& a = at(n.in[0]);
            const Node& s = at(n.in[1]);
            resize_like(a.val.rows(), a.val.cols());
            for (Eigen::Index r = 0; r < a.val.rows(); ++r)
                n.val.row(r) = a.val.row(r).cwiseQuotient(s.val.row(0));
            return;
        }

        case Op::Row: {
            const Node& a = in0();
            resize_like(1, a.val.cols());
            n.val = a.val.row(n.i0);
            if (n.lanes)
                for (int l = 0; l < nlanes_; ++l)
                    n.tan[static_cast<std::size_t>(l)] = a.tan[static_cast<std::size_t>(l)].row(n.i0);
            return;
        }

        case Op::Rows: {
            const Node& a = in0();
            resize_like(n.i1, a.val.cols());
            n.val = a.val.middleRows(n.i0, n.i1);
            if (n.lanes)
                for (int l = 0; l < nlanes_; ++l)
                    n.tan[static_cast<std::size_t>(l)] =
                        a.tan[static_cast<std::size_t>(l)].middleRows(n.i0, n.i1);
            return;
        }

        case Op::Vcat: {
            Eigen::Index total = 0;
            for (const Id p : n.in) total += at(p).val.rows();
            resize_like(total, at(n.in[0]).val.cols());
            Eigen::Index r = 0;
            for (const Id p : n.in) {
                n.val.middleRows(r, at(p).val.rows()) = at(p).val;
                r += at(p).val.rows();
            }
            return;
        }

        case Op::ColwiseSumSq: {
            const Node& a = in0();
            resize_like(1, a.val.cols());
            n.val = a.val.colwise().squaredNorm();
            return;
        }

        case Op::MeanAll: {
            const Node& a = in0();
            resize_like(1, 1);
            n.val(0, 0) = a.val.mean();
            return;
        }

        case Op::TangentExtract: {
            const Node& a = in0();
            resize_like(1, a.val.cols());
            n.val = a.tan[static_cast<std::size_t>(n.i0)];
            return;
        }

        case Op::StopGrad: {
            const Node& a = in0();
            n.val = n.fn(a.val);
            return;
        }

        case Op::ExternalScalar: {
            const Node& a = in0();
            resize_like(1, a.val.cols());
            n.val = n.f_scalar(a.val).transpose();
            return;
        }
    }
}

void Tape::forward() {
    for (Node& n : nodes_) eval_node(n);
}

// ---------------------------------------------------------------------------
// Reverse sweep
// ---------------------------------------------------------------------------

Matrix& Tape::adj_buffer(Node& n) {
    if (!n.adj_set) {
        n.adj.resize(n.val.rows(), n.val.cols());
        n.adj.setZero();
        n.adj_set = true;
    }
    return n.adj;
}

Matrix& Tape::adj_tan_buffer(Node& n, int lane) {
    const auto sl = static_cast<std::size_t>(lane);
    if (!n.adj_tan_set[sl]) {
        n.adj_tan[sl].resize(n.val.rows(), n.val.cols());
        n.adj_tan[sl].setZero();
        n.adj_tan_set[sl] = 1;
    }
    return n.adj_tan[sl];
}

void Tape::accum(Node& dst, const Matrix& delta) {
    bool flag = dst.adj_set;
    accum_into(dst.adj, flag, delta);
    dst.adj_set = flag;
}

void Tape::accum_tan(Node& dst, int lane, const Matrix& delta) {
    const auto sl = static_cast<std::size_t>(lane);
    bool flag = dst.adj_tan_set[sl] != 0;
    accum_into(dst.adj_tan[sl], flag, delta);
    dst.adj_tan_set[sl] = flag ? 1 : 0;
}

void Tape::backprop_node(Node& n) {
    const bool has_val_adj = n.adj_set;
    bool has_tan_adj = false;
    if (n.lanes)
        for (const auto f : n.adj_tan_set) has_tan_adj = has_tan_adj || (f != 0);
    if (!has_val_adj && !has_tan_adj) return;

    // Adjoint of lane l of the output, or nullptr when never written.
    const auto tan_adj = [&](int l) -> const Matrix* {
        const auto sl = static_cast<std::size_t>(l);
        if (!n.lanes || !n.adj_tan_set[sl]) return nullptr;
        return &n.adj_tan[sl];
    };

    switch (n.op) {
        case Op::Input:
        case Op::Param:
        case Op::StopGrad:
            return;

        case Op::Linear: {
            Node& w = at(n.in[0]);
            Node& x = at(n.in[1]);
            Node& b = at(n.in[2]);
            if (has_val_adj) {
                accum_into(x.adj, x.adj_set, (w.val.transpose() * n.adj).eval());
                accum_into(w.adj, w.adj_set, (n.adj * x.val.transpose()).eval());
                accum_into(b.adj, b.adj_set, n.adj.rowwise().sum().eval());
            }
            for (int l = 0; l < nlanes_; ++l) {
                const Matrix* ct = tan_adj(l);
                if (!ct) continue;
                const auto sl = static_cast<std::size_t>(l);
                accum_into(w.adj, w.adj_set, ((*ct) * x.tan[sl].transpose()).eval());
                if (x.lanes) {
                    bool flag = x.adj_tan_set[sl] != 0;
                    accum_into(x.adj_tan[sl], flag, (w.val.transpose() * (*ct)).eval());
                    x.adj_tan_set[sl] = 1;
                }
            }
            return;
        }

        case Op::LeakyRelu:
        case Op::Tanh:
        case Op::AbsSmooth:
        case Op::Sqrt: {
            Node& a = at(n.in[0]);
            Matrix fp, fpp;
            switch (n.op) {
                case Op::LeakyRelu:
                    fp = a.val.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.01; });
                    break;
                case Op::Tanh:
                    fp = 1.0 - n.val.array().square();
                    if (has_tan_adj) fpp = (-2.0 * n.val.array() * fp.array()).matrix();
                    break;
                case Op::AbsSmooth: {
                    const double alpha = n.s0, x0 = n.s1;
                    fp = a.val.unaryExpr([alpha, x0](double v) {
                        return std::abs(v) <= x0 ? 2.0 * alpha * v : (v > 0.0 ? 1.0 : -1.0);
                    });
                    if (has_tan_adj)
                        fpp = a.val.unaryExpr(
                            [alpha, x0](double v) { return std::abs(v) <= x0 ? 2.0 * alpha : 0.0; });
                    break;
                }
                case Op::Sqrt:
                    fp = a.val.unaryExpr([](double v) { return v > 0.0 ? 0.5 / std::sqrt(v) : 0.0; });
                    if (has_tan_adj)
                        fpp = a.val.unaryExpr([](double v) {
                            return v > 0.0 ? -0.25 / (v * std::sqrt(v)) : 0.0;
                        });
                    break;
                default:
                    break;
            }
            if (has_val_adj) accum_into(a.adj, a.adj_set, n.adj.cwiseProduct(fp).eval());
            for (int l = 0; l < nlanes_; ++l) {
                const Matrix* ct = tan_adj(l);
                if (!ct) continue;
                const auto sl = static_cast<std::size_t>(l);
                if (fpp.size() > 0)
                    accum_into(a.adj, a.adj_set,
                               ct->cwiseProduct(fpp).cwiseProduct(a.tan[sl]).eval());
                if (a.lanes) {
                    bool flag = a.adj_tan_set[sl] != 0;
                    accum_into(a.adj_tan[sl], flag, ct->cwiseProduct(fp).eval());
                    a.adj_tan_set[sl] = 1;
                }
            }
            return;
        }

        case Op::Add:
        case Op::Sub: {
            Node& a = at(n.in[0]);
            Node& b = at(n.in[1]);
            const double sign = (n.op == Op::Add) ? 1.0 : -1.0;
            if (has_val_adj) {
                accum_into(a.adj, a.adj_set, n.adj);
                accum_into(b.adj, b.adj_set, (sign * n.adj).eval());
            }
            for (int l = 0; l < nlanes_; ++l) {
                const Matrix* ct = tan_adj(l);
                if (!ct) continue;
                const auto sl = static_cast<std::size_t>(l);
                if (a.lanes) {
                    bool flag = a.adj_tan_set[sl] != 0;
                    accum_into(a.adj_tan[sl], flag, *ct);
                    a.adj_tan_set[sl] = 1;
                }
                if (b.lanes) {
                    bool flag = b.adj_tan_set[sl] != 0;
                    accum_into(b.adj_tan[sl], flag, (sign * (*ct)).eval());
                    b.adj_tan_set[sl] = 1;
                }
            }
            return;
        }

        case Op::Mul: {
            Node& a = at(n.in[0]);
            Node& b = at(n.in[1]);
            if (has_val_adj) {
                accum_into(a.adj, a.adj_set, n.adj.cwiseProduct(b.val).eval());
                accum_into(b.adj, b.adj_set, n.adj.cwiseProduct(a.val).eval());
            }
            for (int l = 0; l < nlanes_; ++l) {
                const Matrix* ct = tan_adj(l);
                if (!ct) continue;
                const auto sl = static_cast<std::size_t>(l);
                if (b.lanes) accum_into(a.adj, a.adj_set, ct->cwiseProduct(b.tan[sl]).eval());
                if (a.lanes) accum_into(b.adj, b.adj_set, ct->cwiseProduct(a.tan[sl]).eval());
                if (a.lanes) {
                    bool flag = a.adj_tan_set[sl] != 0;
                    accum_into(a.adj_tan[sl], flag, ct->cwiseProduct(b.val).eval());
                    a.adj_tan_set[sl] = 1;
                }
                if (b.lanes) {
                    bool flag = b.adj_tan_set[sl] != 0;
                    accum_into(b.adj_tan[sl], flag, ct->cwiseProduct(a.val).eval());
                    b.adj_tan_set[sl] = 1;
                }
            }
            return;
        }

        case Op::Scale: {
            Node& a = at(n.in[0]);
            if (has_val_adj) accum_into(a.adj, a.adj_set, (n.s0 * n.adj).eval());
            for (int l = 0; l < nlanes_; ++l) {
                const Matrix* ct = tan_adj(l);
                if (!ct || !a.lanes) continue;
                const auto sl = static_cast<std::size_t>(l);
                bool flag = a.adj_tan_set[sl] != 0;
                accum_into(a.adj_tan[sl], flag, (n.s0 * (*ct)).eval());
                a.adj_tan_set[sl] = 1;
            }
            return;
        }

        case Op::AddScalar: {
            Node& a = at(n.in[0]);
            if (has_val_adj) accum_into(a.adj, a.adj_set, n.adj);
            for (int l = 0; l < nlanes_; ++l) {
                const Matrix* ct = tan_adj(l);
                if (!ct || !a.lanes) continue;
                const auto sl = static_cast<std::size_t>(l);
                bool flag = a.adj_tan_set[sl] != 0;
                accum_into(a.adj_tan[sl], flag, *ct);
                a.adj_tan_set[sl] = 1;
            }
            return;
        }

        case Op::RowwiseMul: {
            Node& a = at(n.in[0]);
            Node& s = at(n.in[1]);
            const Eigen::Index nr = a.val.rows();
            const auto rowwise_scaled = [&](const Matrix& m, const Matrix& r1xb) {
                Matrix out(m.rows(), m.cols());
                for (Eigen::Index r = 0; r < m.rows(); ++r)
                    out.row(r) = m.row(r).cwiseProduct(r1xb.row(0));
                return out;
            };
            if (has_val_adj) {
                accum_into(a.adj, a.adj_set, rowwise_scaled(n.adj, s.val));
                accum_into(s.adj, s.adj_set,
                           n.adj.cwiseProduct(a.val).colwise().sum().eval());
            }
            for (int l = 0; l < nlanes_; ++l) {
                const Matrix* ct = tan_adj(l);
                if (!ct) continue;
                const auto sl = static_cast<std::size_t>(l);
                if (s.lanes) accum_into(a.adj, a.adj_set, rowwise_scaled(*ct, s.tan[sl]));
                if (a.lanes)
                    accum_into(s.adj, s.adj_set,
                               ct->cwiseProduct(a.tan[sl]).colwise().sum().eval());
                if (a.lanes) {
                    bool flag = a.adj_tan_set[sl] != 0;
                    accum_into(a.adj_tan[sl], flag, rowwise_scaled(*ct, s.val));
                    a.adj_tan_set[sl] = 1;
                }
                if (s.lanes) {
                    bool flag = s.adj_tan_set[sl] != 0;
                    accum_into(s.adj_tan[sl], flag,
                               ct->cwiseProduct(a.val).colwise().sum().eval());
                    s.adj_tan_set[sl] = 1;
                }
            }
            (void)nr;
            return;
        }

        case Op::RowwiseDiv: {
            Node& a = at(n.in[0]);
            Node& s = at(n.in[1]);
            if (!has_val_adj) return;
            Matrix da(n.adj.rows(), n.adj.cols());
            for (Eigen::Index r = 0; r < n.adj.rows(); ++r)
                da.row(r) = n.adj.row(r).cwiseQuotient(s.val.row(0));
            accum_into(a.adj, a.adj_set, da);
            accum_into(
                s.adj, s.adj_set,
                (-(n.adj.cwiseProduct(n.val).colwise().sum().cwiseQuotient(s.val.row(0)))).eval());
            return;
        }

        case Op::Row: {
            Node& a = at(n.in[0]);
            if (has_val_adj) {
                adj_buffer(a).row(n.i0) += n.adj;
            }
            for (int l = 0; l < nlanes_; ++l) {
                const Matrix* ct = tan_adj(l);
                if (!ct || !a.lanes) continue;
                adj_tan_buffer(a, l).row(n.i0) += *ct;
            }
            return;
        }

        case Op::Rows: {
            Node& a = at(n.in[0]);
            if (has_val_adj) adj_buffer(a).middleRows(n.i0, n.i1) += n.adj;
            for (int l = 0; l < nlanes_; ++l) {
                const Matrix* ct = tan_adj(l);
                if (!ct || !a.lanes) continue;
                adj_tan_buffer(a, l).middleRows(n.i0, n.i1) += *ct;
            }
            return;
        }

        case Op::Vcat: {
            if (!has_val_adj) return;
            Eigen::Index r = 0;
            for (const Id p : n.in) {
                Node& part = at(p);
                accum_into(part.adj, part.adj_set,
                           n.adj.middleRows(r, part.val.rows()).eval());
                r += part.val.rows();
            }
            return;
        }

        case Op::ColwiseSumSq: {
            Node& a = at(n.in[0]);
            if (!has_val_adj) return;
            Matrix da(a.val.rows(), a.val.cols());
            for (Eigen::Index r = 0; r < a.val.rows(); ++r)
                da.row(r) = 2.0 * a.val.row(r).cwiseProduct(n.adj.row(0));
            accum_into(a.adj, a.adj_set, da);
            return;
        }

        case Op::MeanAll: {
            Node& a = at(n.in[0]);
            if (!has_val_adj) return;
            const double g = n.adj(0, 0) / static_cast<double>(a.val.cols());
            accum_into(a.adj, a.adj_set,
                       Matrix(Matrix::Constant(a.val.rows(), a.val.cols(), g)));
            return;
        }

        case Op::TangentExtract: {
            Node& a = at(n.in[0]);
            if (!has_val_adj) return;
            bool flag = a.adj_tan_set[static_cast<std::size_t>(n.i0)] != 0;
            accum_into(a.adj_tan[static_cast<std::size_t>(n.i0)], flag, n.adj);
            a.adj_tan_set[static_cast<std::size_t>(n.i0)] = 1;
            return;
        }

        case Op::ExternalScalar: {
            Node& a = at(n.in[0]);
            if (!has_val_adj) return;
            const Matrix g = n.f_grad(a.val);  // dim x B
            Matrix da(a.val.rows(), a.val.cols());
            for (Eigen::Index r = 0; r < a.val.rows(); ++r)
                da.row(r) = g.row(r).cwiseProduct(n.adj.row(0));
            accum_into(a.adj, a.adj_set, da);
            return;
        }
    }
}

void Tape::backward(Id loss) {
    Node& ln = at(loss);
    if (ln.val.rows() != 1 || ln.val.cols() != 1)
        throw std::invalid_argument("Tape::backward: loss node must be 1 x 1");
    for (Node& n : nodes_) {
        n.adj_set = false;
        if (n.lanes) std::fill(n.adj_tan_set.begin(), n.adj_tan_set.end(), 0);
    }
    ln.adj = Matrix::Ones(1, 1);
    ln.adj_set = true;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) backprop_node(*it);
    // Parameters that received no adjoint have zero gradient.
    for (Node& n : nodes_)
        if (n.op == Op::Param && !n.adj_set) {
            n.adj.setZero(n.val.rows(), n.val.cols());
            n.adj_set = true;
        }
}

const Matrix& Tape::value(Id id) const { return at(id).val; }

const Matrix& Tape::tangent(Id id, int lane) const {
    const Node& n = at(id);
    if (!n.lanes) throw std::logic_error("Tape::tangent: node carries no lanes");
    return n.tan[static_cast<std::size_t>(lane)];
}

const Matrix& Tape::grad(Id id) const {
    const Node& n = at(id);
    if (!n.adj_set) throw std::logic_error("Tape::grad: no adjoint recorded for '" + n.label + "'");
    return n.adj;
}

bool Tape::has_lanes(Id id) const { return at(id).lanes; }

Tape::Id Tape::first_non_finite() const {
    for (Id i = 0; i < size(); ++i) {
        const Node& n = at(i);
        if (!n.val.allFinite()) return i;
        if (n.lanes)
            for (const Matrix& t : n.tan)
                if (!t.allFinite()) return i;
    }
    return -1;
}

const std::string& Tape::label(Id id) const { return at(id).label; }

void Tape::dump_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("Tape::dump_csv: cannot open " + path);
    out << "node,label,rows,cols,val_min,val_max,val_abs_mean,adj_abs_mean\n";
    out.precision(17);
    for (Id i = 0; i < size(); ++i) {
        const Node& n = at(i);
        out << i << ',' << n.label << ',' << n.val.rows() << ',' << n.val.cols() << ','
            << (n.val.size() ? n.val.minCoeff() : 0.0) << ','
            << (n.val.size() ? n.val.maxCoeff() : 0.0) << ','
            << (n.val.size() ? n.val.cwiseAbs().mean() : 0.0) << ','
            << (n.adj_set && n.adj.size() ? n.adj.cwiseAbs().mean() : 0.0) << '\n';
    }
}

}  // namespace resdf::ad
