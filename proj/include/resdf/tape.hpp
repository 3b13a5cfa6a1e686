#ifndef RESDF_TAPE_HPP
#define RESDF_TAPE_HPP

#include <functional>
#include <string>
#include <vector>

#include "resdf/types.hpp"

namespace resdf::ad {

// Reverse-mode differentiation tape over column-batched Eigen matrices.
//
// Each node holds a value matrix (K x B, one batch point per column) and
// optionally a set of forward-mode tangent "lanes": lane l carries the
// directional derivative of the node with respect to input coordinate l.
// Nesting the lanes inside the reverse sweep yields parameter gradients of
// expressions that contain input gradients (mixed second order), which is
// exactly what gradient-matching losses need. Input dimension is 2 or 3, so
// forward lanes are cheap; parameter counts are large, so the outer sweep
// is reverse mode.
//
// The graph is static: build it once, then alternate set_value / forward /
// backward. Replaying forward with unchanged leaves reproduces values
// bit-for-bit, and node storage is reused across replays (no steady-state
// allocation).
//
// Derivative conventions at non-smooth points (documented, never an error):
//   - LeakyReLU at 0 uses the left branch slope 0.01.
//   - sqrt at 0 uses derivative 0.
//   - the smooth absolute value uses its quadratic branch on |x| <= x0.
class Tape {
public:
    using Id = int;

    explicit Tape(int nlanes);

    int lanes() const { return nlanes_; }
    int size() const { return static_cast<int>(nodes_.size()); }

    // --- leaves ---------------------------------------------------------
    // External value; optionally carries tangent lanes set via set_tangent.
    Id input(int rows, int cols, bool with_lanes, std::string label = "input");
    // Trainable leaf; adjoint is retrievable via grad() after backward().
    Id parameter(int rows, int cols, std::string label = "param");

    void set_value(Id id, const Matrix& v);
    void set_tangent(Id id, int lane, const Matrix& t);

    // --- operations ------------------------------------------------------
    // w * x + b with w, b parameter (or input) leaves; b has shape (K, 1).
    Id linear(Id w, Id x, Id b, std::string label = "linear");
    Id leaky_relu(Id a);
    Id tanh_op(Id a);
    // alpha * x^2 on |x| <= x0, |x| + q outside.
    Id abs_smooth(Id a, double alpha, double x0, double q);
    Id sqrt_op(Id a);
    Id add(Id a, Id b);
    Id sub(Id a, Id b);
    Id mul(Id a, Id b);             // elementwise
    Id scale(Id a, double s);
    Id add_scalar(Id a, double s);
    Id rowwise_mul(Id a, Id s);     // a (K x B) scaled per column by s (1 x B)
    Id rowwise_div(Id a, Id s);     // lane-free inputs only
    Id row(Id a, int r);            // single-row slice, keeps lanes
    Id rows(Id a, int r0, int nr, bool keep_lanes);
    Id vcat(const std::vector<Id>& parts);  // lane-free inputs only
    Id colwise_sumsq(Id a);         // lane-free input only
    Id mean_all(Id a);              // mean over a single-row node -> 1 x 1
    // Value of tangent lane `lane` as a lane-free node.
    Id tangent_extract(Id a, int lane);
    // Evaluation barrier: val = fn(input val), zero derivative everywhere.
    Id stop_gradient(Id a, std::function<Matrix(const Matrix&)> fn,
                     int out_rows, std::string label = "stop_gradient");
    // External scalar field: val(0,b) = f(column b), with analytic gradient
    // gf (dim x B) supplied for the reverse sweep.
    Id external_scalar(Id a, std::function<Vector(const Matrix&)> f,
                       std::function<Matrix(const Matrix&)> gf,
                       std::string label = "external_scalar");

    // --- execution --------------------------------------------------------
    void forward();
    // Reverse sweep from a 1x1 node; parameter adjoints accumulate and are
    // readable through grad() until the next backward().
    void backward(Id loss);

    const Matrix& value(Id id) const;
    const Matrix& tangent(Id id, int lane) const;
    const Matrix& grad(Id id) const;  // valid for parameter leaves after backward
    bool has_lanes(Id id) const;

    // First node (in evaluation order) whose value holds a NaN or infinity,
    // or -1 if all values are finite. Used for failure diagnostics.
    Id first_non_finite() const;
    const std::string& label(Id id) const;

    // Debug aid: one CSV row per node with value/adjoint summary statistics.
    void dump_csv(const std::string& path) const;

private:
    enum class Op {
        Input, Param, Linear, LeakyRelu, Tanh, AbsSmooth, Sqrt,
        Add, Sub, Mul, Scale, AddScalar, RowwiseMul, RowwiseDiv,
        Row, Rows, Vcat, ColwiseSumSq, MeanAll, TangentExtract,
        StopGrad, ExternalScalar
    };

    struct Node {
        Op op;
        std::vector<Id> in;
        Matrix val;
        std::vector<Matrix> tan;   // empty when the node carries no lanes
        Matrix adj;                // adjoint of val
        std::vector<Matrix> adj_tan;
        bool adj_set = false;
        std::vector<std::uint8_t> adj_tan_set;
        double s0 = 0.0, s1 = 0.0, s2 = 0.0;
        int i0 = 0, i1 = 0;
        bool lanes = false;
        std::function<Matrix(const Matrix&)> fn;
        std::function<Vector(const Matrix&)> f_scalar;
        std::function<Matrix(const Matrix&)> f_grad;
        std::string label;
    };

    Id push(Node n);
    Node& at(Id id);
    const Node& at(Id id) const;
    void eval_node(Node& n);
    void backprop_node(Node& n);

    // Adjoint accumulation helpers (assign on first touch, add afterwards).
    void accum(Node& dst, const Matrix& delta);
    void accum_tan(Node& dst, int lane, const Matrix& delta);
    Matrix& adj_buffer(Node& dst);
    Matrix& adj_tan_buffer(Node& dst, int lane);

    std::vector<Node> nodes_;
    int nlanes_;
};

}  // namespace resdf::ad

#endif  // RESDF_TAPE_HPP
