#pragma once

#include "minivlm/types.hpp"

#include <functional>
#include <string>
#include <vector>

namespace minivlm {

// A named, trainable f64 buffer. Parameters live outside any tape; gradients
// accumulate here across backward passes until zero_grad().
struct Parameter {
    std::string name;
    Mat value;
    Mat grad;
    bool trainable = true;

    Parameter() = default;
    Parameter(std::string n, Mat v)
        : name(std::move(n)), value(std::move(v)), grad(Mat::Zero(value.rows(), value.cols())) {}

    void zero_grad() { grad.setZero(); }
    double grad_norm() const { return grad.norm(); }
};

class Tape;

// Handle to a value node on a tape. Cheap to copy; valid as long as the tape lives.
class Var {
public:
    Var() = default;

    const Mat& value() const;
    // Gradient of the last backward() loss w.r.t. this node. Zero if the node
    // required a gradient but none flowed; throws if it never required one.
    Mat grad() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    bool valid() const { return tape_ != nullptr; }
    int id() const { return id_; }
    Tape* tape() const { return tape_; }

private:
    friend class Tape;
    Var(Tape* t, int id) : tape_(t), id_(id) {}

    Tape* tape_ = nullptr;
    int id_ = -1;
};

// Dynamic reverse-mode tape: every primitive appends one node, so creation
// order is a topological order and backward() is a single reverse sweep.
// One tape per forward/backward pass; never shared between passes.
class Tape {
public:
    using BackFn = std::function<void(Tape&, int self)>;

    struct Node {
        Mat value;
        Mat grad;  // empty until first accumulation
        bool requires_grad = false;
        Parameter* bound = nullptr;
        BackFn backward;
    };

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // Leaf that never receives a gradient.
    Var constant(Mat value) { return make(std::move(value), false, nullptr); }
    // Leaf that receives a gradient (for tests and probes).
    Var leaf(Mat value) { return make(std::move(value), true, nullptr); }
    // Leaf bound to an external parameter; backward() adds into p.grad.
    Var param(Parameter& p) {
        Var v = make(p.value, p.trainable, nullptr);
        nodes_[static_cast<size_t>(v.id())].bound = &p;
        return v;
    }

    Var make(Mat value, bool requires_grad, BackFn fn) {
        nodes_.push_back(Node{std::move(value), Mat(), requires_grad, nullptr, std::move(fn)});
        return Var(this, static_cast<int>(nodes_.size()) - 1);
    }

    const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
    Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
    size_t size() const { return nodes_.size(); }

    bool wants_grad(int id) const { return nodes_[static_cast<size_t>(id)].requires_grad; }

    // Adds g into the grad buffer of node id (no-op for constants).
    void accumulate(int id, const Mat& g);

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse.
    // The loss must be a 1x1 node of this tape.
    void backward(const Var& loss);

private:
    std::vector<Node> nodes_;
};

// ---- primitives -----------------------------------------------------------
// Each op validates shapes (throwing std::invalid_argument with both shapes
// named), computes the value eagerly and registers its reverse-mode closure.

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise
Var scale(const Var& a, double s);
Var add_row_broadcast(const Var& a, const Var& row);  // row is 1 x n
Var emax(const Var& a, const Var& b);                 // elementwise max; ties go to a

Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index len);
Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index len);

Var mean_rows(const Var& a);  // 1 x n mean over the token axis
Var sum_all(const Var& a);    // 1 x 1

// Row-wise softmax. With a mask, entries where mask == false come out exactly
// zero and each row is normalized over its visible entries; a fully masked
// row is an error. Numerically stabilized by row-max subtraction.
Var softmax_rows(const Var& a);
Var softmax_rows(const Var& a, const BoolMat& mask);

Var gelu(const Var& a);  // exact erf form
Var silu(const Var& a);
Var activation(const Var& a, Nonlin kind);

// y_ij = x_ij * gain_j / sqrt(mean_j(x_ij^2) + eps), gain is 1 x d.
Var rms_norm(const Var& x, const Var& gain, double eps = 1e-6);

// Gathers table rows by token id; gradients scatter back into the table.
Var embedding_rows(const Var& table, const std::vector<int>& ids);

// Mean negative log-likelihood over rows; logits is L x V, targets.size() == L.
Var cross_entropy(const Var& logits, const std::vector<int>& targets);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }

}  // namespace minivlm
