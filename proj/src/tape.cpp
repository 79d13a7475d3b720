#include "minivlm/tape.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace minivlm {

namespace {

std::string shape_str(const Mat& m) {
    std::ostringstream os;
    os << m.rows() << "x" << m.cols();
    return os.str();
}

Tape& tape_of(const Var& a) {
    if (!a.valid()) throw std::invalid_argument("op on default-constructed Var");
    return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
    Tape& t = tape_of(a);
    if (b.tape() != &t) throw std::invalid_argument("operands live on different tapes");
    return t;
}

void check_same_shape(const char* op, const Var& a, const Var& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.value()) +
                                    " vs " + shape_str(b.value()));
    }
}

}  // namespace

const Mat& Var::value() const { return tape_->node(id_).value; }

Mat Var::grad() const {
    const Tape::Node& n = tape_->node(id_);
    if (!n.requires_grad) throw std::runtime_error("Var::grad: node does not require gradients");
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
}

void Tape::accumulate(int id, const Mat& g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    n.grad += g;
}

void Tape::backward(const Var& loss) {
    if (loss.tape() != this) throw std::invalid_argument("backward: loss lives on another tape");
    const Node& ln = node(loss.id());
    if (ln.value.rows() != 1 || ln.value.cols() != 1) {
        throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(ln.value));
    }
    accumulate(loss.id(), Mat::Ones(1, 1));
    for (int i = loss.id(); i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.requires_grad || n.grad.size() == 0) continue;
        if (n.backward) n.backward(*this, i);
    }
    for (int i = 0; i <= loss.id(); ++i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (n.bound != nullptr && n.grad.size() != 0) n.bound->grad += n.grad;
    }
}

Var matmul(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: inner dimensions differ, " + shape_str(a.value()) +
                                    " * " + shape_str(b.value()));
    }
    Mat y = a.value() * b.value();
    const int ia = a.id(), ib = b.id();
    const bool rg = t.wants_grad(ia) || t.wants_grad(ib);
    return t.make(std::move(y), rg, [ia, ib](Tape& tp, int self) {
        const Mat& gy = tp.node(self).grad;
        if (tp.wants_grad(ia)) tp.accumulate(ia, gy * tp.node(ib).value.transpose());
        if (tp.wants_grad(ib)) tp.accumulate(ib, tp.node(ia).value.transpose() * gy);
    });
}

Var transpose(const Var& a) {
    Tape& t = tape_of(a);
    const int ia = a.id();
    return t.make(a.value().transpose(), t.wants_grad(ia), [ia](Tape& tp, int self) {
        tp.accumulate(ia, tp.node(self).grad.transpose());
    });
}

Var add(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    check_same_shape("add", a, b);
    const int ia = a.id(), ib = b.id();
    const bool rg = t.wants_grad(ia) || t.wants_grad(ib);
    return t.make(a.value() + b.value(), rg, [ia, ib](Tape& tp, int self) {
        const Mat& gy = tp.node(self).grad;
        tp.accumulate(ia, gy);
        tp.accumulate(ib, gy);
    });
}

Var sub(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    check_same_shape("sub", a, b);
    const int ia = a.id(), ib = b.id();
    const bool rg = t.wants_grad(ia) || t.wants_grad(ib);
    return t.make(a.value() - b.value(), rg, [ia, ib](Tape& tp, int self) {
        const Mat& gy = tp.node(self).grad;
        tp.accumulate(ia, gy);
        tp.accumulate(ib, -gy);
    });
}

Var mul(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    check_same_shape("mul", a, b);
    const int ia = a.id(), ib = b.id();
    const bool rg = t.wants_grad(ia) || t.wants_grad(ib);
    return t.make(a.value().cwiseProduct(b.value()), rg, [ia, ib](Tape& tp, int self) {
        const Mat& gy = tp.node(self).grad;
        if (tp.wants_grad(ia)) tp.accumulate(ia, gy.cwiseProduct(tp.node(ib).value));
        if (tp.wants_grad(ib)) tp.accumulate(ib, gy.cwiseProduct(tp.node(ia).value));
    });
}

Var scale(const Var& a, double s) {
    Tape& t = tape_of(a);
    const int ia = a.id();
    return t.make(a.value() * s, t.wants_grad(ia), [ia, s](Tape& tp, int self) {
        tp.accumulate(ia, tp.node(self).grad * s);
    });
}

Var add_row_broadcast(const Var& a, const Var& row) {
    Tape& t = tape_of(a, row);
    if (row.rows() != 1 || row.cols() != a.cols()) {
        throw std::invalid_argument("add_row_broadcast: row must be 1x" +
                                    std::to_string(a.cols()) + ", got " + shape_str(row.value()));
    }
    Mat y = a.value().rowwise() + row.value().row(0);
    const int ia = a.id(), ir = row.id();
    const bool rg = t.wants_grad(ia) || t.wants_grad(ir);
    return t.make(std::move(y), rg, [ia, ir](Tape& tp, int self) {
        const Mat& gy = tp.node(self).grad;
        tp.accumulate(ia, gy);
        if (tp.wants_grad(ir)) tp.accumulate(ir, gy.colwise().sum());
    });
}

Var emax(const Var& a, const Var& b) {
    Tape& t = tape_of(a, b);
    check_same_shape("emax", a, b);
    const int ia = a.id(), ib = b.id();
    const bool rg = t.wants_grad(ia) || t.wants_grad(ib);
    return t.make(a.value().cwiseMax(b.value()), rg, [ia, ib](Tape& tp, int self) {
        const Mat& gy = tp.node(self).grad;
        const Mat& av = tp.node(ia).value;
        const Mat& bv = tp.node(ib).value;
        const Mat pick_a = (av.array() >= bv.array()).cast<double>().matrix();
        if (tp.wants_grad(ia)) tp.accumulate(ia, gy.cwiseProduct(pick_a));
        if (tp.wants_grad(ib))
            tp.accumulate(ib, gy.cwiseProduct((1.0 - pick_a.array()).matrix()));
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
    Tape& t = tape_of(parts.front());
    Eigen::Index rows = 0;
    const Eigen::Index cols = parts.front().cols();
    bool rg = false;
    for (const Var& p : parts) {
        tape_of(parts.front(), p);
        if (p.cols() != cols) {
            throw std::invalid_argument("concat_rows: column mismatch " +
                                        shape_str(parts.front().value()) + " vs " +
                                        shape_str(p.value()));
        }
        rows += p.rows();
        rg = rg || t.wants_grad(p.id());
    }
    Mat y(rows, cols);
    std::vector<int> ids;
    std::vector<Eigen::Index> offsets;
    Eigen::Index at = 0;
    for (const Var& p : parts) {
        y.middleRows(at, p.rows()) = p.value();
        ids.push_back(p.id());
        offsets.push_back(at);
        at += p.rows();
    }
    return t.make(std::move(y), rg, [ids, offsets](Tape& tp, int self) {
        const Mat& gy = tp.node(self).grad;
        for (size_t k = 0; k < ids.size(); ++k) {
            const Eigen::Index n = tp.node(ids[k]).value.rows();
            tp.accumulate(ids[k], gy.middleRows(offsets[k], n));
        }
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: no parts");
    Tape& t = tape_of(parts.front());
    Eigen::Index cols = 0;
    const Eigen::Index rows = parts.front().rows();
    bool rg = false;
    for (const Var& p : parts) {
        tape_of(parts.front(), p);
        if (p.rows() != rows) {
            throw std::invalid_argument("concat_cols: row mismatch " +
                                        shape_str(parts.front().value()) + " vs " +
                                        shape_str(p.value()));
        }
        cols += p.cols();
        rg = rg || t.wants_grad(p.id());
    }
    Mat y(rows, cols);
    std::vector<int> ids;
    std::vector<Eigen::Index> offsets;
    Eigen::Index at = 0;
    for (const Var& p : parts) {
        y.middleCols(at, p.cols()) = p.value();
        ids.push_back(p.id());
        offsets.push_back(at);
        at += p.cols();
    }
    return t.make(std::move(y), rg, [ids, offsets](Tape& tp, int self) {
        const Mat& gy = tp.node(self).grad;
        for (size_t k = 0; k < ids.size(); ++k) {
            const Eigen::Index n = tp.node(ids[k]).value.cols();
            tp.accumulate(ids[k], gy.middleCols(offsets[k], n));
        }
    });
}

Var slice_rows(const Var& a, Eigen::Index start, Eigen::Index len) {
    Tape& t = tape_of(a);
    if (start < 0 || len < 0 || start + len > a.rows()) {
        throw std::invalid_argument("slice_rows: range [" + std::to_string(start) + ", " +
                                    std::to_string(start + len) + ") out of " +
                                    std::to_string(a.rows()) + " rows");
    }
    const int ia = a.id();
    return t.make(a.value().middleRows(start, len), t.wants_grad(ia),
                  [ia, start, len](Tape& tp, int self) {
                      const Tape::Node& n = tp.node(ia);
                      Mat g = Mat::Zero(n.value.rows(), n.value.cols());
                      g.middleRows(start, len) = tp.node(self).grad;
                      tp.accumulate(ia, g);
                  });
}

Var slice_cols(const Var& a, Eigen::Index start, Eigen::Index len) {
    Tape& t = tape_of(a);
    if (start < 0 || len < 0 || start + len > a.cols()) {
        throw std::invalid_argument("slice_cols: range [" + std::to_string(start) + ", " +
                                    std::to_string(start + len) + ") out of " +
                                    std::to_string(a.cols()) + " cols");
    }
    const int ia = a.id();
    return t.make(a.value().middleCols(start, len), t.wants_grad(ia),
                  [ia, start, len](Tape& tp, int self) {
                      const Tape::Node& n = tp.node(ia);
                      Mat g = Mat::Zero(n.value.rows(), n.value.cols());
                      g.middleCols(start, len) = tp.node(self).grad;
                      tp.accumulate(ia, g);
                  });
}

Var mean_rows(const Var& a) {
    Tape& t = tape_of(a);
    if (a.rows() == 0) throw std::invalid_argument("mean_rows: empty input");
    const int ia = a.id();
    const double inv = 1.0 / static_cast<double>(a.rows());
    Mat y = a.value().colwise().sum() * inv;
    return t.make(std::move(y), t.wants_grad(ia), [ia, inv](Tape& tp, int self) {
        const Mat& gy = tp.node(self).grad;  // 1 x n
        const Eigen::Index rows = tp.node(ia).value.rows();
        Mat g(rows, gy.cols());
        g.rowwise() = (gy * inv).row(0);
        tp.accumulate(ia, g);
    });
}

Var sum_all(const Var& a) {
    Tape& t = tape_of(a);
    const int ia = a.id();
    Mat y(1, 1);
    y(0, 0) = a.value().sum();
    return t.make(std::move(y), t.wants_grad(ia), [ia](Tape& tp, int self) {
        const double g = tp.node(self).grad(0, 0);
        const Tape::Node& n = tp.node(ia);
        tp.accumulate(ia, Mat::Constant(n.value.rows(), n.value.cols(), g));
    });
}

namespace {

Var softmax_rows_impl(const Var& a, const BoolMat* mask) {
    Tape& t = tape_of(a);
    const Eigen::Index rows = a.rows(), cols = a.cols();
    if (mask != nullptr && (mask->rows() != rows || mask->cols() != cols)) {
        throw std::invalid_argument("softmax_rows: mask shape " + std::to_string(mask->rows()) +
                                    "x" + std::to_string(mask->cols()) + " does not match input " +
                                    shape_str(a.value()));
    }
    Mat y(rows, cols);
    const Mat& x = a.value();
    for (Eigen::Index i = 0; i < rows; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < cols; ++j) {
            if (mask == nullptr || (*mask)(i, j)) mx = std::max(mx, x(i, j));
        }
        if (!std::isfinite(mx)) {
            throw std::invalid_argument("softmax_rows: fully masked row " + std::to_string(i));
        }
        double z = 0.0;
        for (Eigen::Index j = 0; j < cols; ++j) {
            if (mask == nullptr || (*mask)(i, j)) {
                y(i, j) = std::exp(x(i, j) - mx);
                z += y(i, j);
            } else {
                y(i, j) = 0.0;
            }
        }
        y.row(i) /= z;
    }
    const int ia = a.id();
    return t.make(std::move(y), t.wants_grad(ia), [ia](Tape& tp, int self) {
        // dX = Y o (dY - rowsum(dY o Y)); masked entries have Y == 0, so they
        // contribute nothing and receive nothing.
        const Mat& yv = tp.node(self).value;
        const Mat& gy = tp.node(self).grad;
        Mat g(yv.rows(), yv.cols());
        for (Eigen::Index i = 0; i < yv.rows(); ++i) {
            const double dot = gy.row(i).dot(yv.row(i));
            g.row(i) = yv.row(i).array() * (gy.row(i).array() - dot);
        }
        tp.accumulate(ia, g);
    });
}

}  // namespace

Var softmax_rows(const Var& a) { return softmax_rows_impl(a, nullptr); }
Var softmax_rows(const Var& a, const BoolMat& mask) { return softmax_rows_impl(a, &mask); }

namespace {

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gelu_val(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_grad(double x) {
    const double phi = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * phi;
}
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
double silu_val(double x) { return x * sigmoid(x); }
double silu_grad(double x) {
    const double s = sigmoid(x);
    return s * (1.0 + x * (1.0 - s));
}

Var unary_pointwise(const Var& a, double (*f)(double), double (*df)(double)) {
    Tape& t = tape_of(a);
    Mat y = a.value().unaryExpr([f](double v) { return f(v); });
    const int ia = a.id();
    return t.make(std::move(y), t.wants_grad(ia), [ia, df](Tape& tp, int self) {
        const Mat& gy = tp.node(self).grad;
        const Mat d = tp.node(ia).value.unaryExpr([df](double v) { return df(v); });
        tp.accumulate(ia, gy.cwiseProduct(d));
    });
}

}  // namespace

Var gelu(const Var& a) { return unary_pointwise(a, &gelu_val, &gelu_grad); }
Var silu(const Var& a) { return unary_pointwise(a, &silu_val, &silu_grad); }

Var activation(const Var& a, Nonlin kind) {
    return kind == Nonlin::Gelu ? gelu(a) : silu(a);
}

Var rms_norm(const Var& x, const Var& gain, double eps) {
    Tape& t = tape_of(x, gain);
    if (gain.rows() != 1 || gain.cols() != x.cols()) {
        throw std::invalid_argument("rms_norm: gain must be 1x" + std::to_string(x.cols()) +
                                    ", got " + shape_str(gain.value()));
    }
    const Eigen::Index rows = x.rows(), cols = x.cols();
    Mat inv_rms(rows, 1);
    for (Eigen::Index i = 0; i < rows; ++i) {
        inv_rms(i, 0) = 1.0 / std::sqrt(x.value().row(i).squaredNorm() / cols + eps);
    }
    Mat y = (x.value().array().colwise() * inv_rms.col(0).array()).matrix();
    y = y.array().rowwise() * gain.value().row(0).array();
    const int ix = x.id(), ig = gain.id();
    const bool rg = t.wants_grad(ix) || t.wants_grad(ig);
    return t.make(std::move(y), rg, [ix, ig, inv_rms](Tape& tp, int self) {
        const Mat& gy = tp.node(self).grad;
        const Mat& xv = tp.node(ix).value;
        const Mat& gv = tp.node(ig).value;
        const Eigen::Index d = xv.cols();
        if (tp.wants_grad(ig)) {
            Mat gg = Mat::Zero(1, d);
            for (Eigen::Index i = 0; i < xv.rows(); ++i) {
                gg += (gy.row(i).array() * xv.row(i).array() * inv_rms(i, 0)).matrix();
            }
            tp.accumulate(ig, gg);
        }
        if (tp.wants_grad(ix)) {
            Mat gx(xv.rows(), d);
            for (Eigen::Index i = 0; i < xv.rows(); ++i) {
                const double r = inv_rms(i, 0);
                const double dot = (gy.row(i).array() * gv.row(0).array() * xv.row(i).array()).sum();
                gx.row(i) = (gy.row(i).array() * gv.row(0).array() * r).matrix() -
                            xv.row(i) * (dot * r * r * r / static_cast<double>(d));
            }
            tp.accumulate(ix, gx);
        }
    });
}

Var embedding_rows(const Var& table, const std::vector<int>& ids) {
    Tape& t = tape_of(table);
    const Eigen::Index vocab = table.rows();
    Mat y(static_cast<Eigen::Index>(ids.size()), table.cols());
    for (size_t k = 0; k < ids.size(); ++k) {
        if (ids[k] < 0 || ids[k] >= vocab) {
            throw std::out_of_range("embedding_rows: id " + std::to_string(ids[k]) +
                                    " outside vocabulary of " + std::to_string(vocab));
        }
        y.row(static_cast<Eigen::Index>(k)) = table.value().row(ids[k]);
    }
    const int it = table.id();
    return t.make(std::move(y), t.wants_grad(it), [it, ids](Tape& tp, int self) {
        const Mat& gy = tp.node(self).grad;
        const Tape::Node& n = tp.node(it);
        Mat g = Mat::Zero(n.value.rows(), n.value.cols());
        for (size_t k = 0; k < ids.size(); ++k) {
            g.row(ids[k]) += gy.row(static_cast<Eigen::Index>(k));
        }
        tp.accumulate(it, g);
    });
}

Var cross_entropy(const Var& logits, const std::vector<int>& targets) {
    Tape& t = tape_of(logits);
    const Eigen::Index rows = logits.rows(), vocab = logits.cols();
    if (static_cast<Eigen::Index>(targets.size()) != rows) {
        throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                    " targets for " + std::to_string(rows) + " logit rows");
    }
    if (rows == 0) throw std::invalid_argument("cross_entropy: empty logits");
    Mat probs(rows, vocab);
    double nll = 0.0;
    for (Eigen::Index i = 0; i < rows; ++i) {
        if (targets[static_cast<size_t>(i)] < 0 || targets[static_cast<size_t>(i)] >= vocab) {
            throw std::out_of_range("cross_entropy: target " +
                                    std::to_string(targets[static_cast<size_t>(i)]) +
                                    " outside vocabulary of " + std::to_string(vocab));
        }
        const double mx = logits.value().row(i).maxCoeff();
        const Mat e = (logits.value().row(i).array() - mx).exp().matrix();
        const double z = e.sum();
        probs.row(i) = e / z;
        nll -= logits.value()(i, targets[static_cast<size_t>(i)]) - mx - std::log(z);
    }
    Mat y(1, 1);
    y(0, 0) = nll / static_cast<double>(rows);
    const int il = logits.id();
    return t.make(std::move(y), t.wants_grad(il), [il, targets, probs](Tape& tp, int self) {
        const double g = tp.node(self).grad(0, 0);
        Mat gl = probs;
        for (Eigen::Index i = 0; i < gl.rows(); ++i) {
            gl(i, targets[static_cast<size_t>(i)]) -= 1.0;
        }
        tp.accumulate(il, gl * (g / static_cast<double>(gl.rows())));
    });
}

}  // namespace minivlm
