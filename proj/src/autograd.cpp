#include "clarity/autograd.hpp"
#include "clarity/common.hpp"

#include <cmath>
#include <limits>
#include <unordered_set>

namespace clarity::autograd {

namespace {
thread_local bool t_grad_enabled = true;

void require(bool ok, const char* what) {
    if (!ok) throw ContractError(what);
}

Matrix row_log_softmax(const Matrix& logits, Eigen::Index row) {
    const double m = logits.row(row).maxCoeff();
    const double lse = m + std::log((logits.row(row).array() - m).exp().sum());
    return (logits.row(row).array() - lse).matrix();
}
}  // namespace

void Node::accumulate(const Matrix& g) {
    if (grad.size() == 0) {
        grad = g;
    } else {
        grad += g;
    }
}

Tensor::Tensor(Matrix value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return Tensor(std::move(m));
}

double Tensor::item() const {
    require(node_ && node_->value.size() == 1, "item() on a non-scalar tensor");
    return node_->value(0, 0);
}

void Tensor::backward() const {
    require(node_ && node_->value.size() == 1, "backward() needs a scalar root");
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node* p = n->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
            continue;
        }
        order.push_back(n);
        stack.pop_back();
    }

    node_->accumulate(Matrix::Ones(1, 1));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && n->grad.size() > 0) n->backward(*n);
    }
    // Interior gradients are not needed once propagated.
    for (Node* n : order) {
        if (n->backward) n->grad.resize(0, 0);
    }
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() noexcept { return t_grad_enabled; }

Tensor make_result(Matrix value, std::initializer_list<Tensor> parents, std::function<void(Node&)> backward) {
    Tensor out(std::move(value));
    if (!t_grad_enabled) return out;
    bool any = false;
    for (const auto& p : parents) any = any || p.requires_grad();
    if (!any) return out;
    out.node_->requires_grad = true;
    out.node_->parents.reserve(parents.size());
    for (const auto& p : parents) out.node_->parents.push_back(p.node());
    out.node_->backward = std::move(backward);
    return out;
}

namespace {
// Helpers for closures.
inline Node& parent(Node& n, std::size_t i) { return *n.parents[i]; }
inline bool wants(Node& n, std::size_t i) { return n.parents[i]->requires_grad; }
}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
    return make_result(a.value() + b.value(), {a, b}, [](Node& n) {
        if (wants(n, 0)) parent(n, 0).accumulate(n.grad);
        if (wants(n, 1)) parent(n, 1).accumulate(n.grad);
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "sub: shape mismatch");
    return make_result(a.value() - b.value(), {a, b}, [](Node& n) {
        if (wants(n, 0)) parent(n, 0).accumulate(n.grad);
        if (wants(n, 1)) parent(n, 1).accumulate(-n.grad);
    });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
    require(row.rows() == 1 && row.cols() == a.cols(), "add_row: shape mismatch");
    Matrix v = a.value();
    v.rowwise() += row.value().row(0);
    return make_result(std::move(v), {a, row}, [](Node& n) {
        if (wants(n, 0)) parent(n, 0).accumulate(n.grad);
        if (wants(n, 1)) parent(n, 1).accumulate(n.grad.colwise().sum());
    });
}

Tensor add_constant(const Tensor& a, const Matrix& c) {
    require(a.rows() == c.rows() && a.cols() == c.cols(), "add_constant: shape mismatch");
    return make_result(a.value() + c, {a}, [](Node& n) { parent(n, 0).accumulate(n.grad); });
}

Tensor scale(const Tensor& a, double s) {
    return make_result(a.value() * s, {a}, [s](Node& n) { parent(n, 0).accumulate(n.grad * s); });
}

Tensor add_scalar(const Tensor& a, double s) {
    return make_result((a.value().array() + s).matrix(), {a}, [](Node& n) { parent(n, 0).accumulate(n.grad); });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require(a.cols() == b.rows(), "matmul: inner dimension mismatch");
    return make_result(a.value() * b.value(), {a, b}, [](Node& n) {
        const Matrix& av = parent(n, 0).value;
        const Matrix& bv = parent(n, 1).value;
        if (wants(n, 0)) parent(n, 0).accumulate(n.grad * bv.transpose());
        if (wants(n, 1)) parent(n, 1).accumulate(av.transpose() * n.grad);
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require(a.cols() == b.cols(), "matmul_nt: dimension mismatch");
    return make_result(a.value() * b.value().transpose(), {a, b}, [](Node& n) {
        const Matrix& av = parent(n, 0).value;
        const Matrix& bv = parent(n, 1).value;
        if (wants(n, 0)) parent(n, 0).accumulate(n.grad * bv);
        if (wants(n, 1)) parent(n, 1).accumulate(n.grad.transpose() * av);
    });
}

Tensor relu(const Tensor& a) {
    return make_result(a.value().cwiseMax(0.0), {a}, [](Node& n) {
        const Matrix& x = parent(n, 0).value;
        parent(n, 0).accumulate((x.array() > 0.0).cast<double>().matrix().cwiseProduct(n.grad));
    });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    const Eigen::Index cols = x.cols();
    require(gamma.rows() == 1 && gamma.cols() == cols && beta.rows() == 1 && beta.cols() == cols,
            "layer_norm: parameter shape mismatch");
    const Matrix& xv = x.value();
    Matrix xhat(xv.rows(), cols);
    Eigen::VectorXd inv_std(xv.rows());
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
        const double mean = xv.row(i).mean();
        const double var = (xv.row(i).array() - mean).square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (xv.row(i).array() - mean) * inv_std(i);
    }
    Matrix out = xhat.array().rowwise() * gamma.value().row(0).array();
    out.rowwise() += beta.value().row(0);
    return make_result(std::move(out), {x, gamma, beta}, [xhat, inv_std](Node& n) {
        const Matrix& g = n.grad;
        const Matrix& gam = parent(n, 1).value;
        if (wants(n, 1)) parent(n, 1).accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (wants(n, 2)) parent(n, 2).accumulate(g.colwise().sum());
        if (wants(n, 0)) {
            const double c = static_cast<double>(xhat.cols());
            Matrix dx(g.rows(), g.cols());
            for (Eigen::Index i = 0; i < g.rows(); ++i) {
                Eigen::RowVectorXd gh = g.row(i).cwiseProduct(gam.row(0));
                const double s1 = gh.sum();
                const double s2 = gh.dot(xhat.row(i));
                dx.row(i) = (inv_std(i) / c) * (c * gh.array() - s1 - xhat.row(i).array() * s2).matrix();
            }
            parent(n, 0).accumulate(dx);
        }
    });
}

Tensor softmax_rows(const Tensor& x, bool causal) {
    const Matrix& xv = x.value();
    Matrix out(xv.rows(), xv.cols());
    for (Eigen::Index i = 0; i < xv.rows(); ++i) {
        const Eigen::Index limit = causal ? std::min<Eigen::Index>(i + 1, xv.cols()) : xv.cols();
        const double m = xv.row(i).head(limit).maxCoeff();
        double total = 0.0;
        for (Eigen::Index j = 0; j < xv.cols(); ++j) {
            const double e = j < limit ? std::exp(xv(i, j) - m) : 0.0;
            out(i, j) = e;
            total += e;
        }
        out.row(i) /= total;
    }
    Matrix saved = out;
    return make_result(std::move(out), {x}, [saved = std::move(saved)](Node& n) {
        Matrix dx(saved.rows(), saved.cols());
        for (Eigen::Index i = 0; i < saved.rows(); ++i) {
            const double dot = n.grad.row(i).dot(saved.row(i));
            dx.row(i) = saved.row(i).array() * (n.grad.row(i).array() - dot);
        }
        parent(n, 0).accumulate(dx);
    });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) {
    Matrix out(static_cast<Eigen::Index>(ids.size()), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        require(ids[i] >= 0 && ids[i] < table.rows(), "embedding: id out of range");
        out.row(static_cast<Eigen::Index>(i)) = table.value().row(ids[i]);
    }
    std::vector<int> saved(ids.begin(), ids.end());
    return make_result(std::move(out), {table}, [saved = std::move(saved)](Node& n) {
        Node& t = parent(n, 0);
        Matrix g = Matrix::Zero(t.value.rows(), t.value.cols());
        for (std::size_t i = 0; i < saved.size(); ++i) g.row(saved[i]) += n.grad.row(static_cast<Eigen::Index>(i));
        t.accumulate(g);
    });
}

Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count) {
    require(start >= 0 && start + count <= a.cols(), "slice_cols: out of range");
    return make_result(a.value().middleCols(start, count), {a}, [start, count](Node& n) {
        Node& p = parent(n, 0);
        Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
        g.middleCols(start, count) = n.grad;
        p.accumulate(g);
    });
}

Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index count) {
    require(start >= 0 && start + count <= a.rows(), "slice_rows: out of range");
    return make_result(a.value().middleRows(start, count), {a}, [start, count](Node& n) {
        Node& p = parent(n, 0);
        Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
        g.middleRows(start, count) = n.grad;
        p.accumulate(g);
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    require(!parts.empty(), "concat_cols: no inputs");
    const Eigen::Index rows = parts.front().rows();
    Eigen::Index cols = 0;
    for (const auto& p : parts) {
        require(p.rows() == rows, "concat_cols: row mismatch");
        cols += p.cols();
    }
    Matrix out(rows, cols);
    Eigen::Index c = 0;
    for (const auto& p : parts) {
        out.middleCols(c, p.cols()) = p.value();
        c += p.cols();
    }
    Tensor result(std::move(out));
    if (!grad_enabled()) return result;
    bool any = false;
    for (const auto& p : parts) any = any || p.requires_grad();
    if (!any) return result;
    auto node = result.node();
    node->requires_grad = true;
    std::vector<Eigen::Index> widths;
    for (const auto& p : parts) {
        node->parents.push_back(p.node());
        widths.push_back(p.cols());
    }
    node->backward = [widths = std::move(widths)](Node& n) {
        Eigen::Index c0 = 0;
        for (std::size_t i = 0; i < widths.size(); ++i) {
            if (n.parents[i]->requires_grad) n.parents[i]->accumulate(n.grad.middleCols(c0, widths[i]));
            c0 += widths[i];
        }
    };
    return result;
}

Tensor sum(const Tensor& a) {
    Matrix out(1, 1);
    out(0, 0) = a.value().sum();
    return make_result(std::move(out), {a}, [](Node& n) {
        Node& p = parent(n, 0);
        p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), n.grad(0, 0)));
    });
}

Tensor mean_rows(const Tensor& a) {
    require(a.rows() > 0, "mean_rows: empty input");
    return make_result(a.value().colwise().mean(), {a}, [](Node& n) {
        Node& p = parent(n, 0);
        const double inv = 1.0 / static_cast<double>(p.value.rows());
        p.accumulate(n.grad.replicate(p.value.rows(), 1) * inv);
    });
}

Tensor l2_norm(const Tensor& a, double eps) {
    Matrix out(1, 1);
    out(0, 0) = std::sqrt(a.value().squaredNorm() + eps);
    const double norm = out(0, 0);
    return make_result(std::move(out), {a}, [norm](Node& n) {
        Node& p = parent(n, 0);
        p.accumulate(p.value * (n.grad(0, 0) / norm));
    });
}

Tensor cross_entropy_sum(const Tensor& logits, std::span<const int> targets) {
    require(static_cast<Eigen::Index>(targets.size()) == logits.rows(), "cross_entropy_sum: length mismatch");
    const Matrix& lv = logits.value();
    Matrix probs(lv.rows(), lv.cols());
    double total = 0.0;
    for (Eigen::Index i = 0; i < lv.rows(); ++i) {
        const int t = targets[static_cast<std::size_t>(i)];
        require(t >= 0 && t < lv.cols(), "cross_entropy_sum: target out of range");
        Matrix lsm = row_log_softmax(lv, i);
        total -= lsm(0, t);
        probs.row(i) = lsm.array().exp().matrix();
    }
    Matrix out(1, 1);
    out(0, 0) = total;
    std::vector<int> saved(targets.begin(), targets.end());
    return make_result(std::move(out), {logits}, [probs = std::move(probs), saved = std::move(saved)](Node& n) {
        Matrix g = probs;
        for (std::size_t i = 0; i < saved.size(); ++i) g(static_cast<Eigen::Index>(i), saved[i]) -= 1.0;
        parent(n, 0).accumulate(g * n.grad(0, 0));
    });
}

Tensor log_softmax_select(const Tensor& logits, Eigen::Index row, std::span<const int> ids) {
    require(row >= 0 && row < logits.rows(), "log_softmax_select: row out of range");
    Matrix lsm = row_log_softmax(logits.value(), row);
    Matrix out(1, static_cast<Eigen::Index>(ids.size()));
    for (std::size_t k = 0; k < ids.size(); ++k) {
        require(ids[k] >= 0 && ids[k] < logits.cols(), "log_softmax_select: id out of range");
        out(0, static_cast<Eigen::Index>(k)) = lsm(0, ids[k]);
    }
    Matrix probs = lsm.array().exp().matrix();
    std::vector<int> saved(ids.begin(), ids.end());
    return make_result(std::move(out), {logits},
                       [probs = std::move(probs), saved = std::move(saved), row](Node& n) {
                           Node& p = parent(n, 0);
                           Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
                           double total = 0.0;
                           for (std::size_t k = 0; k < saved.size(); ++k) {
                               const double gk = n.grad(0, static_cast<Eigen::Index>(k));
                               g(row, saved[k]) += gk;
                               total += gk;
                           }
                           g.row(row) -= probs * total;
                           p.accumulate(g);
                       });
}

}  // namespace clarity::autograd
