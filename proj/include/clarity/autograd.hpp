#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices. Every value is 2-D; scalars are 1x1. Graphs are built eagerly by
// the free functions below and released when the last Tensor referencing them
// goes away.

#include <Eigen/Dense>

#include <functional>
#include <memory>
#include <span>
#include <vector>

namespace clarity::autograd {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Node {
    Matrix value;
    Matrix grad;  // empty until a gradient reaches this node
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;
    bool requires_grad = false;

    void accumulate(const Matrix& g);
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Matrix value, bool requires_grad = false);

    static Tensor parameter(Matrix value) { return Tensor(std::move(value), true); }
    static Tensor scalar(double v);

    const Matrix& value() const { return node_->value; }
    Matrix& mutable_value() { return node_->value; }
    const Matrix& grad() const { return node_->grad; }
    bool has_grad() const { return node_ && node_->grad.size() > 0; }
    void zero_grad() { node_->grad.resize(0, 0); }

    Eigen::Index rows() const { return node_->value.rows(); }
    Eigen::Index cols() const { return node_->value.cols(); }
    double item() const;
    bool requires_grad() const { return node_ && node_->requires_grad; }
    bool defined() const { return static_cast<bool>(node_); }

    /// Backpropagates from this 1x1 tensor, accumulating into every reachable leaf.
    void backward() const;

    const std::shared_ptr<Node>& node() const { return node_; }

private:
    friend Tensor make_result(Matrix, std::initializer_list<Tensor>, std::function<void(Node&)>);
    std::shared_ptr<Node> node_;
};

/// Disables graph construction on this thread while alive.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};
bool grad_enabled() noexcept;

Tensor make_result(Matrix value, std::initializer_list<Tensor> parents, std::function<void(Node&)> backward);

// Arithmetic
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& a, const Tensor& row);  // broadcast a 1xC row over every row of a
Tensor add_constant(const Tensor& a, const Matrix& c);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T

// Nonlinearities and normalization
Tensor relu(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
/// Row-wise softmax; with `causal`, entry (i, j) is masked for j > i.
Tensor softmax_rows(const Tensor& x, bool causal = false);

// Indexing
Tensor embedding(const Tensor& table, std::span<const int> ids);
Tensor slice_cols(const Tensor& a, Eigen::Index start, Eigen::Index count);
Tensor slice_rows(const Tensor& a, Eigen::Index start, Eigen::Index count);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Reductions
Tensor sum(const Tensor& a);
Tensor mean_rows(const Tensor& a);  // 1xC
/// sqrt(sum(a^2) + eps) as a 1x1 tensor.
Tensor l2_norm(const Tensor& a, double eps = 1e-12);
/// Sum over rows of -log softmax(logits_i)[targets_i].
Tensor cross_entropy_sum(const Tensor& logits, std::span<const int> targets);
/// Full-vocabulary log-probabilities of `ids` at row `row` (1 x ids.size()).
Tensor log_softmax_select(const Tensor& logits, Eigen::Index row, std::span<const int> ids);

}  // namespace clarity::autograd
