#include "attnstyle/autograd.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace attnstyle::ag {

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

Var leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>(std::move(value));
    n->requires_grad = requires_grad;
    return n;
}

namespace {

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
    auto n = std::make_shared<Node>(std::move(value));
    for (const auto& p : parents)
        if (p->requires_grad) n->requires_grad = true;
    if (n->requires_grad) {
        n->parents = std::move(parents);
        n->backward_fn = std::move(bw);
    }
    return n;
}

void ensure_grad(const Var& v) {
    if (v->grad.numel() == 0) v->grad = Tensor(v->value.shape());
}

}  // namespace

void backward(const Var& root) {
    if (root->value.numel() != 1)
        throw std::invalid_argument("backward: root must be a scalar");
    if (!root->requires_grad) return;

    // Post-order DFS, then walk in reverse.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad = Tensor::scalar(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_fn && n->grad.numel() != 0) n->backward_fn(*n);
    }
}

Var add(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "add");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            ensure_grad(a);
            for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
        }
        if (b->requires_grad) {
            ensure_grad(b);
            for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "sub");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            ensure_grad(a);
            for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
        }
        if (b->requires_grad) {
            ensure_grad(b);
            for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] -= n.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a->value, b->value, "mul");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            ensure_grad(a);
            for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            ensure_grad(b);
            for (int64_t i = 0; i < n.grad.numel(); ++i) b->grad[i] += n.grad[i] * a->value[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
    return make_op(std::move(out), {a}, [a, s](Node& n) {
        ensure_grad(a);
        for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i] * s;
    });
}

Var abs(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::abs(out[i]);
    return make_op(std::move(out), {a}, [a](Node& n) {
        ensure_grad(a);
        for (int64_t i = 0; i < n.grad.numel(); ++i) {
            double x = a->value[i];
            a->grad[i] += n.grad[i] * (x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0));
        }
    });
}

Var tanh(const Var& a) {
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(out[i]);
    auto n = make_op(std::move(out), {a}, nullptr);
    if (n->requires_grad) {
        Var self_hint = n;  // broken cycle: closure captures value copy instead
        Tensor y = n->value;
        n->backward_fn = [a, y](Node& nn) {
            ensure_grad(a);
            for (int64_t i = 0; i < nn.grad.numel(); ++i)
                a->grad[i] += nn.grad[i] * (1.0 - y[i] * y[i]);
        };
    }
    return n;
}

namespace {

struct MatmulDims {
    int64_t batch, n, m, p;
};

MatmulDims matmul_dims(const Tensor& a, const Tensor& b) {
    if (a.rank() == 2 && b.rank() == 2) {
        if (a.dim(1) != b.dim(0)) throw std::invalid_argument("matmul: inner dim mismatch");
        return {1, a.dim(0), a.dim(1), b.dim(1)};
    }
    if (a.rank() == 3 && b.rank() == 3) {
        if (a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
            throw std::invalid_argument("matmul: batch/inner dim mismatch");
        return {a.dim(0), a.dim(1), a.dim(2), b.dim(2)};
    }
    throw std::invalid_argument("matmul: expects 2-D x 2-D or 3-D x 3-D");
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
    auto d = matmul_dims(a->value, b->value);
    std::vector<int64_t> out_shape =
        a->value.rank() == 2 ? std::vector<int64_t>{d.n, d.p} : std::vector<int64_t>{d.batch, d.n, d.p};
    Tensor out(out_shape);
    for (int64_t bi = 0; bi < d.batch; ++bi) {
        ConstMatMap A(a->value.data() + bi * d.n * d.m, d.n, d.m);
        ConstMatMap B(b->value.data() + bi * d.m * d.p, d.m, d.p);
        MatMap C(out.data() + bi * d.n * d.p, d.n, d.p);
        C.noalias() = A * B;
    }
    return make_op(std::move(out), {a, b}, [a, b, d](Node& n) {
        for (int64_t bi = 0; bi < d.batch; ++bi) {
            ConstMatMap G(n.grad.data() + bi * d.n * d.p, d.n, d.p);
            if (a->requires_grad) {
                ensure_grad(a);
                ConstMatMap B(b->value.data() + bi * d.m * d.p, d.m, d.p);
                MatMap GA(a->grad.data() + bi * d.n * d.m, d.n, d.m);
                GA.noalias() += G * B.transpose();
            }
            if (b->requires_grad) {
                ensure_grad(b);
                ConstMatMap A(a->value.data() + bi * d.n * d.m, d.n, d.m);
                MatMap GB(b->grad.data() + bi * d.m * d.p, d.m, d.p);
                GB.noalias() += A.transpose() * G;
            }
        }
    });
}

Var transpose_last2(const Var& a) {
    const auto& sh = a->value.shape();
    if (sh.size() != 2 && sh.size() != 3)
        throw std::invalid_argument("transpose_last2: expects 2-D or 3-D");
    int64_t batch = sh.size() == 3 ? sh[0] : 1;
    int64_t r = sh[sh.size() - 2], c = sh[sh.size() - 1];
    std::vector<int64_t> out_shape = sh;
    std::swap(out_shape[out_shape.size() - 2], out_shape[out_shape.size() - 1]);
    Tensor out(out_shape);
    for (int64_t bi = 0; bi < batch; ++bi)
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j)
                out[bi * r * c + j * r + i] = a->value[bi * r * c + i * c + j];
    return make_op(std::move(out), {a}, [a, batch, r, c](Node& n) {
        ensure_grad(a);
        for (int64_t bi = 0; bi < batch; ++bi)
            for (int64_t i = 0; i < r; ++i)
                for (int64_t j = 0; j < c; ++j)
                    a->grad[bi * r * c + i * c + j] += n.grad[bi * r * c + j * r + i];
    });
}

Var softmax_lastdim(const Var& a, const Tensor* additive_mask) {
    const auto& sh = a->value.shape();
    if (sh.empty()) throw std::invalid_argument("softmax_lastdim: rank-0 input");
    int64_t cols = sh.back();
    int64_t rows = a->value.numel() / cols;
    int64_t mask_rows = 0;
    if (additive_mask) {
        if (sh.size() < 2 || additive_mask->shape() !=
                                 std::vector<int64_t>{sh[sh.size() - 2], cols})
            throw std::invalid_argument("softmax_lastdim: mask must match trailing two axes");
        mask_rows = sh[sh.size() - 2];
    }
    Tensor out(sh);
    for (int64_t r = 0; r < rows; ++r) {
        const double* x = a->value.data() + r * cols;
        const double* m = additive_mask ? additive_mask->data() + (r % mask_rows) * cols : nullptr;
        double mx = -std::numeric_limits<double>::infinity();
        for (int64_t j = 0; j < cols; ++j) {
            double v = x[j] + (m ? m[j] : 0.0);
            mx = std::max(mx, v);
        }
        double sum = 0.0;
        double* y = out.data() + r * cols;
        for (int64_t j = 0; j < cols; ++j) {
            double v = x[j] + (m ? m[j] : 0.0);
            y[j] = std::exp(v - mx);
            sum += y[j];
        }
        for (int64_t j = 0; j < cols; ++j) y[j] /= sum;
    }
    Tensor y_copy = out;
    return make_op(std::move(out), {a}, [a, y_copy, rows, cols](Node& n) {
        ensure_grad(a);
        for (int64_t r = 0; r < rows; ++r) {
            const double* y = y_copy.data() + r * cols;
            const double* g = n.grad.data() + r * cols;
            double dot = 0.0;
            for (int64_t j = 0; j < cols; ++j) dot += y[j] * g[j];
            double* ga = a->grad.data() + r * cols;
            for (int64_t j = 0; j < cols; ++j) ga[j] += y[j] * (g[j] - dot);
        }
    });
}

Var reshape(const Var& a, std::vector<int64_t> new_shape) {
    Tensor out = a->value.reshaped(std::move(new_shape));
    return make_op(std::move(out), {a}, [a](Node& n) {
        ensure_grad(a);
        for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
    });
}

Var take(const Var& a, std::shared_ptr<const std::vector<int64_t>> index,
         std::vector<int64_t> out_shape) {
    if (Tensor::numel_of(out_shape) != static_cast<int64_t>(index->size()))
        throw std::invalid_argument("take: index size does not match out_shape");
    Tensor out(std::move(out_shape));
    for (size_t i = 0; i < index->size(); ++i) out[static_cast<int64_t>(i)] = a->value[(*index)[i]];
    return make_op(std::move(out), {a}, [a, index](Node& n) {
        ensure_grad(a);
        for (size_t i = 0; i < index->size(); ++i)
            a->grad[(*index)[i]] += n.grad[static_cast<int64_t>(i)];
    });
}

Var add_rowvec(const Var& a, const Var& bias) {
    const auto& sh = a->value.shape();
    if (bias->value.rank() != 1 || bias->value.dim(0) != sh.back())
        throw std::invalid_argument("add_rowvec: bias must be [last_dim]");
    int64_t d = sh.back();
    int64_t rows = a->value.numel() / d;
    Tensor out = a->value;
    for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) out[r * d + j] += bias->value[j];
    return make_op(std::move(out), {a, bias}, [a, bias, rows, d](Node& n) {
        if (a->requires_grad) {
            ensure_grad(a);
            for (int64_t i = 0; i < n.grad.numel(); ++i) a->grad[i] += n.grad[i];
        }
        if (bias->requires_grad) {
            ensure_grad(bias);
            for (int64_t r = 0; r < rows; ++r)
                for (int64_t j = 0; j < d; ++j) bias->grad[j] += n.grad[r * d + j];
        }
    });
}

Var sum_all(const Var& a) {
    double s = 0.0;
    for (int64_t i = 0; i < a->value.numel(); ++i) s += a->value[i];
    return make_op(Tensor::scalar(s), {a}, [a](Node& n) {
        ensure_grad(a);
        for (int64_t i = 0; i < a->grad.numel(); ++i) a->grad[i] += n.grad[0];
    });
}

Var mean_all(const Var& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a->value.numel()));
}

Var linear(const Var& x, const Var& W, const Var& b) {
    const auto& sh = x->value.shape();
    int64_t in = sh.back();
    int64_t rows = x->value.numel() / in;
    Var flat = x->value.rank() == 2 ? x : reshape(x, {rows, in});
    Var y = matmul(flat, W);
    if (b) y = add_rowvec(y, b);
    if (x->value.rank() != 2) {
        std::vector<int64_t> out_shape = sh;
        out_shape.back() = W->value.dim(1);
        y = reshape(y, std::move(out_shape));
    }
    return y;
}

}  // namespace attnstyle::ag
