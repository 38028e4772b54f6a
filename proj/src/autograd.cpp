#include "eraser/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

#include "eraser/kernels.hpp"

namespace eraser::ag {

bool& grad_enabled() {
    static bool enabled = true;
    return enabled;
}

Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

Var make_param(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    return n;
}

Var detach(const Var& v) { return constant(v->value); }

namespace {

bool track(const std::vector<Var>& parents) {
    if (!grad_enabled()) return false;
    for (const auto& p : parents)
        if (p->requires_grad) return true;
    return false;
}

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (track(parents)) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(fn);
    }
    return n;
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                    Tensor::shape_str(a->value.shape()) + " vs " +
                                    Tensor::shape_str(b->value.shape()));
}

}  // namespace

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor out(a->value.shape());
    kernels::add(a->value.data(), b->value.data(), out.data(), out.numel());
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad)
            kernels::axpy(1.0, n.grad.data(), a->ensure_grad().data(), n.grad.numel());
        if (b->requires_grad)
            kernels::axpy(1.0, n.grad.data(), b->ensure_grad().data(), n.grad.numel());
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor out(a->value.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = a->value[i] - b->value[i];
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        if (a->requires_grad)
            kernels::axpy(1.0, n.grad.data(), a->ensure_grad().data(), n.grad.numel());
        if (b->requires_grad)
            kernels::axpy(-1.0, n.grad.data(), b->ensure_grad().data(), n.grad.numel());
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor out(a->value.shape());
    kernels::mul(a->value.data(), b->value.data(), out.data(), out.numel());
    return make_op(std::move(out), {a, b}, [a, b](Node& n) {
        const long m = n.grad.numel();
        if (a->requires_grad) {
            Tensor& ga = a->ensure_grad();
            for (long i = 0; i < m; ++i) ga[i] += n.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            Tensor& gb = b->ensure_grad();
            for (long i = 0; i < m; ++i) gb[i] += n.grad[i] * a->value[i];
        }
    });
}

Var scale(const Var& a, double s) {
    Tensor out(a->value.shape());
    kernels::scale(a->value.data(), s, out.data(), out.numel());
    return make_op(std::move(out), {a}, [a, s](Node& n) {
        if (a->requires_grad)
            kernels::axpy(s, n.grad.data(), a->ensure_grad().data(), n.grad.numel());
    });
}

Var add_scalar(const Var& a, double s) {
    Tensor out(a->value.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = a->value[i] + s;
    return make_op(std::move(out), {a}, [a](Node& n) {
        if (a->requires_grad)
            kernels::axpy(1.0, n.grad.data(), a->ensure_grad().data(), n.grad.numel());
    });
}

Var exp_v(const Var& a) {
    Tensor out(a->value.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = std::exp(a->value[i]);
    auto n = make_op(std::move(out), {a}, nullptr);
    if (n->requires_grad) {
        n->backward_fn = [a, keep = n->value](Node& nn) {
            Tensor& ga = a->ensure_grad();
            for (long i = 0; i < nn.grad.numel(); ++i) ga[i] += nn.grad[i] * keep[i];
        };
    }
    return n;
}

Var log_v(const Var& a) {
    Tensor out(a->value.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = std::log(a->value[i]);
    return make_op(std::move(out), {a}, [a](Node& n) {
        Tensor& ga = a->ensure_grad();
        for (long i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i] / a->value[i];
    });
}

Var tanh_v(const Var& a) {
    Tensor out(a->value.shape());
    kernels::tanh_forward(a->value.data(), out.data(), out.numel());
    auto n = make_op(std::move(out), {a}, nullptr);
    if (n->requires_grad) {
        n->backward_fn = [a, keep = n->value](Node& nn) {
            Tensor& ga = a->ensure_grad();
            for (long i = 0; i < nn.grad.numel(); ++i)
                ga[i] += nn.grad[i] * (1.0 - keep[i] * keep[i]);
        };
    }
    return n;
}

Var relu(const Var& a) {
    Tensor out(a->value.shape());
    kernels::relu_forward(a->value.data(), out.data(), out.numel());
    return make_op(std::move(out), {a}, [a](Node& n) {
        kernels::relu_backward(a->value.data(), n.grad.data(), a->ensure_grad().data(),
                               n.grad.numel());
    });
}

Var square(const Var& a) {
    Tensor out(a->value.shape());
    for (long i = 0; i < out.numel(); ++i) out[i] = a->value[i] * a->value[i];
    return make_op(std::move(out), {a}, [a](Node& n) {
        Tensor& ga = a->ensure_grad();
        for (long i = 0; i < n.grad.numel(); ++i) ga[i] += 2.0 * n.grad[i] * a->value[i];
    });
}

Var linear(const Var& x, const Var& W, const Var& b) {
    const int B = x->value.dim(0);
    const int in = x->value.dim(1);
    const int out_dim = W->value.dim(0);
    if (W->value.dim(1) != in)
        throw std::invalid_argument("linear: W columns do not match input width");
    Tensor out({B, out_dim});
    kernels::matmul(x->value.data(), W->value.data(), out.data(), B, in, out_dim,
                    false, true, false);
    for (int r = 0; r < B; ++r)
        for (int c = 0; c < out_dim; ++c) out.at(r, c) += b->value[c];
    return make_op(std::move(out), {x, W, b}, [x, W, b, B, in, out_dim](Node& n) {
        if (x->requires_grad)
            kernels::matmul(n.grad.data(), W->value.data(), x->ensure_grad().data(), B,
                            out_dim, in, false, false, true);
        if (W->requires_grad)
            kernels::matmul(n.grad.data(), x->value.data(), W->ensure_grad().data(),
                            out_dim, B, in, true, false, true);
        if (b->requires_grad) {
            Tensor& gb = b->ensure_grad();
            for (int c = 0; c < out_dim; ++c) {
                double acc = 0.0;
                for (int r = 0; r < B; ++r) acc += n.grad.at(r, c);
                gb[c] += acc;
            }
        }
    });
}

Var conv2d(const Var& x, const Var& W, const Var& b) {
    kernels::ConvDims d{x->value.dim(0), x->value.dim(1), x->value.dim(2),
                        x->value.dim(3), W->value.dim(0), W->value.dim(2),
                        W->value.dim(3)};
    if (W->value.dim(1) != d.c)
        throw std::invalid_argument("conv2d: channel mismatch");
    Tensor out({d.n, d.oc, d.oh(), d.ow()});
    kernels::conv2d_forward(x->value.data(), W->value.data(), b->value.data(),
                            out.data(), d);
    return make_op(std::move(out), {x, W, b}, [x, W, b, d](Node& n) {
        if (x->requires_grad)
            kernels::conv2d_grad_input(n.grad.data(), W->value.data(),
                                       x->ensure_grad().data(), d);
        if (W->requires_grad || b->requires_grad)
            kernels::conv2d_grad_weight(n.grad.data(), x->value.data(),
                                        W->ensure_grad().data(),
                                        b->ensure_grad().data(), d);
    });
}

Var maxpool2(const Var& x) {
    kernels::PoolDims d{x->value.dim(0), x->value.dim(1), x->value.dim(2),
                        x->value.dim(3)};
    Tensor out({d.n, d.c, d.oh(), d.ow()});
    auto argmax = std::make_shared<std::vector<int>>(out.numel());
    kernels::maxpool2_forward(x->value.data(), out.data(), argmax->data(), d);
    return make_op(std::move(out), {x}, [x, argmax, d](Node& n) {
        kernels::maxpool2_backward(n.grad.data(), argmax->data(),
                                   x->ensure_grad().data(), d);
    });
}

Var flatten(const Var& x) {
    const int B = x->value.dim(0);
    const int rest = static_cast<int>(x->value.numel() / B);
    Tensor out({B, rest}, x->value.vec());
    return make_op(std::move(out), {x}, [x](Node& n) {
        kernels::axpy(1.0, n.grad.data(), x->ensure_grad().data(), n.grad.numel());
    });
}

Var slice_cols(const Var& x, int c0, int c1) {
    const int B = x->value.dim(0);
    const int D = x->value.dim(1);
    const int w = c1 - c0;
    Tensor out({B, w});
    for (int r = 0; r < B; ++r)
        for (int c = 0; c < w; ++c) out.at(r, c) = x->value.at(r, c0 + c);
    return make_op(std::move(out), {x}, [x, c0, w, B, D](Node& n) {
        Tensor& gx = x->ensure_grad();
        for (int r = 0; r < B; ++r)
            for (int c = 0; c < w; ++c)
                gx[static_cast<long>(r) * D + c0 + c] += n.grad.at(r, c);
    });
}

Var concat_cols(const Var& a, const Var& b) {
    const int B = a->value.dim(0);
    if (b->value.dim(0) != B) throw std::invalid_argument("concat_cols: row mismatch");
    const int da = a->value.dim(1), db = b->value.dim(1);
    Tensor out({B, da + db});
    for (int r = 0; r < B; ++r) {
        for (int c = 0; c < da; ++c) out.at(r, c) = a->value.at(r, c);
        for (int c = 0; c < db; ++c) out.at(r, da + c) = b->value.at(r, c);
    }
    return make_op(std::move(out), {a, b}, [a, b, B, da, db](Node& n) {
        if (a->requires_grad) {
            Tensor& ga = a->ensure_grad();
            for (int r = 0; r < B; ++r)
                for (int c = 0; c < da; ++c) ga.at(r, c) += n.grad.at(r, c);
        }
        if (b->requires_grad) {
            Tensor& gb = b->ensure_grad();
            for (int r = 0; r < B; ++r)
                for (int c = 0; c < db; ++c) gb.at(r, c) += n.grad.at(r, da + c);
        }
    });
}

Var rows_affine(const Var& x, const std::vector<double>& s,
                const std::vector<double>& t) {
    const int B = x->value.dim(0);
    const int D = x->value.dim(1);
    if (static_cast<int>(s.size()) != D || static_cast<int>(t.size()) != D)
        throw std::invalid_argument("rows_affine: coefficient width mismatch");
    Tensor out({B, D});
    for (int r = 0; r < B; ++r)
        for (int c = 0; c < D; ++c) out.at(r, c) = x->value.at(r, c) * s[c] + t[c];
    return make_op(std::move(out), {x}, [x, s, B, D](Node& n) {
        Tensor& gx = x->ensure_grad();
        for (int r = 0; r < B; ++r)
            for (int c = 0; c < D; ++c)
                gx[static_cast<long>(r) * D + c] += n.grad.at(r, c) * s[c];
    });
}

Var row_sum(const Var& x) {
    const int B = x->value.dim(0);
    const int D = x->value.dim(1);
    Tensor out({B});
    for (int r = 0; r < B; ++r) {
        double acc = 0.0;
        for (int c = 0; c < D; ++c) acc += x->value.at(r, c);
        out[r] = acc;
    }
    return make_op(std::move(out), {x}, [x, B, D](Node& n) {
        Tensor& gx = x->ensure_grad();
        for (int r = 0; r < B; ++r)
            for (int c = 0; c < D; ++c) gx[static_cast<long>(r) * D + c] += n.grad[r];
    });
}

Var sum(const Var& x) {
    double acc = 0.0;
    for (long i = 0; i < x->value.numel(); ++i) acc += x->value[i];
    Tensor out({1}, {acc});
    return make_op(std::move(out), {x}, [x](Node& n) {
        Tensor& gx = x->ensure_grad();
        for (long i = 0; i < gx.numel(); ++i) gx[i] += n.grad[0];
    });
}

Var mean(const Var& x) {
    const double inv = 1.0 / static_cast<double>(x->value.numel());
    return scale(sum(x), inv);
}

Var dot_const(const Var& x, const std::vector<double>& w) {
    if (static_cast<long>(w.size()) != x->value.numel())
        throw std::invalid_argument("dot_const: weight length mismatch");
    double acc = 0.0;
    for (size_t i = 0; i < w.size(); ++i) acc += w[i] * x->value[static_cast<long>(i)];
    Tensor out({1}, {acc});
    return make_op(std::move(out), {x}, [x, w](Node& n) {
        Tensor& gx = x->ensure_grad();
        for (size_t i = 0; i < w.size(); ++i) gx[static_cast<long>(i)] += n.grad[0] * w[i];
    });
}

Var embedding(const Var& table, const std::vector<int>& ids) {
    const int E = table->value.dim(1);
    const int B = static_cast<int>(ids.size());
    Tensor out({B, E});
    for (int r = 0; r < B; ++r)
        for (int c = 0; c < E; ++c) out.at(r, c) = table->value.at(ids[r], c);
    return make_op(std::move(out), {table}, [table, ids, E, B](Node& n) {
        Tensor& gt = table->ensure_grad();
        for (int r = 0; r < B; ++r)
            for (int c = 0; c < E; ++c)
                gt[static_cast<long>(ids[r]) * E + c] += n.grad.at(r, c);
    });
}

Var log_softmax_rows(const Var& x) {
    const int B = x->value.dim(0);
    const int C = x->value.dim(1);
    Tensor out({B, C});
    for (int r = 0; r < B; ++r) {
        double mx = x->value.at(r, 0);
        for (int c = 1; c < C; ++c) mx = std::max(mx, x->value.at(r, c));
        double z = 0.0;
        for (int c = 0; c < C; ++c) z += std::exp(x->value.at(r, c) - mx);
        const double lz = mx + std::log(z);
        for (int c = 0; c < C; ++c) out.at(r, c) = x->value.at(r, c) - lz;
    }
    auto n = make_op(std::move(out), {x}, nullptr);
    if (n->requires_grad) {
        n->backward_fn = [x, keep = n->value, B, C](Node& nn) {
            // d/dx_j = g_j - softmax_j * sum(g)
            Tensor& gx = x->ensure_grad();
            for (int r = 0; r < B; ++r) {
                double gsum = 0.0;
                for (int c = 0; c < C; ++c) gsum += nn.grad.at(r, c);
                for (int c = 0; c < C; ++c)
                    gx[static_cast<long>(r) * C + c] +=
                        nn.grad.at(r, c) - std::exp(keep.at(r, c)) * gsum;
            }
        };
    }
    return n;
}

Var pick_rows(const Var& x, const std::vector<int>& labels) {
    const int B = x->value.dim(0);
    const int C = x->value.dim(1);
    if (static_cast<int>(labels.size()) != B)
        throw std::invalid_argument("pick_rows: label count mismatch");
    Tensor out({B});
    for (int r = 0; r < B; ++r) out[r] = x->value.at(r, labels[r]);
    return make_op(std::move(out), {x}, [x, labels, C](Node& n) {
        Tensor& gx = x->ensure_grad();
        for (size_t r = 0; r < labels.size(); ++r)
            gx[static_cast<long>(r) * C + labels[r]] += n.grad[static_cast<long>(r)];
    });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
    return scale(sum(pick_rows(log_softmax_rows(logits), labels)),
                 -1.0 / static_cast<double>(labels.size()));
}

void backward(const Var& root) {
    if (root->value.numel() != 1)
        throw std::invalid_argument("backward: root must be scalar");
    if (!root->requires_grad) return;

    // iterative post-order DFS
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx].get();
            ++idx;
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad()[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && node->grad.numel() != 0) node->backward_fn(*node);
    }
}

}  // namespace eraser::ag
