#include "ckda/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace ckda {

namespace {

thread_local bool g_grad_enabled = true;

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

bool track(std::initializer_list<Var> parents) {
    if (!g_grad_enabled) return false;
    for (const auto& p : parents)
        if (p && p->requires_grad) return true;
    return false;
}

Var node_from(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backfn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backfn = std::move(backfn);
    return n;
}

int64_t leading_rows(const Tensor& t) {
    // rows when the last axis is treated as the feature axis
    return t.numel() / t.dim(t.rank() - 1);
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value))
        throw StateError(std::string(op) + ": shape mismatch " + shape_str(a->value.shape()) +
                         " vs " + shape_str(b->value.shape()));
}

}  // namespace

Var make_leaf(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

Var make_const(Tensor value) { return make_leaf(std::move(value), false); }

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(const Var& root) {
    if (!root) throw StateError("backward: null root");
    if (root->value.numel() != 1) throw StateError("backward: root must be scalar");
    if (!root->requires_grad) return;

    // iterative post-order topological sort over grad-requiring nodes
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->grad_buf().fill(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backfn) n->backfn(*n);
    }
}

namespace ag {

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += b->value[i];
    if (!track({a, b})) return make_const(std::move(out));
    return node_from(std::move(out), {a, b}, [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            Node* p = self.parents[static_cast<size_t>(k)].get();
            if (!p->requires_grad) continue;
            Tensor& g = p->grad_buf();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    if (!track({a, b})) return make_const(std::move(out));
    return node_from(std::move(out), {a, b}, [](Node& self) {
        if (self.parents[0]->requires_grad) {
            Tensor& g = self.parents[0]->grad_buf();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (self.parents[1]->requires_grad) {
            Tensor& g = self.parents[1]->grad_buf();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    if (!track({a, b})) return make_const(std::move(out));
    return node_from(std::move(out), {a, b}, [](Node& self) {
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        if (pa->requires_grad) {
            Tensor& g = pa->grad_buf();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            Tensor& g = pb->grad_buf();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * pa->value[i];
        }
    });
}

Var affine(const Var& x, double m, double c) {
    Tensor out = x->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = m * out[i] + c;
    if (!track({x})) return make_const(std::move(out));
    return node_from(std::move(out), {x}, [m](Node& self) {
        Tensor& g = self.parents[0]->grad_buf();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += m * self.grad[i];
    });
}

Var relu(const Var& x) {
    Tensor out = x->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    if (!track({x})) return make_const(std::move(out));
    return node_from(std::move(out), {x}, [](Node& self) {
        Tensor& g = self.parents[0]->grad_buf();
        const Tensor& v = self.parents[0]->value;
        for (int64_t i = 0; i < g.numel(); ++i)
            if (v[i] > 0.0) g[i] += self.grad[i];
    });
}

Var sigmoid(const Var& x) {
    Tensor out = x->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0 / (1.0 + std::exp(-out[i]));
    if (!track({x})) return make_const(std::move(out));
    return node_from(std::move(out), {x}, [](Node& self) {
        Tensor& g = self.parents[0]->grad_buf();
        for (int64_t i = 0; i < g.numel(); ++i) {
            double s = self.value[i];
            g[i] += self.grad[i] * s * (1.0 - s);
        }
    });
}

Var gelu(const Var& x) {
    static constexpr double kInvSqrt2 = 0.70710678118654752440;
    static constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    Tensor out = x->value;
    for (int64_t i = 0; i < out.numel(); ++i)
        out[i] = 0.5 * out[i] * (1.0 + std::erf(out[i] * kInvSqrt2));
    if (!track({x})) return make_const(std::move(out));
    return node_from(std::move(out), {x}, [](Node& self) {
        Tensor& g = self.parents[0]->grad_buf();
        const Tensor& v = self.parents[0]->value;
        for (int64_t i = 0; i < g.numel(); ++i) {
            double xi = v[i];
            double cdf = 0.5 * (1.0 + std::erf(xi * kInvSqrt2));
            double pdf = kInvSqrt2Pi * std::exp(-0.5 * xi * xi);
            g[i] += self.grad[i] * (cdf + xi * pdf);
        }
    });
}

// ------------------------------------------------------------- linear algebra

Var linear(const Var& x, const Var& w, const Var& b) {
    const Tensor& xv = x->value;
    const Tensor& wv = w->value;
    if (wv.rank() != 2) throw StateError("linear: weight must be 2-D");
    const int k = wv.dim(0);
    const int n = wv.dim(1);
    if (xv.dim(xv.rank() - 1) != k)
        throw ConfigError("linear: input feature dim " +
                          std::to_string(xv.dim(xv.rank() - 1)) + " != weight rows " +
                          std::to_string(k));
    if (b && (b->value.rank() != 1 || b->value.dim(0) != n))
        throw StateError("linear: bias shape mismatch");

    const int64_t rows = leading_rows(xv);
    Shape out_shape = xv.shape();
    out_shape.back() = n;
    Tensor out(out_shape);
    {
        CMap xm(xv.data(), rows, k);
        CMap wm(wv.data(), k, n);
        MMap om(out.data(), rows, n);
        om.noalias() = xm * wm;
        if (b) {
            CMap bm(b->value.data(), 1, n);
            om.rowwise() += bm.row(0);
        }
    }
    std::vector<Var> parents = {x, w};
    if (b) parents.push_back(b);
    if (!track({x, w, b})) return make_const(std::move(out));
    return node_from(std::move(out), std::move(parents), [rows, k, n](Node& self) {
        Node* px = self.parents[0].get();
        Node* pw = self.parents[1].get();
        CMap gm(self.grad.data(), rows, n);
        if (px->requires_grad) {
            MMap gx(px->grad_buf().data(), rows, k);
            CMap wm(pw->value.data(), k, n);
            gx.noalias() += gm * wm.transpose();
        }
        if (pw->requires_grad) {
            MMap gw(pw->grad_buf().data(), k, n);
            CMap xm(px->value.data(), rows, k);
            gw.noalias() += xm.transpose() * gm;
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
            MMap gb(self.parents[2]->grad_buf().data(), 1, n);
            gb.row(0) += gm.colwise().sum();
        }
    });
}

Var matmul(const Var& a, const Var& b, bool trans_a, bool trans_b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.rank() != 2 || bv.rank() != 2) throw StateError("matmul: operands must be 2-D");
    if (trans_a && trans_b) throw StateError("matmul: double transpose unsupported");
    const int m = trans_a ? av.dim(1) : av.dim(0);
    const int k = trans_a ? av.dim(0) : av.dim(1);
    const int kb = trans_b ? bv.dim(1) : bv.dim(0);
    const int n = trans_b ? bv.dim(0) : bv.dim(1);
    if (k != kb) throw StateError("matmul: inner dimension mismatch");

    Tensor out({m, n});
    {
        CMap am(av.data(), av.dim(0), av.dim(1));
        CMap bm(bv.data(), bv.dim(0), bv.dim(1));
        MMap om(out.data(), m, n);
        if (!trans_a && !trans_b)
            om.noalias() = am * bm;
        else if (trans_a)
            om.noalias() = am.transpose() * bm;
        else
            om.noalias() = am * bm.transpose();
    }
    if (!track({a, b})) return make_const(std::move(out));
    return node_from(std::move(out), {a, b}, [m, n, trans_a, trans_b](Node& self) {
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        CMap gm(self.grad.data(), m, n);
        CMap am(pa->value.data(), pa->value.dim(0), pa->value.dim(1));
        CMap bm(pb->value.data(), pb->value.dim(0), pb->value.dim(1));
        if (pa->requires_grad) {
            MMap ga(pa->grad_buf().data(), pa->value.dim(0), pa->value.dim(1));
            if (!trans_a && !trans_b)
                ga.noalias() += gm * bm.transpose();
            else if (trans_a)
                ga.noalias() += bm * gm.transpose();
            else  // trans_b
                ga.noalias() += gm * bm;
        }
        if (pb->requires_grad) {
            MMap gb(pb->grad_buf().data(), pb->value.dim(0), pb->value.dim(1));
            if (!trans_a && !trans_b)
                gb.noalias() += am.transpose() * gm;
            else if (trans_a)
                gb.noalias() += am * gm;
            else  // trans_b
                gb.noalias() += gm.transpose() * am;
        }
    });
}

Var bmm(const Var& a, const Var& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.rank() != 3 || bv.rank() != 3) throw StateError("bmm: operands must be 3-D");
    if (av.dim(0) != bv.dim(0) || av.dim(2) != bv.dim(1))
        throw StateError("bmm: shape mismatch " + shape_str(av.shape()) + " x " +
                         shape_str(bv.shape()));
    const int nb = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
    Tensor out({nb, m, n});
    for (int i = 0; i < nb; ++i) {
        CMap am(av.data() + static_cast<int64_t>(i) * m * k, m, k);
        CMap bm(bv.data() + static_cast<int64_t>(i) * k * n, k, n);
        MMap om(out.data() + static_cast<int64_t>(i) * m * n, m, n);
        om.noalias() = am * bm;
    }
    if (!track({a, b})) return make_const(std::move(out));
    return node_from(std::move(out), {a, b}, [nb, m, k, n](Node& self) {
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        for (int i = 0; i < nb; ++i) {
            CMap gm(self.grad.data() + static_cast<int64_t>(i) * m * n, m, n);
            CMap am(pa->value.data() + static_cast<int64_t>(i) * m * k, m, k);
            CMap bm(pb->value.data() + static_cast<int64_t>(i) * k * n, k, n);
            if (pa->requires_grad) {
                MMap ga(pa->grad_buf().data() + static_cast<int64_t>(i) * m * k, m, k);
                ga.noalias() += gm * bm.transpose();
            }
            if (pb->requires_grad) {
                MMap gb(pb->grad_buf().data() + static_cast<int64_t>(i) * k * n, k, n);
                gb.noalias() += am.transpose() * gm;
            }
        }
    });
}

// ------------------------------------------------------------------- structure

namespace {

// out[i] = in[map[i]]; backward scatters through the same map.
Var apply_map(const Var& x, Shape out_shape, std::shared_ptr<std::vector<int64_t>> map) {
    const Tensor& xv = x->value;
    Tensor out(std::move(out_shape));
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = xv[(*map)[static_cast<size_t>(i)]];
    if (!track({x})) return make_const(std::move(out));
    return node_from(std::move(out), {x}, [map](Node& self) {
        Tensor& g = self.parents[0]->grad_buf();
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            g[(*map)[static_cast<size_t>(i)]] += self.grad[i];
    });
}

std::vector<int64_t> patch_map(int h, int w, int c, int patch) {
    // token-major index -> pixel-major index, one image
    const int gh = h / patch, gw = w / patch;
    std::vector<int64_t> map(static_cast<size_t>(h) * w * c);
    size_t o = 0;
    for (int gy = 0; gy < gh; ++gy)
        for (int gx = 0; gx < gw; ++gx)
            for (int py = 0; py < patch; ++py)
                for (int px = 0; px < patch; ++px)
                    for (int ch = 0; ch < c; ++ch) {
                        int y = gy * patch + py, x = gx * patch + px;
                        map[o++] = (static_cast<int64_t>(y) * w + x) * c + ch;
                    }
    return map;
}

}  // namespace

Var reshape(const Var& x, Shape shape) {
    Tensor out = x->value.reshaped(std::move(shape));
    if (!track({x})) return make_const(std::move(out));
    return node_from(std::move(out), {x}, [](Node& self) {
        Tensor& g = self.parents[0]->grad_buf();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
    });
}

Var permute_axes(const Var& x, const std::vector<int>& perm) {
    const Tensor& xv = x->value;
    const int r = xv.rank();
    if (static_cast<int>(perm.size()) != r) throw StateError("permute_axes: bad perm size");
    Shape out_shape(static_cast<size_t>(r));
    for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = xv.dim(perm[static_cast<size_t>(i)]);

    std::vector<int64_t> in_strides(static_cast<size_t>(r), 1);
    for (int i = r - 2; i >= 0; --i)
        in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * xv.dim(i + 1);

    auto map = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(xv.numel()));
    std::vector<int> idx(static_cast<size_t>(r), 0);
    for (int64_t o = 0; o < xv.numel(); ++o) {
        int64_t src = 0;
        for (int i = 0; i < r; ++i)
            src += static_cast<int64_t>(idx[static_cast<size_t>(i)]) *
                   in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
        (*map)[static_cast<size_t>(o)] = src;
        for (int i = r - 1; i >= 0; --i) {
            if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
            idx[static_cast<size_t>(i)] = 0;
        }
    }
    return apply_map(x, std::move(out_shape), std::move(map));
}

Var slice_last(const Var& x, int start, int len) {
    const Tensor& xv = x->value;
    const int last = xv.dim(xv.rank() - 1);
    if (start < 0 || len <= 0 || start + len > last) throw StateError("slice_last: out of range");
    const int64_t rows = leading_rows(xv);
    Shape out_shape = xv.shape();
    out_shape.back() = len;
    auto map = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(rows) * len);
    size_t o = 0;
    for (int64_t rr = 0; rr < rows; ++rr)
        for (int j = 0; j < len; ++j) (*map)[o++] = rr * last + start + j;
    return apply_map(x, std::move(out_shape), std::move(map));
}

Var concat0(const Var& a, const Var& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.rank() != bv.rank() || av.rank() < 1) throw StateError("concat0: rank mismatch");
    for (int i = 1; i < av.rank(); ++i)
        if (av.dim(i) != bv.dim(i)) throw StateError("concat0: trailing shape mismatch");
    Shape out_shape = av.shape();
    out_shape[0] += bv.dim(0);
    Tensor out(out_shape);
    std::copy(av.vec().begin(), av.vec().end(), out.vec().begin());
    std::copy(bv.vec().begin(), bv.vec().end(), out.vec().begin() + av.numel());
    if (!track({a, b})) return make_const(std::move(out));
    const int64_t na = av.numel();
    return node_from(std::move(out), {a, b}, [na](Node& self) {
        if (self.parents[0]->requires_grad) {
            Tensor& g = self.parents[0]->grad_buf();
            for (int64_t i = 0; i < na; ++i) g[i] += self.grad[i];
        }
        if (self.parents[1]->requires_grad) {
            Tensor& g = self.parents[1]->grad_buf();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[na + i];
        }
    });
}

Var gather_rows(const Var& x, std::vector<int> idx) {
    const Tensor& xv = x->value;
    if (xv.rank() != 2) throw StateError("gather_rows: input must be 2-D");
    const int d = xv.dim(1);
    auto map = std::make_shared<std::vector<int64_t>>(idx.size() * static_cast<size_t>(d));
    size_t o = 0;
    for (int r : idx) {
        if (r < 0 || r >= xv.dim(0)) throw StateError("gather_rows: index out of range");
        for (int j = 0; j < d; ++j) (*map)[o++] = static_cast<int64_t>(r) * d + j;
    }
    return apply_map(x, {static_cast<int>(idx.size()), d}, std::move(map));
}

Var select_row(const Var& x, int t) {
    const Tensor& xv = x->value;
    if (xv.rank() != 3) throw StateError("select_row: input must be 3-D");
    const int bsz = xv.dim(0), rows = xv.dim(1), d = xv.dim(2);
    if (t < 0 || t >= rows) throw StateError("select_row: index out of range");
    auto map = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(bsz) * d);
    size_t o = 0;
    for (int i = 0; i < bsz; ++i)
        for (int j = 0; j < d; ++j)
            (*map)[o++] = (static_cast<int64_t>(i) * rows + t) * d + j;
    return apply_map(x, {bsz, d}, std::move(map));
}

Var prepend_row(const Var& x, const Var& row) {
    const Tensor& xv = x->value;
    const Tensor& rv = row->value;
    if (xv.rank() != 3 || rv.rank() != 1 || rv.dim(0) != xv.dim(2))
        throw StateError("prepend_row: shape mismatch");
    const int bsz = xv.dim(0), t = xv.dim(1), d = xv.dim(2);
    Tensor out({bsz, t + 1, d});
    for (int i = 0; i < bsz; ++i) {
        double* dst = out.data() + static_cast<int64_t>(i) * (t + 1) * d;
        std::copy(rv.data(), rv.data() + d, dst);
        const double* src = xv.data() + static_cast<int64_t>(i) * t * d;
        std::copy(src, src + static_cast<int64_t>(t) * d, dst + d);
    }
    if (!track({x, row})) return make_const(std::move(out));
    return node_from(std::move(out), {x, row}, [bsz, t, d](Node& self) {
        if (self.parents[0]->requires_grad) {
            Tensor& g = self.parents[0]->grad_buf();
            for (int i = 0; i < bsz; ++i) {
                const double* gs = self.grad.data() + (static_cast<int64_t>(i) * (t + 1) + 1) * d;
                double* gd = g.data() + static_cast<int64_t>(i) * t * d;
                for (int64_t j = 0; j < static_cast<int64_t>(t) * d; ++j) gd[j] += gs[j];
            }
        }
        if (self.parents[1]->requires_grad) {
            Tensor& g = self.parents[1]->grad_buf();
            for (int i = 0; i < bsz; ++i) {
                const double* gs = self.grad.data() + static_cast<int64_t>(i) * (t + 1) * d;
                for (int j = 0; j < d; ++j) g[j] += gs[j];
            }
        }
    });
}

Var add_rows(const Var& x, const Var& rows) {
    const Tensor& xv = x->value;
    const Tensor& rv = rows->value;
    if (xv.rank() != 3 || rv.rank() != 2 || rv.dim(0) != xv.dim(1) || rv.dim(1) != xv.dim(2))
        throw StateError("add_rows: shape mismatch");
    const int bsz = xv.dim(0), t = xv.dim(1), d = xv.dim(2);
    Tensor out = xv;
    for (int i = 0; i < bsz; ++i) {
        double* dst = out.data() + static_cast<int64_t>(i) * t * d;
        for (int64_t j = 0; j < static_cast<int64_t>(t) * d; ++j) dst[j] += rv[j];
    }
    if (!track({x, rows})) return make_const(std::move(out));
    return node_from(std::move(out), {x, rows}, [bsz, t, d](Node& self) {
        if (self.parents[0]->requires_grad) {
            Tensor& g = self.parents[0]->grad_buf();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (self.parents[1]->requires_grad) {
            Tensor& g = self.parents[1]->grad_buf();
            for (int i = 0; i < bsz; ++i) {
                const double* gs = self.grad.data() + static_cast<int64_t>(i) * t * d;
                for (int64_t j = 0; j < static_cast<int64_t>(t) * d; ++j) g[j] += gs[j];
            }
        }
    });
}

Var patchify(const Var& images, int patch) {
    const Tensor& v = images->value;
    if (v.rank() != 4) throw StateError("patchify: expected (B,H,W,C)");
    const int bsz = v.dim(0), h = v.dim(1), w = v.dim(2), c = v.dim(3);
    if (patch <= 0 || h % patch != 0 || w % patch != 0)
        throw ConfigError("patchify: image " + std::to_string(h) + "x" + std::to_string(w) +
                          " not divisible by patch size " + std::to_string(patch));
    const int m = (h / patch) * (w / patch);
    const int dtok = patch * patch * c;
    auto one = patch_map(h, w, c, patch);
    auto map = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(v.numel()));
    const int64_t per = static_cast<int64_t>(h) * w * c;
    for (int i = 0; i < bsz; ++i)
        for (int64_t j = 0; j < per; ++j)
            (*map)[static_cast<size_t>(i * per + j)] = i * per + one[static_cast<size_t>(j)];
    return apply_map(images, {bsz, m, dtok}, std::move(map));
}

Var depatchify(const Var& tokens, int h, int w, int c, int patch) {
    const Tensor& v = tokens->value;
    if (v.rank() != 3) throw StateError("depatchify: expected (B,M,Dtok)");
    const int bsz = v.dim(0);
    if (patch <= 0 || h % patch != 0 || w % patch != 0)
        throw ConfigError("depatchify: geometry not divisible by patch size");
    if (v.dim(1) != (h / patch) * (w / patch) || v.dim(2) != patch * patch * c)
        throw StateError("depatchify: token shape does not match geometry");
    auto fwd = patch_map(h, w, c, patch);  // token idx -> pixel idx
    const int64_t per = static_cast<int64_t>(h) * w * c;
    auto map = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(v.numel()));
    for (int64_t j = 0; j < per; ++j) {
        // invert: pixel o comes from token position j where fwd[j] == o
        (*map)[static_cast<size_t>(fwd[static_cast<size_t>(j)])] = j;
    }
    for (int i = 1; i < bsz; ++i)
        for (int64_t j = 0; j < per; ++j)
            (*map)[static_cast<size_t>(i * per + j)] = i * per + (*map)[static_cast<size_t>(j)];
    return apply_map(tokens, {bsz, h, w, c}, std::move(map));
}

// ------------------------------------------------- normalization/regularizers

Var softmax_last(const Var& x) {
    const Tensor& xv = x->value;
    const int n = xv.dim(xv.rank() - 1);
    const int64_t rows = leading_rows(xv);
    Tensor out(xv.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * n;
        double* o = out.data() + r * n;
        double mx = in[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (int j = 0; j < n; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (int j = 0; j < n; ++j) o[j] /= sum;
    }
    if (!track({x})) return make_const(std::move(out));
    return node_from(std::move(out), {x}, [rows, n](Node& self) {
        Tensor& g = self.parents[0]->grad_buf();
        for (int64_t r = 0; r < rows; ++r) {
            const double* s = self.value.data() + r * n;
            const double* go = self.grad.data() + r * n;
            double dot = 0.0;
            for (int j = 0; j < n; ++j) dot += go[j] * s[j];
            double* gi = g.data() + r * n;
            for (int j = 0; j < n; ++j) gi[j] += s[j] * (go[j] - dot);
        }
    });
}

namespace {

// Shared core for LN/IN/BN(training): y = (x - mean)/sqrt(var+eps) over groups,
// population variance. dx = (1/sigma) * (gy - mean(gy) - xhat * mean(gy*xhat)).
struct GroupNormPlan {
    // Each group is a list of flat indices sharing one mean/variance.
    int64_t group_count = 0;
    int64_t group_size = 0;
    std::function<int64_t(int64_t group, int64_t member)> index;
};

}  // namespace

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
    const Tensor& xv = x->value;
    const int n = xv.dim(xv.rank() - 1);
    const int64_t rows = leading_rows(xv);
    if (gamma->value.numel() != n || beta->value.numel() != n)
        throw StateError("layer_norm: affine parameter size mismatch");

    Tensor xhat(xv.shape());
    Tensor inv_sigma({static_cast<int>(rows)});
    Tensor out(xv.shape());
    for (int64_t r = 0; r < rows; ++r) {
        const double* in = xv.data() + r * n;
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += in[j];
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
        var /= n;
        double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[r] = is;
        for (int j = 0; j < n; ++j) {
            double xh = (in[j] - mean) * is;
            xhat[r * n + j] = xh;
            out[r * n + j] = gamma->value[j] * xh + beta->value[j];
        }
    }
    if (!track({x, gamma, beta})) return make_const(std::move(out));
    auto xh = std::make_shared<Tensor>(std::move(xhat));
    auto is = std::make_shared<Tensor>(std::move(inv_sigma));
    return node_from(std::move(out), {x, gamma, beta}, [rows, n, xh, is](Node& self) {
        Node* px = self.parents[0].get();
        Node* pg = self.parents[1].get();
        Node* pb = self.parents[2].get();
        for (int64_t r = 0; r < rows; ++r) {
            const double* go = self.grad.data() + r * n;
            const double* xhr = xh->data() + r * n;
            if (pg->requires_grad || pb->requires_grad) {
                for (int j = 0; j < n; ++j) {
                    if (pg->requires_grad) pg->grad_buf()[j] += go[j] * xhr[j];
                    if (pb->requires_grad) pb->grad_buf()[j] += go[j];
                }
            }
            if (px->requires_grad) {
                double mean_g = 0.0, mean_gx = 0.0;
                for (int j = 0; j < n; ++j) {
                    double gh = go[j] * pg->value[j];
                    mean_g += gh;
                    mean_gx += gh * xhr[j];
                }
                mean_g /= n;
                mean_gx /= n;
                double* gx = px->grad_buf().data() + r * n;
                for (int j = 0; j < n; ++j) {
                    double gh = go[j] * pg->value[j];
                    gx[j] += (*is)[r] * (gh - mean_g - xhr[j] * mean_gx);
                }
            }
        }
    });
}

Var instance_norm(const Var& x, double eps) {
    const Tensor& xv = x->value;
    if (xv.rank() != 3) throw StateError("instance_norm: expected (B,M,C)");
    const int bsz = xv.dim(0), m = xv.dim(1), c = xv.dim(2);
    if (m < 1) throw StateError("instance_norm: empty spatial extent");

    Tensor out(xv.shape());
    Tensor inv_sigma({bsz, c});
    for (int b = 0; b < bsz; ++b) {
        for (int ch = 0; ch < c; ++ch) {
            double mean = 0.0;
            for (int j = 0; j < m; ++j) mean += xv.at3(b, j, ch);
            mean /= m;
            double var = 0.0;
            for (int j = 0; j < m; ++j) {
                double d = xv.at3(b, j, ch) - mean;
                var += d * d;
            }
            var /= m;
            double is = 1.0 / std::sqrt(var + eps);
            inv_sigma.at2(b, ch) = is;
            for (int j = 0; j < m; ++j) out.at3(b, j, ch) = (xv.at3(b, j, ch) - mean) * is;
        }
    }
    if (!track({x})) return make_const(std::move(out));
    auto is = std::make_shared<Tensor>(std::move(inv_sigma));
    return node_from(std::move(out), {x}, [bsz, m, c, is](Node& self) {
        Tensor& g = self.parents[0]->grad_buf();
        for (int b = 0; b < bsz; ++b) {
            for (int ch = 0; ch < c; ++ch) {
                double mean_g = 0.0, mean_gx = 0.0;
                for (int j = 0; j < m; ++j) {
                    double go = self.grad.at3(b, j, ch);
                    mean_g += go;
                    mean_gx += go * self.value.at3(b, j, ch);
                }
                mean_g /= m;
                mean_gx /= m;
                for (int j = 0; j < m; ++j) {
                    double go = self.grad.at3(b, j, ch);
                    double xh = self.value.at3(b, j, ch);
                    g.at3(b, j, ch) += is->at2(b, ch) * (go - mean_g - xh * mean_gx);
                }
            }
        }
    });
}

Var batch_norm(const Var& x, const Var& gamma, const Var& beta, Tensor& running_mean,
               Tensor& running_var, bool training, double momentum, double eps) {
    const Tensor& xv = x->value;
    const int c = xv.dim(xv.rank() - 1);
    const int64_t rows = leading_rows(xv);
    if (gamma->value.numel() != c || beta->value.numel() != c)
        throw StateError("batch_norm: affine parameter size mismatch");
    if (running_mean.numel() != c || running_var.numel() != c)
        throw StateError("batch_norm: running statistic size mismatch");
    if (training && rows < 2)
        throw StateError("batch_norm: training mode requires at least 2 rows per channel");

    Tensor out(xv.shape());
    if (!training) {
        for (int64_t r = 0; r < rows; ++r)
            for (int ch = 0; ch < c; ++ch) {
                double xh = (xv[r * c + ch] - running_mean[ch]) / std::sqrt(running_var[ch] + eps);
                out[r * c + ch] = gamma->value[ch] * xh + beta->value[ch];
            }
        if (!track({x, gamma, beta})) return make_const(std::move(out));
        auto rm = std::make_shared<Tensor>(running_mean);
        auto rv = std::make_shared<Tensor>(running_var);
        return node_from(std::move(out), {x, gamma, beta}, [rows, c, rm, rv, eps](Node& self) {
            Node* px = self.parents[0].get();
            Node* pg = self.parents[1].get();
            Node* pb = self.parents[2].get();
            for (int64_t r = 0; r < rows; ++r)
                for (int ch = 0; ch < c; ++ch) {
                    double go = self.grad[r * c + ch];
                    double is = 1.0 / std::sqrt((*rv)[ch] + eps);
                    if (px->requires_grad)
                        px->grad_buf()[r * c + ch] += go * pg->value[ch] * is;
                    if (pg->requires_grad)
                        pg->grad_buf()[ch] += go * (px->value[r * c + ch] - (*rm)[ch]) * is;
                    if (pb->requires_grad) pb->grad_buf()[ch] += go;
                }
        });
    }

    // training: batch statistics normalize, running statistics updated as a
    // side effect (unbiased variance stored, population variance used).
    Tensor xhat(xv.shape());
    Tensor inv_sigma({c});
    for (int ch = 0; ch < c; ++ch) {
        double mean = 0.0;
        for (int64_t r = 0; r < rows; ++r) mean += xv[r * c + ch];
        mean /= static_cast<double>(rows);
        double var = 0.0;
        for (int64_t r = 0; r < rows; ++r) {
            double d = xv[r * c + ch] - mean;
            var += d * d;
        }
        double var_pop = var / static_cast<double>(rows);
        double var_unbiased = var / static_cast<double>(rows - 1);
        double is = 1.0 / std::sqrt(var_pop + eps);
        inv_sigma[ch] = is;
        for (int64_t r = 0; r < rows; ++r) {
            double xh = (xv[r * c + ch] - mean) * is;
            xhat[r * c + ch] = xh;
            out[r * c + ch] = gamma->value[ch] * xh + beta->value[ch];
        }
        running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean;
        running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * var_unbiased;
    }
    if (!track({x, gamma, beta})) return make_const(std::move(out));
    auto xh = std::make_shared<Tensor>(std::move(xhat));
    auto is = std::make_shared<Tensor>(std::move(inv_sigma));
    return node_from(std::move(out), {x, gamma, beta}, [rows, c, xh, is](Node& self) {
        Node* px = self.parents[0].get();
        Node* pg = self.parents[1].get();
        Node* pb = self.parents[2].get();
        for (int ch = 0; ch < c; ++ch) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (int64_t r = 0; r < rows; ++r) {
                double go = self.grad[r * c + ch];
                sum_g += go;
                sum_gx += go * (*xh)[r * c + ch];
            }
            if (pg->requires_grad) pg->grad_buf()[ch] += sum_gx;
            if (pb->requires_grad) pb->grad_buf()[ch] += sum_g;
            if (px->requires_grad) {
                double mean_g = sum_g / static_cast<double>(rows);
                double mean_gx = sum_gx / static_cast<double>(rows);
                for (int64_t r = 0; r < rows; ++r) {
                    double gh = self.grad[r * c + ch] * pg->value[ch];
                    double mg = mean_g * pg->value[ch];
                    double mgx = mean_gx * pg->value[ch];
                    px->grad_buf()[r * c + ch] +=
                        (*is)[ch] * (gh - mg - (*xh)[r * c + ch] * mgx);
                }
            }
        }
    });
}

Var dropout(const Var& x, double rate, bool training, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout: rate must be in [0,1)");
    if (!training || rate == 0.0) {
        Tensor out = x->value;
        if (!track({x})) return make_const(std::move(out));
        return node_from(std::move(out), {x}, [](Node& self) {
            Tensor& g = self.parents[0]->grad_buf();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        });
    }
    auto mask = std::make_shared<Tensor>(x->value.shape());
    const double keep = 1.0 - rate;
    Tensor out = x->value;
    for (int64_t i = 0; i < out.numel(); ++i) {
        double m = rng.uniform() < rate ? 0.0 : 1.0 / keep;
        (*mask)[i] = m;
        out[i] *= m;
    }
    if (!track({x})) return make_const(std::move(out));
    return node_from(std::move(out), {x}, [mask](Node& self) {
        Tensor& g = self.parents[0]->grad_buf();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * (*mask)[i];
    });
}

// -------------------------------------------------------- reductions & losses

Var mean_all(const Var& x) {
    const int64_t n = x->value.numel();
    double s = 0.0;
    for (double v : x->value.vec()) s += v;
    Tensor out({1});
    out[0] = s / static_cast<double>(n);
    if (!track({x})) return make_const(std::move(out));
    return node_from(std::move(out), {x}, [n](Node& self) {
        Tensor& g = self.parents[0]->grad_buf();
        double go = self.grad[0] / static_cast<double>(n);
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += go;
    });
}

Var l1_mean(const Var& a, const Var& b) {
    require_same_shape(a, b, "l1_mean");
    const int64_t n = a->value.numel();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) s += std::fabs(a->value[i] - b->value[i]);
    Tensor out({1});
    out[0] = s / static_cast<double>(n);
    if (!track({a, b})) return make_const(std::move(out));
    return node_from(std::move(out), {a, b}, [n](Node& self) {
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        double go = self.grad[0] / static_cast<double>(n);
        for (int64_t i = 0; i < n; ++i) {
            double d = pa->value[i] - pb->value[i];
            double sg = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);  // subgradient 0 at 0
            if (pa->requires_grad) pa->grad_buf()[i] += go * sg;
            if (pb->requires_grad) pb->grad_buf()[i] -= go * sg;
        }
    });
}

Var kl_rows_mean(const Var& p, const Var& q) {
    require_same_shape(p, q, "kl_rows_mean");
    const Tensor& pv = p->value;
    const Tensor& qv = q->value;
    const int n = pv.dim(pv.rank() - 1);
    const int64_t rows = leading_rows(pv);
    double total = 0.0;
    for (int64_t i = 0; i < pv.numel(); ++i) {
        if (pv[i] <= 0.0 || qv[i] <= 0.0)
            throw NumericError("kl_rows_mean: non-positive probability entry at " +
                               std::to_string(i));
        total += pv[i] * (std::log(pv[i]) - std::log(qv[i]));
    }
    Tensor out({1});
    out[0] = total / static_cast<double>(rows);
    if (!track({p, q})) return make_const(std::move(out));
    (void)n;
    return node_from(std::move(out), {p, q}, [rows](Node& self) {
        Node* pp = self.parents[0].get();
        Node* pq = self.parents[1].get();
        double go = self.grad[0] / static_cast<double>(rows);
        for (int64_t i = 0; i < pp->value.numel(); ++i) {
            if (pp->requires_grad)
                pp->grad_buf()[i] +=
                    go * (std::log(pp->value[i]) - std::log(pq->value[i]) + 1.0);
            if (pq->requires_grad) pq->grad_buf()[i] -= go * pp->value[i] / pq->value[i];
        }
    });
}

Var cross_entropy(const Var& logits, const std::vector<int>& labels) {
    const Tensor& lv = logits->value;
    if (lv.rank() != 2) throw StateError("cross_entropy: logits must be (B,C)");
    const int bsz = lv.dim(0), c = lv.dim(1);
    if (static_cast<int>(labels.size()) != bsz)
        throw StateError("cross_entropy: label count mismatch");
    for (int label : labels)
        if (label < 0 || label >= c)
            throw StateError("cross_entropy: label " + std::to_string(label) +
                             " out of range for " + std::to_string(c) + " classes");

    auto probs = std::make_shared<Tensor>(lv.shape());
    double total = 0.0;
    for (int i = 0; i < bsz; ++i) {
        const double* in = lv.data() + static_cast<int64_t>(i) * c;
        double mx = in[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, in[j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) sum += std::exp(in[j] - mx);
        double lse = mx + std::log(sum);
        total += lse - in[labels[static_cast<size_t>(i)]];
        for (int j = 0; j < c; ++j)
            (*probs)[static_cast<int64_t>(i) * c + j] = std::exp(in[j] - lse);
    }
    Tensor out({1});
    out[0] = total / bsz;
    if (!track({logits})) return make_const(std::move(out));
    auto lab = std::make_shared<std::vector<int>>(labels);
    return node_from(std::move(out), {logits}, [probs, lab, bsz, c](Node& self) {
        Tensor& g = self.parents[0]->grad_buf();
        double go = self.grad[0] / bsz;
        for (int i = 0; i < bsz; ++i)
            for (int j = 0; j < c; ++j) {
                double delta = (j == (*lab)[static_cast<size_t>(i)]) ? 1.0 : 0.0;
                g[static_cast<int64_t>(i) * c + j] +=
                    go * ((*probs)[static_cast<int64_t>(i) * c + j] - delta);
            }
    });
}

Var l2_normalize_rows(const Var& x) {
    const Tensor& xv = x->value;
    if (xv.rank() != 2) throw StateError("l2_normalize_rows: input must be 2-D");
    const int rows = xv.dim(0), d = xv.dim(1);
    Tensor out(xv.shape());
    Tensor norms({rows});
    for (int r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += xv.at2(r, j) * xv.at2(r, j);
        double norm = std::sqrt(s);
        if (!(norm > 0.0) || !std::isfinite(norm))
            throw NumericError("l2_normalize_rows: zero or non-finite norm at row " +
                               std::to_string(r));
        norms[r] = norm;
        for (int j = 0; j < d; ++j) out.at2(r, j) = xv.at2(r, j) / norm;
    }
    if (!track({x})) return make_const(std::move(out));
    auto nm = std::make_shared<Tensor>(std::move(norms));
    return node_from(std::move(out), {x}, [rows, d, nm](Node& self) {
        Tensor& g = self.parents[0]->grad_buf();
        for (int r = 0; r < rows; ++r) {
            double dot = 0.0;
            for (int j = 0; j < d; ++j) dot += self.grad.at2(r, j) * self.value.at2(r, j);
            for (int j = 0; j < d; ++j)
                g.at2(r, j) += (self.grad.at2(r, j) - self.value.at2(r, j) * dot) / (*nm)[r];
        }
    });
}

Var rows_l2_dist(const Var& a, const Var& b) {
    require_same_shape(a, b, "rows_l2_dist");
    const Tensor& av = a->value;
    if (av.rank() != 2) throw StateError("rows_l2_dist: inputs must be 2-D");
    const int rows = av.dim(0), d = av.dim(1);
    Tensor out({rows});
    for (int r = 0; r < rows; ++r) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) {
            double diff = av.at2(r, j) - b->value.at2(r, j);
            s += diff * diff;
        }
        out[r] = std::sqrt(s);
    }
    if (!track({a, b})) return make_const(std::move(out));
    return node_from(std::move(out), {a, b}, [rows, d](Node& self) {
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        for (int r = 0; r < rows; ++r) {
            double dist = self.value[r];
            if (dist <= 0.0) continue;  // subgradient 0 at coincident rows
            double go = self.grad[r] / dist;
            for (int j = 0; j < d; ++j) {
                double diff = pa->value.at2(r, j) - pb->value.at2(r, j);
                if (pa->requires_grad) pa->grad_buf().at2(r, j) += go * diff;
                if (pb->requires_grad) pb->grad_buf().at2(r, j) -= go * diff;
            }
        }
    });
}

}  // namespace ag

}  // namespace ckda
