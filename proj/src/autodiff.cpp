#include "multiref/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>
#include <utility>

#include "multiref/kernels.hpp"

namespace multiref {

namespace {

thread_local bool g_grad_enabled = true;

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> bw) {
    bool rg = false;
    for (auto& p : parents) {
        p->touch_count.fetch_add(1, std::memory_order_relaxed);
        rg = rg || p->requires_grad;
    }
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (g_grad_enabled && rg) {
        n->requires_grad = true;
        n->parents = std::move(parents);
        n->backward_fn = std::move(bw);
    }
    return n;
}

}  // namespace

Tensor& Node::ensure_grad() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
}

void Node::accumulate_grad(const Tensor& g) {
    ensure_grad();
    if (!grad.same_shape(g)) throw contract_violation("gradient shape mismatch");
    for (size_t i = 0; i < grad.numel(); ++i) grad[i] += g[i];
}

Var variable(Tensor value, bool requires_grad) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return n;
}

Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = false;
    return n;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void backward(const Var& loss) {
    if (!loss) throw contract_violation("backward: null loss");
    if (loss->value.numel() != 1) throw contract_violation("backward: loss must be scalar");
    if (!loss->requires_grad) throw contract_violation("backward: loss does not require grad");

    // Iterative DFS topological order; strong refs keep the tape alive until done.
    std::vector<Var> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Var, size_t>> stack;
    stack.emplace_back(loss, 0);
    visited.insert(loss.get());
    while (!stack.empty()) {
        auto& top = stack.back();
        Node* node = top.first.get();
        if (top.second < node->parents.size()) {
            Var p = node->parents[top.second++];
            if (p->requires_grad && !visited.count(p.get())) {
                visited.insert(p.get());
                stack.emplace_back(std::move(p), 0);
            }
        } else {
            order.push_back(top.first);
            stack.pop_back();
        }
    }

    loss->ensure_grad();
    loss->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = it->get();
        if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
    }
    // Release the tape; leaf grads persist on the parameter nodes.
    for (auto& v : order) {
        if (v->backward_fn) {
            v->backward_fn = nullptr;
            v->parents.clear();
            v->clear_grad();
        }
    }
}

// --- broadcasting ------------------------------------------------------------

std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b) {
    const size_t nd = std::max(a.size(), b.size());
    std::vector<int> out(nd);
    for (size_t i = 0; i < nd; ++i) {
        const int da = i < nd - a.size() ? 1 : a[i - (nd - a.size())];
        const int db = i < nd - b.size() ? 1 : b[i - (nd - b.size())];
        if (da != db && da != 1 && db != 1)
            throw config_error("broadcast mismatch " + shape_to_string(a) + " vs " +
                               shape_to_string(b));
        out[i] = std::max(da, db);
    }
    return out;
}

namespace {

struct BCast {
    std::vector<int> out_shape;
    std::vector<size_t> out_stride;
    std::vector<size_t> sa, sb;  // strides into a/b aligned with out dims (0 = broadcast)
    size_t numel = 1;
};

BCast plan_bcast(const std::vector<int>& a, const std::vector<int>& b) {
    BCast p;
    p.out_shape = broadcast_shape(a, b);
    const size_t nd = p.out_shape.size();
    p.sa.assign(nd, 0);
    p.sb.assign(nd, 0);
    std::vector<size_t> stride_a(a.size(), 1), stride_b(b.size(), 1);
    for (size_t i = a.size(); i-- > 1;) stride_a[i - 1] = stride_a[i] * static_cast<size_t>(a[i]);
    for (size_t i = b.size(); i-- > 1;) stride_b[i - 1] = stride_b[i] * static_cast<size_t>(b[i]);
    for (size_t i = 0; i < nd; ++i) {
        if (i >= nd - a.size()) {
            const size_t j = i - (nd - a.size());
            p.sa[i] = (a[j] == 1) ? 0 : stride_a[j];
        }
        if (i >= nd - b.size()) {
            const size_t j = i - (nd - b.size());
            p.sb[i] = (b[j] == 1) ? 0 : stride_b[j];
        }
        p.numel *= static_cast<size_t>(p.out_shape[i]);
    }
    std::vector<size_t>& os = p.out_stride;
    os.assign(nd, 1);
    for (size_t i = nd; i-- > 1;) os[i - 1] = os[i] * static_cast<size_t>(p.out_shape[i]);
    return p;
}

template <class F>
void bcast_iterate(const BCast& p, F&& f) {
    const size_t nd = p.out_shape.size();
    std::vector<int> idx(nd, 0);
    size_t ia = 0, ib = 0;
    for (size_t i = 0; i < p.numel; ++i) {
        f(ia, ib, i);
        // odometer increment
        for (size_t d = nd; d-- > 0;) {
            ++idx[d];
            ia += p.sa[d];
            ib += p.sb[d];
            if (idx[d] < p.out_shape[d]) break;
            ia -= p.sa[d] * static_cast<size_t>(p.out_shape[d]);
            ib -= p.sb[d] * static_cast<size_t>(p.out_shape[d]);
            idx[d] = 0;
        }
    }
}

}  // namespace

Tensor reduce_to_shape(const Tensor& g, const std::vector<int>& shape) {
    if (g.shape() == shape) return g;
    Tensor out(shape);
    BCast p = plan_bcast(shape, g.shape());
    if (p.out_shape != g.shape())
        throw contract_violation("reduce_to_shape: incompatible shapes");
    bcast_iterate(p, [&](size_t ia, size_t ib, size_t) { out[ia] += g[ib]; });
    return out;
}

namespace {

enum class BinOp { Add, Sub, Mul };

Var binary_op(const Var& a, const Var& b, BinOp op) {
    if (a->value.same_shape(b->value)) {
        // fast path
        Tensor out(a->value.shape());
        const Tensor& av = a->value;
        const Tensor& bv = b->value;
        switch (op) {
            case BinOp::Add:
                for (size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
                break;
            case BinOp::Sub:
                for (size_t i = 0; i < out.numel(); ++i) out[i] = av[i] - bv[i];
                break;
            case BinOp::Mul:
                for (size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
                break;
        }
        Var va = a, vb = b;
        return make_op(std::move(out), {a, b}, [va, vb, op](Node& n) {
            const Tensor& g = n.grad;
            if (va->requires_grad) {
                Tensor ga(g.shape());
                switch (op) {
                    case BinOp::Add:
                    case BinOp::Sub:
                        ga = g;
                        break;
                    case BinOp::Mul:
                        for (size_t i = 0; i < g.numel(); ++i) ga[i] = g[i] * vb->value[i];
                        break;
                }
                va->accumulate_grad(ga);
            }
            if (vb->requires_grad) {
                Tensor gb(g.shape());
                switch (op) {
                    case BinOp::Add:
                        gb = g;
                        break;
                    case BinOp::Sub:
                        for (size_t i = 0; i < g.numel(); ++i) gb[i] = -g[i];
                        break;
                    case BinOp::Mul:
                        for (size_t i = 0; i < g.numel(); ++i) gb[i] = g[i] * va->value[i];
                        break;
                }
                vb->accumulate_grad(gb);
            }
        });
    }

    BCast p = plan_bcast(a->value.shape(), b->value.shape());
    Tensor out(p.out_shape);
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    switch (op) {
        case BinOp::Add:
            bcast_iterate(p, [&](size_t ia, size_t ib, size_t i) { out[i] = av[ia] + bv[ib]; });
            break;
        case BinOp::Sub:
            bcast_iterate(p, [&](size_t ia, size_t ib, size_t i) { out[i] = av[ia] - bv[ib]; });
            break;
        case BinOp::Mul:
            bcast_iterate(p, [&](size_t ia, size_t ib, size_t i) { out[i] = av[ia] * bv[ib]; });
            break;
    }
    Var va = a, vb = b;
    return make_op(std::move(out), {a, b}, [va, vb, op, p](Node& n) {
        const Tensor& g = n.grad;
        if (va->requires_grad) {
            Tensor ga(va->value.shape());
            switch (op) {
                case BinOp::Add:
                case BinOp::Sub:
                    bcast_iterate(p, [&](size_t ia, size_t, size_t i) { ga[ia] += g[i]; });
                    break;
                case BinOp::Mul:
                    bcast_iterate(p, [&](size_t ia, size_t ib, size_t i) {
                        ga[ia] += g[i] * vb->value[ib];
                    });
                    break;
            }
            va->accumulate_grad(ga);
        }
        if (vb->requires_grad) {
            Tensor gb(vb->value.shape());
            switch (op) {
                case BinOp::Add:
                    bcast_iterate(p, [&](size_t, size_t ib, size_t i) { gb[ib] += g[i]; });
                    break;
                case BinOp::Sub:
                    bcast_iterate(p, [&](size_t, size_t ib, size_t i) { gb[ib] -= g[i]; });
                    break;
                case BinOp::Mul:
                    bcast_iterate(p, [&](size_t ia, size_t ib, size_t i) {
                        gb[ib] += g[i] * va->value[ia];
                    });
                    break;
            }
            vb->accumulate_grad(gb);
        }
    });
}

}  // namespace

Var add(const Var& a, const Var& b) { return binary_op(a, b, BinOp::Add); }
Var sub(const Var& a, const Var& b) { return binary_op(a, b, BinOp::Sub); }
Var mul(const Var& a, const Var& b) { return binary_op(a, b, BinOp::Mul); }

Var scale(const Var& a, real s) {
    Tensor out = a->value;
    out.scale_(s);
    Var va = a;
    return make_op(std::move(out), {a}, [va, s](Node& n) {
        Tensor g = n.grad;
        g.scale_(s);
        va->accumulate_grad(g);
    });
}

Var add_scalar(const Var& a, real s) {
    Tensor out = a->value;
    for (size_t i = 0; i < out.numel(); ++i) out[i] += s;
    Var va = a;
    return make_op(std::move(out), {a}, [va](Node& n) { va->accumulate_grad(n.grad); });
}

namespace {

template <class FwdF, class BwdF>
Var unary_op(const Var& a, FwdF fwd, BwdF dfd) {
    Tensor out(a->value.shape());
    for (size_t i = 0; i < out.numel(); ++i) out[i] = fwd(a->value[i]);
    Var va = a;
    Tensor saved = out;  // many activations express the derivative via the output
    return make_op(std::move(out), {a}, [va, dfd, saved](Node& n) {
        Tensor g(n.grad.shape());
        for (size_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * dfd(va->value[i], saved[i]);
        va->accumulate_grad(g);
    });
}

}  // namespace

Var abs_op(const Var& a) {
    return unary_op(
        a, [](real x) { return std::fabs(x); },
        [](real x, real) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var relu(const Var& a) {
    return unary_op(
        a, [](real x) { return x > 0.0 ? x : 0.0; },
        [](real x, real) { return x > 0.0 ? 1.0 : 0.0; });
}

Var leaky_relu(const Var& a, real slope) {
    return unary_op(
        a, [slope](real x) { return x > 0.0 ? x : slope * x; },
        [slope](real x, real) { return x > 0.0 ? 1.0 : slope; });
}

Var sigmoid(const Var& a) {
    return unary_op(
        a, [](real x) { return 1.0 / (1.0 + std::exp(-x)); },
        [](real, real y) { return y * (1.0 - y); });
}

Var exp_op(const Var& a) {
    return unary_op(
        a, [](real x) { return std::exp(x); }, [](real, real y) { return y; });
}

Var detach(const Var& a) { return constant(a->value); }

Var sum_all(const Var& a) {
    Tensor out = Tensor::scalar(a->value.sum());
    Var va = a;
    return make_op(std::move(out), {a}, [va](Node& n) {
        Tensor g(va->value.shape(), n.grad[0]);
        va->accumulate_grad(g);
    });
}

Var mean_all(const Var& a) {
    const real inv = 1.0 / static_cast<real>(a->value.numel());
    Tensor out = Tensor::scalar(a->value.sum() * inv);
    Var va = a;
    return make_op(std::move(out), {a}, [va, inv](Node& n) {
        Tensor g(va->value.shape(), n.grad[0] * inv);
        va->accumulate_grad(g);
    });
}

Var sum_axis(const Var& a, int axis, bool keepdim) {
    const auto& sh = a->value.shape();
    if (axis < 0 || axis >= a->value.ndim()) throw config_error("sum_axis: bad axis");
    size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(sh[i]);
    for (int i = axis + 1; i < a->value.ndim(); ++i) inner *= static_cast<size_t>(sh[i]);
    const size_t L = static_cast<size_t>(sh[axis]);

    std::vector<int> out_shape;
    for (int i = 0; i < a->value.ndim(); ++i) {
        if (i == axis) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(sh[i]);
        }
    }
    if (out_shape.empty()) out_shape.push_back(1);
    Tensor out(out_shape);
    const Tensor& av = a->value;
    for (size_t o = 0; o < outer; ++o)
        for (size_t l = 0; l < L; ++l)
            for (size_t in = 0; in < inner; ++in)
                out[o * inner + in] += av[(o * L + l) * inner + in];

    Var va = a;
    return make_op(std::move(out), {a}, [va, outer, inner, L](Node& n) {
        Tensor g(va->value.shape());
        for (size_t o = 0; o < outer; ++o)
            for (size_t l = 0; l < L; ++l)
                for (size_t in = 0; in < inner; ++in)
                    g[(o * L + l) * inner + in] = n.grad[o * inner + in];
        va->accumulate_grad(g);
    });
}

Var reshape(const Var& a, std::vector<int> shape) {
    Tensor out = a->value.reshaped(shape);
    Var va = a;
    return make_op(std::move(out), {a}, [va](Node& n) {
        va->accumulate_grad(n.grad.reshaped(va->value.shape()));
    });
}

Var concat(const std::vector<Var>& xs, int axis) {
    if (xs.empty()) throw std::invalid_argument("concat: empty input list");
    const int nd = xs[0]->value.ndim();
    if (axis < 0 || axis >= nd) throw config_error("concat: bad axis");
    std::vector<int> out_shape = xs[0]->value.shape();
    int total = 0;
    for (const auto& x : xs) {
        if (x->value.ndim() != nd) throw config_error("concat: rank mismatch");
        for (int d = 0; d < nd; ++d)
            if (d != axis && x->value.dim(d) != out_shape[static_cast<size_t>(d)])
                throw config_error("concat: shape mismatch on non-concat axis");
        total += x->value.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total;

    size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(out_shape[static_cast<size_t>(i)]);
    for (int i = axis + 1; i < nd; ++i) inner *= static_cast<size_t>(out_shape[static_cast<size_t>(i)]);

    std::vector<size_t> block_sizes;
    block_sizes.reserve(xs.size());
    for (const auto& x : xs)
        block_sizes.push_back(static_cast<size_t>(x->value.dim(axis)) * inner);
    const size_t row = static_cast<size_t>(total) * inner;

    Tensor out(out_shape);
    size_t off = 0;
    for (size_t xi = 0; xi < xs.size(); ++xi) {
        const size_t blk = block_sizes[xi];
        for (size_t o = 0; o < outer; ++o) {
            const real* src = xs[xi]->value.data() + o * blk;
            std::copy(src, src + blk, out.data() + o * row + off);
        }
        off += blk;
    }

    std::vector<Var> parents = xs;
    return make_op(std::move(out), parents, [parents, block_sizes, outer, row](Node& n) {
        size_t off = 0;
        for (size_t xi = 0; xi < parents.size(); ++xi) {
            const size_t blk = block_sizes[xi];
            if (parents[xi]->requires_grad) {
                Tensor g(parents[xi]->value.shape());
                for (size_t o = 0; o < outer; ++o) {
                    const real* src = n.grad.data() + o * row + off;
                    std::copy(src, src + blk, g.data() + o * blk);
                }
                parents[xi]->accumulate_grad(g);
            }
            off += blk;
        }
    });
}

Var stack_axis0(const std::vector<Var>& xs) {
    std::vector<Var> reshaped;
    reshaped.reserve(xs.size());
    for (const auto& x : xs) {
        std::vector<int> s = x->value.shape();
        s.insert(s.begin(), 1);
        reshaped.push_back(reshape(x, s));
    }
    return concat(reshaped, 0);
}

Var softmax(const Var& a, int axis, bool sorted_reduction) {
    const auto& sh = a->value.shape();
    if (axis < 0 || axis >= a->value.ndim()) throw config_error("softmax: bad axis");
    size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(sh[i]);
    for (int i = axis + 1; i < a->value.ndim(); ++i) inner *= static_cast<size_t>(sh[i]);
    const size_t L = static_cast<size_t>(sh[axis]);

    Tensor out(sh);
    const Tensor& av = a->value;
    std::vector<real> fiber(L);
    for (size_t o = 0; o < outer; ++o) {
        for (size_t in = 0; in < inner; ++in) {
            real m = -1e300;
            for (size_t l = 0; l < L; ++l) m = std::max(m, av[(o * L + l) * inner + in]);
            for (size_t l = 0; l < L; ++l) fiber[l] = std::exp(av[(o * L + l) * inner + in] - m);
            real denom = 0.0;
            if (sorted_reduction) {
                std::vector<real> tmp(fiber);
                std::sort(tmp.begin(), tmp.end());
                for (real v : tmp) denom += v;
            } else {
                for (real v : fiber) denom += v;
            }
            for (size_t l = 0; l < L; ++l) out[(o * L + l) * inner + in] = fiber[l] / denom;
        }
    }

    Var va = a;
    Tensor saved = out;
    return make_op(std::move(out), {a}, [va, saved, outer, inner, L](Node& n) {
        Tensor g(va->value.shape());
        for (size_t o = 0; o < outer; ++o) {
            for (size_t in = 0; in < inner; ++in) {
                real dot = 0.0;
                for (size_t l = 0; l < L; ++l) {
                    const size_t idx = (o * L + l) * inner + in;
                    dot += n.grad[idx] * saved[idx];
                }
                for (size_t l = 0; l < L; ++l) {
                    const size_t idx = (o * L + l) * inner + in;
                    g[idx] = saved[idx] * (n.grad[idx] - dot);
                }
            }
        }
        va->accumulate_grad(g);
    });
}

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    Tensor out = kernels::conv2d_forward(x->value, w->value, b ? &b->value : nullptr, stride, pad);
    std::vector<Var> parents{x, w};
    if (b) parents.push_back(b);
    Var vx = x, vw = w, vb = b;
    return make_op(std::move(out), parents, [vx, vw, vb, stride, pad](Node& n) {
        Tensor gx, gw, gb;
        if (vx->requires_grad) gx = Tensor(vx->value.shape());
        if (vw->requires_grad) gw = Tensor(vw->value.shape());
        if (vb && vb->requires_grad) gb = Tensor(vb->value.shape());
        kernels::conv2d_backward(vx->value, vw->value, n.grad, stride, pad,
                                 gx.empty() ? nullptr : &gx, gw.empty() ? nullptr : &gw,
                                 gb.empty() ? nullptr : &gb);
        if (!gx.empty()) vx->accumulate_grad(gx);
        if (!gw.empty()) vw->accumulate_grad(gw);
        if (!gb.empty()) vb->accumulate_grad(gb);
    });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, real eps) {
    Tensor mean, istd;
    Tensor out =
        kernels::instance_norm_forward(x->value, gamma->value, beta->value, eps, &mean, &istd);
    Var vx = x, vg = gamma, vb = beta;
    return make_op(std::move(out), {x, gamma, beta}, [vx, vg, vb, mean, istd](Node& n) {
        Tensor gx, gg, gb;
        if (vx->requires_grad) gx = Tensor(vx->value.shape());
        if (vg->requires_grad) gg = Tensor(vg->value.shape());
        if (vb->requires_grad) gb = Tensor(vb->value.shape());
        kernels::instance_norm_backward(vx->value, vg->value, mean, istd, n.grad,
                                        gx.empty() ? nullptr : &gx, gg.empty() ? nullptr : &gg,
                                        gb.empty() ? nullptr : &gb);
        if (!gx.empty()) vx->accumulate_grad(gx);
        if (!gg.empty()) vg->accumulate_grad(gg);
        if (!gb.empty()) vb->accumulate_grad(gb);
    });
}

Var avg_pool2(const Var& x) {
    Tensor out = kernels::avg_pool2_forward(x->value);
    const int H = x->value.dim(2), W = x->value.dim(3);
    Var vx = x;
    return make_op(std::move(out), {x}, [vx, H, W](Node& n) {
        vx->accumulate_grad(kernels::avg_pool2_backward(n.grad, H, W));
    });
}

Var upsample_nearest2(const Var& x) {
    Tensor out = kernels::upsample_nearest2_forward(x->value);
    Var vx = x;
    return make_op(std::move(out), {x}, [vx](Node& n) {
        vx->accumulate_grad(kernels::upsample_nearest2_backward(n.grad));
    });
}

Var grid_sample(const Var& x, const Var& grid) {
    Tensor out = kernels::grid_sample_forward(x->value, grid->value);
    Var vx = x, vg = grid;
    return make_op(std::move(out), {x, grid}, [vx, vg](Node& n) {
        Tensor gx, gg;
        if (vx->requires_grad) gx = Tensor(vx->value.shape());
        if (vg->requires_grad) gg = Tensor(vg->value.shape());
        kernels::grid_sample_backward(vx->value, vg->value, n.grad,
                                      gx.empty() ? nullptr : &gx, gg.empty() ? nullptr : &gg);
        if (!gx.empty()) vx->accumulate_grad(gx);
        if (!gg.empty()) vg->accumulate_grad(gg);
    });
}

Var inv2x2(const Var& a) {
    const auto& sh = a->value.shape();
    const int nd = a->value.ndim();
    if (nd < 2 || sh[static_cast<size_t>(nd - 1)] != 2 || sh[static_cast<size_t>(nd - 2)] != 2)
        throw config_error("inv2x2: trailing dims must be 2x2");
    const size_t blocks = a->value.numel() / 4;
    Tensor out(sh);
    const Tensor& av = a->value;
    for (size_t k = 0; k < blocks; ++k) {
        const real a00 = av[4 * k], a01 = av[4 * k + 1], a10 = av[4 * k + 2], a11 = av[4 * k + 3];
        const real det = a00 * a11 - a01 * a10;
        if (std::fabs(det) < 1e-12) throw contract_violation("inv2x2: singular matrix");
        const real inv = 1.0 / det;
        out[4 * k] = a11 * inv;
        out[4 * k + 1] = -a01 * inv;
        out[4 * k + 2] = -a10 * inv;
        out[4 * k + 3] = a00 * inv;
    }
    Var va = a;
    Tensor saved = out;
    return make_op(std::move(out), {a}, [va, saved, blocks](Node& n) {
        // dA = -Inv^T G Inv^T
        Tensor g(va->value.shape());
        for (size_t k = 0; k < blocks; ++k) {
            const real i00 = saved[4 * k], i01 = saved[4 * k + 1], i10 = saved[4 * k + 2],
                       i11 = saved[4 * k + 3];
            const real g00 = n.grad[4 * k], g01 = n.grad[4 * k + 1], g10 = n.grad[4 * k + 2],
                       g11 = n.grad[4 * k + 3];
            // T = Inv^T * G
            const real t00 = i00 * g00 + i10 * g10;
            const real t01 = i00 * g01 + i10 * g11;
            const real t10 = i01 * g00 + i11 * g10;
            const real t11 = i01 * g01 + i11 * g11;
            // dA = -T * Inv^T
            g[4 * k] = -(t00 * i00 + t01 * i01);
            g[4 * k + 1] = -(t00 * i10 + t01 * i11);
            g[4 * k + 2] = -(t10 * i00 + t11 * i01);
            g[4 * k + 3] = -(t10 * i10 + t11 * i11);
        }
        va->accumulate_grad(g);
    });
}

Var matmul2x2(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw config_error("matmul2x2: shape mismatch");
    const auto& sh = a->value.shape();
    const int nd = a->value.ndim();
    if (nd < 2 || sh[static_cast<size_t>(nd - 1)] != 2 || sh[static_cast<size_t>(nd - 2)] != 2)
        throw config_error("matmul2x2: trailing dims must be 2x2");
    const size_t blocks = a->value.numel() / 4;
    Tensor out(sh);
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    for (size_t k = 0; k < blocks; ++k) {
        const real* A = av.data() + 4 * k;
        const real* B = bv.data() + 4 * k;
        real* C = out.data() + 4 * k;
        C[0] = A[0] * B[0] + A[1] * B[2];
        C[1] = A[0] * B[1] + A[1] * B[3];
        C[2] = A[2] * B[0] + A[3] * B[2];
        C[3] = A[2] * B[1] + A[3] * B[3];
    }
    Var va = a, vb = b;
    return make_op(std::move(out), {a, b}, [va, vb, blocks](Node& n) {
        // dA = G B^T ; dB = A^T G
        for (size_t k = 0; k < blocks; ++k) {
            const real* G = n.grad.data() + 4 * k;
            const real* A = va->value.data() + 4 * k;
            const real* B = vb->value.data() + 4 * k;
            if (va->requires_grad) {
                real* dA = va->ensure_grad().data() + 4 * k;
                dA[0] += G[0] * B[0] + G[1] * B[1];
                dA[1] += G[0] * B[2] + G[1] * B[3];
                dA[2] += G[2] * B[0] + G[3] * B[1];
                dA[3] += G[2] * B[2] + G[3] * B[3];
            }
            if (vb->requires_grad) {
                real* dB = vb->ensure_grad().data() + 4 * k;
                dB[0] += A[0] * G[0] + A[2] * G[2];
                dB[1] += A[0] * G[1] + A[2] * G[3];
                dB[2] += A[1] * G[0] + A[3] * G[2];
                dB[3] += A[1] * G[1] + A[3] * G[3];
            }
        }
    });
}

Var slice_axis(const Var& a, int axis, int start, int len) {
    const auto& sh = a->value.shape();
    if (axis < 0 || axis >= a->value.ndim()) throw config_error("slice_axis: bad axis");
    if (start < 0 || len <= 0 || start + len > sh[static_cast<size_t>(axis)])
        throw config_error("slice_axis: range out of bounds");
    size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(sh[i]);
    for (int i = axis + 1; i < a->value.ndim(); ++i) inner *= static_cast<size_t>(sh[i]);
    const size_t L = static_cast<size_t>(sh[axis]);

    std::vector<int> out_shape = sh;
    out_shape[static_cast<size_t>(axis)] = len;
    Tensor out(out_shape);
    for (size_t o = 0; o < outer; ++o) {
        const real* src = a->value.data() + (o * L + start) * inner;
        std::copy(src, src + static_cast<size_t>(len) * inner,
                  out.data() + o * static_cast<size_t>(len) * inner);
    }
    Var va = a;
    return make_op(std::move(out), {a}, [va, outer, inner, L, start, len](Node& n) {
        Tensor g(va->value.shape());
        for (size_t o = 0; o < outer; ++o) {
            const real* src = n.grad.data() + o * static_cast<size_t>(len) * inner;
            real* dst = g.data() + (o * L + start) * inner;
            std::copy(src, src + static_cast<size_t>(len) * inner, dst);
        }
        va->accumulate_grad(g);
    });
}

Var fuse_weighted_sum(const Var& masks, const Var& feats) {
    const Tensor& m = masks->value;
    const Tensor& f = feats->value;
    if (m.ndim() != 5 || f.ndim() != 5)
        throw config_error("fuse_weighted_sum: expected (K,N,M,H,W) and (K,N,C,H,W)");
    const int K = f.dim(0), N = f.dim(1), C = f.dim(2), H = f.dim(3), W = f.dim(4);
    const int M = m.dim(2);
    if (m.dim(0) != K || m.dim(1) != N || m.dim(3) != H || m.dim(4) != W)
        throw config_error("fuse_weighted_sum: mask/feature shape mismatch");
    if (M != 1 && M != C)
        throw config_error("fuse_weighted_sum: mask channels must be 1 or C");

    Tensor out({N, C, H, W});
    std::vector<real> terms(static_cast<size_t>(K));
    const size_t plane = static_cast<size_t>(H) * W;
    for (int n = 0; n < N; ++n) {
        for (int c = 0; c < C; ++c) {
            const int mc = (M == 1) ? 0 : c;
            for (size_t p = 0; p < plane; ++p) {
                for (int k = 0; k < K; ++k) {
                    const size_t fi = (((static_cast<size_t>(k) * N + n) * C + c)) * plane + p;
                    const size_t mi = (((static_cast<size_t>(k) * N + n) * M + mc)) * plane + p;
                    terms[static_cast<size_t>(k)] = m[mi] * f[fi];
                }
                std::sort(terms.begin(), terms.end());
                real s = 0.0;
                for (real v : terms) s += v;
                out[((static_cast<size_t>(n) * C + c)) * plane + p] = s;
            }
        }
    }

    Var vm = masks, vf = feats;
    return make_op(std::move(out), {masks, feats}, [vm, vf, K, N, C, H, W, M](Node& nd) {
        const size_t plane = static_cast<size_t>(H) * W;
        Tensor gm, gf;
        if (vm->requires_grad) gm = Tensor(vm->value.shape());
        if (vf->requires_grad) gf = Tensor(vf->value.shape());
        for (int n = 0; n < N; ++n) {
            for (int c = 0; c < C; ++c) {
                const int mc = (M == 1) ? 0 : c;
                for (size_t p = 0; p < plane; ++p) {
                    const real g = nd.grad[((static_cast<size_t>(n) * C + c)) * plane + p];
                    for (int k = 0; k < K; ++k) {
                        const size_t fi = (((static_cast<size_t>(k) * N + n) * C + c)) * plane + p;
                        const size_t mi = (((static_cast<size_t>(k) * N + n) * M + mc)) * plane + p;
                        if (!gf.empty()) gf[fi] += g * vm->value[mi];
                        if (!gm.empty()) gm[mi] += g * vf->value[fi];
                    }
                }
            }
        }
        if (!gm.empty()) vm->accumulate_grad(gm);
        if (!gf.empty()) vf->accumulate_grad(gf);
    });
}

}  // namespace multiref
