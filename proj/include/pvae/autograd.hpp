#ifndef PVAE_AUTOGRAD_HPP
#define PVAE_AUTOGRAD_HPP

// Reverse-mode autodiff on a per-step tape. Each training step builds a fresh
// tape; backward() walks it in reverse creation order and deposits gradients
// of parameter leaves into the owning ParamStore.

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "pvae/tensor.hpp"

namespace pvae {

template <typename T>
struct ParamEntry {
    Tensor<T> value;
    Tensor<T> grad;
    bool trainable = true;
};

template <typename T>
class ParamStore {
public:
    ParamEntry<T>& add(const std::string& name, Tensor<T> init, bool trainable = true) {
        PVAE_CHECK(!entries_.count(name), "duplicate parameter name '" << name << "'");
        ParamEntry<T> e;
        e.grad = Tensor<T>::zeros(init.shape());
        e.value = std::move(init);
        e.trainable = trainable;
        return entries_[name] = std::move(e);
    }

    bool has(const std::string& name) const { return entries_.count(name) != 0; }

    ParamEntry<T>& at(const std::string& name) {
        auto it = entries_.find(name);
        PVAE_CHECK(it != entries_.end(), "unknown parameter '" << name << "'");
        return it->second;
    }
    const ParamEntry<T>& at(const std::string& name) const {
        auto it = entries_.find(name);
        PVAE_CHECK(it != entries_.end(), "unknown parameter '" << name << "'");
        return it->second;
    }

    void zero_grads() {
        for (auto& [k, e] : entries_) e.grad.fill(T(0));
    }

    // Name-ordered iteration keeps optimizer updates and serialization stable.
    std::map<std::string, ParamEntry<T>>& entries() { return entries_; }
    const std::map<std::string, ParamEntry<T>>& entries() const { return entries_; }

    std::map<std::string, Tensor<T>> gradients() const {
        std::map<std::string, Tensor<T>> g;
        for (auto& [k, e] : entries_)
            if (e.trainable) g.emplace(k, e.grad);
        return g;
    }

    int64_t trainable_scalar_count() const {
        int64_t n = 0;
        for (auto& [k, e] : entries_)
            if (e.trainable) n += e.value.numel();
        return n;
    }

private:
    std::map<std::string, ParamEntry<T>> entries_;
};

struct Value {
    int idx = -1;
    bool valid() const { return idx >= 0; }
};

template <typename T>
class Tape {
public:
    struct Node {
        Tensor<T> val;
        Tensor<T> grad;
        std::vector<int> parents;
        std::function<void(Tape&, Node&)> back;
        bool needs_grad = false;
        std::string param_name;  // non-empty for parameter leaves
    };

    explicit Tape(ParamStore<T>* store = nullptr) : store_(store) {}

    Value constant(Tensor<T> v) {
        return push(std::move(v), {}, nullptr, false);
    }

    Value param(const std::string& name) {
        PVAE_CHECK(store_, "tape has no parameter store");
        auto it = param_nodes_.find(name);
        if (it != param_nodes_.end()) return Value{it->second};
        ParamEntry<T>& e = store_->at(name);
        Value v = push(e.value, {}, nullptr, e.trainable);
        nodes_[v.idx].param_name = name;
        param_nodes_[name] = v.idx;
        return v;
    }

    const Tensor<T>& val(Value v) const { return nodes_.at(v.idx).val; }
    const Tensor<T>& grad(Value v) const { return nodes_.at(v.idx).grad; }
    bool needs_grad(Value v) const { return nodes_.at(v.idx).needs_grad; }
    size_t size() const { return nodes_.size(); }

    Value push(Tensor<T> v, std::vector<int> parents,
               std::function<void(Tape&, Node&)> back, bool needs_grad) {
        Node n;
        n.val = std::move(v);
        n.parents = std::move(parents);
        n.back = std::move(back);
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return Value{static_cast<int>(nodes_.size()) - 1};
    }

    Value make_op(Tensor<T> v, std::vector<Value> parents,
                  std::function<void(Tape&, Node&)> back) {
        bool ng = false;
        std::vector<int> p;
        p.reserve(parents.size());
        for (Value pv : parents) {
            p.push_back(pv.idx);
            ng = ng || nodes_[pv.idx].needs_grad;
        }
        return push(std::move(v), std::move(p), ng ? std::move(back) : nullptr, ng);
    }

    // Gradient sink for a parent node; no-op target for constants.
    Tensor<T>* grad_sink(int idx) {
        Node& n = nodes_[idx];
        if (!n.needs_grad) return nullptr;
        if (n.grad.numel() == 0) n.grad = Tensor<T>::zeros(n.val.shape());
        return &n.grad;
    }

    void backward(Value loss) {
        Node& ln = nodes_.at(loss.idx);
        PVAE_CHECK(ln.val.numel() == 1, "backward expects a scalar loss, got shape "
                                            << shape_str(ln.val.shape()));
        PVAE_CHECK(ln.needs_grad,
                   "backward on a detached value: loss does not depend on any trainable parameter");
        ln.grad = Tensor<T>::full(ln.val.shape(), T(1));
        for (int i = loss.idx; i >= 0; --i) {
            Node& n = nodes_[i];
            if (!n.needs_grad || !n.back || n.grad.numel() == 0) continue;
            n.back(*this, n);
        }
        if (store_) {
            for (auto& [name, idx] : param_nodes_) {
                Node& n = nodes_[idx];
                ParamEntry<T>& e = store_->at(name);
                if (!e.trainable || n.grad.numel() == 0) continue;
                for (int64_t k = 0; k < e.grad.numel(); ++k) e.grad[k] += n.grad[k];
            }
        }
    }

    ParamStore<T>* store() { return store_; }

private:
    std::vector<Node> nodes_;
    std::map<std::string, int> param_nodes_;
    ParamStore<T>* store_;
};

// ---------------------------------------------------------------------------
// Elementwise and reduction ops.

namespace ag {

template <typename T>
using Node = typename Tape<T>::Node;

template <typename T>
Value unary_op(Tape<T>& t, Value x, const std::function<T(T)>& f,
               const std::function<T(T /*x*/, T /*y*/)>& dfdx) {
    const Tensor<T>& xv = t.val(x);
    Tensor<T> y(xv.shape());
    for (int64_t i = 0; i < xv.numel(); ++i) y[i] = f(xv[i]);
    int xi = x.idx;
    return t.make_op(std::move(y), {x}, [xi, dfdx](Tape<T>& tp, Node<T>& n) {
        Tensor<T>* gx = tp.grad_sink(xi);
        if (!gx) return;
        const Tensor<T>& xval = tp.val(Value{xi});
        for (int64_t i = 0; i < n.grad.numel(); ++i)
            (*gx)[i] += n.grad[i] * dfdx(xval[i], n.val[i]);
    });
}

template <typename T>
void check_same_shape(Tape<T>& t, Value a, Value b, const char* op) {
    PVAE_CHECK(t.val(a).same_shape(t.val(b)), op << ": shape mismatch " << shape_str(t.val(a).shape())
                                                 << " vs " << shape_str(t.val(b).shape()));
}

template <typename T>
Value add(Tape<T>& t, Value a, Value b) {
    check_same_shape(t, a, b, "add");
    const Tensor<T>&av = t.val(a), &bv = t.val(b);
    Tensor<T> y(av.shape());
    for (int64_t i = 0; i < av.numel(); ++i) y[i] = av[i] + bv[i];
    int ai = a.idx, bi = b.idx;
    return t.make_op(std::move(y), {a, b}, [ai, bi](Tape<T>& tp, Node<T>& n) {
        if (Tensor<T>* g = tp.grad_sink(ai))
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*g)[i] += n.grad[i];
        if (Tensor<T>* g = tp.grad_sink(bi))
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*g)[i] += n.grad[i];
    });
}

template <typename T>
Value sub(Tape<T>& t, Value a, Value b) {
    check_same_shape(t, a, b, "sub");
    const Tensor<T>&av = t.val(a), &bv = t.val(b);
    Tensor<T> y(av.shape());
    for (int64_t i = 0; i < av.numel(); ++i) y[i] = av[i] - bv[i];
    int ai = a.idx, bi = b.idx;
    return t.make_op(std::move(y), {a, b}, [ai, bi](Tape<T>& tp, Node<T>& n) {
        if (Tensor<T>* g = tp.grad_sink(ai))
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*g)[i] += n.grad[i];
        if (Tensor<T>* g = tp.grad_sink(bi))
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*g)[i] -= n.grad[i];
    });
}

template <typename T>
Value mul(Tape<T>& t, Value a, Value b) {
    check_same_shape(t, a, b, "mul");
    const Tensor<T>&av = t.val(a), &bv = t.val(b);
    Tensor<T> y(av.shape());
    for (int64_t i = 0; i < av.numel(); ++i) y[i] = av[i] * bv[i];
    int ai = a.idx, bi = b.idx;
    return t.make_op(std::move(y), {a, b}, [ai, bi](Tape<T>& tp, Node<T>& n) {
        const Tensor<T>&aval = tp.val(Value{ai}), &bval = tp.val(Value{bi});
        if (Tensor<T>* g = tp.grad_sink(ai))
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*g)[i] += n.grad[i] * bval[i];
        if (Tensor<T>* g = tp.grad_sink(bi))
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*g)[i] += n.grad[i] * aval[i];
    });
}

template <typename T>
Value div(Tape<T>& t, Value a, Value b) {
    check_same_shape(t, a, b, "div");
    const Tensor<T>&av = t.val(a), &bv = t.val(b);
    Tensor<T> y(av.shape());
    for (int64_t i = 0; i < av.numel(); ++i) y[i] = av[i] / bv[i];
    int ai = a.idx, bi = b.idx;
    return t.make_op(std::move(y), {a, b}, [ai, bi](Tape<T>& tp, Node<T>& n) {
        const Tensor<T>&aval = tp.val(Value{ai}), &bval = tp.val(Value{bi});
        if (Tensor<T>* g = tp.grad_sink(ai))
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*g)[i] += n.grad[i] / bval[i];
        if (Tensor<T>* g = tp.grad_sink(bi))
            for (int64_t i = 0; i < n.grad.numel(); ++i)
                (*g)[i] -= n.grad[i] * aval[i] / (bval[i] * bval[i]);
    });
}

template <typename T>
Value add_scalar(Tape<T>& t, Value x, T c) {
    return unary_op<T>(t, x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <typename T>
Value mul_scalar(Tape<T>& t, Value x, T c) {
    return unary_op<T>(t, x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Value neg(Tape<T>& t, Value x) { return mul_scalar(t, x, T(-1)); }

// c - x, elementwise.
template <typename T>
Value rsub_scalar(Tape<T>& t, T c, Value x) {
    return unary_op<T>(t, x, [c](T v) { return c - v; }, [](T, T) { return T(-1); });
}

template <typename T>
Value exp_(Tape<T>& t, Value x) {
    return unary_op<T>(t, x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Value log_(Tape<T>& t, Value x) {
    return unary_op<T>(t, x, [](T v) { return std::log(v); }, [](T xv, T) { return T(1) / xv; });
}

template <typename T>
Value square(Tape<T>& t, Value x) {
    return unary_op<T>(t, x, [](T v) { return v * v; }, [](T xv, T) { return T(2) * xv; });
}

template <typename T>
Value tanh_(Tape<T>& t, Value x) {
    return unary_op<T>(t, x, [](T v) { return std::tanh(v); },
                       [](T, T y) { return T(1) - y * y; });
}

template <typename T>
inline T sigmoid_scalar(T v) {
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    T e = std::exp(v);
    return e / (T(1) + e);
}

template <typename T>
Value sigmoid_(Tape<T>& t, Value x) {
    return unary_op<T>(t, x, [](T v) { return sigmoid_scalar(v); },
                       [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Value relu(Tape<T>& t, Value x) {
    return unary_op<T>(t, x, [](T v) { return v > T(0) ? v : T(0); },
                       [](T xv, T) { return xv > T(0) ? T(1) : T(0); });
}

template <typename T>
Value leaky_relu(Tape<T>& t, Value x, T slope) {
    return unary_op<T>(t, x, [slope](T v) { return v > T(0) ? v : slope * v; },
                       [slope](T xv, T) { return xv > T(0) ? T(1) : slope; });
}

// Zero gradient outside (lo, hi); values are pinned to the boundary.
template <typename T>
Value clamp(Tape<T>& t, Value x, T lo, T hi) {
    return unary_op<T>(t, x,
                       [lo, hi](T v) { return v < lo ? lo : (v > hi ? hi : v); },
                       [lo, hi](T xv, T) { return (xv > lo && xv < hi) ? T(1) : T(0); });
}

template <typename T>
Value sum_all(Tape<T>& t, Value x) {
    const Tensor<T>& xv = t.val(x);
    T s = T(0);
    for (int64_t i = 0; i < xv.numel(); ++i) s += xv[i];
    int xi = x.idx;
    return t.make_op(Tensor<T>::scalar(s), {x}, [xi](Tape<T>& tp, Node<T>& n) {
        if (Tensor<T>* g = tp.grad_sink(xi)) {
            T gv = n.grad[0];
            for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += gv;
        }
    });
}

template <typename T>
Value mean_all(Tape<T>& t, Value x) {
    T inv = T(1) / static_cast<T>(t.val(x).numel());
    return mul_scalar(t, sum_all(t, x), inv);
}

template <typename T>
Value reshape(Tape<T>& t, Value x, Shape s) {
    Tensor<T> y = t.val(x).reshaped(s);
    int xi = x.idx;
    return t.make_op(std::move(y), {x}, [xi](Tape<T>& tp, Node<T>& n) {
        if (Tensor<T>* g = tp.grad_sink(xi))
            for (int64_t i = 0; i < n.grad.numel(); ++i) (*g)[i] += n.grad[i];
    });
}

// Last-axis concatenation (channels in NHWC).
template <typename T>
Value concat_last(Tape<T>& t, const std::vector<Value>& parts) {
    PVAE_CHECK(!parts.empty(), "concat_last: empty input list");
    const Tensor<T>& first = t.val(parts[0]);
    Shape out_shape = first.shape();
    int rank = first.ndim();
    int64_t lead = first.numel() / first.dim(rank - 1);
    int total_c = 0;
    std::vector<int> widths;
    for (Value p : parts) {
        const Tensor<T>& pv = t.val(p);
        PVAE_CHECK(pv.ndim() == rank, "concat_last: rank mismatch");
        for (int a = 0; a + 1 < rank; ++a)
            PVAE_CHECK(pv.dim(a) == first.dim(a), "concat_last: leading shape mismatch");
        widths.push_back(pv.dim(rank - 1));
        total_c += pv.dim(rank - 1);
    }
    out_shape[rank - 1] = total_c;
    Tensor<T> y(out_shape);
    {
        int64_t base = 0;
        for (size_t pi = 0; pi < parts.size(); ++pi) {
            const Tensor<T>& pv = t.val(parts[pi]);
            int w = widths[pi];
            for (int64_t r = 0; r < lead; ++r)
                for (int c = 0; c < w; ++c) y[r * total_c + base + c] = pv[r * w + c];
            base += w;
        }
    }
    std::vector<int> pidx;
    for (Value p : parts) pidx.push_back(p.idx);
    std::vector<Value> parents(parts);
    return t.make_op(std::move(y), parents,
                     [pidx, widths, lead, total_c](Tape<T>& tp, Node<T>& n) {
                         int64_t base = 0;
                         for (size_t pi = 0; pi < pidx.size(); ++pi) {
                             int w = widths[pi];
                             if (Tensor<T>* g = tp.grad_sink(pidx[pi])) {
                                 for (int64_t r = 0; r < lead; ++r)
                                     for (int c = 0; c < w; ++c)
                                         (*g)[r * w + c] += n.grad[r * total_c + base + c];
                             }
                             base += w;
                         }
                     });
}

// Weighted sum with a fixed (non-differentiated) coefficient tensor.
template <typename T>
Value weighted_sum_all(Tape<T>& t, Value x, const Tensor<T>& coeff) {
    const Tensor<T>& xv = t.val(x);
    PVAE_CHECK(xv.same_shape(coeff), "weighted_sum_all: coefficient shape "
                                         << shape_str(coeff.shape()) << " vs value "
                                         << shape_str(xv.shape()));
    T s = T(0);
    for (int64_t i = 0; i < xv.numel(); ++i) s += xv[i] * coeff[i];
    int xi = x.idx;
    Tensor<T> c = coeff;
    return t.make_op(Tensor<T>::scalar(s), {x}, [xi, c](Tape<T>& tp, Node<T>& n) {
        if (Tensor<T>* g = tp.grad_sink(xi)) {
            T gv = n.grad[0];
            for (int64_t i = 0; i < g->numel(); ++i) (*g)[i] += gv * c[i];
        }
    });
}

}  // namespace ag
}  // namespace pvae

#endif
