#include "pixnerd/autograd.hpp"

#include <cmath>

#include "pixnerd/errors.hpp"

namespace pixnerd {

namespace {

int64_t lead_rows(const Tensor& t) {
    // product of all dims but the last
    if (t.ndim() == 0) throw ContractError("rank-0 tensor has no rows");
    return t.numel() / t.dim(t.ndim() - 1);
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

Param& ParamStore::add(const std::string& name, Tensor init) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    auto p = std::make_unique<Param>();
    p->name = name;
    p->grad = Tensor(init.shape());
    p->value = std::move(init);
    index_[name] = items_.size();
    items_.push_back(std::move(p));
    return *items_.back();
}

Param& ParamStore::get(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return *items_[it->second];
}

const Param& ParamStore::get(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return *items_[it->second];
}

void ParamStore::zero_grad() {
    for (auto& p : items_) p->grad.zero();
}

double ParamStore::grad_norm() const {
    double s = 0.0;
    for (const auto& p : items_)
        for (int64_t i = 0; i < p->grad.numel(); ++i) s += p->grad[i] * p->grad[i];
    return std::sqrt(s);
}

int64_t ParamStore::total_elements() const {
    int64_t n = 0;
    for (const auto& p : items_) n += p->value.numel();
    return n;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Tape::Id Tape::push(Tensor value, bool requires_grad) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return static_cast<Id>(nodes_.size() - 1);
}

Tensor& Tape::grad_buf(Id id) {
    Node& n = node(id);
    if (!n.grad_alloc) {
        n.grad = Tensor(n.value.shape());
        n.grad_alloc = true;
    }
    return n.grad;
}

const Tensor& Tape::grad(Id id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.grad_alloc) throw ContractError("gradient was never produced for node " + std::to_string(id));
    return n.grad;
}

Tape::Id Tape::input(Tensor v) { return push(std::move(v), false); }

Tape::Id Tape::param(Param& p) {
    Id id = push(p.value, true);
    node(id).bound = &p;
    return id;
}

void Tape::backward(Id root) {
    if (val(root).numel() != 1) throw ContractError("backward root must be scalar");
    if (!node(root).requires_grad) throw ContractError("backward root does not require grad");
    grad_buf(root)[0] = 1.0;
    for (Id i = root; i >= 0; --i) {
        Node& n = node(i);
        if (!n.requires_grad || !n.grad_alloc) continue;
        if (n.back) n.back();
        if (n.bound) axpy(n.bound->grad, 1.0, n.grad);
    }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tape::Id Tape::linear(Id x, Id w, Id b) {
    const Tensor& xv = val(x);
    const Tensor& wv = val(w);
    const int in = xv.dim(xv.ndim() - 1);
    if (wv.ndim() != 2 || wv.dim(1) != in)
        throw ContractError("linear: weight " + shape_str(wv.shape()) + " does not accept input " + shape_str(xv.shape()));
    const int out = wv.dim(0);
    const int64_t m = lead_rows(xv);

    Shape yshape = xv.shape();
    yshape.back() = out;
    Tensor y(yshape);
    lin::gemm(y.data(), xv.data(), wv.data(), static_cast<int>(m), in, out, false, true, 1.0, 0.0);
    if (b >= 0) {
        const Tensor& bv = val(b);
        if (bv.numel() != out) throw ContractError("linear: bias size mismatch");
        for (int64_t r = 0; r < m; ++r) {
            double* row = y.data() + r * out;
            for (int j = 0; j < out; ++j) row[j] += bv[j];
        }
    }

    bool rg = requires_grad(x) || requires_grad(w) || (b >= 0 && requires_grad(b));
    Id id = push(std::move(y), rg);
    if (rg) {
        node(id).back = [this, id, x, w, b, m, in, out]() {
            const Tensor& g = grad(id);
            if (requires_grad(x))
                lin::gemm(grad_buf(x).data(), g.data(), val(w).data(), static_cast<int>(m), out, in, false, false, 1.0, 1.0);
            if (requires_grad(w))
                lin::gemm(grad_buf(w).data(), g.data(), val(x).data(), out, static_cast<int>(m), in, true, false, 1.0, 1.0);
            if (b >= 0 && requires_grad(b)) {
                Tensor& gb = grad_buf(b);
                for (int64_t r = 0; r < m; ++r) {
                    const double* row = g.data() + r * out;
                    for (int j = 0; j < out; ++j) gb[j] += row[j];
                }
            }
        };
    }
    return id;
}

Tape::Id Tape::bmm_nt(Id a, Id w) {
    const Tensor& av = val(a);
    const Tensor& wv = val(w);
    if (av.ndim() != 3 || wv.ndim() != 3 || av.dim(0) != wv.dim(0) || av.dim(2) != wv.dim(2))
        throw ContractError("bmm_nt: incompatible shapes " + shape_str(av.shape()) + " vs " + shape_str(wv.shape()));
    const int G = av.dim(0), m = av.dim(1), k = av.dim(2), n = wv.dim(1);

    Tensor y({G, m, n});
#pragma omp parallel for schedule(static)
    for (int g = 0; g < G; ++g)
        lin::gemm(y.data() + static_cast<int64_t>(g) * m * n, av.data() + static_cast<int64_t>(g) * m * k,
                  wv.data() + static_cast<int64_t>(g) * n * k, m, k, n, false, true, 1.0, 0.0);

    bool rg = requires_grad(a) || requires_grad(w);
    Id id = push(std::move(y), rg);
    if (rg) {
        node(id).back = [this, id, a, w, G, m, k, n]() {
            const Tensor& g = grad(id);
            const bool ra = requires_grad(a), rw = requires_grad(w);
            double* ga = ra ? grad_buf(a).data() : nullptr;
            double* gw = rw ? grad_buf(w).data() : nullptr;
            const double* gd = g.data();
            const double* ad = val(a).data();
            const double* wd = val(w).data();
#pragma omp parallel for schedule(static)
            for (int gi = 0; gi < G; ++gi) {
                const int64_t oy = static_cast<int64_t>(gi) * m * n;
                const int64_t oa = static_cast<int64_t>(gi) * m * k;
                const int64_t ow = static_cast<int64_t>(gi) * n * k;
                if (ga) lin::gemm(ga + oa, gd + oy, wd + ow, m, n, k, false, false, 1.0, 1.0);
                if (gw) lin::gemm(gw + ow, gd + oy, ad + oa, n, m, k, true, false, 1.0, 1.0);
            }
        };
    }
    return id;
}

Tape::Id Tape::add(Id a, Id b) { return add_weighted(a, b, 1.0, 1.0); }

Tape::Id Tape::add_weighted(Id a, Id b, double wa, double wb) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (!av.same_shape(bv)) throw ContractError("add: shape mismatch " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Tensor y(av.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = wa * av[i] + wb * bv[i];
    bool rg = requires_grad(a) || requires_grad(b);
    Id id = push(std::move(y), rg);
    if (rg) {
        node(id).back = [this, id, a, b, wa, wb]() {
            const Tensor& g = grad(id);
            if (requires_grad(a)) axpy(grad_buf(a), wa, g);
            if (requires_grad(b)) axpy(grad_buf(b), wb, g);
        };
    }
    return id;
}

Tape::Id Tape::mul(Id a, Id b) {
    const Tensor& av = val(a);
    const Tensor& bv = val(b);
    if (!av.same_shape(bv)) throw ContractError("mul: shape mismatch");
    Tensor y(av.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = av[i] * bv[i];
    bool rg = requires_grad(a) || requires_grad(b);
    Id id = push(std::move(y), rg);
    if (rg) {
        node(id).back = [this, id, a, b]() {
            const Tensor& g = grad(id);
            if (requires_grad(a)) {
                Tensor& ga = grad_buf(a);
                const Tensor& bv = val(b);
                for (int64_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
            }
            if (requires_grad(b)) {
                Tensor& gb = grad_buf(b);
                const Tensor& av = val(a);
                for (int64_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
            }
        };
    }
    return id;
}

Tape::Id Tape::scale(Id a, double c) {
    Tensor y = val(a) * c;
    bool rg = requires_grad(a);
    Id id = push(std::move(y), rg);
    if (rg) {
        node(id).back = [this, id, a, c]() { axpy(grad_buf(a), c, grad(id)); };
    }
    return id;
}

Tape::Id Tape::silu(Id a) {
    const Tensor& av = val(a);
    Tensor y(av.shape());
    for (int64_t i = 0; i < y.numel(); ++i) y[i] = av[i] * sigmoid(av[i]);
    bool rg = requires_grad(a);
    Id id = push(std::move(y), rg);
    if (rg) {
        node(id).back = [this, id, a]() {
            const Tensor& g = grad(id);
            const Tensor& xv = val(a);
            Tensor& ga = grad_buf(a);
            for (int64_t i = 0; i < g.numel(); ++i) {
                const double s = sigmoid(xv[i]);
                ga[i] += g[i] * s * (1.0 + xv[i] * (1.0 - s));
            }
        };
    }
    return id;
}

Tape::Id Tape::rms_norm(Id x, Id gain, double eps) {
    const Tensor& xv = val(x);
    const int d = xv.dim(xv.ndim() - 1);
    const int64_t rows = lead_rows(xv);
    const Tensor* gv = gain >= 0 ? &val(gain) : nullptr;
    if (gv && gv->numel() != d) throw ContractError("rms_norm: gain size mismatch");

    Tensor y(xv.shape());
    auto inv_r = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += xr[j] * xr[j];
        const double ir = 1.0 / std::sqrt(s / d + eps);
        (*inv_r)[static_cast<size_t>(r)] = ir;
        double* yr = y.data() + r * d;
        for (int j = 0; j < d; ++j) yr[j] = xr[j] * ir * (gv ? (*gv)[j] : 1.0);
    }

    bool rg = requires_grad(x) || (gain >= 0 && requires_grad(gain));
    Id id = push(std::move(y), rg);
    if (rg) {
        node(id).back = [this, id, x, gain, rows, d, inv_r]() {
            const Tensor& g = grad(id);
            const Tensor& xv = val(x);
            const Tensor* gv = gain >= 0 ? &val(gain) : nullptr;
            const bool rx = requires_grad(x);
            const bool rgain = gain >= 0 && requires_grad(gain);
            Tensor* gx = rx ? &grad_buf(x) : nullptr;
            Tensor* gg = rgain ? &grad_buf(gain) : nullptr;
            for (int64_t r = 0; r < rows; ++r) {
                const double ir = (*inv_r)[static_cast<size_t>(r)];
                const double* xr = xv.data() + r * d;
                const double* gr = g.data() + r * d;
                if (rx) {
                    double dot = 0.0;
                    for (int j = 0; j < d; ++j) dot += gr[j] * (gv ? (*gv)[j] : 1.0) * xr[j];
                    const double c = dot * ir * ir * ir / d;
                    double* gxr = gx->data() + r * d;
                    for (int j = 0; j < d; ++j) gxr[j] += gr[j] * (gv ? (*gv)[j] : 1.0) * ir - xr[j] * c;
                }
                if (rgain)
                    for (int j = 0; j < d; ++j) (*gg)[j] += gr[j] * xr[j] * ir;
            }
        };
    }
    return id;
}

Tape::Id Tape::row_l2_normalize(Id x, double guard) {
    const Tensor& xv = val(x);
    const int d = xv.dim(xv.ndim() - 1);
    const int64_t rows = lead_rows(xv);

    Tensor y(xv.shape());
    auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d;
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += xr[j] * xr[j];
        const double n = std::sqrt(s);
        (*norms)[static_cast<size_t>(r)] = n;
        double* yr = y.data() + r * d;
        if (n < guard) {
            for (int j = 0; j < d; ++j) yr[j] = xr[j];
        } else {
            for (int j = 0; j < d; ++j) yr[j] = xr[j] / n;
        }
    }

    bool rg = requires_grad(x);
    Id id = push(std::move(y), rg);
    if (rg) {
        node(id).back = [this, id, x, rows, d, guard, norms]() {
            const Tensor& g = grad(id);
            const Tensor& yv = val(id);
            Tensor& gx = grad_buf(x);
            for (int64_t r = 0; r < rows; ++r) {
                const double n = (*norms)[static_cast<size_t>(r)];
                const double* gr = g.data() + r * d;
                double* gxr = gx.data() + r * d;
                if (n < guard) {
                    for (int j = 0; j < d; ++j) gxr[j] += gr[j];
                } else {
                    const double* yr = yv.data() + r * d;
                    double dot = 0.0;
                    for (int j = 0; j < d; ++j) dot += yr[j] * gr[j];
                    for (int j = 0; j < d; ++j) gxr[j] += (gr[j] - yr[j] * dot) / n;
                }
            }
        };
    }
    return id;
}

Tape::Id Tape::slice_last(Id x, int lo, int hi) {
    const Tensor& xv = val(x);
    const int d = xv.dim(xv.ndim() - 1);
    if (lo < 0 || hi > d || lo >= hi) throw ContractError("slice_last: bad range");
    const int64_t rows = lead_rows(xv);
    const int w = hi - lo;

    Shape yshape = xv.shape();
    yshape.back() = w;
    Tensor y(yshape);
    for (int64_t r = 0; r < rows; ++r) {
        const double* xr = xv.data() + r * d + lo;
        double* yr = y.data() + r * w;
        for (int j = 0; j < w; ++j) yr[j] = xr[j];
    }

    bool rg = requires_grad(x);
    Id id = push(std::move(y), rg);
    if (rg) {
        node(id).back = [this, id, x, rows, d, lo, w]() {
            const Tensor& g = grad(id);
            Tensor& gx = grad_buf(x);
            for (int64_t r = 0; r < rows; ++r) {
                const double* gr = g.data() + r * w;
                double* gxr = gx.data() + r * d + lo;
                for (int j = 0; j < w; ++j) gxr[j] += gr[j];
            }
        };
    }
    return id;
}

Tape::Id Tape::reshape(Id x, Shape shape) {
    Tensor y = val(x).reshaped(std::move(shape));
    bool rg = requires_grad(x);
    Id id = push(std::move(y), rg);
    if (rg) {
        node(id).back = [this, id, x]() {
            const Tensor& g = grad(id);
            Tensor& gx = grad_buf(x);
            for (int64_t i = 0; i < g.numel(); ++i) gx[i] += g[i];
        };
    }
    return id;
}

Tape::Id Tape::embedding(Id table, std::vector<int> indices) {
    const Tensor& tv = val(table);
    if (tv.ndim() != 2) throw ContractError("embedding: table must be 2D");
    const int v = tv.dim(0), d = tv.dim(1);
    const int b = static_cast<int>(indices.size());
    for (int i : indices)
        if (i < 0 || i >= v) throw DomainError("embedding index " + std::to_string(i) + " outside table of " + std::to_string(v));

    Tensor y({b, d});
    for (int r = 0; r < b; ++r) {
        const double* src = tv.data() + static_cast<int64_t>(indices[static_cast<size_t>(r)]) * d;
        double* dst = y.data() + static_cast<int64_t>(r) * d;
        for (int j = 0; j < d; ++j) dst[j] = src[j];
    }

    bool rg = requires_grad(table);
    Id id = push(std::move(y), rg);
    if (rg) {
        node(id).back = [this, id, table, indices, b, d]() {
            const Tensor& g = grad(id);
            Tensor& gt = grad_buf(table);
            for (int r = 0; r < b; ++r) {
                double* dst = gt.data() + static_cast<int64_t>(indices[static_cast<size_t>(r)]) * d;
                const double* src = g.data() + static_cast<int64_t>(r) * d;
                for (int j = 0; j < d; ++j) dst[j] += src[j];
            }
        };
    }
    return id;
}

namespace {

void check_bnd(const Tensor& x, const Tensor& s, const char* opname) {
    if (x.ndim() != 3 || s.ndim() != 2 || x.dim(0) != s.dim(0) || x.dim(2) != s.dim(1))
        throw ContractError(std::string(opname) + ": expected [B,N,D] with [B,D], got " + shape_str(x.shape()) + " and " +
                            shape_str(s.shape()));
}

}  // namespace

Tape::Id Tape::modulate(Id x, Id shift, Id scl) {
    const Tensor& xv = val(x);
    const Tensor& shv = val(shift);
    const Tensor& scv = val(scl);
    check_bnd(xv, shv, "modulate");
    check_bnd(xv, scv, "modulate");
    const int B = xv.dim(0), N = xv.dim(1), D = xv.dim(2);

    Tensor y(xv.shape());
    for (int b = 0; b < B; ++b)
        for (int n = 0; n < N; ++n) {
            const double* xr = xv.data() + (static_cast<int64_t>(b) * N + n) * D;
            double* yr = y.data() + (static_cast<int64_t>(b) * N + n) * D;
            const double* sh = shv.data() + static_cast<int64_t>(b) * D;
            const double* sc = scv.data() + static_cast<int64_t>(b) * D;
            for (int j = 0; j < D; ++j) yr[j] = xr[j] * (1.0 + sc[j]) + sh[j];
        }

    bool rg = requires_grad(x) || requires_grad(shift) || requires_grad(scl);
    Id id = push(std::move(y), rg);
    if (rg) {
        node(id).back = [this, id, x, shift, scl, B, N, D]() {
            const Tensor& g = grad(id);
            const Tensor& xv = val(x);
            const Tensor& scv = val(scl);
            const bool rx = requires_grad(x), rsh = requires_grad(shift), rsc = requires_grad(scl);
            Tensor* gx = rx ? &grad_buf(x) : nullptr;
            Tensor* gsh = rsh ? &grad_buf(shift) : nullptr;
            Tensor* gsc = rsc ? &grad_buf(scl) : nullptr;
            for (int b = 0; b < B; ++b)
                for (int n = 0; n < N; ++n) {
                    const int64_t off = (static_cast<int64_t>(b) * N + n) * D;
                    const double* gr = g.data() + off;
                    const double* xr = xv.data() + off;
                    const double* sc = scv.data() + static_cast<int64_t>(b) * D;
                    for (int j = 0; j < D; ++j) {
                        if (rx) (*gx)[off + j] += gr[j] * (1.0 + sc[j]);
                        if (rsh) (*gsh)[static_cast<int64_t>(b) * D + j] += gr[j];
                        if (rsc) (*gsc)[static_cast<int64_t>(b) * D + j] += gr[j] * xr[j];
                    }
                }
        };
    }
    return id;
}

Tape::Id Tape::row_scale(Id x, Id gate) {
    const Tensor& xv = val(x);
    const Tensor& gv = val(gate);
    check_bnd(xv, gv, "row_scale");
    const int B = xv.dim(0), N = xv.dim(1), D = xv.dim(2);

    Tensor y(xv.shape());
    for (int b = 0; b < B; ++b)
        for (int n = 0; n < N; ++n) {
            const int64_t off = (static_cast<int64_t>(b) * N + n) * D;
            const double* ga = gv.data() + static_cast<int64_t>(b) * D;
            for (int j = 0; j < D; ++j) y[off + j] = xv[off + j] * ga[j];
        }

    bool rg = requires_grad(x) || requires_grad(gate);
    Id id = push(std::move(y), rg);
    if (rg) {
        node(id).back = [this, id, x, gate, B, N, D]() {
            const Tensor& g = grad(id);
            const Tensor& xv = val(x);
            const Tensor& gv = val(gate);
            const bool rx = requires_grad(x), rgate = requires_grad(gate);
            Tensor* gx = rx ? &grad_buf(x) : nullptr;
            Tensor* gg = rgate ? &grad_buf(gate) : nullptr;
            for (int b = 0; b < B; ++b)
                for (int n = 0; n < N; ++n) {
                    const int64_t off = (static_cast<int64_t>(b) * N + n) * D;
                    const double* ga = gv.data() + static_cast<int64_t>(b) * D;
                    for (int j = 0; j < D; ++j) {
                        if (rx) (*gx)[off + j] += g[off + j] * ga[j];
                        if (rgate) (*gg)[static_cast<int64_t>(b) * D + j] += g[off + j] * xv[off + j];
                    }
                }
        };
    }
    return id;
}

// ---------------------------------------------------------------------------
// Attention
// ---------------------------------------------------------------------------

namespace {

// Rotate consecutive pairs of head slice x[n, 2p:2p+2] by table angles.
// sign=-1 applies the inverse rotation (used for the gradient).
void rope_rows(double* dst, const double* src, int n_rows, int hd, const Tensor& cos_t, const Tensor& sin_t, int sign) {
    const int pairs = hd / 2;
    for (int n = 0; n < n_rows; ++n) {
        const double* s = src + static_cast<int64_t>(n) * hd;
        double* d = dst + static_cast<int64_t>(n) * hd;
        const double* cr = cos_t.data() + static_cast<int64_t>(n) * pairs;
        const double* sr = sin_t.data() + static_cast<int64_t>(n) * pairs;
        for (int p = 0; p < pairs; ++p) {
            const double c = cr[p], sn = sign * sr[p];
            const double x0 = s[2 * p], x1 = s[2 * p + 1];
            d[2 * p] = x0 * c - x1 * sn;
            d[2 * p + 1] = x0 * sn + x1 * c;
        }
    }
}

}  // namespace

Tape::Id Tape::attention(Id q, Id k, Id v, int heads, const Tensor* rope_cos, const Tensor* rope_sin) {
    const Tensor& qv = val(q);
    const Tensor& kv = val(k);
    const Tensor& vv = val(v);
    if (qv.ndim() != 3 || !qv.same_shape(kv) || !qv.same_shape(vv))
        throw ContractError("attention: q/k/v must share [B,N,D]");
    const int B = qv.dim(0), N = qv.dim(1), D = qv.dim(2);
    if (heads < 1 || D % heads != 0) throw ContractError("attention: dim not divisible by heads");
    const int hd = D / heads;
    if (rope_cos && (rope_cos->dim(0) != N || rope_cos->dim(1) != hd / 2))
        throw ContractError("attention: rope table shape mismatch");
    const double scl = 1.0 / std::sqrt(static_cast<double>(hd));

    // Contiguous per-head workspaces kept for the backward pass.
    auto qr = std::make_shared<Tensor>(Shape{B, heads, N, hd});
    auto kr = std::make_shared<Tensor>(Shape{B, heads, N, hd});
    auto probs = std::make_shared<Tensor>(Shape{B, heads, N, N});
    Tensor y({B, N, D});

#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < B; ++b)
        for (int h = 0; h < heads; ++h) {
            const int64_t head_off = (static_cast<int64_t>(b) * heads + h);
            double* qh = qr->data() + head_off * N * hd;
            double* kh = kr->data() + head_off * N * hd;
            double* ph = probs->data() + head_off * N * N;
            // gather head columns
            std::vector<double> vh(static_cast<size_t>(N) * hd);
            for (int n = 0; n < N; ++n) {
                const int64_t row = (static_cast<int64_t>(b) * N + n) * D + static_cast<int64_t>(h) * hd;
                for (int j = 0; j < hd; ++j) {
                    qh[static_cast<int64_t>(n) * hd + j] = qv[row + j];
                    kh[static_cast<int64_t>(n) * hd + j] = kv[row + j];
                    vh[static_cast<size_t>(n) * hd + j] = vv[row + j];
                }
            }
            if (rope_cos) {
                rope_rows(qh, qh, N, hd, *rope_cos, *rope_sin, +1);
                rope_rows(kh, kh, N, hd, *rope_cos, *rope_sin, +1);
            }
            // logits and row softmax
            lin::gemm(ph, qh, kh, N, hd, N, false, true, scl, 0.0);
            for (int n = 0; n < N; ++n) {
                double* row = ph + static_cast<int64_t>(n) * N;
                double mx = row[0];
                for (int j = 1; j < N; ++j) mx = std::max(mx, row[j]);
                double sum = 0.0;
                for (int j = 0; j < N; ++j) {
                    row[j] = std::exp(row[j] - mx);
                    sum += row[j];
                }
                for (int j = 0; j < N; ++j) row[j] /= sum;
            }
            // out = P @ V
            std::vector<double> oh(static_cast<size_t>(N) * hd);
            lin::gemm(oh.data(), ph, vh.data(), N, N, hd, false, false, 1.0, 0.0);
            for (int n = 0; n < N; ++n) {
                const int64_t row = (static_cast<int64_t>(b) * N + n) * D + static_cast<int64_t>(h) * hd;
                for (int j = 0; j < hd; ++j) y[row + j] = oh[static_cast<size_t>(n) * hd + j];
            }
        }

    bool rg = requires_grad(q) || requires_grad(k) || requires_grad(v);
    Id id = push(std::move(y), rg);
    if (rg) {
        Tensor cos_copy = rope_cos ? *rope_cos : Tensor();
        Tensor sin_copy = rope_sin ? *rope_sin : Tensor();
        bool use_rope = rope_cos != nullptr;
        node(id).back = [this, id, q, k, v, B, heads, N, hd, scl, qr, kr, probs, cos_copy, sin_copy, use_rope]() {
            const int D = heads * hd;
            const Tensor& g = grad(id);
            const Tensor& vv = val(v);
            Tensor& gq = grad_buf(q);
            Tensor& gk = grad_buf(k);
            Tensor& gv = grad_buf(v);
#pragma omp parallel for collapse(2) schedule(static)
            for (int b = 0; b < B; ++b)
                for (int h = 0; h < heads; ++h) {
                    const int64_t head_off = (static_cast<int64_t>(b) * heads + h);
                    const double* qh = qr->data() + head_off * N * hd;
                    const double* kh = kr->data() + head_off * N * hd;
                    const double* ph = probs->data() + head_off * N * N;
                    std::vector<double> vh(static_cast<size_t>(N) * hd), go(static_cast<size_t>(N) * hd);
                    for (int n = 0; n < N; ++n) {
                        const int64_t row = (static_cast<int64_t>(b) * N + n) * D_of(q) + static_cast<int64_t>(h) * hd;
                        for (int j = 0; j < hd; ++j) {
                            vh[static_cast<size_t>(n) * hd + j] = vv[row + j];
                            go[static_cast<size_t>(n) * hd + j] = g[row + j];
                        }
                    }
                    // dV = P^T @ dO ; dP = dO @ V^T
                    std::vector<double> gvh(static_cast<size_t>(N) * hd), gp(static_cast<size_t>(N) * N);
                    lin::gemm(gvh.data(), ph, go.data(), N, N, hd, true, false, 1.0, 0.0);
                    lin::gemm(gp.data(), go.data(), vh.data(), N, hd, N, false, true, 1.0, 0.0);
                    // softmax backward: dL = P * (dP - rowdot(dP, P))
                    for (int n = 0; n < N; ++n) {
                        double dot = 0.0;
                        const double* pr = ph + static_cast<int64_t>(n) * N;
                        double* gpr = gp.data() + static_cast<size_t>(n) * N;
                        for (int j = 0; j < N; ++j) dot += gpr[j] * pr[j];
                        for (int j = 0; j < N; ++j) gpr[j] = pr[j] * (gpr[j] - dot);
                    }
                    // dQ' = dL @ K' * scl ; dK' = dL^T @ Q' * scl
                    std::vector<double> gqh(static_cast<size_t>(N) * hd), gkh(static_cast<size_t>(N) * hd);
                    lin::gemm(gqh.data(), gp.data(), kh, N, N, hd, false, false, scl, 0.0);
                    lin::gemm(gkh.data(), gp.data(), qh, N, N, hd, true, false, scl, 0.0);
                    if (use_rope) {
                        rope_rows(gqh.data(), gqh.data(), N, hd, cos_copy, sin_copy, -1);
                        rope_rows(gkh.data(), gkh.data(), N, hd, cos_copy, sin_copy, -1);
                    }
                    for (int n = 0; n < N; ++n) {
                        const int64_t row = (static_cast<int64_t>(b) * N + n) * D_of(q) + static_cast<int64_t>(h) * hd;
                        for (int j = 0; j < hd; ++j) {
                            gq[row + j] += gqh[static_cast<size_t>(n) * hd + j];
                            gk[row + j] += gkh[static_cast<size_t>(n) * hd + j];
                            gv[row + j] += gvh[static_cast<size_t>(n) * hd + j];
                        }
                    }
                }
        };
    }
    return id;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

Tape::Id Tape::mse_loss(Id pred, Tensor target) {
    const Tensor& pv = val(pred);
    if (!pv.same_shape(target)) throw ContractError("mse_loss: prediction " + shape_str(pv.shape()) + " vs target " + shape_str(target.shape()));
    const int64_t n = pv.numel();
    double s = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = pv[i] - target[i];
        s += d * d;
    }
    Tensor y = Tensor::scalar(s / static_cast<double>(n));
    bool rg = requires_grad(pred);
    Id id = push(std::move(y), rg);
    if (rg) {
        auto tgt = std::make_shared<Tensor>(std::move(target));
        node(id).back = [this, id, pred, tgt, n]() {
            const double g0 = grad(id)[0];
            const Tensor& pv = val(pred);
            Tensor& gp = grad_buf(pred);
            const double c = 2.0 * g0 / static_cast<double>(n);
            for (int64_t i = 0; i < n; ++i) gp[i] += c * (pv[i] - (*tgt)[i]);
        };
    }
    return id;
}

Tape::Id Tape::cosine_align_loss(Id a, Tensor b, double eps) {
    const Tensor& av = val(a);
    if (!av.same_shape(b)) throw ContractError("cosine_align_loss: shape mismatch");
    const int d = av.dim(av.ndim() - 1);
    const int64_t rows = lead_rows(av);

    double loss = 0.0;
    auto an = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    auto bn = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    auto dots = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
    for (int64_t r = 0; r < rows; ++r) {
        const double* ar = av.data() + r * d;
        const double* br = b.data() + r * d;
        double sa = 0.0, sb = 0.0, dot = 0.0;
        for (int j = 0; j < d; ++j) {
            sa += ar[j] * ar[j];
            sb += br[j] * br[j];
            dot += ar[j] * br[j];
        }
        (*an)[static_cast<size_t>(r)] = std::sqrt(sa);
        (*bn)[static_cast<size_t>(r)] = std::sqrt(sb);
        (*dots)[static_cast<size_t>(r)] = dot;
        loss += 1.0 - dot / (((*an)[static_cast<size_t>(r)] + eps) * ((*bn)[static_cast<size_t>(r)] + eps));
    }
    loss /= static_cast<double>(rows);

    bool rg = requires_grad(a);
    Id id = push(Tensor::scalar(loss), rg);
    if (rg) {
        auto tgt = std::make_shared<Tensor>(std::move(b));
        node(id).back = [this, id, a, tgt, rows, d, eps, an, bn, dots]() {
            const double g0 = grad(id)[0];
            const Tensor& av = val(a);
            Tensor& ga = grad_buf(a);
            const double c = -g0 / static_cast<double>(rows);
            for (int64_t r = 0; r < rows; ++r) {
                const double na = (*an)[static_cast<size_t>(r)];
                const double A = na + eps;
                const double B = (*bn)[static_cast<size_t>(r)] + eps;
                const double dot = (*dots)[static_cast<size_t>(r)];
                const double* ar = av.data() + r * d;
                const double* br = tgt->data() + r * d;
                double* gr = ga.data() + r * d;
                for (int j = 0; j < d; ++j) {
                    double dc = br[j] / (A * B);
                    if (na > 1e-300) dc -= dot / (A * A * B) * (ar[j] / na);
                    gr[j] += c * dc;
                }
            }
        };
    }
    return id;
}

}  // namespace pixnerd
