#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "fllm/errors.hpp"
#include "fllm/rng.hpp"

namespace fllm {

namespace detail {

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << "]";
    return os.str();
}

// Raw matmul kernels, all accumulating into c.
// mm_nn: c[m,n] += a[m,k] * b[k,n]
template <typename S>
void mm_nn(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const S* ai = a + static_cast<size_t>(i) * k;
        S* ci = c + static_cast<size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            S av = ai[l];
            if (av == S(0)) continue;
            const S* bl = b + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

// mm_nt: c[m,n] += a[m,k] * b[n,k]^T   (contiguous dot products)
template <typename S>
void mm_nt(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const S* ai = a + static_cast<size_t>(i) * k;
        S* ci = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const S* bj = b + static_cast<size_t>(j) * k;
            S acc = S(0);
            for (int l = 0; l < k; ++l) acc += ai[l] * bj[l];
            ci[j] += acc;
        }
    }
}

// mm_tn: c[m,n] += a[k,m]^T * b[k,n]
template <typename S>
void mm_tn(const S* a, const S* b, S* c, int m, int k, int n) {
    for (int l = 0; l < k; ++l) {
        const S* al = a + static_cast<size_t>(l) * m;
        const S* bl = b + static_cast<size_t>(l) * n;
        for (int i = 0; i < m; ++i) {
            S av = al[i];
            if (av == S(0)) continue;
            S* ci = c + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) ci[j] += av * bl[j];
        }
    }
}

}  // namespace detail

// Dense row-major tensor of scalar type S (float in production, double in
// the gradient-check reference mode). Cheap shared handle: copies alias the
// same payload; use clone() for a deep copy.
template <typename S>
class TensorT {
public:
    struct Payload {
        std::vector<int> shape;
        std::vector<S> value;
        std::vector<S> grad;  // allocated iff requires_grad
        bool requires_grad = false;
    };

    TensorT() : p_(std::make_shared<Payload>()) {}

    explicit TensorT(std::vector<int> shape, S fill = S(0)) : p_(std::make_shared<Payload>()) {
        size_t n = 1;
        for (int d : shape) {
            if (d <= 0) throw DimensionError("tensor dimension must be positive, got " +
                                             detail::shape_str(shape));
            n *= static_cast<size_t>(d);
        }
        p_->shape = std::move(shape);
        p_->value.assign(n, fill);
    }

    static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }

    static TensorT scalar(S v) {
        TensorT t;
        t.p_->value.assign(1, v);
        return t;  // rank-0, size 1
    }

    static TensorT from(std::vector<int> shape, std::vector<S> data) {
        TensorT t;
        size_t n = 1;
        for (int d : shape) n *= static_cast<size_t>(std::max(d, 0));
        if (n != data.size())
            throw DimensionError("data length " + std::to_string(data.size()) +
                                 " does not match shape " + detail::shape_str(shape));
        t.p_->shape = std::move(shape);
        t.p_->value = std::move(data);
        return t;
    }

    static TensorT gaussian(std::vector<int> shape, S stddev, DetRng& rng) {
        TensorT t(std::move(shape));
        for (S& v : t.p_->value) v = static_cast<S>(rng.next_gaussian()) * stddev;
        return t;
    }

    const std::vector<int>& shape() const { return p_->shape; }
    size_t size() const { return p_->value.size(); }
    bool is_scalar() const { return p_->value.size() == 1; }

    int rows() const { return p_->shape.empty() ? 1 : p_->shape[0]; }
    int cols() const {
        if (p_->shape.size() < 2) return p_->shape.empty() ? 1 : 1;
        int c = 1;
        for (size_t i = 1; i < p_->shape.size(); ++i) c *= p_->shape[i];
        return c;
    }

    S* data() { return p_->value.data(); }
    const S* data() const { return p_->value.data(); }
    std::vector<S>& values() { return p_->value; }
    const std::vector<S>& values() const { return p_->value; }

    S& at(int r, int c) { return p_->value[static_cast<size_t>(r) * cols() + c]; }
    S at(int r, int c) const { return p_->value[static_cast<size_t>(r) * cols() + c]; }
    S item() const {
        if (!is_scalar()) throw ContractError("item() called on non-scalar tensor");
        return p_->value[0];
    }

    bool requires_grad() const { return p_->requires_grad; }
    TensorT& set_requires_grad(bool rg) {
        p_->requires_grad = rg;
        if (rg)
            p_->grad.assign(p_->value.size(), S(0));
        else
            p_->grad.clear();
        return *this;
    }

    std::vector<S>& grad() {
        ensure_grad();
        return p_->grad;
    }
    const std::vector<S>& grad() const {
        ensure_grad();
        return p_->grad;
    }
    void zero_grad() {
        if (p_->requires_grad) std::fill(p_->grad.begin(), p_->grad.end(), S(0));
    }

    TensorT clone() const {
        TensorT t;
        *t.p_ = *p_;
        return t;
    }

    // Detached view of the same values (no grad, not a graph participant).
    TensorT detached() const {
        TensorT t;
        t.p_->shape = p_->shape;
        t.p_->value = p_->value;
        return t;
    }

    bool same_payload(const TensorT& o) const { return p_ == o.p_; }
    std::shared_ptr<Payload> payload() const { return p_; }

    bool all_finite() const {
        for (S v : p_->value)
            if (!std::isfinite(static_cast<double>(v))) return false;
        return true;
    }

private:
    void ensure_grad() const {
        if (!p_->requires_grad)
            throw ContractError("tensor has no gradient (requires_grad is false)");
    }

    std::shared_ptr<Payload> p_;
};

// Reverse-mode tape. Ops append nodes in execution order, so operands always
// precede their consumers; backward() walks the tape once in reverse.
// Single-threaded per instance; independent graphs may run concurrently.
template <typename S>
class GraphT {
public:
    using Tensor = TensorT<S>;

    size_t node_count() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Registers a custom node. `back` must accumulate into the grads of the
    // node's inputs when it runs. Exposed so other modules (e.g. watermark
    // losses) can add ops without touching the core.
    void record(const Tensor& out, std::function<void()> back) {
        nodes_.push_back(NodeRec{out.payload(), std::move(back)});
    }

    void backward(const Tensor& loss) {
        if (!loss.is_scalar())
            throw ContractError("backward() requires a scalar loss, got shape " +
                                detail::shape_str(loss.shape()));
        if (!loss.requires_grad())
            throw ContractError("backward() loss does not require grad");
        // Reset intermediate grads so repeated backward calls accumulate into
        // leaves only.
        for (auto& n : nodes_) {
            if (n.out->requires_grad) std::fill(n.out->grad.begin(), n.out->grad.end(), S(0));
        }
        loss.payload()->grad[0] += S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
            if (it->back) it->back();
        }
    }

    // ---- ops -------------------------------------------------------------

    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
            throw DimensionError("matmul: incompatible shapes " + detail::shape_str(a.shape()) +
                                 " and " + detail::shape_str(b.shape()));
        int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
        Tensor out({m, n});
        detail::mm_nn(a.data(), b.data(), out.data(), m, k, n);
        if (a.requires_grad() || b.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [a, b, out, m, k, n]() {
                const S* go = out.payload()->grad.data();
                if (a.requires_grad())
                    detail::mm_nt(go, b.data(), a.payload()->grad.data(), m, n, k);
                if (b.requires_grad())
                    detail::mm_tn(a.data(), go, b.payload()->grad.data(), n, m, k);
            });
        }
        return out;
    }

    // y = x * w^T with w stored [out_features, in_features].
    Tensor linear(const Tensor& x, const Tensor& w) {
        if (x.shape().size() != 2 || w.shape().size() != 2 || x.shape()[1] != w.shape()[1])
            throw DimensionError("linear: incompatible shapes " + detail::shape_str(x.shape()) +
                                 " and " + detail::shape_str(w.shape()));
        int m = x.shape()[0], k = x.shape()[1], n = w.shape()[0];
        Tensor out({m, n});
        detail::mm_nt(x.data(), w.data(), out.data(), m, k, n);
        if (x.requires_grad() || w.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [x, w, out, m, k, n]() {
                const S* go = out.payload()->grad.data();
                if (x.requires_grad())
                    detail::mm_nn(go, w.data(), x.payload()->grad.data(), m, n, k);
                if (w.requires_grad())
                    detail::mm_tn(go, x.data(), w.payload()->grad.data(), k, m, n);
            });
        }
        return out;
    }

    Tensor add(const Tensor& a, const Tensor& b) {
        check_same_shape(a, b, "add");
        Tensor out(a.shape());
        const S* pa = a.data();
        const S* pb = b.data();
        S* po = out.data();
        for (size_t i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i];
        if (a.requires_grad() || b.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [a, b, out]() {
                const auto& go = out.payload()->grad;
                if (a.requires_grad()) {
                    auto& ga = a.payload()->grad;
                    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.payload()->grad;
                    for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
                }
            });
        }
        return out;
    }

    Tensor mul(const Tensor& a, const Tensor& b) {
        check_same_shape(a, b, "mul");
        Tensor out(a.shape());
        const S* pa = a.data();
        const S* pb = b.data();
        S* po = out.data();
        for (size_t i = 0; i < a.size(); ++i) po[i] = pa[i] * pb[i];
        if (a.requires_grad() || b.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [a, b, out]() {
                const auto& go = out.payload()->grad;
                if (a.requires_grad()) {
                    auto& ga = a.payload()->grad;
                    const S* pb2 = b.data();
                    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * pb2[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.payload()->grad;
                    const S* pa2 = a.data();
                    for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * pa2[i];
                }
            });
        }
        return out;
    }

    Tensor scale(const Tensor& x, S c) {
        Tensor out(x.shape());
        const S* px = x.data();
        S* po = out.data();
        for (size_t i = 0; i < x.size(); ++i) po[i] = px[i] * c;
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [x, out, c]() {
                auto& gx = x.payload()->grad;
                const auto& go = out.payload()->grad;
                for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * c;
            });
        }
        return out;
    }

    // Row-wise layernorm over the last dimension of a [rows, d] tensor.
    Tensor layernorm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                     S eps = static_cast<S>(1e-5)) {
        if (x.shape().size() != 2)
            throw DimensionError("layernorm: expected 2-d input, got " +
                                 detail::shape_str(x.shape()));
        int rows = x.shape()[0], d = x.shape()[1];
        if (static_cast<int>(gain.size()) != d || static_cast<int>(bias.size()) != d)
            throw DimensionError("layernorm: gain/bias length must equal feature dim");
        Tensor out({rows, d});
        auto xhat = std::make_shared<std::vector<S>>(static_cast<size_t>(rows) * d);
        auto inv_std = std::make_shared<std::vector<S>>(rows);
        const S* px = x.data();
        const S* pg = gain.data();
        const S* pb = bias.data();
        S* po = out.data();
        for (int r = 0; r < rows; ++r) {
            const S* xr = px + static_cast<size_t>(r) * d;
            S* or_ = po + static_cast<size_t>(r) * d;
            S* hr = xhat->data() + static_cast<size_t>(r) * d;
            double mean = 0;
            for (int j = 0; j < d; ++j) mean += xr[j];
            mean /= d;
            double var = 0;
            for (int j = 0; j < d; ++j) {
                double c = xr[j] - mean;
                var += c * c;
            }
            var /= d;
            S istd = static_cast<S>(1.0 / std::sqrt(var + static_cast<double>(eps)));
            (*inv_std)[r] = istd;
            for (int j = 0; j < d; ++j) {
                hr[j] = static_cast<S>((xr[j] - mean) * istd);
                or_[j] = pg[j] * hr[j] + pb[j];
            }
        }
        if (x.requires_grad() || gain.requires_grad() || bias.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [x, gain, bias, out, xhat, inv_std, rows, d]() {
                const S* go = out.payload()->grad.data();
                const S* pg2 = gain.data();
                for (int r = 0; r < rows; ++r) {
                    const S* gor = go + static_cast<size_t>(r) * d;
                    const S* hr = xhat->data() + static_cast<size_t>(r) * d;
                    if (gain.requires_grad()) {
                        auto& gg = gain.payload()->grad;
                        for (int j = 0; j < d; ++j) gg[j] += gor[j] * hr[j];
                    }
                    if (bias.requires_grad()) {
                        auto& gb = bias.payload()->grad;
                        for (int j = 0; j < d; ++j) gb[j] += gor[j];
                    }
                    if (x.requires_grad()) {
                        S* gx = x.payload()->grad.data() + static_cast<size_t>(r) * d;
                        double sum_dh = 0, sum_dh_h = 0;
                        for (int j = 0; j < d; ++j) {
                            double dh = static_cast<double>(gor[j]) * pg2[j];
                            sum_dh += dh;
                            sum_dh_h += dh * hr[j];
                        }
                        double m1 = sum_dh / d, m2 = sum_dh_h / d;
                        S istd = (*inv_std)[r];
                        for (int j = 0; j < d; ++j) {
                            double dh = static_cast<double>(gor[j]) * pg2[j];
                            gx[j] += static_cast<S>((dh - m1 - hr[j] * m2) * istd);
                        }
                    }
                }
            });
        }
        return out;
    }

    // GPT-2 style tanh-approximation GELU.
    Tensor gelu(const Tensor& x) {
        Tensor out(x.shape());
        const S* px = x.data();
        S* po = out.data();
        constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
        constexpr double kA = 0.044715;
        for (size_t i = 0; i < x.size(); ++i) {
            double v = px[i];
            double u = kC * (v + kA * v * v * v);
            po[i] = static_cast<S>(0.5 * v * (1.0 + std::tanh(u)));
        }
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [x, out]() {
                auto& gx = x.payload()->grad;
                const auto& go = out.payload()->grad;
                const S* px2 = x.data();
                for (size_t i = 0; i < go.size(); ++i) {
                    double v = px2[i];
                    double u = kC * (v + kA * v * v * v);
                    double t = std::tanh(u);
                    double sech2 = 1.0 - t * t;
                    double dudx = kC * (1.0 + 3.0 * kA * v * v);
                    double d = 0.5 * (1.0 + t) + 0.5 * v * sech2 * dudx;
                    gx[i] += go[i] * static_cast<S>(d);
                }
            });
        }
        return out;
    }

    Tensor tanh_act(const Tensor& x) {
        Tensor out(x.shape());
        const S* px = x.data();
        S* po = out.data();
        for (size_t i = 0; i < x.size(); ++i) po[i] = static_cast<S>(std::tanh(px[i]));
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [x, out]() {
                auto& gx = x.payload()->grad;
                const auto& go = out.payload()->grad;
                const S* py = out.data();
                for (size_t i = 0; i < go.size(); ++i)
                    gx[i] += go[i] * (S(1) - py[i] * py[i]);
            });
        }
        return out;
    }

    // Row-wise softmax with max-subtraction.
    Tensor softmax_rows(const Tensor& x) {
        if (x.shape().size() != 2)
            throw DimensionError("softmax_rows: expected 2-d input");
        int rows = x.shape()[0], d = x.shape()[1];
        Tensor out({rows, d});
        const S* px = x.data();
        S* po = out.data();
        for (int r = 0; r < rows; ++r) {
            const S* xr = px + static_cast<size_t>(r) * d;
            S* or_ = po + static_cast<size_t>(r) * d;
            double mx = xr[0];
            for (int j = 1; j < d; ++j) mx = std::max(mx, static_cast<double>(xr[j]));
            double z = 0;
            for (int j = 0; j < d; ++j) {
                double e = std::exp(xr[j] - mx);
                or_[j] = static_cast<S>(e);
                z += e;
            }
            S iz = static_cast<S>(1.0 / z);
            for (int j = 0; j < d; ++j) or_[j] *= iz;
        }
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [x, out, rows, d]() {
                const S* p = out.data();
                const S* go = out.payload()->grad.data();
                S* gx = x.payload()->grad.data();
                for (int r = 0; r < rows; ++r) {
                    const S* pr = p + static_cast<size_t>(r) * d;
                    const S* gr = go + static_cast<size_t>(r) * d;
                    S* gxr = gx + static_cast<size_t>(r) * d;
                    double dot = 0;
                    for (int j = 0; j < d; ++j) dot += static_cast<double>(pr[j]) * gr[j];
                    for (int j = 0; j < d; ++j)
                        gxr[j] += pr[j] * (gr[j] - static_cast<S>(dot));
                }
            });
        }
        return out;
    }

    // Row lookup: out[t, :] = table[ids[t], :].
    Tensor embedding(const Tensor& table, std::span<const int> ids) {
        if (table.shape().size() != 2) throw DimensionError("embedding: table must be 2-d");
        int v = table.shape()[0], d = table.shape()[1];
        int len = static_cast<int>(ids.size());
        for (int id : ids)
            if (id < 0 || id >= v)
                throw IndexError("embedding: id " + std::to_string(id) + " outside [0, " +
                                 std::to_string(v) + ")");
        Tensor out({len, d});
        const S* pt = table.data();
        S* po = out.data();
        for (int t = 0; t < len; ++t)
            std::copy_n(pt + static_cast<size_t>(ids[t]) * d, d, po + static_cast<size_t>(t) * d);
        if (table.requires_grad()) {
            out.set_requires_grad(true);
            std::vector<int> ids_copy(ids.begin(), ids.end());
            record(out, [table, out, ids_copy, d]() {
                const S* go = out.payload()->grad.data();
                S* gt = table.payload()->grad.data();
                for (size_t t = 0; t < ids_copy.size(); ++t) {
                    S* row = gt + static_cast<size_t>(ids_copy[t]) * d;
                    const S* gr = go + t * d;
                    for (int j = 0; j < d; ++j) row[j] += gr[j];
                }
            });
        }
        return out;
    }

    Tensor concat_rows(const Tensor& a, const Tensor& b) {
        if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[1])
            throw DimensionError("concat_rows: column counts differ: " +
                                 detail::shape_str(a.shape()) + " vs " +
                                 detail::shape_str(b.shape()));
        int ra = a.shape()[0], rb = b.shape()[0], d = a.shape()[1];
        Tensor out({ra + rb, d});
        std::copy_n(a.data(), a.size(), out.data());
        std::copy_n(b.data(), b.size(), out.data() + a.size());
        if (a.requires_grad() || b.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [a, b, out]() {
                const auto& go = out.payload()->grad;
                if (a.requires_grad()) {
                    auto& ga = a.payload()->grad;
                    for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
                }
                if (b.requires_grad()) {
                    auto& gb = b.payload()->grad;
                    size_t off = a.size();
                    for (size_t i = 0; i < gb.size(); ++i) gb[i] += go[off + i];
                }
            });
        }
        return out;
    }

    Tensor slice_rows(const Tensor& x, int begin, int end) {
        if (x.shape().size() != 2) throw DimensionError("slice_rows: expected 2-d input");
        int rows = x.shape()[0], d = x.shape()[1];
        if (begin < 0 || end > rows || begin >= end)
            throw IndexError("slice_rows: range [" + std::to_string(begin) + ", " +
                             std::to_string(end) + ") invalid for " + std::to_string(rows) +
                             " rows");
        Tensor out({end - begin, d});
        std::copy_n(x.data() + static_cast<size_t>(begin) * d, out.size(), out.data());
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [x, out, begin, d]() {
                const auto& go = out.payload()->grad;
                S* gx = x.payload()->grad.data() + static_cast<size_t>(begin) * d;
                for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
            });
        }
        return out;
    }

    Tensor slice_cols(const Tensor& x, int begin, int end) {
        if (x.shape().size() != 2) throw DimensionError("slice_cols: expected 2-d input");
        int rows = x.shape()[0], d = x.shape()[1];
        if (begin < 0 || end > d || begin >= end)
            throw IndexError("slice_cols: range [" + std::to_string(begin) + ", " +
                             std::to_string(end) + ") invalid for " + std::to_string(d) +
                             " cols");
        int w = end - begin;
        Tensor out({rows, w});
        for (int r = 0; r < rows; ++r)
            std::copy_n(x.data() + static_cast<size_t>(r) * d + begin, w,
                        out.data() + static_cast<size_t>(r) * w);
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [x, out, begin, rows, d, w]() {
                const S* go = out.payload()->grad.data();
                S* gx = x.payload()->grad.data();
                for (int r = 0; r < rows; ++r) {
                    S* gxr = gx + static_cast<size_t>(r) * d + begin;
                    const S* gor = go + static_cast<size_t>(r) * w;
                    for (int j = 0; j < w; ++j) gxr[j] += gor[j];
                }
            });
        }
        return out;
    }

    // Inverted dropout; identity when rate == 0.
    Tensor dropout(const Tensor& x, S rate, uint64_t seed) {
        if (rate <= S(0)) return x;
        if (rate >= S(1)) throw ConfigError("dropout rate must be in [0, 1)");
        Tensor out(x.shape());
        auto mask = std::make_shared<std::vector<S>>(x.size());
        DetRng rng(seed);
        S keep = S(1) - rate;
        S inv_keep = S(1) / keep;
        const S* px = x.data();
        S* po = out.data();
        for (size_t i = 0; i < x.size(); ++i) {
            S m = rng.next_unit() < static_cast<double>(rate) ? S(0) : inv_keep;
            (*mask)[i] = m;
            po[i] = px[i] * m;
        }
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [x, out, mask]() {
                auto& gx = x.payload()->grad;
                const auto& go = out.payload()->grad;
                for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * (*mask)[i];
            });
        }
        return out;
    }

    // Multi-head causal self-attention, fused. q, k, v are [len, d_model].
    // Optional kp/vp are [p, d_model] key/value prefixes shared across the
    // sequence: every query position may attend to every prefix slot, and
    // prefixes produce no output positions. mask_prefix forces prefix scores
    // to -inf (diagnostic mode used to assert prefix-free equivalence).
    Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, int n_heads,
                            const Tensor* kp = nullptr, const Tensor* vp = nullptr,
                            bool mask_prefix = false) {
        if (q.shape().size() != 2 || k.shape() != q.shape() || v.shape() != q.shape())
            throw DimensionError("causal_attention: q/k/v must share shape [len, d_model]");
        int len = q.shape()[0], d = q.shape()[1];
        if (n_heads <= 0 || d % n_heads != 0)
            throw ConfigError("causal_attention: d_model must divide by n_heads");
        int p = 0;
        if (kp != nullptr || vp != nullptr) {
            if (kp == nullptr || vp == nullptr || kp->shape() != vp->shape() ||
                kp->shape().size() != 2 || kp->shape()[1] != d)
                throw DimensionError("causal_attention: prefix tensors must both be [p, d_model]");
            p = kp->shape()[0];
        }
        int dh = d / n_heads;
        int total = p + len;
        S att_scale = static_cast<S>(1.0 / std::sqrt(static_cast<double>(dh)));
        Tensor out({len, d});
        // probs[h][t][j], j < p prefix, j >= p sequence position j - p (<= t)
        auto probs =
            std::make_shared<std::vector<S>>(static_cast<size_t>(n_heads) * len * total, S(0));

        const S* pq = q.data();
        const S* pk = k.data();
        const S* pv = v.data();
        const S* pkp = p ? kp->data() : nullptr;
        const S* pvp = p ? vp->data() : nullptr;
        S* po = out.data();

        for (int h = 0; h < n_heads; ++h) {
            int hoff = h * dh;
            for (int t = 0; t < len; ++t) {
                const S* qt = pq + static_cast<size_t>(t) * d + hoff;
                S* prow = probs->data() + (static_cast<size_t>(h) * len + t) * total;
                double mx = -1e300;
                // prefix scores
                if (!mask_prefix) {
                    for (int j = 0; j < p; ++j) {
                        const S* kj = pkp + static_cast<size_t>(j) * d + hoff;
                        double s = 0;
                        for (int e = 0; e < dh; ++e) s += static_cast<double>(qt[e]) * kj[e];
                        s *= att_scale;
                        prow[j] = static_cast<S>(s);
                        mx = std::max(mx, s);
                    }
                }
                for (int j = 0; j <= t; ++j) {
                    const S* kj = pk + static_cast<size_t>(j) * d + hoff;
                    double s = 0;
                    for (int e = 0; e < dh; ++e) s += static_cast<double>(qt[e]) * kj[e];
                    s *= att_scale;
                    prow[p + j] = static_cast<S>(s);
                    mx = std::max(mx, s);
                }
                double z = 0;
                // softmax over [0,p) (unless masked) plus [p, p+t]
                if (!mask_prefix) {
                    for (int j = 0; j < p; ++j) {
                        double e = std::exp(prow[j] - mx);
                        prow[j] = static_cast<S>(e);
                        z += e;
                    }
                } else {
                    for (int j = 0; j < p; ++j) prow[j] = S(0);
                }
                for (int j = 0; j <= t; ++j) {
                    double e = std::exp(prow[p + j] - mx);
                    prow[p + j] = static_cast<S>(e);
                    z += e;
                }
                S iz = static_cast<S>(1.0 / z);
                if (!mask_prefix)
                    for (int j = 0; j < p; ++j) prow[j] *= iz;
                for (int j = 0; j <= t; ++j) prow[p + j] *= iz;
                // weighted sum of values
                S* ot = po + static_cast<size_t>(t) * d + hoff;
                for (int e = 0; e < dh; ++e) ot[e] = S(0);
                for (int j = 0; j < p; ++j) {
                    S a = prow[j];
                    if (a == S(0)) continue;
                    const S* vj = pvp + static_cast<size_t>(j) * d + hoff;
                    for (int e = 0; e < dh; ++e) ot[e] += a * vj[e];
                }
                for (int j = 0; j <= t; ++j) {
                    S a = prow[p + j];
                    const S* vj = pv + static_cast<size_t>(j) * d + hoff;
                    for (int e = 0; e < dh; ++e) ot[e] += a * vj[e];
                }
            }
        }

        bool rg = q.requires_grad() || k.requires_grad() || v.requires_grad() ||
                  (p && (kp->requires_grad() || vp->requires_grad()));
        if (rg) {
            out.set_requires_grad(true);
            Tensor kpc = p ? *kp : Tensor();
            Tensor vpc = p ? *vp : Tensor();
            record(out, [q, k, v, kpc, vpc, out, probs, n_heads, len, d, dh, p, total,
                         att_scale]() {
                const S* go = out.payload()->grad.data();
                const S* pq2 = q.data();
                const S* pk2 = k.data();
                const S* pv2 = v.data();
                const S* pkp2 = p ? kpc.data() : nullptr;
                const S* pvp2 = p ? vpc.data() : nullptr;
                S* gq = q.requires_grad() ? q.payload()->grad.data() : nullptr;
                S* gk = k.requires_grad() ? k.payload()->grad.data() : nullptr;
                S* gv = v.requires_grad() ? v.payload()->grad.data() : nullptr;
                S* gkp = (p && kpc.requires_grad()) ? kpc.payload()->grad.data() : nullptr;
                S* gvp = (p && vpc.requires_grad()) ? vpc.payload()->grad.data() : nullptr;
                std::vector<S> dscore(total);
                for (int h = 0; h < n_heads; ++h) {
                    int hoff = h * dh;
                    for (int t = 0; t < len; ++t) {
                        const S* prow =
                            probs->data() + (static_cast<size_t>(h) * len + t) * total;
                        const S* got = go + static_cast<size_t>(t) * d + hoff;
                        const S* qt = pq2 + static_cast<size_t>(t) * d + hoff;
                        // da[j] = dot(go_t, V_j); dV_j += a[j] * go_t
                        double dot_a_da = 0;
                        for (int j = 0; j < p + t + 1; ++j) {
                            S a = prow[j];
                            const S* vj = j < p ? pvp2 + static_cast<size_t>(j) * d + hoff
                                                : pv2 + static_cast<size_t>(j - p) * d + hoff;
                            double da = 0;
                            for (int e = 0; e < dh; ++e) da += static_cast<double>(got[e]) * vj[e];
                            dscore[j] = static_cast<S>(da);
                            dot_a_da += static_cast<double>(a) * da;
                            if (a != S(0)) {
                                S* gvj = nullptr;
                                if (j < p) {
                                    if (gvp) gvj = gvp + static_cast<size_t>(j) * d + hoff;
                                } else if (gv) {
                                    gvj = gv + static_cast<size_t>(j - p) * d + hoff;
                                }
                                if (gvj)
                                    for (int e = 0; e < dh; ++e) gvj[e] += a * got[e];
                            }
                        }
                        // ds[j] = a[j] * (da[j] - sum_j' a[j'] da[j'])
                        for (int j = 0; j < p + t + 1; ++j) {
                            S a = prow[j];
                            if (a == S(0)) {
                                dscore[j] = S(0);
                                continue;
                            }
                            dscore[j] =
                                a * (dscore[j] - static_cast<S>(dot_a_da));
                        }
                        // dq_t += sum_j ds[j] * K_j * scale; dK_j += ds[j] * q_t * scale
                        for (int j = 0; j < p + t + 1; ++j) {
                            S dsj = dscore[j] * att_scale;
                            if (dsj == S(0)) continue;
                            const S* kj = j < p ? pkp2 + static_cast<size_t>(j) * d + hoff
                                                : pk2 + static_cast<size_t>(j - p) * d + hoff;
                            if (gq) {
                                S* gqt = gq + static_cast<size_t>(t) * d + hoff;
                                for (int e = 0; e < dh; ++e) gqt[e] += dsj * kj[e];
                            }
                            S* gkj = nullptr;
                            if (j < p) {
                                if (gkp) gkj = gkp + static_cast<size_t>(j) * d + hoff;
                            } else if (gk) {
                                gkj = gk + static_cast<size_t>(j - p) * d + hoff;
                            }
                            if (gkj)
                                for (int e = 0; e < dh; ++e) gkj[e] += dsj * qt[e];
                        }
                    }
                }
            });
        }
        return out;
    }

    // Mean over rows of -log softmax(logits)[target], numerically stabilized.
    Tensor softmax_cross_entropy(const Tensor& logits, std::span<const int> targets) {
        if (logits.shape().size() != 2)
            throw DimensionError("softmax_cross_entropy: logits must be [batch, vocab]");
        int batch = logits.shape()[0], vocab = logits.shape()[1];
        if (static_cast<int>(targets.size()) != batch)
            throw DimensionError("softmax_cross_entropy: targets length " +
                                 std::to_string(targets.size()) + " != batch " +
                                 std::to_string(batch));
        for (int t : targets)
            if (t < 0 || t >= vocab)
                throw IndexError("softmax_cross_entropy: target " + std::to_string(t) +
                                 " outside [0, " + std::to_string(vocab) + ")");
        auto probs = std::make_shared<std::vector<S>>(logits.size());
        const S* pl = logits.data();
        double total = 0;
        for (int r = 0; r < batch; ++r) {
            const S* row = pl + static_cast<size_t>(r) * vocab;
            S* prow = probs->data() + static_cast<size_t>(r) * vocab;
            double mx = row[0];
            for (int j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double z = 0;
            for (int j = 0; j < vocab; ++j) {
                double e = std::exp(row[j] - mx);
                prow[j] = static_cast<S>(e);
                z += e;
            }
            double iz = 1.0 / z;
            for (int j = 0; j < vocab; ++j) prow[j] = static_cast<S>(prow[j] * iz);
            total += std::log(z) + mx - row[targets[r]];
        }
        Tensor out = Tensor::scalar(static_cast<S>(total / batch));
        if (logits.requires_grad()) {
            out.set_requires_grad(true);
            std::vector<int> tgt(targets.begin(), targets.end());
            record(out, [logits, out, probs, tgt, batch, vocab]() {
                S g = out.payload()->grad[0] / static_cast<S>(batch);
                S* gl = logits.payload()->grad.data();
                const S* pp = probs->data();
                for (int r = 0; r < batch; ++r) {
                    S* row = gl + static_cast<size_t>(r) * vocab;
                    const S* prow = pp + static_cast<size_t>(r) * vocab;
                    for (int j = 0; j < vocab; ++j) row[j] += g * prow[j];
                    row[tgt[r]] -= g;
                }
            });
        }
        return out;
    }

    // T^2 * KL(softmax(teacher/T) || softmax(student/T)), averaged over rows.
    // The gradient flows to the student only.
    Tensor kl_divergence_soft(const Tensor& teacher, const Tensor& student, S temperature) {
        if (teacher.shape() != student.shape() || teacher.shape().size() != 2)
            throw DimensionError("kl_divergence_soft: teacher/student shapes differ: " +
                                 detail::shape_str(teacher.shape()) + " vs " +
                                 detail::shape_str(student.shape()));
        if (!(temperature > S(0)))
            throw ConfigError("kl_divergence_soft: temperature must be positive");
        int batch = teacher.shape()[0], vocab = teacher.shape()[1];
        auto pt = std::make_shared<std::vector<S>>(teacher.size());
        auto ps = std::make_shared<std::vector<S>>(teacher.size());
        soft_probs(teacher.data(), pt->data(), batch, vocab, temperature);
        soft_probs(student.data(), ps->data(), batch, vocab, temperature);
        double total = 0;
        for (size_t i = 0; i < pt->size(); ++i) {
            double a = (*pt)[i];
            if (a > 0) total += a * (std::log(a) - std::log(static_cast<double>((*ps)[i])));
        }
        double t2 = static_cast<double>(temperature) * temperature;
        Tensor out = Tensor::scalar(static_cast<S>(t2 * total / batch));
        if (student.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [student, out, pt, ps, batch, temperature]() {
                // d/dz_s of T^2 * KL = T * (p_s - p_t), averaged over rows
                S g = out.payload()->grad[0] * temperature / static_cast<S>(batch);
                S* gs = student.payload()->grad.data();
                for (size_t i = 0; i < pt->size(); ++i) gs[i] += g * ((*ps)[i] - (*pt)[i]);
            });
        }
        return out;
    }

    Tensor sum(const Tensor& x) {
        double total = 0;
        const S* px = x.data();
        for (size_t i = 0; i < x.size(); ++i) total += px[i];
        Tensor out = Tensor::scalar(static_cast<S>(total));
        if (x.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [x, out]() {
                S g = out.payload()->grad[0];
                auto& gx = x.payload()->grad;
                for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
            });
        }
        return out;
    }

    Tensor add_scalar(const Tensor& a, const Tensor& b) {
        if (!a.is_scalar() || !b.is_scalar())
            throw DimensionError("add_scalar: both operands must be scalars");
        Tensor out = Tensor::scalar(a.data()[0] + b.data()[0]);
        if (a.requires_grad() || b.requires_grad()) {
            out.set_requires_grad(true);
            record(out, [a, b, out]() {
                S g = out.payload()->grad[0];
                if (a.requires_grad()) a.payload()->grad[0] += g;
                if (b.requires_grad()) b.payload()->grad[0] += g;
            });
        }
        return out;
    }

private:
    struct NodeRec {
        std::shared_ptr<typename Tensor::Payload> out;
        std::function<void()> back;
    };

    static void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
        if (a.shape() != b.shape())
            throw DimensionError(std::string(op) + ": shape mismatch " +
                                 detail::shape_str(a.shape()) + " vs " +
                                 detail::shape_str(b.shape()));
    }

    static void soft_probs(const S* logits, S* probs, int batch, int vocab, S temperature) {
        // shared by kl_divergence_soft for teacher and student sides
        for (int r = 0; r < batch; ++r) {
            const S* row = logits + static_cast<size_t>(r) * vocab;
            S* prow = probs + static_cast<size_t>(r) * vocab;
            double mx = -1e300;
            for (int j = 0; j < vocab; ++j)
                mx = std::max(mx, static_cast<double>(row[j]) / temperature);
            double z = 0;
            for (int j = 0; j < vocab; ++j) {
                double e = std::exp(static_cast<double>(row[j]) / temperature - mx);
                prow[j] = static_cast<S>(e);
                z += e;
            }
            double iz = 1.0 / z;
            for (int j = 0; j < vocab; ++j) prow[j] = static_cast<S>(prow[j] * iz);
        }
    }

    std::vector<NodeRec> nodes_;
};

// p <- p - lr * grad(p), gradients zeroed afterwards.
template <typename S>
void sgd_step(std::span<TensorT<S>> params, S lr) {
    if (!(lr > S(0))) throw ConfigError("sgd_step: learning rate must be positive");
    for (auto& p : params) {
        if (!p.requires_grad())
            throw ContractError("sgd_step: parameter without gradient");
        S* v = p.data();
        auto& g = p.grad();
        for (size_t i = 0; i < g.size(); ++i) v[i] -= lr * g[i];
    }
    for (auto& p : params) p.zero_grad();
}

// Plain SGD with an optional momentum flag. Velocity buffers are keyed by
// parameter payload identity.
template <typename S>
class SgdT {
public:
    explicit SgdT(S lr, S momentum = S(0)) : lr_(lr), momentum_(momentum) {
        if (!(lr > S(0))) throw ConfigError("sgd: learning rate must be positive");
        if (momentum < S(0) || momentum >= S(1))
            throw ConfigError("sgd: momentum must be in [0, 1)");
    }

    void step(std::span<TensorT<S>> params) {
        if (momentum_ == S(0)) {
            sgd_step(params, lr_);
            return;
        }
        for (auto& p : params) {
            if (!p.requires_grad())
                throw ContractError("sgd: parameter without gradient");
            auto& vel = velocity_[p.payload().get()];
            if (vel.size() != p.size()) vel.assign(p.size(), S(0));
            S* v = p.data();
            auto& g = p.grad();
            for (size_t i = 0; i < g.size(); ++i) {
                vel[i] = momentum_ * vel[i] + g[i];
                v[i] -= lr_ * vel[i];
            }
        }
        for (auto& p : params) p.zero_grad();
    }

    S lr() const { return lr_; }

private:
    S lr_;
    S momentum_;
    std::unordered_map<void*, std::vector<S>> velocity_;
};

using Tensor = TensorT<float>;
using Graph = GraphT<float>;
using Sgd = SgdT<float>;

}  // namespace fllm
