#pragma once

// Minimal trainable-layer toolkit with hand-derived backward passes: a flat
// named parameter store (f32 master values, f64 gradients), dense / conv /
// attention / embedding primitives, global-norm clipping, and Adam. No
// autodiff anywhere: every backward is explicit and is validated against
// finite differences in the tests.

#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "koshur/common.hpp"
#include "koshur/mat.hpp"

namespace koshur::nn {

struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<float> value;   // master copy; matches the checkpoint encoding
    std::vector<double> grad;

    std::size_t size() const { return value.size(); }
    double v(std::size_t i) const { return static_cast<double>(value[i]); }
};

// Registration-ordered parameter table; the order defines the checkpoint
// manifest and the Adam state layout.
class ParamStore {
public:
    Tensor& add(const std::string& name, std::vector<std::size_t> shape) {
        if (index_.count(name)) throw Error("ParamStore: duplicate tensor " + name);
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        auto t = std::make_unique<Tensor>();
        t->name = name;
        t->shape = std::move(shape);
        t->value.assign(n, 0.0f);
        t->grad.assign(n, 0.0);
        index_[name] = tensors_.size();
        tensors_.push_back(std::move(t));
        return *tensors_.back();
    }

    Tensor& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("ParamStore: unknown tensor " + name);
        return *tensors_[it->second];
    }
    const Tensor& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw Error("ParamStore: unknown tensor " + name);
        return *tensors_[it->second];
    }
    bool has(const std::string& name) const { return index_.count(name) != 0; }

    std::size_t tensor_count() const { return tensors_.size(); }
    Tensor& tensor(std::size_t i) { return *tensors_[i]; }
    const Tensor& tensor(std::size_t i) const { return *tensors_[i]; }

    std::size_t param_count() const {
        std::size_t n = 0;
        for (const auto& t : tensors_) n += t->size();
        return n;
    }

    void zero_grads() {
        for (auto& t : tensors_)
            std::fill(t->grad.begin(), t->grad.end(), 0.0);
    }

    double global_grad_norm() const {
        double sq = 0.0;
        for (const auto& t : tensors_)
            for (double g : t->grad) sq += g * g;
        return std::sqrt(sq);
    }

private:
    std::vector<std::unique_ptr<Tensor>> tensors_;
    std::map<std::string, std::size_t> index_;
};

inline void init_uniform(Tensor& t, Rng& rng, double scale) {
    for (auto& v : t.value) v = static_cast<float>((rng.uniform() * 2.0 - 1.0) * scale);
}

inline void init_normal(Tensor& t, Rng& rng, double stddev) {
    for (auto& v : t.value) v = static_cast<float>(rng.normal() * stddev);
}

// Xavier-style range for tanh stacks.
inline void init_linear(Tensor& w, Rng& rng) {
    const double fan = static_cast<double>(w.shape[0] + w.shape[1]);
    init_uniform(w, rng, std::sqrt(6.0 / fan));
}

// ---- dense -----------------------------------------------------------------

// y[t,o] = b[o] + sum_i x[t,i] * w[o,i], with w shaped (out, in).
inline Mat linear_forward(const Tensor& w, const Tensor& b, const Mat& x) {
    const std::size_t out = w.shape[0], in = w.shape[1];
    if (x.cols() != in) throw Error("linear_forward: " + w.name + " expects " +
                                    std::to_string(in) + " inputs, got " +
                                    std::to_string(x.cols()));
    Mat y(x.rows(), out);
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const double* xt = x.row(t);
        double* yt = y.row(t);
        for (std::size_t o = 0; o < out; ++o) {
            const float* wo = w.value.data() + o * in;
            double acc = b.v(o);
            for (std::size_t i = 0; i < in; ++i) acc += xt[i] * static_cast<double>(wo[i]);
            yt[o] = acc;
        }
    }
    return y;
}

// Accumulates dW, db; returns dx.
inline Mat linear_backward(Tensor& w, Tensor& b, const Mat& x, const Mat& dy) {
    const std::size_t out = w.shape[0], in = w.shape[1];
    Mat dx(x.rows(), in);
    for (std::size_t t = 0; t < x.rows(); ++t) {
        const double* xt = x.row(t);
        const double* dyt = dy.row(t);
        double* dxt = dx.row(t);
        for (std::size_t o = 0; o < out; ++o) {
            const double g = dyt[o];
            b.grad[o] += g;
            const float* wo = w.value.data() + o * in;
            double* wgo = w.grad.data() + o * in;
            for (std::size_t i = 0; i < in; ++i) {
                wgo[i] += g * xt[i];
                dxt[i] += g * static_cast<double>(wo[i]);
            }
        }
    }
    return dx;
}

// ---- 1-D convolution, kernel 3, zero-padded same length ---------------------

// w shaped (out, in, 3); tap k offsets the input by k-1 frames.
inline Mat conv1d_forward(const Tensor& w, const Tensor& b, const Mat& x) {
    const std::size_t out = w.shape[0], in = w.shape[1];
    if (w.shape.size() != 3 || w.shape[2] != 3) throw Error("conv1d: kernel must be 3");
    if (x.cols() != in) throw Error("conv1d_forward: input width mismatch for " + w.name);
    const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(x.rows());
    Mat y(x.rows(), out);
    for (std::ptrdiff_t t = 0; t < rows; ++t) {
        double* yt = y.row(static_cast<std::size_t>(t));
        for (std::size_t o = 0; o < out; ++o) {
            double acc = b.v(o);
            for (std::size_t k = 0; k < 3; ++k) {
                const std::ptrdiff_t s = t + static_cast<std::ptrdiff_t>(k) - 1;
                if (s < 0 || s >= rows) continue;
                const double* xs = x.row(static_cast<std::size_t>(s));
                const float* wk = w.value.data() + (o * in) * 3 + k;
                for (std::size_t i = 0; i < in; ++i)
                    acc += xs[i] * static_cast<double>(wk[i * 3]);
            }
            yt[o] = acc;
        }
    }
    return y;
}

inline Mat conv1d_backward(Tensor& w, Tensor& b, const Mat& x, const Mat& dy) {
    const std::size_t out = w.shape[0], in = w.shape[1];
    const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(x.rows());
    Mat dx(x.rows(), in);
    for (std::ptrdiff_t t = 0; t < rows; ++t) {
        const double* dyt = dy.row(static_cast<std::size_t>(t));
        for (std::size_t o = 0; o < out; ++o) {
            const double g = dyt[o];
            b.grad[o] += g;
            for (std::size_t k = 0; k < 3; ++k) {
                const std::ptrdiff_t s = t + static_cast<std::ptrdiff_t>(k) - 1;
                if (s < 0 || s >= rows) continue;
                const double* xs = x.row(static_cast<std::size_t>(s));
                double* dxs = dx.row(static_cast<std::size_t>(s));
                const float* wk = w.value.data() + (o * in) * 3 + k;
                double* wgk = w.grad.data() + (o * in) * 3 + k;
                for (std::size_t i = 0; i < in; ++i) {
                    wgk[i * 3] += g * xs[i];
                    dxs[i] += g * static_cast<double>(wk[i * 3]);
                }
            }
        }
    }
    return dx;
}

// ---- elementwise tanh --------------------------------------------------------

inline Mat tanh_forward(const Mat& x) {
    Mat y(x.rows(), x.cols());
    for (std::size_t i = 0; i < x.data().size(); ++i) y.data()[i] = std::tanh(x.data()[i]);
    return y;
}

// takes the forward output, not the input
inline Mat tanh_backward(const Mat& y, const Mat& dy) {
    Mat dx(y.rows(), y.cols());
    for (std::size_t i = 0; i < y.data().size(); ++i)
        dx.data()[i] = dy.data()[i] * (1.0 - y.data()[i] * y.data()[i]);
    return dx;
}

// ---- single-head self-attention ---------------------------------------------

struct AttnParams {
    Tensor *wq, *bq, *wk, *bk, *wv, *bv, *wo, *bo;
};

struct AttnCache {
    Mat x, q, k, v, attn, ctx;  // attn: row-softmaxed scores; ctx: attn * v
};

inline Mat softmax_rows(const Mat& s) {
    Mat a(s.rows(), s.cols());
    for (std::size_t r = 0; r < s.rows(); ++r) {
        const double* sr = s.row(r);
        double* ar = a.row(r);
        double mx = sr[0];
        for (std::size_t c = 1; c < s.cols(); ++c) mx = std::max(mx, sr[c]);
        double z = 0.0;
        for (std::size_t c = 0; c < s.cols(); ++c) {
            ar[c] = std::exp(sr[c] - mx);
            z += ar[c];
        }
        for (std::size_t c = 0; c < s.cols(); ++c) ar[c] /= z;
    }
    return a;
}

inline Mat attention_forward(const AttnParams& p, const Mat& x, AttnCache& cache) {
    const std::size_t t_len = x.rows(), dim = p.wq->shape[0];
    cache.x = x;
    cache.q = linear_forward(*p.wq, *p.bq, x);
    cache.k = linear_forward(*p.wk, *p.bk, x);
    cache.v = linear_forward(*p.wv, *p.bv, x);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    Mat scores(t_len, t_len);
    for (std::size_t r = 0; r < t_len; ++r)
        for (std::size_t c = 0; c < t_len; ++c) {
            double acc = 0.0;
            const double* qr = cache.q.row(r);
            const double* kc = cache.k.row(c);
            for (std::size_t d = 0; d < dim; ++d) acc += qr[d] * kc[d];
            scores(r, c) = acc * scale;
        }
    cache.attn = softmax_rows(scores);
    cache.ctx = Mat(t_len, dim);
    for (std::size_t r = 0; r < t_len; ++r)
        for (std::size_t c = 0; c < t_len; ++c) {
            const double a = cache.attn(r, c);
            const double* vc = cache.v.row(c);
            double* outr = cache.ctx.row(r);
            for (std::size_t d = 0; d < dim; ++d) outr[d] += a * vc[d];
        }
    return linear_forward(*p.wo, *p.bo, cache.ctx);
}

inline Mat attention_backward(const AttnParams& p, const AttnCache& cache, const Mat& dy) {
    const std::size_t t_len = cache.x.rows(), dim = p.wq->shape[0];
    const Mat dctx = linear_backward(*p.wo, *p.bo, cache.ctx, dy);

    Mat dattn(t_len, t_len), dv(t_len, dim);
    for (std::size_t r = 0; r < t_len; ++r)
        for (std::size_t c = 0; c < t_len; ++c) {
            const double* dr = dctx.row(r);
            const double* vc = cache.v.row(c);
            double acc = 0.0;
            for (std::size_t d = 0; d < dim; ++d) {
                acc += dr[d] * vc[d];
                dv(c, d) += cache.attn(r, c) * dr[d];
            }
            dattn(r, c) = acc;
        }

    // softmax rows: ds = a .* (dattn - sum(a .* dattn))
    Mat dscores(t_len, t_len);
    for (std::size_t r = 0; r < t_len; ++r) {
        double dot = 0.0;
        for (std::size_t c = 0; c < t_len; ++c) dot += cache.attn(r, c) * dattn(r, c);
        for (std::size_t c = 0; c < t_len; ++c)
            dscores(r, c) = cache.attn(r, c) * (dattn(r, c) - dot);
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    Mat dq(t_len, dim), dk(t_len, dim);
    for (std::size_t r = 0; r < t_len; ++r)
        for (std::size_t c = 0; c < t_len; ++c) {
            const double g = dscores(r, c) * scale;
            const double* kc = cache.k.row(c);
            const double* qr = cache.q.row(r);
            for (std::size_t d = 0; d < dim; ++d) {
                dq(r, d) += g * kc[d];
                dk(c, d) += g * qr[d];
            }
        }

    Mat dx = linear_backward(*p.wq, *p.bq, cache.x, dq);
    const Mat dx_k = linear_backward(*p.wk, *p.bk, cache.x, dk);
    const Mat dx_v = linear_backward(*p.wv, *p.bv, cache.x, dv);
    for (std::size_t i = 0; i < dx.data().size(); ++i)
        dx.data()[i] += dx_k.data()[i] + dx_v.data()[i];
    return dx;
}

// ---- embedding ----------------------------------------------------------------

inline Mat embed_forward(const Tensor& table, const std::vector<int>& ids) {
    const std::size_t dim = table.shape[1];
    Mat y(ids.size(), dim);
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] < 0 || static_cast<std::size_t>(ids[t]) >= table.shape[0])
            throw Error("embed_forward: id out of range in " + table.name);
        const float* row = table.value.data() + static_cast<std::size_t>(ids[t]) * dim;
        double* yt = y.row(t);
        for (std::size_t d = 0; d < dim; ++d) yt[d] = static_cast<double>(row[d]);
    }
    return y;
}

inline void embed_backward(Tensor& table, const std::vector<int>& ids, const Mat& dy) {
    const std::size_t dim = table.shape[1];
    for (std::size_t t = 0; t < ids.size(); ++t) {
        double* g = table.grad.data() + static_cast<std::size_t>(ids[t]) * dim;
        const double* dyt = dy.row(t);
        for (std::size_t d = 0; d < dim; ++d) g[d] += dyt[d];
    }
}

// ---- optimization ---------------------------------------------------------------

// Scales all gradients so the global L2 norm is at most max_norm; returns the
// pre-clip norm.
inline double clip_global_norm(ParamStore& params, double max_norm) {
    const double norm = params.global_grad_norm();
    if (norm > max_norm && norm > 0.0) {
        const double s = max_norm / norm;
        for (std::size_t i = 0; i < params.tensor_count(); ++i)
            for (double& g : params.tensor(i).grad) g *= s;
    }
    return norm;
}

struct AdamState {
    std::vector<double> m, v;
    std::uint64_t step = 0;

    static AdamState for_params(const ParamStore& params) {
        AdamState s;
        s.m.assign(params.param_count(), 0.0);
        s.v.assign(params.param_count(), 0.0);
        return s;
    }
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

inline void adam_update(ParamStore& params, AdamState& state, const AdamConfig& cfg) {
    if (state.m.size() != params.param_count()) throw Error("adam_update: state size mismatch");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    std::size_t off = 0;
    for (std::size_t ti = 0; ti < params.tensor_count(); ++ti) {
        Tensor& t = params.tensor(ti);
        for (std::size_t i = 0; i < t.size(); ++i, ++off) {
            double g = t.grad[i];
            if (cfg.weight_decay != 0.0) g += cfg.weight_decay * t.v(i);
            state.m[off] = cfg.beta1 * state.m[off] + (1.0 - cfg.beta1) * g;
            state.v[off] = cfg.beta2 * state.v[off] + (1.0 - cfg.beta2) * g * g;
            const double mh = state.m[off] / bc1;
            const double vh = state.v[off] / bc2;
            const double nv = t.v(i) - cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
            t.value[i] = static_cast<float>(nv);
        }
    }
}

}  // namespace koshur::nn
