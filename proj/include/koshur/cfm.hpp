#pragma once

// Conditional flow matching with optimal-transport straight-line paths:
// interpolant construction, the velocity regression target and masked MSE
// loss, and fixed-step Euler sampling of a learned velocity field.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "koshur/common.hpp"
#include "koshur/mat.hpp"

namespace koshur::cfm {

struct ShapeMismatch : Error {
    using Error::Error;
};
struct EmptyMask : Error {
    using Error::Error;
};
struct NonFiniteState : Error {
    using Error::Error;
};

// One training point on the conditional path from noise x0 to data x1.
struct FlowSample {
    Mat x0, x1;
    double t = 0.0;
    double sigma_min = 0.0;
    Mat x_t;  // (1 - (1 - sigma_min)*t)*x0 + t*x1
    Mat u_t;  // x1 - (1 - sigma_min)*x0
};

struct SamplerConfig {
    int n_steps = 10;
    double sigma_min = 1e-4;

    void validate() const {
        if (n_steps < 1) throw Error("sampler: n_steps must be >= 1");
        if (!(sigma_min >= 0.0 && sigma_min < 1.0))
            throw Error("sampler: sigma_min must lie in [0, 1)");
    }
};

inline FlowSample sample_flow_point(const Mat& x0, const Mat& x1, double t,
                                    double sigma_min) {
    if (!x0.same_shape(x1))
        throw ShapeMismatch("sample_flow_point: x0 " + std::to_string(x0.rows()) + "x" +
                            std::to_string(x0.cols()) + " vs x1 " + std::to_string(x1.rows()) +
                            "x" + std::to_string(x1.cols()));
    if (!(t >= 0.0 && t <= 1.0)) throw Error("sample_flow_point: t outside [0,1]");
    if (!(sigma_min >= 0.0 && sigma_min < 1.0))
        throw Error("sample_flow_point: sigma_min outside [0,1)");

    FlowSample fs;
    fs.x0 = x0;
    fs.x1 = x1;
    fs.t = t;
    fs.sigma_min = sigma_min;
    const double a = 1.0 - (1.0 - sigma_min) * t;
    const double b = 1.0 - sigma_min;
    fs.x_t = Mat(x0.rows(), x0.cols());
    fs.u_t = Mat(x0.rows(), x0.cols());
    for (std::size_t i = 0; i < x0.rows(); ++i) {
        const double* p0 = x0.row(i);
        const double* p1 = x1.row(i);
        double* xt = fs.x_t.row(i);
        double* ut = fs.u_t.row(i);
        for (std::size_t d = 0; d < x0.cols(); ++d) {
            xt[d] = a * p0[d] + t * p1[d];
            ut[d] = p1[d] - b * p0[d];
        }
    }
    return fs;
}

// Mean squared error between the predicted velocity and u_t over frames the
// mask marks valid; padding frames contribute nothing.
inline double cfm_loss(const Mat& predicted, const FlowSample& fs,
                       const std::vector<std::uint8_t>& frame_mask) {
    if (!predicted.same_shape(fs.u_t)) throw ShapeMismatch("cfm_loss: prediction shape");
    if (frame_mask.size() != predicted.rows())
        throw ShapeMismatch("cfm_loss: mask length " + std::to_string(frame_mask.size()) +
                            " vs " + std::to_string(predicted.rows()) + " frames");
    std::size_t active = 0;
    double acc = 0.0;
    for (std::size_t i = 0; i < predicted.rows(); ++i) {
        if (!frame_mask[i]) continue;
        ++active;
        const double* p = predicted.row(i);
        const double* u = fs.u_t.row(i);
        for (std::size_t d = 0; d < predicted.cols(); ++d) {
            const double r = p[d] - u[d];
            acc += r * r;
        }
    }
    if (active == 0) throw EmptyMask("cfm_loss: no valid frames");
    return acc / (static_cast<double>(active) * static_cast<double>(predicted.cols()));
}

inline double cfm_loss(const Mat& predicted, const FlowSample& fs) {
    return cfm_loss(predicted, fs, std::vector<std::uint8_t>(predicted.rows(), 1));
}

// d(loss)/d(predicted): 2*(pred - u_t)/count on masked frames, zero elsewhere.
inline Mat cfm_loss_grad(const Mat& predicted, const FlowSample& fs,
                         const std::vector<std::uint8_t>& frame_mask) {
    if (!predicted.same_shape(fs.u_t)) throw ShapeMismatch("cfm_loss_grad: prediction shape");
    if (frame_mask.size() != predicted.rows()) throw ShapeMismatch("cfm_loss_grad: mask length");
    std::size_t active = 0;
    for (std::size_t i = 0; i < frame_mask.size(); ++i)
        if (frame_mask[i]) ++active;
    if (active == 0) throw EmptyMask("cfm_loss_grad: no valid frames");
    const double scale = 2.0 / (static_cast<double>(active) * static_cast<double>(predicted.cols()));
    Mat g(predicted.rows(), predicted.cols());
    for (std::size_t i = 0; i < predicted.rows(); ++i) {
        if (!frame_mask[i]) continue;
        const double* p = predicted.row(i);
        const double* u = fs.u_t.row(i);
        double* gi = g.row(i);
        for (std::size_t d = 0; d < predicted.cols(); ++d) gi[d] = scale * (p[d] - u[d]);
    }
    return g;
}

// Fixed-step Euler from t=0 to t=1, left-endpoint evaluation: the field is
// queried at t = k/n for k = 0..n-1, never at t = 1.
template <typename VField>
Mat euler_sample(VField&& vfield, const Mat& x0, const SamplerConfig& config) {
    config.validate();
    Mat x = x0;
    const double h = 1.0 / static_cast<double>(config.n_steps);
    for (int k = 0; k < config.n_steps; ++k) {
        const double t = static_cast<double>(k) * h;
        const Mat v = vfield(static_cast<const Mat&>(x), t);
        if (!v.same_shape(x)) throw ShapeMismatch("euler_sample: velocity shape");
        for (std::size_t idx = 0; idx < x.data().size(); ++idx)
            x.data()[idx] += h * v.data()[idx];
        for (double s : x.data())
            if (!std::isfinite(s))
                throw NonFiniteState("euler_sample: trajectory diverged at step " +
                                     std::to_string(k + 1));
    }
    return x;
}

}  // namespace koshur::cfm
