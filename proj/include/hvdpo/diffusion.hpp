#pragma once

#include <functional>

#include "hvdpo/autodiff.hpp"
#include "hvdpo/schedule.hpp"
#include "hvdpo/tensor.hpp"

namespace hvdpo {

namespace detail {

template <typename T>
int frames_of(const TensorT<T>& video, const FrameMask& mask) {
    if (video.shape.empty() || video.shape[0] != mask.frames()) {
        throw std::runtime_error("video/mask mismatch: video " + shape_str(video.shape) +
                                 " vs " + std::to_string(mask.frames()) + " mask frames");
    }
    return video.shape[0];
}

template <typename T>
int64_t frame_stride(const TensorT<T>& video) {
    return video.numel() / video.shape[0];
}

}  // namespace detail

// Closed-form forward process x_t = sqrt(abar_t) x0 + sqrt(1-abar_t) eps,
// applied per frame; clean frames come back equal to their x0 frames.
template <typename T>
TensorT<T> q_sample(const TensorT<T>& x0, int t, const TensorT<T>& eps,
                    const NoiseSchedule& schedule, const FrameMask& mask) {
    if (!x0.same_shape(eps)) {
        throw std::runtime_error("q_sample: x0 " + shape_str(x0.shape) + " vs eps " +
                                 shape_str(eps.shape));
    }
    int frames = detail::frames_of(x0, mask);
    int64_t stride = detail::frame_stride(x0);
    double abar = schedule.alpha_bar(t);
    T signal = static_cast<T>(std::sqrt(abar));
    T noise = static_cast<T>(std::sqrt(1.0 - abar));
    TensorT<T> out = x0;
    for (int f = 0; f < frames; ++f) {
        if (mask.clean(f)) continue;
        for (int64_t i = f * stride; i < (f + 1) * stride; ++i) {
            out.data[static_cast<size_t>(i)] =
                signal * x0.data[static_cast<size_t>(i)] + noise * eps.data[static_cast<size_t>(i)];
        }
    }
    return out;
}

// 0/1 tensor that keeps noised frames and zeroes clean ones.
template <typename T>
TensorT<T> noised_frame_mask01(const Shape& video_shape, const FrameMask& mask) {
    TensorT<T> m(video_shape);
    int64_t stride = numel_of(video_shape) / video_shape[0];
    for (int f = 0; f < video_shape[0]; ++f) {
        if (mask.clean(f)) continue;
        for (int64_t i = f * stride; i < (f + 1) * stride; ++i) m.data[static_cast<size_t>(i)] = T(1);
    }
    return m;
}

// Mean of (pred - target)^2 over the elements of non-clean frames, on tape.
template <typename T>
Var masked_mse(TapeT<T>& tape, Var pred, const TensorT<T>& target, const FrameMask& mask) {
    const auto& pv = tape.value(pred);
    if (!pv.same_shape(target)) {
        throw std::runtime_error("masked_mse: prediction " + shape_str(pv.shape) + " vs target " +
                                 shape_str(target.shape));
    }
    int noised = mask.noised_count();
    if (noised == 0) throw std::runtime_error("masked_mse: no noised frames");
    int64_t per_frame = detail::frame_stride(pv);
    Var diff = tape.subtract(pred, tape.constant(target));
    Var kept = tape.multiply(diff, tape.constant(noised_frame_mask01<T>(pv.shape, mask)));
    Var ss = tape.squared_norm(kept);
    return tape.scale(ss, 1.0 / static_cast<double>(noised * per_frame));
}

// Deterministic (eta = 0) DDIM update from timestep t down to t_prev.
template <typename T>
TensorT<T> ddim_step(const TensorT<T>& x_t, const TensorT<T>& eps_pred, int t, int t_prev,
                     const NoiseSchedule& schedule, const FrameMask& mask) {
    if (!x_t.same_shape(eps_pred)) {
        throw std::runtime_error("ddim_step: x_t " + shape_str(x_t.shape) + " vs eps " +
                                 shape_str(eps_pred.shape));
    }
    if (!(t > t_prev && t_prev >= 0)) {
        throw std::runtime_error("ddim_step: require t > t_prev >= 0, got t=" + std::to_string(t) +
                                 " t_prev=" + std::to_string(t_prev));
    }
    int frames = detail::frames_of(x_t, mask);
    int64_t stride = detail::frame_stride(x_t);
    double abar_t = schedule.alpha_bar(t);
    double abar_p = schedule.alpha_bar(t_prev);
    double inv_sqrt_t = 1.0 / std::sqrt(abar_t);
    double noise_t = std::sqrt(1.0 - abar_t);
    double sig_p = std::sqrt(abar_p);
    double noise_p = std::sqrt(1.0 - abar_p);
    TensorT<T> out = x_t;
    for (int f = 0; f < frames; ++f) {
        if (mask.clean(f)) continue;
        for (int64_t i = f * stride; i < (f + 1) * stride; ++i) {
            size_t k = static_cast<size_t>(i);
            double e = static_cast<double>(eps_pred.data[k]);
            double x0_hat = (static_cast<double>(x_t.data[k]) - noise_t * e) * inv_sqrt_t;
            out.data[k] = static_cast<T>(sig_p * x0_hat + noise_p * e);
        }
    }
    return out;
}

// Algebraic inverse of ddim_step with the same eps_pred: maps x_{t_prev} up to x_t.
template <typename T>
TensorT<T> ddim_step_up(const TensorT<T>& x_prev, const TensorT<T>& eps_pred, int t_prev, int t,
                        const NoiseSchedule& schedule, const FrameMask& mask) {
    if (!x_prev.same_shape(eps_pred)) {
        throw std::runtime_error("ddim_step_up: x " + shape_str(x_prev.shape) + " vs eps " +
                                 shape_str(eps_pred.shape));
    }
    if (!(t > t_prev && t_prev >= 0)) {
        throw std::runtime_error("ddim_step_up: require t > t_prev >= 0");
    }
    int frames = detail::frames_of(x_prev, mask);
    int64_t stride = detail::frame_stride(x_prev);
    double abar_t = schedule.alpha_bar(t);
    double abar_p = schedule.alpha_bar(t_prev);
    double inv_sqrt_p = 1.0 / std::sqrt(abar_p);
    double noise_p = std::sqrt(1.0 - abar_p);
    double sig_t = std::sqrt(abar_t);
    double noise_t = std::sqrt(1.0 - abar_t);
    TensorT<T> out = x_prev;
    for (int f = 0; f < frames; ++f) {
        if (mask.clean(f)) continue;
        for (int64_t i = f * stride; i < (f + 1) * stride; ++i) {
            size_t k = static_cast<size_t>(i);
            double e = static_cast<double>(eps_pred.data[k]);
            double x0_hat = (static_cast<double>(x_prev.data[k]) - noise_p * e) * inv_sqrt_p;
            out.data[k] = static_cast<T>(sig_t * x0_hat + noise_t * e);
        }
    }
    return out;
}

// Noise predictor as seen by the samplers: (latent, timestep) -> eps.
template <typename T>
using EpsModel = std::function<TensorT<T>(const TensorT<T>&, int)>;

// Iterated DDIM denoising along a strictly decreasing step list, finishing at
// timestep 0. Clean frames pass through untouched.
template <typename T>
TensorT<T> ddim_sample(const EpsModel<T>& model, const TensorT<T>& x_start,
                       const std::vector<int>& steps, const NoiseSchedule& schedule,
                       const FrameMask& mask) {
    if (steps.empty()) throw std::runtime_error("ddim_sample: empty step list");
    for (size_t i = 0; i + 1 < steps.size(); ++i) {
        if (steps[i] <= steps[i + 1]) {
            throw std::runtime_error("ddim_sample: steps must be strictly decreasing");
        }
    }
    if (steps.back() < 1) throw std::runtime_error("ddim_sample: steps must end at t >= 1");
    TensorT<T> x = x_start;
    for (size_t i = 0; i < steps.size(); ++i) {
        int t = steps[i];
        int t_prev = i + 1 < steps.size() ? steps[i + 1] : 0;
        TensorT<T> eps = model(x, t);
        x = ddim_step(x, eps, t, t_prev, schedule, mask);
    }
    return x;
}

// DDIM inversion: runs the recurrence in reverse along an increasing step
// list, mapping data to a high-noise latent. The model is evaluated at the
// current latent with the target timestep.
template <typename T>
TensorT<T> ddim_invert(const EpsModel<T>& model, const TensorT<T>& x0,
                       const std::vector<int>& steps, const NoiseSchedule& schedule,
                       const FrameMask& mask) {
    if (steps.empty()) throw std::runtime_error("ddim_invert: empty step list");
    for (size_t i = 0; i + 1 < steps.size(); ++i) {
        if (steps[i] >= steps[i + 1]) {
            throw std::runtime_error("ddim_invert: steps must be strictly increasing");
        }
    }
    if (steps.front() < 1) throw std::runtime_error("ddim_invert: steps must start at t >= 1");
    TensorT<T> x = x0;
    int t_prev = 0;
    for (int t : steps) {
        TensorT<T> eps = model(x, t);
        x = ddim_step_up(x, eps, t_prev, t, schedule, mask);
        t_prev = t;
    }
    return x;
}

// Evenly spaced strictly decreasing timesteps T, ..., down to T/n.
inline std::vector<int> make_sampling_steps(int total_steps, int n) {
    if (n < 1 || n > total_steps) {
        throw std::runtime_error("sampling steps: need 1 <= n <= T");
    }
    std::vector<int> steps(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        int t = total_steps - static_cast<int>((static_cast<int64_t>(i) * total_steps) / n);
        steps[static_cast<size_t>(i)] = t;
    }
    return steps;
}

}  // namespace hvdpo
