#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dreamdiff/rng.hpp"
#include "dreamdiff/tensor.hpp"

namespace dreamdiff {

struct NoiseSchedule {
    int steps = 0;  // K
    std::vector<scalar> beta;       // index k-1 holds beta_k, k in [1,K]
    std::vector<scalar> alpha;      // 1 - beta
    std::vector<scalar> alpha_bar;  // cumulative product

    static NoiseSchedule linear(int K, scalar beta_lo = scalar(1e-4), scalar beta_hi = scalar(2e-2)) {
        if (K < 1) throw std::invalid_argument("NoiseSchedule: K must be >= 1");
        NoiseSchedule s;
        s.steps = K;
        s.beta.resize(static_cast<size_t>(K));
        for (int k = 0; k < K; ++k)
            s.beta[static_cast<size_t>(k)] =
                K == 1 ? beta_hi : beta_lo + (beta_hi - beta_lo) * static_cast<scalar>(k) / static_cast<scalar>(K - 1);
        s.finish();
        return s;
    }

    static NoiseSchedule from_betas(std::vector<scalar> betas) {
        NoiseSchedule s;
        s.steps = static_cast<int>(betas.size());
        s.beta = std::move(betas);
        s.finish();
        return s;
    }

    void finish() {
        alpha.resize(beta.size());
        alpha_bar.resize(beta.size());
        scalar prod = 1;
        scalar prev_beta = 0;
        for (size_t i = 0; i < beta.size(); ++i) {
            if (!(beta[i] > 0 && beta[i] < 1))
                throw std::invalid_argument("NoiseSchedule: beta_" + std::to_string(i + 1) + " out of (0,1)");
            if (beta[i] < prev_beta)
                throw std::invalid_argument("NoiseSchedule: beta must be non-decreasing at step " +
                                            std::to_string(i + 1));
            prev_beta = beta[i];
            alpha[i] = scalar(1) - beta[i];
            scalar next = prod * alpha[i];
            if (!(next > 0 && next < prod))
                throw std::invalid_argument("NoiseSchedule: alpha_bar not strictly decreasing at step " +
                                            std::to_string(i + 1));
            alpha_bar[i] = next;
            prod = next;
        }
    }

    void check_step(int k) const {
        if (k < 1 || k > steps)
            throw std::invalid_argument("diffusion step " + std::to_string(k) + " outside [1," +
                                        std::to_string(steps) + "]");
    }

    scalar a_bar(int k) const {  // alpha_bar_k with alpha_bar_0 = 1
        if (k == 0) return 1;
        check_step(k);
        return alpha_bar[static_cast<size_t>(k - 1)];
    }
};

// q(x_k | x_0): sqrt(abar_k) x0 + sqrt(1-abar_k) eps. Autodiff-capable so the
// world-model targets can carry gradient through the corruption.
inline Tensor add_noise(const Tensor& x0, const Tensor& eps, int k, const NoiseSchedule& sched) {
    if (x0.shape() != eps.shape())
        throw std::invalid_argument("add_noise: shape mismatch " + shape_str(x0.shape()) + " vs " +
                                    shape_str(eps.shape()));
    sched.check_step(k);
    scalar ab = sched.a_bar(k);
    return add(scale(x0, std::sqrt(ab)), scale(eps, std::sqrt(scalar(1) - ab)));
}

// conditional noise predictor, conditioning pre-bound by the caller
using DenoiseFn = std::function<Tensor(const Tensor& noisy, int k)>;

namespace detail {
inline void check_finite_step(const std::vector<scalar>& v, int k, const char* who) {
    for (scalar x : v)
        if (!std::isfinite(x))
            throw std::runtime_error(std::string(who) + ": non-finite value at diffusion step " + std::to_string(k));
}

inline constexpr scalar kX0Clamp = scalar(1.5);  // normalized-space stabilization

inline std::vector<scalar> estimate_x0(const std::vector<scalar>& xk, const std::vector<scalar>& eps_hat, scalar ab) {
    std::vector<scalar> x0(xk.size());
    scalar sa = std::sqrt(ab), sb = std::sqrt(scalar(1) - ab);
    for (size_t i = 0; i < xk.size(); ++i) {
        scalar v = (xk[i] - sb * eps_hat[i]) / sa;
        x0[i] = std::clamp(v, -kX0Clamp, kX0Clamp);
    }
    return x0;
}
}  // namespace detail

// Ancestral DDPM sampling from pure noise; deterministic given the rng state.
inline Tensor ddpm_sample(const DenoiseFn& denoiser, const Shape& shape, const NoiseSchedule& sched, Rng& rng) {
    NoGrad ng;
    size_t n = numel(shape);
    std::vector<scalar> x(n);
    for (size_t i = 0; i < n; ++i) x[i] = static_cast<scalar>(rng.normal());
    for (int k = sched.steps; k >= 1; --k) {
        Tensor eps_hat = denoiser(Tensor::leaf(shape, x), k);
        if (eps_hat.shape() != shape)
            throw std::runtime_error("ddpm_sample: denoiser returned " + shape_str(eps_hat.shape()) + ", expected " +
                                     shape_str(shape));
        scalar ab = sched.a_bar(k), ab_prev = sched.a_bar(k - 1);
        scalar beta_k = sched.beta[static_cast<size_t>(k - 1)];
        scalar alpha_k = sched.alpha[static_cast<size_t>(k - 1)];
        std::vector<scalar> x0 = detail::estimate_x0(x, eps_hat.data(), ab);
        // posterior mean coefficients
        scalar c0 = std::sqrt(ab_prev) * beta_k / (scalar(1) - ab);
        scalar ck = std::sqrt(alpha_k) * (scalar(1) - ab_prev) / (scalar(1) - ab);
        scalar sigma = k > 1 ? std::sqrt((scalar(1) - ab_prev) / (scalar(1) - ab) * beta_k) : scalar(0);
        for (size_t i = 0; i < n; ++i) {
            scalar mean = c0 * x0[i] + ck * x[i];
            x[i] = k > 1 ? mean + sigma * static_cast<scalar>(rng.normal()) : mean;
        }
        detail::check_finite_step(x, k, "ddpm_sample");
    }
    return Tensor::leaf(shape, std::move(x));
}

// deterministic DDIM (eta = 0) over an evenly strided sub-schedule
inline Tensor ddim_sample(const DenoiseFn& denoiser, const Shape& shape, const NoiseSchedule& sched, int steps,
                          Rng& rng) {
    if (steps < 1) throw std::invalid_argument("ddim_sample: steps must be >= 1");
    if (steps > sched.steps) throw std::invalid_argument("ddim_sample: steps exceed schedule length");
    NoGrad ng;
    // tau_i = round(i*K/steps), strictly increasing, tau_last = K
    std::vector<int> taus(static_cast<size_t>(steps));
    for (int i = 1; i <= steps; ++i) {
        int t = static_cast<int>(std::lround(static_cast<double>(i) * sched.steps / steps));
        taus[static_cast<size_t>(i - 1)] = std::max(t, i);
    }
    size_t n = numel(shape);
    std::vector<scalar> x(n);
    for (size_t i = 0; i < n; ++i) x[i] = static_cast<scalar>(rng.normal());
    for (int i = steps - 1; i >= 0; --i) {
        int k = taus[static_cast<size_t>(i)];
        int k_prev = i > 0 ? taus[static_cast<size_t>(i - 1)] : 0;
        Tensor eps_hat = denoiser(Tensor::leaf(shape, x), k);
        if (eps_hat.shape() != shape)
            throw std::runtime_error("ddim_sample: denoiser returned " + shape_str(eps_hat.shape()) + ", expected " +
                                     shape_str(shape));
        scalar ab = sched.a_bar(k), ab_prev = sched.a_bar(k_prev);
        std::vector<scalar> x0 = detail::estimate_x0(x, eps_hat.data(), ab);
        scalar sa = std::sqrt(ab_prev), sb = std::sqrt(scalar(1) - ab_prev);
        const auto& eh = eps_hat.data();
        for (size_t j = 0; j < n; ++j) x[j] = sa * x0[j] + sb * eh[j];
        detail::check_finite_step(x, k, "ddim_sample");
    }
    return Tensor::leaf(shape, std::move(x));
}

}  // namespace dreamdiff
