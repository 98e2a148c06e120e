#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "dreamdiff/optim.hpp"
#include "dreamdiff/tensor.hpp"

namespace dreamdiff {

struct Linear {
    Tensor w, b;
    Linear() = default;
    Linear(ParameterStore& ps, const std::string& prefix, int in, int out, Rng& rng)
        : w(ps.create(prefix + ".w", {out, in}, in, rng)), b(ps.create(prefix + ".b", {out}, in, rng)) {}
    Tensor vec(const Tensor& x) const { return linear_vec(x, w, b); }
    Tensor rows(const Tensor& x) const { return linear_rows(x, w, b); }
};

struct LayerNormParams {
    Tensor gamma, beta;
    LayerNormParams() = default;
    LayerNormParams(ParameterStore& ps, const std::string& prefix, int width)
        : gamma(ps.create_const(prefix + ".g", {width}, 1)), beta(ps.create_const(prefix + ".b", {width}, 0)) {}
    Tensor vec(const Tensor& x) const { return layer_norm(x, gamma, beta); }
    Tensor rows(const Tensor& x) const { return layer_norm_rows(x, gamma, beta); }
};

struct Conv1dParams {
    Tensor w, b;
    int stride = 1, pad = 0;
    Conv1dParams() = default;
    Conv1dParams(ParameterStore& ps, const std::string& prefix, int cin, int cout, int kernel, int stride_ = 1,
                 int pad_ = 0, Rng* rng = nullptr)
        : stride(stride_), pad(pad_) {
        Rng tmp(0);
        Rng& r = rng ? *rng : tmp;
        w = ps.create(prefix + ".w", {cout, cin, kernel}, cin * kernel, r);
        b = ps.create(prefix + ".b", {cout}, cin * kernel, r);
    }
    Tensor apply(const Tensor& x) const { return conv1d(x, w, b, stride, pad); }
};

// sinusoidal embedding of an integer diffusion step (no gradient; pure function)
inline Tensor sinusoidal_embedding(int k, int dim) {
    if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("sinusoidal_embedding: dim must be even and >= 2");
    int half = dim / 2;
    std::vector<scalar> v(static_cast<size_t>(dim));
    double log_max = std::log(10000.0);
    for (int i = 0; i < half; ++i) {
        double freq = std::exp(-log_max * (half > 1 ? static_cast<double>(i) / (half - 1) : 0.0));
        v[static_cast<size_t>(i)] = static_cast<scalar>(std::sin(k * freq));
        v[static_cast<size_t>(half + i)] = static_cast<scalar>(std::cos(k * freq));
    }
    return Tensor::leaf({dim}, std::move(v));
}

inline int norm_groups_for(int channels) {
    for (int g = std::min(8, channels); g >= 1; --g)
        if (channels % g == 0) return g;
    return 1;
}

}  // namespace dreamdiff
