#pragma once

#include <vector>

#include "dreamdiff/diffusion.hpp"
#include "dreamdiff/unet.hpp"

namespace dreamdiff {

enum class SamplerKind { ddpm, ddim };

struct PolicyConfig {
    int horizon = 16;      // H
    int exec_len = 8;      // N, the executed prefix
    int action_dim = 3;    // A
    int context_dim = 64;  // flattened history window, M*D
    int emb_dim = 16;
    std::vector<int> widths = {64, 128, 256};

    UnetConfig unet() const { return {action_dim, action_dim, context_dim, emb_dim, widths}; }
};

// Temporal conditional denoiser over the action horizon, FiLM-conditioned on
// the flattened history window. Samples full H-plans; callers execute the
// first exec_len rows before replanning.
class DiffusionPolicy {
   public:
    DiffusionPolicy() = default;
    DiffusionPolicy(const PolicyConfig& cfg, ParameterStore& ps, Rng& rng) : cfg_(cfg), net_(cfg.unet(), ps, rng) {
        if (cfg_.exec_len > cfg_.horizon) throw std::invalid_argument("DiffusionPolicy: exec_len exceeds horizon");
    }

    // noisy: (H, A), context: (context_dim) -> noise estimate (H, A)
    Tensor denoise(const Tensor& noisy, int k, const Tensor& context) const {
        if (noisy.rank() != 2 || noisy.dim(0) != cfg_.horizon || noisy.dim(1) != cfg_.action_dim)
            throw std::invalid_argument("policy denoise: plan " + shape_str(noisy.shape()) + ", expected (" +
                                        std::to_string(cfg_.horizon) + "," + std::to_string(cfg_.action_dim) + ")");
        return transpose(net_.forward(transpose(noisy), k, context));
    }

    // full H-step plan in normalized action space
    Tensor sample_plan(const Tensor& context, const NoiseSchedule& sched, SamplerKind kind, int ddim_steps,
                       Rng& rng) const {
        DenoiseFn fn = [&](const Tensor& noisy, int k) { return denoise(noisy, k, context); };
        Shape shape{cfg_.horizon, cfg_.action_dim};
        return kind == SamplerKind::ddpm ? ddpm_sample(fn, shape, sched, rng)
                                         : ddim_sample(fn, shape, sched, ddim_steps, rng);
    }

    const PolicyConfig& config() const { return cfg_; }
    const TemporalUnet& net() const { return net_; }

   private:
    PolicyConfig cfg_;
    TemporalUnet net_;
};

}  // namespace dreamdiff
