#pragma once

#include <functional>
#include <vector>

#include "dreamdiff/diffusion.hpp"
#include "dreamdiff/policy.hpp"
#include "dreamdiff/unet.hpp"

namespace dreamdiff {

struct WorldModelConfig {
    int pred_len = 8;     // N future latents
    int hist_len = 2;     // M history latents
    int latent_dim = 32;  // D
    int action_dim = 3;   // A
    int emb_dim = 16;
    std::vector<int> widths = {64, 128, 256};

    int hist_channels() const { return hist_len * latent_dim; }
    UnetConfig unet() const {
        return {hist_channels() + latent_dim, latent_dim, pred_len * action_dim, emb_dim, widths};
    }
};

// Latent dynamics denoiser: the flattened history window is repeated across
// the temporal axis and channel-concatenated with the noisy future latents;
// the executed action chunk conditions every block via FiLM.
class LatentWorldModel {
   public:
    LatentWorldModel() = default;
    LatentWorldModel(const WorldModelConfig& cfg, ParameterStore& ps, Rng& rng)
        : cfg_(cfg), net_(cfg.unet(), ps, rng) {}

    // exposed so the construction invariant (history channels constant across
    // the temporal axis) is directly assertable
    Tensor conditioned_input(const Tensor& hist_flat, const Tensor& noisy_future) const {
        if (hist_flat.rank() != 1 || hist_flat.dim(0) != cfg_.hist_channels())
            throw std::invalid_argument("world model: history " + shape_str(hist_flat.shape()) + ", expected (" +
                                        std::to_string(cfg_.hist_channels()) + ")");
        if (noisy_future.rank() != 2 || noisy_future.dim(0) != cfg_.pred_len ||
            noisy_future.dim(1) != cfg_.latent_dim)
            throw std::invalid_argument("world model: future " + shape_str(noisy_future.shape()) + ", expected (" +
                                        std::to_string(cfg_.pred_len) + "," + std::to_string(cfg_.latent_dim) + ")");
        return concat_channels(repeat_cols(hist_flat, cfg_.pred_len), transpose(noisy_future));
    }

    // noisy_future: (N, D), acts_flat: (N*A) -> noise estimate (N, D)
    Tensor denoise(const Tensor& noisy_future, int k, const Tensor& hist_flat, const Tensor& acts_flat) const {
        if (acts_flat.rank() != 1 || acts_flat.dim(0) != cfg_.pred_len * cfg_.action_dim)
            throw std::invalid_argument("world model: action condition " + shape_str(acts_flat.shape()) +
                                        ", expected (" + std::to_string(cfg_.pred_len * cfg_.action_dim) + ")");
        Tensor x = conditioned_input(hist_flat, noisy_future);
        return transpose(net_.forward(x, k, acts_flat));
    }

    // denoised N future latents for a given history window and action chunk
    Tensor predict(const Tensor& hist_flat, const Tensor& acts_flat, const NoiseSchedule& sched, SamplerKind kind,
                   int ddim_steps, Rng& rng) const {
        DenoiseFn fn = [&](const Tensor& noisy, int k) { return denoise(noisy, k, hist_flat, acts_flat); };
        Shape shape{cfg_.pred_len, cfg_.latent_dim};
        return kind == SamplerKind::ddpm ? ddpm_sample(fn, shape, sched, rng)
                                         : ddim_sample(fn, shape, sched, ddim_steps, rng);
    }

    struct RolloutResult {
        std::vector<std::vector<scalar>> latents;                    // cycles*N rows of D
        std::vector<std::vector<std::vector<scalar>>> cycle_windows; // history used per cycle (M rows)
    };

    // Autoregressive latent rollout: after each cycle the last M of the N
    // predicted latents become the next history window.
    RolloutResult rollout(const std::vector<std::vector<scalar>>& window,
                          const std::function<std::vector<scalar>(int cycle)>& acts_provider, int cycles,
                          const NoiseSchedule& sched, SamplerKind kind, int ddim_steps, Rng& rng) const {
        if (cycles < 1) throw std::invalid_argument("rollout: cycles must be >= 1");
        if (cfg_.pred_len < cfg_.hist_len)
            throw std::invalid_argument("rollout: window cannot slide, N=" + std::to_string(cfg_.pred_len) +
                                        " < M=" + std::to_string(cfg_.hist_len));
        if (static_cast<int>(window.size()) != cfg_.hist_len)
            throw std::invalid_argument("rollout: window has " + std::to_string(window.size()) + " rows, expected " +
                                        std::to_string(cfg_.hist_len));
        RolloutResult out;
        std::vector<std::vector<scalar>> hist = window;
        for (int c = 0; c < cycles; ++c) {
            out.cycle_windows.push_back(hist);
            std::vector<scalar> flat;
            flat.reserve(static_cast<size_t>(cfg_.hist_channels()));
            for (const auto& row : hist) {
                if (static_cast<int>(row.size()) != cfg_.latent_dim)
                    throw std::invalid_argument("rollout: latent width " + std::to_string(row.size()) +
                                                ", expected " + std::to_string(cfg_.latent_dim));
                flat.insert(flat.end(), row.begin(), row.end());
            }
            std::vector<scalar> acts = acts_provider(c);
            Tensor pred = predict(Tensor::leaf({cfg_.hist_channels()}, std::move(flat)),
                                  Tensor::leaf({cfg_.pred_len * cfg_.action_dim}, std::move(acts)), sched, kind,
                                  ddim_steps, rng);
            std::vector<std::vector<scalar>> rows(static_cast<size_t>(cfg_.pred_len));
            for (int i = 0; i < cfg_.pred_len; ++i) {
                rows[static_cast<size_t>(i)].assign(pred.data().begin() + static_cast<long>(i) * cfg_.latent_dim,
                                                    pred.data().begin() + static_cast<long>(i + 1) * cfg_.latent_dim);
                out.latents.push_back(rows[static_cast<size_t>(i)]);
            }
            hist.assign(rows.end() - cfg_.hist_len, rows.end());
        }
        return out;
    }

    const WorldModelConfig& config() const { return cfg_; }
    const TemporalUnet& net() const { return net_; }

   private:
    WorldModelConfig cfg_;
    TemporalUnet net_;
};

}  // namespace dreamdiff
