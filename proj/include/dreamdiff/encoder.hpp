#pragma once

#include <string>
#include <vector>

#include "dreamdiff/nn.hpp"

namespace dreamdiff {

struct EncoderConfig {
    int point_count = 32;    // P
    int point_channels = 4;  // planar coords + class-tag channels
    int proprio_dim = 3;
    int hidden = 32;
    int point_feat = 16;    // D_pc
    int proprio_feat = 16;  // D_prop

    int latent_dim() const { return point_feat + proprio_feat; }
};

// Shared observation encoder: a per-point MLP max-pooled over the point axis,
// concatenated with a proprioception MLP. Both downstream heads condition on
// its output, so its parameters receive gradient from both losses.
class SharedEncoder {
   public:
    SharedEncoder() = default;

    SharedEncoder(const EncoderConfig& cfg, ParameterStore& ps, Rng& rng) : cfg_(cfg) {
        pp1_ = Linear(ps, "point.fc1", cfg.point_channels, cfg.hidden, rng);
        ppn1_ = LayerNormParams(ps, "point.ln1", cfg.hidden);
        pp2_ = Linear(ps, "point.fc2", cfg.hidden, cfg.point_feat, rng);
        ppn2_ = LayerNormParams(ps, "point.ln2", cfg.point_feat);
        pr1_ = Linear(ps, "prop.fc1", cfg.proprio_dim, cfg.hidden, rng);
        prn1_ = LayerNormParams(ps, "prop.ln1", cfg.hidden);
        pr2_ = Linear(ps, "prop.fc2", cfg.hidden, cfg.proprio_feat, rng);
        prn2_ = LayerNormParams(ps, "prop.ln2", cfg.proprio_feat);
    }

    // points: (P, C), proprio: (proprio_dim) -> (point_feat + proprio_feat)
    Tensor encode(const Tensor& points, const Tensor& proprio) const {
        if (points.rank() != 2 || points.dim(0) != cfg_.point_count || points.dim(1) != cfg_.point_channels)
            throw std::invalid_argument("encode: point set " + shape_str(points.shape()) + ", expected (" +
                                        std::to_string(cfg_.point_count) + "," +
                                        std::to_string(cfg_.point_channels) + ")");
        if (proprio.rank() != 1 || proprio.dim(0) != cfg_.proprio_dim)
            throw std::invalid_argument("encode: proprio " + shape_str(proprio.shape()) + ", expected (" +
                                        std::to_string(cfg_.proprio_dim) + ")");
        Tensor h = silu(ppn1_.rows(pp1_.rows(points)));
        h = ppn2_.rows(pp2_.rows(h));
        Tensor pc = max_over_rows(h);
        Tensor pr = silu(prn1_.vec(pr1_.vec(proprio)));
        pr = prn2_.vec(pr2_.vec(pr));
        return concat_vec({pc, pr});
    }

    std::vector<Tensor> encode_window(const std::vector<std::pair<Tensor, Tensor>>& frames, int expected_len) const {
        if (static_cast<int>(frames.size()) != expected_len)
            throw std::invalid_argument("encode_window: got " + std::to_string(frames.size()) + " frames, expected " +
                                        std::to_string(expected_len));
        std::vector<Tensor> out;
        out.reserve(frames.size());
        for (const auto& [pts, prop] : frames) out.push_back(encode(pts, prop));
        return out;
    }

    const EncoderConfig& config() const { return cfg_; }

   private:
    EncoderConfig cfg_;
    Linear pp1_, pp2_, pr1_, pr2_;
    LayerNormParams ppn1_, ppn2_, prn1_, prn2_;
};

}  // namespace dreamdiff
