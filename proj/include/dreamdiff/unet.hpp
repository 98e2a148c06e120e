#pragma once

#include <string>
#include <vector>

#include "dreamdiff/nn.hpp"

namespace dreamdiff {

struct UnetConfig {
    int in_channels = 0;
    int out_channels = 0;  // 0 means same as in_channels
    int cond_dim = 0;
    int emb_dim = 16;
    std::vector<int> widths = {64, 128, 256};
    int kernel = 3;

    int resolved_out() const { return out_channels > 0 ? out_channels : in_channels; }
    int levels() const { return static_cast<int>(widths.size()); }
};

// Temporal conditional denoiser: a 1-D convolutional encoder-decoder over the
// time axis with per-block FiLM modulation from (step embedding ++ condition).
class TemporalUnet {
   public:
    TemporalUnet() = default;

    TemporalUnet(const UnetConfig& cfg, ParameterStore& ps, Rng& rng) : cfg_(cfg) {
        if (cfg_.in_channels < 1 || cfg_.cond_dim < 1 || cfg_.widths.empty())
            throw std::invalid_argument("TemporalUnet: bad config");
        int emb = cfg_.emb_dim;
        step1_ = Linear(ps, "step.fc1", emb, 4 * emb, rng);
        step2_ = Linear(ps, "step.fc2", 4 * emb, emb, rng);
        int fused = emb + cfg_.cond_dim;

        int L = cfg_.levels();
        int cin = cfg_.in_channels;
        for (int i = 0; i < L; ++i) {
            int w = cfg_.widths[static_cast<size_t>(i)];
            std::string p = "down" + std::to_string(i);
            down_.push_back(ResBlock(ps, p + ".res0", cin, w, fused, cfg_.kernel, rng));
            down_.push_back(ResBlock(ps, p + ".res1", w, w, fused, cfg_.kernel, rng));
            if (i < L - 1) downsample_.emplace_back(ps, p + ".down", w, w, cfg_.kernel, 2, cfg_.kernel / 2, &rng);
            cin = w;
        }
        int wl = cfg_.widths.back();
        mid0_ = ResBlock(ps, "mid.res0", wl, wl, fused, cfg_.kernel, rng);
        mid1_ = ResBlock(ps, "mid.res1", wl, wl, fused, cfg_.kernel, rng);
        for (int i = L - 2; i >= 0; --i) {
            int w = cfg_.widths[static_cast<size_t>(i)];
            int wu = cfg_.widths[static_cast<size_t>(i + 1)];
            std::string p = "up" + std::to_string(i);
            upconv_.emplace_back(ps, p + ".conv", wu, wu, cfg_.kernel, 1, cfg_.kernel / 2, &rng);
            up_.push_back(ResBlock(ps, p + ".res0", wu + w, w, fused, cfg_.kernel, rng));
            up_.push_back(ResBlock(ps, p + ".res1", w, w, fused, cfg_.kernel, rng));
        }
        int w0 = cfg_.widths.front();
        final_conv_ = Conv1dParams(ps, "final.conv", w0, w0, cfg_.kernel, 1, cfg_.kernel / 2, &rng);
        final_gn_gamma_ = ps.create_const("final.gn.g", {w0}, 1);
        final_gn_beta_ = ps.create_const("final.gn.b", {w0}, 0);
        final_proj_ = Conv1dParams(ps, "final.proj", w0, cfg_.resolved_out(), 1, 1, 0, &rng);
    }

    // x: (in_channels, T), cond: (cond_dim) -> (out_channels, T)
    Tensor forward(const Tensor& x, int k, const Tensor& cond) const {
        if (x.rank() != 2 || x.dim(0) != cfg_.in_channels)
            throw std::invalid_argument("TemporalUnet: input " + shape_str(x.shape()) + ", expected (" +
                                        std::to_string(cfg_.in_channels) + ",T)");
        if (cond.rank() != 1 || cond.dim(0) != cfg_.cond_dim)
            throw std::invalid_argument("TemporalUnet: condition " + shape_str(cond.shape()) + ", expected (" +
                                        std::to_string(cfg_.cond_dim) + ")");
        int T = x.dim(1);
        int L = cfg_.levels();
        int need = 1 << (L - 1);
        if (T % need != 0)
            throw std::invalid_argument("TemporalUnet: length " + std::to_string(T) + " not divisible by " +
                                        std::to_string(need));

        Tensor emb = silu(step1_.vec(sinusoidal_embedding(k, cfg_.emb_dim)));
        emb = step2_.vec(emb);
        Tensor fused = concat_vec({emb, cond});

        Tensor h = x;
        std::vector<Tensor> skips;
        for (int i = 0; i < L; ++i) {
            h = down_[static_cast<size_t>(2 * i)].forward(h, fused);
            h = down_[static_cast<size_t>(2 * i + 1)].forward(h, fused);
            if (i < L - 1) {
                skips.push_back(h);
                h = downsample_[static_cast<size_t>(i)].apply(h);
            }
        }
        h = mid0_.forward(h, fused);
        h = mid1_.forward(h, fused);
        for (int u = 0; u < L - 1; ++u) {
            h = upconv_[static_cast<size_t>(u)].apply(upsample2(h));
            h = concat_channels(h, skips[skips.size() - 1 - static_cast<size_t>(u)]);
            h = up_[static_cast<size_t>(2 * u)].forward(h, fused);
            h = up_[static_cast<size_t>(2 * u + 1)].forward(h, fused);
        }
        h = final_conv_.apply(h);
        h = silu(group_norm(h, norm_groups_for(cfg_.widths.front()), final_gn_gamma_, final_gn_beta_));
        return final_proj_.apply(h);
    }

    const UnetConfig& config() const { return cfg_; }

   private:
    struct ResBlock {
        Conv1dParams conv1, conv2;
        Tensor gn1_g, gn1_b, gn2_g, gn2_b;
        Linear film;
        Conv1dParams skip;
        bool has_skip = false;
        int cout = 0;

        ResBlock() = default;
        ResBlock(ParameterStore& ps, const std::string& p, int cin, int cout_, int cond_dim, int kernel, Rng& rng)
            : cout(cout_) {
            conv1 = Conv1dParams(ps, p + ".conv1", cin, cout, kernel, 1, kernel / 2, &rng);
            gn1_g = ps.create_const(p + ".gn1.g", {cout}, 1);
            gn1_b = ps.create_const(p + ".gn1.b", {cout}, 0);
            conv2 = Conv1dParams(ps, p + ".conv2", cout, cout, kernel, 1, kernel / 2, &rng);
            gn2_g = ps.create_const(p + ".gn2.g", {cout}, 1);
            gn2_b = ps.create_const(p + ".gn2.b", {cout}, 0);
            film = Linear(ps, p + ".film", cond_dim, 2 * cout, rng);
            if (cin != cout) {
                skip = Conv1dParams(ps, p + ".skip", cin, cout, 1, 1, 0, &rng);
                has_skip = true;
            }
        }

        Tensor forward(const Tensor& x, const Tensor& fused_cond) const {
            int groups = norm_groups_for(cout);
            Tensor h = silu(group_norm(conv1.apply(x), groups, gn1_g, gn1_b));
            Tensor sb = film.vec(fused_cond);
            Tensor s = slice_vec(sb, 0, cout);
            Tensor b = slice_vec(sb, cout, cout);
            h = film_mod(h, s, b);
            h = silu(group_norm(conv2.apply(h), groups, gn2_g, gn2_b));
            return add(h, has_skip ? skip.apply(x) : x);
        }
    };

    UnetConfig cfg_;
    Linear step1_, step2_;
    std::vector<ResBlock> down_;
    std::vector<Conv1dParams> downsample_;
    ResBlock mid0_, mid1_;
    std::vector<Conv1dParams> upconv_;
    std::vector<ResBlock> up_;
    Conv1dParams final_conv_;
    Tensor final_gn_gamma_, final_gn_beta_;
    Conv1dParams final_proj_;
};

}  // namespace dreamdiff
