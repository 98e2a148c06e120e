#pragma once

#include <cstdio>
#include <filesystem>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "dreamdiff/checkpoint.hpp"
#include "dreamdiff/dataset.hpp"
#include "dreamdiff/encoder.hpp"
#include "dreamdiff/normalize.hpp"
#include "dreamdiff/policy.hpp"
#include "dreamdiff/world_model.hpp"

namespace dreamdiff {

inline std::string join_ints(const std::vector<int>& v) {
    std::ostringstream os;
    for (size_t i = 0; i < v.size(); ++i) os << v[i] << (i + 1 < v.size() ? "," : "");
    return os.str();
}

inline std::vector<int> split_ints(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(std::stoi(item));
    return out;
}

struct TrainConfig {
    // sequence structure
    int hist_len = 2;   // M
    int pred_len = 8;   // N
    int horizon = 16;   // H
    // encoder
    int point_count = 32;
    int enc_hidden = 32;
    int point_feat = 16;
    int proprio_feat = 16;
    // denoisers
    std::vector<int> policy_widths = {64, 128, 256};
    std::vector<int> wm_widths = {64, 128, 256};
    int emb_dim = 16;
    // diffusion
    int diffusion_steps = 50;
    double beta_lo = 1e-4, beta_hi = 2e-2;
    int ddim_steps = 10;
    // optimization
    double lambda = 1.0;
    int epochs = 300;
    int steps_per_epoch = 16;
    int batch_size = 16;
    double lr = 3e-4;
    double ema_decay = 0.995;
    uint64_t seed = 1;
    bool stopgrad_targets = false;
    bool pad_history_start = true;
    double divergence_limit = 1e3;
    int checkpoint_every = 0;

    int latent_dim() const { return point_feat + proprio_feat; }

    void validate() const {
        if (hist_len < 1) throw std::invalid_argument("TrainConfig: M must be >= 1");
        if (pred_len > horizon) throw std::invalid_argument("TrainConfig: N must not exceed H");
        if (lambda < 0) throw std::invalid_argument("TrainConfig: lambda must be >= 0");
        if (batch_size < 1 || epochs < 0 || steps_per_epoch < 1)
            throw std::invalid_argument("TrainConfig: bad loop sizes");
    }
};

// The three co-trained networks plus everything inference needs.
struct ModelBundle {
    TrainConfig cfg;
    std::string task;
    int point_channels = 0, proprio_dim = 3, action_dim = 3;
    std::unique_ptr<ParameterStore> enc_store, pol_store, wm_store;
    SharedEncoder encoder;
    DiffusionPolicy policy;
    LatentWorldModel wm;
    NoiseSchedule sched;
    NormStats stats;

    static ModelBundle build(const TrainConfig& cfg, const std::string& task, int point_channels, int proprio_dim,
                             int action_dim) {
        cfg.validate();
        ModelBundle b;
        b.cfg = cfg;
        b.task = task;
        b.point_channels = point_channels;
        b.proprio_dim = proprio_dim;
        b.action_dim = action_dim;
        b.enc_store = std::make_unique<ParameterStore>("encoder");
        b.pol_store = std::make_unique<ParameterStore>("policy");
        b.wm_store = std::make_unique<ParameterStore>("world_model");
        Rng root(cfg.seed);
        Rng enc_rng = root.fork("init.encoder");
        Rng pol_rng = root.fork("init.policy");
        Rng wm_rng = root.fork("init.world_model");
        EncoderConfig ec{cfg.point_count, point_channels, proprio_dim, cfg.enc_hidden, cfg.point_feat,
                         cfg.proprio_feat};
        b.encoder = SharedEncoder(ec, *b.enc_store, enc_rng);
        PolicyConfig pc{cfg.horizon, cfg.pred_len, action_dim, cfg.hist_len * cfg.latent_dim(), cfg.emb_dim,
                        cfg.policy_widths};
        b.policy = DiffusionPolicy(pc, *b.pol_store, pol_rng);
        WorldModelConfig wc{cfg.pred_len, cfg.hist_len, cfg.latent_dim(), action_dim, cfg.emb_dim, cfg.wm_widths};
        b.wm = LatentWorldModel(wc, *b.wm_store, wm_rng);
        b.sched = NoiseSchedule::linear(cfg.diffusion_steps, static_cast<scalar>(cfg.beta_lo),
                                        static_cast<scalar>(cfg.beta_hi));
        return b;
    }

    std::vector<ParameterStore*> stores() { return {enc_store.get(), pol_store.get(), wm_store.get()}; }

    Checkpoint to_checkpoint(int epoch, const Adam* opt, const EmaShadow* ema) const {
        Checkpoint c;
        c.meta["task"] = task;
        c.meta["M"] = std::to_string(cfg.hist_len);
        c.meta["N"] = std::to_string(cfg.pred_len);
        c.meta["H"] = std::to_string(cfg.horizon);
        c.meta["A"] = std::to_string(action_dim);
        c.meta["point_count"] = std::to_string(cfg.point_count);
        c.meta["point_channels"] = std::to_string(point_channels);
        c.meta["proprio_dim"] = std::to_string(proprio_dim);
        c.meta["enc_hidden"] = std::to_string(cfg.enc_hidden);
        c.meta["point_feat"] = std::to_string(cfg.point_feat);
        c.meta["proprio_feat"] = std::to_string(cfg.proprio_feat);
        c.meta["policy_widths"] = join_ints(cfg.policy_widths);
        c.meta["wm_widths"] = join_ints(cfg.wm_widths);
        c.meta["emb_dim"] = std::to_string(cfg.emb_dim);
        c.meta["K"] = std::to_string(cfg.diffusion_steps);
        c.meta["beta_lo"] = std::to_string(cfg.beta_lo);
        c.meta["beta_hi"] = std::to_string(cfg.beta_hi);
        c.meta["ddim_steps"] = std::to_string(cfg.ddim_steps);
        c.meta["lambda"] = std::to_string(cfg.lambda);
        c.meta["seed"] = std::to_string(cfg.seed);
        c.meta["epoch"] = std::to_string(epoch);
        c.meta["epochs"] = std::to_string(cfg.epochs);
        c.meta["steps_per_epoch"] = std::to_string(cfg.steps_per_epoch);
        c.meta["batch_size"] = std::to_string(cfg.batch_size);
        c.meta["lr"] = std::to_string(cfg.lr);
        c.meta["ema_decay"] = std::to_string(cfg.ema_decay);
        c.meta["stopgrad_targets"] = cfg.stopgrad_targets ? "1" : "0";
        c.meta["pad_history_start"] = cfg.pad_history_start ? "1" : "0";
        c.meta["inference_weights"] = ema ? "ema" : "live";
        c.stores.push_back(Checkpoint::snapshot(*enc_store));
        c.stores.push_back(Checkpoint::snapshot(*pol_store));
        c.stores.push_back(Checkpoint::snapshot(*wm_store));
        if (opt) {
            Checkpoint::OptState o;
            o.step_count = opt->step_count();
            for (const auto& m : opt->moments1()) o.m.emplace_back(m.begin(), m.end());
            for (const auto& v : opt->moments2()) o.v.emplace_back(v.begin(), v.end());
            c.optimizer = std::move(o);
        }
        if (ema) {
            Checkpoint::EmaState e;
            e.decay = ema->decay();
            for (const auto& sh : ema->values()) e.shadow.emplace_back(sh.begin(), sh.end());
            c.ema = std::move(e);
        }
        c.stats = stats;
        return c;
    }

    static TrainConfig config_from_meta(const Checkpoint& c) {
        TrainConfig cfg;
        cfg.hist_len = c.meta_int("M");
        cfg.pred_len = c.meta_int("N");
        cfg.horizon = c.meta_int("H");
        cfg.point_count = c.meta_int("point_count");
        cfg.enc_hidden = c.meta_int("enc_hidden");
        cfg.point_feat = c.meta_int("point_feat");
        cfg.proprio_feat = c.meta_int("proprio_feat");
        cfg.policy_widths = split_ints(c.meta_str("policy_widths"));
        cfg.wm_widths = split_ints(c.meta_str("wm_widths"));
        cfg.emb_dim = c.meta_int("emb_dim");
        cfg.diffusion_steps = c.meta_int("K");
        cfg.beta_lo = c.meta_double("beta_lo");
        cfg.beta_hi = c.meta_double("beta_hi");
        cfg.ddim_steps = c.meta_int("ddim_steps");
        cfg.lambda = c.meta_double("lambda");
        cfg.seed = static_cast<uint64_t>(std::stoull(c.meta_str("seed")));
        cfg.epochs = c.meta_int("epochs");
        cfg.steps_per_epoch = c.meta_int("steps_per_epoch");
        cfg.batch_size = c.meta_int("batch_size");
        cfg.lr = c.meta_double("lr");
        cfg.ema_decay = c.meta_double("ema_decay");
        cfg.stopgrad_targets = c.meta_str("stopgrad_targets") == "1";
        cfg.pad_history_start = c.meta_str("pad_history_start") == "1";
        return cfg;
    }

    // rebuild a bundle from a checkpoint; use_ema selects the inference weights
    static ModelBundle from_checkpoint(const Checkpoint& c, bool use_ema) {
        TrainConfig cfg = config_from_meta(c);
        ModelBundle b = build(cfg, c.meta_str("task"), c.meta_int("point_channels"), c.meta_int("proprio_dim"),
                              c.meta_int("A"));
        if (c.stores.size() != 3) throw std::runtime_error("checkpoint: expected 3 stores");
        Checkpoint::restore(c.stores[0], *b.enc_store);
        Checkpoint::restore(c.stores[1], *b.pol_store);
        Checkpoint::restore(c.stores[2], *b.wm_store);
        if (!c.stats) throw std::runtime_error("checkpoint: missing normalization stats");
        b.stats = *c.stats;
        if (use_ema) {
            if (!c.ema) throw std::runtime_error("checkpoint: EMA weights requested but absent");
            size_t slot = 0;
            for (ParameterStore* s : b.stores())
                for (size_t i = 0; i < s->size(); ++i, ++slot) {
                    auto& w = s->param(i).data();
                    const auto& sh = c.ema->shadow[slot];
                    if (sh.size() != w.size()) throw std::runtime_error("checkpoint: EMA size mismatch");
                    for (size_t j = 0; j < w.size(); ++j) w[j] = static_cast<scalar>(sh[j]);
                }
        }
        return b;
    }
};

using PolicyDenoiseFn = std::function<Tensor(const Tensor& noisy, int k, const Tensor& hist)>;
using WmDenoiseFn = std::function<Tensor(const Tensor& noisy, int k, const Tensor& hist, const Tensor& acts)>;

struct LossContext {
    const SharedEncoder* encoder = nullptr;
    const NormStats* stats = nullptr;
    const NoiseSchedule* sched = nullptr;
    int hist_len = 2, pred_len = 8, horizon = 16, action_dim = 3;
    bool stopgrad_targets = false;
};

struct BatchLosses {
    Tensor bc;
    Tensor wm;           // defined only when a world-model denoiser was given
    bool has_wm = false;
};

// Joint noise-matching losses over one batch. The policy denoises the action
// horizon conditioned on the encoded history; the world model denoises the
// N future latents conditioned on history and the executed action slice.
// Denoisers are injectable so tests can substitute exact-noise oracles.
inline BatchLosses compute_losses(const std::vector<TrainWindow>& batch, const LossContext& ctx,
                                  const PolicyDenoiseFn& policy_fn, const WmDenoiseFn* wm_fn, Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("compute_losses: empty batch");
    const int M = ctx.hist_len, N = ctx.pred_len, H = ctx.horizon, A = ctx.action_dim;
    const int K = ctx.sched->steps;
    const int D = ctx.encoder->config().latent_dim();
    Tensor bc_sum, wm_sum;
    for (size_t s = 0; s < batch.size(); ++s) {
        const TrainWindow& w = batch[s];
        if (static_cast<int>(w.frames.size()) != M + N)
            throw std::invalid_argument("compute_losses: window has " + std::to_string(w.frames.size()) +
                                        " frames, expected " + std::to_string(M + N));
        std::vector<Tensor> hist_latents;
        hist_latents.reserve(static_cast<size_t>(M));
        for (int j = 0; j < M; ++j) {
            const DemoFrame* f = w.frames[static_cast<size_t>(j)];
            hist_latents.push_back(ctx.encoder->encode(
                ctx.stats->normalize_points(f->points, ctx.encoder->config().point_count,
                                            ctx.encoder->config().point_channels),
                ctx.stats->normalize_proprio(f->proprio)));
        }
        Tensor hist_flat = concat_vec(hist_latents);
        Tensor actions = ctx.stats->normalize_actions(w.actions, H, A);

        // policy noise matching
        int k_p = rng.uniform_int(1, K);
        std::vector<scalar> eps_p(static_cast<size_t>(H) * A);
        for (auto& e : eps_p) e = static_cast<scalar>(rng.normal());
        Tensor eps_p_t = Tensor::leaf({H, A}, std::move(eps_p));
        Tensor noisy_actions = add_noise(actions, eps_p_t, k_p, *ctx.sched);
        Tensor bc_s = mse(eps_p_t, policy_fn(noisy_actions, k_p, hist_flat));
        if (!std::isfinite(bc_s.item()))
            throw std::runtime_error("loss_bc: non-finite loss at batch index " + std::to_string(s));
        bc_sum = bc_sum.defined() ? add(bc_sum, bc_s) : bc_s;

        if (wm_fn) {
            std::vector<Tensor> future;
            future.reserve(static_cast<size_t>(N));
            for (int j = M; j < M + N; ++j) {
                const DemoFrame* f = w.frames[static_cast<size_t>(j)];
                Tensor lat = ctx.encoder->encode(
                    ctx.stats->normalize_points(f->points, ctx.encoder->config().point_count,
                                                ctx.encoder->config().point_channels),
                    ctx.stats->normalize_proprio(f->proprio));
                future.push_back(ctx.stopgrad_targets ? lat.detach() : lat);
            }
            Tensor targets = stack_rows(future);
            int k_w = rng.uniform_int(1, K);
            std::vector<scalar> eps_w(static_cast<size_t>(N) * D);
            for (auto& e : eps_w) e = static_cast<scalar>(rng.normal());
            Tensor eps_w_t = Tensor::leaf({N, D}, std::move(eps_w));
            Tensor noisy_latents = add_noise(targets, eps_w_t, k_w, *ctx.sched);
            // executed action slice: plan rows 0..N-1
            std::vector<scalar> chunk(actions.data().begin(), actions.data().begin() + static_cast<long>(N) * A);
            Tensor chunk_acts = Tensor::leaf({N * A}, std::move(chunk));
            Tensor wm_s = mse(eps_w_t, (*wm_fn)(noisy_latents, k_w, hist_flat, chunk_acts));
            if (!std::isfinite(wm_s.item()))
                throw std::runtime_error("loss_wm: non-finite loss at batch index " + std::to_string(s));
            wm_sum = wm_sum.defined() ? add(wm_sum, wm_s) : wm_s;
        }
    }
    scalar inv = scalar(1) / static_cast<scalar>(batch.size());
    BatchLosses out;
    out.bc = scale(bc_sum, inv);
    if (wm_fn) {
        out.wm = scale(wm_sum, inv);
        out.has_wm = true;
    }
    return out;
}

struct EpochLog {
    int epoch = 0;
    double loss_bc = 0, loss_wm = 0, loss_total = 0;
    double grad_norm_encoder = 0, grad_norm_policy = 0, grad_norm_wm = 0;
};

inline void write_train_log(const std::string& path, const std::vector<EpochLog>& logs) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("train log: cannot open " + path);
    os << "epoch,loss_bc,loss_wm,loss_total,grad_norm_encoder,grad_norm_policy,grad_norm_wm\n";
    char buf[256];
    for (const EpochLog& l : logs) {
        std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g\n", l.epoch, l.loss_bc, l.loss_wm,
                      l.loss_total, l.grad_norm_encoder, l.grad_norm_policy, l.grad_norm_wm);
        os << buf;
    }
}

// End-to-end joint training: sample windows, evaluate both diffusion losses,
// update all three parameter groups, track the EMA shadow.
class Trainer {
   public:
    Trainer(const DemoDataset& ds, TrainConfig cfg)
        : ds_(ds),
          cfg_(cfg),
          bundle_(ModelBundle::build(cfg, ds.task, probe_channels(ds), probe_prop(ds), probe_action(ds))),
          sampler_(ds, cfg.hist_len, cfg.pred_len, cfg.horizon, cfg.pad_history_start) {
        if (ds.episodes.empty()) throw std::invalid_argument("Trainer: empty dataset");
        bundle_.stats = NormStats::fit(ds);
    }

    ModelBundle& bundle() { return bundle_; }
    const ModelBundle& bundle() const { return bundle_; }

    std::vector<EpochLog> train(const std::string& out_dir = "", const std::string& resume_path = "") {
        auto stores = bundle_.stores();
        Adam opt(stores, {static_cast<scalar>(cfg_.lr)});
        EmaShadow ema(stores, static_cast<scalar>(cfg_.ema_decay));
        int start_epoch = 0;
        if (!resume_path.empty()) {
            Checkpoint c = Checkpoint::load(resume_path);
            Checkpoint::restore(c.stores[0], *bundle_.enc_store);
            Checkpoint::restore(c.stores[1], *bundle_.pol_store);
            Checkpoint::restore(c.stores[2], *bundle_.wm_store);
            if (c.stats) bundle_.stats = *c.stats;
            if (c.optimizer) {
                opt.set_step_count(c.optimizer->step_count);
                auto& m = opt.moments1();
                auto& v = opt.moments2();
                for (size_t i = 0; i < m.size(); ++i) {
                    m[i].assign(c.optimizer->m[i].begin(), c.optimizer->m[i].end());
                    v[i].assign(c.optimizer->v[i].begin(), c.optimizer->v[i].end());
                }
            }
            if (c.ema) {
                auto& sh = ema.values();
                for (size_t i = 0; i < sh.size(); ++i)
                    sh[i].assign(c.ema->shadow[i].begin(), c.ema->shadow[i].end());
            }
            start_epoch = c.meta_int("epoch");
        }

        LossContext ctx{&bundle_.encoder, &bundle_.stats, &bundle_.sched, cfg_.hist_len, cfg_.pred_len,
                        cfg_.horizon,     bundle_.action_dim, cfg_.stopgrad_targets};
        PolicyDenoiseFn pol_fn = [this](const Tensor& noisy, int k, const Tensor& hist) {
            return bundle_.policy.denoise(noisy, k, hist);
        };
        WmDenoiseFn wm_fn = [this](const Tensor& noisy, int k, const Tensor& hist, const Tensor& acts) {
            return bundle_.wm.denoise(noisy, k, hist, acts);
        };

        Rng rng = Rng(cfg_.seed).fork("train");
        std::vector<EpochLog> logs;
        for (int epoch = start_epoch; epoch < cfg_.epochs; ++epoch) {
            EpochLog log;
            log.epoch = epoch;
            for (int step = 0; step < cfg_.steps_per_epoch; ++step) {
                std::vector<TrainWindow> batch;
                batch.reserve(static_cast<size_t>(cfg_.batch_size));
                for (int b = 0; b < cfg_.batch_size; ++b) batch.push_back(sampler_.sample(rng));
                BatchLosses losses =
                    compute_losses(batch, ctx, pol_fn, cfg_.lambda > 0 ? &wm_fn : nullptr, rng);
                Tensor total = losses.has_wm
                                   ? add(losses.bc, scale(losses.wm, static_cast<scalar>(cfg_.lambda)))
                                   : losses.bc;
                double total_v = total.item();
                if (!std::isfinite(total_v) || total_v > cfg_.divergence_limit)
                    throw std::runtime_error("train: divergence at epoch " + std::to_string(epoch) + " step " +
                                             std::to_string(step) + ", loss " + std::to_string(total_v));
                backward(total, stores);
                log.loss_bc += losses.bc.item();
                log.loss_wm += losses.has_wm ? losses.wm.item() : 0.0;
                log.loss_total += total_v;
                log.grad_norm_encoder += bundle_.enc_store->grad_norm();
                log.grad_norm_policy += bundle_.pol_store->grad_norm();
                log.grad_norm_wm += bundle_.wm_store->grad_norm();
                opt.step();
                ema.update();
            }
            double inv = 1.0 / cfg_.steps_per_epoch;
            log.loss_bc *= inv;
            log.loss_wm *= inv;
            log.loss_total *= inv;
            log.grad_norm_encoder *= inv;
            log.grad_norm_policy *= inv;
            log.grad_norm_wm *= inv;
            logs.push_back(log);

            if (!out_dir.empty() && cfg_.checkpoint_every > 0 && (epoch + 1) % cfg_.checkpoint_every == 0 &&
                epoch + 1 < cfg_.epochs) {
                std::filesystem::create_directories(out_dir);
                bundle_.to_checkpoint(epoch + 1, &opt, &ema)
                    .save(out_dir + "/ckpt_epoch_" + std::to_string(epoch + 1) + ".bin");
            }
        }
        if (!out_dir.empty()) {
            std::filesystem::create_directories(out_dir);
            bundle_.to_checkpoint(cfg_.epochs, &opt, &ema).save(out_dir + "/checkpoint.bin");
            write_train_log(out_dir + "/train_log.csv", logs);
        }
        final_checkpoint_ = bundle_.to_checkpoint(cfg_.epochs, &opt, &ema);
        return logs;
    }

    const Checkpoint& final_checkpoint() const {
        if (final_checkpoint_.stores.empty()) throw std::runtime_error("Trainer: train() has not run");
        return final_checkpoint_;
    }

   private:
    static int probe_channels(const DemoDataset& ds) {
        if (ds.episodes.empty()) throw std::invalid_argument("Trainer: empty dataset");
        return ds.episodes.front().point_channels;
    }
    static int probe_prop(const DemoDataset& ds) { return ds.episodes.front().proprio_dim; }
    static int probe_action(const DemoDataset& ds) { return ds.episodes.front().action_dim; }

    const DemoDataset& ds_;
    TrainConfig cfg_;
    ModelBundle bundle_;
    WindowSampler sampler_;
    Checkpoint final_checkpoint_;
};

}  // namespace dreamdiff
