#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dreamdiff/controller.hpp"
#include "dreamdiff/trainer.hpp"

namespace dreamdiff {

// inference hooks over a trained bundle (load with EMA weights first)
inline PipelineHooks make_model_hooks(const ModelBundle& b, bool enable_wm) {
    PipelineHooks h;
    const int H = b.cfg.horizon, N = b.cfg.pred_len, A = b.action_dim, D = b.cfg.latent_dim();
    h.encode = [&b](const ObservationFrame& f) {
        NoGrad ng;
        Tensor lat = b.encoder.encode(b.stats.normalize_points(f.points, f.point_count, f.point_channels),
                                      b.stats.normalize_proprio(f.proprio));
        return std::vector<double>(lat.data().begin(), lat.data().end());
    };
    h.plan = [&b, H, A, D](const std::vector<std::vector<double>>& window, Rng& rng) {
        NoGrad ng;
        std::vector<scalar> flat;
        flat.reserve(window.size() * static_cast<size_t>(D));
        for (const auto& row : window) flat.insert(flat.end(), row.begin(), row.end());
        Tensor ctx = Tensor::leaf({static_cast<int>(window.size()) * D}, std::move(flat));
        Tensor plan = b.policy.sample_plan(ctx, b.sched, SamplerKind::ddim, b.cfg.ddim_steps, rng);
        std::vector<std::vector<double>> rows(static_cast<size_t>(H));
        for (int t = 0; t < H; ++t)
            rows[static_cast<size_t>(t)].assign(plan.data().begin() + static_cast<long>(t) * A,
                                                plan.data().begin() + static_cast<long>(t + 1) * A);
        return rows;
    };
    if (enable_wm) {
        h.predict = [&b, N, A, D](const std::vector<std::vector<double>>& window,
                                  const std::vector<std::vector<double>>& acts, Rng& rng) {
            NoGrad ng;
            std::vector<scalar> hist;
            hist.reserve(window.size() * static_cast<size_t>(D));
            for (const auto& row : window) hist.insert(hist.end(), row.begin(), row.end());
            std::vector<scalar> af;
            af.reserve(static_cast<size_t>(N) * A);
            for (const auto& row : acts) af.insert(af.end(), row.begin(), row.end());
            Tensor pred = b.wm.predict(Tensor::leaf({static_cast<int>(window.size()) * D}, std::move(hist)),
                                       Tensor::leaf({N * A}, std::move(af)), b.sched, SamplerKind::ddim,
                                       b.cfg.ddim_steps, rng);
            std::vector<std::vector<double>> rows(static_cast<size_t>(N));
            for (int n = 0; n < N; ++n)
                rows[static_cast<size_t>(n)].assign(pred.data().begin() + static_cast<long>(n) * D,
                                                    pred.data().begin() + static_cast<long>(n + 1) * D);
            return rows;
        };
    }
    h.to_action = [&b, A](const std::vector<double>& row) {
        std::vector<double> raw = b.stats.denormalize_action(row.data(), A);
        return Action{raw[0], raw[1], raw[2]};
    };
    return h;
}

struct SuiteSpec {
    std::string name;  // id | ood_base | ood_tracked | imagine
    double sub_prob = 0.0;
    bool inject = false;
    ControllerConfig::Pipeline pipeline = ControllerConfig::Pipeline::full;
    bool needs_wm = true;
};

inline SuiteSpec parse_suite(const std::string& text, double lambda) {
    SuiteSpec s;
    if (text == "id") {
        s.name = "id";
    } else if (text == "ood_base") {
        s.name = "ood_base";
        s.inject = true;
        s.pipeline = ControllerConfig::Pipeline::ood_base;
        s.needs_wm = false;
    } else if (text == "ood_tracked") {
        s.name = "ood_tracked";
        s.inject = true;
        if (lambda == 0.0) {  // tracking-only ablation for world-model-free checkpoints
            s.pipeline = ControllerConfig::Pipeline::tracking_only;
            s.needs_wm = false;
        }
    } else if (text.rfind("imagine", 0) == 0) {
        s.name = "imagine";
        size_t lp = text.find('('), rp = text.find(')');
        if (lp != std::string::npos && rp != std::string::npos && rp > lp + 1)
            s.sub_prob = std::stod(text.substr(lp + 1, rp - lp - 1));
        else if (text.find(':') != std::string::npos)
            s.sub_prob = std::stod(text.substr(text.find(':') + 1));
        if (s.sub_prob < 0 || s.sub_prob > 1) throw std::invalid_argument("imagine(p): p must be in [0,1]");
    } else if (text == "open_loop") {
        s.name = "imagine";
        s.sub_prob = 1.0;
    } else {
        throw std::invalid_argument("unknown suite: " + text);
    }
    return s;
}

struct SeedMetrics {
    uint64_t seed = 0;
    int episodes = 0;
    int successes = 0;
    double rate = 0;  // percent
};

struct SuiteMetrics {
    std::string suite, task;
    std::vector<SeedMetrics> per_seed;
    double mean = 0, stddev = 0;
    long total_wm_calls = 0;
    int flagged_episodes = 0;       // episodes with any OOD step
    int flagged_in_event_chunk = 0; // first flag inside the disturbance chunk
};

inline uint64_t episode_seed(uint64_t suite_seed, int index) {
    return Rng(suite_seed).fork(static_cast<uint64_t>(index)).base_seed();
}

// reference disturbance schedule per task (analogs of the displacement table)
inline std::vector<DisturbanceEvent> default_disturbance(const std::string& task) {
    if (task == "push") return {{2, DisturbanceEvent::Kind::displace, "puck", {-0.25, 0.0}, 0, 0}};
    if (task == "pickplace") return {{2, DisturbanceEvent::Kind::displace, "puck", {-0.20, -0.10}, 0, 0}};
    if (task == "press") return {{2, DisturbanceEvent::Kind::displace, "button", {-0.25, 0.0}, 0, 0}};
    throw std::invalid_argument("no default disturbance for task " + task);
}

inline SuiteMetrics run_suite(const ModelBundle& bundle, const SuiteSpec& suite,
                              const std::vector<DisturbanceEvent>& events, const ControllerConfig& base_cfg,
                              int episodes, const std::vector<uint64_t>& seeds, const std::string& out_dir,
                              bool write_episode_json) {
    if (seeds.empty()) throw std::invalid_argument("run_suite: need at least one seed");
    TaskSpec task = TaskSpec::by_name(bundle.task);
    PipelineHooks hooks = make_model_hooks(bundle, suite.needs_wm);
    SuiteMetrics out;
    out.suite = suite.name == "imagine" ? "imagine(" + std::to_string(suite.sub_prob) + ")" : suite.name;
    out.task = bundle.task;
    if (write_episode_json && !out_dir.empty())
        std::filesystem::create_directories(out_dir + "/episodes");

    for (uint64_t seed : seeds) {
        SeedMetrics sm;
        sm.seed = seed;
        sm.episodes = episodes;
        for (int e = 0; e < episodes; ++e) {
            uint64_t ep_seed = episode_seed(seed, e);
            PlanarEnv env(task, Rng(ep_seed).fork("env").base_seed(), bundle.cfg.point_count);
            ControllerConfig cfg = base_cfg;
            cfg.hist_len = bundle.cfg.hist_len;
            cfg.pred_len = bundle.cfg.pred_len;
            cfg.horizon = bundle.cfg.horizon;
            cfg.action_dim = bundle.action_dim;
            cfg.pipeline = suite.pipeline;
            cfg.sub_prob = suite.sub_prob;
            EpisodeResult res = run_episode(env, hooks, cfg, suite.inject ? events : std::vector<DisturbanceEvent>{},
                                            ep_seed);
            if (res.success) ++sm.successes;
            out.total_wm_calls += res.wm_calls;
            if (res.first_ood_step >= 0) {
                ++out.flagged_episodes;
                if (!events.empty()) {
                    int chunk_start = events.front().chunk * bundle.cfg.pred_len;
                    int chunk_end = chunk_start + bundle.cfg.pred_len;
                    if (res.first_ood_step > chunk_start && res.first_ood_step <= chunk_end + 1)
                        ++out.flagged_in_event_chunk;
                }
            }
            if (write_episode_json && !out_dir.empty()) {
                char name[160];
                std::snprintf(name, sizeof(name), "%s/episodes/%s_%s_s%llu_e%04d.json", out_dir.c_str(),
                              out.suite.c_str(), out.task.c_str(), static_cast<unsigned long long>(seed), e);
                std::ofstream os(name);
                os << res.to_json().dump(2) << "\n";
            }
        }
        sm.rate = 100.0 * sm.successes / std::max(1, sm.episodes);
        out.per_seed.push_back(sm);
    }
    double mean = 0;
    for (const SeedMetrics& sm : out.per_seed) mean += sm.rate;
    mean /= static_cast<double>(out.per_seed.size());
    double var = 0;
    for (const SeedMetrics& sm : out.per_seed) var += (sm.rate - mean) * (sm.rate - mean);
    out.mean = mean;
    out.stddev = std::sqrt(var / static_cast<double>(out.per_seed.size()));
    return out;
}

// fixed schema: suite,task,seed,episodes,successes,success_rate with
// trailing mean/std summary rows
inline void write_metrics_csv(const std::string& path, const std::vector<SuiteMetrics>& all) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("metrics: cannot open " + path);
    os << "suite,task,seed,episodes,successes,success_rate\n";
    char buf[256];
    for (const SuiteMetrics& m : all) {
        for (const SeedMetrics& sm : m.per_seed) {
            std::snprintf(buf, sizeof(buf), "%s,%s,%llu,%d,%d,%.6f\n", m.suite.c_str(), m.task.c_str(),
                          static_cast<unsigned long long>(sm.seed), sm.episodes, sm.successes, sm.rate);
            os << buf;
        }
        int eps = 0, succ = 0;
        for (const SeedMetrics& sm : m.per_seed) {
            eps += sm.episodes;
            succ += sm.successes;
        }
        std::snprintf(buf, sizeof(buf), "%s,%s,mean,%d,%d,%.6f\n", m.suite.c_str(), m.task.c_str(), eps, succ,
                      m.mean);
        os << buf;
        std::snprintf(buf, sizeof(buf), "%s,%s,std,%d,%d,%.6f\n", m.suite.c_str(), m.task.c_str(), eps, succ,
                      m.stddev);
        os << buf;
    }
}

struct CalibrationResult {
    double tau = 0;
    double mean = 0, stddev = 0, max_seen = 0;
    size_t samples = 0;
};

// threshold policy: mean + 6*std of in-distribution discrepancies
inline CalibrationResult calibrate_tau(const ModelBundle& bundle, int episodes, uint64_t seed,
                                       const ControllerConfig& base_cfg) {
    TaskSpec task = TaskSpec::by_name(bundle.task);
    PipelineHooks hooks = make_model_hooks(bundle, true);
    std::vector<double> ds;
    for (int e = 0; e < episodes; ++e) {
        uint64_t ep_seed = episode_seed(seed, e);
        PlanarEnv env(task, Rng(ep_seed).fork("env").base_seed(), bundle.cfg.point_count);
        ControllerConfig cfg = base_cfg;
        cfg.hist_len = bundle.cfg.hist_len;
        cfg.pred_len = bundle.cfg.pred_len;
        cfg.horizon = bundle.cfg.horizon;
        cfg.action_dim = bundle.action_dim;
        cfg.pipeline = ControllerConfig::Pipeline::full;
        cfg.tau_diff = std::numeric_limits<double>::infinity();  // observe only
        EpisodeResult res = run_episode(env, hooks, cfg, {}, ep_seed);
        for (double d : res.discrepancy)
            if (!std::isnan(d)) ds.push_back(d);
    }
    if (ds.size() < 2) throw std::runtime_error("calibrate: not enough discrepancy samples, run more episodes");
    CalibrationResult out;
    out.samples = ds.size();
    double mean = 0;
    for (double d : ds) mean += d;
    mean /= static_cast<double>(ds.size());
    double var = 0;
    for (double d : ds) {
        var += (d - mean) * (d - mean);
        out.max_seen = std::max(out.max_seen, d);
    }
    out.mean = mean;
    out.stddev = std::sqrt(var / static_cast<double>(ds.size()));
    if (out.stddev == 0 && mean == 0)
        throw std::runtime_error("calibrate: degenerate zero-variance trace, run more episodes");
    out.tau = mean + 6.0 * out.stddev;
    return out;
}

}  // namespace dreamdiff
