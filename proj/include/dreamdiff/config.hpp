#pragma once

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "dreamdiff/eval.hpp"
#include "dreamdiff/trainer.hpp"

namespace dreamdiff {

// Everything one run needs: training hyperparameters, task, evaluation suite,
// disturbance schedule, thresholds, and artifact paths.
struct RunConfig {
    TrainConfig train;
    std::string task = "push";
    std::string dataset;
    std::string checkpoint;
    std::string resume;
    std::string out_dir = "out";
    int demos = 50;
    std::string suite = "id";
    int episodes = 100;
    std::vector<uint64_t> eval_seeds = {1, 2, 3};
    double tau_diff = -1;  // unset; calibrate fills it in
    double delta_pose = 0.02;
    int settle_steps = 3;
    double safe_lift = 0.09;
    int max_steps = 0;
    bool episode_log = false;
    // disturbance schedule (empty object id uses the task default)
    std::string disturb_kind = "displace";
    std::string disturb_object;
    int disturb_chunk = 2;
    double disturb_dx = 0, disturb_dy = 0;
    int occlude_duration = 12;

    std::vector<DisturbanceEvent> disturbances() const {
        if (disturb_kind == "occlude")
            return {{disturb_chunk, DisturbanceEvent::Kind::occlude, "", {0, 0}, 0, occlude_duration}};
        if (disturb_object.empty()) {
            auto ev = default_disturbance(task);
            for (auto& e : ev) e.chunk = disturb_chunk;
            return ev;
        }
        return {{disturb_chunk, DisturbanceEvent::Kind::displace, disturb_object, {disturb_dx, disturb_dy}, 0, 0}};
    }

    ControllerConfig controller() const {
        ControllerConfig c;
        c.tau_diff = tau_diff >= 0 ? tau_diff : std::numeric_limits<double>::infinity();
        c.delta_pose = delta_pose;
        c.settle_steps = settle_steps;
        c.safe_lift = safe_lift;
        c.max_steps = max_steps;
        return c;
    }
};

namespace detail {
inline std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r\n");
    size_t b = s.find_last_not_of(" \t\r\n");
    return a == std::string::npos ? "" : s.substr(a, b - a + 1);
}
}  // namespace detail

// one `key = value` pair per line, '#' comments
inline std::vector<std::pair<std::string, std::string>> parse_config_file(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("config: cannot open " + path);
    std::vector<std::pair<std::string, std::string>> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string s = line;
        size_t hash = s.find('#');
        if (hash != std::string::npos) s = s.substr(0, hash);
        s = detail::trim(s);
        if (s.empty()) continue;
        size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error("config: line " + std::to_string(lineno) + " has no '=' in " + path);
        out.emplace_back(detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
    }
    return out;
}

inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    auto as_int = [&] { return std::stoi(value); };
    auto as_double = [&] { return std::stod(value); };
    auto as_bool = [&] { return value == "1" || value == "true" || value == "on"; };
    auto as_u64 = [&] { return static_cast<uint64_t>(std::stoull(value)); };
    auto as_u64_list = [&] {
        std::vector<uint64_t> out;
        std::stringstream ss(value);
        std::string item;
        while (std::getline(ss, item, ','))
            if (!detail::trim(item).empty()) out.push_back(std::stoull(detail::trim(item)));
        return out;
    };

    if (key == "task") cfg.task = value;
    else if (key == "dataset") cfg.dataset = value;
    else if (key == "checkpoint") cfg.checkpoint = value;
    else if (key == "resume") cfg.resume = value;
    else if (key == "out") cfg.out_dir = value;
    else if (key == "demos") cfg.demos = as_int();
    else if (key == "suite") cfg.suite = value;
    else if (key == "episodes") cfg.episodes = as_int();
    else if (key == "eval_seeds") cfg.eval_seeds = as_u64_list();
    else if (key == "tau_diff") cfg.tau_diff = as_double();
    else if (key == "delta_pose") cfg.delta_pose = as_double();
    else if (key == "settle_steps") cfg.settle_steps = as_int();
    else if (key == "safe_lift") cfg.safe_lift = as_double();
    else if (key == "max_steps") cfg.max_steps = as_int();
    else if (key == "episode_log") cfg.episode_log = as_bool();
    else if (key == "disturb_kind") cfg.disturb_kind = value;
    else if (key == "disturb_object") cfg.disturb_object = value;
    else if (key == "disturb_chunk") cfg.disturb_chunk = as_int();
    else if (key == "disturb_dx") cfg.disturb_dx = as_double();
    else if (key == "disturb_dy") cfg.disturb_dy = as_double();
    else if (key == "occlude_duration") cfg.occlude_duration = as_int();
    else if (key == "M") cfg.train.hist_len = as_int();
    else if (key == "N") cfg.train.pred_len = as_int();
    else if (key == "H") cfg.train.horizon = as_int();
    else if (key == "point_count") cfg.train.point_count = as_int();
    else if (key == "enc_hidden") cfg.train.enc_hidden = as_int();
    else if (key == "point_feat") cfg.train.point_feat = as_int();
    else if (key == "proprio_feat") cfg.train.proprio_feat = as_int();
    else if (key == "policy_widths") cfg.train.policy_widths = split_ints(value);
    else if (key == "wm_widths") cfg.train.wm_widths = split_ints(value);
    else if (key == "emb_dim") cfg.train.emb_dim = as_int();
    else if (key == "K") cfg.train.diffusion_steps = as_int();
    else if (key == "beta_lo") cfg.train.beta_lo = as_double();
    else if (key == "beta_hi") cfg.train.beta_hi = as_double();
    else if (key == "ddim_steps") cfg.train.ddim_steps = as_int();
    else if (key == "lambda") cfg.train.lambda = as_double();
    else if (key == "epochs") cfg.train.epochs = as_int();
    else if (key == "steps_per_epoch") cfg.train.steps_per_epoch = as_int();
    else if (key == "batch_size") cfg.train.batch_size = as_int();
    else if (key == "lr") cfg.train.lr = as_double();
    else if (key == "ema_decay") cfg.train.ema_decay = as_double();
    else if (key == "seed") cfg.train.seed = as_u64();
    else if (key == "stopgrad_targets") cfg.train.stopgrad_targets = as_bool();
    else if (key == "pad_history_start") cfg.train.pad_history_start = as_bool();
    else if (key == "divergence_limit") cfg.train.divergence_limit = as_double();
    else if (key == "checkpoint_every") cfg.train.checkpoint_every = as_int();
    else throw std::runtime_error("config: unknown key '" + key + "'");
}

inline RunConfig load_run_config(const std::string& path) {
    RunConfig cfg;
    for (const auto& [k, v] : parse_config_file(path)) apply_config_entry(cfg, k, v);
    return cfg;
}

// canonical dump used for the manifest hash
inline std::string canonical_config(const RunConfig& c) {
    std::map<std::string, std::string> kv;
    auto put = [&](const std::string& k, const std::string& v) { kv[k] = v; };
    char buf[64];
    auto fmt = [&](double v) {
        std::snprintf(buf, sizeof(buf), "%.12g", v);
        return std::string(buf);
    };
    put("task", c.task);
    put("dataset", c.dataset);
    put("checkpoint", c.checkpoint);
    put("resume", c.resume);
    put("out", c.out_dir);
    put("demos", std::to_string(c.demos));
    put("suite", c.suite);
    put("episodes", std::to_string(c.episodes));
    {
        std::string s;
        for (size_t i = 0; i < c.eval_seeds.size(); ++i)
            s += (i ? "," : "") + std::to_string(c.eval_seeds[i]);
        put("eval_seeds", s);
    }
    put("tau_diff", fmt(c.tau_diff));
    put("delta_pose", fmt(c.delta_pose));
    put("settle_steps", std::to_string(c.settle_steps));
    put("safe_lift", fmt(c.safe_lift));
    put("max_steps", std::to_string(c.max_steps));
    put("episode_log", c.episode_log ? "1" : "0");
    put("disturb_kind", c.disturb_kind);
    put("disturb_object", c.disturb_object);
    put("disturb_chunk", std::to_string(c.disturb_chunk));
    put("disturb_dx", fmt(c.disturb_dx));
    put("disturb_dy", fmt(c.disturb_dy));
    put("occlude_duration", std::to_string(c.occlude_duration));
    put("M", std::to_string(c.train.hist_len));
    put("N", std::to_string(c.train.pred_len));
    put("H", std::to_string(c.train.horizon));
    put("point_count", std::to_string(c.train.point_count));
    put("enc_hidden", std::to_string(c.train.enc_hidden));
    put("point_feat", std::to_string(c.train.point_feat));
    put("proprio_feat", std::to_string(c.train.proprio_feat));
    put("policy_widths", join_ints(c.train.policy_widths));
    put("wm_widths", join_ints(c.train.wm_widths));
    put("emb_dim", std::to_string(c.train.emb_dim));
    put("K", std::to_string(c.train.diffusion_steps));
    put("beta_lo", fmt(c.train.beta_lo));
    put("beta_hi", fmt(c.train.beta_hi));
    put("ddim_steps", std::to_string(c.train.ddim_steps));
    put("lambda", fmt(c.train.lambda));
    put("epochs", std::to_string(c.train.epochs));
    put("steps_per_epoch", std::to_string(c.train.steps_per_epoch));
    put("batch_size", std::to_string(c.train.batch_size));
    put("lr", fmt(c.train.lr));
    put("ema_decay", fmt(c.train.ema_decay));
    put("seed", std::to_string(c.train.seed));
    put("stopgrad_targets", c.train.stopgrad_targets ? "1" : "0");
    put("pad_history_start", c.train.pad_history_start ? "1" : "0");
    put("divergence_limit", fmt(c.train.divergence_limit));
    put("checkpoint_every", std::to_string(c.train.checkpoint_every));
    std::string out;
    for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
    return out;
}

inline std::string config_hash(const RunConfig& c) {
    uint64_t h = 1469598103934665603ull;
    for (char ch : canonical_config(c)) {
        h ^= static_cast<uint64_t>(static_cast<unsigned char>(ch));
        h *= 1099511628211ull;
    }
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace dreamdiff
