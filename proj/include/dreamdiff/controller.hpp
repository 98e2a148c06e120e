#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "dreamdiff/env.hpp"

namespace dreamdiff {

enum class Mode { ID, OOD };

// squared Euclidean latent distance, the real-imagination discrepancy
inline double discrepancy(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw std::invalid_argument("discrepancy: latent widths differ, " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()));
    double acc = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

inline double segment_clearance(Vec2 a, Vec2 b, Vec2 c) {
    Vec2 ab{b.x - a.x, b.y - a.y};
    double len2 = ab.x * ab.x + ab.y * ab.y;
    double t = len2 > 0 ? std::clamp(((c.x - a.x) * ab.x + (c.y - a.y) * ab.y) / len2, 0.0, 1.0) : 0.0;
    return std::hypot(c.x - (a.x + t * ab.x), c.y - (a.y + t * ab.y));
}

// Splits a gripper translation into action-bound sub-steps. A clearance lift
// is inserted before and undone after the offset whenever an object is held,
// or when the direct path would sweep through a pushable object; the lift
// direction is chosen to maximize clearance. Returns false if any sub-step
// was clamped by the workspace.
inline bool apply_offset_translation(PlanarEnv& env, Vec2 delta, double lift,
                                     const std::function<void(const StepOutcome&)>& on_step) {
    if (std::max(std::abs(delta.x), std::abs(delta.y)) < 1e-15) return true;
    bool attached = env.state().attached >= 0;
    Vec2 start = env.state().gripper;
    Vec2 end = start + delta;

    auto path_clearance = [&](const std::vector<Vec2>& waypoints) {
        double worst = std::numeric_limits<double>::infinity();
        for (size_t i = 0; i < env.task().objects.size(); ++i) {
            if (!env.task().objects[i].pushable || static_cast<int>(i) == env.state().attached) continue;
            double contact = env.task().objects[i].radius + PlanarEnv::kGripperRadius;
            for (size_t w = 0; w + 1 < waypoints.size(); ++w)
                worst = std::min(worst, segment_clearance(waypoints[w], waypoints[w + 1],
                                                          env.state().objects[i].pos) -
                                            contact);
        }
        return worst;
    };

    std::vector<Vec2> path{start, end};
    const double margin = 0.005;
    if (attached || path_clearance(path) < margin) {
        std::vector<Vec2> up{start, {start.x, start.y + lift}, {end.x, end.y + lift}, end};
        std::vector<Vec2> down{start, {start.x, start.y - lift}, {end.x, end.y - lift}, end};
        path = path_clearance(up) >= path_clearance(down) ? up : down;
    }

    double grip_hold = env.state().grip_closed ? 1.0 : 0.0;
    bool clean = true;
    for (size_t w = 0; w + 1 < path.size(); ++w) {
        Vec2 leg = path[w + 1] - path[w];
        double span = std::max(std::abs(leg.x), std::abs(leg.y));
        if (span < 1e-15) continue;
        int n = static_cast<int>(std::ceil(span / PlanarEnv::kDeltaMax));
        Vec2 sub{leg.x / n, leg.y / n};
        for (int i = 0; i < n; ++i) {
            Vec2 before = env.state().gripper;
            StepOutcome out = env.step({sub.x, sub.y, grip_hold});
            Vec2 after = env.state().gripper;
            if (std::abs(after.x - before.x - sub.x) > 1e-9 || std::abs(after.y - before.y - sub.y) > 1e-9)
                clean = false;
            if (on_step) on_step(out);
        }
    }
    return clean;
}

struct ControllerConfig {
    int hist_len = 2;   // M
    int pred_len = 8;   // N
    int horizon = 16;   // H
    int action_dim = 3;
    double tau_diff = std::numeric_limits<double>::infinity();
    double delta_pose = 0.02;  // displacement-detection radius
    int settle_steps = 3;
    double safe_lift = 0.09;
    int max_steps = 0;  // 0 uses the task budget

    enum class Pipeline { full, ood_base, tracking_only } pipeline = Pipeline::full;
    double sub_prob = 0.0;  // post-initial-chunk latent substitution probability
};

struct PipelineHooks {
    // observation -> latent (normalization inside)
    std::function<std::vector<double>(const ObservationFrame&)> encode;
    // history window (M rows) -> normalized H-step plan
    std::function<std::vector<std::vector<double>>(const std::vector<std::vector<double>>&, Rng&)> plan;
    // (window, executed chunk rows) -> N predicted latents; empty for ablations
    std::function<std::vector<std::vector<double>>(const std::vector<std::vector<double>>&,
                                                   const std::vector<std::vector<double>>&, Rng&)>
        predict;
    // normalized plan row -> raw env action
    std::function<Action(const std::vector<double>&)> to_action;
};

struct StepRecord {
    int step = 0;
    int chunk = -1;
    double discrepancy = std::numeric_limits<double>::quiet_NaN();
    Mode mode = Mode::ID;
    char source = '-';  // window push: R real, P imagined, S substituted, '-' intervention
    Action action;
};

struct EpisodeResult {
    bool success = false;
    int steps = 0;
    bool budget_exhausted = false;
    double tau_diff = 0;
    uint64_t seed = 0;
    std::string mode_timeline;             // one char per step: I or O
    std::vector<double> discrepancy;       // NaN where no prediction aligned
    std::vector<char> window_sources;      // per step
    int first_ood_step = -1;
    int wm_calls = 0, plan_calls = 0;
    int mode_transitions = 0;
    bool clamp_warning = false;
    std::vector<std::string> events;
    std::vector<std::pair<std::string, Vec2>> tracked;
    std::vector<std::pair<std::string, Vec2>> recovered;
    std::vector<int> subtask_end_steps;
    int completed_subtasks = 0;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["success"] = success;
        j["steps"] = steps;
        j["budget_exhausted"] = budget_exhausted;
        j["tau_diff"] = tau_diff;
        j["seed"] = seed;
        j["mode_timeline"] = mode_timeline;
        nlohmann::json disc = nlohmann::json::array();
        for (double d : discrepancy) {
            if (std::isnan(d))
                disc.push_back(nullptr);
            else
                disc.push_back(d);
        }
        j["discrepancy"] = std::move(disc);
        j["window_sources"] = std::string(window_sources.begin(), window_sources.end());
        j["first_ood_step"] = first_ood_step;
        j["wm_calls"] = wm_calls;
        j["plan_calls"] = plan_calls;
        j["mode_transitions"] = mode_transitions;
        j["clamp_warning"] = clamp_warning;
        j["events"] = events;
        nlohmann::json tr = nlohmann::json::array();
        for (const auto& [id, d] : tracked) tr.push_back({{"object", id}, {"dx", d.x}, {"dy", d.y}});
        j["tracked"] = std::move(tr);
        nlohmann::json rc = nlohmann::json::array();
        for (const auto& [id, d] : recovered) rc.push_back({{"object", id}, {"dx", d.x}, {"dy", d.y}});
        j["recovered"] = std::move(rc);
        j["subtask_end_steps"] = subtask_end_steps;
        j["completed_subtasks"] = completed_subtasks;
        return j;
    }
};

// Closed-loop episode driver: receding-horizon execution with per-step
// real-imagination discrepancy detection, settle-then-track response,
// autoregressive imagination while out-of-distribution, and target-specific
// recovery at subtask boundaries.
class EpisodeController {
   public:
    EpisodeController(PlanarEnv& env, const PipelineHooks& hooks, const ControllerConfig& cfg, uint64_t seed)
        : env_(env),
          hooks_(hooks),
          cfg_(cfg),
          plan_rng_(Rng(seed).fork("plan")),
          sub_rng_(Rng(seed).fork("substitute")) {
        result_.seed = seed;
        result_.tau_diff = cfg.tau_diff;
    }

    using Observer = std::function<void(const StepRecord&, const PlanarEnv&)>;

    EpisodeResult run(const std::vector<DisturbanceEvent>& events, const Observer& observer = nullptr) {
        for (const DisturbanceEvent& ev : events)
            if (ev.chunk < 1)
                throw std::invalid_argument("disturbance events must fire at chunk >= 1, got " +
                                            std::to_string(ev.chunk));
        observer_ = observer;
        const TaskSpec& task = env_.task();
        budget_ = cfg_.max_steps > 0 ? cfg_.max_steps : task.max_steps;

        std::vector<double> o0 = hooks_.encode(env_.observe());
        for (int m = 0; m < cfg_.hist_len; ++m) {
            window_.push_back({o0, 'R'});
            real_window_.push_back(o0);
        }
        refresh_expected_poses();

        int cursor = 0, steps_in_sub = 0, chunk_index = 0;
        while (cursor < static_cast<int>(task.subtasks.size()) && env_.steps() < budget_) {
            const SubtaskSpec& sub = task.subtasks[static_cast<size_t>(cursor)];
            auto plan = hooks_.plan(window_values(), plan_rng_);
            ++result_.plan_calls;
            if (static_cast<int>(plan.size()) < cfg_.pred_len)
                throw std::runtime_error("plan returned fewer rows than the executed chunk length");
            std::vector<std::vector<double>> chunk_acts(plan.begin(), plan.begin() + cfg_.pred_len);
            std::vector<std::vector<double>> preds;
            if (hooks_.predict) {
                preds = hooks_.predict(window_values(), chunk_acts, plan_rng_);
                ++result_.wm_calls;
                if (static_cast<int>(preds.size()) != cfg_.pred_len)
                    throw std::runtime_error("world model returned " + std::to_string(preds.size()) +
                                             " latents, expected " + std::to_string(cfg_.pred_len));
            }

            bool ood_fired_this_chunk = false;
            bool subtask_done = false;
            for (int i = 0; i < cfg_.pred_len && env_.steps() < budget_; ++i) {
                if (i == 0) {
                    for (const DisturbanceEvent& ev : events)
                        if (ev.chunk == chunk_index) apply_event(ev);
                }
                Action act = hooks_.to_action(plan[static_cast<size_t>(i)]);
                StepOutcome out = env_.step(act);
                std::vector<double> o_real = hooks_.encode(out.obs);
                push_real(o_real);
                double d = std::numeric_limits<double>::quiet_NaN();
                if (!preds.empty()) {
                    d = discrepancy(o_real, preds[static_cast<size_t>(i)]);
                    push_pred(preds[static_cast<size_t>(i)]);
                }
                char source = '-';
                if (mode_ == Mode::ID) {
                    bool fire = cfg_.pipeline == ControllerConfig::Pipeline::full && !preds.empty() &&
                                d > cfg_.tau_diff;
                    if (fire) {
                        // halt the in-flight chunk: its remaining actions were
                        // planned against the pre-disturbance state
                        mode_ = Mode::OOD;
                        ++result_.mode_transitions;
                        ood_fired_this_chunk = true;
                        if (result_.first_ood_step < 0) result_.first_ood_step = env_.steps();
                        // imagination seeds from the last predictions made
                        // under ID-consistent history
                        window_from_predictions();
                        record(chunk_index, d, 'P', act);
                        ++steps_in_sub;
                        break;
                    } else {
                        bool substitute = chunk_index >= 1 && cfg_.sub_prob > 0 && !preds.empty() &&
                                          sub_rng_.uniform() < cfg_.sub_prob;
                        if (substitute) {
                            push_window(preds[static_cast<size_t>(i)], 'S');
                            source = 'S';
                        } else {
                            push_window(o_real, 'R');
                            source = 'R';
                            // the expected-pose baseline follows the last
                            // verified step, frozen once a displacement fires
                            if (!event_pending_) update_expected_poses();
                        }
                    }
                } else {
                    push_window(preds[static_cast<size_t>(i)], 'P');
                    source = 'P';
                }
                record(chunk_index, d, source, act);
                ++steps_in_sub;
                if (trigger_fired(sub, env_, out, steps_in_sub)) {
                    subtask_done = true;
                    break;
                }
            }

            if (ood_fired_this_chunk) ood_response(sub.target_id);
            if (cfg_.pipeline == ControllerConfig::Pipeline::tracking_only) {
                bool displaced_this_chunk = false;
                for (const DisturbanceEvent& ev : events)
                    displaced_this_chunk |=
                        ev.chunk == chunk_index && ev.kind == DisturbanceEvent::Kind::displace;
                if (displaced_this_chunk) tracking_only_response(sub.target_id);
            }

            if (subtask_done) {
                if (mode_ == Mode::OOD && displaced_.count(sub.target_id)) recover(sub.target_id);
                ++cursor;
                steps_in_sub = 0;
                result_.subtask_end_steps.push_back(env_.steps());
            }
            ++chunk_index;
        }

        result_.completed_subtasks = cursor;
        result_.steps = env_.steps();
        result_.budget_exhausted = cursor < static_cast<int>(task.subtasks.size());
        result_.success = cursor == static_cast<int>(task.subtasks.size()) && env_.goal_reached();
        return result_;
    }

   private:
    void record(int chunk, double d, char source, const Action& act) {
        result_.mode_timeline.push_back(mode_ == Mode::ID ? 'I' : 'O');
        result_.discrepancy.push_back(d);
        result_.window_sources.push_back(source);
        if (observer_) {
            StepRecord rec{env_.steps(), chunk, d, mode_, source, act};
            observer_(rec, env_);
        }
    }

    std::vector<std::vector<double>> window_values() const {
        // imagination must never condition on real latents
        std::vector<std::vector<double>> out;
        out.reserve(window_.size());
        for (const auto& [v, tag] : window_) {
            if (mode_ == Mode::OOD && tag == 'R')
                throw std::logic_error("conditioning window holds a real latent while out-of-distribution");
            out.push_back(v);
        }
        return out;
    }

    void push_window(const std::vector<double>& v, char tag) {
        window_.push_back({v, tag});
        while (static_cast<int>(window_.size()) > cfg_.hist_len) window_.pop_front();
    }

    void push_real(const std::vector<double>& v) {
        real_window_.push_back(v);
        while (static_cast<int>(real_window_.size()) > cfg_.hist_len) real_window_.pop_front();
    }

    void push_pred(const std::vector<double>& v) {
        pred_window_.push_back(v);
        while (static_cast<int>(pred_window_.size()) > cfg_.hist_len) pred_window_.pop_front();
    }

    void window_from_predictions() {
        window_.clear();
        std::deque<std::vector<double>> src = pred_window_;
        while (static_cast<int>(src.size()) < cfg_.hist_len && !src.empty()) src.push_front(src.front());
        for (const auto& v : src) window_.push_back({v, 'P'});
    }

    void window_from_real() {
        window_.clear();
        for (const auto& v : real_window_) window_.push_back({v, 'R'});
    }

    void refresh_expected_poses() {
        for (const ObjectSpec& os : env_.task().objects) expected_[os.id] = env_.pose_oracle(os.id);
    }

    void update_expected_poses() { refresh_expected_poses(); }

    void apply_event(const DisturbanceEvent& ev) {
        env_.inject(ev);
        if (ev.kind == DisturbanceEvent::Kind::displace) {
            result_.events.push_back("displace " + ev.object_id + " at step " + std::to_string(env_.steps()));
            event_pending_ = true;
        } else {
            result_.events.push_back("occlude for " + std::to_string(ev.duration) + " at step " +
                                     std::to_string(env_.steps()));
        }
    }

    // zero-action steps until every object pose is static for settle_steps polls
    void wait_for_settling() {
        std::map<std::string, Pose> prev;
        for (const ObjectSpec& os : env_.task().objects) prev[os.id] = env_.pose_oracle(os.id);
        int stable = 0;
        while (stable < cfg_.settle_steps && env_.steps() < budget_) {
            intervention_step({0, 0, env_.state().grip_closed ? 1.0 : 0.0});
            double worst = 0;
            std::map<std::string, Pose> cur;
            for (const ObjectSpec& os : env_.task().objects) {
                Pose p = env_.pose_oracle(os.id);
                cur[os.id] = p;
                worst = std::max({worst, std::abs(p.x - prev[os.id].x), std::abs(p.y - prev[os.id].y)});
            }
            prev = std::move(cur);
            stable = worst < cfg_.delta_pose / 10 ? stable + 1 : 0;
        }
    }

    void identify_displaced() {
        for (const ObjectSpec& os : env_.task().objects) {
            Pose now = env_.pose_oracle(os.id);
            const Pose& exp = expected_.at(os.id);
            double dev = std::hypot(now.x - exp.x, now.y - exp.y);
            if (dev > cfg_.delta_pose) displaced_[os.id] = Vec2{now.x - exp.x, now.y - exp.y};
        }
    }

    void ood_response(const std::string& target_id) {
        wait_for_settling();
        identify_displaced();
        auto it = displaced_.find(target_id);
        if (it != displaced_.end()) track(target_id, it->second);
    }

    void tracking_only_response(const std::string& target_id) {
        wait_for_settling();
        identify_displaced();
        auto it = displaced_.find(target_id);
        if (it != displaced_.end()) track(target_id, it->second);
        // the ablation keeps acting on real observations; re-baseline poses
        refresh_expected_poses();
        event_pending_ = false;
    }

    void track(const std::string& id, Vec2 delta) {
        bool clean = apply_offset_translation(env_, delta, cfg_.safe_lift,
                                              [this](const StepOutcome& out) { after_intervention_step(out); });
        if (!clean) result_.clamp_warning = true;
        result_.tracked.push_back({id, delta});
    }

    void recover(const std::string& id) {
        Vec2 delta = displaced_.at(id);
        bool clean = apply_offset_translation(env_, {-delta.x, -delta.y}, cfg_.safe_lift,
                                              [this](const StepOutcome& out) { after_intervention_step(out); });
        if (!clean) result_.clamp_warning = true;
        displaced_.erase(id);
        result_.recovered.push_back({id, delta});
        // return to reality only if the realigned observation matches the
        // imagined state
        double d = discrepancy(real_window_.back(), window_.back().first);
        if (d <= cfg_.tau_diff) {
            mode_ = Mode::ID;
            ++result_.mode_transitions;
            window_from_real();
            refresh_expected_poses();
            event_pending_ = false;
        }
    }

    void intervention_step(const Action& act) {
        StepOutcome out = env_.step(act);
        after_intervention_step(out, &act);
    }

    void after_intervention_step(const StepOutcome& out, const Action* act = nullptr) {
        std::vector<double> o_real = hooks_.encode(out.obs);
        push_real(o_real);
        record(-1, std::numeric_limits<double>::quiet_NaN(), '-', act ? *act : Action{});
    }

    PlanarEnv& env_;
    const PipelineHooks& hooks_;
    ControllerConfig cfg_;
    Rng plan_rng_, sub_rng_;
    Observer observer_;
    int budget_ = 0;
    Mode mode_ = Mode::ID;
    std::deque<std::pair<std::vector<double>, char>> window_;
    std::deque<std::vector<double>> real_window_, pred_window_;
    std::map<std::string, Pose> expected_;
    std::map<std::string, Vec2> displaced_;
    bool event_pending_ = false;
    EpisodeResult result_;
};

inline EpisodeResult run_episode(PlanarEnv& env, const PipelineHooks& hooks, const ControllerConfig& cfg,
                                 const std::vector<DisturbanceEvent>& events, uint64_t seed,
                                 const EpisodeController::Observer& observer = nullptr) {
    EpisodeController ctrl(env, hooks, cfg, seed);
    return ctrl.run(events, observer);
}

}  // namespace dreamdiff
