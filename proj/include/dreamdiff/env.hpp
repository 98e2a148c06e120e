#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dreamdiff/fps.hpp"
#include "dreamdiff/rng.hpp"

namespace dreamdiff {

struct Vec2 {
    double x = 0, y = 0;
    Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double norm() const { return std::sqrt(x * x + y * y); }
};

// raw workspace-unit action: bounded translation plus a gripper command
struct Action {
    double dx = 0, dy = 0;
    double grip = 0;  // >= 0.5 closes
};

struct ObjectSpec {
    std::string id;
    double radius = 0.04;
    bool graspable = true;
    bool pushable = true;  // fixtures (pads, buttons) ignore gripper contact
    Vec2 init_lo, init_hi;  // uniform init range; lo == hi pins the pose
    double theta0 = 0;
};

struct ObjectState {
    Vec2 pos;
    double theta = 0;
};

struct Pose {
    double x = 0, y = 0, theta = 0;
};

enum class TriggerKind { GripperClosed, GripperOpened, StepBudget, ObjectAtGoal };

struct SubtaskSpec {
    std::string target_id;  // C_j
    TriggerKind trigger = TriggerKind::StepBudget;
    int budget = 0;     // StepBudget steps
    double eps = 0.03;  // ObjectAtGoal radius
};

struct TaskSpec {
    std::string name;
    std::vector<ObjectSpec> objects;
    std::vector<SubtaskSpec> subtasks;
    Vec2 gripper_start;
    Vec2 goal;               // fixed workspace goal zone
    double goal_eps = 0.03;
    std::string goal_object;  // object measured against the goal
    int max_steps = 200;
    int press_lo = 0, press_hi = 0;  // press-depth success band (press task)

    // reach + grasp (close), then drag the puck to the fixed goal
    static TaskSpec push() {
        TaskSpec t;
        t.name = "push";
        t.objects.push_back({"puck", 0.04, true, true, {0.42, 0.40}, {0.57, 0.55}});
        t.subtasks.push_back({"puck", TriggerKind::GripperClosed});
        t.subtasks.push_back({"puck", TriggerKind::ObjectAtGoal, 0, 0.03});
        t.gripper_start = {0.10, 0.50};
        t.goal = {0.82, 0.50};
        t.goal_eps = 0.03;
        t.goal_object = "puck";
        return t;
    }

    // reach + grasp, transport to the pad zone, release. The pad is a static
    // visual anchor; the goal zone itself stays fixed even if the pad is
    // displaced mid-episode.
    static TaskSpec pickplace() {
        TaskSpec t;
        t.name = "pickplace";
        t.objects.push_back({"puck", 0.04, true, true, {0.42, 0.35}, {0.57, 0.50}});
        t.objects.push_back({"pad", 0.05, false, false, {0.80, 0.68}, {0.80, 0.68}});
        t.subtasks.push_back({"puck", TriggerKind::GripperClosed});
        t.subtasks.push_back({"pad", TriggerKind::GripperOpened});
        t.gripper_start = {0.10, 0.35};
        t.goal = {0.80, 0.68};
        t.goal_eps = 0.035;
        t.goal_object = "puck";
        return t;
    }

    // reach the button and hold it pressed inside the depth band, then release
    static TaskSpec press() {
        TaskSpec t;
        t.name = "press";
        t.objects.push_back({"button", 0.05, false, false, {0.48, 0.42}, {0.63, 0.57}});
        t.subtasks.push_back({"button", TriggerKind::GripperOpened});
        t.gripper_start = {0.10, 0.50};
        t.goal = {0, 0};  // unused; success is the press band
        t.goal_object = "button";
        t.press_lo = 6;
        t.press_hi = 14;
        t.max_steps = 160;
        return t;
    }

    static TaskSpec by_name(const std::string& name) {
        if (name == "push") return push();
        if (name == "pickplace") return pickplace();
        if (name == "press") return press();
        throw std::invalid_argument("unknown task: " + name);
    }

    int object_index(const std::string& id) const {
        for (size_t i = 0; i < objects.size(); ++i)
            if (objects[i].id == id) return static_cast<int>(i);
        throw std::invalid_argument("task " + name + ": unknown object " + id);
    }
};

struct WorldState {
    std::vector<ObjectState> objects;  // aligned with TaskSpec::objects
    Vec2 gripper;
    bool grip_closed = false;
    int attached = -1;  // object index or -1
    Vec2 attach_offset;
    int press_run = 0;   // consecutive pressed steps (press tasks)
    int press_best = 0;  // longest run so far
};

struct DisturbanceEvent {
    enum class Kind { displace, occlude };
    int chunk = 1;  // action-chunk index; must be >= 1 (episodes start in distribution)
    Kind kind = Kind::displace;
    std::string object_id;
    Vec2 delta;
    double dtheta = 0;
    int duration = 0;  // occlusion length in steps
};

struct ObservationFrame {
    int point_count = 0;
    int point_channels = 0;        // 2 coords + one-hot class tags
    std::vector<double> points;    // row-major (P, C)
    std::vector<double> proprio;   // gripper x, y, grip flag
    bool occluded = false;
};

struct StepOutcome {
    ObservationFrame obs;
    bool grip_closed_edge = false;
    bool grip_opened_edge = false;
};

// Deterministic planar manipulation world: disc objects, a point gripper,
// rigid attachment on grasp, overlap-resolving pushes.
class PlanarEnv {
   public:
    static constexpr double kDeltaMax = 0.025;
    static constexpr double kGraspRadius = 0.075;  // exceeds the contact radius so side grasps work
    static constexpr double kGripperRadius = 0.015;

    PlanarEnv(TaskSpec task, uint64_t seed, int point_count = 32)
        : task_(std::move(task)),
          seed_(seed),
          rng_(Rng(seed).fork("env")),
          occl_rng_(Rng(seed).fork("occlusion")),
          pose_rng_(Rng(seed).fork("pose")),
          point_count_(point_count) {
        reset();
    }

    ObservationFrame reset() {
        state_ = WorldState{};
        state_.objects.resize(task_.objects.size());
        for (size_t i = 0; i < task_.objects.size(); ++i) {
            const ObjectSpec& os = task_.objects[i];
            double x = os.init_lo.x == os.init_hi.x ? os.init_lo.x : rng_.uniform(os.init_lo.x, os.init_hi.x);
            double y = os.init_lo.y == os.init_hi.y ? os.init_lo.y : rng_.uniform(os.init_lo.y, os.init_hi.y);
            state_.objects[i] = {{x, y}, os.theta0};
        }
        state_.gripper = task_.gripper_start;
        step_count_ = 0;
        occlusion_left_ = 0;
        return observe();
    }

    StepOutcome step(const Action& a) {
        if (!std::isfinite(a.dx) || !std::isfinite(a.dy) || !std::isfinite(a.grip))
            throw std::invalid_argument("env step: non-finite action");
        double dx = std::clamp(a.dx, -kDeltaMax, kDeltaMax);
        double dy = std::clamp(a.dy, -kDeltaMax, kDeltaMax);
        bool close = a.grip >= 0.5;
        StepOutcome out;
        out.grip_closed_edge = close && !state_.grip_closed;
        out.grip_opened_edge = !close && state_.grip_closed;

        Vec2 target{state_.gripper.x + dx, state_.gripper.y + dy};
        if (state_.attached >= 0 && close) {
            // keep the attached object inside the workspace without touching the offset
            const ObjectSpec& os = task_.objects[static_cast<size_t>(state_.attached)];
            double lo_x = std::max(0.0, os.radius - state_.attach_offset.x);
            double hi_x = std::min(1.0, 1.0 - os.radius - state_.attach_offset.x);
            double lo_y = std::max(0.0, os.radius - state_.attach_offset.y);
            double hi_y = std::min(1.0, 1.0 - os.radius - state_.attach_offset.y);
            target.x = std::clamp(target.x, lo_x, hi_x);
            target.y = std::clamp(target.y, lo_y, hi_y);
        } else {
            target.x = std::clamp(target.x, 0.0, 1.0);
            target.y = std::clamp(target.y, 0.0, 1.0);
        }
        state_.gripper = target;

        if (state_.attached >= 0) {
            if (close) {
                state_.objects[static_cast<size_t>(state_.attached)].pos = state_.gripper + state_.attach_offset;
            } else {
                state_.attached = -1;
            }
        } else if (out.grip_closed_edge) {
            int best = -1;
            double best_d = kGraspRadius;
            for (size_t i = 0; i < state_.objects.size(); ++i) {
                if (!task_.objects[i].graspable) continue;
                double d = (state_.objects[i].pos - state_.gripper).norm();
                if (d <= best_d) {
                    best_d = d;
                    best = static_cast<int>(i);
                }
            }
            if (best >= 0) {
                state_.attached = best;
                state_.attach_offset = state_.objects[static_cast<size_t>(best)].pos - state_.gripper;
            }
        }

        // overlap-resolving push on every non-attached object
        for (size_t i = 0; i < state_.objects.size(); ++i) {
            if (static_cast<int>(i) == state_.attached || !task_.objects[i].pushable) continue;
            double min_d = task_.objects[i].radius + kGripperRadius;
            Vec2 diff = state_.objects[i].pos - state_.gripper;
            double d = diff.norm();
            if (d < min_d) {
                Vec2 dir = d > 1e-12 ? diff * (1.0 / d) : Vec2{1, 0};
                state_.objects[i].pos = state_.gripper + dir * min_d;
                clamp_object(static_cast<int>(i));
            }
        }

        state_.grip_closed = close;
        ++step_count_;

        // press bookkeeping
        if (task_.press_hi > 0) {
            int bi = task_.object_index(task_.goal_object);
            double d = (state_.objects[static_cast<size_t>(bi)].pos - state_.gripper).norm();
            if (close && d <= task_.objects[static_cast<size_t>(bi)].radius) {
                ++state_.press_run;
                state_.press_best = std::max(state_.press_best, state_.press_run);
            } else {
                state_.press_run = 0;
            }
        }

        out.obs = observe();
        return out;
    }

    ObservationFrame observe() {
        ObservationFrame f;
        int n_class = static_cast<int>(task_.objects.size()) + 1;  // objects + gripper
        f.point_count = point_count_;
        f.point_channels = 2 + n_class;
        f.proprio = {state_.gripper.x, state_.gripper.y, state_.grip_closed ? 1.0 : 0.0};

        if (occlusion_left_ > 0) {
            --occlusion_left_;
            f.occluded = true;
            f.points.resize(static_cast<size_t>(point_count_) * f.point_channels, 0.0);
            for (int p = 0; p < point_count_; ++p) {
                size_t base = static_cast<size_t>(p) * f.point_channels;
                f.points[base] = occl_rng_.uniform();
                f.points[base + 1] = occl_rng_.uniform();
                int cls = occl_rng_.uniform_int(0, n_class - 1);
                f.points[base + 2 + cls] = 1.0;
            }
            return f;
        }

        // dense candidates: boundary rings per object plus a gripper marker
        std::vector<double> xy;
        std::vector<int> cls;
        const int ring = 40;
        for (size_t i = 0; i < state_.objects.size(); ++i) {
            const ObjectState& o = state_.objects[i];
            double r = task_.objects[i].radius;
            for (int j = 0; j < ring; ++j) {
                double a = o.theta + j * (2.0 * M_PI / ring);
                xy.push_back(o.pos.x + r * std::cos(a));
                xy.push_back(o.pos.y + r * std::sin(a));
                cls.push_back(static_cast<int>(i));
            }
        }
        const int gring = 12;
        for (int j = 0; j < gring; ++j) {
            double a = j * (2.0 * M_PI / gring);
            xy.push_back(state_.gripper.x + kGripperRadius * std::cos(a));
            xy.push_back(state_.gripper.y + kGripperRadius * std::sin(a));
            cls.push_back(n_class - 1);
        }
        xy.push_back(state_.gripper.x);
        xy.push_back(state_.gripper.y);
        cls.push_back(n_class - 1);

        std::vector<int> pick = fps_select(xy, point_count_);
        f.points.resize(static_cast<size_t>(point_count_) * f.point_channels, 0.0);
        for (int p = 0; p < point_count_; ++p) {
            int src = pick[static_cast<size_t>(p)];
            size_t base = static_cast<size_t>(p) * f.point_channels;
            f.points[base] = xy[static_cast<size_t>(2 * src)];
            f.points[base + 1] = xy[static_cast<size_t>(2 * src + 1)];
            f.points[base + 2 + cls[static_cast<size_t>(src)]] = 1.0;
        }
        return f;
    }

    void inject(const DisturbanceEvent& ev) {
        if (ev.kind == DisturbanceEvent::Kind::displace) {
            int i = task_.object_index(ev.object_id);
            if (state_.attached == i) state_.attached = -1;  // yanked out of the gripper
            state_.objects[static_cast<size_t>(i)].pos = state_.objects[static_cast<size_t>(i)].pos + ev.delta;
            state_.objects[static_cast<size_t>(i)].theta += ev.dtheta;
            clamp_object(i);
        } else {
            occlusion_left_ = ev.duration;
        }
    }

    Pose pose_oracle(const std::string& id) {
        int i = task_.object_index(id);
        const ObjectState& o = state_.objects[static_cast<size_t>(i)];
        Pose p{o.pos.x, o.pos.y, o.theta};
        if (pose_noise_sigma > 0) {
            p.x += pose_rng_.normal(0, pose_noise_sigma);
            p.y += pose_rng_.normal(0, pose_noise_sigma);
            p.theta += pose_rng_.normal(0, pose_noise_sigma);
        }
        return p;
    }

    bool goal_reached() const {
        if (task_.press_hi > 0)
            return state_.press_best >= task_.press_lo && state_.press_best <= task_.press_hi &&
                   !state_.grip_closed;
        int gi = task_.object_index(task_.goal_object);
        return (state_.objects[static_cast<size_t>(gi)].pos - task_.goal).norm() <= task_.goal_eps;
    }

    const TaskSpec& task() const { return task_; }
    const WorldState& state() const { return state_; }
    WorldState& mutable_state() { return state_; }
    int steps() const { return step_count_; }
    int point_count() const { return point_count_; }
    int point_channels() const { return 2 + static_cast<int>(task_.objects.size()) + 1; }
    uint64_t seed() const { return seed_; }

    double pose_noise_sigma = 0.0;

   private:
    void clamp_object(int i) {
        double r = task_.objects[static_cast<size_t>(i)].radius;
        state_.objects[static_cast<size_t>(i)].pos.x = std::clamp(state_.objects[static_cast<size_t>(i)].pos.x, r, 1 - r);
        state_.objects[static_cast<size_t>(i)].pos.y = std::clamp(state_.objects[static_cast<size_t>(i)].pos.y, r, 1 - r);
    }

    TaskSpec task_;
    uint64_t seed_;
    Rng rng_, occl_rng_, pose_rng_;
    int point_count_;
    WorldState state_;
    int step_count_ = 0;
    int occlusion_left_ = 0;
};

// subtask completion triggers, evaluated on gripper edges / env state
inline bool trigger_fired(const SubtaskSpec& sub, const PlanarEnv& env, const StepOutcome& out,
                          int steps_in_subtask) {
    switch (sub.trigger) {
        case TriggerKind::GripperClosed:
            return out.grip_closed_edge;
        case TriggerKind::GripperOpened:
            return out.grip_opened_edge;
        case TriggerKind::StepBudget:
            return steps_in_subtask >= sub.budget;
        case TriggerKind::ObjectAtGoal: {
            int i = env.task().object_index(sub.target_id);
            return (env.state().objects[static_cast<size_t>(i)].pos - env.task().goal).norm() <= sub.eps;
        }
    }
    return false;
}

// Waypoint-following proportional controller toward the current subtask
// target with small seeded jitter. Approach speed is capped below the action
// bound so grasps land a few chunks into the episode.
class ScriptedExpert {
   public:
    ScriptedExpert(const TaskSpec& task, uint64_t seed, double jitter_sigma = 0.002)
        : task_(task), jitter_(Rng(seed).fork("expert")), jitter_sigma_(jitter_sigma) {}

    Action act(const PlanarEnv& env, int subtask_idx) {
        const WorldState& s = env.state();
        const TaskSpec& t = env.task();
        Action a;
        double approach_cap = 0.6 * PlanarEnv::kDeltaMax;

        if (t.name == "push" || t.name == "pickplace") {
            if (subtask_idx == 0) {
                // aim for a side-grasp point outside the contact radius
                int pi = t.object_index("puck");
                Vec2 puck = s.objects[static_cast<size_t>(pi)].pos;
                Vec2 away = s.gripper - puck;
                double d = away.norm();
                Vec2 dir = d > 1e-9 ? away * (1.0 / d) : Vec2{-1, 0};
                Vec2 grasp_pt = puck + dir * kApproachDist;
                Vec2 to = grasp_pt - s.gripper;
                if (to.norm() > 0.007) {
                    a = move_toward(to, approach_cap);
                    a.grip = 0;
                } else {
                    a.grip = 1;  // close to grasp
                }
            } else {
                a.grip = 1;
                Vec2 gripper_goal = t.goal - s.attach_offset;
                Vec2 to = gripper_goal - s.gripper;
                if (t.name == "pickplace") {
                    int pi = t.object_index("puck");
                    double puck_d = (s.objects[static_cast<size_t>(pi)].pos - t.goal).norm();
                    if (puck_d <= 0.6 * t.goal_eps) {
                        a.grip = 0;  // release on the pad
                        return a;
                    }
                }
                a = move_toward(to, PlanarEnv::kDeltaMax);
                a.grip = 1;
            }
        } else if (t.name == "press") {
            int bi = t.object_index("button");
            Vec2 to = s.objects[static_cast<size_t>(bi)].pos - s.gripper;
            if (s.press_run >= press_target_) {
                a.grip = 0;  // release after a full press
            } else if (to.norm() > 0.015) {
                a = move_toward(to, approach_cap);
                a.grip = s.press_run > 0 ? 1.0 : 0.0;
            } else {
                a.grip = 1;  // hold the press
            }
        } else {
            throw std::invalid_argument("no expert for task " + t.name);
        }
        return a;
    }

   private:
    Action move_toward(const Vec2& to, double cap) {
        Action a;
        double kp = 0.9;
        double jx = jitter_sigma_ > 0 ? jitter_.normal(0, jitter_sigma_) : 0.0;
        double jy = jitter_sigma_ > 0 ? jitter_.normal(0, jitter_sigma_) : 0.0;
        a.dx = std::clamp(kp * to.x + jx, -cap, cap);
        a.dy = std::clamp(kp * to.y + jy, -cap, cap);
        return a;
    }

    static constexpr double kApproachDist = 0.065;  // between contact (0.055) and grasp (0.075) range

    TaskSpec task_;
    Rng jitter_;
    double jitter_sigma_ = 0.002;
    int press_target_ = 9;
};

}  // namespace dreamdiff
