#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "dreamdiff/env.hpp"

namespace dreamdiff {

namespace bio {

inline void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_u64(std::ostream& os, uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_i32(std::ostream& os, int32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
inline void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }
inline void write_f64v(std::ostream& os, const std::vector<double>& v) {
    write_u64(os, v.size());
    os.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * 8));
}
inline void write_str(std::ostream& os, const std::string& s) {
    write_u32(os, static_cast<uint32_t>(s.size()));
    os.write(s.data(), static_cast<std::streamsize>(s.size()));
}

inline uint32_t read_u32(std::istream& is) {
    uint32_t v;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline uint64_t read_u64(std::istream& is) {
    uint64_t v;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
inline int32_t read_i32(std::istream& is) {
    int32_t v;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
inline double read_f64(std::istream& is) {
    double v;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}
inline std::vector<double> read_f64v(std::istream& is) {
    uint64_t n = read_u64(is);
    std::vector<double> v(n);
    is.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * 8));
    return v;
}
inline std::string read_str(std::istream& is) {
    uint32_t n = read_u32(is);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

}  // namespace bio

struct DemoFrame {
    std::vector<double> points;   // (P*C) row-major
    std::vector<double> proprio;  // proprio_dim
    std::vector<double> action;   // A, raw workspace units
};

struct Demonstration {
    uint64_t seed = 0;
    int point_count = 0, point_channels = 0, proprio_dim = 0, action_dim = 0;
    std::vector<DemoFrame> frames;
};

struct DemoDataset {
    static constexpr uint32_t kMagic = 0x44504444;  // "DDPD"
    static constexpr uint32_t kVersion = 1;

    std::string task;
    int hist_len = 2, pred_len = 8, horizon = 16;  // M, N, H used at collection
    std::vector<Demonstration> episodes;

    void save(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("dataset save: cannot open " + path);
        bio::write_u32(os, kMagic);
        bio::write_u32(os, kVersion);
        bio::write_str(os, task);
        bio::write_i32(os, hist_len);
        bio::write_i32(os, pred_len);
        bio::write_i32(os, horizon);
        bio::write_u32(os, static_cast<uint32_t>(episodes.size()));
        for (const Demonstration& d : episodes) {
            bio::write_u64(os, d.seed);
            bio::write_i32(os, static_cast<int32_t>(d.frames.size()));
            bio::write_i32(os, d.point_count);
            bio::write_i32(os, d.point_channels);
            bio::write_i32(os, d.proprio_dim);
            bio::write_i32(os, d.action_dim);
            for (const DemoFrame& f : d.frames) {
                os.write(reinterpret_cast<const char*>(f.points.data()),
                         static_cast<std::streamsize>(f.points.size() * 8));
                os.write(reinterpret_cast<const char*>(f.proprio.data()),
                         static_cast<std::streamsize>(f.proprio.size() * 8));
                os.write(reinterpret_cast<const char*>(f.action.data()),
                         static_cast<std::streamsize>(f.action.size() * 8));
            }
        }
        if (!os) throw std::runtime_error("dataset save: write failed for " + path);
    }

    static DemoDataset load(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw std::runtime_error("dataset load: cannot open " + path);
        if (bio::read_u32(is) != kMagic) throw std::runtime_error("dataset load: bad magic in " + path);
        uint32_t ver = bio::read_u32(is);
        if (ver != kVersion) throw std::runtime_error("dataset load: unsupported version " + std::to_string(ver));
        DemoDataset ds;
        ds.task = bio::read_str(is);
        ds.hist_len = bio::read_i32(is);
        ds.pred_len = bio::read_i32(is);
        ds.horizon = bio::read_i32(is);
        uint32_t n_eps = bio::read_u32(is);
        ds.episodes.resize(n_eps);
        for (Demonstration& d : ds.episodes) {
            d.seed = bio::read_u64(is);
            int32_t T = bio::read_i32(is);
            d.point_count = bio::read_i32(is);
            d.point_channels = bio::read_i32(is);
            d.proprio_dim = bio::read_i32(is);
            d.action_dim = bio::read_i32(is);
            d.frames.resize(static_cast<size_t>(T));
            for (DemoFrame& f : d.frames) {
                f.points.resize(static_cast<size_t>(d.point_count) * d.point_channels);
                is.read(reinterpret_cast<char*>(f.points.data()),
                        static_cast<std::streamsize>(f.points.size() * 8));
                f.proprio.resize(static_cast<size_t>(d.proprio_dim));
                is.read(reinterpret_cast<char*>(f.proprio.data()),
                        static_cast<std::streamsize>(f.proprio.size() * 8));
                f.action.resize(static_cast<size_t>(d.action_dim));
                is.read(reinterpret_cast<char*>(f.action.data()),
                        static_cast<std::streamsize>(f.action.size() * 8));
            }
        }
        if (!is) throw std::runtime_error("dataset load: truncated file " + path);
        return ds;
    }
};

// Runs the scripted expert once; returns the demo only if it satisfies the
// goal predicate.
inline std::optional<Demonstration> collect_demo(const TaskSpec& task, uint64_t seed, int point_count) {
    PlanarEnv env(task, seed, point_count);
    ScriptedExpert expert(task, seed);
    Demonstration demo;
    demo.seed = seed;
    demo.point_count = point_count;
    demo.point_channels = env.point_channels();
    demo.proprio_dim = 3;
    demo.action_dim = 3;

    ObservationFrame obs = env.observe();
    int cursor = 0, steps_in_sub = 0;
    while (cursor < static_cast<int>(task.subtasks.size()) && env.steps() < task.max_steps) {
        Action a = expert.act(env, cursor);
        demo.frames.push_back({obs.points, obs.proprio, {a.dx, a.dy, a.grip}});
        StepOutcome out = env.step(a);
        obs = out.obs;
        ++steps_in_sub;
        if (trigger_fired(task.subtasks[static_cast<size_t>(cursor)], env, out, steps_in_sub)) {
            ++cursor;
            steps_in_sub = 0;
        }
    }
    bool success = cursor == static_cast<int>(task.subtasks.size()) && env.goal_reached();
    if (!success) return std::nullopt;
    return demo;
}

inline DemoDataset collect_dataset(const TaskSpec& task, int n_demos, uint64_t seed, int point_count, int hist_len,
                                   int pred_len, int horizon, int* retries_out = nullptr) {
    DemoDataset ds;
    ds.task = task.name;
    ds.hist_len = hist_len;
    ds.pred_len = pred_len;
    ds.horizon = horizon;
    uint64_t next = seed;
    int retries = 0;
    while (static_cast<int>(ds.episodes.size()) < n_demos) {
        auto demo = collect_demo(task, next, point_count);
        if (demo) {
            ds.episodes.push_back(std::move(*demo));
        } else {
            ++retries;
            std::cerr << "[collect] expert failed on seed " << next << ", retrying\n";
            if (retries > 20 * n_demos + 50) throw std::runtime_error("collect: expert failure rate too high");
        }
        ++next;
    }
    if (retries_out) *retries_out = retries;
    return ds;
}

// One training sample: M+N observation frames and H action targets.
struct TrainWindow {
    std::vector<const DemoFrame*> frames;  // M+N
    std::vector<double> actions;           // (H*A) row-major, repeat-last padded
    int action_dim = 0;
};

class WindowSampler {
   public:
    WindowSampler(const DemoDataset& ds, int M, int N, int H, bool pad_history_start)
        : ds_(ds), M_(M), N_(N), H_(H), pad_start_(pad_history_start) {
        for (size_t i = 0; i < ds.episodes.size(); ++i) {
            if (static_cast<int>(ds.episodes[i].frames.size()) >= M + N) {
                valid_.push_back(i);
            } else {
                std::cerr << "[sampler] episode " << i << " too short (" << ds.episodes[i].frames.size()
                          << " < " << M + N << "), skipped\n";
            }
        }
        if (valid_.empty()) throw std::runtime_error("WindowSampler: no episode long enough");
    }

    TrainWindow sample(Rng& rng) const {
        const Demonstration& d = ds_.episodes[valid_[static_cast<size_t>(
            rng.uniform_int(0, static_cast<int>(valid_.size()) - 1))]];
        int T = static_cast<int>(d.frames.size());
        int lo = pad_start_ ? -(M_ - 1) : 0;
        int hi = T - (M_ + N_);
        int t0 = rng.uniform_int(lo, hi);
        return window_at(d, t0);
    }

    TrainWindow window_at(const Demonstration& d, int t0) const {
        int T = static_cast<int>(d.frames.size());
        TrainWindow w;
        w.action_dim = d.action_dim;
        w.frames.reserve(static_cast<size_t>(M_ + N_));
        for (int j = 0; j < M_ + N_; ++j) {
            int idx = std::clamp(t0 + j, 0, T - 1);
            w.frames.push_back(&d.frames[static_cast<size_t>(idx)]);
        }
        w.actions.reserve(static_cast<size_t>(H_) * d.action_dim);
        for (int j = 0; j < H_; ++j) {
            int idx = std::clamp(t0 + M_ - 1 + j, 0, T - 1);
            const auto& a = d.frames[static_cast<size_t>(idx)].action;
            w.actions.insert(w.actions.end(), a.begin(), a.end());
        }
        return w;
    }

    size_t valid_count() const { return valid_.size(); }

   private:
    const DemoDataset& ds_;
    int M_, N_, H_;
    bool pad_start_;
    std::vector<size_t> valid_;
};

}  // namespace dreamdiff
