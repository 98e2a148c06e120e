#pragma once

#include <array>
#include <stdexcept>
#include <vector>

#include "dreamdiff/dataset.hpp"
#include "dreamdiff/tensor.hpp"

namespace dreamdiff {

// Per-dimension min-max statistics mapping raw data to [-1,1]. Point class
// tags are left untouched; only the two coordinate channels are scaled.
struct NormStats {
    std::array<double, 2> point_min{0, 0}, point_max{1, 1};
    std::vector<double> prop_min, prop_max;
    std::vector<double> act_min, act_max;

    static NormStats fit(const DemoDataset& ds) {
        if (ds.episodes.empty()) throw std::invalid_argument("NormStats: empty dataset");
        const Demonstration& first = ds.episodes.front();
        NormStats st;
        st.point_min = {1e30, 1e30};
        st.point_max = {-1e30, -1e30};
        st.prop_min.assign(static_cast<size_t>(first.proprio_dim), 1e30);
        st.prop_max.assign(static_cast<size_t>(first.proprio_dim), -1e30);
        st.act_min.assign(static_cast<size_t>(first.action_dim), 1e30);
        st.act_max.assign(static_cast<size_t>(first.action_dim), -1e30);
        for (const Demonstration& d : ds.episodes) {
            for (const DemoFrame& f : d.frames) {
                for (int p = 0; p < d.point_count; ++p) {
                    for (int c = 0; c < 2; ++c) {
                        double v = f.points[static_cast<size_t>(p) * d.point_channels + c];
                        st.point_min[static_cast<size_t>(c)] = std::min(st.point_min[static_cast<size_t>(c)], v);
                        st.point_max[static_cast<size_t>(c)] = std::max(st.point_max[static_cast<size_t>(c)], v);
                    }
                }
                for (size_t i = 0; i < f.proprio.size(); ++i) {
                    st.prop_min[i] = std::min(st.prop_min[i], f.proprio[i]);
                    st.prop_max[i] = std::max(st.prop_max[i], f.proprio[i]);
                }
                for (size_t i = 0; i < f.action.size(); ++i) {
                    st.act_min[i] = std::min(st.act_min[i], f.action[i]);
                    st.act_max[i] = std::max(st.act_max[i], f.action[i]);
                }
            }
        }
        st.widen_degenerate();
        return st;
    }

    void widen_degenerate() {
        auto fix = [](double& lo, double& hi) {
            if (hi - lo < 1e-9) {
                lo -= 0.5;
                hi += 0.5;
            }
        };
        fix(point_min[0], point_max[0]);
        fix(point_min[1], point_max[1]);
        for (size_t i = 0; i < prop_min.size(); ++i) fix(prop_min[i], prop_max[i]);
        for (size_t i = 0; i < act_min.size(); ++i) fix(act_min[i], act_max[i]);
    }

    static double norm(double v, double lo, double hi) { return 2.0 * (v - lo) / (hi - lo) - 1.0; }
    static double denorm(double n, double lo, double hi) { return (n + 1.0) * 0.5 * (hi - lo) + lo; }

    Tensor normalize_points(const std::vector<double>& pts, int P, int C) const {
        std::vector<scalar> out(pts.size());
        for (int p = 0; p < P; ++p) {
            size_t base = static_cast<size_t>(p) * C;
            out[base] = static_cast<scalar>(norm(pts[base], point_min[0], point_max[0]));
            out[base + 1] = static_cast<scalar>(norm(pts[base + 1], point_min[1], point_max[1]));
            for (int c = 2; c < C; ++c) out[base + c] = static_cast<scalar>(pts[base + c]);
        }
        return Tensor::leaf({P, C}, std::move(out));
    }

    Tensor normalize_proprio(const std::vector<double>& prop) const {
        if (prop.size() != prop_min.size()) throw std::invalid_argument("normalize_proprio: width mismatch");
        std::vector<scalar> out(prop.size());
        for (size_t i = 0; i < prop.size(); ++i)
            out[i] = static_cast<scalar>(norm(prop[i], prop_min[i], prop_max[i]));
        return Tensor::leaf({static_cast<int>(prop.size())}, std::move(out));
    }

    // raw H*A actions -> normalized tensor (H, A)
    Tensor normalize_actions(const std::vector<double>& acts, int H, int A) const {
        std::vector<scalar> out(acts.size());
        for (int t = 0; t < H; ++t)
            for (int a = 0; a < A; ++a)
                out[static_cast<size_t>(t) * A + a] = static_cast<scalar>(
                    norm(acts[static_cast<size_t>(t) * A + a], act_min[static_cast<size_t>(a)],
                         act_max[static_cast<size_t>(a)]));
        return Tensor::leaf({H, A}, std::move(out));
    }

    // one normalized action row -> raw values, clamped to the data range
    std::vector<double> denormalize_action(const scalar* row, int A) const {
        std::vector<double> out(static_cast<size_t>(A));
        for (int a = 0; a < A; ++a) {
            double lo = act_min[static_cast<size_t>(a)], hi = act_max[static_cast<size_t>(a)];
            double n = std::clamp(static_cast<double>(row[a]), -1.0, 1.0);
            out[static_cast<size_t>(a)] = denorm(n, lo, hi);
        }
        return out;
    }
};

}  // namespace dreamdiff
