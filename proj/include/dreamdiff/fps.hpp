#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace dreamdiff {

// Greedy farthest-point downsampling over 2-D coordinates (xy: n pairs).
// The first pick is canonical: the point farthest from the centroid, lowest
// index on ties, so the selection is a pure function of the input set.
inline std::vector<int> fps_select(const std::vector<double>& xy, int target) {
    if (xy.size() % 2 != 0) throw std::invalid_argument("fps_select: xy must hold (x,y) pairs");
    int n = static_cast<int>(xy.size() / 2);
    if (target < 1) throw std::invalid_argument("fps_select: target must be positive");
    if (n < target)
        throw std::invalid_argument("fps_select: only " + std::to_string(n) + " candidates for target " +
                                    std::to_string(target));

    double cx = 0, cy = 0;
    for (int i = 0; i < n; ++i) {
        cx += xy[static_cast<size_t>(2 * i)];
        cy += xy[static_cast<size_t>(2 * i + 1)];
    }
    cx /= n;
    cy /= n;
    int first = 0;
    double best = -1;
    for (int i = 0; i < n; ++i) {
        double dx = xy[static_cast<size_t>(2 * i)] - cx, dy = xy[static_cast<size_t>(2 * i + 1)] - cy;
        double d = dx * dx + dy * dy;
        if (d > best) {
            best = d;
            first = i;
        }
    }

    std::vector<int> chosen;
    chosen.reserve(static_cast<size_t>(target));
    chosen.push_back(first);
    std::vector<char> picked(static_cast<size_t>(n), 0);
    picked[static_cast<size_t>(first)] = 1;
    std::vector<double> dist(static_cast<size_t>(n), std::numeric_limits<double>::infinity());
    int last = first;
    while (static_cast<int>(chosen.size()) < target) {
        int next = -1;
        double far = -1;
        for (int i = 0; i < n; ++i) {
            double dx = xy[static_cast<size_t>(2 * i)] - xy[static_cast<size_t>(2 * last)];
            double dy = xy[static_cast<size_t>(2 * i + 1)] - xy[static_cast<size_t>(2 * last + 1)];
            double d = dx * dx + dy * dy;
            if (d < dist[static_cast<size_t>(i)]) dist[static_cast<size_t>(i)] = d;
            if (!picked[static_cast<size_t>(i)] && dist[static_cast<size_t>(i)] > far) {
                far = dist[static_cast<size_t>(i)];
                next = i;
            }
        }
        picked[static_cast<size_t>(next)] = 1;
        chosen.push_back(next);
        last = next;
    }
    return chosen;
}

}  // namespace dreamdiff
