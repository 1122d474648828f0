#pragma once
// Test-side reference implementations, deliberately naive.

#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "koshur/mat.hpp"

namespace oracles {

// Minimum-total-cost warping path by exhaustive enumeration of every monotone
// path with steps {(1,1),(0,1),(1,0)}. Exponential; only for tiny inputs.
inline double brute_force_dtw(const koshur::Mat& a, const koshur::Mat& b) {
    auto dist = [&](std::size_t i, std::size_t j) {
        double acc = 0.0;
        for (std::size_t k = 0; k < a.cols(); ++k) {
            double d = a(i, k) - b(j, k);
            acc += d * d;
        }
        return std::sqrt(acc);
    };
    const std::size_t n = a.rows(), m = b.rows();
    double best = std::numeric_limits<double>::infinity();
    // DFS over path suffixes from (i, j); cost already includes node (i, j).
    std::vector<std::pair<std::size_t, std::size_t>> stack;
    struct Item {
        std::size_t i, j;
        double cost;
    };
    std::vector<Item> work{{0, 0, dist(0, 0)}};
    while (!work.empty()) {
        Item it = work.back();
        work.pop_back();
        if (it.i == n - 1 && it.j == m - 1) {
            if (it.cost < best) best = it.cost;
            continue;
        }
        if (it.i + 1 < n && it.j + 1 < m)
            work.push_back({it.i + 1, it.j + 1, it.cost + dist(it.i + 1, it.j + 1)});
        if (it.j + 1 < m) work.push_back({it.i, it.j + 1, it.cost + dist(it.i, it.j + 1)});
        if (it.i + 1 < n) work.push_back({it.i + 1, it.j, it.cost + dist(it.i + 1, it.j)});
    }
    return best;
}

}  // namespace oracles
