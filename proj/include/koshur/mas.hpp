#pragma once

// Monotonic alignment search between per-grapheme Gaussian frame
// distributions and mel frames, plus duration extraction. A brute-force
// enumerator over all valid paths serves as the test oracle.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "koshur/common.hpp"
#include "koshur/mat.hpp"

namespace koshur::mas {

struct ShapeMismatch : Error {
    using Error::Error;
};
struct NoValidAlignment : Error {
    using Error::Error;
};
struct TooLarge : Error {
    using Error::Error;
};

// assignment[j] = text index aligned to mel frame j. Monotone non-decreasing,
// starts at 0, ends at T_text-1, steps of 0 or 1, every index covered.
using AlignmentPath = std::vector<int>;
using DurationVector = std::vector<int>;

// values[i][j] = sum_d [ -0.5*((mel[j][d]-mu[i][d])/sigma)^2
//                        - log(sigma) - 0.5*log(2*pi) ]
inline Mat log_likelihood_matrix(const Mat& mu, const Mat& mel, double sigma = 1.0) {
    if (mu.cols() != mel.cols())
        throw ShapeMismatch("log_likelihood_matrix: mu has " + std::to_string(mu.cols()) +
                            " dims, mel has " + std::to_string(mel.cols()));
    if (mu.rows() == 0 || mel.rows() == 0)
        throw ShapeMismatch("log_likelihood_matrix: empty input");
    if (!(sigma > 0.0)) throw Error("log_likelihood_matrix: sigma must be positive");

    const double log_2pi = std::log(2.0 * 3.14159265358979323846);
    const double per_dim_const = -std::log(sigma) - 0.5 * log_2pi;
    const double inv_sigma = 1.0 / sigma;

    Mat L(mu.rows(), mel.rows());
    for (std::size_t i = 0; i < mu.rows(); ++i) {
        const double* mi = mu.row(i);
        for (std::size_t j = 0; j < mel.rows(); ++j) {
            const double* xj = mel.row(j);
            double acc = 0.0;
            for (std::size_t d = 0; d < mu.cols(); ++d) {
                const double r = (xj[d] - mi[d]) * inv_sigma;
                acc += -0.5 * r * r + per_dim_const;
            }
            L(i, j) = acc;
        }
    }
    return L;
}

namespace detail {

// A cell (i, j) can lie on a valid path iff enough frames precede it to reach
// text index i (i <= j) and enough follow to cover the remaining graphemes
// (T_text-1-i <= T_mel-1-j).
inline bool cell_valid(std::size_t i, std::size_t j, std::size_t t_text, std::size_t t_mel) {
    return i <= j && t_text - 1 - i <= t_mel - 1 - j;
}

inline void check_alignable(const Mat& L) {
    if (L.rows() == 0 || L.cols() == 0) throw NoValidAlignment("empty likelihood matrix");
    if (L.cols() < L.rows())
        throw NoValidAlignment("T_mel=" + std::to_string(L.cols()) + " < T_text=" +
                               std::to_string(L.rows()));
    for (std::size_t i = 0; i < L.rows(); ++i)
        for (std::size_t j = 0; j < L.cols(); ++j)
            if (!std::isfinite(L(i, j))) throw Error("mas: non-finite log-likelihood");
}

}  // namespace detail

// DP over Q[i][j] = L[i][j] + max(Q[i][j-1], Q[i-1][j-1]); ties prefer
// staying on the current grapheme, so backtracking picks the optimal
// assignment that is largest when read from the last frame backwards.
inline AlignmentPath mas_search(const Mat& L) {
    detail::check_alignable(L);
    const std::size_t t_text = L.rows(), t_mel = L.cols();
    const double neg_inf = -std::numeric_limits<double>::infinity();

    Mat q(t_text, t_mel);
    q.fill(neg_inf);
    q(0, 0) = L(0, 0);
    for (std::size_t j = 1; j < t_mel; ++j) {
        for (std::size_t i = 0; i < t_text && i <= j; ++i) {
            if (!detail::cell_valid(i, j, t_text, t_mel)) continue;
            const double stay = detail::cell_valid(i, j - 1, t_text, t_mel) ? q(i, j - 1) : neg_inf;
            const double step = (i > 0 && detail::cell_valid(i - 1, j - 1, t_text, t_mel))
                                    ? q(i - 1, j - 1)
                                    : neg_inf;
            q(i, j) = L(i, j) + std::max(stay, step);
        }
    }

    AlignmentPath path(t_mel);
    std::size_t i = t_text - 1;
    path[t_mel - 1] = static_cast<int>(i);
    for (std::size_t j = t_mel - 1; j > 0; --j) {
        const double stay = detail::cell_valid(i, j - 1, t_text, t_mel) ? q(i, j - 1) : neg_inf;
        const double step = (i > 0 && detail::cell_valid(i - 1, j - 1, t_text, t_mel))
                                ? q(i - 1, j - 1)
                                : neg_inf;
        if (step > stay) --i;  // ties keep i (prefer staying)
        path[j - 1] = static_cast<int>(i);
    }
    return path;
}

inline DurationVector durations_from_path(const AlignmentPath& path) {
    if (path.empty()) throw Error("durations_from_path: empty path");
    DurationVector durations(static_cast<std::size_t>(path.back()) + 1, 0);
    for (int idx : path) ++durations[static_cast<std::size_t>(idx)];
    return durations;
}

// Path score accumulated frame by frame, matching the DP's addition order so
// oracle comparisons are exact.
inline double path_score(const Mat& L, const AlignmentPath& path) {
    double s = 0.0;
    for (std::size_t j = 0; j < path.size(); ++j)
        s += L(static_cast<std::size_t>(path[j]), j);
    return s;
}

namespace detail {

// True if a beats b under the tie rule: read assignments from the end and
// prefer the larger text index at the first difference.
inline bool reverse_lex_greater(const AlignmentPath& a, const AlignmentPath& b) {
    for (std::size_t j = a.size(); j > 0; --j) {
        if (a[j - 1] != b[j - 1]) return a[j - 1] > b[j - 1];
    }
    return false;
}

inline void enumerate_paths(const Mat& L, AlignmentPath& cur, std::size_t j, int i,
                            AlignmentPath& best, double& best_score, bool& found) {
    const int t_text = static_cast<int>(L.rows());
    const std::size_t t_mel = L.cols();
    cur[j] = i;
    if (j + 1 == t_mel) {
        if (i != t_text - 1) return;
        const double s = path_score(L, cur);
        if (!found || s > best_score ||
            (s == best_score && reverse_lex_greater(cur, best))) {
            found = true;
            best_score = s;
            best = cur;
        }
        return;
    }
    for (int next = i; next <= i + 1 && next < t_text; ++next) {
        if (cell_valid(static_cast<std::size_t>(next), j + 1, L.rows(), t_mel))
            enumerate_paths(L, cur, j + 1, next, best, best_score, found);
    }
}

}  // namespace detail

// Exhaustive maximum over every monotone surjective 0/1-step path; shares the
// tie rule with mas_search. Guarded against combinatorial blowup.
inline AlignmentPath brute_force_align(const Mat& L) {
    detail::check_alignable(L);
    if (L.rows() > 6 || L.cols() > 10)
        throw TooLarge("brute_force_align: limited to T_text<=6, T_mel<=10, got " +
                       std::to_string(L.rows()) + "x" + std::to_string(L.cols()));
    AlignmentPath cur(L.cols()), best;
    double best_score = 0.0;
    bool found = false;
    detail::enumerate_paths(L, cur, 0, 0, best, best_score, found);
    if (!found) throw NoValidAlignment("no path enumerated");
    return best;
}

// Debug dump line: `id<TAB>d1,d2,...`.
inline std::string format_duration_line(const std::string& id, const DurationVector& durations) {
    std::string line = id;
    line += '\t';
    for (std::size_t i = 0; i < durations.size(); ++i) {
        if (i) line += ',';
        line += std::to_string(durations[i]);
    }
    return line;
}

}  // namespace koshur::mas
