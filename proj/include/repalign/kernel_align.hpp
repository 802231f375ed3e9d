#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "error.hpp"
#include "feature_store.hpp"
#include "matrix.hpp"
#include "parallel.hpp"

namespace repalign {

inline constexpr std::size_t kDefaultK = 10;
inline constexpr double kDegenerateNorm = 1e-12;

/// Symmetric n x n similarity matrix.
class KernelMatrix {
public:
    explicit KernelMatrix(Matrix<double> values) : values_(std::move(values)) {
        require(values_.rows() == values_.cols(), ErrorCode::ShapeMismatch, "kernel matrix must be square");
        for (std::size_t i = 0; i < n(); ++i) {
            for (std::size_t j = 0; j < n(); ++j) {
                const double a = values_(i, j);
                require(std::isfinite(a), ErrorCode::NonFiniteValue, "kernel entry is not finite");
                require(std::abs(a - values_(j, i)) <= 1e-6 * std::max(1.0, std::abs(a)),
                        ErrorCode::InvalidArgument, "kernel matrix is not symmetric");
            }
        }
    }

    std::size_t n() const noexcept { return values_.rows(); }
    double operator()(std::size_t i, std::size_t j) const noexcept { return values_(i, j); }
    const Matrix<double>& values() const noexcept { return values_; }

private:
    Matrix<double> values_;
};

/// neighbors[i] holds the k most similar samples to i, most similar first.
struct KnnSets {
    std::vector<std::vector<std::size_t>> neighbors;
    std::size_t k = 0;

    std::size_t n() const noexcept { return neighbors.size(); }
};

/// Row-based mutual-neighbor mask; not symmetric in general.
struct MutualKnnMask {
    Matrix<std::uint8_t> mask;

    std::size_t n() const noexcept { return mask.rows(); }
    std::size_t count() const noexcept {
        return static_cast<std::size_t>(std::count(mask.flat().begin(), mask.flat().end(), std::uint8_t{1}));
    }
};

struct CknnaScore {
    double value = 0.0;
    std::size_t k = 0;
    std::size_t n_effective = 0;
    double mask_density = 0.0;

    bool operator==(const CknnaScore&) const = default;
};

/// Linear kernel: K[i][j] = <row i, row j>, accumulated in double.
inline KernelMatrix gram(const FeatureSet& f) {
    require(f.meta().pooled, ErrorCode::NotPooled, "token-level features must be pooled first");
    const std::size_t n = f.n();
    const std::size_t d = f.d();
    Matrix<double> m(n, n);
    parallel_for(n, [&](std::size_t i) {
        const auto a = f.row(i);
        for (std::size_t j = 0; j < n; ++j) {
            const auto b = f.row(j);
            double s = 0.0;
            for (std::size_t c = 0; c < d; ++c) {
                s += static_cast<double>(a[c]) * static_cast<double>(b[c]);
            }
            m(i, j) = s;
        }
    });
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double avg = 0.5 * (m(i, j) + m(j, i));
            m(i, j) = avg;
            m(j, i) = avg;
        }
    }
    return KernelMatrix(std::move(m));
}

/// Top-k most similar samples per row, excluding self; ties go to the
/// smaller index.
inline KnnSets knn_sets(const KernelMatrix& kernel, std::size_t k) {
    const std::size_t n = kernel.n();
    require(k >= 1, ErrorCode::InvalidArgument, "k must be >= 1");
    require(k < n, ErrorCode::KTooLarge, "k = " + std::to_string(k) + " must be < n = " + std::to_string(n));

    KnnSets out;
    out.k = k;
    out.neighbors.resize(n);
    parallel_for(n, [&](std::size_t i) {
        std::vector<std::size_t> candidates;
        candidates.reserve(n - 1);
        for (std::size_t j = 0; j < n; ++j) {
            if (j != i) {
                candidates.push_back(j);
            }
        }
        const auto more_similar = [&](std::size_t a, std::size_t b) {
            const double ka = kernel(i, a);
            const double kb = kernel(i, b);
            return ka > kb || (ka == kb && a < b);
        };
        std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(k),
                          candidates.end(), more_similar);
        candidates.resize(k);
        out.neighbors[i] = std::move(candidates);
    });
    return out;
}

inline MutualKnnMask mutual_mask(const KnnSets& a, const KnnSets& b) {
    require(a.n() == b.n() && a.k == b.k, ErrorCode::ShapeMismatch, "neighbor sets differ in n or k");
    const std::size_t n = a.n();
    MutualKnnMask out{Matrix<std::uint8_t>(n, n, 0)};
    std::vector<std::uint8_t> in_a(n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j : a.neighbors[i]) {
            in_a[j] = 1;
        }
        for (std::size_t j : b.neighbors[i]) {
            if (in_a[j] && j != i) {
                out.mask(i, j) = 1;
            }
        }
        for (std::size_t j : a.neighbors[i]) {
            in_a[j] = 0;
        }
    }
    return out;
}

/// Double centering H M H with H = I - 11^T/n, via row, column and grand
/// means.
inline Matrix<double> center(const Matrix<double>& m) {
    require(m.rows() == m.cols() && m.rows() >= 1, ErrorCode::ShapeMismatch, "center needs a square matrix");
    const std::size_t n = m.rows();
    const double inv_n = 1.0 / static_cast<double>(n);
    std::vector<double> row_mean(n, 0.0);
    std::vector<double> col_mean(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            s += m(i, j);
            col_mean[j] += m(i, j);
        }
        row_mean[i] = s * inv_n;
    }
    double grand = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
        grand += col_mean[j];
        col_mean[j] *= inv_n;
    }
    grand *= inv_n * inv_n;

    Matrix<double> out(n, n);
    parallel_for(n, [&](std::size_t i) {
        for (std::size_t j = 0; j < n; ++j) {
            out(i, j) = m(i, j) - row_mean[i] - col_mean[j] + grand;
        }
    });
    return out;
}

namespace detail {

inline Matrix<double> masked(const KernelMatrix& kernel, const MutualKnnMask& a) {
    const std::size_t n = kernel.n();
    Matrix<double> out(n, n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            if (a.mask(i, j)) {
                out(i, j) = kernel(i, j);
            }
        }
    }
    return out;
}

/// CKNNA with a pluggable centering step. Production code always passes
/// repalign::center; the oracle-check fault hook passes a broken one.
template <typename CenterFn>
CknnaScore cknna_with(const KernelMatrix& k_mat, const KernelMatrix& l_mat, std::size_t k, CenterFn&& center_fn) {
    require(k_mat.n() == l_mat.n(), ErrorCode::ShapeMismatch,
            "kernels differ in sample count (" + std::to_string(k_mat.n()) + " vs " + std::to_string(l_mat.n()) +
                ")");
    const std::size_t n = k_mat.n();
    const auto mask = mutual_mask(knn_sets(k_mat, k), knn_sets(l_mat, k));

    const Matrix<double> x = center_fn(masked(k_mat, mask));
    const Matrix<double> y = center_fn(masked(l_mat, mask));
    double xy = 0.0;
    double xx = 0.0;
    double yy = 0.0;
    const auto xs = x.flat();
    const auto ys = y.flat();
    for (std::size_t i = 0; i < xs.size(); ++i) {
        xy += xs[i] * ys[i];
        xx += xs[i] * xs[i];
        yy += ys[i] * ys[i];
    }
    const double norm_x = std::sqrt(xx);
    const double norm_y = std::sqrt(yy);
    if (norm_x < kDegenerateNorm || norm_y < kDegenerateNorm) {
        throw Error(ErrorCode::DegenerateMask, "centered masked kernel vanishes (mutual-kNN mask has " +
                                                   std::to_string(mask.count()) + " entries)");
    }

    CknnaScore score;
    score.value = xy / (norm_x * norm_y);
    score.k = k;
    score.n_effective = n;
    score.mask_density = static_cast<double>(mask.count()) / (static_cast<double>(n) * static_cast<double>(n - 1));
    return score;
}

}  // namespace detail

/// Centered kernel nearest-neighbor alignment: normalized Frobenius inner
/// product of the double-centered kernels restricted to mutual k-NN pairs.
/// Throws DegenerateMask when either centered masked kernel vanishes.
inline CknnaScore cknna(const KernelMatrix& k_mat, const KernelMatrix& l_mat, std::size_t k = kDefaultK) {
    return detail::cknna_with(k_mat, l_mat, k, [](const Matrix<double>& m) { return center(m); });
}

inline CknnaScore cknna(const FeatureSet& f, const FeatureSet& g, std::size_t k = kDefaultK) {
    require(f.n() == g.n(), ErrorCode::ShapeMismatch,
            "feature sets differ in sample count (" + std::to_string(f.n()) + " vs " + std::to_string(g.n()) + ")");
    return cknna(gram(f), gram(g), k);
}

}  // namespace repalign
