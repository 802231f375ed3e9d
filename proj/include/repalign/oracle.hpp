#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "error.hpp"
#include "feature_store.hpp"
#include "kernel_align.hpp"
#include "random.hpp"

namespace repalign {

inline constexpr std::size_t kOracleMaxSamples = 512;

// Brute-force CKNNA. Shares nothing with the fast path beyond the input and
// result types: scalar-loop Gram, full row sorts, explicit H = I - 11^T/n and
// two dense triple products.
inline CknnaScore cknna_oracle(const FeatureSet& f, const FeatureSet& g, std::size_t k = kDefaultK) {
    require(f.n() == g.n(), ErrorCode::ShapeMismatch, "oracle inputs differ in sample count");
    const std::size_t n = f.n();
    require(n <= kOracleMaxSamples, ErrorCode::InvalidArgument, "oracle limited to n <= 512");
    require(k >= 1, ErrorCode::InvalidArgument, "k must be >= 1");
    require(k < n, ErrorCode::KTooLarge, "k must be < n");

    using Dense = std::vector<std::vector<double>>;
    const auto naive_gram = [n](const FeatureSet& s) {
        Dense out(n, std::vector<double>(n));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t c = 0; c < s.d(); ++c) {
                    acc += static_cast<double>(s.data()(i, c)) * static_cast<double>(s.data()(j, c));
                }
                out[i][j] = acc;
            }
        }
        return out;
    };
    const auto topk = [n, k](const Dense& kern) {
        std::vector<std::vector<std::size_t>> out(n);
        for (std::size_t i = 0; i < n; ++i) {
            std::vector<std::pair<double, std::size_t>> row;
            for (std::size_t j = 0; j < n; ++j) {
                if (j != i) {
                    row.emplace_back(kern[i][j], j);
                }
            }
            std::sort(row.begin(), row.end(), [](const auto& a, const auto& b) {
                if (a.first != b.first) return a.first > b.first;
                return a.second < b.second;
            });
            for (std::size_t r = 0; r < k; ++r) {
                out[i].push_back(row[r].second);
            }
        }
        return out;
    };
    const auto matmul = [n](const Dense& a, const Dense& b) {
        Dense out(n, std::vector<double>(n, 0.0));
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < n; ++j) {
                double acc = 0.0;
                for (std::size_t l = 0; l < n; ++l) {
                    acc += a[i][l] * b[l][j];
                }
                out[i][j] = acc;
            }
        }
        return out;
    };

    const Dense kf = naive_gram(f);
    const Dense kg = naive_gram(g);
    const auto nf = topk(kf);
    const auto ng = topk(kg);

    Dense mask(n, std::vector<double>(n, 0.0));
    std::size_t mask_count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const bool a = std::find(nf[i].begin(), nf[i].end(), j) != nf[i].end();
            const bool b = std::find(ng[i].begin(), ng[i].end(), j) != ng[i].end();
            if (i != j && a && b) {
                mask[i][j] = 1.0;
                ++mask_count;
            }
        }
    }

    Dense h(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            h[i][j] = (i == j ? 1.0 : 0.0) - 1.0 / static_cast<double>(n);
        }
    }
    Dense mk(n, std::vector<double>(n));
    Dense mg(n, std::vector<double>(n));
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            mk[i][j] = kf[i][j] * mask[i][j];
            mg[i][j] = kg[i][j] * mask[i][j];
        }
    }
    const Dense ck = matmul(matmul(h, mk), h);
    const Dense cg = matmul(matmul(h, mg), h);

    double inner = 0.0;
    double fk = 0.0;
    double fg = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            inner += ck[i][j] * cg[i][j];
            fk += ck[i][j] * ck[i][j];
            fg += cg[i][j] * cg[i][j];
        }
    }
    if (std::sqrt(fk) < kDegenerateNorm || std::sqrt(fg) < kDegenerateNorm) {
        throw Error(ErrorCode::DegenerateMask, "oracle: centered masked kernel vanishes");
    }
    CknnaScore score;
    score.value = inner / std::sqrt(fk * fg);
    score.k = k;
    score.n_effective = n;
    score.mask_density = static_cast<double>(mask_count) / static_cast<double>(n * (n - 1));
    return score;
}

// ---------------------------------------------------------------------------
// Fast-vs-oracle equivalence sweep
// ---------------------------------------------------------------------------

struct SweepInstance {
    std::size_t index = 0;
    std::size_t n = 0;
    std::size_t d = 0;
    std::size_t k = 0;
    std::uint64_t seed = 0;
};

struct SweepRow {
    SweepInstance instance;
    double fast = 0.0;
    double oracle = 0.0;
    double delta = 0.0;
    bool degenerate = false;
};

struct SweepSummary {
    std::vector<SweepRow> rows;
    double max_delta = 0.0;
    bool passed = false;
};

inline constexpr double kOracleTolerance = 1e-10;
inline constexpr std::uint64_t kSweepKey = 0xC0FFEE5EEDULL;

/// Instance i cycles n over {16, 32, 64, 128}, d over {4, 16, 64} and k over
/// {1, 5, 10}; all combinations satisfy k < n.
inline SweepInstance sweep_instance(std::size_t i) {
    static constexpr std::size_t ns[] = {16, 32, 64, 128};
    static constexpr std::size_t ds[] = {4, 16, 64};
    static constexpr std::size_t ks[] = {1, 5, 10};
    return {i, ns[i % 4], ds[(i / 4) % 3], ks[(i / 12) % 3], derive_key(kSweepKey, i)};
}

/// Paired instance: G = F + 0.5 * noise, so the mutual mask is populated.
inline std::pair<FeatureSet, FeatureSet> sweep_features(const SweepInstance& inst) {
    CounterStream rng(inst.seed);
    Matrix<float> f(inst.n, inst.d);
    Matrix<float> g(inst.n, inst.d);
    for (auto& v : f.flat()) {
        v = static_cast<float>(rng.normal());
    }
    for (std::size_t i = 0; i < f.size(); ++i) {
        g.flat()[i] = static_cast<float>(f.flat()[i] + 0.5 * rng.normal());
    }
    FeatureMeta meta;
    meta.model_id = "sweep";
    meta.source_image_count = inst.n;
    return {FeatureSet(std::move(f), meta), FeatureSet(std::move(g), meta)};
}

using FastPath = std::function<CknnaScore(const FeatureSet&, const FeatureSet&, std::size_t)>;

inline CknnaScore default_fast_path(const FeatureSet& f, const FeatureSet& g, std::size_t k) { return cknna(f, g, k); }

/// Runs `count` instances through `fast` and the oracle. Instances where both
/// sides report DegenerateMask count as agreement (delta 0); a one-sided
/// DegenerateMask counts as infinite deviation.
inline SweepSummary run_oracle_sweep(std::size_t count = 100, const FastPath& fast = default_fast_path) {
    SweepSummary summary;
    summary.rows.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        SweepRow& row = summary.rows[i];
        row.instance = sweep_instance(i);
        const auto [f, g] = sweep_features(row.instance);
        std::optional<double> fast_value;
        std::optional<double> oracle_value;
        try {
            fast_value = fast(f, g, row.instance.k).value;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::DegenerateMask) throw;
        }
        try {
            oracle_value = cknna_oracle(f, g, row.instance.k).value;
        } catch (const Error& e) {
            if (e.code() != ErrorCode::DegenerateMask) throw;
        }
        if (!fast_value && !oracle_value) {
            row.degenerate = true;
        } else if (fast_value && oracle_value) {
            row.fast = *fast_value;
            row.oracle = *oracle_value;
            row.delta = std::abs(row.fast - row.oracle);
        } else {
            row.degenerate = true;
            row.delta = std::numeric_limits<double>::infinity();
        }
        summary.max_delta = std::max(summary.max_delta, row.delta);
    }
    summary.passed = summary.max_delta <= kOracleTolerance;
    return summary;
}

}  // namespace repalign
