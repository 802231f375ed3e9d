#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "condition.hpp"
#include "error.hpp"
#include "feature_store.hpp"
#include "kernel_align.hpp"
#include "parallel.hpp"
#include "random.hpp"

namespace repalign {

/// H x W x 3 image, values in [0, 1], row-major with channel innermost.
class Image {
public:
    static constexpr std::size_t kChannels = 3;

    Image(std::size_t height, std::size_t width, double fill = 0.0)
        : height_(height), width_(width), pixels_(height * width * kChannels, fill) {
        require(height >= 1 && width >= 1, ErrorCode::InvalidArgument, "image needs positive dimensions");
    }
    Image(std::size_t height, std::size_t width, std::vector<double> pixels)
        : height_(height), width_(width), pixels_(std::move(pixels)) {
        require(height >= 1 && width >= 1, ErrorCode::InvalidArgument, "image needs positive dimensions");
        require(pixels_.size() == height * width * kChannels, ErrorCode::ShapeMismatch, "pixel buffer size");
        for (double v : pixels_) {
            require(std::isfinite(v) && v >= 0.0 && v <= 1.0, ErrorCode::InvalidArgument,
                    "pixel values must lie in [0, 1]");
        }
    }

    std::size_t height() const noexcept { return height_; }
    std::size_t width() const noexcept { return width_; }
    double& at(std::size_t y, std::size_t x, std::size_t c) noexcept { return pixels_[(y * width_ + x) * kChannels + c]; }
    double at(std::size_t y, std::size_t x, std::size_t c) const noexcept {
        return pixels_[(y * width_ + x) * kChannels + c];
    }
    std::span<const double> pixels() const noexcept { return pixels_; }
    std::span<double> pixels() noexcept { return pixels_; }

    bool operator==(const Image&) const = default;

private:
    std::size_t height_;
    std::size_t width_;
    std::vector<double> pixels_;
};

namespace detail {

/// Bilinear resampling with the half-pixel-center convention:
/// src = (dst + 0.5) * in / out - 0.5, clamped to the valid range.
inline Image resize_bilinear(const Image& img, std::size_t out_h, std::size_t out_w) {
    const std::size_t in_h = img.height();
    const std::size_t in_w = img.width();
    Image out(out_h, out_w);
    const auto source = [](std::size_t dst, std::size_t in, std::size_t outn) {
        double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in) / static_cast<double>(outn) - 0.5;
        s = std::clamp(s, 0.0, static_cast<double>(in - 1));
        const auto lo = static_cast<std::size_t>(std::floor(s));
        const std::size_t hi = std::min(lo + 1, in - 1);
        return std::tuple{lo, hi, s - static_cast<double>(lo)};
    };
    for (std::size_t y = 0; y < out_h; ++y) {
        const auto [y0, y1, wy] = source(y, in_h, out_h);
        for (std::size_t x = 0; x < out_w; ++x) {
            const auto [x0, x1, wx] = source(x, in_w, out_w);
            for (std::size_t c = 0; c < Image::kChannels; ++c) {
                const double top = (1.0 - wx) * img.at(y0, x0, c) + wx * img.at(y0, x1, c);
                const double bottom = (1.0 - wx) * img.at(y1, x0, c) + wx * img.at(y1, x1, c);
                out.at(y, x, c) = (1.0 - wy) * top + wy * bottom;
            }
        }
    }
    return out;
}

/// Counter-clockwise quarter turns (numpy.rot90 convention).
inline Image rotate_quarter_turns(const Image& img, int turns) {
    const std::size_t h = img.height();
    const std::size_t w = img.width();
    turns = ((turns % 4) + 4) % 4;
    if (turns == 0) {
        return img;
    }
    const bool swap = turns % 2 == 1;
    Image out(swap ? w : h, swap ? h : w);
    for (std::size_t y = 0; y < out.height(); ++y) {
        for (std::size_t x = 0; x < out.width(); ++x) {
            std::size_t sy = 0;
            std::size_t sx = 0;
            switch (turns) {
                case 1: sy = x; sx = w - 1 - y; break;
                case 2: sy = h - 1 - y; sx = w - 1 - x; break;
                default: sy = h - 1 - x; sx = y; break;
            }
            for (std::size_t c = 0; c < Image::kChannels; ++c) {
                out.at(y, x, c) = img.at(sy, sx, c);
            }
        }
    }
    return out;
}

}  // namespace detail

/// Applies one condition to a clean image.
///
/// noise:    clamp(x + sigma * eps, 0, 1); eps[p] = counter_normal(seed, p) with
///           p the row-major, channel-innermost pixel index.
/// scale:    bilinear resize to (round(s*H), round(s*W)) and back to (H, W).
/// rotation: exact index permutation, counter-clockwise.
inline Image transform_image(const Image& img, const TransformCondition& cond) {
    validate(cond);
    switch (cond.family) {
        case TransformFamily::identity:
            return img;
        case TransformFamily::noise: {
            if (cond.parameter == 0.0) {
                return img;
            }
            Image out = img;
            auto px = out.pixels();
            for (std::size_t p = 0; p < px.size(); ++p) {
                px[p] = std::clamp(px[p] + cond.parameter * counter_normal(cond.seed, p), 0.0, 1.0);
            }
            return out;
        }
        case TransformFamily::scale: {
            const double sh = std::round(cond.parameter * static_cast<double>(img.height()));
            const double sw = std::round(cond.parameter * static_cast<double>(img.width()));
            require(sh >= 1.0 && sw >= 1.0, ErrorCode::ScaleTooSmall,
                    "scale " + std::to_string(cond.parameter) + " shrinks the image below one pixel");
            const auto h = static_cast<std::size_t>(sh);
            const auto w = static_cast<std::size_t>(sw);
            if (h == img.height() && w == img.width()) {
                return img;
            }
            return detail::resize_bilinear(detail::resize_bilinear(img, h, w), img.height(), img.width());
        }
        case TransformFamily::rotation:
            return detail::rotate_quarter_turns(img, quarter_turn_degrees(cond.parameter) / 90);
    }
    return img;
}

/// Same condition with the noise seed re-keyed for image `index`, so each
/// image in a corpus receives an independent noise field.
inline TransformCondition for_image(const TransformCondition& cond, std::size_t index) {
    TransformCondition out = cond;
    out.seed = derive_key(cond.seed, index);
    return out;
}

// ---------------------------------------------------------------------------
// Toy extractor
// ---------------------------------------------------------------------------

enum class ToyMode { generic, rotation_invariant };

inline std::string_view to_string(ToyMode m) { return m == ToyMode::generic ? "generic" : "rotation_invariant"; }

inline ToyMode parse_toy_mode(std::string_view s) {
    if (s == "generic") return ToyMode::generic;
    if (s == "rotation_invariant") return ToyMode::rotation_invariant;
    throw Error(ErrorCode::InvalidArgument, "unknown toy mode '" + std::string(s) + "'");
}

inline constexpr std::size_t kToyGrid = 8;
inline constexpr std::size_t kToyQuantiles = 16;
inline constexpr double kToyGain = 2.0;

namespace detail {

inline std::vector<double> grid_pool(const Image& img) {
    std::vector<double> out;
    out.reserve(kToyGrid * kToyGrid * Image::kChannels);
    const auto cell = [](std::size_t g, std::size_t extent) {
        const std::size_t begin = g * extent / kToyGrid;
        const std::size_t end = std::max((g + 1) * extent / kToyGrid, begin + 1);
        return std::pair{begin, std::min(end, extent)};
    };
    for (std::size_t gy = 0; gy < kToyGrid; ++gy) {
        const auto [y0, y1] = cell(gy, img.height());
        for (std::size_t gx = 0; gx < kToyGrid; ++gx) {
            const auto [x0, x1] = cell(gx, img.width());
            for (std::size_t c = 0; c < Image::kChannels; ++c) {
                double s = 0.0;
                for (std::size_t y = y0; y < y1; ++y) {
                    for (std::size_t x = x0; x < x1; ++x) {
                        s += img.at(y, x, c);
                    }
                }
                out.push_back(s / static_cast<double>((y1 - y0) * (x1 - x0)));
            }
        }
    }
    return out;
}

// Statistics of the sorted per-channel values only, so any pixel permutation
// (in particular every quarter turn) leaves them bit-identical.
inline std::vector<double> sorted_channel_stats(const Image& img) {
    const std::size_t count = img.height() * img.width();
    std::vector<double> out;
    out.reserve((kToyQuantiles + 1) * Image::kChannels);
    std::vector<double> values(count);
    for (std::size_t c = 0; c < Image::kChannels; ++c) {
        for (std::size_t p = 0; p < count; ++p) {
            values[p] = img.pixels()[p * Image::kChannels + c];
        }
        std::sort(values.begin(), values.end());
        for (std::size_t q = 0; q < kToyQuantiles; ++q) {
            out.push_back(values[q * (count - 1) / (kToyQuantiles - 1)]);
        }
        double s = 0.0;
        for (double v : values) {
            s += v;
        }
        out.push_back(s / static_cast<double>(count));
    }
    return out;
}

}  // namespace detail

/// Seeded stand-in feature extractor: summary statistics of the image, a fixed
/// random projection keyed by model_seed, then tanh.
class ToyExtractor {
public:
    ToyExtractor(std::uint64_t model_seed, std::size_t d, ToyMode mode)
        : d_(d), mode_(mode),
          inputs_(mode == ToyMode::generic ? kToyGrid * kToyGrid * Image::kChannels
                                           : (kToyQuantiles + 1) * Image::kChannels) {
        require(d >= 1, ErrorCode::InvalidArgument, "feature dimension must be >= 1");
        const std::uint64_t key = derive_key(model_seed, mode == ToyMode::generic ? 1 : 2);
        weights_.resize(d_ * inputs_);
        for (std::size_t i = 0; i < weights_.size(); ++i) {
            weights_[i] = counter_normal(key, i);
        }
    }

    std::vector<float> operator()(const Image& img) const {
        const std::vector<double> input =
            mode_ == ToyMode::generic ? detail::grid_pool(img) : detail::sorted_channel_stats(img);
        const double scale = kToyGain / std::sqrt(static_cast<double>(inputs_));
        std::vector<float> out(d_);
        for (std::size_t r = 0; r < d_; ++r) {
            double z = 0.0;
            for (std::size_t j = 0; j < inputs_; ++j) {
                z += weights_[r * inputs_ + j] * (input[j] - 0.5);
            }
            out[r] = static_cast<float>(std::tanh(scale * z));
        }
        return out;
    }

private:
    std::size_t d_;
    ToyMode mode_;
    std::size_t inputs_;
    std::vector<double> weights_;  // d x inputs, row-major
};

inline std::vector<float> toy_extract(const Image& img, std::uint64_t model_seed, std::size_t d, ToyMode mode) {
    return ToyExtractor(model_seed, d, mode)(img);
}

// ---------------------------------------------------------------------------
// Synthetic corpus
// ---------------------------------------------------------------------------

struct CorpusSpec {
    std::size_t count = 256;
    std::uint64_t seed = 0;
    std::size_t size = 16;
    std::size_t classes = 16;
    double variation = 0.3;
};

namespace detail {

inline void add_cosine_field(Image& img, CounterStream& rng, double amplitude) {
    const double size_y = static_cast<double>(img.height());
    const double size_x = static_cast<double>(img.width());
    for (std::size_t c = 0; c < Image::kChannels; ++c) {
        for (int wave = 0; wave < 3; ++wave) {
            const double fx = rng.uniform(0.5, 3.0);
            const double fy = rng.uniform(0.5, 3.0);
            const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
            for (std::size_t y = 0; y < img.height(); ++y) {
                for (std::size_t x = 0; x < img.width(); ++x) {
                    const double arg = 2.0 * std::numbers::pi *
                                           (fx * static_cast<double>(x) / size_x + fy * static_cast<double>(y) / size_y) +
                                       phase;
                    img.at(y, x, c) += amplitude * std::cos(arg);
                }
            }
        }
    }
}

}  // namespace detail

/// Class-structured images: image i = clamp(0.5 + template[i % classes] +
/// variation * own field), each field a sum of three seeded low-frequency
/// cosines per channel with amplitude 0.12.
inline std::vector<Image> make_corpus(const CorpusSpec& spec) {
    require(spec.count >= 1 && spec.size >= 1 && spec.classes >= 1, ErrorCode::InvalidArgument,
            "corpus needs count, size and classes >= 1");
    constexpr double amplitude = 0.12;
    std::vector<Image> templates;
    for (std::size_t c = 0; c < spec.classes; ++c) {
        Image t(spec.size, spec.size, 0.0);
        CounterStream rng(derive_key(derive_key(spec.seed, 0), c));
        detail::add_cosine_field(t, rng, amplitude);
        templates.push_back(std::move(t));
    }
    std::vector<Image> out;
    out.reserve(spec.count);
    for (std::size_t i = 0; i < spec.count; ++i) {
        Image own(spec.size, spec.size, 0.0);
        CounterStream rng(derive_key(derive_key(spec.seed, 1), i));
        detail::add_cosine_field(own, rng, amplitude * spec.variation);
        const auto& t = templates[i % spec.classes];
        auto px = own.pixels();
        for (std::size_t p = 0; p < px.size(); ++p) {
            px[p] = std::clamp(0.5 + t.pixels()[p] + px[p], 0.0, 1.0);
        }
        out.push_back(std::move(own));
    }
    return out;
}

struct ToyModels {
    std::uint64_t seed_a = 1;
    std::uint64_t seed_b = 2;
    std::size_t d = 64;
    ToyMode mode = ToyMode::generic;
};

/// Transforms every corpus image under `cond` (per-image noise keys) and
/// extracts features with both toy models.
inline std::pair<FeatureSet, FeatureSet> toy_feature_pair(std::span<const Image> corpus, const TransformCondition& cond,
                                                          const ToyModels& models) {
    require(!corpus.empty(), ErrorCode::InvalidArgument, "empty corpus");
    const std::size_t n = corpus.size();
    Matrix<float> a(n, models.d);
    Matrix<float> b(n, models.d);
    const ToyExtractor model_a(models.seed_a, models.d, models.mode);
    const ToyExtractor model_b(models.seed_b, models.d, models.mode);
    parallel_for(n, [&](std::size_t i) {
        const Image x = transform_image(corpus[i], for_image(cond, i));
        const auto fa = model_a(x);
        const auto fb = model_b(x);
        std::copy(fa.begin(), fa.end(), a.row(i).begin());
        std::copy(fb.begin(), fb.end(), b.row(i).begin());
    });
    FeatureMeta meta_a;
    meta_a.model_id = "toy-" + std::string(to_string(models.mode)) + "-" + std::to_string(models.seed_a);
    meta_a.condition = cond;
    meta_a.source_image_count = n;
    FeatureMeta meta_b = meta_a;
    meta_b.model_id = "toy-" + std::string(to_string(models.mode)) + "-" + std::to_string(models.seed_b);
    return {FeatureSet(std::move(a), std::move(meta_a)), FeatureSet(std::move(b), std::move(meta_b))};
}

// ---------------------------------------------------------------------------
// SE-CKNNA
// ---------------------------------------------------------------------------

enum class Aggregator { mean, median, min };

inline std::string_view to_string(Aggregator a) {
    switch (a) {
        case Aggregator::mean: return "mean";
        case Aggregator::median: return "median";
        case Aggregator::min: return "min";
    }
    return "mean";
}

inline Aggregator parse_aggregator(std::string_view s) {
    if (s == "mean") return Aggregator::mean;
    if (s == "median") return Aggregator::median;
    if (s == "min") return Aggregator::min;
    throw Error(ErrorCode::InvalidArgument, "unknown aggregator '" + std::string(s) + "'");
}

inline double aggregate(std::vector<double> values, Aggregator agg) {
    require(!values.empty(), ErrorCode::InvalidArgument, "nothing to aggregate");
    switch (agg) {
        case Aggregator::mean: {
            double s = 0.0;
            for (double v : values) s += v;
            return s / static_cast<double>(values.size());
        }
        case Aggregator::median: {
            std::sort(values.begin(), values.end());
            const std::size_t m = values.size() / 2;
            return values.size() % 2 == 1 ? values[m] : 0.5 * (values[m - 1] + values[m]);
        }
        case Aggregator::min:
            return *std::min_element(values.begin(), values.end());
    }
    return 0.0;
}

/// Signed fractional change (se - base) / base.
inline double relative_change(double se, double base) {
    require(base != 0.0, ErrorCode::ZeroBaseline, "baseline CKNNA is zero");
    return (se - base) / base;
}

using ConditionFeatures = std::map<TransformCondition, FeatureSet>;

struct ConditionScore {
    TransformCondition condition;
    std::optional<CknnaScore> score;  // empty when the mask was degenerate
    bool identity_equivalent = false;

    bool operator==(const ConditionScore&) const = default;
};

struct SeCknnaResult {
    std::vector<ConditionScore> per_condition;
    double aggregate = 0.0;
    double baseline = 0.0;
    std::optional<double> relative_change;
    Aggregator aggregator = Aggregator::mean;
    std::vector<std::string> warnings;

    bool operator==(const SeCknnaResult&) const = default;
};

/// Per-condition CKNNA between paired representations A and B. The identity
/// condition supplies the baseline; identity-equivalent conditions are scored
/// but left out of the aggregate, as are conditions with a degenerate mask.
inline SeCknnaResult se_cknna(const ConditionFeatures& a, const ConditionFeatures& b, std::size_t k = kDefaultK,
                              Aggregator agg = Aggregator::mean) {
    require(a.size() == b.size() &&
                std::equal(a.begin(), a.end(), b.begin(), [](const auto& x, const auto& y) { return x.first == y.first; }),
            ErrorCode::ConditionSetMismatch, "representations were evaluated under different condition sets");
    const auto identity = std::find_if(a.begin(), a.end(),
                                       [](const auto& e) { return e.first.family == TransformFamily::identity; });
    require(identity != a.end(), ErrorCode::MissingIdentityCondition, "no identity condition to use as baseline");

    SeCknnaResult result;
    result.aggregator = agg;
    std::vector<const TransformCondition*> order;
    for (const auto& [cond, _] : a) {
        order.push_back(&cond);
    }
    result.per_condition.resize(order.size());
    parallel_for(order.size(), [&](std::size_t i) {
        const TransformCondition& cond = *order[i];
        ConditionScore& entry = result.per_condition[i];
        entry.condition = cond;
        entry.identity_equivalent = is_identity_equivalent(cond);
        try {
            entry.score = cknna(a.at(cond), b.at(cond), k);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::DegenerateMask) throw;
        }
    });

    std::vector<double> members;
    for (const auto& entry : result.per_condition) {
        if (!entry.score) {
            result.warnings.push_back("degenerate mask under condition " + label(entry.condition) +
                                      "; excluded from aggregate");
            continue;
        }
        if (entry.score->value < 0.0) {
            result.warnings.push_back("negative CKNNA under condition " + label(entry.condition));
        }
        if (entry.condition.family == TransformFamily::identity) {
            result.baseline = entry.score->value;
        } else if (!entry.identity_equivalent) {
            members.push_back(entry.score->value);
        }
    }
    const auto& base_entry = *std::find_if(result.per_condition.begin(), result.per_condition.end(), [](const auto& e) {
        return e.condition.family == TransformFamily::identity;
    });
    require(base_entry.score.has_value(), ErrorCode::DegenerateMask, "baseline (identity) condition is degenerate");
    const bool any_member = std::any_of(result.per_condition.begin(), result.per_condition.end(),
                                        [](const auto& e) { return !e.identity_equivalent; });
    require(any_member, ErrorCode::InvalidArgument, "suite has no non-identity condition to aggregate");
    require(!members.empty(), ErrorCode::DegenerateMask, "every non-identity condition is degenerate");
    result.aggregate = aggregate(members, agg);
    if (result.baseline != 0.0) {
        result.relative_change = relative_change(result.aggregate, result.baseline);
    } else {
        result.warnings.push_back("baseline CKNNA is zero; relative change undefined");
    }
    return result;
}

}  // namespace repalign
