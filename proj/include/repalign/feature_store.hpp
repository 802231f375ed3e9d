#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "condition.hpp"
#include "error.hpp"
#include "matrix.hpp"

namespace repalign {

struct FeatureMeta {
    std::string model_id;
    std::int64_t layer_id = 0;
    std::optional<TransformCondition> condition;
    bool pooled = true;
    std::uint64_t source_image_count = 0;

    bool operator==(const FeatureMeta&) const = default;
};

inline void to_json(nlohmann::json& j, const FeatureMeta& m) {
    j = nlohmann::json{{"model_id", m.model_id},
                       {"layer_id", m.layer_id},
                       {"condition", m.condition ? nlohmann::json(*m.condition) : nlohmann::json(nullptr)},
                       {"pooled", m.pooled},
                       {"source_image_count", m.source_image_count}};
}

inline void from_json(const nlohmann::json& j, FeatureMeta& m) {
    try {
        m.model_id = j.value("model_id", std::string{});
        m.layer_id = j.value("layer_id", std::int64_t{0});
        if (auto it = j.find("condition"); it != j.end() && !it->is_null()) {
            m.condition = it->get<TransformCondition>();
        } else {
            m.condition.reset();
        }
        m.pooled = j.value("pooled", true);
        m.source_image_count = j.value("source_image_count", std::uint64_t{0});
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ParseError, std::string("feature metadata: ") + e.what());
    }
}

namespace detail {

inline void require_finite(std::span<const float> values) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            throw Error(ErrorCode::NonFiniteValue, "non-finite value at flat index " + std::to_string(i));
        }
    }
}

}  // namespace detail

/// n x d pooled feature matrix. Row i is sample i; immutable once built.
class FeatureSet {
public:
    FeatureSet(Matrix<float> data, FeatureMeta meta) : data_(std::move(data)), meta_(std::move(meta)) {
        require(data_.rows() >= 1 && data_.cols() >= 1, ErrorCode::InvalidArgument,
                "feature set needs n >= 1 and d >= 1");
        detail::require_finite(data_.flat());
    }

    std::size_t n() const noexcept { return data_.rows(); }
    std::size_t d() const noexcept { return data_.cols(); }
    const Matrix<float>& data() const noexcept { return data_; }
    std::span<const float> row(std::size_t i) const noexcept { return data_.row(i); }
    const FeatureMeta& meta() const noexcept { return meta_; }

    FeatureSet with_data(Matrix<float> data) const { return FeatureSet(std::move(data), meta_); }

    bool operator==(const FeatureSet&) const = default;

private:
    Matrix<float> data_;
    FeatureMeta meta_;
};

/// n x t x d token features (sample-major, then token, then channel).
class TokenFeatureSet {
public:
    TokenFeatureSet(std::size_t n, std::size_t t, std::size_t d, std::vector<float> data, bool cls_present,
                    FeatureMeta meta)
        : n_(n), t_(t), d_(d), data_(std::move(data)), cls_present_(cls_present), meta_(std::move(meta)) {
        require(n_ >= 1 && t_ >= 1 && d_ >= 1, ErrorCode::InvalidArgument,
                "token feature set needs n, t, d >= 1");
        require(data_.size() == n_ * t_ * d_, ErrorCode::ShapeMismatch, "token buffer size != n*t*d");
        detail::require_finite(data_);
        meta_.pooled = false;
    }

    std::size_t n() const noexcept { return n_; }
    std::size_t t() const noexcept { return t_; }
    std::size_t d() const noexcept { return d_; }
    bool cls_present() const noexcept { return cls_present_; }
    const FeatureMeta& meta() const noexcept { return meta_; }
    std::span<const float> data() const noexcept { return data_; }
    std::span<const float> token(std::size_t sample, std::size_t tok) const noexcept {
        return {data_.data() + (sample * t_ + tok) * d_, d_};
    }

    bool operator==(const TokenFeatureSet&) const = default;

private:
    std::size_t n_, t_, d_;
    std::vector<float> data_;
    bool cls_present_;
    FeatureMeta meta_;
};

using LoadedFeatures = std::variant<FeatureSet, TokenFeatureSet>;

struct OutlierPolicy {
    enum class Method { none, norm_mad };
    Method method = Method::norm_mad;
    double mad_multiplier = 5.0;
};

inline std::string_view to_string(OutlierPolicy::Method m) {
    return m == OutlierPolicy::Method::none ? "none" : "norm_mad";
}

// ---------------------------------------------------------------------------
// RAFS file format
//
//   0..5    magic "RAFS1\0"
//   6..7    version u16 (= 1)
//   8..15   n u64
//   16..23  d u64
//   24..31  t u64 (0 = pooled)
//   32      flags u8 (bit0 = cls_present)
//   33..63  reserved, zero
//   64..    float32 payload, sample-major, then token, then channel
//   then    u32 metadata length + that many bytes of UTF-8 JSON (FeatureMeta)
//
// All integers and floats little-endian.
// ---------------------------------------------------------------------------

inline constexpr std::array<std::uint8_t, 6> kRafsMagic{'R', 'A', 'F', 'S', '1', '\0'};
inline constexpr std::uint16_t kRafsVersion = 1;
inline constexpr std::size_t kRafsHeaderSize = 64;

namespace detail {

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    using U = std::make_unsigned_t<T>;
    auto u = static_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        out.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
    }
}

template <typename T>
T get_le(std::span<const std::uint8_t> bytes, std::size_t offset) {
    std::make_unsigned_t<T> u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
        u |= static_cast<std::make_unsigned_t<T>>(bytes[offset + i]) << (8 * i);
    }
    return static_cast<T>(u);
}

inline std::vector<std::uint8_t> encode_rafs_raw(std::uint64_t n, std::uint64_t d, std::uint64_t t, bool cls,
                                                 std::span<const float> payload, const FeatureMeta& meta) {
    std::vector<std::uint8_t> out;
    const std::string meta_json = nlohmann::json(meta).dump();
    out.reserve(kRafsHeaderSize + payload.size() * 4 + 4 + meta_json.size());
    out.insert(out.end(), kRafsMagic.begin(), kRafsMagic.end());
    put_le<std::uint16_t>(out, kRafsVersion);
    put_le<std::uint64_t>(out, n);
    put_le<std::uint64_t>(out, d);
    put_le<std::uint64_t>(out, t);
    out.push_back(cls ? 1 : 0);
    out.resize(kRafsHeaderSize, 0);
    for (float v : payload) {
        put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
    }
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(meta_json.size()));
    out.insert(out.end(), meta_json.begin(), meta_json.end());
    return out;
}

inline std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
    if (a != 0 && b > std::numeric_limits<std::uint64_t>::max() / a) {
        throw Error(ErrorCode::TruncatedPayload, "header dimensions overflow");
    }
    return a * b;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_rafs(const FeatureSet& f) {
    FeatureMeta meta = f.meta();
    meta.pooled = true;
    return detail::encode_rafs_raw(f.n(), f.d(), 0, false, f.data().flat(), meta);
}

inline std::vector<std::uint8_t> encode_rafs(const TokenFeatureSet& f) {
    return detail::encode_rafs_raw(f.n(), f.d(), f.t(), f.cls_present(), f.data(), f.meta());
}

inline LoadedFeatures decode_rafs(std::span<const std::uint8_t> bytes) {
    using detail::get_le;
    if (bytes.size() < kRafsMagic.size() || !std::equal(kRafsMagic.begin(), kRafsMagic.end(), bytes.begin())) {
        throw Error(ErrorCode::BadMagic, "missing RAFS1 magic");
    }
    if (bytes.size() < kRafsHeaderSize) {
        throw Error(ErrorCode::TruncatedPayload, "header shorter than 64 bytes");
    }
    const auto version = get_le<std::uint16_t>(bytes, 6);
    if (version != kRafsVersion) {
        throw Error(ErrorCode::VersionMismatch, "format version " + std::to_string(version) + ", expected 1");
    }
    const auto n = get_le<std::uint64_t>(bytes, 8);
    const auto d = get_le<std::uint64_t>(bytes, 16);
    const auto t = get_le<std::uint64_t>(bytes, 24);
    const auto flags = bytes[32];
    require((flags & ~std::uint8_t{1}) == 0, ErrorCode::ParseError, "unknown flag bits set");
    require(std::all_of(bytes.begin() + 33, bytes.begin() + kRafsHeaderSize, [](auto b) { return b == 0; }),
            ErrorCode::ParseError, "reserved header bytes are not zero");
    require(n >= 1 && d >= 1, ErrorCode::InvalidArgument, "header declares n = 0 or d = 0");
    const bool cls = (flags & 1) != 0;
    require(!(cls && t == 0), ErrorCode::ParseError, "cls flag set on a pooled file");

    const std::uint64_t count = detail::checked_mul(detail::checked_mul(n, std::max<std::uint64_t>(t, 1)), d);
    const std::uint64_t payload_bytes = detail::checked_mul(count, 4);
    const std::uint64_t available = bytes.size() - kRafsHeaderSize;
    if (payload_bytes > available) {
        throw Error(ErrorCode::TruncatedPayload, "header declares " + std::to_string(payload_bytes) +
                                                      " payload bytes, file has " + std::to_string(available));
    }
    std::vector<float> payload(count);
    for (std::uint64_t i = 0; i < count; ++i) {
        payload[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, kRafsHeaderSize + 4 * i));
    }

    std::size_t offset = kRafsHeaderSize + payload_bytes;
    if (bytes.size() - offset < 4) {
        throw Error(ErrorCode::TruncatedPayload, "missing metadata length");
    }
    const auto meta_len = get_le<std::uint32_t>(bytes, offset);
    offset += 4;
    if (bytes.size() - offset < meta_len) {
        throw Error(ErrorCode::TruncatedPayload, "metadata shorter than declared length");
    }
    require(bytes.size() - offset == meta_len, ErrorCode::ParseError, "trailing bytes after metadata");

    FeatureMeta meta;
    try {
        const std::string_view text(reinterpret_cast<const char*>(bytes.data() + offset), meta_len);
        meta = nlohmann::json::parse(text).get<FeatureMeta>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(ErrorCode::ParseError, std::string("metadata JSON: ") + e.what());
    }
    require(meta.pooled == (t == 0), ErrorCode::ParseError, "metadata 'pooled' disagrees with header t");

    if (t == 0) {
        return FeatureSet(Matrix<float>(n, d, std::move(payload)), std::move(meta));
    }
    return TokenFeatureSet(n, t, d, std::move(payload), cls, std::move(meta));
}

inline std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error(ErrorCode::Io, "cannot open '" + path.string() + "'");
    }
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw Error(ErrorCode::Io, "cannot write '" + path.string() + "'");
    }
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw Error(ErrorCode::Io, "short write to '" + path.string() + "'");
    }
}

/// Headered CSV, one pooled sample per row. For hand-made fixtures.
inline FeatureSet parse_csv_features(std::string_view text, std::string model_id = "csv") {
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t d = 0;
    bool header_seen = false;
    std::vector<float> values;
    std::size_t rows = 0;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        if (!header_seen) {
            d = static_cast<std::size_t>(std::count(line.begin(), line.end(), ',')) + 1;
            header_seen = true;
            continue;
        }
        std::size_t cols = 0;
        std::size_t start = 0;
        while (start <= line.size()) {
            std::size_t end = line.find(',', start);
            if (end == std::string::npos) {
                end = line.size();
            }
            std::string_view cell(line.data() + start, end - start);
            while (!cell.empty() && cell.front() == ' ') cell.remove_prefix(1);
            while (!cell.empty() && cell.back() == ' ') cell.remove_suffix(1);
            double v = 0.0;
            auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
            if (ec != std::errc{} || ptr != cell.data() + cell.size()) {
                throw Error(ErrorCode::ParseError, "CSV line " + std::to_string(line_no) + ": bad number '" +
                                                       std::string(cell) + "'");
            }
            values.push_back(static_cast<float>(v));
            ++cols;
            start = end + 1;
        }
        require(cols == d, ErrorCode::ParseError,
                "CSV line " + std::to_string(line_no) + " has " + std::to_string(cols) + " cells, expected " +
                    std::to_string(d));
        ++rows;
    }
    require(rows >= 1, ErrorCode::ParseError, "CSV has no data rows");
    FeatureMeta meta;
    meta.model_id = std::move(model_id);
    meta.source_image_count = rows;
    return FeatureSet(Matrix<float>(rows, d, std::move(values)), std::move(meta));
}

/// Reads a RAFS file, or a CSV file when the name ends in ".csv".
inline LoadedFeatures read_feature_file(const std::filesystem::path& path) {
    const auto bytes = read_bytes(path);
    if (path.extension() == ".csv") {
        return parse_csv_features(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()),
                                  path.stem().string());
    }
    return decode_rafs(bytes);
}

inline void save_features(const std::filesystem::path& path, const FeatureSet& f) { write_bytes(path, encode_rafs(f)); }
inline void save_features(const std::filesystem::path& path, const TokenFeatureSet& f) {
    write_bytes(path, encode_rafs(f));
}

/// Mean over spatial tokens; the class token (index 0) is skipped when present.
inline FeatureSet pool_tokens(const TokenFeatureSet& tokens) {
    const std::size_t first = tokens.cls_present() ? 1 : 0;
    require(tokens.t() > first, ErrorCode::OnlyClsToken, "no spatial tokens besides the class token");
    const std::size_t spatial = tokens.t() - first;
    Matrix<float> out(tokens.n(), tokens.d());
    std::vector<double> acc(tokens.d());
    for (std::size_t i = 0; i < tokens.n(); ++i) {
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t tok = first; tok < tokens.t(); ++tok) {
            const auto v = tokens.token(i, tok);
            for (std::size_t c = 0; c < tokens.d(); ++c) {
                acc[c] += v[c];
            }
        }
        for (std::size_t c = 0; c < tokens.d(); ++c) {
            out(i, c) = static_cast<float>(acc[c] / static_cast<double>(spatial));
        }
    }
    FeatureMeta meta = tokens.meta();
    meta.pooled = true;
    return FeatureSet(std::move(out), std::move(meta));
}

inline FeatureSet as_pooled(LoadedFeatures loaded) {
    if (auto* pooled = std::get_if<FeatureSet>(&loaded)) {
        return std::move(*pooled);
    }
    return pool_tokens(std::get<TokenFeatureSet>(loaded));
}

/// Loads a feature file; token-level files are mean-pooled on the way in.
inline FeatureSet load_features(const std::filesystem::path& path) { return as_pooled(read_feature_file(path)); }

inline constexpr double kNormalizeEpsilon = 1e-8;

/// Per-channel z-score across samples (population std). Columns whose std is
/// below kNormalizeEpsilon become zero.
inline FeatureSet normalize_channels(const FeatureSet& f) {
    require(f.n() >= 2, ErrorCode::SingleSample, "channel normalization needs at least two samples");
    const std::size_t n = f.n();
    const std::size_t d = f.d();
    std::vector<double> mean(d, 0.0);
    std::vector<double> var(d, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = f.row(i);
        for (std::size_t c = 0; c < d; ++c) {
            mean[c] += r[c];
        }
    }
    for (auto& m : mean) {
        m /= static_cast<double>(n);
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto r = f.row(i);
        for (std::size_t c = 0; c < d; ++c) {
            const double dev = r[c] - mean[c];
            var[c] += dev * dev;
        }
    }
    Matrix<float> out(n, d);
    for (std::size_t c = 0; c < d; ++c) {
        const double sd = std::sqrt(var[c] / static_cast<double>(n));
        for (std::size_t i = 0; i < n; ++i) {
            out(i, c) = sd < kNormalizeEpsilon ? 0.0f : static_cast<float>((f.data()(i, c) - mean[c]) / sd);
        }
    }
    return f.with_data(std::move(out));
}

inline FeatureSet select_rows(const FeatureSet& f, std::span<const std::size_t> rows) {
    Matrix<float> out(rows.size(), f.d());
    for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto src = f.row(rows[r]);
        std::copy(src.begin(), src.end(), out.row(r).begin());
    }
    return f.with_data(std::move(out));
}

namespace detail {

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

// Relative floor on the MAD; float32 norms that are equal in exact arithmetic
// still differ by a few ulps.
inline constexpr double kMadRelativeFloor = 1e-6;

inline std::vector<bool> norm_outliers(const FeatureSet& f, double multiplier) {
    std::vector<double> norms(f.n());
    for (std::size_t i = 0; i < f.n(); ++i) {
        double s = 0.0;
        for (float v : f.row(i)) {
            s += static_cast<double>(v) * v;
        }
        norms[i] = std::sqrt(s);
    }
    const double med = median_of(norms);
    std::vector<double> dev(norms.size());
    for (std::size_t i = 0; i < norms.size(); ++i) {
        dev[i] = std::abs(norms[i] - med);
    }
    const double mad = std::max(median_of(dev), kMadRelativeFloor * std::max(med, 1e-30));
    std::vector<bool> drop(f.n());
    for (std::size_t i = 0; i < f.n(); ++i) {
        drop[i] = dev[i] > multiplier * mad;
    }
    return drop;
}

}  // namespace detail

struct JointFilterResult {
    std::vector<FeatureSet> sets;
    std::vector<std::size_t> kept;
};

/// Joint norm-MAD trimming over any number of row-paired sets: a sample is
/// dropped from every set when its L2 norm is an outlier in at least one.
inline JointFilterResult filter_outliers_joint(std::span<const FeatureSet> sets, const OutlierPolicy& policy) {
    require(!sets.empty(), ErrorCode::InvalidArgument, "no feature sets to filter");
    require(policy.mad_multiplier > 0.0, ErrorCode::InvalidArgument, "mad_multiplier must be > 0");
    const std::size_t n = sets.front().n();
    for (const auto& s : sets) {
        require(s.n() == n, ErrorCode::ShapeMismatch,
                "paired feature sets differ in sample count (" + std::to_string(n) + " vs " +
                    std::to_string(s.n()) + ")");
    }

    std::vector<bool> drop(n, false);
    if (policy.method == OutlierPolicy::Method::norm_mad) {
        for (const auto& s : sets) {
            const auto d = detail::norm_outliers(s, policy.mad_multiplier);
            for (std::size_t i = 0; i < n; ++i) {
                drop[i] = drop[i] || d[i];
            }
        }
    }
    JointFilterResult result;
    for (std::size_t i = 0; i < n; ++i) {
        if (!drop[i]) {
            result.kept.push_back(i);
        }
    }
    require(!result.kept.empty(), ErrorCode::AllFiltered, "outlier filter removed every sample");
    result.sets.reserve(sets.size());
    for (const auto& s : sets) {
        result.sets.push_back(result.kept.size() == n ? s : select_rows(s, result.kept));
    }
    return result;
}

struct FilterResult {
    FeatureSet first;
    FeatureSet second;
    std::vector<std::size_t> kept;
};

inline FilterResult filter_outliers(const FeatureSet& f, const FeatureSet& g, const OutlierPolicy& policy) {
    const std::array<FeatureSet, 2> pair{f, g};
    auto joint = filter_outliers_joint(pair, policy);
    return {std::move(joint.sets[0]), std::move(joint.sets[1]), std::move(joint.kept)};
}

}  // namespace repalign
