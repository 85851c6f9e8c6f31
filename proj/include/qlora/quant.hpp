#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "qlora/binary_io.hpp"
#include "qlora/error.hpp"
#include "qlora/tensor.hpp"

namespace qlora {

enum class QuantMode : std::uint8_t {
    LinearAbsmax4 = 0,
    NF4 = 1,
    LinearAbsmax8 = 2,
};

inline constexpr std::size_t kDefaultBlockSize = 64;

/// NormalFloat-4 levels: quantiles of N(0,1) at equal probability mass, 7 negative, exact
/// zero and 8 positive, normalized so the outermost levels are -1 and +1.
inline constexpr std::array<double, 16> kNf4Levels = {
    -1.0,
    -0.69619289060372,
    -0.5250730386952291,
    -0.3949174906993099,
    -0.2844413576181077,
    -0.18477343519288886,
    -0.09104999214427931,
    0.0,
    0.07958032909416937,
    0.16093017270493618,
    0.2461122939299359,
    0.33791519352165506,
    0.44070980241319013,
    0.562616970075237,
    0.7229567278928821,
    1.0,
};

inline std::string_view to_string(QuantMode mode) {
    switch (mode) {
        case QuantMode::LinearAbsmax4: return "linear4";
        case QuantMode::NF4: return "nf4";
        case QuantMode::LinearAbsmax8: return "linear8";
    }
    return "unknown";
}

inline QuantMode parse_quant_mode(std::string_view name) {
    if (name == "linear4" || name == "LinearAbsmax4") return QuantMode::LinearAbsmax4;
    if (name == "nf4" || name == "NF4") return QuantMode::NF4;
    if (name == "linear8" || name == "LinearAbsmax8") return QuantMode::LinearAbsmax8;
    throw ValidationError("unknown quant mode \"" + std::string(name) +
                          "\" (expected linear4, nf4 or linear8)");
}

inline QuantMode quant_mode_from_tag(std::uint32_t tag) {
    if (tag > 2) throw ValidationError("unknown quant mode tag " + std::to_string(tag));
    return static_cast<QuantMode>(tag);
}

inline constexpr unsigned bits_per_code(QuantMode mode) {
    return mode == QuantMode::LinearAbsmax8 ? 8u : 4u;
}

/// Number of distinct code indices in use for a mode.
inline constexpr unsigned level_count(QuantMode mode) {
    switch (mode) {
        case QuantMode::LinearAbsmax4: return 15;
        case QuantMode::NF4: return 16;
        case QuantMode::LinearAbsmax8: return 255;
    }
    return 0;
}

/// Normalized level in [-1, 1] for a code index.
inline double level_value(QuantMode mode, std::uint8_t code) {
    switch (mode) {
        case QuantMode::LinearAbsmax4: return (static_cast<int>(code) - 7) / 7.0;
        case QuantMode::NF4: return kNf4Levels[code];
        case QuantMode::LinearAbsmax8: return (static_cast<int>(code) - 127) / 127.0;
    }
    return 0.0;
}

/// Largest distance between two adjacent normalized levels.
inline double max_level_gap(QuantMode mode) {
    switch (mode) {
        case QuantMode::LinearAbsmax4: return 1.0 / 7.0;
        case QuantMode::LinearAbsmax8: return 1.0 / 127.0;
        case QuantMode::NF4: {
            double gap = 0.0;
            for (std::size_t i = 1; i < kNf4Levels.size(); ++i)
                gap = std::max(gap, kNf4Levels[i] - kNf4Levels[i - 1]);
            return gap;
        }
    }
    return 0.0;
}

namespace detail {

// Symmetric integer grid -L..L; exact half-steps round toward zero.
inline std::uint8_t encode_linear(double normalized, int half_levels) {
    const double t = std::abs(normalized) * half_levels;
    double k = std::floor(t);
    if (t - k > 0.5) k += 1.0;
    k = std::min(k, static_cast<double>(half_levels));
    const int signed_k = normalized < 0.0 ? -static_cast<int>(k) : static_cast<int>(k);
    return static_cast<std::uint8_t>(signed_k + half_levels);
}

inline std::uint8_t encode_nf4(double normalized) {
    const auto it = std::lower_bound(kNf4Levels.begin(), kNf4Levels.end(), normalized);
    if (it == kNf4Levels.begin()) return 0;
    if (it == kNf4Levels.end()) return static_cast<std::uint8_t>(kNf4Levels.size() - 1);
    const auto hi = static_cast<std::size_t>(it - kNf4Levels.begin());
    const std::size_t lo = hi - 1;
    const double d_lo = normalized - kNf4Levels[lo];
    const double d_hi = kNf4Levels[hi] - normalized;
    if (d_lo < d_hi) return static_cast<std::uint8_t>(lo);
    if (d_hi < d_lo) return static_cast<std::uint8_t>(hi);
    return static_cast<std::uint8_t>(std::abs(kNf4Levels[lo]) <= std::abs(kNf4Levels[hi]) ? lo : hi);
}

}  // namespace detail

/// Code index of the level nearest to `normalized` (ties toward the level nearer zero).
inline std::uint8_t encode_level(QuantMode mode, double normalized) {
    switch (mode) {
        case QuantMode::LinearAbsmax4: return detail::encode_linear(normalized, 7);
        case QuantMode::NF4: return detail::encode_nf4(normalized);
        case QuantMode::LinearAbsmax8: return detail::encode_linear(normalized, 127);
    }
    return 0;
}

struct QuantBlock {
    std::vector<std::uint8_t> codes;
    double scale = 0.0;

    bool operator==(const QuantBlock&) const = default;
};

/// A row-major matrix stored as consecutive blocks of low-bit codes with one absmax scale
/// per block. Immutable once built.
class QuantizedTensor {
public:
    QuantizedTensor() = default;

    /// Validating constructor; used by quantize_tensor and the checkpoint reader.
    QuantizedTensor(std::size_t rows, std::size_t cols, std::size_t block_size, QuantMode mode,
                    std::vector<QuantBlock> blocks)
        : rows_(rows), cols_(cols), block_size_(block_size), mode_(mode), blocks_(std::move(blocks)) {
        validate();
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t element_count() const noexcept { return rows_ * cols_; }
    std::size_t block_size() const noexcept { return block_size_; }
    QuantMode mode() const noexcept { return mode_; }
    const std::vector<QuantBlock>& blocks() const noexcept { return blocks_; }
    std::string shape() const { return Matrix::shape_string(rows_, cols_); }

    double decode(std::size_t flat_index) const {
        const auto& block = blocks_[flat_index / block_size_];
        return level_value(mode_, block.codes[flat_index % block_size_]) * block.scale;
    }

    /// Writes `count` consecutive decoded elements starting at `flat_index`.
    void decode_range(std::size_t flat_index, std::size_t count, double* out) const {
        while (count > 0) {
            const auto& block = blocks_[flat_index / block_size_];
            const std::size_t offset = flat_index % block_size_;
            const std::size_t take = std::min(count, block.codes.size() - offset);
            for (std::size_t i = 0; i < take; ++i)
                out[i] = level_value(mode_, block.codes[offset + i]) * block.scale;
            out += take;
            flat_index += take;
            count -= take;
        }
    }

    bool operator==(const QuantizedTensor&) const = default;

private:
    void validate() const {
        if (rows_ == 0 || cols_ == 0) throw ValidationError("quantized tensor must be non-empty");
        if (block_size_ == 0) throw ValidationError("block_size must be >= 1");
        const std::size_t n = rows_ * cols_;
        const std::size_t expected_blocks = (n + block_size_ - 1) / block_size_;
        if (blocks_.size() != expected_blocks) {
            throw ValidationError("quantized tensor " + shape() + " expects " +
                                  std::to_string(expected_blocks) + " blocks, got " +
                                  std::to_string(blocks_.size()));
        }
        for (std::size_t b = 0; b < blocks_.size(); ++b) {
            const std::size_t want = std::min(block_size_, n - b * block_size_);
            if (blocks_[b].codes.size() != want)
                throw ValidationError("block " + std::to_string(b) + " has wrong code count");
            if (!(blocks_[b].scale >= 0.0) || !std::isfinite(blocks_[b].scale))
                throw ValidationError("block " + std::to_string(b) + " has invalid scale");
            for (auto code : blocks_[b].codes) {
                if (code >= level_count(mode_))
                    throw ValidationError("block " + std::to_string(b) + " has out-of-range code " +
                                          std::to_string(code));
            }
        }
    }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::size_t block_size_ = kDefaultBlockSize;
    QuantMode mode_ = QuantMode::NF4;
    std::vector<QuantBlock> blocks_;
};

struct ErrorStats {
    double max_abs_error = 0.0;
    double mean_squared_error = 0.0;
    double memory_ratio = 0.0;
};

inline QuantizedTensor quantize_tensor(const Matrix& matrix, std::size_t block_size = kDefaultBlockSize,
                                       QuantMode mode = QuantMode::NF4) {
    if (block_size == 0) throw ValidationError("block_size must be >= 1");
    if (matrix.empty()) throw ValidationError("cannot quantize an empty matrix");
    for (std::size_t r = 0; r < matrix.rows(); ++r) {
        for (std::size_t c = 0; c < matrix.cols(); ++c) {
            if (!std::isfinite(matrix(r, c))) {
                throw ValidationError("non-finite value at (" + std::to_string(r) + ", " +
                                      std::to_string(c) + ")");
            }
        }
    }

    const auto values = matrix.flat();
    const std::size_t n = values.size();
    std::vector<QuantBlock> blocks;
    blocks.reserve((n + block_size - 1) / block_size);
    for (std::size_t start = 0; start < n; start += block_size) {
        const std::size_t count = std::min(block_size, n - start);
        QuantBlock block;
        for (std::size_t i = 0; i < count; ++i)
            block.scale = std::max(block.scale, std::abs(values[start + i]));
        block.codes.resize(count);
        for (std::size_t i = 0; i < count; ++i) {
            const double normalized = block.scale > 0.0 ? values[start + i] / block.scale : 0.0;
            block.codes[i] = encode_level(mode, normalized);
        }
        blocks.push_back(std::move(block));
    }
    return QuantizedTensor(matrix.rows(), matrix.cols(), block_size, mode, std::move(blocks));
}

inline Matrix dequantize(const QuantizedTensor& q) {
    Matrix out(q.rows(), q.cols());
    q.decode_range(0, q.element_count(), out.flat().data());
    return out;
}

/// q [out x in] times x [in x batch], decoding one weight row at a time.
inline Matrix quant_matmul(const QuantizedTensor& q, const Matrix& x) {
    if (q.cols() != x.rows()) {
        throw ValidationError("quant_matmul dimension mismatch: weight " + q.shape() + " vs input " +
                              x.shape());
    }
    const std::size_t batch = x.cols();
    Matrix out(q.rows(), batch);
    std::vector<double> weight_row(q.cols());
    for (std::size_t r = 0; r < q.rows(); ++r) {
        q.decode_range(r * q.cols(), q.cols(), weight_row.data());
        double* out_row = out.row(r).data();
        for (std::size_t i = 0; i < q.cols(); ++i) {
            const double w = weight_row[i];
            if (w == 0.0) continue;
            const double* x_row = x.row(i).data();
            for (std::size_t b = 0; b < batch; ++b) out_row[b] += w * x_row[b];
        }
    }
    return out;
}

/// q^T [in x out] times y [out x batch]; the input-gradient path of a frozen projection.
inline Matrix quant_matmul_transposed(const QuantizedTensor& q, const Matrix& y) {
    if (q.rows() != y.rows()) {
        throw ValidationError("quant_matmul_transposed dimension mismatch: weight " + q.shape() +
                              " vs input " + y.shape());
    }
    const std::size_t batch = y.cols();
    Matrix out(q.cols(), batch);
    std::vector<double> weight_row(q.cols());
    for (std::size_t r = 0; r < q.rows(); ++r) {
        q.decode_range(r * q.cols(), q.cols(), weight_row.data());
        const double* y_row = y.row(r).data();
        for (std::size_t i = 0; i < q.cols(); ++i) {
            const double w = weight_row[i];
            if (w == 0.0) continue;
            double* out_row = out.row(i).data();
            for (std::size_t b = 0; b < batch; ++b) out_row[b] += w * y_row[b];
        }
    }
    return out;
}

inline double memory_ratio(QuantMode mode, std::size_t element_count, std::size_t block_size) {
    const double n = static_cast<double>(element_count);
    const double blocks = static_cast<double>((element_count + block_size - 1) / block_size);
    return (bits_per_code(mode) * n + 32.0 * blocks) / (32.0 * n);
}

inline ErrorStats quant_error_report(const Matrix& original, const QuantizedTensor& q) {
    if (original.rows() != q.rows() || original.cols() != q.cols()) {
        throw ValidationError("quant_error_report shape mismatch: " + original.shape() + " vs " +
                              q.shape());
    }
    const Matrix decoded = dequantize(q);
    ErrorStats stats;
    double sum_sq = 0.0;
    for (std::size_t i = 0; i < original.size(); ++i) {
        const double err = std::abs(original.flat()[i] - decoded.flat()[i]);
        stats.max_abs_error = std::max(stats.max_abs_error, err);
        sum_sq += err * err;
    }
    stats.mean_squared_error = sum_sq / static_cast<double>(original.size());
    stats.memory_ratio = memory_ratio(q.mode(), q.element_count(), q.block_size());
    return stats;
}

// QT01 layout: magic, u32 rows, u32 cols, u32 block_size, u8 mode tag, then per block an f32
// scale followed by packed codes (4-bit: two per byte, low nibble first; 8-bit: one per byte).

inline void write_quantized(io::ByteWriter& w, const QuantizedTensor& q) {
    w.magic("QT01");
    w.u32(static_cast<std::uint32_t>(q.rows()));
    w.u32(static_cast<std::uint32_t>(q.cols()));
    w.u32(static_cast<std::uint32_t>(q.block_size()));
    w.u8(static_cast<std::uint8_t>(q.mode()));
    const bool packed = bits_per_code(q.mode()) == 4;
    for (const auto& block : q.blocks()) {
        w.f32(block.scale);
        if (packed) {
            for (std::size_t i = 0; i < block.codes.size(); i += 2) {
                std::uint8_t byte = block.codes[i] & 0x0F;
                if (i + 1 < block.codes.size()) byte |= static_cast<std::uint8_t>(block.codes[i + 1] << 4);
                w.u8(byte);
            }
        } else {
            w.raw(block.codes);
        }
    }
}

inline QuantizedTensor read_quantized(io::ByteReader& r) {
    r.expect_magic("QT01");
    const std::size_t rows = r.u32();
    const std::size_t cols = r.u32();
    const std::size_t block_size = r.u32();
    const QuantMode mode = quant_mode_from_tag(r.u8());
    if (rows == 0 || cols == 0 || block_size == 0)
        throw ValidationError("QT01 record has a zero dimension");
    const std::size_t n = rows * cols;
    const bool packed = bits_per_code(mode) == 4;
    std::vector<QuantBlock> blocks;
    for (std::size_t start = 0; start < n; start += block_size) {
        const std::size_t count = std::min(block_size, n - start);
        QuantBlock block;
        block.scale = r.f32();
        block.codes.resize(count);
        if (packed) {
            const auto bytes = r.raw((count + 1) / 2);
            for (std::size_t i = 0; i < count; ++i)
                block.codes[i] = (i % 2 == 0) ? (bytes[i / 2] & 0x0F) : (bytes[i / 2] >> 4);
        } else {
            const auto bytes = r.raw(count);
            std::copy(bytes.begin(), bytes.end(), block.codes.begin());
        }
        blocks.push_back(std::move(block));
    }
    return QuantizedTensor(rows, cols, block_size, mode, std::move(blocks));
}

}  // namespace qlora
