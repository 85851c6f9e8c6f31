#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "qlora/binary_io.hpp"
#include "qlora/error.hpp"
#include "qlora/quant.hpp"
#include "qlora/tensor.hpp"

namespace qlora {

/// The eight adapter-bearing projections, in canonical order.
inline constexpr std::array<std::string_view, 8> kTargetModules = {
    "q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj", "lm_head",
};

inline std::vector<std::string> target_modules() {
    return {kTargetModules.begin(), kTargetModules.end()};
}

inline bool is_target_module(std::string_view name) {
    return std::find(kTargetModules.begin(), kTargetModules.end(), name) != kTargetModules.end();
}

/// Low-rank update delta_W = (alpha / rank) * B * A on a frozen [out x in] projection.
struct LoraAdapter {
    Matrix a;  ///< rank x in_dim
    Matrix b;  ///< out_dim x rank
    double alpha = 16.0;
    double dropout_rate = 0.05;

    std::size_t rank() const noexcept { return a.rows(); }
    std::size_t in_dim() const noexcept { return a.cols(); }
    std::size_t out_dim() const noexcept { return b.rows(); }
    double scaling() const noexcept { return alpha / static_cast<double>(rank()); }

    Matrix delta_weight() const { return scaling() * matmul(b, a); }

    bool operator==(const LoraAdapter&) const = default;
};

inline LoraAdapter init_adapter(std::size_t out_dim, std::size_t in_dim, std::size_t rank, double alpha,
                                double dropout_rate, std::uint64_t seed) {
    if (rank < 1 || rank > std::min(in_dim, out_dim)) {
        throw ValidationError("adapter rank " + std::to_string(rank) + " must be in [1, min(" +
                              std::to_string(in_dim) + ", " + std::to_string(out_dim) + ")]");
    }
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
        throw ValidationError("dropout_rate must be in [0, 1)");
    if (!(alpha > 0.0)) throw ValidationError("alpha must be positive");

    LoraAdapter adapter;
    adapter.alpha = alpha;
    adapter.dropout_rate = dropout_rate;
    adapter.a = Matrix(rank, in_dim);
    adapter.b = Matrix(out_dim, rank);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(in_dim)));
    for (double& v : adapter.a.flat()) v = normal(rng);
    return adapter;
}

inline std::size_t adapter_param_count(const LoraAdapter& adapter) {
    return adapter.rank() * (adapter.in_dim() + adapter.out_dim());
}

/// Inverted-dropout mask: kept entries carry 1/(1-p), dropped entries 0.
inline Matrix dropout_mask(std::size_t rows, std::size_t cols, double rate, std::mt19937_64& rng) {
    Matrix mask(rows, cols, 1.0);
    if (rate <= 0.0) return mask;
    const double keep_scale = 1.0 / (1.0 - rate);
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    for (double& v : mask.flat()) v = uniform(rng) < rate ? 0.0 : keep_scale;
    return mask;
}

inline Matrix hadamard(Matrix a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ValidationError("hadamard shape mismatch: " + a.shape() + " vs " + b.shape());
    for (std::size_t i = 0; i < a.size(); ++i) a.flat()[i] *= b.flat()[i];
    return a;
}

namespace detail {

inline void check_adapter_fits(const QuantizedTensor& base, const LoraAdapter& adapter) {
    if (adapter.out_dim() != base.rows() || adapter.in_dim() != base.cols() ||
        adapter.b.cols() != adapter.rank()) {
        throw ValidationError("adapter " + Matrix::shape_string(adapter.out_dim(), adapter.in_dim()) +
                              " (rank " + std::to_string(adapter.rank()) +
                              ") does not fit base " + base.shape());
    }
}

}  // namespace detail

/// Intermediates of one adapter-carrying projection, kept for the backward pass.
struct ProjectionCache {
    Matrix input;      ///< x [in x n]
    Matrix mask;       ///< empty when dropout was not applied
    Matrix dropped;    ///< d(x)
    Matrix low_rank;   ///< A * d(x) [rank x n]
};

/// y = W x + (alpha/rank) B A d(x). The frozen base is only read.
inline Matrix projection_forward(const QuantizedTensor& base, const LoraAdapter& adapter, const Matrix& x,
                                 bool training, std::mt19937_64* rng, ProjectionCache* cache) {
    detail::check_adapter_fits(base, adapter);
    Matrix y = quant_matmul(base, x);
    Matrix mask;
    const bool use_dropout = training && adapter.dropout_rate > 0.0;
    if (use_dropout) {
        if (rng == nullptr) throw ValidationError("training-mode projection needs a random stream");
        mask = dropout_mask(x.rows(), x.cols(), adapter.dropout_rate, *rng);
    }
    Matrix dropped = use_dropout ? hadamard(x, mask) : x;
    Matrix low_rank = matmul(adapter.a, dropped);
    Matrix update(adapter.out_dim(), x.cols());
    matmul_accumulate(adapter.b, low_rank, update);
    const double s = adapter.scaling();
    for (std::size_t i = 0; i < y.size(); ++i) y.flat()[i] += s * update.flat()[i];
    if (cache != nullptr) {
        cache->input = x;
        cache->mask = std::move(mask);
        cache->dropped = std::move(dropped);
        cache->low_rank = std::move(low_rank);
    }
    return y;
}

inline Matrix apply_adapter(const QuantizedTensor& base, const Matrix& x, const LoraAdapter& adapter,
                            bool training, std::mt19937_64& rng) {
    if (base.cols() != x.rows()) {
        throw ValidationError("apply_adapter dimension mismatch: weight " + base.shape() + " vs input " +
                              x.shape());
    }
    return projection_forward(base, adapter, x, training, &rng, nullptr);
}

inline Matrix merge_adapter(const QuantizedTensor& base, const LoraAdapter& adapter) {
    detail::check_adapter_fits(base, adapter);
    return dequantize(base) + adapter.delta_weight();
}

struct AdapterGrad {
    Matrix a;
    Matrix b;
};

/// Accumulates dL/dA, dL/dB into `grad` and returns dL/dx.
inline Matrix projection_backward(const QuantizedTensor& base, const LoraAdapter& adapter,
                                  const ProjectionCache& cache, const Matrix& grad_out, AdapterGrad& grad) {
    const double s = adapter.scaling();
    // dB = s * dy * (A d(x))^T
    Matrix grad_b(adapter.out_dim(), adapter.rank());
    matmul_nt_accumulate(grad_out, cache.low_rank, grad_b);
    for (std::size_t i = 0; i < grad_b.size(); ++i) grad.b.flat()[i] += s * grad_b.flat()[i];

    Matrix grad_low_rank(adapter.rank(), grad_out.cols());
    matmul_tn_accumulate(adapter.b, grad_out, grad_low_rank);
    for (double& v : grad_low_rank.flat()) v *= s;

    matmul_nt_accumulate(grad_low_rank, cache.dropped, grad.a);

    Matrix grad_dropped(adapter.in_dim(), grad_out.cols());
    matmul_tn_accumulate(adapter.a, grad_low_rank, grad_dropped);
    if (!cache.mask.empty()) grad_dropped = hadamard(std::move(grad_dropped), cache.mask);

    return quant_matmul_transposed(base, grad_out) + grad_dropped;
}

// LA01 layout: magic, u32 out_dim, u32 in_dim, u32 rank, f32 alpha, f32 dropout_rate, then A and
// B row-major as f32.

inline void write_adapter(io::ByteWriter& w, const LoraAdapter& adapter) {
    w.magic("LA01");
    w.u32(static_cast<std::uint32_t>(adapter.out_dim()));
    w.u32(static_cast<std::uint32_t>(adapter.in_dim()));
    w.u32(static_cast<std::uint32_t>(adapter.rank()));
    w.f32(adapter.alpha);
    w.f32(adapter.dropout_rate);
    for (double v : adapter.a.flat()) w.f32(v);
    for (double v : adapter.b.flat()) w.f32(v);
}

inline LoraAdapter read_adapter(io::ByteReader& r) {
    r.expect_magic("LA01");
    const std::size_t out_dim = r.u32();
    const std::size_t in_dim = r.u32();
    const std::size_t rank = r.u32();
    if (rank < 1 || rank > std::min(in_dim, out_dim))
        throw ValidationError("LA01 record has invalid rank " + std::to_string(rank));
    LoraAdapter adapter;
    adapter.alpha = r.f32();
    adapter.dropout_rate = r.f32();
    adapter.a = Matrix(rank, in_dim);
    adapter.b = Matrix(out_dim, rank);
    for (double& v : adapter.a.flat()) v = r.f32();
    for (double& v : adapter.b.flat()) v = r.f32();
    return adapter;
}

}  // namespace qlora
