#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "qlora/binary_io.hpp"
#include "qlora/error.hpp"
#include "qlora/lora.hpp"
#include "qlora/quant.hpp"
#include "qlora/tensor.hpp"
#include "qlora/tokenizer.hpp"

namespace qlora {

struct ModelConfig {
    std::size_t num_layers = 2;
    std::size_t d_model = 64;
    std::size_t num_heads = 4;
    std::size_t d_ff = 128;
    std::size_t vocab_size = kVocabSize;
    std::size_t max_seq_len = 256;
    QuantMode quant_mode = QuantMode::NF4;
    std::size_t quant_block_size = kDefaultBlockSize;
    std::size_t lora_rank = 8;
    double lora_alpha = 16.0;
    double lora_dropout = 0.05;
    std::uint32_t seed = 0;

    void validate() const {
        if (num_layers < 1) throw ValidationError("num_layers must be >= 1");
        if (d_model < 1) throw ValidationError("d_model must be >= 1");
        if (num_heads < 1 || d_model % num_heads != 0)
            throw ValidationError("d_model must be divisible by num_heads");
        if (d_ff < 1) throw ValidationError("d_ff must be >= 1");
        if (vocab_size != kVocabSize) throw ValidationError("vocab_size must be 259");
        if (max_seq_len < 2) throw ValidationError("max_seq_len must be >= 2");
        if (quant_block_size < 1) throw ValidationError("quant_block_size must be >= 1");
        if (lora_rank < 1 || lora_rank > std::min(d_model, d_ff))
            throw ValidationError("lora_rank must be in [1, min(d_model, d_ff)]");
        if (!(lora_alpha > 0.0)) throw ValidationError("lora_alpha must be positive");
        if (!(lora_dropout >= 0.0 && lora_dropout < 1.0))
            throw ValidationError("lora_dropout must be in [0, 1)");
    }

    std::size_t head_dim() const noexcept { return d_model / num_heads; }
};

struct Projection {
    QuantizedTensor weight;
    LoraAdapter adapter;
};

struct DecoderLayer {
    std::vector<double> attn_norm;
    std::vector<double> mlp_norm;
    Projection q_proj, k_proj, v_proj, o_proj;
    Projection gate_proj, up_proj, down_proj;

    /// The seven per-layer projections in canonical order.
    std::array<Projection*, 7> projections() {
        return {&q_proj, &k_proj, &v_proj, &o_proj, &gate_proj, &up_proj, &down_proj};
    }
    std::array<const Projection*, 7> projections() const {
        return {&q_proj, &k_proj, &v_proj, &o_proj, &gate_proj, &up_proj, &down_proj};
    }
};

/// Decoder-only transformer: frozen embeddings and norm gains, quantized frozen projections, and a
/// LoRA adapter on every projection named in kTargetModules.
struct Model {
    ModelConfig config;
    Matrix token_embedding;     ///< vocab x d_model
    Matrix position_embedding;  ///< max_seq_len x d_model
    std::vector<DecoderLayer> layers;
    Projection lm_head;

    /// Qualified names ("layers.<i>.<module>", "lm_head") in canonical order.
    std::vector<std::string> projection_names() const {
        std::vector<std::string> names;
        for (std::size_t l = 0; l < layers.size(); ++l)
            for (std::size_t m = 0; m < 7; ++m)
                names.push_back("layers." + std::to_string(l) + "." + std::string(kTargetModules[m]));
        names.emplace_back("lm_head");
        return names;
    }

    std::vector<Projection*> projections() {
        std::vector<Projection*> out;
        for (auto& layer : layers)
            for (auto* p : layer.projections()) out.push_back(p);
        out.push_back(&lm_head);
        return out;
    }
    std::vector<const Projection*> projections() const {
        std::vector<const Projection*> out;
        for (const auto& layer : layers)
            for (const auto* p : layer.projections()) out.push_back(p);
        out.push_back(&lm_head);
        return out;
    }
};

struct NamedMatrix {
    std::string name;
    Matrix value;
};

namespace detail {

inline Matrix draw_normal(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, stddev);
    Matrix m(rows, cols);
    // Rounded through f32 so checkpoints hold these values exactly.
    for (double& v : m.flat()) v = static_cast<float>(normal(rng));
    return m;
}

inline std::pair<std::size_t, std::size_t> projection_shape(const ModelConfig& c, std::size_t module) {
    switch (module) {
        case 0: case 1: case 2: case 3: return {c.d_model, c.d_model};
        case 4: case 5: return {c.d_ff, c.d_model};
        case 6: return {c.d_model, c.d_ff};
        default: return {c.vocab_size, c.d_model};
    }
}

inline std::uint64_t adapter_seed(std::uint32_t seed, std::size_t index) {
    std::seed_seq seq{seed, static_cast<std::uint32_t>(index), 0x4c4f5241u};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace detail

/// Full-precision base weights as drawn from the seed, before quantization. Embeddings first, then
/// every projection in canonical order.
struct BaseWeights {
    Matrix token_embedding;
    Matrix position_embedding;
    std::vector<NamedMatrix> projections;
};

inline BaseWeights draw_base_weights(const ModelConfig& config) {
    config.validate();
    std::mt19937_64 rng(config.seed);
    const double stddev = 1.0 / std::sqrt(static_cast<double>(config.d_model));
    BaseWeights w;
    w.token_embedding = detail::draw_normal(config.vocab_size, config.d_model, stddev, rng);
    w.position_embedding = detail::draw_normal(config.max_seq_len, config.d_model, stddev, rng);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        for (std::size_t m = 0; m < 7; ++m) {
            auto [rows, cols] = detail::projection_shape(config, m);
            w.projections.push_back({"layers." + std::to_string(l) + "." + std::string(kTargetModules[m]),
                                     detail::draw_normal(rows, cols, stddev, rng)});
        }
    }
    auto [rows, cols] = detail::projection_shape(config, 7);
    w.projections.push_back({"lm_head", detail::draw_normal(rows, cols, stddev, rng)});
    return w;
}

inline Model build_model(const ModelConfig& config) {
    BaseWeights base = draw_base_weights(config);
    Model model;
    model.config = config;
    model.token_embedding = std::move(base.token_embedding);
    model.position_embedding = std::move(base.position_embedding);

    std::size_t index = 0;
    auto make_projection = [&](const Matrix& dense) {
        Projection p;
        p.weight = quantize_tensor(dense, config.quant_block_size, config.quant_mode);
        p.adapter = init_adapter(dense.rows(), dense.cols(), config.lora_rank, config.lora_alpha,
                                 config.lora_dropout, detail::adapter_seed(config.seed, index));
        // Rounded through f32 so saved and in-memory adapters agree at build time.
        for (double& v : p.adapter.a.flat()) v = static_cast<float>(v);
        ++index;
        return p;
    };

    model.layers.resize(config.num_layers);
    for (std::size_t l = 0; l < config.num_layers; ++l) {
        auto& layer = model.layers[l];
        layer.attn_norm.assign(config.d_model, 1.0);
        layer.mlp_norm.assign(config.d_model, 1.0);
        auto slots = layer.projections();
        for (std::size_t m = 0; m < 7; ++m) *slots[m] = make_projection(base.projections[l * 7 + m].value);
    }
    model.lm_head = make_projection(base.projections.back().value);
    return model;
}

inline std::size_t total_adapter_params(const Model& model) {
    std::size_t total = 0;
    for (const auto* p : model.projections()) total += adapter_param_count(p->adapter);
    return total;
}

/// Every frozen parameter: embeddings, norm gains and decoded projection weights.
inline std::size_t total_base_params(const Model& model) {
    std::size_t total = model.token_embedding.size() + model.position_embedding.size();
    for (const auto& layer : model.layers) total += layer.attn_norm.size() + layer.mlp_norm.size();
    for (const auto* p : model.projections()) total += p->weight.element_count();
    return total;
}

// ---------------------------------------------------------------------------------------------
// Forward / backward

/// Logits laid out [batch x seq x vocab]; positions past a sequence's length are zero.
struct Logits {
    std::size_t batch = 0;
    std::size_t seq = 0;
    std::size_t vocab = 0;
    std::vector<double> values;

    std::span<const double> at(std::size_t b, std::size_t t) const {
        return {values.data() + (b * seq + t) * vocab, vocab};
    }
    std::span<double> at(std::size_t b, std::size_t t) {
        return {values.data() + (b * seq + t) * vocab, vocab};
    }
};

struct LayerCache {
    Matrix x_in;
    std::vector<double> inv_rms_attn;
    ProjectionCache q, k, v, o;
    Matrix q_t, k_t, v_t;                 // token-major [T x d]
    std::vector<Matrix> probs;            // per head [T x T], causal
    ProjectionCache gate, up, down;
    Matrix x_mid;
    std::vector<double> inv_rms_mlp;
    Matrix gate_out, up_out;
};

struct SequenceCache {
    std::vector<LayerCache> layers;
    ProjectionCache lm_head;
};

/// Forward intermediates of one training batch. Consumed by exactly one backward call.
class Tape {
public:
    bool consumed() const noexcept { return consumed_; }

private:
    friend struct TapeAccess;
    const Model* model_ = nullptr;
    std::vector<TokenSeq> batch_;
    Logits logits_;
    std::vector<SequenceCache> seqs_;
    bool consumed_ = false;
};

struct ForwardResult {
    Logits logits;
    std::optional<Tape> tape;
};

namespace detail {

inline constexpr double kRmsEps = 1e-6;

inline Matrix rms_norm(const Matrix& x, const std::vector<double>& gain, std::vector<double>& inv_rms) {
    const std::size_t d = x.rows();
    const std::size_t n = x.cols();
    std::vector<double> sum_sq(n, 0.0);
    for (std::size_t r = 0; r < d; ++r) {
        const double* row = x.row(r).data();
        for (std::size_t t = 0; t < n; ++t) sum_sq[t] += row[t] * row[t];
    }
    inv_rms.resize(n);
    for (std::size_t t = 0; t < n; ++t)
        inv_rms[t] = 1.0 / std::sqrt(sum_sq[t] / static_cast<double>(d) + kRmsEps);
    Matrix out(d, n);
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t t = 0; t < n; ++t) out(r, t) = x(r, t) * inv_rms[t] * gain[r];
    return out;
}

inline Matrix rms_norm_backward(const Matrix& x, const std::vector<double>& gain,
                                const std::vector<double>& inv_rms, const Matrix& grad_out) {
    const std::size_t d = x.rows();
    const std::size_t n = x.cols();
    std::vector<double> dot(n, 0.0);
    for (std::size_t r = 0; r < d; ++r)
        for (std::size_t t = 0; t < n; ++t) dot[t] += grad_out(r, t) * gain[r] * x(r, t) * inv_rms[t];
    Matrix grad(d, n);
    for (std::size_t r = 0; r < d; ++r) {
        for (std::size_t t = 0; t < n; ++t) {
            const double xhat = x(r, t) * inv_rms[t];
            grad(r, t) = inv_rms[t] * (grad_out(r, t) * gain[r] - xhat * dot[t] / static_cast<double>(d));
        }
    }
    return grad;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

/// Causal multi-head attention on token-major q/k/v [T x d]; returns context [d x T].
inline Matrix causal_attention(const Matrix& q_t, const Matrix& k_t, const Matrix& v_t, std::size_t heads,
                               std::vector<Matrix>* probs_out) {
    const std::size_t n = q_t.rows();
    const std::size_t d = q_t.cols();
    const std::size_t hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    Matrix ctx_t(n, d);
    if (probs_out != nullptr) probs_out->assign(heads, Matrix());
    std::vector<double> row(n);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * hd;
        Matrix probs(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            const double* qi = q_t.row(i).data() + off;
            double peak = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j <= i; ++j) {
                const double* kj = k_t.row(j).data() + off;
                double s = 0.0;
                for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
                row[j] = s * scale;
                peak = std::max(peak, row[j]);
            }
            double total = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                row[j] = std::exp(row[j] - peak);
                total += row[j];
            }
            double* ci = ctx_t.row(i).data() + off;
            for (std::size_t j = 0; j <= i; ++j) {
                const double p = row[j] / total;
                probs(i, j) = p;
                const double* vj = v_t.row(j).data() + off;
                for (std::size_t c = 0; c < hd; ++c) ci[c] += p * vj[c];
            }
        }
        if (probs_out != nullptr) (*probs_out)[h] = std::move(probs);
    }
    return transpose(ctx_t);
}

inline void causal_attention_backward(const Matrix& q_t, const Matrix& k_t, const Matrix& v_t,
                                      const std::vector<Matrix>& probs, const Matrix& grad_ctx,
                                      Matrix& grad_q_t, Matrix& grad_k_t, Matrix& grad_v_t) {
    const std::size_t n = q_t.rows();
    const std::size_t d = q_t.cols();
    const std::size_t heads = probs.size();
    const std::size_t hd = d / heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    const Matrix grad_ctx_t = transpose(grad_ctx);
    grad_q_t = Matrix(n, d);
    grad_k_t = Matrix(n, d);
    grad_v_t = Matrix(n, d);
    std::vector<double> grad_p(n);
    for (std::size_t h = 0; h < heads; ++h) {
        const std::size_t off = h * hd;
        const Matrix& p = probs[h];
        for (std::size_t i = 0; i < n; ++i) {
            const double* gci = grad_ctx_t.row(i).data() + off;
            double weighted = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                const double* vj = v_t.row(j).data() + off;
                double* gvj = grad_v_t.row(j).data() + off;
                double s = 0.0;
                for (std::size_t c = 0; c < hd; ++c) {
                    s += gci[c] * vj[c];
                    gvj[c] += p(i, j) * gci[c];
                }
                grad_p[j] = s;
                weighted += p(i, j) * s;
            }
            const double* qi = q_t.row(i).data() + off;
            double* gqi = grad_q_t.row(i).data() + off;
            for (std::size_t j = 0; j <= i; ++j) {
                const double grad_score = p(i, j) * (grad_p[j] - weighted) * scale;
                if (grad_score == 0.0) continue;
                const double* kj = k_t.row(j).data() + off;
                double* gkj = grad_k_t.row(j).data() + off;
                for (std::size_t c = 0; c < hd; ++c) {
                    gqi[c] += grad_score * kj[c];
                    gkj[c] += grad_score * qi[c];
                }
            }
        }
    }
}

inline Matrix embed(const Model& model, const std::vector<std::uint32_t>& ids) {
    const std::size_t d = model.config.d_model;
    Matrix x(d, ids.size());
    for (std::size_t t = 0; t < ids.size(); ++t) {
        if (ids[t] >= model.config.vocab_size)
            throw ValidationError("token id " + std::to_string(ids[t]) + " out of range");
        for (std::size_t r = 0; r < d; ++r)
            x(r, t) = model.token_embedding(ids[t], r) + model.position_embedding(t, r);
    }
    return x;
}

/// Hidden state after all decoder layers, [d x T].
inline Matrix decoder_stack(const Model& model, const std::vector<std::uint32_t>& ids, bool training,
                            std::mt19937_64* rng, SequenceCache* cache) {
    if (ids.empty()) throw ValidationError("cannot run the model on an empty sequence");
    if (ids.size() > model.config.max_seq_len) {
        throw ValidationError("sequence length " + std::to_string(ids.size()) + " exceeds max_seq_len " +
                              std::to_string(model.config.max_seq_len));
    }
    Matrix x = embed(model, ids);
    if (cache != nullptr) cache->layers.resize(model.layers.size());
    const std::size_t heads = model.config.num_heads;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const auto& layer = model.layers[l];
        LayerCache local;
        LayerCache& c = cache != nullptr ? cache->layers[l] : local;
        const bool keep = cache != nullptr;

        const Matrix normed = rms_norm(x, layer.attn_norm, c.inv_rms_attn);
        auto* qc = keep ? &c.q : nullptr;
        auto* kc = keep ? &c.k : nullptr;
        auto* vc = keep ? &c.v : nullptr;
        Matrix q = projection_forward(layer.q_proj.weight, layer.q_proj.adapter, normed, training, rng, qc);
        Matrix k = projection_forward(layer.k_proj.weight, layer.k_proj.adapter, normed, training, rng, kc);
        Matrix v = projection_forward(layer.v_proj.weight, layer.v_proj.adapter, normed, training, rng, vc);
        Matrix q_t = transpose(q), k_t = transpose(k), v_t = transpose(v);
        const Matrix ctx = causal_attention(q_t, k_t, v_t, heads, keep ? &c.probs : nullptr);
        Matrix attn_out = projection_forward(layer.o_proj.weight, layer.o_proj.adapter, ctx, training, rng,
                                             keep ? &c.o : nullptr);
        Matrix x_mid = x + attn_out;

        const Matrix normed_mlp = rms_norm(x_mid, layer.mlp_norm, c.inv_rms_mlp);
        Matrix gate = projection_forward(layer.gate_proj.weight, layer.gate_proj.adapter, normed_mlp, training,
                                         rng, keep ? &c.gate : nullptr);
        Matrix up = projection_forward(layer.up_proj.weight, layer.up_proj.adapter, normed_mlp, training, rng,
                                       keep ? &c.up : nullptr);
        Matrix act(gate.rows(), gate.cols());
        for (std::size_t i = 0; i < act.size(); ++i) {
            const double g = gate.flat()[i];
            act.flat()[i] = g * sigmoid(g) * up.flat()[i];
        }
        Matrix down = projection_forward(layer.down_proj.weight, layer.down_proj.adapter, act, training, rng,
                                         keep ? &c.down : nullptr);
        Matrix x_out = x_mid + down;

        if (keep) {
            c.x_in = std::move(x);
            c.q_t = std::move(q_t);
            c.k_t = std::move(k_t);
            c.v_t = std::move(v_t);
            c.x_mid = std::move(x_mid);
            c.gate_out = std::move(gate);
            c.up_out = std::move(up);
        }
        x = std::move(x_out);
    }
    return x;
}

/// Logits [vocab x T] for one unpadded sequence.
inline Matrix sequence_logits(const Model& model, const std::vector<std::uint32_t>& ids, bool training,
                              std::mt19937_64* rng, SequenceCache* cache) {
    const Matrix hidden = decoder_stack(model, ids, training, rng, cache);
    return projection_forward(model.lm_head.weight, model.lm_head.adapter, hidden, training, rng,
                              cache != nullptr ? &cache->lm_head : nullptr);
}

/// Logits [vocab] for the final position only; the generation path.
inline std::vector<double> last_position_logits(const Model& model, const std::vector<std::uint32_t>& ids) {
    const Matrix hidden = decoder_stack(model, ids, false, nullptr, nullptr);
    Matrix last(hidden.rows(), 1);
    for (std::size_t r = 0; r < hidden.rows(); ++r) last(r, 0) = hidden(r, hidden.cols() - 1);
    const Matrix logits =
        projection_forward(model.lm_head.weight, model.lm_head.adapter, last, false, nullptr, nullptr);
    return {logits.flat().begin(), logits.flat().end()};
}

inline double log_sum_exp(std::span<const double> v) {
    double peak = -std::numeric_limits<double>::infinity();
    for (double x : v) peak = std::max(peak, x);
    double total = 0.0;
    for (double x : v) total += std::exp(x - peak);
    return peak + std::log(total);
}

/// Sum of next-token NLL over all positions of an unpadded sequence, and the count.
inline std::pair<double, std::size_t> sequence_nll(const Matrix& logits_vt,
                                                   const std::vector<std::uint32_t>& ids) {
    double total = 0.0;
    std::size_t count = 0;
    std::vector<double> column(logits_vt.rows());
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
        for (std::size_t v = 0; v < column.size(); ++v) column[v] = logits_vt(v, t);
        total += log_sum_exp(column) - column[ids[t + 1]];
        ++count;
    }
    return {total, count};
}

}  // namespace detail

struct TapeAccess {
    static Tape make(const Model* model, std::vector<TokenSeq> batch, Logits logits,
                     std::vector<SequenceCache> seqs) {
        Tape tape;
        tape.model_ = model;
        tape.batch_ = std::move(batch);
        tape.logits_ = std::move(logits);
        tape.seqs_ = std::move(seqs);
        return tape;
    }
    static const Model* model(const Tape& t) { return t.model_; }
    static const std::vector<TokenSeq>& batch(const Tape& t) { return t.batch_; }
    static const Logits& logits(const Tape& t) { return t.logits_; }
    static const std::vector<SequenceCache>& seqs(const Tape& t) { return t.seqs_; }
    static void consume(Tape& t) {
        if (t.consumed_) throw Error("tape already consumed by a previous backward pass");
        t.consumed_ = true;
    }
};

/// Runs the batch. Sequences are processed at their own lengths; the logits tensor is right-padded
/// to the longest one. Training mode applies adapter dropout and records a tape.
inline ForwardResult forward(const Model& model, const std::vector<TokenSeq>& batch, bool training,
                             std::mt19937_64& rng) {
    if (batch.empty()) throw ValidationError("forward needs at least one sequence");
    std::size_t longest = 0;
    for (const auto& s : batch) {
        if (s.ids.size() != s.loss_mask.size())
            throw ValidationError("token ids and loss mask differ in length");
        longest = std::max(longest, s.ids.size());
    }
    ForwardResult result;
    Logits& logits = result.logits;
    logits.batch = batch.size();
    logits.seq = longest;
    logits.vocab = model.config.vocab_size;
    logits.values.assign(logits.batch * logits.seq * logits.vocab, 0.0);

    std::vector<SequenceCache> caches(training ? batch.size() : 0);
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const Matrix seq_logits =
            detail::sequence_logits(model, batch[b].ids, training, &rng, training ? &caches[b] : nullptr);
        for (std::size_t t = 0; t < batch[b].ids.size(); ++t) {
            auto row = logits.at(b, t);
            for (std::size_t v = 0; v < logits.vocab; ++v) row[v] = seq_logits(v, t);
        }
    }
    if (training) result.tape = TapeAccess::make(&model, batch, logits, std::move(caches));
    return result;
}

/// Mean next-token cross-entropy over supervised target positions.
inline double lm_loss(const Logits& logits, const std::vector<TokenSeq>& batch) {
    if (batch.size() != logits.batch) throw ValidationError("lm_loss: batch size mismatch");
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& s = batch[b];
        if (s.ids.size() > logits.seq) throw ValidationError("lm_loss: sequence longer than logits");
        for (std::size_t t = 0; t + 1 < s.ids.size(); ++t) {
            if (!s.loss_mask[t + 1] || s.ids[t + 1] == kPad) continue;
            const auto row = logits.at(b, t);
            total += detail::log_sum_exp(row) - row[s.ids[t + 1]];
            ++count;
        }
    }
    if (count == 0) throw ValidationError("lm_loss: no supervised tokens in batch");
    return total / static_cast<double>(count);
}

/// dL/dA and dL/dB for every adapter, in Model::projections() order.
struct Gradients {
    std::vector<AdapterGrad> adapters;
    double loss = 0.0;
};

inline Gradients zero_gradients(const Model& model) {
    Gradients g;
    for (const auto* p : model.projections())
        g.adapters.push_back({Matrix(p->adapter.a.rows(), p->adapter.a.cols()),
                              Matrix(p->adapter.b.rows(), p->adapter.b.cols())});
    return g;
}

inline Gradients backward(Tape& tape) {
    TapeAccess::consume(tape);
    const Model& model = *TapeAccess::model(tape);
    const auto& batch = TapeAccess::batch(tape);
    const auto& logits = TapeAccess::logits(tape);
    const auto& seqs = TapeAccess::seqs(tape);

    Gradients grads = zero_gradients(model);
    grads.loss = lm_loss(logits, batch);

    std::size_t count = 0;
    for (const auto& s : batch)
        for (std::size_t t = 0; t + 1 < s.ids.size(); ++t)
            if (s.loss_mask[t + 1] && s.ids[t + 1] != kPad) ++count;
    const double inv_count = 1.0 / static_cast<double>(count);

    const std::size_t vocab = model.config.vocab_size;
    const std::size_t per_layer = 7;
    AdapterGrad& head_grad = grads.adapters.back();

    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& s = batch[b];
        const auto& cache = seqs[b];
        const std::size_t n = s.ids.size();

        Matrix grad_logits(vocab, n);
        for (std::size_t t = 0; t + 1 < n; ++t) {
            if (!s.loss_mask[t + 1] || s.ids[t + 1] == kPad) continue;
            const auto row = logits.at(b, t);
            const double lse = detail::log_sum_exp(row);
            for (std::size_t v = 0; v < vocab; ++v) grad_logits(v, t) = std::exp(row[v] - lse) * inv_count;
            grad_logits(s.ids[t + 1], t) -= inv_count;
        }

        Matrix grad_x = projection_backward(model.lm_head.weight, model.lm_head.adapter, cache.lm_head,
                                            grad_logits, head_grad);

        for (std::size_t l = model.layers.size(); l-- > 0;) {
            const auto& layer = model.layers[l];
            const auto& c = cache.layers[l];
            AdapterGrad* g = &grads.adapters[l * per_layer];

            // x_out = x_mid + down(silu(gate) * up)
            Matrix grad_act = projection_backward(layer.down_proj.weight, layer.down_proj.adapter, c.down,
                                                  grad_x, g[6]);
            Matrix grad_gate(grad_act.rows(), grad_act.cols());
            Matrix grad_up(grad_act.rows(), grad_act.cols());
            for (std::size_t i = 0; i < grad_act.size(); ++i) {
                const double gv = c.gate_out.flat()[i];
                const double sig = detail::sigmoid(gv);
                const double silu = gv * sig;
                grad_up.flat()[i] = grad_act.flat()[i] * silu;
                grad_gate.flat()[i] = grad_act.flat()[i] * c.up_out.flat()[i] * sig * (1.0 + gv * (1.0 - sig));
            }
            Matrix grad_normed_mlp =
                projection_backward(layer.gate_proj.weight, layer.gate_proj.adapter, c.gate, grad_gate, g[4]) +
                projection_backward(layer.up_proj.weight, layer.up_proj.adapter, c.up, grad_up, g[5]);
            Matrix grad_mid =
                grad_x + detail::rms_norm_backward(c.x_mid, layer.mlp_norm, c.inv_rms_mlp, grad_normed_mlp);

            // x_mid = x_in + o(attention(q, k, v))
            Matrix grad_ctx =
                projection_backward(layer.o_proj.weight, layer.o_proj.adapter, c.o, grad_mid, g[3]);
            Matrix grad_q_t, grad_k_t, grad_v_t;
            detail::causal_attention_backward(c.q_t, c.k_t, c.v_t, c.probs, grad_ctx, grad_q_t, grad_k_t,
                                              grad_v_t);
            Matrix grad_normed =
                projection_backward(layer.q_proj.weight, layer.q_proj.adapter, c.q, transpose(grad_q_t), g[0]) +
                projection_backward(layer.k_proj.weight, layer.k_proj.adapter, c.k, transpose(grad_k_t), g[1]) +
                projection_backward(layer.v_proj.weight, layer.v_proj.adapter, c.v, transpose(grad_v_t), g[2]);
            grad_x = grad_mid + detail::rms_norm_backward(c.x_in, layer.attn_norm, c.inv_rms_attn, grad_normed);
        }
    }
    return grads;
}

// ---------------------------------------------------------------------------------------------
// Generation and scoring

struct GenerateOptions {
    bool greedy = true;
    double temperature = 1.0;
    std::uint64_t seed = 0;
};

inline std::string generate(const Model& model, std::string_view prompt, std::size_t max_new_tokens,
                            const GenerateOptions& options = {}) {
    if (max_new_tokens == 0) return {};
    std::vector<std::uint32_t> ids = encode_prompt(prompt);
    if (ids.size() + max_new_tokens > model.config.max_seq_len) {
        throw ValidationError("prompt of " + std::to_string(ids.size()) + " tokens plus budget " +
                              std::to_string(max_new_tokens) + " exceeds max_seq_len " +
                              std::to_string(model.config.max_seq_len));
    }
    if (!options.greedy && !(options.temperature > 0.0))
        throw ValidationError("temperature must be positive");
    std::mt19937_64 rng(options.seed);
    std::vector<std::uint32_t> completion;
    for (std::size_t step = 0; step < max_new_tokens; ++step) {
        const std::vector<double> logits = detail::last_position_logits(model, ids);
        std::uint32_t next = 0;
        if (options.greedy) {
            for (std::uint32_t v = 1; v < logits.size(); ++v)
                if (logits[v] > logits[next]) next = v;
        } else {
            std::vector<double> weights(logits.size());
            double peak = *std::max_element(logits.begin(), logits.end());
            for (std::size_t v = 0; v < logits.size(); ++v)
                weights[v] = std::exp((logits[v] - peak) / options.temperature);
            std::discrete_distribution<std::uint32_t> dist(weights.begin(), weights.end());
            next = dist(rng);
        }
        if (next == kEos) break;
        completion.push_back(next);
        ids.push_back(next);
    }
    return detokenize(completion);
}

/// exp of the per-token mean NLL over every next-token position of every document.
inline double perplexity(const Model& model, const std::vector<std::string>& corpus) {
    if (corpus.empty()) throw ValidationError("perplexity needs a non-empty corpus");
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& doc : corpus) {
        const TokenSeq seq = tokenize(doc);
        const Matrix logits = detail::sequence_logits(model, seq.ids, false, nullptr, nullptr);
        auto [nll, n] = detail::sequence_nll(logits, seq.ids);
        total += nll;
        count += n;
    }
    return std::exp(total / static_cast<double>(count));
}

// ---------------------------------------------------------------------------------------------
// Checkpoints
//
// QLM1 layout: magic; u32 num_layers, d_model, num_heads, d_ff, vocab_size, max_seq_len,
// quant_mode, quant_block_size, lora_rank; f32 lora_alpha, lora_dropout; u32 seed. Then
// token_embedding and position_embedding as dense f32 records ("DF01", u32 rows, u32 cols,
// row-major f32), then per layer: attn_norm gain, mlp_norm gain (u32 length, f32 values), and the
// seven projections as QT01 + LA01 pairs in canonical order; finally lm_head as QT01 + LA01.

namespace detail {

inline void write_dense(io::ByteWriter& w, const Matrix& m) {
    w.magic("DF01");
    w.u32(static_cast<std::uint32_t>(m.rows()));
    w.u32(static_cast<std::uint32_t>(m.cols()));
    for (double v : m.flat()) w.f32(v);
}

inline Matrix read_dense(io::ByteReader& r) {
    r.expect_magic("DF01");
    const std::size_t rows = r.u32();
    const std::size_t cols = r.u32();
    Matrix m(rows, cols);
    for (double& v : m.flat()) v = r.f32();
    return m;
}

inline void write_gain(io::ByteWriter& w, const std::vector<double>& gain) {
    w.u32(static_cast<std::uint32_t>(gain.size()));
    for (double v : gain) w.f32(v);
}

inline std::vector<double> read_gain(io::ByteReader& r, std::size_t expected) {
    const std::size_t n = r.u32();
    if (n != expected) throw ValidationError("norm gain length mismatch");
    std::vector<double> g(n);
    for (double& v : g) v = r.f32();
    return g;
}

inline void expect_shape(const QuantizedTensor& q, std::size_t rows, std::size_t cols, const std::string& name) {
    if (q.rows() != rows || q.cols() != cols)
        throw ValidationError("checkpoint tensor " + name + " has shape " + q.shape());
}

}  // namespace detail

inline void write_config(io::ByteWriter& w, const ModelConfig& c) {
    w.u32(static_cast<std::uint32_t>(c.num_layers));
    w.u32(static_cast<std::uint32_t>(c.d_model));
    w.u32(static_cast<std::uint32_t>(c.num_heads));
    w.u32(static_cast<std::uint32_t>(c.d_ff));
    w.u32(static_cast<std::uint32_t>(c.vocab_size));
    w.u32(static_cast<std::uint32_t>(c.max_seq_len));
    w.u32(static_cast<std::uint32_t>(c.quant_mode));
    w.u32(static_cast<std::uint32_t>(c.quant_block_size));
    w.u32(static_cast<std::uint32_t>(c.lora_rank));
    w.f32(c.lora_alpha);
    w.f32(c.lora_dropout);
    w.u32(c.seed);
}

inline ModelConfig read_config(io::ByteReader& r) {
    ModelConfig c;
    c.num_layers = r.u32();
    c.d_model = r.u32();
    c.num_heads = r.u32();
    c.d_ff = r.u32();
    c.vocab_size = r.u32();
    c.max_seq_len = r.u32();
    c.quant_mode = quant_mode_from_tag(r.u32());
    c.quant_block_size = r.u32();
    c.lora_rank = r.u32();
    c.lora_alpha = r.f32();
    c.lora_dropout = r.f32();
    c.seed = r.u32();
    c.validate();
    return c;
}

inline std::vector<std::uint8_t> serialize_model(const Model& model) {
    io::ByteWriter w;
    w.magic("QLM1");
    write_config(w, model.config);
    detail::write_dense(w, model.token_embedding);
    detail::write_dense(w, model.position_embedding);
    for (const auto& layer : model.layers) {
        detail::write_gain(w, layer.attn_norm);
        detail::write_gain(w, layer.mlp_norm);
        for (const auto* p : layer.projections()) {
            write_quantized(w, p->weight);
            write_adapter(w, p->adapter);
        }
    }
    write_quantized(w, model.lm_head.weight);
    write_adapter(w, model.lm_head.adapter);
    return w.take();
}

inline Model deserialize_model(std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    r.expect_magic("QLM1");
    Model model;
    model.config = read_config(r);
    const auto& c = model.config;
    model.token_embedding = detail::read_dense(r);
    model.position_embedding = detail::read_dense(r);
    if (model.token_embedding.rows() != c.vocab_size || model.token_embedding.cols() != c.d_model ||
        model.position_embedding.rows() != c.max_seq_len || model.position_embedding.cols() != c.d_model)
        throw ValidationError("checkpoint embedding shapes disagree with config");
    model.layers.resize(c.num_layers);
    const auto names = model.projection_names();
    std::size_t index = 0;
    for (auto& layer : model.layers) {
        layer.attn_norm = detail::read_gain(r, c.d_model);
        layer.mlp_norm = detail::read_gain(r, c.d_model);
        auto slots = layer.projections();
        for (std::size_t m = 0; m < 7; ++m) {
            auto [rows, cols] = detail::projection_shape(c, m);
            slots[m]->weight = read_quantized(r);
            detail::expect_shape(slots[m]->weight, rows, cols, names[index]);
            slots[m]->adapter = read_adapter(r);
            detail::check_adapter_fits(slots[m]->weight, slots[m]->adapter);
            ++index;
        }
    }
    model.lm_head.weight = read_quantized(r);
    detail::expect_shape(model.lm_head.weight, c.vocab_size, c.d_model, "lm_head");
    model.lm_head.adapter = read_adapter(r);
    detail::check_adapter_fits(model.lm_head.weight, model.lm_head.adapter);
    if (!r.at_end()) throw ValidationError("trailing bytes after model checkpoint");
    return model;
}

inline void save_model(const Model& model, const std::string& path) {
    io::write_file(path, serialize_model(model));
}

inline Model load_model(const std::string& path) {
    const auto bytes = io::read_file(path);
    return deserialize_model(bytes);
}

/// The QT01 records of every projection, concatenated; the frozen-base fingerprint.
inline std::vector<std::uint8_t> serialize_base(const Model& model) {
    io::ByteWriter w;
    for (const auto* p : model.projections()) write_quantized(w, p->weight);
    return w.take();
}

/// LA01 records in canonical order: per layer q,k,v,o,gate,up,down, then lm_head.
inline std::vector<std::uint8_t> serialize_adapters(const Model& model) {
    io::ByteWriter w;
    for (const auto* p : model.projections()) write_adapter(w, p->adapter);
    return w.take();
}

inline void load_adapters(Model& model, std::span<const std::uint8_t> bytes) {
    io::ByteReader r(bytes);
    for (auto* p : model.projections()) {
        LoraAdapter adapter = read_adapter(r);
        detail::check_adapter_fits(p->weight, adapter);
        p->adapter = std::move(adapter);
    }
    if (!r.at_end()) throw ValidationError("trailing bytes after adapter records");
}

/// key=value lines for every ModelConfig field.
inline std::string config_to_text(const ModelConfig& c) {
    std::ostringstream out;
    out << "num_layers=" << c.num_layers << "\n"
        << "d_model=" << c.d_model << "\n"
        << "num_heads=" << c.num_heads << "\n"
        << "d_ff=" << c.d_ff << "\n"
        << "vocab_size=" << c.vocab_size << "\n"
        << "max_seq_len=" << c.max_seq_len << "\n"
        << "quant_mode=" << to_string(c.quant_mode) << "\n"
        << "quant_block_size=" << c.quant_block_size << "\n"
        << "lora_rank=" << c.lora_rank << "\n"
        << "lora_alpha=" << c.lora_alpha << "\n"
        << "lora_dropout=" << c.lora_dropout << "\n"
        << "seed=" << c.seed << "\n";
    return out.str();
}

}  // namespace qlora
