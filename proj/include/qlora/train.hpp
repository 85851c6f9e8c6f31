#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "qlora/data.hpp"
#include "qlora/error.hpp"
#include "qlora/model.hpp"

namespace qlora {

struct TrainConfig {
    double learning_rate = 5e-5;
    std::size_t batch_size = 4;
    std::size_t max_steps = 2000;
    std::size_t checkpoint_every = 200;
    std::uint32_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    std::optional<double> grad_clip_norm;

    void validate() const {
        if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
            throw ValidationError("learning_rate must be > 0");
        if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
        if (max_steps < 1) throw ValidationError("max_steps must be >= 1");
        if (checkpoint_every < 1) throw ValidationError("checkpoint_every must be >= 1");
        if (!(beta1 >= 0.0 && beta1 < 1.0)) throw ValidationError("beta1 must be in [0, 1)");
        if (!(beta2 >= 0.0 && beta2 < 1.0)) throw ValidationError("beta2 must be in [0, 1)");
        if (!(epsilon > 0.0)) throw ValidationError("epsilon must be > 0");
        if (grad_clip_norm && !(*grad_clip_norm > 0.0)) throw ValidationError("grad_clip_norm must be > 0");
    }
};

struct SplitRatios {
    double train_frac = 0.8;
    double val_frac = 0.1;
    double test_frac = 0.1;

    void validate() const {
        if (train_frac < 0.0 || val_frac < 0.0 || test_frac < 0.0)
            throw ValidationError("split ratios must be nonnegative");
        const double sum = train_frac + val_frac + test_frac;
        if (std::abs(sum - 1.0) > 1e-9) {
            std::ostringstream msg;
            msg << "split ratios must sum to 1 (got " << sum << ")";
            throw ValidationError(msg.str());
        }
    }
};

struct DatasetSplit {
    Dataset train;
    Dataset val;
    Dataset test;
};

/// Seeded shuffle, then contiguous cut: floor(train_frac*n) train, floor(val_frac*n) val, rest test.
inline DatasetSplit split_dataset(const Dataset& data, const SplitRatios& ratios, std::uint64_t seed) {
    ratios.validate();
    const std::size_t n = data.size();
    if (n < 10) throw ValidationError("dataset too small to split (" + std::to_string(n) + " < 10)");
    // The epsilon keeps products such as 0.1 * 7750 = 775.0000000000001 or 774.9999999 on the right side.
    const auto floor_count = [n](double frac) {
        return static_cast<std::size_t>(std::floor(frac * static_cast<double>(n) + 1e-9));
    };
    const std::size_t n_train = floor_count(ratios.train_frac);
    const std::size_t n_val = std::min(floor_count(ratios.val_frac), n - n_train);

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    DatasetSplit split;
    split.train.task = split.val.task = split.test.task = data.task;
    for (std::size_t i = 0; i < n; ++i) {
        Dataset& dst = i < n_train ? split.train : (i < n_train + n_val ? split.val : split.test);
        dst.examples.push_back(data.examples[order[i]]);
    }
    return split;
}

// ---------------------------------------------------------------------------------------------
// Optimizer

struct AdamMoments {
    std::vector<double> m;
    std::vector<double> v;
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(std::span<double> params, std::span<const double> grads, AdamMoments& state, std::size_t t,
                      const TrainConfig& cfg, std::string_view name = "parameter") {
    if (params.size() != grads.size())
        throw ValidationError("adam_step: gradient size mismatch for " + std::string(name));
    if (t < 1) throw ValidationError("adam_step: step must be >= 1");
    for (double g : grads)
        if (!std::isfinite(g)) throw Error("non-finite gradient for " + std::string(name));
    if (state.m.empty()) {
        state.m.assign(params.size(), 0.0);
        state.v.assign(params.size(), 0.0);
    }
    if (state.m.size() != params.size()) throw ValidationError("adam_step: state size mismatch for " + std::string(name));
    const double bias1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double bias2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        const double m_hat = state.m[i] / bias1;
        const double v_hat = state.v[i] / bias2;
        params[i] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
}

/// Adam over every adapter matrix of a model (A then B per projection, canonical order).
class AdamOptimizer {
public:
    explicit AdamOptimizer(TrainConfig cfg) : cfg_(std::move(cfg)) {}

    void step(Model& model, Gradients& grads, std::size_t t) {
        auto projections = model.projections();
        if (grads.adapters.size() != projections.size())
            throw ValidationError("gradient set does not match the model's adapters");
        if (cfg_.grad_clip_norm) clip(grads, *cfg_.grad_clip_norm);
        if (state_.empty()) state_.resize(2 * projections.size());
        const auto names = model.projection_names();
        for (std::size_t i = 0; i < projections.size(); ++i) {
            auto& adapter = projections[i]->adapter;
            adam_step(adapter.a.flat(), grads.adapters[i].a.flat(), state_[2 * i], t, cfg_, names[i] + ".A");
            adam_step(adapter.b.flat(), grads.adapters[i].b.flat(), state_[2 * i + 1], t, cfg_, names[i] + ".B");
        }
    }

private:
    static void clip(Gradients& grads, double max_norm) {
        double sq = 0.0;
        for (const auto& g : grads.adapters) {
            for (double v : g.a.flat()) sq += v * v;
            for (double v : g.b.flat()) sq += v * v;
        }
        const double norm = std::sqrt(sq);
        if (norm <= max_norm) return;
        const double factor = max_norm / norm;
        for (auto& g : grads.adapters) {
            for (double& v : g.a.flat()) v *= factor;
            for (double& v : g.b.flat()) v *= factor;
        }
    }

    TrainConfig cfg_;
    std::vector<AdamMoments> state_;
};

// ---------------------------------------------------------------------------------------------
// Fine-tuning loop

struct CurvePoint {
    std::size_t step = 0;
    double loss = 0.0;

    bool operator==(const CurvePoint&) const = default;
};

struct CheckpointRef {
    std::size_t step = 0;
    std::string path;  ///< empty when training ran without an output directory

    bool operator==(const CheckpointRef&) const = default;
};

struct FinetuneReport {
    std::vector<CurvePoint> loss_curve;
    std::vector<CurvePoint> val_curve;
    std::size_t best_step = 0;
    std::vector<CheckpointRef> checkpoints;
    double wall_time_s = 0.0;
};

class TrainingDiverged : public Error {
public:
    TrainingDiverged(const std::string& what, std::optional<CheckpointRef> last_good)
        : Error(what), last_good_(std::move(last_good)) {}
    const std::optional<CheckpointRef>& last_good() const noexcept { return last_good_; }

private:
    std::optional<CheckpointRef> last_good_;
};

inline std::vector<TokenSeq> encode_examples(const Dataset& data) {
    std::vector<TokenSeq> out;
    out.reserve(data.size());
    for (const auto& ex : data.examples) out.push_back(tokenize_pair(build_prompt(ex, data.task), ex.answer));
    return out;
}

/// Token-averaged loss over the supervised positions of every sequence; dropout off.
inline double mean_supervised_loss(const Model& model, const std::vector<TokenSeq>& seqs) {
    double total = 0.0;
    std::size_t count = 0;
    std::vector<double> column(model.config.vocab_size);
    for (const auto& s : seqs) {
        const Matrix logits = detail::sequence_logits(model, s.ids, false, nullptr, nullptr);
        for (std::size_t t = 0; t + 1 < s.ids.size(); ++t) {
            if (!s.loss_mask[t + 1] || s.ids[t + 1] == kPad) continue;
            for (std::size_t v = 0; v < column.size(); ++v) column[v] = logits(v, t);
            total += detail::log_sum_exp(column) - column[s.ids[t + 1]];
            ++count;
        }
    }
    if (count == 0) throw ValidationError("no supervised tokens");
    return total / static_cast<double>(count);
}

inline std::string train_config_to_text(const TrainConfig& cfg) {
    std::ostringstream out;
    out.precision(17);
    out << "learning_rate=" << cfg.learning_rate << "\n"
        << "batch_size=" << cfg.batch_size << "\n"
        << "max_steps=" << cfg.max_steps << "\n"
        << "checkpoint_every=" << cfg.checkpoint_every << "\n"
        << "train_seed=" << cfg.seed << "\n"
        << "beta1=" << cfg.beta1 << "\n"
        << "beta2=" << cfg.beta2 << "\n"
        << "epsilon=" << cfg.epsilon << "\n";
    if (cfg.grad_clip_norm) out << "grad_clip_norm=" << *cfg.grad_clip_norm << "\n";
    return out.str();
}

inline nlohmann::ordered_json report_to_json(const FinetuneReport& report) {
    nlohmann::ordered_json j;
    auto curve = [](const std::vector<CurvePoint>& points) {
        nlohmann::ordered_json arr = nlohmann::ordered_json::array();
        for (const auto& p : points) arr.push_back({p.step, p.loss});
        return arr;
    };
    j["loss_curve"] = curve(report.loss_curve);
    j["val_curve"] = curve(report.val_curve);
    j["best_step"] = report.best_step;
    j["wall_time_s"] = report.wall_time_s;
    return j;
}

/// Checkpoint with the lowest validation loss; ties go to the earliest step.
inline CheckpointRef select_best(const FinetuneReport& report) {
    if (report.val_curve.empty()) throw ValidationError("select_best: empty validation curve");
    const CurvePoint* best = &report.val_curve.front();
    for (const auto& p : report.val_curve)
        if (p.loss < best->loss) best = &p;
    for (const auto& c : report.checkpoints)
        if (c.step == best->step) return c;
    return {best->step, {}};
}

namespace detail {

inline std::vector<LoraAdapter> snapshot_adapters(const Model& model) {
    std::vector<LoraAdapter> out;
    for (const auto* p : model.projections()) out.push_back(p->adapter);
    return out;
}

inline void restore_adapters(Model& model, const std::vector<LoraAdapter>& snapshot) {
    auto projections = model.projections();
    for (std::size_t i = 0; i < projections.size(); ++i) projections[i]->adapter = snapshot[i];
}

inline std::uint64_t derive_seed(std::uint32_t seed, std::uint32_t stream) {
    std::seed_seq seq{seed, stream, 0x5452414eu};
    std::uint32_t out[2];
    seq.generate(out, out + 2);
    return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

}  // namespace detail

/// Runs exactly cfg.max_steps Adam steps on adapter parameters. Validation loss is recorded every
/// checkpoint_every steps and at the final step; when `output_dir` is set each of those points writes
/// step-<N>/adapters.bin and step-<N>/config.txt, and report.json is written at the end.
inline FinetuneReport finetune(Model& model, const Dataset& train_set, const Dataset& val_set, const TrainConfig& cfg,
                               const std::optional<std::string>& output_dir = std::nullopt) {
    cfg.validate();
    if (train_set.size() == 0) throw ValidationError("finetune: empty train set");
    if (val_set.size() == 0) throw ValidationError("finetune: empty validation set");
    const auto started = std::chrono::steady_clock::now();

    const std::vector<TokenSeq> train_seqs = encode_examples(train_set);
    const std::vector<TokenSeq> val_seqs = encode_examples(val_set);
    for (const auto& s : train_seqs) {
        if (s.size() > model.config.max_seq_len)
            throw ValidationError("training example of " + std::to_string(s.size()) + " tokens exceeds max_seq_len");
    }

    std::mt19937_64 shuffle_rng(detail::derive_seed(cfg.seed, 1));
    std::mt19937_64 dropout_rng(detail::derive_seed(cfg.seed, 2));
    std::vector<std::size_t> order(train_seqs.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::size_t cursor = 0;

    if (output_dir) std::filesystem::create_directories(*output_dir);

    AdamOptimizer optimizer(cfg);
    FinetuneReport report;
    std::vector<LoraAdapter> last_good = detail::snapshot_adapters(model);
    std::optional<CheckpointRef> last_checkpoint;

    for (std::size_t step = 1; step <= cfg.max_steps; ++step) {
        std::vector<TokenSeq> batch;
        batch.reserve(cfg.batch_size);
        while (batch.size() < cfg.batch_size) {
            if (cursor == order.size()) {
                std::shuffle(order.begin(), order.end(), shuffle_rng);
                cursor = 0;
            }
            batch.push_back(train_seqs[order[cursor++]]);
        }

        ForwardResult fwd = forward(model, batch, true, dropout_rng);
        Gradients grads = backward(*fwd.tape);
        if (!std::isfinite(grads.loss)) {
            detail::restore_adapters(model, last_good);
            throw TrainingDiverged("non-finite training loss at step " + std::to_string(step), last_checkpoint);
        }
        optimizer.step(model, grads, step);
        report.loss_curve.push_back({step, grads.loss});

        if (step % cfg.checkpoint_every == 0 || step == cfg.max_steps) {
            const double val_loss = mean_supervised_loss(model, val_seqs);
            if (!std::isfinite(val_loss)) {
                detail::restore_adapters(model, last_good);
                throw TrainingDiverged("non-finite validation loss at step " + std::to_string(step), last_checkpoint);
            }
            report.val_curve.push_back({step, val_loss});
            CheckpointRef ref{step, {}};
            if (output_dir) {
                const auto dir = std::filesystem::path(*output_dir) / ("step-" + std::to_string(step));
                std::filesystem::create_directories(dir);
                io::write_file((dir / "adapters.bin").string(), serialize_adapters(model));
                std::ofstream config_out(dir / "config.txt", std::ios::trunc);
                config_out << config_to_text(model.config) << train_config_to_text(cfg);
                ref.path = dir.string();
            }
            report.checkpoints.push_back(ref);
            last_checkpoint = ref;
            last_good = detail::snapshot_adapters(model);
        }
    }

    report.best_step = select_best(report).step;
    report.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    if (output_dir) {
        std::ofstream out(std::filesystem::path(*output_dir) / "report.json", std::ios::trunc);
        out << report_to_json(report).dump(2) << "\n";
    }
    return report;
}

}  // namespace qlora
