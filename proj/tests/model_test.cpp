#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "qlora/model.hpp"
#include "qlora/train.hpp"

namespace qlora {
namespace {

ModelConfig small_config(std::uint32_t seed = 1) {
    ModelConfig c;
    c.num_layers = 1;
    c.d_model = 16;
    c.num_heads = 2;
    c.d_ff = 32;
    c.max_seq_len = 48;
    c.lora_rank = 4;
    c.lora_dropout = 0.0;
    c.quant_block_size = 16;
    c.seed = seed;
    return c;
}

TokenSeq random_sequence(std::size_t n, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::uint32_t> byte(0, 255);
    TokenSeq s;
    s.ids.push_back(kBos);
    for (std::size_t i = 1; i < n; ++i) s.ids.push_back(byte(rng));
    s.loss_mask.assign(n, true);
    s.loss_mask[0] = false;
    return s;
}

void randomize_b(Model& model, double stddev, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, stddev);
    for (auto* p : model.projections())
        for (double& v : p->adapter.b.flat()) v = normal(rng);
}

void zero_lm_head(Model& model) {
    model.lm_head.weight = quantize_tensor(Matrix(model.config.vocab_size, model.config.d_model),
                                           model.config.quant_block_size, model.config.quant_mode);
    model.lm_head.adapter.b = Matrix(model.lm_head.adapter.b.rows(), model.lm_head.adapter.b.cols());
}

// --- tokenizer ---

TEST(Tokenizer, EmptyText) {
    EXPECT_EQ(tokenize("").ids, (std::vector<std::uint32_t>{kBos, kEos}));
}

TEST(Tokenizer, ByteValues) {
    EXPECT_EQ(tokenize("ab").ids, (std::vector<std::uint32_t>{kBos, 97, 98, kEos}));
}

TEST(Tokenizer, RoundTripsRandomUtf8) {
    std::mt19937_64 rng(3);
    const std::vector<std::string> pieces = {"a", "Z", " ", "\n", "\xc3\xa9", "\xe2\x82\xac", "\xf0\x9f\x98\x80", "7"};
    for (int i = 0; i < 100; ++i) {
        std::string text;
        const std::size_t len = std::uniform_int_distribution<std::size_t>(0, 30)(rng);
        for (std::size_t k = 0; k < len; ++k) text += pieces[rng() % pieces.size()];
        EXPECT_EQ(detokenize(tokenize(text).ids), text);
    }
}

TEST(Tokenizer, PairMasksCompletionAndEos) {
    const TokenSeq s = tokenize_pair("hi", "ok");
    EXPECT_EQ(s.ids, (std::vector<std::uint32_t>{kBos, 'h', 'i', 'o', 'k', kEos}));
    EXPECT_EQ(s.loss_mask, (std::vector<bool>{false, false, false, true, true, true}));
}

// --- build ---

TEST(BuildModel, RejectsInvalidConfig) {
    ModelConfig c;
    c.num_heads = 3;
    EXPECT_THROW(build_model(c), ValidationError);
    c = ModelConfig{};
    c.vocab_size = 300;
    EXPECT_THROW(build_model(c), ValidationError);
    c = ModelConfig{};
    c.max_seq_len = 1;
    EXPECT_THROW(build_model(c), ValidationError);
}

TEST(BuildModel, SameSeedGivesIdenticalCheckpoint) {
    EXPECT_EQ(serialize_model(build_model(ModelConfig{})), serialize_model(build_model(ModelConfig{})));
    ModelConfig other;
    other.seed = 1;
    EXPECT_NE(serialize_model(build_model(ModelConfig{})), serialize_model(build_model(other)));
}

TEST(BuildModel, AdaptersOnExactlyTheTargetModules) {
    const Model m = build_model(small_config());
    const auto names = m.projection_names();
    ASSERT_EQ(names.size(), 8u);
    for (std::size_t i = 0; i < names.size(); ++i) {
        const std::string module = names[i].substr(names[i].rfind('.') + 1);
        EXPECT_EQ(module, target_modules()[i]);
    }
    for (const auto* p : m.projections()) EXPECT_EQ(p->adapter.b, Matrix(p->adapter.b.rows(), p->adapter.b.cols()));
}

TEST(BuildModel, ParameterCountsFollowFormulas) {
    const ModelConfig c;
    const Model m = build_model(c);
    const std::size_t d = c.d_model, f = c.d_ff, r = c.lora_rank, v = c.vocab_size;
    const std::size_t per_layer_adapters = 4 * r * (d + d) + 2 * r * (d + f) + r * (f + d);
    const std::size_t adapters = c.num_layers * per_layer_adapters + r * (d + v);
    std::size_t summed = 0;
    for (const auto* p : m.projections()) summed += p->adapter.rank() * (p->adapter.in_dim() + p->adapter.out_dim());
    EXPECT_EQ(total_adapter_params(m), adapters);
    EXPECT_EQ(total_adapter_params(m), summed);

    const std::size_t projections = c.num_layers * (4 * d * d + 3 * d * f) + v * d;
    const std::size_t base = projections + v * d + c.max_seq_len * d + c.num_layers * 2 * d;
    EXPECT_EQ(total_base_params(m), base);
    EXPECT_GT(total_adapter_params(m), 0u);
    EXPECT_LT(total_adapter_params(m), total_base_params(m) / 5);
}

// --- forward ---

TEST(Forward, LogitsShape) {
    const Model m = build_model(ModelConfig{});
    std::mt19937_64 rng(0);
    const auto out = forward(m, {tokenize("")}, false, rng);
    EXPECT_EQ(out.logits.batch, 1u);
    EXPECT_EQ(out.logits.seq, 2u);
    EXPECT_EQ(out.logits.vocab, 259u);
    EXPECT_FALSE(out.tape.has_value());
}

TEST(Forward, RejectsOverlengthSequence) {
    const Model m = build_model(small_config());
    std::mt19937_64 rng(0);
    EXPECT_THROW(forward(m, {tokenize(std::string(60, 'x'))}, false, rng), ValidationError);
}

TEST(Forward, CausalMaskingIsExact) {
    Model m = build_model(small_config());
    randomize_b(m, 0.1, 5);
    std::mt19937_64 rng(1);
    for (int trial = 0; trial < 10; ++trial) {
        TokenSeq a = random_sequence(12, rng);
        const std::size_t j = 1 + rng() % 11;
        TokenSeq b = a;
        b.ids[j] = (a.ids[j] + 1) % 256;
        const auto la = forward(m, {a}, false, rng).logits;
        const auto lb = forward(m, {b}, false, rng).logits;
        for (std::size_t t = 0; t < j; ++t) {
            const auto ra = la.at(0, t), rb = lb.at(0, t);
            EXPECT_TRUE(std::equal(ra.begin(), ra.end(), rb.begin())) << "position " << t << " saw token " << j;
        }
        const auto ra = la.at(0, j), rb = lb.at(0, j);
        EXPECT_FALSE(std::equal(ra.begin(), ra.end(), rb.begin()));
    }
}

TEST(Forward, ZeroLmHeadGivesZeroLogits) {
    Model m = build_model(small_config());
    zero_lm_head(m);
    std::mt19937_64 rng(2);
    const auto out = forward(m, {random_sequence(9, rng)}, false, rng);
    for (double v : out.logits.values) EXPECT_EQ(v, 0.0);
}

TEST(Forward, FreshModelMatchesDenseReference) {
    std::mt19937_64 rng(3);
    for (std::uint32_t seed : {0u, 7u}) {
        ModelConfig c;
        c.seed = seed;
        c.max_seq_len = 32;
        const Model m = build_model(c);
        const auto dense = oracle::dense_copy(m, [](const Projection& p) { return dequantize(p.weight); });
        for (int trial = 0; trial < 3; ++trial) {
            const TokenSeq s = random_sequence(1 + rng() % 20, rng);
            const auto got = forward(m, {s}, true, rng).logits;
            const auto expected = oracle::dense_forward(dense, s.ids);
            double worst = 0.0, peak = 0.0;
            for (std::size_t t = 0; t < s.ids.size(); ++t)
                for (std::size_t v = 0; v < 259; ++v) {
                    worst = std::max(worst, std::abs(got.at(0, t)[v] - expected[t][v]));
                    peak = std::max(peak, std::abs(expected[t][v]));
                }
            EXPECT_LE(worst / peak, 1e-6);
        }
    }
}

TEST(Forward, TrainedAdaptersMatchDenseMergedReference) {
    Model m = build_model(small_config());
    randomize_b(m, 0.1, 6);
    const auto dense = oracle::dense_copy(m, [](const Projection& p) { return merge_adapter(p.weight, p.adapter); });
    std::mt19937_64 rng(4);
    const TokenSeq s = random_sequence(15, rng);
    const auto got = forward(m, {s}, false, rng).logits;
    const auto expected = oracle::dense_forward(dense, s.ids);
    double worst = 0.0, peak = 0.0;
    for (std::size_t t = 0; t < s.ids.size(); ++t)
        for (std::size_t v = 0; v < 259; ++v) {
            worst = std::max(worst, std::abs(got.at(0, t)[v] - expected[t][v]));
            peak = std::max(peak, std::abs(expected[t][v]));
        }
    EXPECT_LE(worst / peak, 1e-5);
}

TEST(Forward, PaddedPositionsAreZero) {
    const Model m = build_model(small_config());
    std::mt19937_64 rng(5);
    const auto out = forward(m, {tokenize("a"), tokenize("abcd")}, false, rng).logits;
    EXPECT_EQ(out.seq, 6u);
    for (std::size_t t = 3; t < 6; ++t)
        for (double v : out.at(0, t)) EXPECT_EQ(v, 0.0);
}

// --- loss ---

TEST(LmLoss, UniformLogitsGiveLogVocab) {
    Model m = build_model(small_config());
    zero_lm_head(m);
    std::mt19937_64 rng(6);
    const std::vector<TokenSeq> batch = {tokenize_pair("q", "abc"), random_sequence(7, rng)};
    EXPECT_NEAR(lm_loss(forward(m, batch, false, rng).logits, batch), std::log(259.0), 1e-12);
}

TEST(LmLoss, DecreasesWithMargin) {
    const TokenSeq s = tokenize_pair("", "a");
    std::vector<double> losses;
    for (double margin : {5.0, 10.0, 20.0}) {
        Logits l;
        l.batch = 1;
        l.seq = s.size();
        l.vocab = 259;
        l.values.assign(l.seq * l.vocab, 0.0);
        for (std::size_t t = 0; t + 1 < s.size(); ++t) l.at(0, t)[s.ids[t + 1]] = margin;
        losses.push_back(lm_loss(l, {s}));
        EXPECT_NEAR(losses.back(), std::log1p(258.0 * std::exp(-margin)), 1e-12);
    }
    EXPECT_GT(losses[0], losses[1]);
    EXPECT_GT(losses[1], losses[2]);
}

TEST(LmLoss, DuplicatedBatchKeepsMean) {
    Model m = build_model(small_config());
    randomize_b(m, 0.1, 7);
    std::mt19937_64 rng(7);
    const std::vector<TokenSeq> one = {tokenize_pair("xy", "zz"), random_sequence(5, rng)};
    std::vector<TokenSeq> two = one;
    two.insert(two.end(), one.begin(), one.end());
    const double a = lm_loss(forward(m, one, false, rng).logits, one);
    const double b = lm_loss(forward(m, two, false, rng).logits, two);
    EXPECT_NEAR(a, b, 1e-12);
}

TEST(LmLoss, RejectsEmptyMask) {
    const Model m = build_model(small_config());
    std::mt19937_64 rng(8);
    const std::vector<TokenSeq> batch = {tokenize("abc")};
    EXPECT_THROW(lm_loss(forward(m, batch, false, rng).logits, batch), ValidationError);
}

// --- backward ---

TEST(Backward, MatchesFiniteDifferences) {
    Model m = build_model(small_config(5));
    randomize_b(m, 0.05, 9);
    const std::vector<TokenSeq> batch = {tokenize_pair("ab", "cd"), tokenize_pair("hello", "x")};
    std::mt19937_64 rng(1);
    auto fwd = forward(m, batch, true, rng);
    const Gradients grads = backward(*fwd.tape);
    auto projections = m.projections();
    std::size_t checked = 0;
    for (std::size_t i = 0; i < projections.size(); ++i) {
        for (int which = 0; which < 2; ++which) {
            Matrix& param = which ? projections[i]->adapter.b : projections[i]->adapter.a;
            const Matrix& grad = which ? grads.adapters[i].b : grads.adapters[i].a;
            // Every fourth coordinate keeps the unit test quick; the acceptance run checks all.
            for (std::size_t k = 0; k < param.size(); k += 4) {
                const double g = grad.flat()[k];
                if (std::abs(g) <= 1e-8) continue;
                const double orig = param.flat()[k];
                const double h = 1e-4;
                param.flat()[k] = orig + h;
                const double up = lm_loss(forward(m, batch, false, rng).logits, batch);
                param.flat()[k] = orig - h;
                const double down = lm_loss(forward(m, batch, false, rng).logits, batch);
                param.flat()[k] = orig;
                EXPECT_LE(std::abs((up - down) / (2 * h) - g) / std::abs(g), 1e-3)
                    << m.projection_names()[i] << (which ? ".B" : ".A") << "[" << k << "]";
                ++checked;
            }
        }
    }
    EXPECT_GT(checked, 100u);
}

TEST(Backward, AGradientIsZeroAtInit) {
    const Model m = build_model(small_config());
    const std::vector<TokenSeq> batch = {tokenize_pair("ab", "cd")};
    std::mt19937_64 rng(1);
    auto fwd = forward(m, batch, true, rng);
    const Gradients grads = backward(*fwd.tape);
    bool any_b = false;
    for (const auto& g : grads.adapters) {
        EXPECT_EQ(g.a, Matrix(g.a.rows(), g.a.cols()));
        any_b = any_b || max_abs(g.b) > 0.0;
    }
    EXPECT_TRUE(any_b);
}

TEST(Backward, DisconnectedAdapterHasZeroGradient) {
    // A zero lm_head base and B make the lm_head input irrelevant, so no layer adapter matters.
    Model m = build_model(small_config());
    randomize_b(m, 0.1, 10);
    zero_lm_head(m);
    const std::vector<TokenSeq> batch = {tokenize_pair("ab", "cd")};
    std::mt19937_64 rng(1);
    auto fwd = forward(m, batch, true, rng);
    const Gradients grads = backward(*fwd.tape);
    for (std::size_t i = 0; i + 1 < grads.adapters.size(); ++i) {
        EXPECT_EQ(grads.adapters[i].a, Matrix(grads.adapters[i].a.rows(), grads.adapters[i].a.cols()));
        EXPECT_EQ(grads.adapters[i].b, Matrix(grads.adapters[i].b.rows(), grads.adapters[i].b.cols()));
    }
}

TEST(Backward, TapeCannotBeReused) {
    const Model m = build_model(small_config());
    const std::vector<TokenSeq> batch = {tokenize_pair("ab", "cd")};
    std::mt19937_64 rng(1);
    auto fwd = forward(m, batch, true, rng);
    backward(*fwd.tape);
    EXPECT_TRUE(fwd.tape->consumed());
    EXPECT_THROW(backward(*fwd.tape), Error);
}

// --- generation and perplexity ---

TEST(Generate, ZeroBudgetIsEmpty) {
    EXPECT_EQ(generate(build_model(small_config()), "abc", 0), "");
}

TEST(Generate, GreedyIsDeterministic) {
    Model m = build_model(small_config());
    randomize_b(m, 0.2, 11);
    EXPECT_EQ(generate(m, "Hello", 20), generate(m, "Hello", 20));
}

TEST(Generate, SeededSamplingIsDeterministic) {
    const Model m = build_model(small_config());
    GenerateOptions opts;
    opts.greedy = false;
    opts.temperature = 0.8;
    opts.seed = 4;
    EXPECT_EQ(generate(m, "Hi", 20, opts), generate(m, "Hi", 20, opts));
    opts.temperature = 0.0;
    EXPECT_THROW(generate(m, "Hi", 5, opts), ValidationError);
}

TEST(Generate, RejectsBudgetBeyondContext) {
    EXPECT_THROW(generate(build_model(small_config()), std::string(40, 'a'), 10), ValidationError);
}

TEST(Generate, RecallsMemorizedAnswer) {
    ModelConfig c = small_config(2);
    c.d_model = 32;
    c.d_ff = 64;
    c.lora_rank = 8;
    Model m = build_model(c);
    const std::vector<TokenSeq> batch = {tokenize_pair("Q:", "yes")};
    TrainConfig cfg;
    cfg.learning_rate = 1e-2;
    AdamOptimizer opt(cfg);
    std::mt19937_64 rng(0);
    double loss = 0.0;
    for (std::size_t step = 1; step <= 150; ++step) {
        auto fwd = forward(m, batch, true, rng);
        Gradients g = backward(*fwd.tape);
        loss = g.loss;
        opt.step(m, g, step);
    }
    EXPECT_LT(loss, 0.01);
    EXPECT_EQ(generate(m, "Q:", 10), "yes");
}

TEST(Perplexity, ZeroLogitsGiveVocabSize) {
    Model m = build_model(small_config());
    zero_lm_head(m);
    EXPECT_NEAR(perplexity(m, {"", "abc", "hello world"}), 259.0, 1e-9);
}

TEST(Perplexity, InvariantToDuplication) {
    Model m = build_model(small_config());
    randomize_b(m, 0.1, 12);
    const std::vector<std::string> corpus = {"one", "two words", "x"};
    std::vector<std::string> doubled = corpus;
    doubled.insert(doubled.end(), corpus.begin(), corpus.end());
    EXPECT_NEAR(perplexity(m, corpus), perplexity(m, doubled), 1e-12);
    EXPECT_THROW(perplexity(m, {}), ValidationError);
}

// --- checkpoints ---

TEST(Checkpoint, RoundTripsBitExactly) {
    Model m = build_model(small_config());
    randomize_b(m, 0.1, 13);
    for (auto* p : m.projections())
        for (double& v : p->adapter.b.flat()) v = static_cast<float>(v);
    const auto bytes = serialize_model(m);
    const Model back = deserialize_model(bytes);
    EXPECT_EQ(serialize_model(back), bytes);
    std::mt19937_64 rng(0);
    const std::vector<TokenSeq> batch = {tokenize("checkpoint")};
    EXPECT_EQ(forward(m, batch, false, rng).logits.values, forward(back, batch, false, rng).logits.values);
}

TEST(Checkpoint, RejectsTruncationAndBadMagic) {
    auto bytes = serialize_model(build_model(small_config()));
    std::vector<std::uint8_t> cut(bytes.begin(), bytes.end() - 3);
    EXPECT_THROW(deserialize_model(cut), ValidationError);
    bytes[0] = 'X';
    EXPECT_THROW(deserialize_model(bytes), ValidationError);
}

TEST(Checkpoint, AdapterRecordsReload) {
    Model trained = build_model(small_config());
    randomize_b(trained, 0.1, 14);
    for (auto* p : trained.projections())
        for (double& v : p->adapter.b.flat()) v = static_cast<float>(v);
    Model fresh = build_model(small_config());
    load_adapters(fresh, serialize_adapters(trained));
    EXPECT_EQ(serialize_model(fresh), serialize_model(trained));
}

TEST(FrozenBase, TrainingLeavesQuantizedTensorsUntouched) {
    Model m = build_model(small_config());
    const auto base_before = serialize_base(m);
    const auto adapters_before = serialize_adapters(m);
    TrainConfig cfg;
    cfg.learning_rate = 1e-3;
    AdamOptimizer opt(cfg);
    std::mt19937_64 rng(0);
    const std::vector<TokenSeq> batch = {tokenize_pair("a", "b"), tokenize_pair("cc", "dd")};
    for (std::size_t step = 1; step <= 5; ++step) {
        auto fwd = forward(m, batch, true, rng);
        Gradients g = backward(*fwd.tape);
        opt.step(m, g, step);
    }
    EXPECT_EQ(serialize_base(m), base_before);
    EXPECT_NE(serialize_adapters(m), adapters_before);
}

}  // namespace
}  // namespace qlora
