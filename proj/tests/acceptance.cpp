// End-to-end acceptance checks. Prints one PASS/FAIL line per check and exits non-zero if any
// check fails.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "qlora/qlora.hpp"

namespace {

using namespace qlora;
namespace fs = std::filesystem;

struct Outcome {
    bool pass = true;
    std::string detail;
};

class Timer {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

std::string fmt(double v) {
    std::ostringstream s;
    s.precision(4);
    s << v;
    return s.str();
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

// Largest |got - expected| over the largest |expected|, across every position and vocabulary entry.
double logits_deviation(const Logits& got, std::size_t row, const std::vector<std::vector<double>>& expected) {
    double worst = 0.0, peak = 0.0;
    for (std::size_t t = 0; t < expected.size(); ++t)
        for (std::size_t v = 0; v < expected[t].size(); ++v) {
            worst = std::max(worst, std::abs(got.at(row, t)[v] - expected[t][v]));
            peak = std::max(peak, std::abs(expected[t][v]));
        }
    return peak > 0 ? worst / peak : worst;
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

// --- 1 ---
Outcome quantization_round_trip() {
    Timer timer;
    std::mt19937_64 rng(101);
    const Matrix m = oracle::random_matrix(1000, 64, rng, -2.0, 2.0);
    Outcome o;
    std::size_t violations = 0;
    for (QuantMode mode : {QuantMode::LinearAbsmax4, QuantMode::NF4, QuantMode::LinearAbsmax8}) {
        const auto q = quantize_tensor(m, 64, mode);
        const Matrix d = dequantize(q);
        // Largest gap between adjacent unit levels; NF4 has no closed form so take it from the codebook.
        double gap = 0.0;
        if (mode == QuantMode::LinearAbsmax4) gap = 1.0 / 7.0;
        else if (mode == QuantMode::LinearAbsmax8) gap = 1.0 / 127.0;
        else {
            const auto levels = oracle::nf4_levels();
            for (std::size_t i = 1; i < levels.size(); ++i) gap = std::max(gap, levels[i] - levels[i - 1]);
        }
        for (std::size_t b = 0; b < 1000; ++b) {
            const double scale = q.blocks()[b].scale;
            for (std::size_t i = 0; i < 64; ++i)
                violations += std::abs(m(b, i) - d(b, i)) > scale * gap / 2.0 * (1.0 + 1e-12);
        }
        if (!(quantize_tensor(d, 64, mode) == q)) {
            o.pass = false;
            o.detail += std::string(to_string(mode)) + " requantization differs; ";
        }
    }
    const double secs = timer.seconds();
    if (violations > 0) o.pass = false;
    if (secs >= 5.0) o.pass = false;
    o.detail += std::to_string(violations) + " bound violations, " + fmt(secs) + " s";
    return o;
}

// --- 2 ---
Outcome fused_kernel() {
    std::mt19937_64 rng(202);
    std::uniform_int_distribution<std::size_t> dim(1, 64), batch(1, 8);
    const std::array<QuantMode, 3> modes = {QuantMode::LinearAbsmax4, QuantMode::NF4, QuantMode::LinearAbsmax8};
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::size_t out = dim(rng), in = dim(rng), b = batch(rng);
        const auto q = quantize_tensor(oracle::random_matrix(out, in, rng), 64, modes[trial % 3]);
        const Matrix x = oracle::random_matrix(in, b, rng);
        worst = std::max(worst, max_relative_deviation(quant_matmul(q, x), oracle::dense_matmul(dequantize(q), x)));
    }
    return {worst <= 1e-6, "max relative deviation " + fmt(worst)};
}

// --- 3 ---
Outcome zero_init_neutrality() {
    std::mt19937_64 rng(303);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        ModelConfig c;
        c.seed = static_cast<std::uint32_t>(trial);
        const Model m = build_model(c);
        const auto dense = oracle::dense_copy(m, [](const Projection& p) { return dequantize(p.weight); });
        std::vector<TokenSeq> batch;
        for (int i = 0; i < 2; ++i) batch.push_back(random_sequence(1 + rng() % 24, rng));
        const auto logits = forward(m, batch, false, rng).logits;
        for (std::size_t i = 0; i < batch.size(); ++i)
            worst = std::max(worst, logits_deviation(logits, i, oracle::dense_forward(dense, batch[i].ids)));
    }
    return {worst <= 1e-6, "max relative deviation " + fmt(worst)};
}

// --- 4 ---
Outcome merge_equivalence() {
    std::mt19937_64 rng(404);
    std::normal_distribution<double> normal(0.0, 0.1);
    double worst = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        ModelConfig c;
        c.num_layers = 1 + trial % 2;
        c.lora_dropout = 0.0;
        c.seed = static_cast<std::uint32_t>(1000 + trial);
        Model m = build_model(c);
        for (auto* p : m.projections())
            for (double& v : p->adapter.b.flat()) v = normal(rng);
        const auto merged =
            oracle::dense_copy(m, [](const Projection& p) { return merge_adapter(p.weight, p.adapter); });
        const TokenSeq s = random_sequence(1 + rng() % 24, rng);
        worst = std::max(worst, logits_deviation(forward(m, {s}, false, rng).logits, 0,
                                                 oracle::dense_forward(merged, s.ids)));
    }
    return {worst <= 1e-5, "max relative deviation " + fmt(worst)};
}

// --- 5 ---
Outcome gradient_check() {
    Timer timer;
    ModelConfig c;
    c.num_layers = 1;
    c.d_model = 16;
    c.num_heads = 2;
    c.lora_dropout = 0.0;
    c.seed = 5;
    Model m = build_model(c);
    // Non-zero B so the A gradients are not identically zero.
    std::mt19937_64 init(55);
    std::normal_distribution<double> normal(0.0, 0.05);
    for (auto* p : m.projections())
        for (double& v : p->adapter.b.flat()) v = normal(init);

    const std::vector<TokenSeq> batch = {tokenize_pair("ab", "cd"), tokenize_pair("hello", "x")};
    std::mt19937_64 rng(0);
    auto fwd = forward(m, batch, true, rng);
    const Gradients grads = backward(*fwd.tape);
    auto projections = m.projections();
    const double h = 1e-4;
    std::size_t checked = 0, failed = 0;
    double worst = 0.0;
    for (std::size_t i = 0; i < projections.size(); ++i) {
        for (int which = 0; which < 2; ++which) {
            Matrix& param = which ? projections[i]->adapter.b : projections[i]->adapter.a;
            const Matrix& grad = which ? grads.adapters[i].b : grads.adapters[i].a;
            for (std::size_t k = 0; k < param.size(); ++k) {
                const double g = grad.flat()[k];
                if (std::abs(g) <= 1e-8) continue;
                const double orig = param.flat()[k];
                param.flat()[k] = orig + h;
                const double up = lm_loss(forward(m, batch, false, rng).logits, batch);
                param.flat()[k] = orig - h;
                const double down = lm_loss(forward(m, batch, false, rng).logits, batch);
                param.flat()[k] = orig;
                const double rel = std::abs((up - down) / (2 * h) - g) / std::abs(g);
                worst = std::max(worst, rel);
                failed += rel > 1e-3;
                ++checked;
            }
        }
    }
    const double secs = timer.seconds();
    return {failed == 0 && checked > 0 && secs < 180.0,
            std::to_string(checked) + " coordinates, " + std::to_string(failed) + " outside tolerance, worst " +
                fmt(worst) + ", " + fmt(secs) + " s"};
}

// Shared by 6 and 9: the overfit model and its corpus.
struct OverfitRun {
    Dataset data;
    Model model;
    Outcome outcome;
};

// --- 6 ---
OverfitRun default_recipe_overfit() {
    Timer timer;
    OverfitRun run{make_memorization_corpus(32, 0), build_model(ModelConfig{}), {}};
    const auto seqs = encode_examples(run.data);
    const double initial = mean_supervised_loss(run.model, seqs);
    const auto base_before = serialize_base(run.model);
    const auto adapters_before = detail::snapshot_adapters(run.model);

    TrainConfig cfg;
    cfg.max_steps = 500;
    cfg.checkpoint_every = 500;
    finetune(run.model, run.data, run.data, cfg);
    const double final_loss = mean_supervised_loss(run.model, seqs);
    const double ratio = final_loss / initial;
    const bool base_same = serialize_base(run.model) == base_before;
    bool every_adapter_changed = true;
    const auto projections = run.model.projections();
    for (std::size_t i = 0; i < projections.size(); ++i)
        every_adapter_changed = every_adapter_changed && !(projections[i]->adapter == adapters_before[i]);
    const double secs = timer.seconds();

    run.outcome.pass = ratio < 0.1 && base_same && every_adapter_changed && secs < 600.0;
    run.outcome.detail = "loss " + fmt(initial) + " -> " + fmt(final_loss) + " (" + fmt(ratio) + "x), base " +
                         (base_same ? "unchanged" : "CHANGED") + ", adapters " +
                         (every_adapter_changed ? "all updated" : "NOT all updated") + ", " + fmt(secs) + " s";
    return run;
}

// --- 7 ---
Outcome split_contract() {
    Dataset data;
    data.task = TaskKind::Summarization;
    for (std::size_t i = 0; i < 7750; ++i) data.examples.push_back({"ex" + std::to_string(i), "q", "a", std::nullopt});
    const auto a = split_dataset(data, {}, 11);
    const auto b = split_dataset(data, {}, 11);
    const auto c = split_dataset(data, {}, 12);
    const bool sizes = a.train.size() == 6200 && a.val.size() == 775 && a.test.size() == 775;
    const bool deterministic = a.train == b.train && a.val == b.val && a.test == b.test;
    const bool seed_matters = !(a.train == c.train);
    std::set<std::string> seen;
    std::size_t total = 0;
    for (const Dataset* part : {&a.train, &a.val, &a.test})
        for (const auto& ex : part->examples) {
            seen.insert(ex.id);
            ++total;
        }
    const bool partition = total == 7750 && seen.size() == 7750;
    return {sizes && deterministic && seed_matters && partition,
            std::to_string(a.train.size()) + "/" + std::to_string(a.val.size()) + "/" + std::to_string(a.test.size()) +
                (deterministic ? ", deterministic" : ", NOT deterministic") +
                (partition ? ", disjoint cover" : ", NOT a partition")};
}

// --- 8 ---
std::vector<std::string> random_words(std::mt19937_64& rng) {
    static const std::vector<std::string> vocab = {"the", "cat", "sat", "on", "mat", "a", "dog", "ran", "fast"};
    std::vector<std::string> out(rng() % 16);
    for (auto& w : out) w = vocab[rng() % vocab.size()];
    return out;
}

std::string join(const std::vector<std::string>& words) {
    std::string out;
    for (const auto& w : words) out += (out.empty() ? "" : " ") + w;
    return out;
}

Outcome metric_oracles() {
    std::mt19937_64 rng(808);
    std::size_t mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
        const auto a = random_words(rng), b = random_words(rng);
        const std::string sa = join(a), sb = join(b);
        const double lcs = static_cast<double>(oracle::lcs_length(a, b));
        const auto rl = rouge_l(sa, sb);
        const bool empty = a.empty() || b.empty();
        mismatches += rl.precision != (empty ? 0.0 : lcs / static_cast<double>(a.size()));
        mismatches += rl.recall != (empty ? 0.0 : lcs / static_cast<double>(b.size()));
        for (std::size_t n : {1u, 2u}) {
            const auto rn = rouge_n(sa, sb, n);
            const double overlap = static_cast<double>(oracle::ngram_overlap(a, b, n));
            const bool short_side = a.size() < n || b.size() < n;
            mismatches += rn.precision != (short_side ? 0.0 : overlap / static_cast<double>(a.size() - n + 1));
            mismatches += rn.recall != (short_side ? 0.0 : overlap / static_cast<double>(b.size() - n + 1));
        }
    }

    const std::vector<std::string> labels = {"claim", "premise"};
    auto pairs_from = [&](const std::vector<int>& pred, const std::vector<int>& gold) {
        std::vector<LabelPair> out;
        for (std::size_t i = 0; i < pred.size(); ++i)
            out.push_back({pred[i] ? "claim" : "premise", gold[i] ? "claim" : "premise"});
        return out;
    };
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        std::vector<int> pred(1 + rng() % 50), gold(pred.size());
        for (std::size_t i = 0; i < pred.size(); ++i) {
            pred[i] = static_cast<int>(rng() % 2);
            gold[i] = static_cast<int>(rng() % 2);
        }
        const auto pairs = pairs_from(pred, gold);
        const auto c = oracle::binary_counts(pred, gold);
        const double n = static_cast<double>(pred.size());
        worst = std::max(worst, std::abs(accuracy(pairs) - (c.tp + c.tn) / n));
        worst = std::max(worst, std::abs(f1(pairs, labels, F1Average::Binary, "claim") - oracle::f1_from(c.tp, c.fp, c.fn)));
        worst = std::max(worst, std::abs(mcc(pairs, labels) - oracle::mcc_from(c)));
    }

    const std::vector<LabelPair> worked = {
        {"claim", "claim"}, {"claim", "premise"}, {"premise", "premise"}, {"premise", "premise"}};
    const bool worked_ok = accuracy(worked) == 0.75 &&
                           std::abs(f1(worked, labels, F1Average::Binary, "claim") - 2.0 / 3.0) <= 1e-15 &&
                           std::abs(mcc(pairs_from({1, 1, 1, 0, 0, 1, 0}, {1, 1, 1, 0, 0, 0, 1}), labels) -
                                    5.0 / 12.0) <= 1e-15;
    return {mismatches == 0 && worst <= 1e-12 && worked_ok,
            std::to_string(mismatches) + " ROUGE mismatches, classification max deviation " + fmt(worst) +
                (worked_ok ? ", worked examples exact" : ", worked examples WRONG")};
}

// --- 9 ---
Outcome dlt_behavior(const OverfitRun& run) {
    const std::vector<std::string> train = corpus_of(run.data);
    const std::vector<std::string> fresh = corpus_of(make_memorization_corpus(32, 1));
    const double self = dlt(run.model, train, train);
    const DltResult r = dlt_report(run.model, train, fresh);
    const double anti = std::abs(dlt(run.model, train, fresh) + dlt(run.model, fresh, train));
    return {self == 0.0 && r.dlt > 0.0 && anti <= 1e-12,
            "self " + fmt(self) + ", ppl train " + fmt(r.ppl_train) + " vs fresh " + fmt(r.ppl_test) + ", dlt " +
                fmt(r.dlt) + ", antisymmetry gap " + fmt(anti)};
}

// --- 10 ---
Outcome perplexity_check() {
    Model m = build_model(ModelConfig{});
    m.lm_head.weight = quantize_tensor(Matrix(m.config.vocab_size, m.config.d_model), m.config.quant_block_size,
                                       m.config.quant_mode);
    const double ppl = perplexity(m, {"", "abc", "a longer document with spaces", "\xc3\xa9t\xc3\xa9"});
    return {std::abs(ppl - 259.0) <= 1e-9, "perplexity 259 off by " + fmt(std::abs(ppl - 259.0))};
}

// --- 11 ---
int cli(const std::vector<std::string>& args, std::string* out = nullptr) {
    std::ostringstream o, e;
    const int code = cli::run(args, o, e);
    if (out) *out = o.str();
    if (code != 0) std::cerr << "qlora " << args.front() << " failed: " << e.str();
    return code;
}

// Runs split, finetune, generate and evaluate into `dir`; returns the artifacts to compare.
std::map<std::string, std::string> cli_pipeline(const fs::path& dir, const fs::path& source) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    const std::string seed = "17";
    const auto split = (dir / "split").string(), run = (dir / "run").string();
    std::map<std::string, std::string> artifacts;
    if (cli({"split", "--dataset", source.string(), "--output_dir", split, "--seed", seed}) != 0) return {};
    if (cli({"finetune", "--train_file", split + "/train.jsonl", "--val_file", split + "/val.jsonl", "--output_dir",
             run, "--max_steps", "200", "--seed", seed}) != 0)
        return {};
    if (cli({"generate", "--checkpoint", run + "/model.qlm", "--dataset", split + "/test.jsonl", "--output",
             (dir / "predictions.jsonl").string(), "--max_new_tokens", "4"}) != 0)
        return {};
    if (cli({"evaluate", "--predictions", (dir / "predictions.jsonl").string(), "--gold", split + "/test.jsonl",
             "--checkpoint", run + "/model.qlm", "--train", split + "/train.jsonl", "--output",
             (dir / "report.json").string()}) != 0)
        return {};
    for (const char* name : {"split/train.jsonl", "split/val.jsonl", "split/test.jsonl", "split/manifest.json",
                             "run/model.qlm", "predictions.jsonl", "report.json"})
        artifacts[name] = slurp(dir / name);
    // The training report carries wall-clock time; everything else in it must match.
    auto training = nlohmann::json::parse(slurp(dir / "run" / "report.json"));
    training.erase("wall_time_s");
    artifacts["run/report.json without wall_time_s"] = training.dump();
    return artifacts;
}

Outcome end_to_end_determinism() {
    Timer timer;
    const fs::path root = fs::temp_directory_path() / "qlora_acceptance";
    fs::remove_all(root);
    fs::create_directories(root);
    save_dataset(make_fixture(TaskKind::Classification, 60, 3), (root / "source.jsonl").string());
    const auto first = cli_pipeline(root / "first", root / "source.jsonl");
    const auto second = cli_pipeline(root / "second", root / "source.jsonl");
    const double secs = timer.seconds();
    if (first.empty() || second.empty()) return {false, "pipeline failed"};
    std::string differing;
    for (const auto& [name, bytes] : first)
        if (second.at(name) != bytes) differing += " " + name;
    return {differing.empty() && secs < 600.0,
            (differing.empty() ? std::to_string(first.size()) + " artifacts byte-identical" : "differ:" + differing) +
                ", " + fmt(secs) + " s"};
}

// --- 12 ---
Outcome precision_ordering() {
    ModelConfig c;
    c.seed = 12;
    const Model m = build_model(c);
    const auto base = draw_base_weights(c);
    std::size_t strict = 0;
    for (const auto& t : base.projections) {
        const auto e4 = quant_error_report(t.value, quantize_tensor(t.value, c.quant_block_size, QuantMode::LinearAbsmax4));
        const auto e8 = quant_error_report(t.value, quantize_tensor(t.value, c.quant_block_size, QuantMode::LinearAbsmax8));
        strict += e8.max_abs_error < e4.max_abs_error;
    }
    // The same rows as printed by the quant-report command on this model.
    const fs::path dir = fs::temp_directory_path() / "qlora_acceptance_quant";
    fs::remove_all(dir);
    fs::create_directories(dir);
    save_model(m, (dir / "model.qlm").string());
    std::size_t cli_strict = 0, cli_tensors = 0;
    if (cli({"quant-report", "--checkpoint", (dir / "model.qlm").string(), "--output", (dir / "q.json").string()}) == 0) {
        std::map<std::string, std::map<std::string, double>> by_tensor;
        for (const auto& row : nlohmann::json::parse(slurp(dir / "q.json")))
            by_tensor[row["tensor"]][row["mode"]] = row["max_abs_error"].get<double>();
        cli_tensors = by_tensor.size();
        for (const auto& [name, modes] : by_tensor) cli_strict += modes.at("linear8") < modes.at("linear4");
    }
    const std::size_t n = base.projections.size();
    return {n > 0 && strict == n && cli_tensors == n && cli_strict == n,
            std::to_string(strict) + "/" + std::to_string(n) + " tensors strictly better at 8 bits (report: " +
                std::to_string(cli_strict) + "/" + std::to_string(cli_tensors) + ")"};
}

}  // namespace

int main() {
    int failures = 0;
    auto report = [&](int number, const std::string& name, const std::function<Outcome()>& check) {
        Outcome o;
        try {
            o = check();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        failures += !o.pass;
        std::cout << (o.pass ? "PASS" : "FAIL") << "  " << number << ". " << name << ": " << o.detail << std::endl;
    };

    report(1, "quantization round-trip", quantization_round_trip);
    report(2, "fused kernel equivalence", fused_kernel);
    report(3, "zero-init neutrality", zero_init_neutrality);
    report(4, "merge equivalence", merge_equivalence);
    report(5, "gradient correctness", gradient_check);
    std::optional<OverfitRun> overfit;
    report(6, "default-recipe overfit", [&] {
        overfit = default_recipe_overfit();
        return overfit->outcome;
    });
    report(7, "split contract", split_contract);
    report(8, "metric oracles", metric_oracles);
    report(9, "leakage score behavior", [&] {
        if (!overfit) return Outcome{false, "overfit run unavailable"};
        return dlt_behavior(*overfit);
    });
    report(10, "perplexity analytic check", perplexity_check);
    report(11, "end-to-end determinism", end_to_end_determinism);
    report(12, "precision ordering", precision_ordering);
    std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
    return failures == 0 ? 0 : 1;
}
