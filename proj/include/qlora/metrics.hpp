#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "qlora/data.hpp"
#include "qlora/error.hpp"
#include "qlora/model.hpp"

namespace qlora {

inline constexpr std::string_view kUnparseable = "UNPARSEABLE";

// ---------------------------------------------------------------------------------------------
// Label extraction and classification scores

namespace detail {

inline std::string lower_ascii(std::string_view s) {
    std::string out(s);
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
}

// Bytes >= 0x80 count as word characters so multi-byte UTF-8 letters never split a word.
inline bool is_word_byte(unsigned char c) { return std::isalnum(c) || c >= 0x80; }

}  // namespace detail

/// Earliest whole-word, case-insensitive occurrence of any label; the longer label wins a tie.
inline std::string label_extract(std::string_view generated, const std::vector<std::string>& labels) {
    if (labels.empty()) throw ValidationError("label set is empty");
    const std::string text = detail::lower_ascii(generated);
    std::optional<std::size_t> best_pos;
    const std::string* best = nullptr;
    for (const auto& label : labels) {
        const std::string needle = detail::lower_ascii(label);
        if (needle.empty()) throw ValidationError("label set contains an empty label");
        for (std::size_t pos = text.find(needle); pos != std::string::npos; pos = text.find(needle, pos + 1)) {
            const bool left_ok = pos == 0 || !detail::is_word_byte(static_cast<unsigned char>(text[pos - 1]));
            const std::size_t end = pos + needle.size();
            const bool right_ok = end == text.size() || !detail::is_word_byte(static_cast<unsigned char>(text[end]));
            if (!left_ok || !right_ok) continue;
            if (!best_pos || pos < *best_pos || (pos == *best_pos && label.size() > best->size())) {
                best_pos = pos;
                best = &label;
            }
            break;
        }
    }
    return best ? *best : std::string(kUnparseable);
}

struct LabelPair {
    std::string predicted;
    std::string gold;
};

enum class F1Average { Binary, Macro, Weighted };

/// Counts keyed by (gold, predicted).
using ConfusionCounts = std::map<std::pair<std::string, std::string>, std::size_t>;

namespace detail {

inline void require_pairs(const std::vector<LabelPair>& pairs) {
    if (pairs.empty()) throw ValidationError("no label pairs to score");
}

/// In a two-label task an unparseable prediction is scored as the label that is not the gold one.
inline std::string fold_prediction(const LabelPair& p, const std::vector<std::string>& labels) {
    if (p.predicted != kUnparseable || labels.size() != 2) return p.predicted;
    return p.gold == labels[0] ? labels[1] : labels[0];
}

}  // namespace detail

inline ConfusionCounts confusion_counts(const std::vector<LabelPair>& pairs, const std::vector<std::string>& labels) {
    ConfusionCounts counts;
    for (const auto& p : pairs) ++counts[{p.gold, detail::fold_prediction(p, labels)}];
    return counts;
}

inline double accuracy(const std::vector<LabelPair>& pairs) {
    detail::require_pairs(pairs);
    std::size_t correct = 0;
    for (const auto& p : pairs) correct += p.predicted == p.gold && p.predicted != kUnparseable;
    return static_cast<double>(correct) / static_cast<double>(pairs.size());
}

struct ClassScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::size_t support = 0;
};

inline ClassScore class_score(const ConfusionCounts& counts, const std::string& label) {
    std::size_t tp = 0, fp = 0, fn = 0, support = 0;
    for (const auto& [key, n] : counts) {
        const auto& [gold, pred] = key;
        if (gold == label) support += n;
        if (gold == label && pred == label) tp += n;
        else if (pred == label) fp += n;
        else if (gold == label) fn += n;
    }
    ClassScore s;
    s.support = support;
    s.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    s.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

/// Macro and weighted averages run over the labels that occur as gold or (folded) prediction.
inline double f1(const std::vector<LabelPair>& pairs, const std::vector<std::string>& labels, F1Average averaging,
                 const std::string& positive = {}) {
    detail::require_pairs(pairs);
    const ConfusionCounts counts = confusion_counts(pairs, labels);
    if (averaging == F1Average::Binary) {
        if (std::find(labels.begin(), labels.end(), positive) == labels.end())
            throw ValidationError("positive label \"" + positive + "\" is not in the label set");
        return class_score(counts, positive).f1;
    }
    std::vector<std::string> present;
    for (const auto& label : labels) {
        bool seen = false;
        for (const auto& [key, n] : counts) seen = seen || key.first == label || key.second == label;
        if (seen) present.push_back(label);
    }
    if (present.empty()) return 0.0;
    double sum = 0.0, weight = 0.0;
    for (const auto& label : present) {
        const ClassScore s = class_score(counts, label);
        const double w = averaging == F1Average::Macro ? 1.0 : static_cast<double>(s.support);
        sum += w * s.f1;
        weight += w;
    }
    return weight > 0 ? sum / weight : 0.0;
}

/// Binary Matthews correlation with labels[0] as the positive class; 0 when any margin is empty.
inline double mcc(const std::vector<LabelPair>& pairs, const std::vector<std::string>& labels) {
    detail::require_pairs(pairs);
    if (labels.size() != 2) throw ValidationError("mcc needs exactly two labels");
    double tp = 0, tn = 0, fp = 0, fn = 0;
    for (const auto& p : pairs) {
        const bool gold_pos = p.gold == labels[0];
        const bool pred_pos = detail::fold_prediction(p, labels) == labels[0];
        if (gold_pos && pred_pos) ++tp;
        else if (!gold_pos && !pred_pos) ++tn;
        else if (pred_pos) ++fp;
        else ++fn;
    }
    const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
    return den == 0.0 ? 0.0 : (tp * tn - fp * fn) / std::sqrt(den);
}

// ---------------------------------------------------------------------------------------------
// Summary scores

struct RougeScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

namespace detail {

inline RougeScore make_score(double overlap, double cand_total, double ref_total) {
    RougeScore s;
    if (cand_total == 0 || ref_total == 0) return s;
    s.precision = overlap / cand_total;
    s.recall = overlap / ref_total;
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

}  // namespace detail

/// Lowercased runs of word characters.
inline std::vector<std::string> metric_tokens(std::string_view text) {
    std::vector<std::string> tokens;
    std::string current;
    for (unsigned char c : text) {
        if (detail::is_word_byte(c)) {
            current.push_back(static_cast<char>(std::tolower(c)));
        } else if (!current.empty()) {
            tokens.push_back(std::move(current));
            current.clear();
        }
    }
    if (!current.empty()) tokens.push_back(std::move(current));
    return tokens;
}

inline RougeScore rouge_n(std::string_view candidate, std::string_view reference, std::size_t n) {
    if (n < 1) throw ValidationError("rouge n must be >= 1");
    const auto cand = metric_tokens(candidate), ref = metric_tokens(reference);
    auto grams = [n](const std::vector<std::string>& toks) {
        std::unordered_map<std::string, std::size_t> counts;
        for (std::size_t i = 0; i + n <= toks.size(); ++i) {
            std::string key;
            for (std::size_t k = 0; k < n; ++k) (key += toks[i + k]) += '\x1f';
            ++counts[key];
        }
        return counts;
    };
    const auto cg = grams(cand), rg = grams(ref);
    std::size_t overlap = 0;
    for (const auto& [key, c] : cg)
        if (auto it = rg.find(key); it != rg.end()) overlap += std::min(c, it->second);
    const double cand_total = cand.size() >= n ? static_cast<double>(cand.size() - n + 1) : 0.0;
    const double ref_total = ref.size() >= n ? static_cast<double>(ref.size() - n + 1) : 0.0;
    return detail::make_score(static_cast<double>(overlap), cand_total, ref_total);
}

inline RougeScore rouge_l(std::string_view candidate, std::string_view reference) {
    const auto cand = metric_tokens(candidate), ref = metric_tokens(reference);
    // Two-row LCS table.
    std::vector<std::size_t> prev(ref.size() + 1, 0), cur(ref.size() + 1, 0);
    for (const auto& c : cand) {
        for (std::size_t j = 1; j <= ref.size(); ++j)
            cur[j] = c == ref[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        std::swap(prev, cur);
    }
    return detail::make_score(static_cast<double>(prev[ref.size()]), static_cast<double>(cand.size()),
                              static_cast<double>(ref.size()));
}

/// Token embeddings for BERTScore. Implementations return one unit vector of dim() entries per token.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::size_t dim() const = 0;
    virtual std::vector<std::vector<double>> embed(const std::vector<std::string>& tokens) const = 0;
};

/// Each token maps to a pseudo-random unit vector seeded by a hash of its bytes.
class HashEmbedder : public Embedder {
public:
    explicit HashEmbedder(std::size_t dim = 64, std::uint64_t seed = 0) : dim_(dim), seed_(seed) {
        if (dim_ < 1) throw ValidationError("embedding dimension must be >= 1");
    }

    std::size_t dim() const override { return dim_; }

    std::vector<double> vector_for(std::string_view token) const {
        std::uint64_t h = 1469598103934665603ULL ^ seed_;  // FNV-1a
        for (unsigned char c : token) {
            h ^= c;
            h *= 1099511628211ULL;
        }
        std::mt19937_64 rng(h);
        std::normal_distribution<double> normal(0.0, 1.0);
        std::vector<double> v(dim_);
        double norm = 0.0;
        while (norm == 0.0) {
            norm = 0.0;
            for (double& x : v) {
                x = normal(rng);
                norm += x * x;
            }
        }
        norm = std::sqrt(norm);
        for (double& x : v) x /= norm;
        return v;
    }

    std::vector<std::vector<double>> embed(const std::vector<std::string>& tokens) const override {
        std::vector<std::vector<double>> out;
        out.reserve(tokens.size());
        for (const auto& t : tokens) out.push_back(vector_for(t));
        return out;
    }

private:
    std::size_t dim_;
    std::uint64_t seed_;
};

/// Token-vector table, e.g. loaded from a whitespace-separated "token v1 ... vd" text file. Vectors
/// are normalized on insert; tokens missing from the table fall back to a hash vector.
class TableEmbedder : public Embedder {
public:
    explicit TableEmbedder(std::size_t dim) : fallback_(dim) {}

    void add(const std::string& token, std::vector<double> vec) {
        if (vec.size() != dim())
            throw ValidationError("embedding for \"" + token + "\" has dimension " + std::to_string(vec.size()) +
                                  ", expected " + std::to_string(dim()));
        double norm = 0.0;
        for (double x : vec) norm += x * x;
        if (!(norm > 0.0) || !std::isfinite(norm))
            throw ValidationError("embedding for \"" + token + "\" is zero or non-finite");
        norm = std::sqrt(norm);
        for (double& x : vec) x /= norm;
        table_[token] = std::move(vec);
    }

    static TableEmbedder load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ValidationError("cannot open embedding table " + path);
        std::optional<TableEmbedder> table;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            std::istringstream fields(line);
            std::string token;
            if (!(fields >> token)) continue;
            std::vector<double> vec;
            for (double x; fields >> x;) vec.push_back(x);
            if (!fields.eof())
                throw ValidationError(path + ": line " + std::to_string(line_no) + ": non-numeric vector entry");
            if (!table) {
                if (vec.empty()) throw ValidationError(path + ": line " + std::to_string(line_no) + ": empty vector");
                table.emplace(vec.size());
            }
            try {
                table->add(detail::lower_ascii(token), std::move(vec));
            } catch (const ValidationError& e) {
                throw ValidationError(path + ": line " + std::to_string(line_no) + ": " + e.what());
            }
        }
        if (!table) throw ValidationError(path + ": empty embedding table");
        return std::move(*table);
    }

    std::size_t dim() const override { return fallback_.dim(); }
    std::size_t size() const noexcept { return table_.size(); }

    std::vector<std::vector<double>> embed(const std::vector<std::string>& tokens) const override {
        std::vector<std::vector<double>> out;
        out.reserve(tokens.size());
        for (const auto& t : tokens) {
            auto it = table_.find(t);
            out.push_back(it != table_.end() ? it->second : fallback_.vector_for(t));
        }
        return out;
    }

private:
    HashEmbedder fallback_;
    std::unordered_map<std::string, std::vector<double>> table_;
};

/// Greedy-matching BERTScore over metric_tokens: recall averages each reference token's best cosine,
/// precision each candidate token's. No idf weighting, no baseline rescaling.
inline RougeScore bert_score(std::string_view candidate, std::string_view reference, const Embedder& embedder) {
    const auto cand_tokens = metric_tokens(candidate), ref_tokens = metric_tokens(reference);
    if (cand_tokens.empty() || ref_tokens.empty()) return {};
    const auto cand = embedder.embed(cand_tokens), ref = embedder.embed(ref_tokens);
    for (const auto* side : {&cand, &ref})
        for (const auto& v : *side)
            if (v.size() != embedder.dim())
                throw ValidationError("embedder returned dimension " + std::to_string(v.size()) + ", expected " +
                                      std::to_string(embedder.dim()));
    std::vector<double> best_cand(cand.size(), -1.0), best_ref(ref.size(), -1.0);
    for (std::size_t i = 0; i < cand.size(); ++i)
        for (std::size_t j = 0; j < ref.size(); ++j) {
            double dot = 0.0;
            for (std::size_t k = 0; k < cand[i].size(); ++k) dot += cand[i][k] * ref[j][k];
            best_cand[i] = std::max(best_cand[i], dot);
            best_ref[j] = std::max(best_ref[j], dot);
        }
    RougeScore s;
    for (double v : best_cand) s.precision += v;
    for (double v : best_ref) s.recall += v;
    s.precision /= static_cast<double>(cand.size());
    s.recall /= static_cast<double>(ref.size());
    s.f1 = s.precision + s.recall > 0 ? 2 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

// ---------------------------------------------------------------------------------------------
// Data leakage test

struct DltResult {
    double ppl_train = 0.0;
    double ppl_test = 0.0;
    double dlt = 0.0;
};

inline DltResult dlt_report(const Model& model, const std::vector<std::string>& train_corpus,
                            const std::vector<std::string>& test_corpus) {
    if (train_corpus.empty() || test_corpus.empty()) throw ValidationError("dlt needs two non-empty corpora");
    DltResult r;
    r.ppl_train = perplexity(model, train_corpus);
    r.ppl_test = perplexity(model, test_corpus);
    r.dlt = r.ppl_test - r.ppl_train;
    return r;
}

/// perplexity(test) - perplexity(train); larger values point away from leakage.
inline double dlt(const Model& model, const std::vector<std::string>& train_corpus,
                  const std::vector<std::string>& test_corpus) {
    return dlt_report(model, train_corpus, test_corpus).dlt;
}

/// The texts a model sees for a dataset: prompt followed by answer.
inline std::vector<std::string> corpus_of(const Dataset& data) {
    std::vector<std::string> out;
    out.reserve(data.size());
    for (const auto& ex : data.examples) out.push_back(training_text(ex, data.task));
    return out;
}

// ---------------------------------------------------------------------------------------------
// Reports

/// The fixed metric keys, in report order.
inline const std::vector<std::string>& metric_keys() {
    static const std::vector<std::string> keys = {"accuracy", "f1_binary", "f1_macro", "f1_weighted", "mcc",
                                                  "unparseable_rate", "rouge1", "rouge2", "rougeL", "bertscore",
                                                  "dlt", "ppl_train", "ppl_test"};
    return keys;
}

struct MetricReport {
    std::string task;
    std::size_t examples = 0;
    std::map<std::string, double> metrics;           ///< subset of metric_keys()
    nlohmann::ordered_json counts = nlohmann::ordered_json::object();
    nlohmann::ordered_json config = nlohmann::ordered_json::object();
    std::map<std::string, double> external;          ///< imported scores such as BARTScore

    void set_dlt(const DltResult& r) {
        metrics["dlt"] = r.dlt;
        metrics["ppl_train"] = r.ppl_train;
        metrics["ppl_test"] = r.ppl_test;
    }
};

/// Every fixed key is present; metrics that were not computed are null.
inline nlohmann::ordered_json report_to_json(const MetricReport& report) {
    nlohmann::ordered_json j;
    j["task"] = report.task;
    j["examples"] = report.examples;
    for (const auto& key : metric_keys()) {
        auto it = report.metrics.find(key);
        j[key] = it == report.metrics.end() ? nlohmann::ordered_json(nullptr) : nlohmann::ordered_json(it->second);
    }
    j["counts"] = report.counts;
    if (!report.external.empty()) {
        nlohmann::ordered_json ext = nlohmann::ordered_json::object();
        for (const auto& [k, v] : report.external) ext[k] = v;
        j["external"] = ext;
    }
    j["config"] = report.config;
    return j;
}

struct Prediction {
    std::string id;
    std::string text;
};

/// Scores predictions already paired with their examples (same order, same length).
inline MetricReport evaluate_classification(const std::vector<std::string>& predictions, const Dataset& test_set,
                                            const std::vector<std::string>& labels, const std::string& positive) {
    if (test_set.size() == 0) throw ValidationError("empty test set");
    if (predictions.size() != test_set.size()) throw ValidationError("prediction count does not match test set");
    std::vector<LabelPair> pairs;
    std::size_t unparseable = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const auto& gold = test_set.examples[i].answer;
        if (std::find(labels.begin(), labels.end(), gold) == labels.end())
            throw ValidationError("gold answer \"" + gold + "\" of " + test_set.examples[i].id + " is not a label");
        pairs.push_back({label_extract(predictions[i], labels), gold});
        unparseable += pairs.back().predicted == kUnparseable;
    }
    MetricReport r;
    r.task = std::string(to_string(TaskKind::Classification));
    r.examples = pairs.size();
    r.metrics["accuracy"] = accuracy(pairs);
    r.metrics["f1_binary"] = f1(pairs, labels, F1Average::Binary, positive);
    r.metrics["f1_macro"] = f1(pairs, labels, F1Average::Macro);
    r.metrics["f1_weighted"] = f1(pairs, labels, F1Average::Weighted);
    if (labels.size() == 2) r.metrics["mcc"] = mcc(pairs, labels);
    r.metrics["unparseable_rate"] = static_cast<double>(unparseable) / static_cast<double>(pairs.size());
    r.counts["unparseable"] = unparseable;
    nlohmann::ordered_json support = nlohmann::ordered_json::object();
    for (const auto& label : labels) {
        std::size_t n = 0;
        for (const auto& p : pairs) n += p.gold == label;
        support[label] = n;
    }
    r.counts["support"] = support;
    r.config["labels"] = labels;
    r.config["positive_label"] = positive;
    return r;
}

inline MetricReport evaluate_summarization(const std::vector<std::string>& predictions, const Dataset& test_set,
                                           const Embedder& embedder) {
    if (test_set.size() == 0) throw ValidationError("empty test set");
    if (predictions.size() != test_set.size()) throw ValidationError("prediction count does not match test set");
    double r1 = 0, r2 = 0, rl = 0, bs = 0;
    std::size_t total_tokens = 0, longest = 0, empty = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i) {
        const auto& pred = predictions[i];
        const auto& gold = test_set.examples[i].answer;
        r1 += rouge_n(pred, gold, 1).f1;
        r2 += rouge_n(pred, gold, 2).f1;
        rl += rouge_l(pred, gold).f1;
        bs += bert_score(pred, gold, embedder).f1;
        const std::size_t n = metric_tokens(pred).size();
        total_tokens += n;
        longest = std::max(longest, n);
        empty += n == 0;
    }
    const double count = static_cast<double>(predictions.size());
    MetricReport r;
    r.task = std::string(to_string(TaskKind::Summarization));
    r.examples = predictions.size();
    r.metrics["rouge1"] = r1 / count;
    r.metrics["rouge2"] = r2 / count;
    r.metrics["rougeL"] = rl / count;
    r.metrics["bertscore"] = bs / count;
    r.counts["mean_prediction_tokens"] = static_cast<double>(total_tokens) / count;
    r.counts["max_prediction_tokens"] = longest;
    r.counts["empty_predictions"] = empty;
    r.config["embedding_dim"] = embedder.dim();
    return r;
}

/// Greedy completions of every example's prompt.
inline std::vector<std::string> generate_predictions(const Model& model, const Dataset& data,
                                                     std::size_t max_new_tokens) {
    std::vector<std::string> out;
    out.reserve(data.size());
    for (const auto& ex : data.examples) out.push_back(generate(model, build_prompt(ex, data.task), max_new_tokens));
    return out;
}

inline MetricReport evaluate_classification(const Model& model, const Dataset& test_set,
                                            const std::vector<std::string>& labels, std::size_t max_new_tokens) {
    if (test_set.size() == 0) throw ValidationError("empty test set");
    if (labels.empty()) throw ValidationError("label set is empty");
    MetricReport r = evaluate_classification(generate_predictions(model, test_set, max_new_tokens), test_set, labels,
                                             labels.front());
    r.config["max_new_tokens"] = max_new_tokens;
    return r;
}

inline MetricReport evaluate_summarization(const Model& model, const Dataset& test_set, const Embedder& embedder,
                                           std::size_t max_new_tokens) {
    if (test_set.size() == 0) throw ValidationError("empty test set");
    MetricReport r = evaluate_summarization(generate_predictions(model, test_set, max_new_tokens), test_set, embedder);
    r.config["max_new_tokens"] = max_new_tokens;
    return r;
}

// ---------------------------------------------------------------------------------------------
// Prediction files and external scores

inline std::string predictions_to_jsonl(const std::vector<Prediction>& predictions) {
    std::string out;
    for (const auto& p : predictions) {
        nlohmann::ordered_json record;
        record["id"] = p.id;
        record["prediction"] = p.text;
        out += record.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
        out += '\n';
    }
    return out;
}

namespace detail {

template <class Fn>
void for_each_record(const std::string& path, Fn fn) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json record;
        try {
            record = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(path + ": line " + std::to_string(line_no) + ": malformed record: " + e.what());
        }
        fn(record, line_no);
    }
}

}  // namespace detail

inline std::vector<Prediction> load_predictions(const std::string& path) {
    std::vector<Prediction> out;
    detail::for_each_record(path, [&](const nlohmann::json& rec, std::size_t line_no) {
        if (!rec.is_object() || !rec.contains("id") || !rec["id"].is_string() || !rec.contains("prediction") ||
            !rec["prediction"].is_string())
            throw ValidationError(path + ": line " + std::to_string(line_no) +
                                  ": needs string fields \"id\" and \"prediction\"");
        out.push_back({rec["id"].get<std::string>(), rec["prediction"].get<std::string>()});
    });
    return out;
}

/// Orders predictions like the gold set. Ids missing on either side are listed in the error.
inline std::vector<std::string> align_predictions(const std::vector<Prediction>& predictions, const Dataset& gold) {
    std::map<std::string, std::string> by_id;
    for (const auto& p : predictions)
        if (!by_id.emplace(p.id, p.text).second) throw ValidationError("duplicate prediction id \"" + p.id + "\"");
    std::vector<std::string> missing, out;
    std::set<std::string> gold_ids;
    for (const auto& ex : gold.examples) {
        gold_ids.insert(ex.id);
        auto it = by_id.find(ex.id);
        if (it == by_id.end()) missing.push_back(ex.id);
        else out.push_back(it->second);
    }
    std::vector<std::string> extra;
    for (const auto& [id, text] : by_id)
        if (!gold_ids.count(id)) extra.push_back(id);
    if (!missing.empty() || !extra.empty()) {
        std::string msg = "prediction ids do not match gold ids";
        auto list = [&msg](const char* what, const std::vector<std::string>& ids) {
            if (ids.empty()) return;
            msg += std::string("; ") + what + ":";
            for (const auto& id : ids) msg += " " + id;
        };
        list("missing predictions", missing);
        list("unknown ids", extra);
        throw ValidationError(msg);
    }
    return out;
}

/// Precomputed per-example scores from an external scorer (e.g. BARTScore), lines of {"id", "score"}.
inline std::map<std::string, double> load_external_scores(const std::string& path) {
    std::map<std::string, double> out;
    detail::for_each_record(path, [&](const nlohmann::json& rec, std::size_t line_no) {
        if (!rec.is_object() || !rec.contains("id") || !rec["id"].is_string() || !rec.contains("score") ||
            !rec["score"].is_number())
            throw ValidationError(path + ": line " + std::to_string(line_no) +
                                  ": needs a string \"id\" and a numeric \"score\"");
        out[rec["id"].get<std::string>()] = rec["score"].get<double>();
    });
    return out;
}

/// Mean of the imported scores over the test ids, stored under `name` in the report.
inline void attach_external_score(MetricReport& report, const std::string& name,
                                  const std::map<std::string, double>& scores, const Dataset& test_set) {
    if (test_set.size() == 0) throw ValidationError("empty test set");
    double sum = 0.0;
    for (const auto& ex : test_set.examples) {
        auto it = scores.find(ex.id);
        if (it == scores.end()) throw ValidationError("external " + name + " score missing for id " + ex.id);
        sum += it->second;
    }
    report.external[name] = sum / static_cast<double>(test_set.size());
}

}  // namespace qlora
