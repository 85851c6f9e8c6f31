#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "qlora/error.hpp"

namespace qlora {

enum class TaskKind { Classification, Summarization };

inline std::string_view to_string(TaskKind kind) {
    return kind == TaskKind::Classification ? "classification" : "summarization";
}

inline TaskKind parse_task_kind(std::string_view name) {
    if (name == "classification") return TaskKind::Classification;
    if (name == "summarization") return TaskKind::Summarization;
    throw ValidationError("unknown task kind \"" + std::string(name) +
                          "\" (expected classification or summarization)");
}

struct Example {
    std::string id;
    std::string query;
    std::string answer;
    std::optional<std::vector<std::string>> choices;

    bool operator==(const Example&) const = default;
};

struct Dataset {
    TaskKind task = TaskKind::Classification;
    std::vector<Example> examples;

    std::size_t size() const noexcept { return examples.size(); }
    bool operator==(const Dataset&) const = default;
};

/// Maps the canonical record fields ("id", "query", "answer", "choices") to the names used in a
/// foreign file layout. Unmapped fields keep their canonical names.
using FieldMap = std::map<std::string, std::string>;

namespace detail {

inline const std::string& field_name(const FieldMap& fields, const std::string& canonical) {
    auto it = fields.find(canonical);
    return it == fields.end() ? canonical : it->second;
}

inline std::string line_error(std::size_t line, const std::string& message) {
    return "line " + std::to_string(line) + ": " + message;
}

}  // namespace detail

/// Parses line-delimited JSON records. Blank lines are skipped; reported line numbers are 1-based.
inline Dataset parse_dataset(std::string_view content, TaskKind task, const FieldMap& fields = {}) {
    using nlohmann::json;
    Dataset data;
    data.task = task;
    std::set<std::string> seen;
    std::size_t line_no = 0;
    std::size_t start = 0;
    while (start < content.size()) {
        std::size_t end = content.find('\n', start);
        if (end == std::string_view::npos) end = content.size();
        std::string_view line = content.substr(start, end - start);
        start = end + 1;
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;

        json record;
        try {
            record = json::parse(line);
        } catch (const json::exception& e) {
            throw ValidationError(detail::line_error(line_no, std::string("malformed record: ") + e.what()));
        }
        if (!record.is_object()) throw ValidationError(detail::line_error(line_no, "record is not an object"));

        auto get_string = [&](const std::string& canonical, bool required) -> std::optional<std::string> {
            const auto& key = detail::field_name(fields, canonical);
            auto it = record.find(key);
            if (it == record.end() || it->is_null()) {
                if (required) throw ValidationError(detail::line_error(line_no, "missing field \"" + key + "\""));
                return std::nullopt;
            }
            if (!it->is_string())
                throw ValidationError(detail::line_error(line_no, "field \"" + key + "\" must be a string"));
            return it->get<std::string>();
        };

        Example ex;
        ex.id = *get_string("id", true);
        ex.query = *get_string("query", true);
        ex.answer = *get_string("answer", true);
        if (ex.answer.empty()) throw ValidationError(detail::line_error(line_no, "answer is empty"));

        const auto& choices_key = detail::field_name(fields, "choices");
        if (auto it = record.find(choices_key); it != record.end() && !it->is_null()) {
            if (!it->is_array())
                throw ValidationError(detail::line_error(line_no, "choices must be an array of strings"));
            std::vector<std::string> choices;
            for (const auto& c : *it) {
                if (!c.is_string())
                    throw ValidationError(detail::line_error(line_no, "choices must be an array of strings"));
                choices.push_back(c.get<std::string>());
            }
            if (std::find(choices.begin(), choices.end(), ex.answer) == choices.end()) {
                throw ValidationError(
                    detail::line_error(line_no, "answer \"" + ex.answer + "\" is not one of the choices"));
            }
            ex.choices = std::move(choices);
        } else if (task == TaskKind::Classification) {
            throw ValidationError(detail::line_error(line_no, "classification record needs choices"));
        }

        if (!seen.insert(ex.id).second)
            throw ValidationError(detail::line_error(line_no, "duplicate id \"" + ex.id + "\""));
        data.examples.push_back(std::move(ex));
    }
    if (data.examples.empty()) throw ValidationError("empty dataset");
    return data;
}

inline Dataset load_dataset(const std::string& path, TaskKind task, const FieldMap& fields = {}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open dataset " + path);
    std::ostringstream buffer;
    buffer << in.rdbuf();
    try {
        return parse_dataset(buffer.str(), task, fields);
    } catch (const ValidationError& e) {
        throw ValidationError(path + ": " + e.what());
    }
}

inline std::string dataset_to_jsonl(const Dataset& data) {
    std::string out;
    for (const auto& ex : data.examples) {
        nlohmann::ordered_json record;
        record["id"] = ex.id;
        record["query"] = ex.query;
        record["answer"] = ex.answer;
        if (ex.choices) record["choices"] = *ex.choices;
        out += record.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace);
        out += '\n';
    }
    return out;
}

inline void save_dataset(const Dataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path);
    out << dataset_to_jsonl(data);
}

inline std::string build_prompt(const Example& ex, TaskKind task) {
    if (task == TaskKind::Classification) {
        if (!ex.choices || ex.choices->size() != 2) {
            throw ValidationError("classification example \"" + ex.id + "\" must have exactly 2 choices");
        }
        return ex.query + "\nAnswer with exactly one word: " + (*ex.choices)[0] + " or " + (*ex.choices)[1] +
               ".\nAnswer:";
    }
    return ex.query + "\nSummary:";
}

/// Full supervised text: prompt immediately followed by the answer.
inline std::string training_text(const Example& ex, TaskKind task) { return build_prompt(ex, task) + ex.answer; }

// ---------------------------------------------------------------------------------------------
// Synthetic fixtures

namespace detail {

template <std::size_t N>
const char* pick(const std::array<const char*, N>& options, std::mt19937_64& rng) {
    std::uniform_int_distribution<std::size_t> dist(0, N - 1);
    return options[dist(rng)];
}

inline constexpr std::array<const char*, 8> kCompanies = {
    "Acme Corp", "Borealis Bank", "Cobalt Mining", "Delta Freight",
    "Everest Foods", "Fjord Energy", "Granite Insurance", "Harbor Retail",
};

// Claims are forward-looking; premises state a past fact. The verb phrase is the cue.
inline constexpr std::array<const char*, 4> kClaimVerbs = {"will", "expects to", "plans to", "aims to"};
inline constexpr std::array<const char*, 4> kClaimActions = {"raise", "cut", "double", "expand"};
inline constexpr std::array<const char*, 4> kClaimObjects = {"its dividend", "its revenue", "its workforce",
                                                             "its margins"};
inline constexpr std::array<const char*, 3> kClaimTimes = {"next year", "by 2026", "soon"};

inline constexpr std::array<const char*, 4> kPremiseVerbs = {"reported", "posted", "recorded", "disclosed"};
inline constexpr std::array<const char*, 4> kPremiseChanges = {"a 12% rise", "a 4% drop", "record growth",
                                                               "a flat trend"};
inline constexpr std::array<const char*, 3> kPremiseObjects = {"in revenue", "in profit", "in costs"};
inline constexpr std::array<const char*, 3> kPremiseTimes = {"last quarter", "in 2023", "last year"};

inline constexpr std::array<const char*, 4> kMetrics = {"revenue", "net income", "operating profit", "sales"};
inline constexpr std::array<const char*, 4> kQuarters = {"Q1", "Q2", "Q3", "Q4"};
inline constexpr std::array<const char*, 4> kDrivers = {"strong demand", "lower costs", "new contracts",
                                                        "weak pricing"};
inline constexpr std::array<const char*, 4> kKeyPhrases = {"outlook raised", "shares fell", "guidance held",
                                                           "buyback approved"};

inline std::string padded_id(std::string_view prefix, std::size_t i) {
    std::string digits = std::to_string(i);
    return std::string(prefix) + std::string(digits.size() < 4 ? 4 - digits.size() : 0, '0') + digits;
}

}  // namespace detail

/// Deterministic synthetic dataset. Classification labels alternate before the shuffle, so the
/// two classes are balanced within one.
inline Dataset make_fixture(TaskKind task, std::size_t n, std::uint64_t seed) {
    if (n < 10) throw ValidationError("fixture size must be >= 10");
    using namespace detail;
    std::mt19937_64 rng(seed);
    Dataset data;
    data.task = task;
    for (std::size_t i = 0; i < n; ++i) {
        Example ex;
        if (task == TaskKind::Classification) {
            ex.id = padded_id("cls-", i);
            const bool claim = i % 2 == 0;
            std::string sentence = pick(kCompanies, rng);
            if (claim) {
                sentence += std::string(" ") + pick(kClaimVerbs, rng) + " " + pick(kClaimActions, rng) + " " +
                            pick(kClaimObjects, rng) + " " + pick(kClaimTimes, rng) + ".";
            } else {
                sentence += std::string(" ") + pick(kPremiseVerbs, rng) + " " + pick(kPremiseChanges, rng) + " " +
                            pick(kPremiseObjects, rng) + " " + pick(kPremiseTimes, rng) + ".";
            }
            ex.query = "Classify: " + sentence;
            ex.answer = claim ? "claim" : "premise";
            ex.choices = std::vector<std::string>{"claim", "premise"};
        } else {
            ex.id = padded_id("sum-", i);
            std::uniform_int_distribution<int> amount(10, 990);
            const std::string company = pick(kCompanies, rng);
            const std::string lead = company + " posted " + pick(kMetrics, rng) + " of " +
                                     std::to_string(amount(rng)) + " million in " + pick(kQuarters, rng);
            const std::string key = pick(kKeyPhrases, rng);
            ex.query = "Summarize: " + lead + ", helped by " + pick(kDrivers, rng) + ". Analysts said " + key +
                       ".";
            ex.answer = lead + "; " + key;
        }
        data.examples.push_back(std::move(ex));
    }
    std::shuffle(data.examples.begin(), data.examples.end(), rng);
    return data;
}

/// Small yes/no corpus for overfitting checks: the claim/premise sentences of the classification
/// fixture, asked as "is this a claim?". Short answers keep the supervised span to a few bytes.
inline Dataset make_memorization_corpus(std::size_t n, std::uint64_t seed) {
    Dataset data = make_fixture(TaskKind::Classification, n, seed);
    for (auto& ex : data.examples) {
        ex.id = "mem-" + ex.id.substr(4);
        ex.query = "Is this a claim? " + ex.query.substr(std::string_view("Classify: ").size());
        ex.answer = ex.answer == "claim" ? "yes" : "no";
        ex.choices = std::vector<std::string>{"yes", "no"};
    }
    return data;
}

}  // namespace qlora
