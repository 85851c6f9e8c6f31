#pragma once

// Command-line front end: split, finetune, generate, evaluate, dlt, quant-report.
// Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "qlora/data.hpp"
#include "qlora/error.hpp"
#include "qlora/metrics.hpp"
#include "qlora/model.hpp"
#include "qlora/quant.hpp"
#include "qlora/train.hpp"

namespace qlora::cli {

/// Everything a finetune run depends on. One seed drives the split, the base weights, the adapters,
/// the batch order and dropout.
struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    SplitRatios split;
    TaskKind task = TaskKind::Classification;
    std::string dataset;
    std::string train_file;
    std::string val_file;
    std::string output_dir;
    std::uint32_t seed = 0;
    FieldMap fields;
};

namespace detail {

template <class T>
T parse_number(const std::string& key, const std::string& value) {
    T out{};
    const char* begin = value.data();
    const char* end = begin + value.size();
    auto [ptr, ec] = std::from_chars(begin, end, out);
    if (ec != std::errc() || ptr != end || value.empty())
        throw ValidationError(key + ": cannot parse \"" + value + "\" as a number");
    return out;
}

inline std::size_t parse_count(const std::string& key, const std::string& value) {
    return parse_number<std::size_t>(key, value);
}

inline std::string trim(std::string s) {
    const auto first = s.find_first_not_of(" \t\r");
    if (first == std::string::npos) return {};
    const auto last = s.find_last_not_of(" \t\r");
    return s.substr(first, last - first + 1);
}

}  // namespace detail

/// Every key accepted in a config file or as a --<key> flag.
inline const std::vector<std::string>& config_keys() {
    static const std::vector<std::string> keys = {
        "num_layers",    "d_model",       "num_heads",    "d_ff",          "vocab_size",    "max_seq_len",
        "quant_mode",    "quant_block_size", "lora_rank", "lora_alpha",    "lora_dropout",  "learning_rate",
        "batch_size",    "max_steps",     "checkpoint_every", "beta1",     "beta2",         "epsilon",
        "grad_clip_norm", "train_frac",   "val_frac",     "test_frac",     "task",          "dataset",
        "train_file",    "val_file",      "output_dir",   "seed"};
    return keys;
}

inline void apply_setting(RunConfig& c, const std::string& key, const std::string& value) {
    using detail::parse_count;
    using detail::parse_number;
    if (key.rfind("field.", 0) == 0) {
        c.fields[key.substr(6)] = value;
    } else if (key == "num_layers") c.model.num_layers = parse_count(key, value);
    else if (key == "d_model") c.model.d_model = parse_count(key, value);
    else if (key == "num_heads") c.model.num_heads = parse_count(key, value);
    else if (key == "d_ff") c.model.d_ff = parse_count(key, value);
    else if (key == "vocab_size") c.model.vocab_size = parse_count(key, value);
    else if (key == "max_seq_len") c.model.max_seq_len = parse_count(key, value);
    else if (key == "quant_mode") c.model.quant_mode = parse_quant_mode(value);
    else if (key == "quant_block_size") c.model.quant_block_size = parse_count(key, value);
    else if (key == "lora_rank") c.model.lora_rank = parse_count(key, value);
    else if (key == "lora_alpha") c.model.lora_alpha = parse_number<double>(key, value);
    else if (key == "lora_dropout") c.model.lora_dropout = parse_number<double>(key, value);
    else if (key == "learning_rate") c.train.learning_rate = parse_number<double>(key, value);
    else if (key == "batch_size") c.train.batch_size = parse_count(key, value);
    else if (key == "max_steps") c.train.max_steps = parse_count(key, value);
    else if (key == "checkpoint_every") c.train.checkpoint_every = parse_count(key, value);
    else if (key == "beta1") c.train.beta1 = parse_number<double>(key, value);
    else if (key == "beta2") c.train.beta2 = parse_number<double>(key, value);
    else if (key == "epsilon") c.train.epsilon = parse_number<double>(key, value);
    else if (key == "grad_clip_norm") {
        if (value.empty() || value == "off") c.train.grad_clip_norm.reset();
        else c.train.grad_clip_norm = parse_number<double>(key, value);
    } else if (key == "train_frac") c.split.train_frac = parse_number<double>(key, value);
    else if (key == "val_frac") c.split.val_frac = parse_number<double>(key, value);
    else if (key == "test_frac") c.split.test_frac = parse_number<double>(key, value);
    else if (key == "task") c.task = parse_task_kind(value);
    else if (key == "dataset") c.dataset = value;
    else if (key == "train_file") c.train_file = value;
    else if (key == "val_file") c.val_file = value;
    else if (key == "output_dir") c.output_dir = value;
    else if (key == "seed") {
        c.seed = parse_number<std::uint32_t>(key, value);
    } else {
        throw ValidationError("unknown config key \"" + key + "\"");
    }
    c.model.seed = c.seed;
    c.train.seed = c.seed;
}

/// key=value lines; blank lines and lines starting with '#' are ignored.
inline void apply_config_text(RunConfig& c, const std::string& text, const std::string& source) {
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        line = detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError(source + ": line " + std::to_string(line_no) + ": expected key=value");
        try {
            apply_setting(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        } catch (const ValidationError& e) {
            throw ValidationError(source + ": line " + std::to_string(line_no) + ": " + e.what());
        }
    }
}

inline std::string run_config_to_text(const RunConfig& c) {
    std::ostringstream out;
    out.precision(17);
    out << config_to_text(c.model) << train_config_to_text(c.train) << "train_frac=" << c.split.train_frac << "\n"
        << "val_frac=" << c.split.val_frac << "\n"
        << "test_frac=" << c.split.test_frac << "\n"
        << "task=" << to_string(c.task) << "\n";
    if (!c.dataset.empty()) out << "dataset=" << c.dataset << "\n";
    out << "train_file=" << c.train_file << "\n"
        << "val_file=" << c.val_file << "\n"
        << "output_dir=" << c.output_dir << "\n";
    for (const auto& [k, v] : c.fields) out << "field." << k << "=" << v << "\n";
    return out.str();
}

namespace detail {

inline FieldMap parse_fields(const std::vector<std::string>& specs) {
    FieldMap fields;
    for (const auto& spec : specs) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0 || eq + 1 == spec.size())
            throw ValidationError("--field expects canonical=name, got \"" + spec + "\"");
        const std::string canonical = spec.substr(0, eq);
        if (canonical != "id" && canonical != "query" && canonical != "answer" && canonical != "choices")
            throw ValidationError("--field: unknown record field \"" + canonical + "\"");
        fields[canonical] = spec.substr(eq + 1);
    }
    return fields;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + path.string());
    out << text;
}

inline std::vector<std::string> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open " + path);
    std::vector<std::string> lines;
    for (std::string line; std::getline(in, line);) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (!line.empty()) lines.push_back(line);
    }
    if (lines.empty()) throw ValidationError(path + ": empty corpus");
    return lines;
}

/// The labels shared by every example of a classification gold set.
inline std::vector<std::string> label_set_of(const Dataset& gold) {
    const auto& first = gold.examples.front().choices;
    if (!first) throw ValidationError("classification gold set has no choices");
    for (const auto& ex : gold.examples)
        if (ex.choices != first) throw ValidationError("example " + ex.id + " has a different label set");
    return *first;
}

inline std::string format_double(double v) {
    std::ostringstream out;
    out << std::setprecision(10) << v;
    return out.str();
}

}  // namespace detail

// ---------------------------------------------------------------------------------------------
// Commands

struct SplitArgs {
    std::string config_file;
    std::vector<std::string> fields;
};

inline void cmd_split(const RunConfig& c, std::ostream& out) {
    if (c.dataset.empty()) throw ValidationError("split needs --dataset");
    if (c.output_dir.empty()) throw ValidationError("split needs --output_dir");
    c.split.validate();
    const Dataset data = load_dataset(c.dataset, c.task, c.fields);
    const DatasetSplit parts = split_dataset(data, c.split, c.seed);
    const std::filesystem::path dir(c.output_dir);
    std::filesystem::create_directories(dir);
    save_dataset(parts.train, (dir / "train.jsonl").string());
    save_dataset(parts.val, (dir / "val.jsonl").string());
    save_dataset(parts.test, (dir / "test.jsonl").string());

    nlohmann::ordered_json manifest;
    manifest["source"] = c.dataset;
    manifest["task"] = to_string(c.task);
    manifest["seed"] = c.seed;
    manifest["ratios"] = {{"train", c.split.train_frac}, {"val", c.split.val_frac}, {"test", c.split.test_frac}};
    manifest["counts"] = {{"train", parts.train.size()}, {"val", parts.val.size()}, {"test", parts.test.size()}};
    manifest["files"] = {{"train", "train.jsonl"}, {"val", "val.jsonl"}, {"test", "test.jsonl"}};
    detail::write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    out << "train=" << parts.train.size() << " val=" << parts.val.size() << " test=" << parts.test.size() << "\n";
}

inline void cmd_finetune(const RunConfig& c, std::ostream& out) {
    if (c.train_file.empty() || c.val_file.empty()) throw ValidationError("finetune needs train_file and val_file");
    if (c.output_dir.empty()) throw ValidationError("finetune needs output_dir");
    c.model.validate();
    c.train.validate();
    const Dataset train_set = load_dataset(c.train_file, c.task, c.fields);
    const Dataset val_set = load_dataset(c.val_file, c.task, c.fields);

    Model model = build_model(c.model);
    const std::filesystem::path dir(c.output_dir);
    std::filesystem::create_directories(dir);
    detail::write_text(dir / "run_config.txt", run_config_to_text(c));
    const FinetuneReport report = finetune(model, train_set, val_set, c.train, dir.string());
    const CheckpointRef best = select_best(report);
    load_adapters(model, io::read_file((std::filesystem::path(best.path) / "adapters.bin").string()));
    save_model(model, (dir / "model.qlm").string());

    out << "best_step=" << best.step << "\n"
        << "final_train_loss=" << detail::format_double(report.loss_curve.back().loss) << "\n"
        << "final_val_loss=" << detail::format_double(report.val_curve.back().loss) << "\n"
        << "checkpoint=" << (dir / "model.qlm").string() << "\n";
}

struct GenerateArgs {
    std::string checkpoint;
    std::string dataset;
    std::string output;
    std::string task = "classification";
    std::size_t max_new_tokens = 16;
    std::optional<double> temperature;
    std::uint64_t seed = 0;
    std::vector<std::string> fields;
};

inline void cmd_generate(const GenerateArgs& a, std::ostream& out) {
    const TaskKind task = parse_task_kind(a.task);
    const Model model = load_model(a.checkpoint);
    const Dataset data = load_dataset(a.dataset, task, detail::parse_fields(a.fields));
    GenerateOptions opts;
    if (a.temperature) {
        opts.greedy = false;
        opts.temperature = *a.temperature;
    }
    std::vector<Prediction> predictions;
    for (std::size_t i = 0; i < data.size(); ++i) {
        const auto& ex = data.examples[i];
        opts.seed = a.seed + i;
        predictions.push_back({ex.id, generate(model, build_prompt(ex, task), a.max_new_tokens, opts)});
    }
    const std::string text = predictions_to_jsonl(predictions);
    if (a.output.empty()) {
        out << text;
    } else {
        detail::write_text(a.output, text);
        out << "wrote " << predictions.size() << " predictions to " << a.output << "\n";
    }
}

struct EvaluateArgs {
    std::string predictions;
    std::string gold;
    std::string task = "classification";
    std::string output;
    std::string embeddings;
    std::size_t embedding_dim = 64;
    std::string positive_label;
    std::string checkpoint;
    std::string train;
    std::vector<std::string> external;
    std::vector<std::string> fields;
};

inline void cmd_evaluate(const EvaluateArgs& a, std::ostream& out) {
    const TaskKind task = parse_task_kind(a.task);
    const Dataset gold = load_dataset(a.gold, task, detail::parse_fields(a.fields));
    const std::vector<std::string> predictions = align_predictions(load_predictions(a.predictions), gold);

    MetricReport report;
    if (task == TaskKind::Classification) {
        const auto labels = detail::label_set_of(gold);
        const std::string positive = a.positive_label.empty() ? labels.front() : a.positive_label;
        report = evaluate_classification(predictions, gold, labels, positive);
    } else if (!a.embeddings.empty()) {
        report = evaluate_summarization(predictions, gold, TableEmbedder::load(a.embeddings));
        report.config["embeddings"] = a.embeddings;
    } else {
        report = evaluate_summarization(predictions, gold, HashEmbedder(a.embedding_dim));
        report.config["embeddings"] = "hash";
    }
    if (!a.checkpoint.empty() || !a.train.empty()) {
        if (a.checkpoint.empty() || a.train.empty())
            throw ValidationError("leakage scores need both --checkpoint and --train");
        const Model model = load_model(a.checkpoint);
        const Dataset train = load_dataset(a.train, task, detail::parse_fields(a.fields));
        report.set_dlt(dlt_report(model, corpus_of(train), corpus_of(gold)));
    }
    for (const auto& spec : a.external) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos || eq == 0) throw ValidationError("--external expects name=path");
        attach_external_score(report, spec.substr(0, eq), load_external_scores(spec.substr(eq + 1)), gold);
    }
    const std::string text = report_to_json(report).dump(2) + "\n";
    if (!a.output.empty()) detail::write_text(a.output, text);
    out << text;
}

struct DltArgs {
    std::string checkpoint;
    std::string train;
    std::string test;
    std::string task = "classification";
    std::string format = "jsonl";
    std::vector<std::string> fields;
};

inline void cmd_dlt(const DltArgs& a, std::ostream& out) {
    const Model model = load_model(a.checkpoint);
    auto corpus = [&](const std::string& path) {
        if (a.format == "text") return detail::read_lines(path);
        if (a.format != "jsonl") throw ValidationError("--format must be jsonl or text");
        return corpus_of(load_dataset(path, parse_task_kind(a.task), detail::parse_fields(a.fields)));
    };
    const DltResult r = dlt_report(model, corpus(a.train), corpus(a.test));
    nlohmann::ordered_json j;
    j["ppl_train"] = r.ppl_train;
    j["ppl_test"] = r.ppl_test;
    j["dlt"] = r.dlt;
    out << j.dump(2) << "\n";
}

struct QuantReportArgs {
    std::string checkpoint;
    std::string shape;
    std::string fill = "normal";
    std::size_t block_size = kDefaultBlockSize;
    std::string output;
};

struct QuantRow {
    std::string tensor;
    QuantMode mode;
    ErrorStats stats;
};

inline std::vector<QuantRow> quant_rows(const std::vector<NamedMatrix>& tensors, std::size_t block_size) {
    std::vector<QuantRow> rows;
    for (const auto& t : tensors)
        for (QuantMode mode : {QuantMode::LinearAbsmax4, QuantMode::NF4, QuantMode::LinearAbsmax8})
            rows.push_back({t.name, mode, quant_error_report(t.value, quantize_tensor(t.value, block_size, mode))});
    return rows;
}

inline void cmd_quant_report(const RunConfig& c, const QuantReportArgs& a, std::ostream& out) {
    std::vector<NamedMatrix> tensors;
    if (!a.shape.empty()) {
        const auto x = a.shape.find('x');
        if (x == std::string::npos) throw ValidationError("--shape expects ROWSxCOLS");
        const std::size_t rows = detail::parse_count("shape", a.shape.substr(0, x));
        const std::size_t cols = detail::parse_count("shape", a.shape.substr(x + 1));
        if (rows == 0 || cols == 0) throw ValidationError("--shape dimensions must be positive");
        Matrix m(rows, cols);
        if (a.fill == "normal") {
            std::mt19937_64 rng(c.seed);
            std::normal_distribution<double> normal(0.0, 1.0);
            for (double& v : m.flat()) v = normal(rng);
        } else if (a.fill != "zero") {
            throw ValidationError("--fill must be normal or zero");
        }
        tensors.push_back({"random", std::move(m)});
    } else {
        // Base weights are a pure function of the config, so a checkpoint's full-precision weights
        // can be redrawn and checked against its stored codes.
        ModelConfig mc = c.model;
        std::optional<Model> stored;
        if (!a.checkpoint.empty()) {
            stored = load_model(a.checkpoint);
            mc = stored->config;
        }
        BaseWeights base = draw_base_weights(mc);
        if (stored) {
            const auto projections = stored->projections();
            for (std::size_t i = 0; i < projections.size(); ++i) {
                if (quantize_tensor(base.projections[i].value, mc.quant_block_size, mc.quant_mode) !=
                    projections[i]->weight)
                    throw ValidationError("checkpoint base weights do not match its seed and config");
            }
        }
        tensors = std::move(base.projections);
    }
    const auto rows = quant_rows(tensors, a.block_size);

    nlohmann::ordered_json j = nlohmann::ordered_json::array();
    out << std::left << std::setw(22) << "tensor" << std::setw(9) << "mode" << std::setw(16) << "max_abs_error"
        << std::setw(16) << "mse" << "memory_ratio\n";
    for (const auto& r : rows) {
        out << std::left << std::setw(22) << r.tensor << std::setw(9) << to_string(r.mode) << std::setw(16)
            << detail::format_double(r.stats.max_abs_error) << std::setw(16)
            << detail::format_double(r.stats.mean_squared_error) << detail::format_double(r.stats.memory_ratio)
            << "\n";
        j.push_back({{"tensor", r.tensor},
                     {"mode", to_string(r.mode)},
                     {"max_abs_error", r.stats.max_abs_error},
                     {"mse", r.stats.mean_squared_error},
                     {"memory_ratio", r.stats.memory_ratio}});
    }
    if (!a.output.empty()) detail::write_text(a.output, j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------------------------
// Entry point

inline int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Quantized low-rank adapter fine-tuning at desk scale", "qlora"};
    app.require_subcommand(1);

    std::map<std::string, std::string> flag_values;
    std::string config_file;
    std::vector<std::string> field_specs;
    auto add_config_options = [&](CLI::App* sub, const std::vector<std::string>& keys) {
        sub->add_option("--config", config_file, "key=value config file; flags override it");
        for (const auto& key : keys) sub->add_option("--" + key, flag_values[key]);
        sub->add_option("--field", field_specs, "Map a record field: canonical=name");
    };

    auto* split = app.add_subcommand("split", "Shuffle a dataset and cut train/val/test files");
    add_config_options(split, {"dataset", "task", "train_frac", "val_frac", "test_frac", "seed", "output_dir"});

    auto* finetune_cmd = app.add_subcommand("finetune", "Train adapters and keep the best checkpoint");
    add_config_options(finetune_cmd, config_keys());

    GenerateArgs gen;
    auto* generate_cmd = app.add_subcommand("generate", "Write predictions for every example of a dataset");
    generate_cmd->add_option("--checkpoint", gen.checkpoint)->required();
    generate_cmd->add_option("--dataset", gen.dataset)->required();
    generate_cmd->add_option("--task", gen.task);
    generate_cmd->add_option("--output", gen.output);
    generate_cmd->add_option("--max_new_tokens", gen.max_new_tokens);
    generate_cmd->add_option("--temperature", gen.temperature, "Sample instead of greedy decoding");
    generate_cmd->add_option("--seed", gen.seed);
    generate_cmd->add_option("--field", gen.fields);

    EvaluateArgs ev;
    auto* evaluate_cmd = app.add_subcommand("evaluate", "Score predictions against gold answers");
    evaluate_cmd->add_option("--predictions", ev.predictions)->required();
    evaluate_cmd->add_option("--gold", ev.gold)->required();
    evaluate_cmd->add_option("--task", ev.task);
    evaluate_cmd->add_option("--output", ev.output);
    evaluate_cmd->add_option("--embeddings", ev.embeddings, "Token-vector table for BERTScore");
    evaluate_cmd->add_option("--embedding_dim", ev.embedding_dim);
    evaluate_cmd->add_option("--positive_label", ev.positive_label);
    evaluate_cmd->add_option("--checkpoint", ev.checkpoint, "Adds perplexities and DLT");
    evaluate_cmd->add_option("--train", ev.train, "Training split for the leakage scores");
    evaluate_cmd->add_option("--external", ev.external, "Imported per-example scores: name=path");
    evaluate_cmd->add_option("--field", ev.fields);

    DltArgs dl;
    auto* dlt_cmd = app.add_subcommand("dlt", "Perplexity gap between a test and a train corpus");
    dlt_cmd->add_option("--checkpoint", dl.checkpoint)->required();
    dlt_cmd->add_option("--train", dl.train)->required();
    dlt_cmd->add_option("--test", dl.test)->required();
    dlt_cmd->add_option("--task", dl.task);
    dlt_cmd->add_option("--format", dl.format, "jsonl (dataset records) or text (one document per line)");
    dlt_cmd->add_option("--field", dl.fields);

    QuantReportArgs qr;
    auto* quant_cmd = app.add_subcommand("quant-report", "Quantization error per tensor and mode");
    add_config_options(quant_cmd, config_keys());
    quant_cmd->add_option("--checkpoint", qr.checkpoint);
    quant_cmd->add_option("--shape", qr.shape, "Random ROWSxCOLS matrix instead of model tensors");
    quant_cmd->add_option("--fill", qr.fill, "normal or zero, for --shape");
    quant_cmd->add_option("--block_size", qr.block_size);
    quant_cmd->add_option("--output", qr.output, "Also write the rows as JSON");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::CallForAllHelp& e) {
        out << app.help("", CLI::AppFormatMode::All);
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    }

    auto resolve = [&](CLI::App* sub) {
        RunConfig c;
        if (!config_file.empty()) {
            std::ifstream in(config_file);
            if (!in) throw ValidationError("cannot open config " + config_file);
            std::ostringstream text;
            text << in.rdbuf();
            apply_config_text(c, text.str(), config_file);
        }
        // seed first so later keys see it; order otherwise follows config_keys().
        for (const std::string key : {"seed"}) {
            if (auto* opt = sub->get_option_no_throw("--" + key); opt && opt->count() > 0)
                apply_setting(c, key, flag_values[key]);
        }
        for (const auto& key : config_keys()) {
            if (key == "seed") continue;
            if (auto* opt = sub->get_option_no_throw("--" + key); opt && opt->count() > 0)
                apply_setting(c, key, flag_values[key]);
        }
        for (const auto& [k, v] : detail::parse_fields(field_specs)) c.fields[k] = v;
        return c;
    };

    try {
        if (split->parsed()) cmd_split(resolve(split), out);
        else if (finetune_cmd->parsed()) cmd_finetune(resolve(finetune_cmd), out);
        else if (generate_cmd->parsed()) cmd_generate(gen, out);
        else if (evaluate_cmd->parsed()) cmd_evaluate(ev, out);
        else if (dlt_cmd->parsed()) cmd_dlt(dl, out);
        else if (quant_cmd->parsed()) cmd_quant_report(resolve(quant_cmd), qr, out);
    } catch (const ValidationError& e) {
        err << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    std::vector<std::string> args;
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    return run(args, out, err);
}

}  // namespace qlora::cli
