#include "chorus/cli.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "chorus/backend.hpp"
#include "chorus/checkpoint.hpp"
#include "chorus/corpus.hpp"
#include "chorus/error.hpp"
#include "chorus/eval.hpp"
#include "chorus/remote_backend.hpp"
#include "chorus/run_config.hpp"
#include "chorus/simulator.hpp"
#include "chorus/trainer.hpp"

namespace chorus::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::validation:
        case ErrorKind::parse:
        case ErrorKind::contract:
            return 2;
        case ErrorKind::capability:
        case ErrorKind::transport:
            return 3;
        case ErrorKind::internal:
            return 1;
    }
    return 1;
}

std::optional<std::string> find_config_arg(int argc, const char* const* argv) {
    for (int i = 1; i < argc; ++i) {
        const std::string_view arg = argv[i];
        if (arg == "--config" && i + 1 < argc) {
            return std::string(argv[i + 1]);
        }
        if (arg.rfind("--config=", 0) == 0) {
            return std::string(arg.substr(9));
        }
    }
    return std::nullopt;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error::validation("cannot open " + path);
    }
    std::ostringstream buf;
    buf << in.rdbuf();
    std::string text = buf.str();
    while (!text.empty() && (text.back() == '\n' || text.back() == '\r')) {
        text.pop_back();
    }
    return text;
}

std::vector<corpus::Message> read_messages_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error::validation("cannot open " + path);
    }
    std::vector<corpus::Message> messages;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            const json j = json::parse(line);
            messages.push_back(corpus::Message{j.at("role").get<std::string>(),
                                               j.at("content").get<std::string>()});
        } catch (const json::exception& e) {
            throw Error::parse(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return messages;
}

std::unique_ptr<backend::ModelBackend> make_backend(const RunConfig& config) {
    if (config.backend_kind == "toy") {
        if (config.checkpoint.empty()) {
            throw Error::validation("toy backend needs --checkpoint");
        }
        return std::make_unique<backend::ToyBackend>(
            backend::ToyBackend::from_checkpoint(config.checkpoint));
    }
    if (config.backend_kind == "remote") {
        backend::RemoteConfig remote;
        remote.resolve_env();
        return std::make_unique<backend::RemoteBackend>(std::move(remote));
    }
    throw Error::validation("unknown backend '" + config.backend_kind +
                            "' (expected toy or remote)");
}

std::vector<corpus::Role> cast_from_names(const std::vector<std::string>& names) {
    std::vector<corpus::Role> cast;
    for (const std::string& name : names) {
        const bool dup = std::any_of(cast.begin(), cast.end(),
                                     [&](const corpus::Role& r) { return r.name == name; });
        if (dup) {
            throw Error::validation("duplicate role name '" + name + "'");
        }
        cast.push_back(corpus::Role{name, static_cast<int>(cast.size())});
    }
    return cast;
}

std::string method_file_tag(std::string method) {
    std::replace(method.begin(), method.end(), '[', '_');
    method.erase(std::remove(method.begin(), method.end(), ']'), method.end());
    return method;
}

int cmd_ingest(RunConfig& config) {
    if (config.in_path.empty() || config.out_path.empty()) {
        throw Error::validation("ingest needs input and output paths");
    }
    corpus::LoadOptions options;
    options.ingest.max_roles = config.max_roles;
    options.ingest.merge_adjacent = config.merge_adjacent;
    options.max_utterances_per_clip = config.max_utterances;
    options.strict = config.strict;
    const corpus::Corpus loaded = corpus::load_corpus(config.in_path, options);

    corpus::write_corpus_jsonl(loaded, config.out_path);
    corpus::write_stats_json(loaded.stats, config.out_path + ".stats.json");
    std::string snapshot_dir = fs::path(config.out_path).parent_path().string();
    write_snapshot(config, snapshot_dir);

    std::cout << "clips=" << loaded.stats.clips << " utterances=" << loaded.stats.utterances
              << " skipped_records=" << loaded.stats.errors << "\n";
    for (const corpus::LineError& err : loaded.errors) {
        std::cerr << config.in_path << ":" << err.line << ": " << err.message << "\n";
    }
    return loaded.errors.empty() ? 0 : 4;
}

int cmd_train(RunConfig& config) {
    if (config.corpus_path.empty()) {
        throw Error::validation("train needs a corpus path");
    }
    config.train.validate();
    corpus::LoadOptions load;
    load.strict = true;
    const corpus::Corpus loaded = corpus::load_corpus(config.corpus_path, load);
    if (loaded.samples.empty()) {
        throw Error::validation("train: corpus " + config.corpus_path + " is empty");
    }
    const text::ChatTemplate tpl(text::lookup_template(config.template_name));

    std::unique_ptr<backend::ModelBackend> be;
    if (config.backend_kind == "toy" && (config.checkpoint.empty() ||
                                         config.train.ablations.from_base)) {
        std::vector<std::string> texts;
        for (const corpus::DialogueSample& sample : loaded.samples) {
            texts.push_back(sample.scene.text);
            for (const corpus::Utterance& u : sample.utterances) {
                texts.push_back(u.text);
            }
            for (const corpus::Role& role : sample.roles) {
                texts.push_back(role.name);
            }
        }
        const auto pieces = text::Tokenizer::collect_pieces(
            texts, static_cast<std::size_t>(config.vocab_pieces));
        text::Tokenizer tokenizer(tpl.special_tokens(), pieces);
        tpl.validate_atomic(tokenizer);

        model::ToyLMConfig shape;
        shape.layers = config.model_layers;
        shape.heads = config.model_heads;
        shape.model_dim = config.model_dim;
        shape.mlp_mult = config.model_mlp_mult;
        shape.window = static_cast<int>(config.train.window);
        shape.vocab_size = tokenizer.vocab_size();
        be = std::make_unique<backend::ToyBackend>(model::ToyModel(shape, config.train.seed),
                                                   std::move(tokenizer));
    } else {
        be = make_backend(config);
    }

    config.train.diagnostics_dir = config.out_dir.empty() ? "." : config.out_dir;
    fs::create_directories(config.train.diagnostics_dir);
    trainer::TrainReport report = trainer::train(loaded.samples, *be, tpl, config.train);

    const std::string ckpt_path = config.train.diagnostics_dir + "/checkpoint.bin";
    model::save_checkpoint(ckpt_path, *be->trainable_model(), *be->local_tokenizer());
    report.checkpoint_path = ckpt_path;
    trainer::write_report_jsonl(report, config.train.diagnostics_dir + "/train_report.jsonl");
    write_snapshot(config, config.train.diagnostics_dir);

    std::cout << "steps=" << report.steps.size() << " final_loss=" << report.final_loss
              << " wall_seconds=" << report.wall_seconds << " checkpoint=" << ckpt_path << "\n";
    return 0;
}

int cmd_simulate(RunConfig& config) {
    config.sim.validate();
    const text::ChatTemplate tpl(text::lookup_template(config.template_name));
    auto be = make_backend(config);

    corpus::Scene scene;
    std::vector<corpus::Role> cast;
    std::vector<corpus::Utterance> seed;
    if (!config.seed_dialogue.empty()) {
        const auto messages = read_messages_jsonl(config.seed_dialogue);
        corpus::IngestOptions ingest;
        ingest.max_roles = config.max_roles;
        const corpus::DialogueSample sample = corpus::ingest_sample(messages, ingest);
        scene = sample.scene;
        if (config.roles.empty()) {
            cast = sample.roles;
            seed = sample.utterances;
        } else {
            cast = cast_from_names(config.roles);
            std::vector<int> remap(sample.roles.size(), -1);
            for (std::size_t i = 0; i < sample.roles.size(); ++i) {
                const auto it = std::find_if(
                    cast.begin(), cast.end(),
                    [&](const corpus::Role& r) { return r.name == sample.roles[i].name; });
                if (it == cast.end()) {
                    throw Error::validation("seed dialogue role '" + sample.roles[i].name +
                                            "' is not in --roles");
                }
                remap[i] = it->index;
            }
            seed = sample.utterances;
            for (corpus::Utterance& u : seed) {
                u.role_index = remap[static_cast<std::size_t>(u.role_index)];
            }
        }
    } else {
        if (config.roles.empty()) {
            throw Error::validation("simulate needs --roles or --seed-dialogue");
        }
        cast = cast_from_names(config.roles);
    }
    if (!config.scene_file.empty()) {
        scene = corpus::Scene{read_text_file(config.scene_file), false};
    } else if (scene.text.empty()) {
        std::vector<std::string> names;
        for (const corpus::Role& role : cast) names.push_back(role.name);
        scene = corpus::default_scene(names);
    }

    const simulator::Transcript transcript =
        simulator::run(scene, seed, cast, config.sim, *be, tpl);

    const std::string out_dir = config.out_dir.empty() ? "." : config.out_dir;
    fs::create_directories(out_dir);
    simulator::write_transcript_text(transcript, out_dir + "/transcript.txt");
    simulator::write_transcript_jsonl(transcript, out_dir + "/transcript.jsonl");
    write_snapshot(config, out_dir);

    std::cout << simulator::format_transcript(transcript);
    std::cout << "stop_reason=" << transcript.stop_reason << "\n";
    if (transcript.partial) {
        std::cerr << "partial transcript: " << transcript.error << "\n";
        return 4;
    }
    return 0;
}

int cmd_eval(RunConfig& config) {
    const text::ChatTemplate tpl(text::lookup_template(config.template_name));
    const std::string out_dir = config.out_dir.empty() ? "." : config.out_dir;

    if (config.task == "judge-prompt") {
        if (config.transcript_path.empty()) {
            throw Error::validation("judge-prompt needs --transcript");
        }
        const simulator::Transcript transcript =
            simulator::read_transcript_jsonl(config.transcript_path);
        std::vector<std::string> characters = config.characters;
        if (characters.empty()) {
            for (const corpus::Role& role : transcript.roles) {
                characters.push_back(role.name);
            }
        }
        std::string scene = transcript.scene.text;
        if (!config.scene_file.empty()) {
            scene = read_text_file(config.scene_file);
        }
        const std::string prompt = eval::build_judge_prompt(transcript, characters, scene);
        fs::create_directories(out_dir);
        const std::string out_path = out_dir + "/judge_prompt.txt";
        std::ofstream out(out_path, std::ios::binary);
        if (!out) {
            throw Error::validation("cannot write " + out_path);
        }
        out << prompt;
        write_snapshot(config, out_dir);
        std::cout << prompt;
        return 0;
    }
    if (config.task != "speaker") {
        throw Error::validation("unknown eval task '" + config.task +
                                "' (expected speaker or judge-prompt)");
    }

    if (config.corpus_path.empty()) {
        throw Error::validation("eval needs a corpus path");
    }
    corpus::LoadOptions load;
    load.strict = true;
    const corpus::Corpus loaded = corpus::load_corpus(config.corpus_path, load);
    auto be = make_backend(config);

    bool run_speaker = false;
    bool run_silence = false;
    if (config.eval_strategy == "both") {
        run_speaker = run_silence = true;
    } else if (config.eval_strategy == "speaker" ||
               config.eval_strategy == "speaker_predictor") {
        run_speaker = true;
    } else if (config.eval_strategy == "silence" ||
               config.eval_strategy == "silence_switcher") {
        run_silence = true;
    } else {
        throw Error::validation("unknown eval strategy '" + config.eval_strategy +
                                "' (expected speaker, silence, or both)");
    }

    std::vector<eval::AccuracyReport> reports;
    eval::EvalOptions options;
    options.generation = config.sim.generation;
    if (run_speaker) {
        reports.push_back(eval::next_speaker_accuracy(
            loaded.samples, *be, tpl, simulator::Strategy::speaker_predictor, options));
    }
    if (run_silence) {
        for (const bool exclude : {true, false}) {
            options.exclude_previous_speaker = exclude;
            reports.push_back(eval::next_speaker_accuracy(
                loaded.samples, *be, tpl, simulator::Strategy::silence_switcher, options));
        }
    }

    fs::create_directories(out_dir);
    for (const eval::AccuracyReport& report : reports) {
        const std::string method = report.records.front().method;
        eval::write_prediction_records(
            report, out_dir + "/predictions_" + method_file_tag(method) + ".jsonl");
        std::cout << method << ": " << report.formatted() << "% (" << report.correct << "/"
                  << report.total << ", " << report.errored << " errored)\n";
    }
    write_snapshot(config, out_dir);
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
    RunConfig config;
    try {
        if (const auto config_path = find_config_arg(argc, argv)) {
            config = load_run_config(*config_path);
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e.kind());
    }

    CLI::App app{"multi-party dialogue fine-tuning, simulation, and evaluation"};
    app.require_subcommand(1);
    std::string config_file;  // applied above; registered so it parses and shows in help
    app.add_option("--config", config_file, "JSON config file (flags override it)");

    std::string train_strategy;
    std::vector<std::string> ablations;
    std::string sim_strategy;

    CLI::App* ingest = app.add_subcommand("ingest", "normalize raw messages into dialogue clips");
    ingest->add_option("in", config.in_path, "raw JSONL input");
    ingest->add_option("out", config.out_path, "normalized corpus output");
    ingest->add_option("--config", config_file, "JSON config file (flags override it)");
    ingest->add_option("--max-utterances", config.max_utterances, "utterances per clip");
    ingest->add_option("--max-roles", config.max_roles, "distinct roles per clip");
    ingest->add_flag("--strict", config.strict, "fail on the first bad record");
    ingest->add_flag("--merge-adjacent,!--no-merge-adjacent", config.merge_adjacent,
                     "merge consecutive same-role turns instead of rejecting them");

    CLI::App* train = app.add_subcommand("train", "fine-tune the bundled model on a corpus");
    train->add_option("corpus", config.corpus_path, "normalized corpus JSONL");
    train->add_option("--config", config_file, "JSON config file (flags override it)");
    train->add_option("--backend", config.backend_kind, "toy | remote");
    train->add_option("--checkpoint", config.checkpoint, "starting weights (omit to init fresh)");
    train->add_option("--template", config.template_name, "chat template name or spec file");
    train->add_option("--out-dir", config.out_dir, "output directory");
    train->add_option("--strategy", train_strategy,
                      "base | speaker_predictor | silence_switcher | utterance_level");
    train->add_option("--ablation", ablations,
                      "utterance_level, without_scene, from_base (repeatable)");
    train->add_option("--lr", config.train.lr, "learning rate");
    train->add_option("--batch-size", config.train.batch_size, "instances per step");
    train->add_option("--epochs", config.train.epochs, "training epochs");
    train->add_option("--schedule", config.train.schedule, "cosine | constant");
    train->add_option("--weight-decay", config.train.weight_decay, "decoupled weight decay");
    train->add_option("--warmup-fraction", config.train.warmup_fraction,
                      "fraction of steps spent warming up");
    train->add_option("--window", config.train.window, "token window");
    train->add_option("--seed", config.train.seed, "training seed");
    train->add_flag("--mask-own-history", config.train.mask_own_history,
                    "drop each role's first utterance from its own supervision");
    train->add_option("--layers", config.model_layers, "fresh model: transformer blocks");
    train->add_option("--heads", config.model_heads, "fresh model: attention heads");
    train->add_option("--model-dim", config.model_dim, "fresh model: embedding width");
    train->add_option("--mlp-mult", config.model_mlp_mult, "fresh model: MLP width multiple");
    train->add_option("--vocab-pieces", config.vocab_pieces, "fresh tokenizer: word piece cap");

    CLI::App* simulate = app.add_subcommand("simulate", "run a multi-party dialogue");
    simulate->add_option("--config", config_file, "JSON config file (flags override it)");
    simulate->add_option("--strategy", sim_strategy, "speaker | silence");
    simulate->add_option("--max-turns", config.sim.max_turns, "total turns including the seed");
    simulate->add_option("--scene-file", config.scene_file, "scene text file");
    simulate->add_option("--seed-dialogue", config.seed_dialogue,
                         "JSONL of {role, content} opening turns");
    simulate->add_option("--roles", config.roles, "participant names")->delimiter(',');
    simulate->add_option("--backend", config.backend_kind, "toy | remote");
    simulate->add_option("--checkpoint", config.checkpoint, "toy backend weights");
    simulate->add_option("--template", config.template_name, "chat template name or spec file");
    simulate->add_option("--out-dir", config.out_dir, "output directory");
    simulate->add_option("--max-new-tokens", config.sim.generation.max_new_tokens,
                         "per-turn generation budget");
    simulate->add_option("--temperature", config.sim.generation.temperature,
                         "0 = greedy");
    simulate->add_option("--top-p", config.sim.generation.top_p, "nucleus mass");
    simulate->add_option("--seed", config.sim.generation.seed, "sampling seed");
    simulate->add_option("--end-token", config.sim.end_token,
                         "text marker that ends the dialogue");
    simulate->add_option("--max-retries", config.sim.max_retries,
                         "resamples after a rejected turn");
    simulate->add_option("--max-wall-seconds", config.sim.max_wall_seconds,
                         "wall clock budget, 0 = unbounded");
    simulate->add_flag("--allow-unknown-roles", config.sim.allow_unknown_roles,
                       "admit generated speakers that are not in the cast");
    simulate->add_flag("--exclude-previous,!--include-previous",
                       config.sim.exclude_previous_speaker,
                       "bar the previous speaker from speaking twice in a row");
    simulate->add_flag("--concurrent-probes", config.sim.concurrent_probes,
                       "score silence candidates in parallel");

    CLI::App* evaluate =
        app.add_subcommand("eval", "score next-speaker prediction or emit a judge prompt");
    evaluate->add_option("corpus", config.corpus_path, "held-out corpus JSONL");
    evaluate->add_option("--config", config_file, "JSON config file (flags override it)");
    evaluate->add_option("--task", config.task, "speaker | judge-prompt");
    evaluate->add_option("--strategy", config.eval_strategy, "speaker | silence | both");
    evaluate->add_option("--backend", config.backend_kind, "toy | remote");
    evaluate->add_option("--checkpoint", config.checkpoint, "toy backend weights");
    evaluate->add_option("--template", config.template_name, "chat template name or spec file");
    evaluate->add_option("--out-dir", config.out_dir, "output directory");
    evaluate->add_option("--max-new-tokens", config.sim.generation.max_new_tokens,
                         "per-prediction generation budget");
    evaluate->add_option("--transcript", config.transcript_path,
                         "transcript JSONL for judge-prompt");
    evaluate->add_option("--characters", config.characters, "judge-prompt character list")
        ->delimiter(',');
    evaluate->add_option("--scene-file", config.scene_file, "judge-prompt scene override");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == 0) {
            return app.exit(e);  // --help
        }
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (!train_strategy.empty()) {
            config.train.strategy = masking::strategy_from_name(train_strategy);
        }
        for (const std::string& name : ablations) {
            if (name == "utterance_level") {
                config.train.ablations.utterance_level = true;
            } else if (name == "without_scene") {
                config.train.ablations.without_scene = true;
            } else if (name == "from_base") {
                config.train.ablations.from_base = true;
            } else {
                throw Error::validation("unknown ablation '" + name + "'");
            }
        }
        if (!sim_strategy.empty()) {
            config.sim.strategy = simulator::strategy_from_name(sim_strategy);
        }

        if (ingest->parsed()) {
            config.command = "ingest";
            return cmd_ingest(config);
        }
        if (train->parsed()) {
            config.command = "train";
            return cmd_train(config);
        }
        if (simulate->parsed()) {
            config.command = "simulate";
            return cmd_simulate(config);
        }
        config.command = "eval";
        return cmd_eval(config);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}

}  // namespace chorus::cli
