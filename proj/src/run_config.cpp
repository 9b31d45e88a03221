#include "chorus/run_config.hpp"

#include <filesystem>
#include <fstream>

#include "chorus/error.hpp"

namespace chorus::cli {

using nlohmann::json;

json RunConfig::to_json() const {
    json train_section = train.to_json();
    train_section["corpus"] = corpus_path;
    train_section["model"] = json{{"layers", model_layers},
                                  {"heads", model_heads},
                                  {"model_dim", model_dim},
                                  {"mlp_mult", model_mlp_mult}};
    train_section["vocab_pieces"] = vocab_pieces;

    json sim_section{{"strategy", simulator::strategy_name(sim.strategy)},
                     {"max_turns", sim.max_turns},
                     {"exclude_previous_speaker", sim.exclude_previous_speaker},
                     {"end_token", sim.end_token},
                     {"max_retries", sim.max_retries},
                     {"max_wall_seconds", sim.max_wall_seconds},
                     {"allow_unknown_roles", sim.allow_unknown_roles},
                     {"concurrent_probes", sim.concurrent_probes},
                     {"generation",
                      json{{"max_new_tokens", sim.generation.max_new_tokens},
                           {"temperature", sim.generation.temperature},
                           {"top_p", sim.generation.top_p},
                           {"stop_strings", sim.generation.stop_strings},
                           {"seed", sim.generation.seed}}},
                     {"scene_file", scene_file},
                     {"seed_dialogue", seed_dialogue},
                     {"roles", roles}};

    return json{{"command", command},
                {"template", template_name},
                {"backend", backend_kind},
                {"checkpoint", checkpoint},
                {"out_dir", out_dir},
                {"ingest", json{{"in", in_path},
                                {"out", out_path},
                                {"max_utterances", max_utterances},
                                {"max_roles", max_roles},
                                {"merge_adjacent", merge_adjacent},
                                {"strict", strict}}},
                {"train", train_section},
                {"simulate", sim_section},
                {"eval", json{{"task", task},
                              {"strategy", eval_strategy},
                              {"corpus", corpus_path},
                              {"transcript", transcript_path},
                              {"characters", characters}}}};
}

void RunConfig::apply_json(const json& j) {
    template_name = j.value("template", template_name);
    backend_kind = j.value("backend", backend_kind);
    checkpoint = j.value("checkpoint", checkpoint);
    out_dir = j.value("out_dir", out_dir);

    if (j.contains("ingest")) {
        const json& s = j.at("ingest");
        in_path = s.value("in", in_path);
        out_path = s.value("out", out_path);
        max_utterances = s.value("max_utterances", max_utterances);
        max_roles = s.value("max_roles", max_roles);
        merge_adjacent = s.value("merge_adjacent", merge_adjacent);
        strict = s.value("strict", strict);
    }
    if (j.contains("train")) {
        const json& s = j.at("train");
        train = trainer::TrainConfig::from_json(s);
        corpus_path = s.value("corpus", corpus_path);
        if (s.contains("model")) {
            const json& m = s.at("model");
            model_layers = m.value("layers", model_layers);
            model_heads = m.value("heads", model_heads);
            model_dim = m.value("model_dim", model_dim);
            model_mlp_mult = m.value("mlp_mult", model_mlp_mult);
        }
        vocab_pieces = s.value("vocab_pieces", vocab_pieces);
    }
    if (j.contains("simulate")) {
        const json& s = j.at("simulate");
        if (s.contains("strategy")) {
            sim.strategy = simulator::strategy_from_name(s.at("strategy").get<std::string>());
        }
        sim.max_turns = s.value("max_turns", sim.max_turns);
        sim.exclude_previous_speaker =
            s.value("exclude_previous_speaker", sim.exclude_previous_speaker);
        sim.end_token = s.value("end_token", sim.end_token);
        sim.max_retries = s.value("max_retries", sim.max_retries);
        sim.max_wall_seconds = s.value("max_wall_seconds", sim.max_wall_seconds);
        sim.allow_unknown_roles = s.value("allow_unknown_roles", sim.allow_unknown_roles);
        sim.concurrent_probes = s.value("concurrent_probes", sim.concurrent_probes);
        if (s.contains("generation")) {
            const json& g = s.at("generation");
            sim.generation.max_new_tokens =
                g.value("max_new_tokens", sim.generation.max_new_tokens);
            sim.generation.temperature = g.value("temperature", sim.generation.temperature);
            sim.generation.top_p = g.value("top_p", sim.generation.top_p);
            sim.generation.stop_strings =
                g.value("stop_strings", sim.generation.stop_strings);
            sim.generation.seed = g.value("seed", sim.generation.seed);
        }
        scene_file = s.value("scene_file", scene_file);
        seed_dialogue = s.value("seed_dialogue", seed_dialogue);
        roles = s.value("roles", roles);
    }
    if (j.contains("eval")) {
        const json& s = j.at("eval");
        task = s.value("task", task);
        eval_strategy = s.value("strategy", eval_strategy);
        corpus_path = s.value("corpus", corpus_path);
        transcript_path = s.value("transcript", transcript_path);
        characters = s.value("characters", characters);
    }
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error::validation("cannot open config file " + path);
    }
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw Error::parse("config file " + path + ": " + e.what());
    }
    RunConfig config;
    config.apply_json(j);
    return config;
}

void write_snapshot(const RunConfig& config, const std::string& dir) {
    const std::string where = dir.empty() ? "." : dir;
    std::filesystem::create_directories(where);
    const std::string path = where + "/resolved_config.json";
    std::ofstream out(path);
    if (!out) {
        throw Error::validation("cannot write config snapshot to " + path);
    }
    out << config.to_json().dump(2) << "\n";
}

}  // namespace chorus::cli
