#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "chorus/simulator.hpp"
#include "chorus/trainer.hpp"

namespace chorus::cli {

// Everything a command needs, resolved from defaults, then an optional config
// file, then command-line flags. The merged result is snapshotted next to the
// outputs as resolved_config.json; re-running with that snapshot reproduces
// the run. Backend credentials stay in the environment and never appear here.
struct RunConfig {
    std::string command;
    std::string template_name = "chatml-like";
    std::string backend_kind = "toy";  // toy | remote
    std::string checkpoint;
    std::string out_dir = ".";

    // ingest
    std::string in_path;
    std::string out_path;
    int max_utterances = 10;
    int max_roles = 7;
    bool merge_adjacent = true;
    bool strict = false;

    // train (also: eval reuses corpus_path)
    std::string corpus_path;
    trainer::TrainConfig train;
    int model_layers = 2;
    int model_heads = 2;
    int model_dim = 32;
    int model_mlp_mult = 4;
    int vocab_pieces = 512;

    // simulate
    simulator::SimulatorConfig sim;
    std::string scene_file;
    std::string seed_dialogue;
    std::vector<std::string> roles;

    // eval
    std::string task = "speaker";  // speaker | judge-prompt
    std::string eval_strategy = "both";
    std::string transcript_path;
    std::vector<std::string> characters;

    nlohmann::json to_json() const;
    void apply_json(const nlohmann::json& j);  // overrides fields present in j
};

RunConfig load_run_config(const std::string& path);
void write_snapshot(const RunConfig& config, const std::string& dir);

}  // namespace chorus::cli
