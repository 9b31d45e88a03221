#pragma once

#include <map>
#include <string>
#include <vector>

#include "chorus/backend.hpp"
#include "chorus/chat_template.hpp"
#include "chorus/corpus.hpp"

namespace chorus::simulator {

enum class Strategy { speaker_predictor, silence_switcher };

const char* strategy_name(Strategy strategy);
Strategy strategy_from_name(const std::string& name);

struct SimulatorConfig {
    Strategy strategy = Strategy::speaker_predictor;
    int max_turns = 8;
    backend::GenerationParams generation;
    bool exclude_previous_speaker = true;
    std::string end_token;       // early-stop marker in generated text; empty = none
    int max_retries = 3;         // resamples after a failed attempt
    double max_wall_seconds = 0; // 0 = unbounded
    bool allow_unknown_roles = false;
    bool concurrent_probes = false;

    void validate() const;
};

struct DialogueState {
    corpus::Scene scene;
    std::vector<corpus::Role> roles;
    std::vector<corpus::Utterance> history;
};

struct SelectionInfo {
    std::string method;  // "seed", "speaker_predictor", "silence_switcher"
    std::map<std::string, double> silence_logprobs;
    std::string parsed_header;
    int resamples = 0;
};

struct TranscriptRecord {
    int turn = 0;
    std::string role;
    std::string utterance;
    SelectionInfo selection;
};

struct Transcript {
    corpus::Scene scene;
    std::vector<corpus::Role> roles;
    std::vector<TranscriptRecord> records;
    std::string stop_reason;  // "max_turns", "end_token", "wall_time", "error"
    bool partial = false;
    std::string error;
};

// Candidate roles in role-index order with their silence-token logprobs;
// argmin picks the next speaker, ties falling to the lowest index.
struct SilenceTable {
    std::vector<std::pair<corpus::Role, double>> entries;

    std::map<std::string, double> as_map() const;
    const corpus::Role& argmin() const;  // throws on empty
};

SilenceTable per_role_silence_table(const DialogueState& state,
                                    backend::ModelBackend& backend,
                                    const text::ChatTemplate& tpl,
                                    bool exclude_previous_speaker,
                                    bool concurrent = false);

struct StepResult {
    corpus::Role role;
    std::string utterance;
    SelectionInfo selection;
    bool end_of_dialogue = false;
};

// Generates from the headerless prefix and parses role + utterance out of
// the model's own header.
StepResult step_speaker_predictor(DialogueState& state, backend::ModelBackend& backend,
                                  const text::ChatTemplate& tpl, const SimulatorConfig& config);

// Scores the silence token under each candidate header, speaks the argmin
// role, then generates its utterance.
StepResult step_silence_switcher(DialogueState& state, backend::ModelBackend& backend,
                                 const text::ChatTemplate& tpl, const SimulatorConfig& config);

Transcript run(const corpus::Scene& scene, const std::vector<corpus::Utterance>& seed,
               const std::vector<corpus::Role>& roles, const SimulatorConfig& config,
               backend::ModelBackend& backend, const text::ChatTemplate& tpl);

std::string format_transcript(const Transcript& transcript);
void write_transcript_text(const Transcript& transcript, const std::string& path);
void write_transcript_jsonl(const Transcript& transcript, const std::string& path);
Transcript read_transcript_jsonl(const std::string& path);

}  // namespace chorus::simulator
