#pragma once

#include <string>
#include <vector>

#include "chorus/backend.hpp"
#include "chorus/chat_template.hpp"
#include "chorus/corpus.hpp"
#include "chorus/simulator.hpp"

namespace chorus::eval {

struct PredictionRecord {
    std::string sample_id;
    int context_turns = 0;
    std::string true_role;
    std::string predicted_role;
    std::string method;
    bool correct = false;
    std::string error;  // non-empty when the step failed; counted as incorrect
};

struct AccuracyReport {
    std::vector<PredictionRecord> records;
    std::size_t correct = 0;
    std::size_t total = 0;
    std::size_t errored = 0;
    double percent = 0.0;

    std::string formatted() const;  // two-decimal percentage, e.g. "81.76"
};

struct EvalOptions {
    bool exclude_previous_speaker = true;
    backend::GenerationParams generation;  // greedy by default
};

// Hides the speaker of every sample's final utterance and predicts it from
// all prior turns. Failed predictions stay in the records and count as wrong.
AccuracyReport next_speaker_accuracy(const std::vector<corpus::DialogueSample>& samples,
                                     backend::ModelBackend& backend,
                                     const text::ChatTemplate& tpl,
                                     simulator::Strategy strategy,
                                     const EvalOptions& options = {});

void write_prediction_records(const AccuracyReport& report, const std::string& path);

// Fixed scoring template with slots for the character list and scene; the
// transcript itself is appended in a tagged block at the end.
std::string build_judge_prompt(const simulator::Transcript& transcript,
                               const std::vector<std::string>& characters,
                               const std::string& scene);

double parse_judge_response(const std::string& text);

struct ScoreRecord {
    std::string metric;  // gpt4_score, fluency, consistency, interesting, total
    double value = 0.0;
    std::string judge_id;

    void validate() const;
};

struct AggregateRow {
    std::string metric;
    std::size_t count = 0;
    double mean = 0.0;
    double stddev = 0.0;  // sample std, 0.0 for a single record

    std::string formatted() const;  // "8.0 ± 1.41"
};

// One row per metric present, in the canonical metric order.
std::vector<AggregateRow> aggregate(const std::vector<ScoreRecord>& records);

std::string aggregate_markdown(const std::vector<AggregateRow>& rows);
std::string aggregate_csv(const std::vector<AggregateRow>& rows);

}  // namespace chorus::eval
