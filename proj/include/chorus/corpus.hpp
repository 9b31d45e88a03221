#pragma once

#include <cstddef>
#include <iosfwd>
#include <string>
#include <vector>

namespace chorus::corpus {

struct Role {
    std::string name;  // display name used in headers; unique within a sample
    int index = 0;     // equals position in the sample's role list
};

struct Utterance {
    int role_index = 0;
    std::string text;  // non-empty
    int turn = 0;      // contiguous from 0
};

struct Scene {
    std::string text;
    bool synthesized = false;  // true when built from the role list
};

// One normalized multi-party dialogue clip. Adjacent utterances never share a
// role, every referenced role exists, and turn indices are contiguous.
struct DialogueSample {
    Scene scene;
    std::vector<Role> roles;
    std::vector<Utterance> utterances;
    std::string source_id;
};

// Raw record entry: one {role, content} message. A leading entry with
// role "system" carries the scene.
struct Message {
    std::string role;
    std::string content;
};

struct IngestOptions {
    int max_roles = 7;
    bool merge_adjacent = true;  // false: adjacency violations are rejected
};

Scene default_scene(const std::vector<std::string>& role_names);

std::vector<Utterance> merge_adjacent(std::vector<Utterance> utterances);

DialogueSample ingest_sample(const std::vector<Message>& raw, const IngestOptions& options = {});

std::vector<DialogueSample> split_clips(const DialogueSample& sample, int max_utterances);

// Throws Error::validation on any violated sample invariant.
void validate_sample(const DialogueSample& sample, int max_roles = 7);

struct CorpusStats {
    std::size_t clips = 0;
    std::size_t utterances = 0;
    double utterances_per_clip = 0.0;
    std::size_t errors = 0;
};

struct LineError {
    std::size_t line = 0;  // 1-based
    std::string message;
};

struct Corpus {
    std::vector<DialogueSample> samples;
    CorpusStats stats;
    std::vector<LineError> errors;
};

struct LoadOptions {
    IngestOptions ingest;
    int max_utterances_per_clip = 10;
    bool strict = false;  // true: first bad record throws instead of being collected
};

Corpus load_corpus(const std::string& path, const LoadOptions& options = {});
Corpus load_corpus(std::istream& in, const std::string& origin, const LoadOptions& options = {});

std::vector<Message> sample_to_messages(const DialogueSample& sample);
void write_corpus_jsonl(const Corpus& corpus, const std::string& path);
void write_stats_json(const CorpusStats& stats, const std::string& path);

}  // namespace chorus::corpus
