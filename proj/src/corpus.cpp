#include "chorus/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "chorus/error.hpp"

namespace chorus::corpus {

using nlohmann::json;

Scene default_scene(const std::vector<std::string>& role_names) {
    if (role_names.empty()) {
        throw Error::validation("default_scene: role list is empty");
    }
    std::string joined;
    for (std::size_t i = 0; i < role_names.size(); ++i) {
        if (i > 0) joined += ", ";
        joined += role_names[i];
    }
    return Scene{joined + " are participating a conversation.", /*synthesized=*/true};
}

std::vector<Utterance> merge_adjacent(std::vector<Utterance> utterances) {
    std::vector<Utterance> out;
    out.reserve(utterances.size());
    for (auto& u : utterances) {
        if (!out.empty() && out.back().role_index == u.role_index) {
            out.back().text += '\n';
            out.back().text += u.text;
        } else {
            u.turn = static_cast<int>(out.size());
            out.push_back(std::move(u));
        }
    }
    return out;
}

DialogueSample ingest_sample(const std::vector<Message>& raw, const IngestOptions& options) {
    if (raw.empty()) {
        throw Error::validation("ingest_sample: record is empty");
    }
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (raw[i].content.empty()) {
            throw Error::validation("ingest_sample: empty content at entry " + std::to_string(i));
        }
        if (raw[i].role.empty()) {
            throw Error::validation("ingest_sample: empty role at entry " + std::to_string(i));
        }
    }

    DialogueSample sample;
    std::size_t first_speaker = 0;
    if (raw[0].role == "system") {
        sample.scene = Scene{raw[0].content, /*synthesized=*/false};
        first_speaker = 1;
    }

    std::unordered_map<std::string, int> role_index;
    for (std::size_t i = first_speaker; i < raw.size(); ++i) {
        const Message& msg = raw[i];
        if (msg.role == "system") {
            throw Error::validation("ingest_sample: system entry at position " + std::to_string(i) +
                                    " (only the first entry may carry the scene)");
        }
        auto [it, inserted] = role_index.try_emplace(msg.role, static_cast<int>(sample.roles.size()));
        if (inserted) {
            sample.roles.push_back(Role{msg.role, it->second});
        }
        sample.utterances.push_back(
            Utterance{it->second, msg.content, static_cast<int>(sample.utterances.size())});
    }

    if (sample.utterances.empty()) {
        throw Error::validation("ingest_sample: record has no speaker entries");
    }
    if (static_cast<int>(sample.roles.size()) > options.max_roles) {
        throw Error::validation("ingest_sample: " + std::to_string(sample.roles.size()) +
                                " roles exceeds the limit of " + std::to_string(options.max_roles));
    }

    if (options.merge_adjacent) {
        sample.utterances = merge_adjacent(std::move(sample.utterances));
    } else {
        for (std::size_t i = 1; i < sample.utterances.size(); ++i) {
            if (sample.utterances[i].role_index == sample.utterances[i - 1].role_index) {
                throw Error::validation("ingest_sample: adjacent utterances by the same role at turn " +
                                        std::to_string(i));
            }
        }
    }

    if (sample.scene.text.empty()) {
        std::vector<std::string> names;
        names.reserve(sample.roles.size());
        for (const auto& r : sample.roles) names.push_back(r.name);
        sample.scene = default_scene(names);
    }
    return sample;
}

std::vector<DialogueSample> split_clips(const DialogueSample& sample, int max_utterances) {
    if (max_utterances < 2) {
        throw Error::validation("split_clips: max_utterances must be >= 2");
    }
    const std::size_t total = sample.utterances.size();
    const std::size_t chunk = static_cast<std::size_t>(max_utterances);
    if (total <= chunk) {
        return {sample};
    }

    std::vector<DialogueSample> out;
    const std::size_t n_chunks = (total + chunk - 1) / chunk;
    for (std::size_t c = 0; c < n_chunks; ++c) {
        const std::size_t begin = c * chunk;
        const std::size_t end = std::min(begin + chunk, total);

        DialogueSample part;
        part.scene = sample.scene;
        part.source_id = sample.source_id + "#" + std::to_string(c);

        // Prune the role list to roles that actually speak in this chunk,
        // preserving the original order, and remap indices.
        std::vector<int> remap(sample.roles.size(), -1);
        for (std::size_t i = begin; i < end; ++i) {
            remap[sample.utterances[i].role_index] = 0;
        }
        for (std::size_t r = 0; r < sample.roles.size(); ++r) {
            if (remap[r] == 0) {
                remap[r] = static_cast<int>(part.roles.size());
                part.roles.push_back(Role{sample.roles[r].name, remap[r]});
            }
        }
        for (std::size_t i = begin; i < end; ++i) {
            const Utterance& u = sample.utterances[i];
            part.utterances.push_back(
                Utterance{remap[u.role_index], u.text, static_cast<int>(i - begin)});
        }
        out.push_back(std::move(part));
    }
    return out;
}

void validate_sample(const DialogueSample& sample, int max_roles) {
    if (sample.scene.text.empty()) throw Error::validation("sample: empty scene");
    if (sample.roles.empty()) throw Error::validation("sample: no roles");
    if (static_cast<int>(sample.roles.size()) > max_roles) {
        throw Error::validation("sample: too many roles");
    }
    if (sample.utterances.empty()) throw Error::validation("sample: no utterances");

    std::unordered_set<std::string> names;
    for (std::size_t i = 0; i < sample.roles.size(); ++i) {
        if (sample.roles[i].name.empty()) throw Error::validation("sample: empty role name");
        if (sample.roles[i].index != static_cast<int>(i)) {
            throw Error::validation("sample: role index does not match list position");
        }
        if (!names.insert(sample.roles[i].name).second) {
            throw Error::validation("sample: duplicate role name '" + sample.roles[i].name + "'");
        }
    }
    for (std::size_t i = 0; i < sample.utterances.size(); ++i) {
        const Utterance& u = sample.utterances[i];
        if (u.text.empty()) throw Error::validation("sample: empty utterance at turn " + std::to_string(i));
        if (u.turn != static_cast<int>(i)) throw Error::validation("sample: non-contiguous turn indices");
        if (u.role_index < 0 || u.role_index >= static_cast<int>(sample.roles.size())) {
            throw Error::validation("sample: utterance references unknown role");
        }
        if (i > 0 && u.role_index == sample.utterances[i - 1].role_index) {
            throw Error::validation("sample: adjacent utterances share a role at turn " + std::to_string(i));
        }
    }
}

namespace {

std::vector<Message> parse_record(const std::string& line) {
    json parsed = json::parse(line);
    if (!parsed.is_array()) {
        throw Error::validation("record is not a JSON array");
    }
    std::vector<Message> messages;
    for (const auto& entry : parsed) {
        if (!entry.is_object() || !entry.contains("role") || !entry.contains("content") ||
            !entry["role"].is_string() || !entry["content"].is_string()) {
            throw Error::validation("record entry is not a {role, content} object");
        }
        messages.push_back(Message{entry["role"].get<std::string>(), entry["content"].get<std::string>()});
    }
    return messages;
}

bool is_blank(const std::string& line) {
    return std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

Corpus load_corpus(std::istream& in, const std::string& origin, const LoadOptions& options) {
    Corpus corpus;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (is_blank(line)) continue;
        try {
            auto messages = parse_record(line);
            DialogueSample sample = ingest_sample(messages, options.ingest);
            sample.source_id = origin + ":" + std::to_string(line_no);
            for (auto& part : split_clips(sample, options.max_utterances_per_clip)) {
                validate_sample(part, options.ingest.max_roles);
                corpus.samples.push_back(std::move(part));
            }
        } catch (const Error& e) {
            if (options.strict) {
                throw Error::validation(origin + ":" + std::to_string(line_no) + ": " + e.what());
            }
            corpus.errors.push_back(LineError{line_no, e.what()});
        } catch (const json::exception& e) {
            if (options.strict) {
                throw Error::validation(origin + ":" + std::to_string(line_no) + ": " + e.what());
            }
            corpus.errors.push_back(LineError{line_no, e.what()});
        }
    }

    corpus.stats.clips = corpus.samples.size();
    for (const auto& s : corpus.samples) corpus.stats.utterances += s.utterances.size();
    corpus.stats.utterances_per_clip =
        corpus.stats.clips == 0
            ? 0.0
            : static_cast<double>(corpus.stats.utterances) / static_cast<double>(corpus.stats.clips);
    corpus.stats.errors = corpus.errors.size();
    return corpus;
}

Corpus load_corpus(const std::string& path, const LoadOptions& options) {
    std::ifstream in(path);
    if (!in) {
        throw Error::validation("load_corpus: cannot read '" + path + "'");
    }
    return load_corpus(in, path, options);
}

std::vector<Message> sample_to_messages(const DialogueSample& sample) {
    std::vector<Message> messages;
    messages.push_back(Message{"system", sample.scene.text});
    for (const auto& u : sample.utterances) {
        messages.push_back(Message{sample.roles[u.role_index].name, u.text});
    }
    return messages;
}

void write_corpus_jsonl(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error::validation("write_corpus_jsonl: cannot write '" + path + "'");
    }
    for (const auto& sample : corpus.samples) {
        json record = json::array();
        for (const auto& msg : sample_to_messages(sample)) {
            record.push_back({{"role", msg.role}, {"content", msg.content}});
        }
        out << record.dump() << '\n';
    }
}

void write_stats_json(const CorpusStats& stats, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error::validation("write_stats_json: cannot write '" + path + "'");
    }
    json j{{"clips", stats.clips},
           {"utterances", stats.utterances},
           {"utterances_per_clip", stats.utterances_per_clip},
           {"errors", stats.errors}};
    out << j.dump(2) << '\n';
}

}  // namespace chorus::corpus
