#include "chorus/simulator.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <future>

#include <json.hpp>

#include "chorus/error.hpp"
#include "chorus/rng.hpp"

namespace chorus::simulator {

using nlohmann::json;

const char* strategy_name(Strategy strategy) {
    switch (strategy) {
        case Strategy::speaker_predictor: return "speaker_predictor";
        case Strategy::silence_switcher: return "silence_switcher";
    }
    return "?";
}

Strategy strategy_from_name(const std::string& name) {
    if (name == "speaker_predictor" || name == "speaker") return Strategy::speaker_predictor;
    if (name == "silence_switcher" || name == "silence") return Strategy::silence_switcher;
    throw Error::validation("unknown simulator strategy '" + name + "'");
}

void SimulatorConfig::validate() const {
    if (max_turns < 1) {
        throw Error::validation("simulator config: max_turns must be >= 1");
    }
    if (max_retries < 0) {
        throw Error::validation("simulator config: max_retries must be >= 0");
    }
    generation.validate();
}

std::map<std::string, double> SilenceTable::as_map() const {
    std::map<std::string, double> out;
    for (const auto& [role, lp] : entries) {
        out.emplace(role.name, lp);
    }
    return out;
}

const corpus::Role& SilenceTable::argmin() const {
    if (entries.empty()) {
        throw Error::validation("silence table: no candidate roles");
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < entries.size(); ++i) {
        if (entries[i].second < entries[best].second) {
            best = i;
        }
    }
    return entries[best].first;
}

namespace {

int previous_speaker(const DialogueState& state) {
    return state.history.empty() ? -1 : state.history.back().role_index;
}

backend::GenerationParams step_params(const SimulatorConfig& config,
                                      const text::ChatTemplate& tpl, std::size_t turn,
                                      int attempt) {
    backend::GenerationParams params = config.generation;
    const std::string& close = tpl.spec().utterance_close;
    if (std::find(params.stop_strings.begin(), params.stop_strings.end(), close) ==
        params.stop_strings.end()) {
        params.stop_strings.push_back(close);
    }
    if (params.temperature > 0.0) {
        params.seed = rng::derive(config.generation.seed, turn,
                                  static_cast<std::uint64_t>(attempt));
    }
    return params;
}

bool hits_end_token(const SimulatorConfig& config, const std::string& text) {
    return !config.end_token.empty() && text.find(config.end_token) != std::string::npos;
}

}  // namespace

SilenceTable per_role_silence_table(const DialogueState& state, backend::ModelBackend& backend,
                                    const text::ChatTemplate& tpl,
                                    bool exclude_previous_speaker, bool concurrent) {
    if (!backend.capabilities().scoring) {
        throw Error::capability("backend '" + backend.name() +
                                "' cannot score continuations; silence switching unavailable");
    }
    const int previous = exclude_previous_speaker ? previous_speaker(state) : -1;
    std::vector<const corpus::Role*> candidates;
    for (const corpus::Role& role : state.roles) {
        if (role.index != previous) {
            candidates.push_back(&role);
        }
    }
    if (candidates.empty()) {
        throw Error::validation("silence switcher: every role is excluded");
    }

    const std::string& silence = tpl.spec().silence_token;
    auto probe = [&](const corpus::Role& role) {
        const std::string prefix =
            tpl.render_inference_prefix(state.scene, state.history, state.roles, role);
        return backend.score_continuation(prefix, silence).total;
    };

    SilenceTable table;
    if (concurrent) {
        std::vector<std::future<double>> futures;
        futures.reserve(candidates.size());
        for (const corpus::Role* role : candidates) {
            futures.push_back(std::async(std::launch::async, probe, std::cref(*role)));
        }
        for (std::size_t i = 0; i < candidates.size(); ++i) {
            table.entries.emplace_back(*candidates[i], futures[i].get());
        }
    } else {
        for (const corpus::Role* role : candidates) {
            table.entries.emplace_back(*role, probe(*role));
        }
    }
    return table;
}

StepResult step_speaker_predictor(DialogueState& state, backend::ModelBackend& backend,
                                  const text::ChatTemplate& tpl,
                                  const SimulatorConfig& config) {
    if (!backend.capabilities().generation) {
        throw Error::capability("backend '" + backend.name() + "' cannot generate");
    }
    const std::string prefix =
        tpl.render_inference_prefix(state.scene, state.history, state.roles, std::nullopt);
    const int previous =
        config.exclude_previous_speaker ? previous_speaker(state) : -1;

    std::string failure = "no attempt made";
    const int attempts = 1 + config.max_retries;
    for (int attempt = 0; attempt < attempts; ++attempt) {
        const auto params = step_params(config, tpl, state.history.size(), attempt);
        const std::string text = backend.generate(prefix, params);
        if (hits_end_token(config, text)) {
            StepResult result;
            result.end_of_dialogue = true;
            result.selection.method = strategy_name(Strategy::speaker_predictor);
            result.selection.resamples = attempt;
            return result;
        }

        text::ChatTemplate::ParsedHeader parsed;
        try {
            parsed = tpl.parse_leading_header(text);
        } catch (const Error& e) {
            failure = std::string(e.what()) + "; raw text: \"" + text + "\"";
            continue;
        }

        const auto role_it =
            std::find_if(state.roles.begin(), state.roles.end(),
                         [&](const corpus::Role& r) { return r.name == parsed.role_name; });
        corpus::Role role;
        if (role_it != state.roles.end()) {
            role = *role_it;
        } else if (config.allow_unknown_roles) {
            tpl.validate_role_name(parsed.role_name);
            role = corpus::Role{parsed.role_name, static_cast<int>(state.roles.size())};
            state.roles.push_back(role);
        } else {
            failure = "unknown role \"" + parsed.role_name + "\" in generated header";
            continue;
        }

        if (role.index == previous) {
            failure = "generated role \"" + role.name + "\" equals the previous speaker";
            continue;
        }
        if (parsed.rest.empty()) {
            failure = "generated utterance is empty";
            continue;
        }

        StepResult result;
        result.role = role;
        result.utterance = parsed.rest;
        result.selection.method = strategy_name(Strategy::speaker_predictor);
        result.selection.parsed_header = parsed.role_name;
        result.selection.resamples = attempt;
        return result;
    }
    throw Error::parse("speaker predictor step failed after " + std::to_string(attempts) +
                       " attempts: " + failure);
}

StepResult step_silence_switcher(DialogueState& state, backend::ModelBackend& backend,
                                 const text::ChatTemplate& tpl, const SimulatorConfig& config) {
    if (!backend.capabilities().generation) {
        throw Error::capability("backend '" + backend.name() + "' cannot generate");
    }
    const SilenceTable table = per_role_silence_table(
        state, backend, tpl, config.exclude_previous_speaker, config.concurrent_probes);
    const corpus::Role role = table.argmin();
    const std::string prefix =
        tpl.render_inference_prefix(state.scene, state.history, state.roles, role);

    std::string failure = "no attempt made";
    const int attempts = 1 + config.max_retries;
    for (int attempt = 0; attempt < attempts; ++attempt) {
        const auto params = step_params(config, tpl, state.history.size(), attempt);
        const std::string text = backend.generate(prefix, params);
        if (hits_end_token(config, text)) {
            StepResult result;
            result.end_of_dialogue = true;
            result.selection.method = strategy_name(Strategy::silence_switcher);
            result.selection.silence_logprobs = table.as_map();
            result.selection.resamples = attempt;
            return result;
        }
        if (text.empty()) {
            failure = "generated utterance is empty";
            continue;
        }
        StepResult result;
        result.role = role;
        result.utterance = text;
        result.selection.method = strategy_name(Strategy::silence_switcher);
        result.selection.silence_logprobs = table.as_map();
        result.selection.resamples = attempt;
        return result;
    }
    throw Error::parse("silence switcher step failed after " + std::to_string(attempts) +
                       " attempts: " + failure);
}

Transcript run(const corpus::Scene& scene, const std::vector<corpus::Utterance>& seed,
               const std::vector<corpus::Role>& roles, const SimulatorConfig& config,
               backend::ModelBackend& backend, const text::ChatTemplate& tpl) {
    config.validate();
    if (roles.empty()) {
        throw Error::validation("simulator: no roles");
    }
    for (std::size_t i = 0; i < seed.size(); ++i) {
        if (seed[i].role_index < 0 ||
            static_cast<std::size_t>(seed[i].role_index) >= roles.size()) {
            throw Error::validation("simulator: seed utterance references unknown role");
        }
        if (i > 0 && seed[i].role_index == seed[i - 1].role_index) {
            throw Error::validation("simulator: seed utterances violate adjacency");
        }
    }

    const auto start = std::chrono::steady_clock::now();
    Transcript transcript;
    transcript.scene = scene;
    transcript.stop_reason = "max_turns";

    DialogueState state{scene, roles, {}};
    for (const corpus::Utterance& u : seed) {
        if (state.history.size() >= static_cast<std::size_t>(config.max_turns)) {
            break;
        }
        TranscriptRecord record;
        record.turn = static_cast<int>(state.history.size());
        record.role = roles[static_cast<std::size_t>(u.role_index)].name;
        record.utterance = u.text;
        record.selection.method = "seed";
        transcript.records.push_back(record);
        state.history.push_back(
            corpus::Utterance{u.role_index, u.text, record.turn});
    }

    while (state.history.size() < static_cast<std::size_t>(config.max_turns)) {
        if (config.max_wall_seconds > 0.0) {
            const double elapsed =
                std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            if (elapsed > config.max_wall_seconds) {
                transcript.stop_reason = "wall_time";
                break;
            }
        }
        StepResult step;
        try {
            step = config.strategy == Strategy::speaker_predictor
                       ? step_speaker_predictor(state, backend, tpl, config)
                       : step_silence_switcher(state, backend, tpl, config);
        } catch (const Error& e) {
            transcript.partial = true;
            transcript.error = e.what();
            transcript.stop_reason = "error";
            break;
        }
        if (step.end_of_dialogue) {
            transcript.stop_reason = "end_token";
            break;
        }

        TranscriptRecord record;
        record.turn = static_cast<int>(state.history.size());
        record.role = step.role.name;
        record.utterance = step.utterance;
        record.selection = step.selection;
        transcript.records.push_back(record);
        state.history.push_back(corpus::Utterance{step.role.index, step.utterance, record.turn});
    }

    transcript.roles = state.roles;  // picks up dynamically added roles
    return transcript;
}

std::string format_transcript(const Transcript& transcript) {
    std::string out;
    for (const TranscriptRecord& record : transcript.records) {
        out += record.role + ": " + record.utterance + "\n";
    }
    return out;
}

void write_transcript_text(const Transcript& transcript, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error::validation("cannot write transcript to " + path);
    }
    if (!transcript.scene.text.empty()) {
        out << "[scene] " << transcript.scene.text << "\n\n";
    }
    out << format_transcript(transcript);
    if (transcript.partial) {
        out << "\n[partial: " << transcript.error << "]\n";
    }
}

void write_transcript_jsonl(const Transcript& transcript, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error::validation("cannot write transcript metadata to " + path);
    }
    json roles = json::array();
    for (const corpus::Role& role : transcript.roles) {
        roles.push_back(role.name);
    }
    out << json{{"type", "meta"},
                {"scene", transcript.scene.text},
                {"roles", roles},
                {"stop_reason", transcript.stop_reason},
                {"partial", transcript.partial},
                {"error", transcript.error}}
               .dump()
        << "\n";
    for (const TranscriptRecord& record : transcript.records) {
        json selection{{"method", record.selection.method},
                       {"resamples", record.selection.resamples}};
        if (!record.selection.silence_logprobs.empty()) {
            selection["silence_logprobs"] = record.selection.silence_logprobs;
        }
        if (!record.selection.parsed_header.empty()) {
            selection["parsed_header"] = record.selection.parsed_header;
        }
        out << json{{"type", "turn"},
                    {"turn", record.turn},
                    {"role", record.role},
                    {"utterance", record.utterance},
                    {"selection", selection}}
                   .dump()
            << "\n";
    }
}

Transcript read_transcript_jsonl(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw Error::validation("cannot open transcript " + path);
    }
    Transcript transcript;
    std::string line;
    std::size_t line_no = 0;
    bool meta_seen = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw Error::parse(path + ":" + std::to_string(line_no) + ": " + e.what());
        }
        const std::string type = j.value("type", "");
        if (type == "meta") {
            meta_seen = true;
            transcript.scene.text = j.value("scene", std::string());
            transcript.stop_reason = j.value("stop_reason", std::string());
            transcript.partial = j.value("partial", false);
            transcript.error = j.value("error", std::string());
            transcript.roles.clear();
            for (const auto& name : j.value("roles", std::vector<std::string>{})) {
                transcript.roles.push_back(
                    corpus::Role{name, static_cast<int>(transcript.roles.size())});
            }
        } else if (type == "turn") {
            TranscriptRecord record;
            record.turn = j.value("turn", 0);
            record.role = j.value("role", std::string());
            record.utterance = j.value("utterance", std::string());
            if (j.contains("selection")) {
                const json& s = j.at("selection");
                record.selection.method = s.value("method", std::string());
                record.selection.resamples = s.value("resamples", 0);
                record.selection.parsed_header = s.value("parsed_header", std::string());
                if (s.contains("silence_logprobs")) {
                    record.selection.silence_logprobs =
                        s.at("silence_logprobs").get<std::map<std::string, double>>();
                }
            }
            transcript.records.push_back(std::move(record));
        } else {
            throw Error::parse(path + ":" + std::to_string(line_no) +
                               ": unknown record type \"" + type + "\"");
        }
    }
    if (!meta_seen) {
        throw Error::parse(path + ": missing meta record");
    }
    return transcript;
}

}  // namespace chorus::simulator
