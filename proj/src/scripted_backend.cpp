#include "chorus/scripted_backend.hpp"

#include "chorus/error.hpp"

namespace chorus::backend {

ScriptedBackend::ScriptedBackend(text::ChatTemplate tpl, Capabilities caps)
    : tpl_(std::move(tpl)), caps_(caps) {}

void ScriptedBackend::push_generation(std::string text) {
    generations_.push_back(std::move(text));
}

void ScriptedBackend::push_silence_table(std::map<std::string, double> role_to_logprob) {
    silence_tables_.push_back(std::move(role_to_logprob));
}

ScoreResult ScriptedBackend::score_continuation(const std::string& prefix,
                                                const std::string& continuation) {
    if (!caps_.scoring) {
        throw Error::capability("scripted backend: scoring disabled");
    }
    std::lock_guard<std::mutex> lock(mutex_);
    score_calls_ += 1;
    score_prompts_.push_back(prefix);
    if (continuation.empty()) {
        return {};
    }
    if (continuation != tpl_.spec().silence_token) {
        throw Error::contract("scripted backend only scores the silence token, got \"" +
                              continuation + "\"");
    }
    const auto role = tpl_.parse_trailing_header(prefix);
    if (!role) {
        throw Error::contract("scripted backend: silence probe prefix has no trailing header");
    }
    if (generate_calls_ >= silence_tables_.size()) {
        throw Error::contract("scripted backend: no silence table for step " +
                              std::to_string(generate_calls_));
    }
    const auto& table = silence_tables_[generate_calls_];
    const auto it = table.find(*role);
    if (it == table.end()) {
        throw Error::contract("scripted backend: no silence score for role \"" + *role +
                              "\" at step " + std::to_string(generate_calls_));
    }
    return ScoreResult{it->second, {it->second}};
}

std::string ScriptedBackend::generate(const std::string& prefix, const GenerationParams& params) {
    if (!caps_.generation) {
        throw Error::capability("scripted backend: generation disabled");
    }
    params.validate();
    std::lock_guard<std::mutex> lock(mutex_);
    generate_prompts_.push_back(prefix);
    if (generations_.empty()) {
        throw Error::contract("scripted backend: generation script exhausted");
    }
    std::string text = std::move(generations_.front());
    generations_.pop_front();
    generate_calls_ += 1;

    std::size_t stop_at = std::string::npos;
    for (const std::string& stop : params.stop_strings) {
        if (!stop.empty()) {
            stop_at = std::min(stop_at, text.find(stop));
        }
    }
    if (stop_at != std::string::npos) {
        text.resize(stop_at);
    }
    return text;
}

}  // namespace chorus::backend
