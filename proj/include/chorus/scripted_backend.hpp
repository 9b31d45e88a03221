#pragma once

#include <deque>
#include <map>
#include <mutex>
#include <string>
#include <vector>

#include "chorus/backend.hpp"
#include "chorus/chat_template.hpp"

namespace chorus::backend {

// Deterministic test double. Generations replay a FIFO script; silence
// scores come from per-step role tables, where the step index is the number
// of generate() calls completed (each simulator step ends in one generate).
class ScriptedBackend : public ModelBackend {
public:
    explicit ScriptedBackend(text::ChatTemplate tpl, Capabilities caps = {false, true, true});

    void push_generation(std::string text);
    void push_silence_table(std::map<std::string, double> role_to_logprob);

    std::string name() const override { return "scripted"; }
    Capabilities capabilities() const override { return caps_; }
    ScoreResult score_continuation(const std::string& prefix,
                                   const std::string& continuation) override;
    std::string generate(const std::string& prefix, const GenerationParams& params) override;

    std::size_t generate_calls() const { return generate_calls_; }
    std::size_t score_calls() const { return score_calls_; }
    const std::vector<std::string>& generate_prompts() const { return generate_prompts_; }
    const std::vector<std::string>& score_prompts() const { return score_prompts_; }

private:
    mutable std::mutex mutex_;  // probes may arrive concurrently
    text::ChatTemplate tpl_;
    Capabilities caps_;
    std::deque<std::string> generations_;
    std::vector<std::map<std::string, double>> silence_tables_;
    std::size_t generate_calls_ = 0;
    std::size_t score_calls_ = 0;
    std::vector<std::string> generate_prompts_;
    std::vector<std::string> score_prompts_;
};

}  // namespace chorus::backend
