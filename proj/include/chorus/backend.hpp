#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "chorus/tokenizer.hpp"
#include "chorus/toy_model.hpp"

namespace chorus::backend {

struct Capabilities {
    bool trainable = false;
    bool scoring = false;
    bool generation = false;
};

struct GenerationParams {
    int max_new_tokens = 64;
    double temperature = 0.0;  // 0 = greedy argmax
    double top_p = 1.0;        // (0, 1]
    std::vector<std::string> stop_strings;
    std::uint64_t seed = 0;

    void validate() const;  // throws Error::validation
};

struct ScoreResult {
    double total = 0.0;
    std::vector<double> token_logprobs;
};

// One generation/scoring contract for the bundled model, scripted test
// doubles, and remote services.
class ModelBackend {
public:
    virtual ~ModelBackend() = default;

    virtual std::string name() const = 0;
    virtual Capabilities capabilities() const = 0;

    // log P(continuation | prefix), total plus per-token values. Empty
    // continuation scores 0 with no tokens.
    virtual ScoreResult score_continuation(const std::string& prefix,
                                           const std::string& continuation) = 0;

    // Generates until a stop string, end-of-text, or max_new_tokens; the
    // matched stop string is excluded from the result.
    virtual std::string generate(const std::string& prefix, const GenerationParams& params) = 0;

    // Non-null only for backends that train in-process / share our tokenizer.
    virtual model::ToyModel* trainable_model() { return nullptr; }
    virtual const text::Tokenizer* local_tokenizer() const { return nullptr; }
};

class ToyBackend : public ModelBackend {
public:
    ToyBackend(model::ToyModel model, text::Tokenizer tokenizer);

    static ToyBackend from_checkpoint(const std::string& path);

    std::string name() const override { return "toy"; }
    Capabilities capabilities() const override { return {true, true, true}; }
    ScoreResult score_continuation(const std::string& prefix,
                                   const std::string& continuation) override;
    std::string generate(const std::string& prefix, const GenerationParams& params) override;
    model::ToyModel* trainable_model() override { return &model_; }
    const text::Tokenizer* local_tokenizer() const override { return &tokenizer_; }

    model::ToyModel& model() { return model_; }
    const text::Tokenizer& tokenizer() const { return tokenizer_; }

private:
    model::ToyModel model_;
    text::Tokenizer tokenizer_;
};

}  // namespace chorus::backend
