#pragma once

#include <string>

#include "chorus/tokenizer.hpp"
#include "chorus/toy_model.hpp"

namespace chorus::model {

// Versioned binary container: magic + version, a JSON block holding the model
// config and tokenizer, then named tensor blobs.
void save_checkpoint(const std::string& path, const ToyModel& model,
                     const text::Tokenizer& tokenizer);

struct LoadedCheckpoint {
    ToyLMConfig config;
    text::Tokenizer tokenizer;
    ToyModel model;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace chorus::model
