#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "chorus/chat_template.hpp"
#include "chorus/corpus.hpp"
#include "chorus/tokenizer.hpp"

namespace chorus::masking {

enum class Strategy { base, speaker_predictor, silence_switcher, utterance_level };

const char* strategy_name(Strategy strategy);
Strategy strategy_from_name(const std::string& name);

// Boolean keep-mask over one token sequence. keep[j] = true means token j is
// a supervised target (predicted from positions < j); position 0 is never
// supervised.
struct LossMask {
    int role_index = 0;
    Strategy strategy = Strategy::base;
    std::vector<std::uint8_t> keep;

    std::size_t kept() const;
};

// One optimizer work item: a token sequence plus one mask per supervised
// role (a single mask for utterance_level and silence instances). The loss
// averages per-mask means, then scales by weight.
struct TrainingInstance {
    std::vector<int> token_ids;
    std::vector<LossMask> masks;
    double weight = 1.0;
    std::size_t length = 0;  // pre-padding token count
    std::string source_id;
};

// base: keep exactly the utterance-segment tokens of turns spoken by
// role_index. speaker_predictor: additionally keep every header segment.
// mask_own_history additionally drops the role's earliest utterance.
LossMask build_role_mask(const text::TokenizedSample& tokenized,
                         int role_index,
                         Strategy strategy,
                         bool mask_own_history = false);

// Uniformly picks one speaking role (seeded) and returns its base mask,
// stamped utterance_level.
LossMask build_utterance_level_mask(const text::TokenizedSample& tokenized,
                                    std::uint64_t rng_seed);

// Per-turn expansion for silence training. For each turn t: one speaking
// instance (prefix + header(r_t) + utterance, keep on the utterance span,
// weight 1) and one silent instance per candidate role (prefix + header(i) +
// silence token, keep on the silence token only, weight 1/#candidates).
// Candidates are all roles except the speaker and the previous speaker.
std::vector<TrainingInstance> expand_silence_instances(const text::TokenizedSample& tokenized,
                                                       const text::ChatTemplate& tpl,
                                                       const text::Tokenizer& tokenizer);

struct BatchConfig {
    Strategy strategy = Strategy::base;
    bool mask_own_history = false;
    bool without_scene = false;
    bool utterance_level = false;
    std::size_t window = 2048;
    std::uint64_t seed = 0;
};

struct BatchStats {
    std::size_t skipped_overlong = 0;   // sample cannot fit the window at all
    std::size_t truncated = 0;          // oldest turns dropped to fit
    std::size_t empty_masks = 0;        // per-role masks dropped as empty
    std::size_t skipped_degenerate = 0; // instance left with no usable mask
    std::vector<std::string> notes;
};

// Instances for one sample under the configured strategy and ablations.
// without_scene clears the scene before rendering; overlong samples are
// trimmed via fit_window or skipped (recorded in stats). instance_seed
// drives utterance_level selection only.
std::vector<TrainingInstance> build_sample_instances(const corpus::DialogueSample& sample,
                                                     const text::ChatTemplate& tpl,
                                                     const text::Tokenizer& tokenizer,
                                                     const BatchConfig& config,
                                                     std::uint64_t instance_seed,
                                                     BatchStats& stats);

// Pads every instance to the longest length in the slice; padding tokens get
// keep = false in every mask.
void pad_batch(std::vector<TrainingInstance>& instances, int pad_id);

// Instances for a corpus slice, padded to a common shape.
std::vector<TrainingInstance> build_training_batch(const std::vector<corpus::DialogueSample>& slice,
                                                   const text::ChatTemplate& tpl,
                                                   const text::Tokenizer& tokenizer,
                                                   const BatchConfig& config,
                                                   BatchStats* stats = nullptr);

// Seed for one sample's instance construction, stable across runs and
// worker layouts.
std::uint64_t sample_seed(std::uint64_t global_seed, const std::string& source_id,
                          std::uint64_t epoch);

// Debug table: one row per token (index, token text, segment, keep flags per
// mask), columns in mask order.
std::string format_mask_dump(const text::TokenizedSample& tokenized,
                             const std::vector<LossMask>& masks,
                             const text::Tokenizer& tokenizer);

}  // namespace chorus::masking
