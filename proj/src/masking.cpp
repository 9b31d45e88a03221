#include "chorus/masking.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "chorus/error.hpp"
#include "chorus/rng.hpp"

namespace chorus::masking {

using text::SegmentKind;
using text::SegmentSpan;
using text::TokenizedSample;

const char* strategy_name(Strategy strategy) {
    switch (strategy) {
        case Strategy::base: return "base";
        case Strategy::speaker_predictor: return "speaker_predictor";
        case Strategy::silence_switcher: return "silence_switcher";
        case Strategy::utterance_level: return "utterance_level";
    }
    return "?";
}

Strategy strategy_from_name(const std::string& name) {
    if (name == "base") return Strategy::base;
    if (name == "speaker_predictor" || name == "speaker") return Strategy::speaker_predictor;
    if (name == "silence_switcher" || name == "silence") return Strategy::silence_switcher;
    if (name == "utterance_level") return Strategy::utterance_level;
    throw Error::validation("unknown masking strategy '" + name + "'");
}

std::size_t LossMask::kept() const {
    return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
}

namespace {

int role_of_turn(const corpus::DialogueSample& sample, int turn) {
    if (turn < 0 || static_cast<std::size_t>(turn) >= sample.utterances.size()) {
        throw Error::contract("masking: span references turn " + std::to_string(turn) +
                              " outside the sample");
    }
    return sample.utterances[static_cast<std::size_t>(turn)].role_index;
}

std::uint64_t fnv1a(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const unsigned char c : s) {
        h = (h ^ c) * 0x100000001b3ULL;
    }
    return h;
}

}  // namespace

LossMask build_role_mask(const TokenizedSample& tokenized,
                         int role_index,
                         Strategy strategy,
                         bool mask_own_history) {
    if (strategy != Strategy::base && strategy != Strategy::speaker_predictor) {
        throw Error::contract("build_role_mask handles base and speaker_predictor only; got " +
                              std::string(strategy_name(strategy)));
    }
    const corpus::DialogueSample& sample = tokenized.sample;
    if (role_index < 0 || static_cast<std::size_t>(role_index) >= sample.roles.size()) {
        throw Error::validation("build_role_mask: role index " + std::to_string(role_index) +
                                " not in sample");
    }

    int first_own_turn = -1;
    if (mask_own_history) {
        for (const corpus::Utterance& u : sample.utterances) {
            if (u.role_index == role_index) {
                first_own_turn = u.turn;
                break;
            }
        }
    }

    LossMask mask;
    mask.role_index = role_index;
    mask.strategy = strategy;
    mask.keep.assign(tokenized.token_ids.size(), 0);
    for (const SegmentSpan& span : tokenized.spans) {
        bool keep = false;
        if (span.kind == SegmentKind::utterance) {
            keep = role_of_turn(sample, span.turn) == role_index &&
                   !(mask_own_history && span.turn == first_own_turn);
        } else if (span.kind == SegmentKind::header) {
            keep = strategy == Strategy::speaker_predictor;
        }
        if (keep) {
            std::fill(mask.keep.begin() + static_cast<std::ptrdiff_t>(span.begin),
                      mask.keep.begin() + static_cast<std::ptrdiff_t>(span.end), std::uint8_t{1});
        }
    }
    return mask;
}

LossMask build_utterance_level_mask(const TokenizedSample& tokenized, std::uint64_t rng_seed) {
    const std::size_t n_roles = tokenized.sample.roles.size();
    if (n_roles == 0) {
        throw Error::validation("build_utterance_level_mask: sample has no roles");
    }
    rng::Stream stream(rng_seed);
    const int picked = static_cast<int>(stream.next_index(n_roles));
    LossMask mask = build_role_mask(tokenized, picked, Strategy::base, false);
    mask.strategy = Strategy::utterance_level;
    return mask;
}

std::vector<TrainingInstance> expand_silence_instances(const TokenizedSample& tokenized,
                                                       const text::ChatTemplate& tpl,
                                                       const text::Tokenizer& tokenizer) {
    const corpus::DialogueSample& sample = tokenized.sample;
    const std::string& silence = tpl.spec().silence_token;
    const std::optional<int> silence_id = tokenizer.special_id(silence);
    if (!silence_id) {
        throw Error::contract("silence token \"" + silence + "\" is not a tokenizer special");
    }

    // header/utterance span pair per turn, in order
    std::vector<const SegmentSpan*> header_of(sample.utterances.size(), nullptr);
    std::vector<const SegmentSpan*> utterance_of(sample.utterances.size(), nullptr);
    for (const SegmentSpan& span : tokenized.spans) {
        if (span.kind == SegmentKind::header) {
            header_of[static_cast<std::size_t>(span.turn)] = &span;
        } else if (span.kind == SegmentKind::utterance) {
            utterance_of[static_cast<std::size_t>(span.turn)] = &span;
        }
    }

    std::vector<TrainingInstance> out;
    for (std::size_t t = 0; t < sample.utterances.size(); ++t) {
        if (header_of[t] == nullptr || utterance_of[t] == nullptr) {
            throw Error::contract("expand_silence_instances: turn " + std::to_string(t) +
                                  " has no header/utterance spans");
        }
        const int speaker = sample.utterances[t].role_index;
        const int previous = t == 0 ? -1 : sample.utterances[t - 1].role_index;
        const std::size_t prefix_end = header_of[t]->begin;

        TrainingInstance speaking;
        speaking.token_ids.assign(tokenized.token_ids.begin(),
                                  tokenized.token_ids.begin() +
                                      static_cast<std::ptrdiff_t>(utterance_of[t]->end));
        LossMask speak_mask;
        speak_mask.role_index = speaker;
        speak_mask.strategy = Strategy::silence_switcher;
        speak_mask.keep.assign(speaking.token_ids.size(), 0);
        std::fill(speak_mask.keep.begin() + static_cast<std::ptrdiff_t>(utterance_of[t]->begin),
                  speak_mask.keep.end(), std::uint8_t{1});
        speaking.masks.push_back(std::move(speak_mask));
        speaking.weight = 1.0;
        speaking.length = speaking.token_ids.size();
        speaking.source_id = sample.source_id + "#t" + std::to_string(t);
        out.push_back(std::move(speaking));

        std::vector<int> candidates;
        for (const corpus::Role& role : sample.roles) {
            if (role.index != speaker && role.index != previous) {
                candidates.push_back(role.index);
            }
        }
        if (candidates.empty()) {
            continue;
        }
        const double weight = 1.0 / static_cast<double>(candidates.size());
        for (const int candidate : candidates) {
            const corpus::Role& role = sample.roles[static_cast<std::size_t>(candidate)];
            const std::vector<int> tail = tokenizer.encode(tpl.header(role.name) + silence);
            if (tail.empty() || tail.back() != *silence_id) {
                throw Error::contract("silence tail did not end in the silence token");
            }

            TrainingInstance silent;
            silent.token_ids.assign(tokenized.token_ids.begin(),
                                    tokenized.token_ids.begin() +
                                        static_cast<std::ptrdiff_t>(prefix_end));
            silent.token_ids.insert(silent.token_ids.end(), tail.begin(), tail.end());
            LossMask mask;
            mask.role_index = candidate;
            mask.strategy = Strategy::silence_switcher;
            mask.keep.assign(silent.token_ids.size(), 0);
            mask.keep.back() = 1;
            silent.masks.push_back(std::move(mask));
            silent.weight = weight;
            silent.length = silent.token_ids.size();
            silent.source_id = sample.source_id + "#t" + std::to_string(t) + "~" + role.name;
            out.push_back(std::move(silent));
        }
    }
    return out;
}

std::vector<TrainingInstance> build_sample_instances(const corpus::DialogueSample& sample,
                                                     const text::ChatTemplate& tpl,
                                                     const text::Tokenizer& tokenizer,
                                                     const BatchConfig& config,
                                                     std::uint64_t instance_seed,
                                                     BatchStats& stats) {
    corpus::DialogueSample prepared = sample;
    if (config.without_scene) {
        prepared.scene = corpus::Scene{};
    }

    const auto fit = text::fit_window(prepared, tpl, tokenizer, config.window);
    if (!fit) {
        stats.skipped_overlong += 1;
        stats.notes.push_back(sample.source_id + ": does not fit the token window, skipped");
        return {};
    }
    if (fit->dropped_turns > 0) {
        stats.truncated += 1;
        stats.notes.push_back(sample.source_id + ": dropped " +
                              std::to_string(fit->dropped_turns) + " oldest turns to fit");
    }

    const text::RenderedText rendered = tpl.render(fit->sample);
    const TokenizedSample tokenized = text::tokenize_with_spans(rendered, fit->sample, tokenizer);

    std::vector<TrainingInstance> out;
    if (config.utterance_level) {
        TrainingInstance instance;
        instance.token_ids = tokenized.token_ids;
        instance.masks.push_back(build_utterance_level_mask(tokenized, instance_seed));
        instance.length = instance.token_ids.size();
        instance.source_id = sample.source_id;
        out.push_back(std::move(instance));
    } else if (config.strategy == Strategy::silence_switcher) {
        for (TrainingInstance& instance : expand_silence_instances(tokenized, tpl, tokenizer)) {
            if (instance.token_ids.size() > config.window) {
                stats.skipped_overlong += 1;
                stats.notes.push_back(instance.source_id + ": silence instance over the window");
                continue;
            }
            out.push_back(std::move(instance));
        }
    } else {
        TrainingInstance instance;
        instance.token_ids = tokenized.token_ids;
        for (const corpus::Role& role : fit->sample.roles) {
            LossMask mask =
                build_role_mask(tokenized, role.index, config.strategy, config.mask_own_history);
            if (mask.kept() == 0) {
                stats.empty_masks += 1;
                stats.notes.push_back(sample.source_id + ": empty mask for role " + role.name);
                continue;
            }
            instance.masks.push_back(std::move(mask));
        }
        if (instance.masks.empty()) {
            stats.skipped_degenerate += 1;
            stats.notes.push_back(sample.source_id + ": no usable masks, instance skipped");
            return {};
        }
        instance.length = instance.token_ids.size();
        instance.source_id = sample.source_id;
        out.push_back(std::move(instance));
    }
    return out;
}

void pad_batch(std::vector<TrainingInstance>& instances, int pad_id) {
    std::size_t max_len = 0;
    for (const TrainingInstance& instance : instances) {
        max_len = std::max(max_len, instance.token_ids.size());
    }
    for (TrainingInstance& instance : instances) {
        instance.token_ids.resize(max_len, pad_id);
        for (LossMask& mask : instance.masks) {
            mask.keep.resize(max_len, 0);
        }
    }
}

std::vector<TrainingInstance> build_training_batch(const std::vector<corpus::DialogueSample>& slice,
                                                   const text::ChatTemplate& tpl,
                                                   const text::Tokenizer& tokenizer,
                                                   const BatchConfig& config,
                                                   BatchStats* stats) {
    BatchStats local;
    BatchStats& s = stats ? *stats : local;
    std::vector<TrainingInstance> out;
    for (const corpus::DialogueSample& sample : slice) {
        auto instances = build_sample_instances(sample, tpl, tokenizer, config,
                                                sample_seed(config.seed, sample.source_id, 0), s);
        for (TrainingInstance& instance : instances) {
            out.push_back(std::move(instance));
        }
    }
    pad_batch(out, tokenizer.pad_id());
    return out;
}

std::uint64_t sample_seed(std::uint64_t global_seed, const std::string& source_id,
                          std::uint64_t epoch) {
    return rng::derive(global_seed, fnv1a(source_id), epoch);
}

std::string format_mask_dump(const TokenizedSample& tokenized,
                             const std::vector<LossMask>& masks,
                             const text::Tokenizer& tokenizer) {
    auto segment_label = [&](std::size_t token_index) -> std::string {
        for (const SegmentSpan& span : tokenized.spans) {
            if (token_index >= span.begin && token_index < span.end) {
                std::string label = text::segment_kind_name(span.kind);
                if (span.turn >= 0) {
                    label += "/" + std::to_string(span.turn);
                }
                return label;
            }
        }
        return "pad";
    };
    auto escape = [](const std::string& s) {
        std::string out;
        for (const char c : s) {
            if (c == '\n') {
                out += "\\n";
            } else if (c == '\t') {
                out += "\\t";
            } else {
                out += c;
            }
        }
        return out;
    };

    std::ostringstream os;
    os << "idx\ttoken\tsegment";
    for (const LossMask& mask : masks) {
        os << "\trole" << mask.role_index << "(" << strategy_name(mask.strategy) << ")";
    }
    os << "\n";
    for (std::size_t i = 0; i < tokenized.token_ids.size(); ++i) {
        os << i << "\t" << escape(tokenizer.token_text(tokenized.token_ids[i])) << "\t"
           << segment_label(i);
        for (const LossMask& mask : masks) {
            os << "\t" << (i < mask.keep.size() && mask.keep[i] ? "keep" : ".");
        }
        os << "\n";
    }
    return os.str();
}

}  // namespace chorus::masking
