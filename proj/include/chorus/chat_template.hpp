#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "chorus/corpus.hpp"
#include "chorus/tokenizer.hpp"

namespace chorus::text {

// Delimiter set for one template family. header_pattern must contain "{name}"
// exactly once, with non-empty text on both sides.
struct TemplateSpec {
    std::string name;
    std::string system_open;
    std::string system_close;
    std::string header_pattern;
    std::string utterance_close;
    std::string silence_token = "<s>";
};

TemplateSpec chatml_like_spec();                  // default family
TemplateSpec spec_from_json(const nlohmann::json& j);
nlohmann::json spec_to_json(const TemplateSpec& spec);
TemplateSpec lookup_template(const std::string& name);  // registry + config file fallback

enum class SegmentKind { system, header, utterance, silence };

const char* segment_kind_name(SegmentKind kind);

struct CharSegment {
    SegmentKind kind;
    int turn;  // -1 for system
    std::size_t begin, end;  // half-open byte range in the rendered text
};

struct RenderedText {
    std::string text;
    std::vector<CharSegment> segments;
};

struct SegmentSpan {
    SegmentKind kind;
    int turn;
    std::size_t begin, end;  // half-open token range
};

struct TokenizedSample {
    std::vector<int> token_ids;
    std::vector<SegmentSpan> spans;
    corpus::DialogueSample sample;
};

class ChatTemplate {
public:
    explicit ChatTemplate(TemplateSpec spec);

    const TemplateSpec& spec() const { return spec_; }
    const std::string& header_prefix() const { return header_prefix_; }
    const std::string& header_suffix() const { return header_suffix_; }

    std::string header(const std::string& role_name) const;

    // Delimiter strings plus the silence token, deduplicated; register these
    // as tokenizer specials.
    std::vector<std::string> special_tokens() const;

    // Throws Error::contract unless every delimiter and the silence token
    // encode to exactly one token.
    void validate_atomic(const Tokenizer& tokenizer) const;

    // Throws Error::validation on render collisions (delimiter text inside a
    // role name, scene, or utterance; header that shadows another delimiter).
    void validate_role_name(const std::string& name) const;
    void validate_content(const std::string& content, const std::string& what) const;

    RenderedText render(const corpus::DialogueSample& sample) const;

    // Prefix for generation: system block + history turns, plus the opened
    // header of next_role when given. Headerless form is the speaker-predictor
    // contract. Always a byte prefix of the full training render.
    std::string render_inference_prefix(const corpus::Scene& scene,
                                        const std::vector<corpus::Utterance>& history,
                                        const std::vector<corpus::Role>& roles,
                                        const std::optional<corpus::Role>& next_role) const;

    // Parses "<header>name<suffix>rest" from generated text.
    struct ParsedHeader {
        std::string role_name;
        std::string rest;
    };
    ParsedHeader parse_leading_header(std::string_view generated) const;

    // Role name of the last opened header in `prefix`, if any.
    std::optional<std::string> parse_trailing_header(std::string_view prefix) const;

private:
    TemplateSpec spec_;
    std::string header_prefix_;
    std::string header_suffix_;
};

TokenizedSample tokenize_with_spans(const RenderedText& rendered,
                                    const corpus::DialogueSample& sample,
                                    const Tokenizer& tokenizer);

// Drops whole oldest turns until the rendered sample fits in max_tokens,
// keeping the system block. Returns the trimmed sample (roles pruned like
// split_clips) or nullopt when even one turn cannot fit.
struct WindowFit {
    corpus::DialogueSample sample;
    std::size_t dropped_turns = 0;
};
std::optional<WindowFit> fit_window(const corpus::DialogueSample& sample,
                                    const ChatTemplate& tpl,
                                    const Tokenizer& tokenizer,
                                    std::size_t max_tokens);

}  // namespace chorus::text
