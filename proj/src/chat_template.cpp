#include "chorus/chat_template.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>

#include "chorus/error.hpp"

namespace chorus::text {

using nlohmann::json;

TemplateSpec chatml_like_spec() {
    TemplateSpec spec;
    spec.name = "chatml-like";
    spec.system_open = "<|im_start|>system\n";
    spec.system_close = "<|im_end|>\n";
    spec.header_pattern = "<|im_start|>{name}\n";
    spec.utterance_close = "<|im_end|>\n";
    spec.silence_token = "<s>";
    return spec;
}

namespace {

TemplateSpec compact_spec() {
    TemplateSpec spec;
    spec.name = "compact";
    spec.system_open = "[scene]";
    spec.system_close = "[/]\n";
    spec.header_pattern = "[@{name}]";
    spec.utterance_close = "[/]\n";
    spec.silence_token = "<s>";
    return spec;
}

std::string get_string(const json& j, const char* key) {
    if (!j.contains(key) || !j[key].is_string()) {
        throw Error::parse(std::string("template spec: missing string field '") + key + "'");
    }
    return j[key].get<std::string>();
}

}  // namespace

TemplateSpec spec_from_json(const json& j) {
    if (!j.is_object()) {
        throw Error::parse("template spec: expected a JSON object");
    }
    TemplateSpec spec;
    spec.name = get_string(j, "name");
    spec.system_open = get_string(j, "system_open");
    spec.system_close = get_string(j, "system_close");
    spec.header_pattern = get_string(j, "header_pattern");
    spec.utterance_close = get_string(j, "utterance_close");
    if (j.contains("silence_token")) {
        spec.silence_token = get_string(j, "silence_token");
    }
    return spec;
}

json spec_to_json(const TemplateSpec& spec) {
    return json{{"name", spec.name},
                {"system_open", spec.system_open},
                {"system_close", spec.system_close},
                {"header_pattern", spec.header_pattern},
                {"utterance_close", spec.utterance_close},
                {"silence_token", spec.silence_token}};
}

TemplateSpec lookup_template(const std::string& name) {
    if (name == "chatml-like") {
        return chatml_like_spec();
    }
    if (name == "compact") {
        return compact_spec();
    }
    if (std::filesystem::exists(name)) {
        std::ifstream in(name);
        if (!in) {
            throw Error::validation("template file unreadable: " + name);
        }
        json j;
        try {
            in >> j;
        } catch (const json::exception& e) {
            throw Error::parse("template file " + name + ": " + e.what());
        }
        return spec_from_json(j);
    }
    throw Error::validation("unknown template '" + name +
                            "' (built-ins: chatml-like, compact; or pass a spec file path)");
}

const char* segment_kind_name(SegmentKind kind) {
    switch (kind) {
        case SegmentKind::system: return "system";
        case SegmentKind::header: return "header";
        case SegmentKind::utterance: return "utterance";
        case SegmentKind::silence: return "silence";
    }
    return "?";
}

ChatTemplate::ChatTemplate(TemplateSpec spec) : spec_(std::move(spec)) {
    const std::string placeholder = "{name}";
    const std::size_t pos = spec_.header_pattern.find(placeholder);
    if (pos == std::string::npos ||
        spec_.header_pattern.find(placeholder, pos + 1) != std::string::npos) {
        throw Error::validation("template '" + spec_.name +
                                "': header_pattern needs exactly one {name}");
    }
    header_prefix_ = spec_.header_pattern.substr(0, pos);
    header_suffix_ = spec_.header_pattern.substr(pos + placeholder.size());

    auto require = [&](const std::string& value, const char* what) {
        if (value.empty()) {
            throw Error::validation("template '" + spec_.name + "': empty " + what);
        }
    };
    require(spec_.system_open, "system_open");
    require(spec_.system_close, "system_close");
    require(header_prefix_, "header prefix");
    require(header_suffix_, "header suffix");
    require(spec_.utterance_close, "utterance_close");
    require(spec_.silence_token, "silence_token");

    // Free text follows these two delimiters; a trailing letter would let a
    // word piece straddle the boundary and shift segment token spans.
    auto require_nonletter_tail = [&](const std::string& value, const char* what) {
        const unsigned char tail = static_cast<unsigned char>(value.back());
        if (std::isalpha(tail)) {
            throw Error::validation("template '" + spec_.name + "': " + what +
                                    " must end with a non-letter character");
        }
    };
    require_nonletter_tail(spec_.system_open, "system_open");
    require_nonletter_tail(header_suffix_, "header suffix");
}

std::string ChatTemplate::header(const std::string& role_name) const {
    return header_prefix_ + role_name + header_suffix_;
}

std::vector<std::string> ChatTemplate::special_tokens() const {
    std::vector<std::string> out;
    auto add = [&](const std::string& s) {
        if (std::find(out.begin(), out.end(), s) == out.end()) {
            out.push_back(s);
        }
    };
    add(spec_.system_open);
    add(spec_.system_close);
    add(header_prefix_);
    add(spec_.utterance_close);
    add(spec_.silence_token);
    return out;
}

void ChatTemplate::validate_atomic(const Tokenizer& tokenizer) const {
    for (const std::string& s : special_tokens()) {
        const std::vector<int> ids = tokenizer.encode(s);
        if (ids.size() != 1 || !tokenizer.is_special(ids[0]) || tokenizer.token_text(ids[0]) != s) {
            throw Error::contract("template '" + spec_.name + "': delimiter \"" + s +
                                  "\" does not encode to a single special token");
        }
    }
}

namespace {

// The six delimiter strings, deduplicated. Role names may contain none of
// them; content may contain any except these (the header suffix, typically a
// newline, stays legal inside utterances).
std::vector<std::string> content_forbidden(const TemplateSpec& spec,
                                           const std::string& header_prefix) {
    std::vector<std::string> out;
    auto add = [&](const std::string& s) {
        if (std::find(out.begin(), out.end(), s) == out.end()) {
            out.push_back(s);
        }
    };
    add(spec.system_open);
    add(spec.system_close);
    add(header_prefix);
    add(spec.utterance_close);
    add(spec.silence_token);
    return out;
}

}  // namespace

void ChatTemplate::validate_role_name(const std::string& name) const {
    if (name.empty()) {
        throw Error::validation("role name must be non-empty");
    }
    auto forbidden = content_forbidden(spec_, header_prefix_);
    forbidden.push_back(header_suffix_);
    for (const std::string& d : forbidden) {
        if (name.find(d) != std::string::npos) {
            throw Error::validation("role name \"" + name + "\" contains template delimiter \"" +
                                    d + "\"");
        }
    }
    // A rendered header must keep the shape [header_prefix][name][suffix]: no
    // other delimiter may match anywhere inside it, or the tokenizer would
    // fuse it into the wrong special (a role named "system" under the
    // chatml-like template collides with the system_open delimiter).
    const std::string h = header(name);
    for (const std::string& d : content_forbidden(spec_, header_prefix_)) {
        for (std::size_t at = h.find(d); at != std::string::npos; at = h.find(d, at + 1)) {
            if (d == header_prefix_ && at == 0) {
                continue;
            }
            throw Error::validation("role name \"" + name + "\": rendered header collides with delimiter \"" +
                                    d + "\"");
        }
    }
}

void ChatTemplate::validate_content(const std::string& content, const std::string& what) const {
    for (const std::string& d : content_forbidden(spec_, header_prefix_)) {
        if (content.find(d) != std::string::npos) {
            throw Error::validation(what + " contains template delimiter \"" + d + "\"");
        }
    }
}

namespace {

// Shared builder so render() and render_inference_prefix() can never drift:
// the inference prefix is always a byte prefix of the full render.
struct RenderBuilder {
    const ChatTemplate& tpl;
    RenderedText out;

    void add_segment(SegmentKind kind, int turn, const std::string& piece) {
        const std::size_t begin = out.text.size();
        out.text += piece;
        out.segments.push_back(CharSegment{kind, turn, begin, out.text.size()});
    }

    void system_block(const corpus::Scene& scene) {
        if (scene.text.empty()) {
            return;
        }
        tpl.validate_content(scene.text, "scene");
        add_segment(SegmentKind::system, -1,
                    tpl.spec().system_open + scene.text + tpl.spec().system_close);
    }

    void turn_block(const corpus::Role& role, const corpus::Utterance& utterance) {
        tpl.validate_role_name(role.name);
        tpl.validate_content(utterance.text, "utterance");
        add_segment(SegmentKind::header, utterance.turn, tpl.header(role.name));
        add_segment(SegmentKind::utterance, utterance.turn,
                    utterance.text + tpl.spec().utterance_close);
    }
};

}  // namespace

RenderedText ChatTemplate::render(const corpus::DialogueSample& sample) const {
    RenderBuilder b{*this, {}};
    b.system_block(sample.scene);
    for (const corpus::Utterance& u : sample.utterances) {
        if (u.role_index < 0 || static_cast<std::size_t>(u.role_index) >= sample.roles.size()) {
            throw Error::validation("render: utterance references unknown role");
        }
        b.turn_block(sample.roles[static_cast<std::size_t>(u.role_index)], u);
    }
    return std::move(b.out);
}

std::string ChatTemplate::render_inference_prefix(const corpus::Scene& scene,
                                                  const std::vector<corpus::Utterance>& history,
                                                  const std::vector<corpus::Role>& roles,
                                                  const std::optional<corpus::Role>& next_role) const {
    RenderBuilder b{*this, {}};
    b.system_block(scene);
    for (const corpus::Utterance& u : history) {
        if (u.role_index < 0 || static_cast<std::size_t>(u.role_index) >= roles.size()) {
            throw Error::validation("render_inference_prefix: utterance references unknown role");
        }
        b.turn_block(roles[static_cast<std::size_t>(u.role_index)], u);
    }
    if (next_role) {
        validate_role_name(next_role->name);
        b.add_segment(SegmentKind::header, static_cast<int>(history.size()),
                      header(next_role->name));
    }
    return std::move(b.out.text);
}

ChatTemplate::ParsedHeader ChatTemplate::parse_leading_header(std::string_view generated) const {
    if (generated.substr(0, header_prefix_.size()) != header_prefix_) {
        throw Error::parse("generated text does not start with a role header");
    }
    const std::size_t name_begin = header_prefix_.size();
    const std::size_t suffix_at = generated.find(header_suffix_, name_begin);
    if (suffix_at == std::string_view::npos) {
        throw Error::parse("generated role header is never closed");
    }
    ParsedHeader parsed;
    parsed.role_name = std::string(generated.substr(name_begin, suffix_at - name_begin));
    parsed.rest = std::string(generated.substr(suffix_at + header_suffix_.size()));
    if (parsed.role_name.empty()) {
        throw Error::parse("generated role header has an empty name");
    }
    return parsed;
}

std::optional<std::string> ChatTemplate::parse_trailing_header(std::string_view prefix) const {
    const std::size_t at = prefix.rfind(header_prefix_);
    if (at == std::string_view::npos) {
        return std::nullopt;
    }
    const std::string_view tail = prefix.substr(at);
    const std::size_t name_begin = header_prefix_.size();
    const std::size_t suffix_at = tail.find(header_suffix_, name_begin);
    if (suffix_at == std::string_view::npos ||
        suffix_at + header_suffix_.size() != tail.size()) {
        return std::nullopt;
    }
    std::string name(tail.substr(name_begin, suffix_at - name_begin));
    if (name.empty()) {
        return std::nullopt;
    }
    return name;
}

TokenizedSample tokenize_with_spans(const RenderedText& rendered,
                                    const corpus::DialogueSample& sample,
                                    const Tokenizer& tokenizer) {
    TokenizedSample out;
    out.sample = sample;

    std::size_t covered = 0;
    for (const CharSegment& seg : rendered.segments) {
        if (seg.begin != covered || seg.end > rendered.text.size() || seg.end <= seg.begin) {
            throw Error::contract("tokenize_with_spans: segments do not tile the rendered text");
        }
        covered = seg.end;

        const std::string_view piece(rendered.text.data() + seg.begin, seg.end - seg.begin);
        const std::vector<int> ids = tokenizer.encode(piece);
        SegmentSpan span;
        span.kind = seg.kind;
        span.turn = seg.turn;
        span.begin = out.token_ids.size();
        out.token_ids.insert(out.token_ids.end(), ids.begin(), ids.end());
        span.end = out.token_ids.size();
        out.spans.push_back(span);
    }
    if (covered != rendered.text.size()) {
        throw Error::contract("tokenize_with_spans: segments do not cover the rendered text");
    }
    if (tokenizer.decode(out.token_ids) != rendered.text) {
        throw Error::contract("tokenize_with_spans: decode round trip mismatch");
    }
    return out;
}

std::optional<WindowFit> fit_window(const corpus::DialogueSample& sample,
                                    const ChatTemplate& tpl,
                                    const Tokenizer& tokenizer,
                                    std::size_t max_tokens) {
    if (sample.utterances.empty()) {
        throw Error::validation("fit_window: sample has no utterances");
    }
    for (std::size_t drop = 0; drop < sample.utterances.size(); ++drop) {
        corpus::DialogueSample candidate;
        candidate.scene = sample.scene;
        candidate.source_id = sample.source_id;

        std::vector<int> remap(sample.roles.size(), -1);
        for (std::size_t i = drop; i < sample.utterances.size(); ++i) {
            remap[static_cast<std::size_t>(sample.utterances[i].role_index)] = 0;
        }
        for (std::size_t r = 0; r < sample.roles.size(); ++r) {
            if (remap[r] == 0) {
                remap[r] = static_cast<int>(candidate.roles.size());
                candidate.roles.push_back(corpus::Role{sample.roles[r].name, remap[r]});
            }
        }
        for (std::size_t i = drop; i < sample.utterances.size(); ++i) {
            const corpus::Utterance& u = sample.utterances[i];
            candidate.utterances.push_back(corpus::Utterance{
                remap[static_cast<std::size_t>(u.role_index)], u.text,
                static_cast<int>(i - drop)});
        }

        const RenderedText rendered = tpl.render(candidate);
        if (tokenizer.encode(rendered.text).size() <= max_tokens) {
            return WindowFit{std::move(candidate), drop};
        }
    }
    return std::nullopt;
}

}  // namespace chorus::text
