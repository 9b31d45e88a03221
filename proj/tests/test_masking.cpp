#include <doctest.h>

#include <algorithm>
#include <set>
#include <sstream>

#include "chorus/error.hpp"
#include "chorus/masking.hpp"
#include "support/synthetic.hpp"

using namespace chorus;
using namespace chorus::masking;

namespace {

struct Ctx {
    text::ChatTemplate tpl{text::chatml_like_spec()};
    text::Tokenizer tok{tpl.special_tokens(), {}};

    text::TokenizedSample tokenize(const corpus::DialogueSample& s) const {
        return text::tokenize_with_spans(tpl.render(s), s, tok);
    }
};

corpus::DialogueSample aba_sample() {
    corpus::DialogueSample s;
    s.scene.text = "A dim stairwell.";
    s.roles = {{"Ada", 0}, {"Ben", 1}};
    s.utterances = {{0, "Who left the light on?", 0},
                    {1, "Not me.", 1},
                    {0, "Someone did.", 2}};
    s.source_id = "aba";
    return s;
}

corpus::DialogueSample four_role_sample() {
    corpus::DialogueSample s;
    s.scene.text = "Committee night.";
    s.roles = {{"Ada", 0}, {"Ben", 1}, {"Cleo", 2}, {"Dan", 3}};
    s.utterances = {{0, "Call it to order.", 0},
                    {1, "Seconded.", 1},
                    {2, "I object.", 2},
                    {3, "Noted.", 3}};
    s.source_id = "four";
    return s;
}

bool in_kind(const text::TokenizedSample& t, std::size_t i, text::SegmentKind kind) {
    for (const text::SegmentSpan& span : t.spans) {
        if (i >= span.begin && i < span.end) {
            return span.kind == kind;
        }
    }
    return false;
}

}  // namespace

TEST_SUITE("masking") {

TEST_CASE("strategy names round trip with aliases") {
    CHECK(strategy_from_name("base") == Strategy::base);
    CHECK(strategy_from_name("speaker") == Strategy::speaker_predictor);
    CHECK(strategy_from_name("speaker_predictor") == Strategy::speaker_predictor);
    CHECK(strategy_from_name("silence") == Strategy::silence_switcher);
    CHECK(strategy_from_name("utterance_level") == Strategy::utterance_level);
    CHECK(strategy_name(Strategy::silence_switcher) == std::string("silence_switcher"));
    CHECK_THROWS_AS(strategy_from_name("bogus"), Error);
}

TEST_CASE("base masks partition the utterance tokens across roles") {
    Ctx ctx;
    for (const corpus::DialogueSample& s : testsupport::random_dialogues(50, 1201)) {
        const text::TokenizedSample t = ctx.tokenize(s);
        std::vector<LossMask> masks;
        for (const corpus::Role& role : s.roles) {
            masks.push_back(build_role_mask(t, role.index, Strategy::base));
        }
        for (std::size_t i = 0; i < t.token_ids.size(); ++i) {
            int keepers = 0;
            for (const LossMask& m : masks) {
                keepers += m.keep[i] ? 1 : 0;
            }
            if (in_kind(t, i, text::SegmentKind::utterance)) {
                CHECK(keepers == 1);
            } else {
                CHECK(keepers == 0);
            }
        }
    }
}

TEST_CASE("speaker masks add every header to the role's base mask") {
    Ctx ctx;
    for (const corpus::DialogueSample& s : testsupport::random_dialogues(30, 77)) {
        const text::TokenizedSample t = ctx.tokenize(s);
        for (const corpus::Role& role : s.roles) {
            const LossMask base = build_role_mask(t, role.index, Strategy::base);
            const LossMask speaker = build_role_mask(t, role.index, Strategy::speaker_predictor);
            REQUIRE(base.keep.size() == speaker.keep.size());
            for (std::size_t i = 0; i < base.keep.size(); ++i) {
                const bool header = in_kind(t, i, text::SegmentKind::header);
                CHECK(speaker.keep[i] == static_cast<std::uint8_t>((base.keep[i] != 0) || header));
                if (in_kind(t, i, text::SegmentKind::system)) {
                    CHECK(speaker.keep[i] == 0);
                }
            }
        }
    }
}

TEST_CASE("mask_own_history drops only the earliest own turn") {
    Ctx ctx;
    const corpus::DialogueSample s = aba_sample();
    const text::TokenizedSample t = ctx.tokenize(s);

    const LossMask plain = build_role_mask(t, 0, Strategy::base, false);
    const LossMask masked = build_role_mask(t, 0, Strategy::base, true);
    CHECK(masked.kept() < plain.kept());
    for (const text::SegmentSpan& span : t.spans) {
        if (span.kind != text::SegmentKind::utterance) {
            continue;
        }
        const bool ada_turn = s.utterances[static_cast<std::size_t>(span.turn)].role_index == 0;
        for (std::size_t i = span.begin; i < span.end; ++i) {
            CHECK(plain.keep[i] == static_cast<std::uint8_t>(ada_turn));
            CHECK(masked.keep[i] == static_cast<std::uint8_t>(ada_turn && span.turn != 0));
        }
    }

    // a role with a single turn loses everything
    const LossMask ben = build_role_mask(t, 1, Strategy::base, true);
    CHECK(ben.kept() == 0);
}

TEST_CASE("build_role_mask rejects bad arguments") {
    Ctx ctx;
    const text::TokenizedSample t = ctx.tokenize(aba_sample());
    CHECK_THROWS_AS(build_role_mask(t, 5, Strategy::base), Error);
    CHECK_THROWS_AS(build_role_mask(t, -1, Strategy::base), Error);
    CHECK_THROWS_AS(build_role_mask(t, 0, Strategy::silence_switcher), Error);
}

TEST_CASE("utterance_level mask is one seeded role's base mask") {
    Ctx ctx;
    const corpus::DialogueSample s = four_role_sample();
    const text::TokenizedSample t = ctx.tokenize(s);

    std::set<int> seen;
    for (std::uint64_t seed = 0; seed < 24; ++seed) {
        const LossMask m = build_utterance_level_mask(t, seed);
        CHECK(m.strategy == Strategy::utterance_level);
        const LossMask base = build_role_mask(t, m.role_index, Strategy::base);
        CHECK(m.keep == base.keep);
        seen.insert(m.role_index);

        const LossMask again = build_utterance_level_mask(t, seed);
        CHECK(again.role_index == m.role_index);
    }
    CHECK(seen.size() >= 2);
}

TEST_CASE("utterance_level role choice is close to uniform") {
    Ctx ctx;
    const corpus::DialogueSample s = four_role_sample();
    const text::TokenizedSample t = ctx.tokenize(s);
    std::vector<int> counts(4, 0);
    const int draws = 2000;
    for (int i = 0; i < draws; ++i) {
        counts[static_cast<std::size_t>(
            build_utterance_level_mask(t, 9000 + static_cast<std::uint64_t>(i)).role_index)] += 1;
    }
    for (const int c : counts) {
        CHECK(c > 380);
        CHECK(c < 620);
    }
}

TEST_CASE("silence expansion emits speaking and silent instances per turn") {
    Ctx ctx;
    const corpus::DialogueSample s = four_role_sample();
    const text::TokenizedSample t = ctx.tokenize(s);
    const auto instances = expand_silence_instances(t, ctx.tpl, ctx.tok);

    // 4 speaking turns; candidates per turn: 3 at the opening, then 2 each
    REQUIRE(instances.size() == 4 + 3 + 2 + 2 + 2);

    const int silence_id = *ctx.tok.special_id("<s>");
    std::size_t at = 0;
    for (std::size_t turn = 0; turn < 4; ++turn) {
        const text::SegmentSpan* utt = nullptr;
        const text::SegmentSpan* head = nullptr;
        for (const text::SegmentSpan& span : t.spans) {
            if (span.turn == static_cast<int>(turn)) {
                (span.kind == text::SegmentKind::utterance ? utt : head) = &span;
            }
        }
        REQUIRE(utt != nullptr);
        REQUIRE(head != nullptr);

        const TrainingInstance& speaking = instances[at++];
        CHECK(speaking.weight == 1.0);
        CHECK(speaking.token_ids.size() == utt->end);
        REQUIRE(speaking.masks.size() == 1);
        CHECK(speaking.masks[0].role_index == s.utterances[turn].role_index);
        CHECK(speaking.masks[0].kept() == utt->end - utt->begin);
        for (std::size_t i = utt->begin; i < utt->end; ++i) {
            CHECK(speaking.masks[0].keep[i] == 1);
        }

        const int speaker = s.utterances[turn].role_index;
        const int previous = turn == 0 ? -1 : s.utterances[turn - 1].role_index;
        for (const corpus::Role& role : s.roles) {
            if (role.index == speaker || role.index == previous) {
                continue;
            }
            const TrainingInstance& silent = instances[at++];
            const double expected_weight = turn == 0 ? 1.0 / 3.0 : 0.5;
            CHECK(silent.weight == doctest::Approx(expected_weight));
            REQUIRE(silent.masks.size() == 1);
            CHECK(silent.masks[0].role_index == role.index);
            CHECK(silent.masks[0].kept() == 1);
            CHECK(silent.masks[0].keep.back() == 1);
            CHECK(silent.token_ids.back() == silence_id);
            CHECK(silent.source_id == "four#t" + std::to_string(turn) + "~" + role.name);
            // shares the dialogue prefix, then the candidate's own header
            const std::vector<int> header_ids = ctx.tok.encode(ctx.tpl.header(role.name));
            REQUIRE(silent.token_ids.size() == head->begin + header_ids.size() + 1);
            for (std::size_t i = 0; i < head->begin; ++i) {
                CHECK(silent.token_ids[i] == t.token_ids[i]);
            }
        }
    }
    CHECK(at == instances.size());
}

TEST_CASE("two-role dialogues get a silent instance only at the opening turn") {
    Ctx ctx;
    for (const corpus::DialogueSample& s : testsupport::two_party_corpus(5, 33)) {
        const auto instances = expand_silence_instances(ctx.tokenize(s), ctx.tpl, ctx.tok);
        std::size_t speaking = 0;
        std::size_t silent = 0;
        for (const TrainingInstance& inst : instances) {
            (inst.weight == 1.0 ? speaking : silent) += 1;
        }
        CHECK(speaking == s.utterances.size());
        CHECK(silent == 1);
    }
}

TEST_CASE("without_scene removes the system block") {
    Ctx ctx;
    const corpus::DialogueSample s = aba_sample();
    BatchConfig config;
    config.strategy = Strategy::speaker_predictor;
    config.window = 512;
    BatchStats stats;

    config.without_scene = true;
    const auto bare = build_sample_instances(s, ctx.tpl, ctx.tok, config, 1, stats);
    REQUIRE(bare.size() == 1);
    const std::string text = ctx.tok.decode(bare[0].token_ids);
    CHECK(text.find("A dim stairwell.") == std::string::npos);
    CHECK(text.substr(0, 12) == "<|im_start|>");

    config.without_scene = false;
    const auto with = build_sample_instances(s, ctx.tpl, ctx.tok, config, 1, stats);
    REQUIRE(with.size() == 1);
    CHECK(with[0].token_ids.size() > bare[0].token_ids.size());
    CHECK(ctx.tok.decode(with[0].token_ids).find("A dim stairwell.") != std::string::npos);
}

TEST_CASE("window limits skip or truncate with stats") {
    Ctx ctx;
    const corpus::DialogueSample s = four_role_sample();
    BatchConfig config;
    config.strategy = Strategy::base;

    SUBCASE("hopeless window skips the sample") {
        config.window = 3;
        BatchStats stats;
        CHECK(build_sample_instances(s, ctx.tpl, ctx.tok, config, 1, stats).empty());
        CHECK(stats.skipped_overlong == 1);
        REQUIRE(stats.notes.size() == 1);
        CHECK(stats.notes[0].find("four") == 0);
    }

    SUBCASE("tight window drops oldest turns") {
        const std::size_t full = ctx.tokenize(s).token_ids.size();
        config.window = full - 1;
        BatchStats stats;
        const auto instances = build_sample_instances(s, ctx.tpl, ctx.tok, config, 1, stats);
        REQUIRE(instances.size() == 1);
        CHECK(stats.truncated == 1);
        CHECK(instances[0].token_ids.size() <= config.window);
        CHECK(ctx.tok.decode(instances[0].token_ids).find("Call it to order.") ==
              std::string::npos);
    }
}

TEST_CASE("empty masks are counted and all-empty instances dropped") {
    Ctx ctx;
    corpus::DialogueSample s;
    s.scene.text = "Brief words.";
    s.roles = {{"Ada", 0}, {"Ben", 1}};
    s.utterances = {{0, "Hello.", 0}, {1, "Goodbye.", 1}};
    s.source_id = "brief";

    BatchConfig config;
    config.strategy = Strategy::base;
    config.mask_own_history = true;
    config.window = 512;
    BatchStats stats;
    CHECK(build_sample_instances(s, ctx.tpl, ctx.tok, config, 1, stats).empty());
    CHECK(stats.empty_masks == 2);
    CHECK(stats.skipped_degenerate == 1);

    // a third turn keeps Ada usable while Ben's mask still dies
    s.utterances.push_back({0, "Wait.", 2});
    BatchStats stats2;
    const auto kept = build_sample_instances(s, ctx.tpl, ctx.tok, config, 1, stats2);
    REQUIRE(kept.size() == 1);
    REQUIRE(kept[0].masks.size() == 1);
    CHECK(kept[0].masks[0].role_index == 0);
    CHECK(stats2.empty_masks == 1);
    CHECK(stats2.skipped_degenerate == 0);
}

TEST_CASE("pad_batch pads ids and masks without touching recorded lengths") {
    Ctx ctx;
    const auto samples = testsupport::two_party_corpus(3, 92);
    BatchConfig config;
    config.strategy = Strategy::speaker_predictor;
    config.window = 2048;
    BatchStats stats;
    std::vector<TrainingInstance> instances;
    for (const corpus::DialogueSample& s : samples) {
        for (TrainingInstance& inst :
             build_sample_instances(s, ctx.tpl, ctx.tok, config, 1, stats)) {
            instances.push_back(std::move(inst));
        }
    }
    REQUIRE(instances.size() == 3);
    std::vector<std::size_t> before;
    for (const TrainingInstance& inst : instances) {
        before.push_back(inst.token_ids.size());
    }
    const std::size_t widest = *std::max_element(before.begin(), before.end());

    pad_batch(instances, ctx.tok.pad_id());
    for (std::size_t i = 0; i < instances.size(); ++i) {
        const TrainingInstance& inst = instances[i];
        CHECK(inst.token_ids.size() == widest);
        CHECK(inst.length == before[i]);
        for (std::size_t j = before[i]; j < widest; ++j) {
            CHECK(inst.token_ids[j] == ctx.tok.pad_id());
        }
        for (const LossMask& mask : inst.masks) {
            REQUIRE(mask.keep.size() == widest);
            for (std::size_t j = before[i]; j < widest; ++j) {
                CHECK(mask.keep[j] == 0);
            }
        }
    }
}

TEST_CASE("build_training_batch is reproducible") {
    Ctx ctx;
    const auto samples = testsupport::random_dialogues(6, 404);
    BatchConfig config;
    config.utterance_level = true;
    config.window = 4096;
    config.seed = 17;

    const auto a = build_training_batch(samples, ctx.tpl, ctx.tok, config);
    const auto b = build_training_batch(samples, ctx.tpl, ctx.tok, config);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].token_ids == b[i].token_ids);
        REQUIRE(a[i].masks.size() == 1);
        CHECK(a[i].masks[0].role_index == b[i].masks[0].role_index);
        CHECK(a[i].masks[0].keep == b[i].masks[0].keep);
        CHECK(a[i].masks[0].strategy == Strategy::utterance_level);
    }
    if (!a.empty()) {
        for (const TrainingInstance& inst : a) {
            CHECK(inst.token_ids.size() == a[0].token_ids.size());
        }
    }
}

TEST_CASE("sample_seed is stable per id and epoch") {
    CHECK(sample_seed(1, "a#0", 0) == sample_seed(1, "a#0", 0));
    CHECK(sample_seed(1, "a#0", 0) != sample_seed(1, "a#0", 1));
    CHECK(sample_seed(1, "a#0", 0) != sample_seed(1, "a#1", 0));
    CHECK(sample_seed(1, "a#0", 0) != sample_seed(2, "a#0", 0));
}

TEST_CASE("format_mask_dump prints one row per token") {
    Ctx ctx;
    const corpus::DialogueSample s = aba_sample();
    const text::TokenizedSample t = ctx.tokenize(s);
    std::vector<LossMask> masks = {build_role_mask(t, 0, Strategy::base),
                                   build_role_mask(t, 1, Strategy::base)};
    const std::string dump = format_mask_dump(t, masks, ctx.tok);

    std::size_t lines = 0;
    std::istringstream in(dump);
    std::string line;
    std::size_t keeps = 0;
    while (std::getline(in, line)) {
        lines += 1;
        std::size_t at = 0;
        while ((at = line.find("keep", at)) != std::string::npos) {
            keeps += 1;
            at += 4;
        }
    }
    CHECK(lines == t.token_ids.size() + 1);
    CHECK(keeps == masks[0].kept() + masks[1].kept());
    CHECK(dump.find("role0(base)") != std::string::npos);
    CHECK(dump.find("system") != std::string::npos);
}

}  // TEST_SUITE
