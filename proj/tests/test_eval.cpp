#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include <doctest.h>
#include <json.hpp>

#include "chorus/backend.hpp"
#include "chorus/chat_template.hpp"
#include "chorus/corpus.hpp"
#include "chorus/error.hpp"
#include "chorus/eval.hpp"
#include "chorus/rng.hpp"
#include "chorus/scripted_backend.hpp"
#include "chorus/simulator.hpp"

using namespace chorus;
using nlohmann::json;

namespace {

text::ChatTemplate make_tpl() {
    return text::ChatTemplate(text::lookup_template("chatml-like"));
}

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(in.good());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::string temp_dir() {
    std::string pattern = (std::filesystem::temp_directory_path() / "chorus_eval_XXXXXX").string();
    std::vector<char> buf(pattern.begin(), pattern.end());
    buf.push_back('\0');
    REQUIRE(mkdtemp(buf.data()) != nullptr);
    return std::string(buf.data());
}

// Sample i over `names`: three context turns, then a final turn by `target`.
// The scene carries a cue an oracle backend can read back out of the prefix.
corpus::DialogueSample cued_sample(int i, const std::vector<std::string>& names, int target,
                                   bool with_cue) {
    const int k = static_cast<int>(names.size());
    corpus::DialogueSample s;
    s.scene.text = with_cue ? "Cue for " + names[static_cast<std::size_t>(target)] +
                                  ". Round " + std::to_string(i) + " begins."
                            : "Round " + std::to_string(i) + " begins.";
    for (int r = 0; r < k; ++r) {
        s.roles.push_back({names[static_cast<std::size_t>(r)], r});
    }
    const int a = (target + 1) % k;
    const int b = (target + 2) % k;
    s.utterances = {{a, "Opening move " + std::to_string(i) + ".", 0},
                    {b, "A reply.", 1},
                    {a, "A counter.", 2},
                    {target, "The close.", 3}};
    s.source_id = "cued#" + std::to_string(i);
    return s;
}

// Scores silence low for the role named in the scene cue, high for everyone
// else, so the argmin lands on the cued role.
class CueOracleBackend : public backend::ModelBackend {
public:
    explicit CueOracleBackend(text::ChatTemplate tpl) : tpl_(std::move(tpl)) {}

    std::string name() const override { return "cue-oracle"; }
    backend::Capabilities capabilities() const override { return {false, true, false}; }

    backend::ScoreResult score_continuation(const std::string& prefix,
                                            const std::string& continuation) override {
        if (continuation != tpl_.spec().silence_token) {
            throw Error::contract("oracle only scores the silence token");
        }
        const auto role = tpl_.parse_trailing_header(prefix);
        if (!role) {
            throw Error::contract("oracle probe has no trailing header");
        }
        const std::string open = "Cue for ";
        const std::size_t at = prefix.find(open);
        if (at == std::string::npos) {
            throw Error::contract("oracle probe has no cue");
        }
        const std::size_t end = prefix.find('.', at);
        const std::string target = prefix.substr(at + open.size(), end - at - open.size());
        const double total = *role == target ? -9.0 : -0.5;
        return {total, {total}};
    }

    std::string generate(const std::string&, const backend::GenerationParams&) override {
        throw Error::capability("oracle cannot generate");
    }

private:
    text::ChatTemplate tpl_;
};

// Deterministic noise per probe prefix; the argmin role is effectively a
// uniform pick among the candidates.
class NoiseBackend : public backend::ModelBackend {
public:
    std::string name() const override { return "noise"; }
    backend::Capabilities capabilities() const override { return {false, true, false}; }

    backend::ScoreResult score_continuation(const std::string& prefix,
                                            const std::string& continuation) override {
        (void)continuation;
        const std::uint64_t h = std::hash<std::string>{}(prefix);
        rng::Stream stream(rng::derive(h, 0x9e3779b9u, 424242));
        const double total = -stream.next_unit();
        return {total, {total}};
    }

    std::string generate(const std::string&, const backend::GenerationParams&) override {
        throw Error::capability("noise backend cannot generate");
    }
};

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("a scripted speaker predictor scores a clean sweep") {
    const auto tpl = make_tpl();
    const std::vector<std::string> names{"Kai", "Lena", "Moss"};
    std::vector<corpus::DialogueSample> samples;
    backend::ScriptedBackend sb(tpl);
    for (int i = 0; i < 12; ++i) {
        const int target = i % 3;
        samples.push_back(cued_sample(i, names, target, false));
        sb.push_generation(tpl.header(names[static_cast<std::size_t>(target)]) + "Sure." +
                           tpl.spec().utterance_close);
    }

    const auto report = eval::next_speaker_accuracy(samples, sb, tpl,
                                                    simulator::Strategy::speaker_predictor);
    CHECK(report.total == 12);
    CHECK(report.correct == 12);
    CHECK(report.errored == 0);
    CHECK(report.percent == doctest::Approx(100.0));
    CHECK(report.formatted() == "100.00");
    REQUIRE(report.records.size() == 12);
    for (const auto& rec : report.records) {
        CHECK(rec.method == "speaker_predictor");
        CHECK(rec.context_turns == 3);
        CHECK(rec.predicted_role == rec.true_role);
        CHECK(rec.error.empty());
    }
    CHECK(report.records[0].sample_id == "cued#0");
    CHECK(sb.generate_calls() == 12);
}

TEST_CASE("an exhausted script turns into error records, not a crash") {
    const auto tpl = make_tpl();
    const std::vector<std::string> names{"Kai", "Lena", "Moss"};
    std::vector<corpus::DialogueSample> samples;
    backend::ScriptedBackend sb(tpl);
    for (int i = 0; i < 4; ++i) {
        samples.push_back(cued_sample(i, names, i % 3, false));
    }
    sb.push_generation(tpl.header("Kai") + "One." + tpl.spec().utterance_close);
    sb.push_generation(tpl.header("Lena") + "Two." + tpl.spec().utterance_close);

    const auto report = eval::next_speaker_accuracy(samples, sb, tpl,
                                                    simulator::Strategy::speaker_predictor);
    CHECK(report.total == 4);
    CHECK(report.correct == 2);
    CHECK(report.errored == 2);
    CHECK(report.percent == doctest::Approx(50.0));
    CHECK(report.records[2].error.find("exhausted") != std::string::npos);
    CHECK_FALSE(report.records[2].correct);
    CHECK(report.records[3].predicted_role.empty());
}

TEST_CASE("silence switching follows a scene cue to a clean sweep") {
    const auto tpl = make_tpl();
    const std::vector<std::string> names{"Kai", "Lena", "Moss", "Nia"};
    std::vector<corpus::DialogueSample> samples;
    rng::Stream picks(17);
    for (int i = 0; i < 30; ++i) {
        const int target = static_cast<int>(picks.next_index(4));
        samples.push_back(cued_sample(i, names, target, true));
    }
    CueOracleBackend oracle(tpl);

    SUBCASE("previous speaker excluded") {
        const auto report = eval::next_speaker_accuracy(
            samples, oracle, tpl, simulator::Strategy::silence_switcher);
        CHECK(report.correct == 30);
        CHECK(report.errored == 0);
        CHECK(report.percent == doctest::Approx(100.0));
        for (const auto& rec : report.records) {
            CHECK(rec.method == "silence_switcher[exclude_previous]");
        }
    }
    SUBCASE("all roles probed") {
        eval::EvalOptions options;
        options.exclude_previous_speaker = false;
        const auto report = eval::next_speaker_accuracy(
            samples, oracle, tpl, simulator::Strategy::silence_switcher, options);
        CHECK(report.correct == 30);
        for (const auto& rec : report.records) {
            CHECK(rec.method == "silence_switcher[all_roles]");
        }
    }
}

TEST_CASE("noise probes land near chance level") {
    const auto tpl = make_tpl();
    const std::vector<std::string> names{"Kai", "Lena", "Moss", "Nia"};
    const int n = 300;
    std::vector<corpus::DialogueSample> samples;
    rng::Stream picks(29);
    for (int i = 0; i < n; ++i) {
        const int target = static_cast<int>(picks.next_index(4));
        samples.push_back(cued_sample(i, names, target, false));
    }
    NoiseBackend noise;

    // Exclusion leaves three candidates, so chance is one in three. The noise
    // is a fixed function of the prefix, making the whole check deterministic;
    // the band is a 99% binomial interval around that chance rate.
    const auto report = eval::next_speaker_accuracy(samples, noise, tpl,
                                                    simulator::Strategy::silence_switcher);
    CHECK(report.total == static_cast<std::size_t>(n));
    CHECK(report.errored == 0);
    const double p = 1.0 / 3.0;
    const double half_width = 2.576 * std::sqrt(p * (1.0 - p) / n) * 100.0;
    CAPTURE(report.percent);
    CHECK(report.percent > p * 100.0 - half_width);
    CHECK(report.percent < p * 100.0 + half_width);
}

TEST_CASE("degenerate samples and bad inputs") {
    const auto tpl = make_tpl();
    const std::vector<std::string> names{"Kai", "Lena", "Moss"};

    SUBCASE("empty corpus is rejected") {
        backend::ScriptedBackend sb(tpl);
        try {
            eval::next_speaker_accuracy({}, sb, tpl, simulator::Strategy::speaker_predictor);
            FAIL("expected a throw");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::validation);
        }
    }
    SUBCASE("a sample without utterances becomes an error record") {
        corpus::DialogueSample empty;
        empty.scene.text = "A bare stage.";
        empty.roles = {{"Kai", 0}};
        empty.source_id = "bare";
        backend::ScriptedBackend sb(tpl);
        sb.push_generation(tpl.header("Lena") + "Here." + tpl.spec().utterance_close);
        const std::vector<corpus::DialogueSample> samples{empty,
                                                          cued_sample(0, names, 1, false)};
        const auto report = eval::next_speaker_accuracy(
            samples, sb, tpl, simulator::Strategy::speaker_predictor);
        CHECK(report.total == 2);
        CHECK(report.errored == 1);
        CHECK(report.correct == 1);
        CHECK(report.records[0].error == "sample has no utterances");
        CHECK_FALSE(report.records[0].correct);
    }
    SUBCASE("capability gates fire before any work") {
        const std::vector<corpus::DialogueSample> samples{cued_sample(0, names, 1, false)};
        backend::ScriptedBackend no_gen(tpl, {false, true, false});
        try {
            eval::next_speaker_accuracy(samples, no_gen, tpl,
                                        simulator::Strategy::speaker_predictor);
            FAIL("expected a throw");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::capability);
        }
        backend::ScriptedBackend no_score(tpl, {false, false, true});
        try {
            eval::next_speaker_accuracy(samples, no_score, tpl,
                                        simulator::Strategy::silence_switcher);
            FAIL("expected a throw");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::capability);
        }
    }
}

TEST_CASE("accuracy formatting keeps two decimals") {
    eval::AccuracyReport report;
    report.correct = 13;
    report.total = 16;
    report.percent = 100.0 * 13.0 / 16.0;
    CHECK(report.formatted() == "81.25");
    report.percent = 50.0;
    CHECK(report.formatted() == "50.00");
    report.percent = 100.0;
    CHECK(report.formatted() == "100.00");
}

TEST_CASE("prediction records serialize one line each plus a summary") {
    const auto tpl = make_tpl();
    const std::vector<std::string> names{"Kai", "Lena", "Moss"};
    std::vector<corpus::DialogueSample> samples;
    backend::ScriptedBackend sb(tpl);
    for (int i = 0; i < 3; ++i) {
        samples.push_back(cued_sample(i, names, i % 3, false));
        sb.push_generation(tpl.header("Kai") + "Me." + tpl.spec().utterance_close);
    }
    const auto report = eval::next_speaker_accuracy(samples, sb, tpl,
                                                    simulator::Strategy::speaker_predictor);

    const std::string dir = temp_dir();
    const std::string path = dir + "/predictions.jsonl";
    eval::write_prediction_records(report, path);

    std::ifstream in(path);
    std::vector<json> lines;
    std::string line;
    while (std::getline(in, line)) {
        lines.push_back(json::parse(line));
    }
    REQUIRE(lines.size() == 4);
    for (int i = 0; i < 3; ++i) {
        CHECK(lines[static_cast<std::size_t>(i)].at("type") == "prediction");
        CHECK(lines[static_cast<std::size_t>(i)].at("sample_id") ==
              "cued#" + std::to_string(i));
        CHECK(lines[static_cast<std::size_t>(i)].contains("predicted_role"));
        CHECK(lines[static_cast<std::size_t>(i)].contains("correct"));
    }
    CHECK(lines[3].at("type") == "summary");
    CHECK(lines[3].at("total") == 3);
    CHECK(lines[3].at("percent") == report.formatted());
    std::filesystem::remove_all(dir);
}

TEST_CASE("judge prompt fills every slot") {
    simulator::Transcript t;
    t.scene.text = "A slow afternoon at the counter of a small cafe.";
    t.roles = {{"Vera", 0}, {"Tomas", 1}};
    simulator::TranscriptRecord r0;
    r0.turn = 0;
    r0.role = "Vera";
    r0.utterance = "The grinder is acting up again.";
    simulator::TranscriptRecord r1;
    r1.turn = 1;
    r1.role = "Tomas";
    r1.utterance = "I will look at it after the lunch rush.";
    t.records = {r0, r1};
    t.stop_reason = "max_turns";

    const std::vector<std::string> characters = {"Vera: owns the cafe and keeps the books",
                                                 "Tomas: fixes whatever breaks"};
    const std::string prompt = eval::build_judge_prompt(t, characters, t.scene.text);

    SUBCASE("matches the golden byte for byte") {
        CHECK(prompt == read_file(std::string(CHORUS_TEST_DATA_DIR) + "/golden/judge_prompt.txt"));
    }
    SUBCASE("structural landmarks") {
        CHECK(prompt.find("Begin your evaluation and provide a reasonable score.") !=
              std::string::npos);
        CHECK(prompt.find("<focus on>") != std::string::npos);
        CHECK(prompt.find("</focus_on>") != std::string::npos);
        CHECK(prompt.find("<characters>\n\nVera: owns the cafe and keeps the books\n"
                          "Tomas: fixes whatever breaks\n\n</characters>") != std::string::npos);
        CHECK(prompt.find("<scene>\n\nA slow afternoon at the counter of a small cafe.\n\n"
                          "</scene>") != std::string::npos);
        CHECK(prompt.find("<screenplay>\n\nVera: The grinder is acting up again.\n"
                          "Tomas: I will look at it after the lunch rush.\n\n</screenplay>") !=
              std::string::npos);
        CHECK(prompt.find("[characters]") == std::string::npos);
        CHECK(prompt.find("[scene]") == std::string::npos);
        CHECK(prompt.find("[screenplay]") == std::string::npos);
    }
    SUBCASE("empty character list is rejected") {
        try {
            eval::build_judge_prompt(t, {}, t.scene.text);
            FAIL("expected a throw");
        } catch (const Error& e) {
            CHECK(e.kind() == ErrorKind::validation);
        }
    }
    SUBCASE("empty transcript is rejected") {
        simulator::Transcript bare;
        bare.scene.text = "Nothing yet.";
        CHECK_THROWS_AS(eval::build_judge_prompt(bare, characters, bare.scene.text), Error);
    }
}

TEST_CASE("judge responses parse into scores") {
    CHECK(eval::parse_judge_response("<score>8</score>") == doctest::Approx(8.0));
    CHECK(eval::parse_judge_response("<score>7.5</score>") == doctest::Approx(7.5));
    CHECK(eval::parse_judge_response("prose before <score>\n 9 \n</score> prose after") ==
          doctest::Approx(9.0));
    CHECK(eval::parse_judge_response("<explanation>thin plot</explanation>\n<score>3</score>") ==
          doctest::Approx(3.0));
    CHECK(eval::parse_judge_response("<score>0</score>") == doctest::Approx(0.0));
    CHECK(eval::parse_judge_response("<score>10</score>") == doctest::Approx(10.0));

    const auto expect_kind = [](const std::string& text, ErrorKind kind) {
        try {
            eval::parse_judge_response(text);
            FAIL("expected a throw for: ", text);
        } catch (const Error& e) {
            CAPTURE(text);
            CHECK(e.kind() == kind);
        }
    };
    expect_kind("no tags at all", ErrorKind::parse);
    expect_kind("<score>8", ErrorKind::parse);
    expect_kind("<score></score>", ErrorKind::parse);
    expect_kind("<score>  \n </score>", ErrorKind::parse);
    expect_kind("<score>ten</score>", ErrorKind::parse);
    expect_kind("<score>8 points</score>", ErrorKind::parse);
    expect_kind("<score>11</score>", ErrorKind::validation);
    expect_kind("<score>-1</score>", ErrorKind::validation);
}

TEST_CASE("score records enforce the rubric ranges") {
    eval::ScoreRecord rec{"fluency", 7.0, "judge-a"};
    CHECK_NOTHROW(rec.validate());
    rec.value = 0.5;
    try {
        rec.validate();
        FAIL("expected a throw");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::validation);
    }
    rec = {"gpt4_score", 12.0, ""};
    CHECK_NOTHROW(rec.validate());
    rec = {"total", 27.4, ""};
    CHECK_NOTHROW(rec.validate());
    rec = {"style", 5.0, ""};
    CHECK_THROWS_AS(rec.validate(), Error);
}

TEST_CASE("aggregation mirrors the reporting format") {
    SUBCASE("two values, round mean") {
        const std::vector<eval::ScoreRecord> records{{"gpt4_score", 7.0, "a"},
                                                     {"gpt4_score", 9.0, "b"}};
        const auto rows = eval::aggregate(records);
        REQUIRE(rows.size() == 1);
        CHECK(rows[0].metric == "gpt4_score");
        CHECK(rows[0].count == 2);
        CHECK(rows[0].mean == doctest::Approx(8.0));
        CHECK(rows[0].stddev == doctest::Approx(std::sqrt(2.0)));
        CHECK(rows[0].formatted() == "8.0 ± 1.41");
    }
    SUBCASE("non-round means keep both decimals") {
        const std::vector<eval::ScoreRecord> records{{"fluency", 8.0, ""},
                                                     {"fluency", 8.5, ""}};
        const auto rows = eval::aggregate(records);
        REQUIRE(rows.size() == 1);
        CHECK(rows[0].formatted() == "8.25 ± 0.35");
    }
    SUBCASE("a single record has zero spread") {
        const auto rows = eval::aggregate({{"fluency", 6.3, ""}});
        REQUIRE(rows.size() == 1);
        CHECK(rows[0].stddev == 0.0);
        CHECK(rows[0].formatted() == "6.3 ± 0.00");
    }
    SUBCASE("rows come out in canonical metric order") {
        std::vector<eval::ScoreRecord> records{{"interesting", 5.0, ""},
                                               {"total", 20.0, ""},
                                               {"gpt4_score", 8.0, ""},
                                               {"fluency", 7.0, ""}};
        const auto rows = eval::aggregate(records);
        REQUIRE(rows.size() == 4);
        CHECK(rows[0].metric == "gpt4_score");
        CHECK(rows[1].metric == "fluency");
        CHECK(rows[2].metric == "interesting");
        CHECK(rows[3].metric == "total");

        std::reverse(records.begin(), records.end());
        const auto reversed = eval::aggregate(records);
        REQUIRE(reversed.size() == rows.size());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            CHECK(reversed[i].metric == rows[i].metric);
            CHECK(reversed[i].count == rows[i].count);
            CHECK(reversed[i].mean == rows[i].mean);
            CHECK(reversed[i].stddev == rows[i].stddev);
        }
    }
    SUBCASE("bad input throws") {
        CHECK_THROWS_AS(eval::aggregate({}), Error);
        CHECK_THROWS_AS(eval::aggregate({{"style", 5.0, ""}}), Error);
    }
    SUBCASE("markdown and csv shapes") {
        const auto rows = eval::aggregate(
            {{"gpt4_score", 7.0, "a"}, {"gpt4_score", 9.0, "b"}, {"fluency", 6.0, "a"}});
        const std::string md = eval::aggregate_markdown(rows);
        CHECK(md.find("| metric | n | score |") == 0);
        CHECK(md.find("| gpt4_score | 2 | 8.0 ± 1.41 |") != std::string::npos);
        CHECK(md.find("| fluency | 1 | 6.0 ± 0.00 |") != std::string::npos);
        const std::string csv = eval::aggregate_csv(rows);
        CHECK(csv.find("metric,count,mean,stddev\n") == 0);
        CHECK(csv.find("gpt4_score,2,8,1.41421") != std::string::npos);
        CHECK(csv.find("fluency,1,6,0") != std::string::npos);
    }
}

}  // TEST_SUITE
