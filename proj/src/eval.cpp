#include "chorus/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>

#include <json.hpp>

#include "chorus/error.hpp"

namespace chorus::eval {

using nlohmann::json;

namespace {

std::string fixed2(double value) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.2f", value);
    return buf;
}

// Means print like "8.0" and "8.07": two decimals, then one trailing zero
// dropped so round values stay short.
std::string mean2(double value) {
    std::string s = fixed2(value);
    if (s.size() > 1 && s.back() == '0' && s[s.size() - 2] != '.') {
        s.pop_back();
    }
    return s;
}

void replace_slot(std::string& text, const std::string& slot, const std::string& value) {
    const std::size_t at = text.find(slot);
    if (at == std::string::npos) {
        throw Error{ErrorKind::internal, "judge template is missing the " + slot + " slot"};
    }
    text.replace(at, slot.size(), value);
}

const char* const kJudgeTemplate =
    R"(Please act as an impartial judge and score the following screenplay.

The screenplay is based on the characters:

<characters>

[characters]

</characters>

The screenplay's scene is:

<scene>

[scene]

</scene>

Your evaluation should focus on:

<focus on>

The fluency of dialogue and whether it conforms to the character and dialogue style of the original drama "Friends".

</focus_on>

Begin your evaluation and provide a reasonable score. Do not allow the length of the screenplays to influence your evaluation. Be as objective as possible.

So your output should follow the following format:

<explanation>Your explanation</explanation>

<score>Your Score</score>

Now give your score and explanation!

<screenplay>

[screenplay]

</screenplay>
)";

}  // namespace

std::string AccuracyReport::formatted() const {
    return fixed2(percent);
}

AccuracyReport next_speaker_accuracy(const std::vector<corpus::DialogueSample>& samples,
                                     backend::ModelBackend& backend,
                                     const text::ChatTemplate& tpl,
                                     simulator::Strategy strategy, const EvalOptions& options) {
    if (samples.empty()) {
        throw Error::validation("next-speaker evaluation: empty corpus");
    }
    const auto caps = backend.capabilities();
    if (strategy == simulator::Strategy::speaker_predictor && !caps.generation) {
        throw Error::capability("backend '" + backend.name() + "' cannot generate");
    }
    if (strategy == simulator::Strategy::silence_switcher && !caps.scoring) {
        throw Error::capability("backend '" + backend.name() + "' cannot score continuations");
    }

    std::string method = simulator::strategy_name(strategy);
    if (strategy == simulator::Strategy::silence_switcher) {
        method += options.exclude_previous_speaker ? "[exclude_previous]" : "[all_roles]";
    }

    AccuracyReport report;
    for (const corpus::DialogueSample& sample : samples) {
        PredictionRecord rec;
        rec.sample_id = sample.source_id;
        rec.method = method;
        if (sample.utterances.empty()) {
            rec.error = "sample has no utterances";
            ++report.errored;
            report.records.push_back(rec);
            continue;
        }
        const corpus::Utterance& last = sample.utterances.back();
        rec.context_turns = static_cast<int>(sample.utterances.size()) - 1;
        rec.true_role = sample.roles[static_cast<std::size_t>(last.role_index)].name;
        std::vector<corpus::Utterance> history(sample.utterances.begin(),
                                               sample.utterances.end() - 1);
        try {
            if (strategy == simulator::Strategy::speaker_predictor) {
                const std::string prefix =
                    tpl.render_inference_prefix(sample.scene, history, sample.roles, std::nullopt);
                backend::GenerationParams params = options.generation;
                const std::string& close = tpl.spec().utterance_close;
                if (std::find(params.stop_strings.begin(), params.stop_strings.end(), close) ==
                    params.stop_strings.end()) {
                    params.stop_strings.push_back(close);
                }
                const std::string text = backend.generate(prefix, params);
                rec.predicted_role = tpl.parse_leading_header(text).role_name;
            } else {
                simulator::DialogueState state{sample.scene, sample.roles, history};
                const auto table = simulator::per_role_silence_table(
                    state, backend, tpl, options.exclude_previous_speaker);
                rec.predicted_role = table.argmin().name;
            }
            rec.correct = rec.predicted_role == rec.true_role;
        } catch (const Error& e) {
            rec.error = e.what();
            rec.correct = false;
            ++report.errored;
        }
        report.records.push_back(rec);
    }
    report.total = report.records.size();
    report.correct = static_cast<std::size_t>(
        std::count_if(report.records.begin(), report.records.end(),
                      [](const PredictionRecord& r) { return r.correct; }));
    report.percent = 100.0 * static_cast<double>(report.correct) /
                     static_cast<double>(report.total);
    return report;
}

void write_prediction_records(const AccuracyReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error::validation("cannot write prediction records to " + path);
    }
    for (const PredictionRecord& rec : report.records) {
        out << json{{"type", "prediction"},
                    {"sample_id", rec.sample_id},
                    {"context_turns", rec.context_turns},
                    {"true_role", rec.true_role},
                    {"predicted_role", rec.predicted_role},
                    {"method", rec.method},
                    {"correct", rec.correct},
                    {"error", rec.error}}
                   .dump()
            << "\n";
    }
    out << json{{"type", "summary"},
                {"correct", report.correct},
                {"total", report.total},
                {"errored", report.errored},
                {"percent", report.formatted()}}
               .dump()
        << "\n";
}

std::string build_judge_prompt(const simulator::Transcript& transcript,
                               const std::vector<std::string>& characters,
                               const std::string& scene) {
    if (characters.empty()) {
        throw Error::validation("judge prompt: character list is empty");
    }
    if (transcript.records.empty()) {
        throw Error::validation("judge prompt: transcript is empty");
    }
    std::string character_block;
    for (std::size_t i = 0; i < characters.size(); ++i) {
        if (i > 0) character_block += "\n";
        character_block += characters[i];
    }
    std::string screenplay = simulator::format_transcript(transcript);
    while (!screenplay.empty() && screenplay.back() == '\n') {
        screenplay.pop_back();
    }

    std::string prompt = kJudgeTemplate;
    replace_slot(prompt, "[characters]", character_block);
    replace_slot(prompt, "[scene]", scene);
    replace_slot(prompt, "[screenplay]", screenplay);
    return prompt;
}

double parse_judge_response(const std::string& text) {
    const std::string open = "<score>";
    const std::string close = "</score>";
    const std::size_t at = text.find(open);
    if (at == std::string::npos) {
        throw Error::parse("judge response has no <score> tag");
    }
    const std::size_t end = text.find(close, at + open.size());
    if (end == std::string::npos) {
        throw Error::parse("judge response has no closing </score> tag");
    }
    std::string body = text.substr(at + open.size(), end - at - open.size());
    const auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
    while (!body.empty() && is_space(body.front())) body.erase(body.begin());
    while (!body.empty() && is_space(body.back())) body.pop_back();
    if (body.empty()) {
        throw Error::parse("judge response score tag is empty");
    }
    char* parse_end = nullptr;
    const double value = std::strtod(body.c_str(), &parse_end);
    if (parse_end != body.c_str() + body.size()) {
        throw Error::parse("judge response score is not a number: \"" + body + "\"");
    }
    if (!std::isfinite(value) || value < 0.0 || value > 10.0) {
        throw Error::validation("judge score " + body + " is outside [0, 10]");
    }
    return value;
}

void ScoreRecord::validate() const {
    static const char* const known[] = {"gpt4_score", "fluency", "consistency", "interesting",
                                        "total"};
    const bool ok = std::any_of(std::begin(known), std::end(known),
                                [&](const char* m) { return metric == m; });
    if (!ok) {
        throw Error::validation("unknown score metric '" + metric + "'");
    }
    const bool rubric = metric == "fluency" || metric == "consistency" || metric == "interesting";
    if (rubric && (value < 1.0 || value > 10.0)) {
        throw Error::validation("metric '" + metric + "' value " + fixed2(value) +
                                " is outside [1, 10]");
    }
}

std::string AggregateRow::formatted() const {
    return mean2(mean) + " ± " + fixed2(stddev);
}

std::vector<AggregateRow> aggregate(const std::vector<ScoreRecord>& records) {
    if (records.empty()) {
        throw Error::validation("aggregate: no score records");
    }
    static const char* const order[] = {"gpt4_score", "fluency", "consistency", "interesting",
                                        "total"};
    for (const ScoreRecord& rec : records) {
        rec.validate();
    }
    std::vector<AggregateRow> rows;
    for (const char* metric : order) {
        std::vector<double> values;
        for (const ScoreRecord& rec : records) {
            if (rec.metric == metric) values.push_back(rec.value);
        }
        if (values.empty()) continue;
        AggregateRow row;
        row.metric = metric;
        row.count = values.size();
        double sum = 0.0;
        for (double v : values) sum += v;
        row.mean = sum / static_cast<double>(values.size());
        if (values.size() > 1) {
            double sq = 0.0;
            for (double v : values) sq += (v - row.mean) * (v - row.mean);
            row.stddev = std::sqrt(sq / static_cast<double>(values.size() - 1));
        }
        rows.push_back(row);
    }
    return rows;
}

std::string aggregate_markdown(const std::vector<AggregateRow>& rows) {
    std::string out = "| metric | n | score |\n|---|---|---|\n";
    for (const AggregateRow& row : rows) {
        out += "| " + row.metric + " | " + std::to_string(row.count) + " | " + row.formatted() +
               " |\n";
    }
    return out;
}

std::string aggregate_csv(const std::vector<AggregateRow>& rows) {
    std::string out = "metric,count,mean,stddev\n";
    char buf[64];
    for (const AggregateRow& row : rows) {
        std::snprintf(buf, sizeof(buf), "%s,%zu,%.6g,%.6g\n", row.metric.c_str(), row.count,
                      row.mean, row.stddev);
        out += buf;
    }
    return out;
}

}  // namespace chorus::eval
