// Drives the chorus binary end to end through every subcommand, checking
// exit codes, emitted files, and rerun determinism. Plain TAP-ish output:
// one line per check, nonzero exit if anything failed.

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int checks = 0;
int failures = 0;

void check(bool ok, const std::string& what) {
    ++checks;
    if (ok) {
        std::cout << "ok " << checks << " - " << what << "\n";
    } else {
        ++failures;
        std::cout << "FAIL " << checks << " - " << what << "\n";
    }
}

struct RunResult {
    int code = -1;
    std::string output;  // stdout and stderr combined
};

std::string scratch;
int run_counter = 0;

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) return "";
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
    const std::string out_path = scratch + "/out_" + std::to_string(++run_counter) + ".txt";
    const std::string cmd =
        env_prefix + " " + std::string(CHORUS_CLI_PATH) + " " + args + " >" + out_path + " 2>&1";
    const int status = std::system(cmd.c_str());
    RunResult result;
    if (WIFEXITED(status)) {
        result.code = WEXITSTATUS(status);
    }
    result.output = read_file(out_path);
    return result;
}

void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

std::size_t count_lines(const std::string& text) {
    std::size_t n = 0;
    for (char c : text) {
        if (c == '\n') ++n;
    }
    return n;
}

std::vector<json> parse_jsonl(const std::string& path) {
    std::vector<json> lines;
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) lines.push_back(json::parse(line));
    }
    return lines;
}

bool contains(const std::string& haystack, const std::string& needle) {
    return haystack.find(needle) != std::string::npos;
}

}  // namespace

int main() {
    std::string pattern = (fs::temp_directory_path() / "chorus_cli_XXXXXX").string();
    std::vector<char> buf(pattern.begin(), pattern.end());
    buf.push_back('\0');
    if (mkdtemp(buf.data()) == nullptr) {
        std::cerr << "cannot create scratch directory\n";
        return 1;
    }
    scratch = buf.data();
    const std::string fixture = std::string(CHORUS_FIXTURE_DIR) + "/cafe_mini.jsonl";

    // --help exits cleanly and names every subcommand.
    {
        const auto r = run_cli("--help");
        check(r.code == 0, "--help exits 0");
        check(contains(r.output, "ingest") && contains(r.output, "train") &&
                  contains(r.output, "simulate") && contains(r.output, "eval"),
              "--help lists the subcommands");
    }

    // Ingest normalizes the fixture and snapshots its config.
    const std::string clips = scratch + "/clips.jsonl";
    {
        const auto r = run_cli("ingest " + fixture + " " + clips + " --max-utterances 8");
        check(r.code == 0, "ingest exits 0 on a clean corpus");
        check(contains(r.output, "clips="), "ingest reports corpus stats");
        check(fs::exists(clips), "ingest writes the normalized corpus");
        check(fs::exists(clips + ".stats.json"), "ingest writes a stats file");
        check(fs::exists(scratch + "/resolved_config.json"), "ingest snapshots its config");
        const json stats = json::parse(read_file(clips + ".stats.json"));
        check(stats.at("clips").get<std::size_t>() == count_lines(read_file(clips)),
              "stats clip count matches the output lines");
    }

    // A corrupt line is reported and skipped unless the run is strict.
    {
        const std::string raw = scratch + "/raw_bad.jsonl";
        write_file(raw,
                   R"([{"role": "Ana", "content": "First."}, {"role": "Bo", "content": "Second."}])"
                   "\n{not json\n"
                   R"([{"role": "Cy", "content": "Third."}, {"role": "Dee", "content": "Fourth."}])"
                   "\n");
        const auto partial = run_cli("ingest " + raw + " " + scratch + "/bad_out.jsonl");
        check(partial.code == 4, "ingest exits 4 when lines were skipped");
        check(contains(partial.output, "raw_bad.jsonl:2"),
              "the skipped line is reported with its number");
        check(count_lines(read_file(scratch + "/bad_out.jsonl")) == 2,
              "good lines around the bad one survive");
        const auto strict = run_cli("ingest " + raw + " " + scratch + "/bad_strict.jsonl" +
                                    " --strict");
        check(strict.code == 2, "ingest --strict exits 2 on the first bad line");
    }

    // Training writes a checkpoint, a report, and a reusable snapshot.
    const std::string run1 = scratch + "/run1";
    {
        const auto r = run_cli("train " + clips + " --out-dir " + run1 +
                               " --layers 2 --heads 2 --model-dim 32 --mlp-mult 4" +
                               " --window 256 --vocab-pieces 64 --epochs 6 --lr 3e-3" +
                               " --batch-size 8 --strategy base --seed 11");
        check(r.code == 0, "train exits 0");
        check(contains(r.output, "final_loss="), "train reports its final loss");
        check(fs::exists(run1 + "/checkpoint.bin"), "train writes a checkpoint");
        check(fs::exists(run1 + "/train_report.jsonl"), "train writes a step report");
        check(fs::exists(run1 + "/resolved_config.json"), "train snapshots its config");
        const auto report = parse_jsonl(run1 + "/train_report.jsonl");
        check(!report.empty() && report.back().at("type") == "summary",
              "the report ends with a summary line");
    }

    // Re-running from the snapshot reproduces the checkpoint byte for byte.
    {
        const std::string run2 = scratch + "/run2";
        const auto r = run_cli("train --config " + run1 + "/resolved_config.json --out-dir " +
                               run2);
        check(r.code == 0, "train from a snapshot exits 0");
        check(read_file(run1 + "/checkpoint.bin") == read_file(run2 + "/checkpoint.bin") &&
                  !read_file(run1 + "/checkpoint.bin").empty(),
              "snapshot rerun reproduces the checkpoint exactly");
    }

    // A seed dialogue replays verbatim with no model in the loop.
    const std::string seed_file = scratch + "/seed.jsonl";
    const std::string sim_seed = scratch + "/sim_seed";
    {
        write_file(seed_file,
                   R"({"role": "system", "content": "A quiet morning shift at the cafe."})"
                   "\n"
                   R"({"role": "Vera", "content": "The milk order is late."})"
                   "\n"
                   R"({"role": "Tomas", "content": "I will call the supplier."})"
                   "\n");
        const auto r = run_cli("simulate --backend toy --checkpoint " + run1 +
                               "/checkpoint.bin --seed-dialogue " + seed_file +
                               " --max-turns 2 --out-dir " + sim_seed);
        check(r.code == 0, "seed-only simulate exits 0");
        check(contains(r.output, "Vera: The milk order is late."),
              "the transcript echoes the seed turns");
        check(contains(r.output, "stop_reason=max_turns"), "the run stops at the turn budget");
        const auto lines = parse_jsonl(sim_seed + "/transcript.jsonl");
        check(lines.size() == 3 && lines[0].at("type") == "meta" &&
                  lines[1].at("selection").at("method") == "seed",
              "the transcript records the seed selection method");
        check(contains(read_file(sim_seed + "/transcript.txt"), "[scene] A quiet morning"),
              "the text transcript leads with the scene");
    }

    // Greedy decoding makes whole simulate runs reproducible byte for byte.
    {
        const std::string common = "simulate --backend toy --checkpoint " + run1 +
                                   "/checkpoint.bin --seed-dialogue " + seed_file +
                                   " --strategy silence --max-turns 3 --max-new-tokens 24" +
                                   " --out-dir ";
        const auto a = run_cli(common + scratch + "/sim_a");
        const auto b = run_cli(common + scratch + "/sim_b");
        check(a.code == 0, "silence simulate exits 0");
        check(a.code == b.code, "both simulate runs agree on the exit code");
        const std::string ta = read_file(scratch + "/sim_a/transcript.jsonl");
        check(!ta.empty() && ta == read_file(scratch + "/sim_b/transcript.jsonl"),
              "rerun transcripts are byte-identical");
        const auto lines = parse_jsonl(scratch + "/sim_a/transcript.jsonl");
        check(lines.size() >= 2 && lines.back().at("selection").contains("silence_logprobs"),
              "silence probes are recorded per generated turn");
    }

    // An untrained model cannot produce usable headers; the partial
    // transcript still lands on disk.
    {
        const std::string fresh = scratch + "/fresh";
        const auto t = run_cli("train " + clips + " --out-dir " + fresh +
                               " --layers 1 --heads 2 --model-dim 16 --mlp-mult 2" +
                               " --window 256 --vocab-pieces 16 --epochs 1 --lr 1e-7" +
                               " --batch-size 32 --seed 3");
        check(t.code == 0, "near-fresh train exits 0");
        const auto r = run_cli("simulate --backend toy --checkpoint " + fresh +
                               "/checkpoint.bin --roles Ada,Ben --strategy speaker" +
                               " --max-retries 0 --max-turns 2 --max-new-tokens 12" +
                               " --out-dir " + scratch + "/sim_fail");
        check(r.code == 4, "an unparseable speaker run exits 4");
        check(contains(r.output, "partial transcript:"), "the failure is reported");
        const auto lines = parse_jsonl(scratch + "/sim_fail/transcript.jsonl");
        check(!lines.empty() && lines[0].at("partial") == true,
              "the partial flag is persisted in the transcript");
    }

    // Next-speaker evaluation writes one prediction file per method.
    {
        const std::string eval1 = scratch + "/eval1";
        const auto r = run_cli("eval " + clips + " --task speaker --strategy both" +
                               " --backend toy --checkpoint " + run1 + "/checkpoint.bin" +
                               " --max-new-tokens 12 --out-dir " + eval1);
        check(r.code == 0, "speaker eval exits 0");
        check(contains(r.output, "speaker_predictor:") &&
                  contains(r.output, "silence_switcher[exclude_previous]:") &&
                  contains(r.output, "silence_switcher[all_roles]:"),
              "all three methods report an accuracy");
        for (const std::string tag :
             {"speaker_predictor", "silence_switcher_exclude_previous",
              "silence_switcher_all_roles"}) {
            const std::string path = eval1 + "/predictions_" + tag + ".jsonl";
            const auto lines = fs::exists(path) ? parse_jsonl(path) : std::vector<json>{};
            check(!lines.empty() && lines.back().at("type") == "summary",
                  "predictions_" + tag + " ends with a summary");
        }
    }

    // The judge prompt is assembled from a stored transcript.
    {
        const std::string judge = scratch + "/judge";
        const auto r = run_cli("eval --task judge-prompt --transcript " + sim_seed +
                               "/transcript.jsonl --characters \"Vera: runs the counter," +
                               "Tomas: fixes things\" --out-dir " + judge);
        check(r.code == 0, "judge-prompt eval exits 0");
        const std::string prompt = read_file(judge + "/judge_prompt.txt");
        check(contains(prompt, "Begin your evaluation and provide a reasonable score."),
              "the prompt carries the scoring instruction");
        check(contains(prompt, "Vera: runs the counter\nTomas: fixes things"),
              "the prompt lists the characters");
        check(contains(prompt, "Vera: The milk order is late."),
              "the prompt embeds the screenplay");
    }

    // Misconfiguration surfaces as exit 2 with a pointed message.
    {
        auto r = run_cli("eval " + clips + " --task speaker --backend quantum --checkpoint x");
        check(r.code == 2 && contains(r.output, "unknown backend"),
              "an unknown backend exits 2");
        r = run_cli("simulate --roles Ada,Ben --backend toy --max-turns 2");
        check(r.code == 2 && contains(r.output, "needs --checkpoint"),
              "toy backend without a checkpoint exits 2");
        r = run_cli("simulate --roles Ada,Ben --backend remote --max-turns 2",
                    "env -u CHORUS_BACKEND_URL -u CHORUS_BACKEND_TOKEN");
        check(r.code == 2 && contains(r.output, "CHORUS_BACKEND_URL"),
              "remote backend without an endpoint exits 2 naming the variable");
        r = run_cli("eval " + clips + " --task speaker --strategy osmosis --backend toy" +
                    " --checkpoint " + run1 + "/checkpoint.bin");
        check(r.code == 2 && contains(r.output, "unknown eval strategy"),
              "an unknown eval strategy exits 2");
        r = run_cli("simulate --roles Ada,Ada --backend toy --checkpoint " + run1 +
                    "/checkpoint.bin --max-turns 2");
        check(r.code == 2 && contains(r.output, "duplicate role"),
              "duplicate role names exit 2");
    }

    std::cout << checks << " checks, " << failures << " failures\n";
    if (failures == 0) {
        std::error_code ec;
        fs::remove_all(scratch, ec);
    } else {
        std::cout << "scratch kept at " << scratch << "\n";
    }
    return failures == 0 ? 0 : 1;
}
