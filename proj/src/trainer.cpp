#include "chorus/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

#include "chorus/error.hpp"
#include "chorus/rng.hpp"

namespace chorus::trainer {

using masking::TrainingInstance;
using nlohmann::json;

void TrainConfig::validate() const {
    if (!(lr > 0.0) || !std::isfinite(lr)) {
        throw Error::validation("train config: lr must be positive");
    }
    if (epochs < 1) {
        throw Error::validation("train config: epochs must be >= 1");
    }
    if (batch_size < 1) {
        throw Error::validation("train config: batch_size must be >= 1");
    }
    if (weight_decay < 0.0) {
        throw Error::validation("train config: weight_decay must be >= 0");
    }
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) {
        throw Error::validation("train config: warmup_fraction must lie in [0, 1)");
    }
    if (schedule != "cosine" && schedule != "constant") {
        throw Error::validation("train config: schedule must be cosine or constant");
    }
    if (optimizer != "adamw") {
        throw Error::validation("train config: optimizer must be adamw");
    }
    if (window < 8) {
        throw Error::validation("train config: window too small");
    }
}

json TrainConfig::to_json() const {
    return json{{"lr", lr},
                {"batch_size", batch_size},
                {"epochs", epochs},
                {"schedule", schedule},
                {"weight_decay", weight_decay},
                {"optimizer", optimizer},
                {"strategy", masking::strategy_name(strategy)},
                {"ablations",
                 json{{"utterance_level", ablations.utterance_level},
                      {"without_scene", ablations.without_scene},
                      {"from_base", ablations.from_base}}},
                {"seed", seed},
                {"warmup_fraction", warmup_fraction},
                {"window", window},
                {"mask_own_history", mask_own_history},
                {"beta1", beta1},
                {"beta2", beta2},
                {"adam_eps", adam_eps}};
}

TrainConfig TrainConfig::from_json(const json& j) {
    TrainConfig c;
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.epochs = j.value("epochs", c.epochs);
    c.schedule = j.value("schedule", c.schedule);
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.optimizer = j.value("optimizer", c.optimizer);
    if (j.contains("strategy")) {
        c.strategy = masking::strategy_from_name(j.at("strategy").get<std::string>());
    }
    if (j.contains("ablations")) {
        const json& a = j.at("ablations");
        c.ablations.utterance_level = a.value("utterance_level", false);
        c.ablations.without_scene = a.value("without_scene", false);
        c.ablations.from_base = a.value("from_base", false);
    }
    c.seed = j.value("seed", c.seed);
    c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
    c.window = j.value("window", c.window);
    c.mask_own_history = j.value("mask_own_history", c.mask_own_history);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.adam_eps = j.value("adam_eps", c.adam_eps);
    c.validate();
    return c;
}

double mupas_loss(const std::vector<double>& logprobs, const TrainingInstance& instance,
                  std::size_t* empty_mask_warnings) {
    const std::size_t T = instance.token_ids.size();
    if (T == 0 || instance.masks.empty()) {
        throw Error::validation("mupas_loss: degenerate instance (no tokens or no masks)");
    }
    if (logprobs.size() % T != 0) {
        throw Error::contract("mupas_loss: logprob table does not match the token count");
    }
    const std::size_t V = logprobs.size() / T;

    double sum = 0.0;
    std::size_t usable = 0;
    for (const masking::LossMask& mask : instance.masks) {
        if (mask.keep.size() != T) {
            throw Error::contract("mupas_loss: mask length differs from token_ids length");
        }
        double role_sum = 0.0;
        std::size_t kept = 0;
        for (std::size_t j = 0; j < T; ++j) {
            if (!mask.keep[j]) {
                continue;
            }
            if (j == 0) {
                throw Error::contract("mupas_loss: position 0 cannot be supervised");
            }
            role_sum -= logprobs[(j - 1) * V + static_cast<std::size_t>(instance.token_ids[j])];
            kept += 1;
        }
        if (kept == 0) {
            if (empty_mask_warnings) {
                *empty_mask_warnings += 1;
            }
            continue;
        }
        sum += role_sum / static_cast<double>(kept);
        usable += 1;
    }
    if (usable == 0) {
        throw Error::validation("mupas_loss: every mask is empty");
    }
    return instance.weight * sum / static_cast<double>(instance.masks.size());
}

std::vector<double> target_weights(const TrainingInstance& instance,
                                   std::size_t* empty_mask_warnings) {
    const std::size_t T = instance.token_ids.size();
    if (T == 0 || instance.masks.empty()) {
        throw Error::validation("target_weights: degenerate instance");
    }
    std::vector<double> w(T, 0.0);
    std::size_t usable = 0;
    for (const masking::LossMask& mask : instance.masks) {
        if (mask.keep.size() != T) {
            throw Error::contract("target_weights: mask length differs from token_ids length");
        }
        const std::size_t kept = mask.kept();
        if (kept == 0) {
            if (empty_mask_warnings) {
                *empty_mask_warnings += 1;
            }
            continue;
        }
        if (mask.keep[0]) {
            throw Error::contract("target_weights: position 0 cannot be supervised");
        }
        const double per_token = 1.0 / static_cast<double>(kept);
        for (std::size_t j = 1; j < T; ++j) {
            if (mask.keep[j]) {
                w[j] += per_token;
            }
        }
        usable += 1;
    }
    if (usable == 0) {
        throw Error::validation("target_weights: every mask is empty");
    }
    const double scale = instance.weight / static_cast<double>(instance.masks.size());
    for (double& x : w) {
        x *= scale;
    }
    return w;
}

double scheduled_lr(double base_lr, int step, int total_steps, double warmup_fraction) {
    if (total_steps <= 0) {
        throw Error::contract("scheduled_lr: total_steps must be positive");
    }
    const int warmup = std::max(
        warmup_fraction > 0.0 ? 1 : 0,
        static_cast<int>(std::lround(warmup_fraction * static_cast<double>(total_steps))));
    if (step < warmup) {
        return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    }
    if (total_steps == warmup) {
        return base_lr;
    }
    const double progress =
        static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * std::min(1.0, progress)));
}

namespace {

struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    int t = 0;
};

void adamw_step(model::ToyModel& m, AdamState& state, const TrainConfig& config, double lr,
                double grad_scale) {
    auto params = m.parameters();
    if (state.m.empty()) {
        state.m.resize(params.size());
        state.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            state.m[i].assign(params[i]->size(), 0.0);
            state.v[i].assign(params[i]->size(), 0.0);
        }
    }
    state.t += 1;
    const double bc1 = 1.0 - std::pow(config.beta1, state.t);
    const double bc2 = 1.0 - std::pow(config.beta2, state.t);
    for (std::size_t i = 0; i < params.size(); ++i) {
        model::Tensor& p = *params[i];
        const bool decay = p.shape.size() >= 2;  // matrices only; LN scales and biases stay undecayed
        for (std::size_t k = 0; k < p.v.size(); ++k) {
            const double g = p.g[k] * grad_scale;
            state.m[i][k] = config.beta1 * state.m[i][k] + (1.0 - config.beta1) * g;
            state.v[i][k] = config.beta2 * state.v[i][k] + (1.0 - config.beta2) * g * g;
            const double mhat = state.m[i][k] / bc1;
            const double vhat = state.v[i][k] / bc2;
            double update = mhat / (std::sqrt(vhat) + config.adam_eps);
            if (decay) {
                update += config.weight_decay * p.v[k];
            }
            p.v[k] -= lr * update;
        }
    }
}

masking::BatchConfig batch_config(const TrainConfig& config) {
    masking::BatchConfig bc;
    bc.strategy = config.strategy;
    bc.mask_own_history = config.mask_own_history;
    bc.without_scene = config.ablations.without_scene;
    bc.utterance_level = config.ablations.utterance_level ||
                         config.strategy == masking::Strategy::utterance_level;
    bc.window = config.window;
    bc.seed = config.seed;
    return bc;
}

std::vector<TrainingInstance> build_epoch_instances(
    const std::vector<corpus::DialogueSample>& samples, const text::ChatTemplate& tpl,
    const text::Tokenizer& tokenizer, const masking::BatchConfig& bc, std::uint64_t seed,
    std::uint64_t epoch, masking::BatchStats& stats) {
    std::vector<TrainingInstance> out;
    for (const corpus::DialogueSample& sample : samples) {
        auto instances = masking::build_sample_instances(
            sample, tpl, tokenizer, bc, masking::sample_seed(seed, sample.source_id, epoch),
            stats);
        for (TrainingInstance& instance : instances) {
            out.push_back(std::move(instance));
        }
    }
    return out;
}

void dump_batch(const std::string& dir, int step,
                const std::vector<const TrainingInstance*>& batch) {
    json instances = json::array();
    for (const TrainingInstance* instance : batch) {
        json masks = json::array();
        for (const masking::LossMask& mask : instance->masks) {
            masks.push_back(json{{"role_index", mask.role_index},
                                 {"strategy", masking::strategy_name(mask.strategy)},
                                 {"keep", mask.keep}});
        }
        instances.push_back(json{{"source_id", instance->source_id},
                                 {"weight", instance->weight},
                                 {"token_ids", instance->token_ids},
                                 {"masks", masks}});
    }
    const std::string path = dir + "/nan_batch_step" + std::to_string(step) + ".json";
    std::ofstream out(path);
    out << json{{"step", step}, {"instances", instances}}.dump(2) << "\n";
}

struct TrainBackendRefs {
    model::ToyModel* model = nullptr;
    const text::Tokenizer* tokenizer = nullptr;
};

TrainBackendRefs require_trainable(backend::ModelBackend& backend) {
    TrainBackendRefs refs;
    refs.model = backend.trainable_model();
    refs.tokenizer = backend.local_tokenizer();
    if (refs.model == nullptr || refs.tokenizer == nullptr) {
        throw Error::capability("backend '" + backend.name() + "' is not trainable");
    }
    return refs;
}

}  // namespace

TrainReport train(const std::vector<corpus::DialogueSample>& samples,
                  backend::ModelBackend& backend, const text::ChatTemplate& tpl,
                  const TrainConfig& config) {
    config.validate();
    if (samples.empty()) {
        throw Error::validation("train: empty corpus");
    }
    const auto refs = require_trainable(backend);
    const auto start = std::chrono::steady_clock::now();

    const masking::BatchConfig bc = batch_config(config);
    TrainReport report;

    std::vector<TrainingInstance> instances = build_epoch_instances(
        samples, tpl, *refs.tokenizer, bc, config.seed, 0, report.batch_stats);
    if (instances.empty()) {
        throw Error::validation("train: no usable training instances");
    }
    const std::size_t n = instances.size();
    const int steps_per_epoch =
        static_cast<int>((n + static_cast<std::size_t>(config.batch_size) - 1) /
                         static_cast<std::size_t>(config.batch_size));
    const int total_steps = config.epochs * steps_per_epoch;

    AdamState adam;
    int global_step = 0;

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        if (epoch > 0 && bc.utterance_level) {
            masking::BatchStats rebuild_stats;  // already counted on epoch 0
            instances = build_epoch_instances(samples, tpl, *refs.tokenizer, bc, config.seed,
                                              static_cast<std::uint64_t>(epoch), rebuild_stats);
        }

        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        rng::Stream shuffle_stream(rng::derive(config.seed, 1000, static_cast<std::uint64_t>(epoch)));
        shuffle_stream.shuffle(order);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return instances[a].token_ids.size() / 64 < instances[b].token_ids.size() / 64;
        });
        std::vector<std::vector<std::size_t>> batches;
        for (std::size_t at = 0; at < n; at += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(n, at + static_cast<std::size_t>(config.batch_size));
            batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
        }
        rng::Stream batch_stream(rng::derive(config.seed, 2000, static_cast<std::uint64_t>(epoch)));
        batch_stream.shuffle(batches);

        double epoch_loss = 0.0;
        double epoch_token = 0.0;
        for (const std::vector<std::size_t>& batch : batches) {
            refs.model->zero_grad();
            double loss_sum = 0.0, weight_sum = 0.0, token_sum = 0.0;
            std::size_t token_count = 0;
            for (const std::size_t idx : batch) {
                const TrainingInstance& instance = instances[idx];
                const std::vector<double> tw =
                    target_weights(instance, &report.empty_mask_warnings);
                const model::ForwardBackwardResult res =
                    refs.model->forward_backward(instance.token_ids, tw);
                loss_sum += res.loss;
                weight_sum += instance.weight;
                for (const masking::LossMask& mask : instance.masks) {
                    for (std::size_t j = 1; j < mask.keep.size(); ++j) {
                        if (mask.keep[j]) {
                            token_sum += res.nll[j];
                            token_count += 1;
                        }
                    }
                }
            }

            const double loss = loss_sum / weight_sum;
            if (!std::isfinite(loss)) {
                std::vector<const TrainingInstance*> bad;
                for (const std::size_t idx : batch) {
                    bad.push_back(&instances[idx]);
                }
                dump_batch(config.diagnostics_dir, global_step, bad);
                throw Error{ErrorKind::internal,
                            "train: loss diverged at step " + std::to_string(global_step) +
                                "; batch dumped to " + config.diagnostics_dir};
            }

            const double lr = config.schedule == "constant"
                                  ? config.lr
                                  : scheduled_lr(config.lr, global_step, total_steps,
                                                 config.warmup_fraction);
            adamw_step(*refs.model, adam, config, lr, 1.0 / weight_sum);

            StepRecord record;
            record.step = global_step;
            record.epoch = epoch;
            record.lr = lr;
            record.loss = loss;
            record.token_loss = token_count == 0 ? 0.0
                                                 : token_sum / static_cast<double>(token_count);
            record.instances = batch.size();
            epoch_loss += record.loss;
            epoch_token += record.token_loss;
            report.steps.push_back(record);
            global_step += 1;
        }
        report.epoch_mean_loss.push_back(epoch_loss / static_cast<double>(batches.size()));
        report.epoch_mean_token_loss.push_back(epoch_token / static_cast<double>(batches.size()));
    }

    report.total_instances = n;
    report.final_loss = report.epoch_mean_loss.back();
    report.last_step_loss = report.steps.back().loss;
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return report;
}

double eval_loss(const std::vector<corpus::DialogueSample>& samples,
                 backend::ModelBackend& backend, const text::ChatTemplate& tpl,
                 const TrainConfig& config) {
    config.validate();
    if (samples.empty()) {
        throw Error::validation("eval_loss: empty corpus");
    }
    const auto refs = require_trainable(backend);
    masking::BatchStats stats;
    const auto instances = build_epoch_instances(samples, tpl, *refs.tokenizer,
                                                 batch_config(config), config.seed, 0, stats);
    if (instances.empty()) {
        throw Error::validation("eval_loss: no usable instances");
    }
    double loss_sum = 0.0, weight_sum = 0.0;
    for (const TrainingInstance& instance : instances) {
        const std::vector<double> logprobs = refs.model->forward_logprobs(instance.token_ids);
        loss_sum += mupas_loss(logprobs, instance);
        weight_sum += instance.weight;
    }
    return loss_sum / weight_sum;
}

void write_report_jsonl(const TrainReport& report, const std::string& path) {
    std::ofstream out(path);
    if (!out) {
        throw Error::validation("cannot write train report to " + path);
    }
    for (const StepRecord& s : report.steps) {
        out << json{{"type", "step"},       {"step", s.step},
                    {"epoch", s.epoch},     {"lr", s.lr},
                    {"loss", s.loss},       {"token_loss", s.token_loss},
                    {"instances", s.instances}}
                   .dump()
            << "\n";
    }
    out << json{{"type", "summary"},
                {"epoch_mean_loss", report.epoch_mean_loss},
                {"epoch_mean_token_loss", report.epoch_mean_token_loss},
                {"final_loss", report.final_loss},
                {"last_step_loss", report.last_step_loss},
                {"wall_seconds", report.wall_seconds},
                {"total_instances", report.total_instances},
                {"empty_mask_warnings", report.empty_mask_warnings},
                {"skipped_overlong", report.batch_stats.skipped_overlong},
                {"truncated", report.batch_stats.truncated},
                {"checkpoint", report.checkpoint_path}}
               .dump()
        << "\n";
}

}  // namespace chorus::trainer
