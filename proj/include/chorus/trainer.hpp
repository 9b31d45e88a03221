#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "chorus/backend.hpp"
#include "chorus/chat_template.hpp"
#include "chorus/corpus.hpp"
#include "chorus/masking.hpp"

namespace chorus::trainer {

struct Ablations {
    bool utterance_level = false;
    bool without_scene = false;
    bool from_base = false;
};

struct TrainConfig {
    double lr = 5.0e-6;
    int batch_size = 32;
    int epochs = 2;
    std::string schedule = "cosine";
    double weight_decay = 0.01;
    std::string optimizer = "adamw";
    masking::Strategy strategy = masking::Strategy::base;
    Ablations ablations;
    std::uint64_t seed = 0;
    double warmup_fraction = 0.01;
    std::size_t window = 2048;
    bool mask_own_history = false;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::string diagnostics_dir = ".";

    void validate() const;
    nlohmann::json to_json() const;
    static TrainConfig from_json(const nlohmann::json& j);
};

struct StepRecord {
    int step = 0;
    int epoch = 0;
    double lr = 0.0;
    double loss = 0.0;        // role-averaged objective, weight-normalized
    double token_loss = 0.0;  // pooled mean over all supervised tokens
    std::size_t instances = 0;
};

struct TrainReport {
    std::vector<StepRecord> steps;
    std::vector<double> epoch_mean_loss;
    std::vector<double> epoch_mean_token_loss;
    double final_loss = 0.0;      // last epoch mean of the objective
    double last_step_loss = 0.0;
    double wall_seconds = 0.0;
    std::size_t total_instances = 0;
    std::size_t empty_mask_warnings = 0;
    masking::BatchStats batch_stats;
    std::string checkpoint_path;  // filled by the caller after saving
};

// Role-averaged objective for one instance: per mask, the mean negative
// log-probability over kept positions (token j read from row j-1 of
// logprobs); empty masks contribute 0 with a warning; the per-mask values
// are averaged and scaled by instance.weight.
double mupas_loss(const std::vector<double>& logprobs,
                  const masking::TrainingInstance& instance,
                  std::size_t* empty_mask_warnings = nullptr);

// Per-position weights w with sum_j w[j]*nll[j] == mupas_loss; feeds
// ToyModel::forward_backward.
std::vector<double> target_weights(const masking::TrainingInstance& instance,
                                   std::size_t* empty_mask_warnings = nullptr);

// Linear warmup over warmup_fraction of total steps, then cosine decay to 0.
double scheduled_lr(double base_lr, int step, int total_steps, double warmup_fraction);

TrainReport train(const std::vector<corpus::DialogueSample>& samples,
                  backend::ModelBackend& backend,
                  const text::ChatTemplate& tpl,
                  const TrainConfig& config);

double eval_loss(const std::vector<corpus::DialogueSample>& samples,
                 backend::ModelBackend& backend,
                 const text::ChatTemplate& tpl,
                 const TrainConfig& config);

// One JSON object per step, then a summary object.
void write_report_jsonl(const TrainReport& report, const std::string& path);

}  // namespace chorus::trainer
