#include "chorus/backend.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "chorus/checkpoint.hpp"
#include "chorus/error.hpp"
#include "chorus/rng.hpp"

namespace chorus::backend {

void GenerationParams::validate() const {
    if (max_new_tokens < 0) {
        throw Error::validation("generation params: max_new_tokens must be >= 0");
    }
    if (temperature < 0.0 || !std::isfinite(temperature)) {
        throw Error::validation("generation params: temperature must be finite and >= 0");
    }
    if (!(top_p > 0.0 && top_p <= 1.0)) {
        throw Error::validation("generation params: top_p must lie in (0, 1]");
    }
}

ToyBackend::ToyBackend(model::ToyModel model, text::Tokenizer tokenizer)
    : model_(std::move(model)), tokenizer_(std::move(tokenizer)) {
    if (model_.config().vocab_size != tokenizer_.vocab_size()) {
        throw Error::contract("toy backend: model vocab " +
                              std::to_string(model_.config().vocab_size) +
                              " does not match tokenizer vocab " +
                              std::to_string(tokenizer_.vocab_size()));
    }
}

ToyBackend ToyBackend::from_checkpoint(const std::string& path) {
    model::LoadedCheckpoint loaded = model::load_checkpoint(path);
    return ToyBackend(std::move(loaded.model), std::move(loaded.tokenizer));
}

ScoreResult ToyBackend::score_continuation(const std::string& prefix,
                                           const std::string& continuation) {
    if (continuation.empty()) {
        return {};
    }
    const std::vector<int> prefix_ids = tokenizer_.encode(prefix);
    if (prefix_ids.empty()) {
        throw Error::contract("toy backend: cannot score a continuation of an empty prefix");
    }
    const std::vector<int> full_ids = tokenizer_.encode(prefix + continuation);
    if (full_ids.size() <= prefix_ids.size() ||
        !std::equal(prefix_ids.begin(), prefix_ids.end(), full_ids.begin())) {
        throw Error::contract(
            "toy backend: tokenization merged across the prefix/continuation boundary");
    }

    // rows 0..n-2 suffice: the last continuation token is a target, never context
    const std::span<const int> context(full_ids.data(), full_ids.size() - 1);
    const std::vector<double> lp = model_.forward_logprobs(context);
    const auto V = static_cast<std::size_t>(model_.config().vocab_size);

    ScoreResult result;
    for (std::size_t j = prefix_ids.size(); j < full_ids.size(); ++j) {
        const double v = lp[(j - 1) * V + static_cast<std::size_t>(full_ids[j])];
        result.token_logprobs.push_back(v);
        result.total += v;
    }
    return result;
}

std::string ToyBackend::generate(const std::string& prefix, const GenerationParams& params) {
    params.validate();
    std::vector<int> ids = tokenizer_.encode(prefix);
    if (ids.empty()) {
        throw Error::contract("toy backend: cannot generate from an empty prefix");
    }
    if (params.max_new_tokens == 0) {
        return "";
    }

    rng::Stream stream(params.seed);
    const auto V = static_cast<std::size_t>(model_.config().vocab_size);
    std::string text;

    for (int step = 0; step < params.max_new_tokens; ++step) {
        if (ids.size() >= static_cast<std::size_t>(model_.config().window)) {
            break;
        }
        const std::vector<double> lp = model_.forward_logprobs(ids);
        const double* row = lp.data() + (ids.size() - 1) * V;

        std::size_t next = 0;
        if (params.temperature == 0.0) {
            for (std::size_t c = 1; c < V; ++c) {
                if (row[c] > row[next]) {
                    next = c;
                }
            }
        } else {
            std::vector<std::size_t> order(V);
            std::iota(order.begin(), order.end(), std::size_t{0});
            std::stable_sort(order.begin(), order.end(),
                             [&](std::size_t a, std::size_t b) { return row[a] > row[b]; });
            // nucleus: smallest prefix of the sorted vocab with mass >= top_p
            std::vector<double> probs(V);
            double mass = 0.0;
            std::size_t cut = V;
            for (std::size_t i = 0; i < V; ++i) {
                probs[i] = std::exp(row[order[i]] / params.temperature);
            }
            const double denom = std::accumulate(probs.begin(), probs.end(), 0.0);
            for (std::size_t i = 0; i < V; ++i) {
                probs[i] /= denom;
                mass += probs[i];
                if (mass >= params.top_p) {
                    cut = i + 1;
                    break;
                }
            }
            double nucleus = 0.0;
            for (std::size_t i = 0; i < cut; ++i) {
                nucleus += probs[i];
            }
            double draw = stream.next_unit() * nucleus;
            next = order[cut - 1];
            for (std::size_t i = 0; i < cut; ++i) {
                draw -= probs[i];
                if (draw <= 0.0) {
                    next = order[i];
                    break;
                }
            }
        }

        if (static_cast<int>(next) == tokenizer_.end_of_text_id()) {
            break;
        }
        ids.push_back(static_cast<int>(next));
        text += tokenizer_.token_text(static_cast<int>(next));

        std::size_t stop_at = std::string::npos;
        for (const std::string& stop : params.stop_strings) {
            if (stop.empty()) {
                continue;
            }
            const std::size_t at = text.find(stop);
            stop_at = std::min(stop_at, at);
        }
        if (stop_at != std::string::npos) {
            return text.substr(0, stop_at);
        }
    }
    return text;
}

}  // namespace chorus::backend
