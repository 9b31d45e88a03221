#include "chorus/remote_backend.hpp"

#include <chrono>
#include <cstdlib>
#include <thread>

#include <httplib.h>

#include "chorus/error.hpp"

namespace chorus::backend {

using nlohmann::json;

void RemoteConfig::resolve_env() {
    if (base_url.empty()) {
        if (const char* url = std::getenv("CHORUS_BACKEND_URL")) {
            base_url = url;
        }
    }
    if (token.empty()) {
        if (const char* tok = std::getenv("CHORUS_BACKEND_TOKEN")) {
            token = tok;
        }
    }
}

RemoteBackend::RemoteBackend(RemoteConfig config) : config_(std::move(config)) {
    config_.resolve_env();
    if (config_.base_url.empty()) {
        throw Error::validation(
            "remote backend: no endpoint (set --backend-url or CHORUS_BACKEND_URL)");
    }
}

json RemoteBackend::request_json(const std::string& method, const std::string& path,
                                 const std::optional<json>& body) const {
    std::string last_failure;
    const int attempts = 1 + std::max(0, config_.max_retries);
    for (int attempt = 1; attempt <= attempts; ++attempt) {
        if (attempt > 1) {
            std::this_thread::sleep_for(std::chrono::milliseconds(config_.backoff_ms * (attempt - 1)));
        }
        httplib::Client client(config_.base_url);
        client.set_connection_timeout(config_.timeout_seconds, 0);
        client.set_read_timeout(config_.timeout_seconds, 0);
        httplib::Headers headers;
        if (!config_.token.empty()) {
            headers.emplace("Authorization", "Bearer " + config_.token);
        }

        httplib::Result res = method == "GET"
                                  ? client.Get(path, headers)
                                  : client.Post(path, headers, body->dump(), "application/json");
        if (!res) {
            last_failure = "transport: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 200 && res->status < 300) {
            try {
                return json::parse(res->body);
            } catch (const json::exception& e) {
                throw Error::parse("remote backend: " + path +
                                   " returned unparseable JSON: " + e.what());
            }
        }
        if (res->status == 404) {
            throw Error::capability("remote backend: endpoint has no " + path + " route");
        }
        if (res->status == 401 || res->status == 403) {
            throw Error::transport("remote backend: authentication rejected for " + path);
        }
        if (res->status >= 400 && res->status < 500) {
            throw Error::validation("remote backend: " + path + " rejected the request (HTTP " +
                                    std::to_string(res->status) + "): " + res->body);
        }
        last_failure = "HTTP " + std::to_string(res->status);
    }
    throw Error::transport("remote backend: " + path + " failed after " +
                           std::to_string(attempts) + " attempts (last: " + last_failure + ")");
}

Capabilities RemoteBackend::capabilities() const {
    std::lock_guard lock(mutex_);
    if (caps_) {
        return *caps_;
    }
    Capabilities caps{false, false, true};
    try {
        const json j = request_json("GET", config_.capabilities_path, std::nullopt);
        caps.scoring = j.value("scoring", false);
        caps.generation = j.value("generation", true);
    } catch (const Error& e) {
        if (e.kind() != ErrorKind::capability) {
            throw;
        }
        // no capabilities route: conservatively generation-only
    }
    caps_ = caps;
    return caps;
}

ScoreResult RemoteBackend::score_continuation(const std::string& prefix,
                                              const std::string& continuation) {
    if (!capabilities().scoring) {
        throw Error::capability(
            "remote backend: endpoint does not support continuation scoring");
    }
    if (continuation.empty()) {
        return {};
    }
    const json j = request_json("POST", config_.score_path,
                                json{{"prefix", prefix}, {"continuation", continuation}});
    if (!j.contains("token_logprobs") || !j["token_logprobs"].is_array()) {
        throw Error::parse("remote backend: score response lacks token_logprobs");
    }
    ScoreResult result;
    for (const auto& v : j["token_logprobs"]) {
        if (!v.is_number()) {
            throw Error::parse("remote backend: non-numeric token logprob");
        }
        const double lp = v.get<double>();
        result.token_logprobs.push_back(lp);
        result.total += lp;
    }
    return result;
}

std::string RemoteBackend::generate(const std::string& prefix, const GenerationParams& params) {
    params.validate();
    if (!capabilities().generation) {
        throw Error::capability("remote backend: endpoint does not support generation");
    }
    const json body{{"prefix", prefix},
                    {"params",
                     json{{"max_new_tokens", params.max_new_tokens},
                          {"temperature", params.temperature},
                          {"top_p", params.top_p},
                          {"stop_strings", params.stop_strings},
                          {"seed", params.seed}}}};
    const json j = request_json("POST", config_.generate_path, body);
    if (!j.contains("text") || !j["text"].is_string()) {
        throw Error::parse("remote backend: generate response lacks text");
    }
    std::string text = j["text"].get<std::string>();
    std::size_t stop_at = std::string::npos;
    for (const std::string& stop : params.stop_strings) {
        if (!stop.empty()) {
            stop_at = std::min(stop_at, text.find(stop));
        }
    }
    if (stop_at != std::string::npos) {
        text.resize(stop_at);
    }
    return text;
}

}  // namespace chorus::backend
