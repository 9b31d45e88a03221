#pragma once

#include <mutex>
#include <optional>
#include <string>

#include <json.hpp>

#include "chorus/backend.hpp"

namespace chorus::backend {

// Transport settings for an external inference service. base_url/token fall
// back to CHORUS_BACKEND_URL / CHORUS_BACKEND_TOKEN; credentials never land
// in config snapshots.
struct RemoteConfig {
    std::string base_url;
    std::string token;
    std::string score_path = "/score";
    std::string generate_path = "/generate";
    std::string capabilities_path = "/capabilities";
    int timeout_seconds = 30;
    int max_retries = 2;   // extra attempts after the first
    int backoff_ms = 100;

    void resolve_env();  // fills empty fields from the environment
};

// HTTP adapter for the ModelBackend contract. Wire shapes:
//   GET  capabilities_path            -> {"scoring": bool, "generation": bool}
//   POST score_path    {prefix, continuation}        -> {"token_logprobs": [...]}
//   POST generate_path {prefix, params{...}}         -> {"text": "..."}
// A service without the capabilities route is treated as generation-only;
// scoring-dependent features (silence switching) then surface capability
// errors instead of approximations.
class RemoteBackend : public ModelBackend {
public:
    explicit RemoteBackend(RemoteConfig config);

    std::string name() const override { return "remote"; }
    Capabilities capabilities() const override;
    ScoreResult score_continuation(const std::string& prefix,
                                   const std::string& continuation) override;
    std::string generate(const std::string& prefix, const GenerationParams& params) override;

private:
    nlohmann::json request_json(const std::string& method, const std::string& path,
                                const std::optional<nlohmann::json>& body) const;

    RemoteConfig config_;
    mutable std::mutex mutex_;
    mutable std::optional<Capabilities> caps_;
};

}  // namespace chorus::backend
