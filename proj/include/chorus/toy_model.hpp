#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace chorus::model {

// Desk-scale decoder-only transformer. Everything runs in double precision so
// finite-difference gradient checks hold to tight tolerances.
struct ToyLMConfig {
    int layers = 2;
    int heads = 2;
    int model_dim = 32;
    int window = 2048;
    int vocab_size = 0;
    int mlp_mult = 4;

    void validate() const;  // throws Error::validation
    nlohmann::json to_json() const;
    static ToyLMConfig from_json(const nlohmann::json& j);
};

struct Tensor {
    std::string name;
    std::vector<std::size_t> shape;
    std::vector<double> v;
    std::vector<double> g;

    std::size_t size() const { return v.size(); }
};

struct ForwardBackwardResult {
    double loss = 0.0;           // sum over positions of target_weights[j] * nll[j]
    std::vector<double> nll;     // nll[j] = -log P(ids[j] | ids[..j]); nll[0] = 0
};

class ToyModel {
public:
    ToyModel(ToyLMConfig config, std::uint64_t init_seed);

    const ToyLMConfig& config() const { return config_; }

    // Stable registration order; optimizer state, checkpoints, and gradient
    // checks all key off it.
    std::vector<Tensor*> parameters();
    std::vector<const Tensor*> parameters() const;
    std::size_t param_count() const;
    void zero_grad();

    // Row t holds log P(next token | ids[0..t]) over the vocab; every row
    // log-normalizes to 0.
    std::vector<double> forward_logprobs(std::span<const int> ids) const;

    // Accumulates parameter gradients of sum_j target_weights[j] * nll[j].
    // target_weights[0] must be 0 (the first token has no left context).
    ForwardBackwardResult forward_backward(std::span<const int> ids,
                                           std::span<const double> target_weights);

private:
    struct Block {
        Tensor ln1_g, ln1_b;
        Tensor w_qkv, b_qkv;  // [D][3D], [3D]
        Tensor w_o, b_o;      // [D][D], [D]
        Tensor ln2_g, ln2_b;
        Tensor w_in, b_in;    // [D][M], [M]
        Tensor w_out, b_out;  // [M][D], [D]
    };

    struct BlockActs {
        std::vector<double> x_in;                       // [T][D]
        std::vector<double> ln1_out, ln1_mean, ln1_rstd;
        std::vector<double> qkv;                        // [T][3D]
        std::vector<double> probs;                      // [H][T][T]
        std::vector<double> ctx;                        // [T][D]
        std::vector<double> x_mid;                      // [T][D]
        std::vector<double> ln2_out, ln2_mean, ln2_rstd;
        std::vector<double> pre, act;                   // [T][M]
    };

    struct Activations {
        std::size_t T = 0;
        std::vector<BlockActs> blocks;
        std::vector<double> x;                          // [T][D] final block output
        std::vector<double> lnf_out, lnf_mean, lnf_rstd;
        std::vector<double> logits;                     // [T][V]
    };

    void check_ids(std::span<const int> ids) const;
    void forward(std::span<const int> ids, Activations& acts) const;
    void backward(std::span<const int> ids, const Activations& acts,
                  std::vector<double> dlogits);

    ToyLMConfig config_;
    Tensor tok_emb_;  // [V][D]
    Tensor pos_emb_;  // [W][D]
    std::vector<Block> blocks_;
    Tensor lnf_g_, lnf_b_;
    Tensor w_head_, b_head_;  // [D][V], [V]; zero-initialized, so an untrained
                              // model scores every token at exactly -ln V
};

}  // namespace chorus::model
