#include "chorus/toy_model.hpp"

#include <algorithm>
#include <cmath>

#include "chorus/error.hpp"
#include "chorus/rng.hpp"

namespace chorus::model {

using nlohmann::json;

void ToyLMConfig::validate() const {
    if (layers < 1 || heads < 1 || model_dim < 1 || window < 2 || vocab_size < 2 ||
        mlp_mult < 1) {
        throw Error::validation("toy model config: all sizes must be positive (window >= 2, vocab >= 2)");
    }
    if (model_dim % heads != 0) {
        throw Error::validation("toy model config: model_dim must be divisible by heads");
    }
}

json ToyLMConfig::to_json() const {
    return json{{"layers", layers},   {"heads", heads},           {"model_dim", model_dim},
                {"window", window},   {"vocab_size", vocab_size}, {"mlp_mult", mlp_mult}};
}

ToyLMConfig ToyLMConfig::from_json(const json& j) {
    ToyLMConfig c;
    auto get = [&](const char* key, int fallback) {
        return j.contains(key) ? j.at(key).get<int>() : fallback;
    };
    c.layers = get("layers", c.layers);
    c.heads = get("heads", c.heads);
    c.model_dim = get("model_dim", c.model_dim);
    c.window = get("window", c.window);
    c.vocab_size = get("vocab_size", c.vocab_size);
    c.mlp_mult = get("mlp_mult", c.mlp_mult);
    c.validate();
    return c;
}

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluK = 0.044715;

Tensor make_tensor(const std::string& name, std::vector<std::size_t> shape) {
    Tensor t;
    t.name = name;
    t.shape = std::move(shape);
    std::size_t n = 1;
    for (const std::size_t d : t.shape) {
        n *= d;
    }
    t.v.assign(n, 0.0);
    t.g.assign(n, 0.0);
    return t;
}

void fill_normal(Tensor& t, rng::Stream& stream, double stddev) {
    for (double& x : t.v) {
        x = stream.next_normal(0.0, stddev);
    }
}

// y[t][o] = sum_i x[t][i] W[i][o] + b[o]
void linear_forward(const std::vector<double>& x, const Tensor& w, const Tensor& b,
                    std::size_t T, std::size_t in, std::size_t out, std::vector<double>& y) {
    y.assign(T * out, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        double* yt = y.data() + t * out;
        for (std::size_t o = 0; o < out; ++o) {
            yt[o] = b.v[o];
        }
        const double* xt = x.data() + t * in;
        for (std::size_t i = 0; i < in; ++i) {
            const double xi = xt[i];
            const double* wi = w.v.data() + i * out;
            for (std::size_t o = 0; o < out; ++o) {
                yt[o] += xi * wi[o];
            }
        }
    }
}

void linear_backward(const std::vector<double>& x, Tensor& w, Tensor& b,
                     const std::vector<double>& dy, std::size_t T, std::size_t in,
                     std::size_t out, std::vector<double>& dx) {
    dx.assign(T * in, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        const double* xt = x.data() + t * in;
        const double* dyt = dy.data() + t * out;
        double* dxt = dx.data() + t * in;
        for (std::size_t o = 0; o < out; ++o) {
            b.g[o] += dyt[o];
        }
        for (std::size_t i = 0; i < in; ++i) {
            const double* wi = w.v.data() + i * out;
            double* gwi = w.g.data() + i * out;
            double acc = 0.0;
            const double xi = xt[i];
            for (std::size_t o = 0; o < out; ++o) {
                acc += dyt[o] * wi[o];
                gwi[o] += xi * dyt[o];
            }
            dxt[i] = acc;
        }
    }
}

void layernorm_forward(const std::vector<double>& x, const Tensor& gamma, const Tensor& beta,
                       std::size_t T, std::size_t D, std::vector<double>& y,
                       std::vector<double>& mean, std::vector<double>& rstd) {
    y.assign(T * D, 0.0);
    mean.assign(T, 0.0);
    rstd.assign(T, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        const double* xt = x.data() + t * D;
        double mu = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            mu += xt[d];
        }
        mu /= static_cast<double>(D);
        double var = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            const double c = xt[d] - mu;
            var += c * c;
        }
        var /= static_cast<double>(D);
        const double rs = 1.0 / std::sqrt(var + kLnEps);
        mean[t] = mu;
        rstd[t] = rs;
        double* yt = y.data() + t * D;
        for (std::size_t d = 0; d < D; ++d) {
            yt[d] = (xt[d] - mu) * rs * gamma.v[d] + beta.v[d];
        }
    }
}

void layernorm_backward(const std::vector<double>& x, Tensor& gamma, Tensor& beta,
                        const std::vector<double>& mean, const std::vector<double>& rstd,
                        const std::vector<double>& dy, std::size_t T, std::size_t D,
                        std::vector<double>& dx) {
    dx.assign(T * D, 0.0);
    for (std::size_t t = 0; t < T; ++t) {
        const double* xt = x.data() + t * D;
        const double* dyt = dy.data() + t * D;
        double* dxt = dx.data() + t * D;
        const double mu = mean[t];
        const double rs = rstd[t];
        double m1 = 0.0, m2 = 0.0;
        for (std::size_t d = 0; d < D; ++d) {
            const double xhat = (xt[d] - mu) * rs;
            const double dxhat = dyt[d] * gamma.v[d];
            gamma.g[d] += dyt[d] * xhat;
            beta.g[d] += dyt[d];
            m1 += dxhat;
            m2 += dxhat * xhat;
        }
        m1 /= static_cast<double>(D);
        m2 /= static_cast<double>(D);
        for (std::size_t d = 0; d < D; ++d) {
            const double xhat = (xt[d] - mu) * rs;
            const double dxhat = dyt[d] * gamma.v[d];
            dxt[d] = rs * (dxhat - m1 - xhat * m2);
        }
    }
}

double gelu(double x) {
    const double u = kGeluC * (x + kGeluK * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
    const double u = kGeluC * (x + kGeluK * x * x * x);
    const double th = std::tanh(u);
    return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluK * x * x);
}

}  // namespace

ToyModel::ToyModel(ToyLMConfig config, std::uint64_t init_seed) : config_(config) {
    config_.validate();
    const auto V = static_cast<std::size_t>(config_.vocab_size);
    const auto D = static_cast<std::size_t>(config_.model_dim);
    const auto W = static_cast<std::size_t>(config_.window);
    const auto M = D * static_cast<std::size_t>(config_.mlp_mult);

    tok_emb_ = make_tensor("tok_emb", {V, D});
    pos_emb_ = make_tensor("pos_emb", {W, D});
    blocks_.resize(static_cast<std::size_t>(config_.layers));
    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const std::string p = "block" + std::to_string(l) + ".";
        Block& b = blocks_[l];
        b.ln1_g = make_tensor(p + "ln1_g", {D});
        b.ln1_b = make_tensor(p + "ln1_b", {D});
        b.w_qkv = make_tensor(p + "w_qkv", {D, 3 * D});
        b.b_qkv = make_tensor(p + "b_qkv", {3 * D});
        b.w_o = make_tensor(p + "w_o", {D, D});
        b.b_o = make_tensor(p + "b_o", {D});
        b.ln2_g = make_tensor(p + "ln2_g", {D});
        b.ln2_b = make_tensor(p + "ln2_b", {D});
        b.w_in = make_tensor(p + "w_in", {D, M});
        b.b_in = make_tensor(p + "b_in", {M});
        b.w_out = make_tensor(p + "w_out", {M, D});
        b.b_out = make_tensor(p + "b_out", {D});
    }
    lnf_g_ = make_tensor("lnf_g", {D});
    lnf_b_ = make_tensor("lnf_b", {D});
    w_head_ = make_tensor("w_head", {D, V});
    b_head_ = make_tensor("b_head", {V});

    rng::Stream stream(init_seed);
    fill_normal(tok_emb_, stream, 0.02);
    fill_normal(pos_emb_, stream, 0.02);
    for (Block& b : blocks_) {
        std::fill(b.ln1_g.v.begin(), b.ln1_g.v.end(), 1.0);
        fill_normal(b.w_qkv, stream, 0.02);
        fill_normal(b.w_o, stream, 0.02);
        std::fill(b.ln2_g.v.begin(), b.ln2_g.v.end(), 1.0);
        fill_normal(b.w_in, stream, 0.02);
        fill_normal(b.w_out, stream, 0.02);
    }
    std::fill(lnf_g_.v.begin(), lnf_g_.v.end(), 1.0);
    // w_head_/b_head_ stay zero
}

std::vector<Tensor*> ToyModel::parameters() {
    std::vector<Tensor*> out{&tok_emb_, &pos_emb_};
    for (Block& b : blocks_) {
        for (Tensor* t : {&b.ln1_g, &b.ln1_b, &b.w_qkv, &b.b_qkv, &b.w_o, &b.b_o, &b.ln2_g,
                          &b.ln2_b, &b.w_in, &b.b_in, &b.w_out, &b.b_out}) {
            out.push_back(t);
        }
    }
    out.push_back(&lnf_g_);
    out.push_back(&lnf_b_);
    out.push_back(&w_head_);
    out.push_back(&b_head_);
    return out;
}

std::vector<const Tensor*> ToyModel::parameters() const {
    auto* self = const_cast<ToyModel*>(this);
    std::vector<const Tensor*> out;
    for (Tensor* t : self->parameters()) {
        out.push_back(t);
    }
    return out;
}

std::size_t ToyModel::param_count() const {
    std::size_t n = 0;
    for (const Tensor* t : parameters()) {
        n += t->size();
    }
    return n;
}

void ToyModel::zero_grad() {
    for (Tensor* t : parameters()) {
        std::fill(t->g.begin(), t->g.end(), 0.0);
    }
}

void ToyModel::check_ids(std::span<const int> ids) const {
    if (ids.empty()) {
        throw Error::contract("toy model: empty token sequence");
    }
    if (ids.size() > static_cast<std::size_t>(config_.window)) {
        throw Error::contract("toy model: sequence of " + std::to_string(ids.size()) +
                              " tokens overflows window " + std::to_string(config_.window));
    }
    for (const int id : ids) {
        if (id < 0 || id >= config_.vocab_size) {
            throw Error::contract("toy model: token id " + std::to_string(id) +
                                  " outside vocab of " + std::to_string(config_.vocab_size));
        }
    }
}

void ToyModel::forward(std::span<const int> ids, Activations& acts) const {
    const std::size_t T = ids.size();
    const auto D = static_cast<std::size_t>(config_.model_dim);
    const auto H = static_cast<std::size_t>(config_.heads);
    const std::size_t Dh = D / H;
    const auto V = static_cast<std::size_t>(config_.vocab_size);
    const std::size_t M = D * static_cast<std::size_t>(config_.mlp_mult);
    const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));

    acts.T = T;
    acts.blocks.assign(blocks_.size(), {});

    std::vector<double> x(T * D);
    for (std::size_t t = 0; t < T; ++t) {
        const double* te = tok_emb_.v.data() + static_cast<std::size_t>(ids[t]) * D;
        const double* pe = pos_emb_.v.data() + t * D;
        double* xt = x.data() + t * D;
        for (std::size_t d = 0; d < D; ++d) {
            xt[d] = te[d] + pe[d];
        }
    }

    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const Block& b = blocks_[l];
        BlockActs& a = acts.blocks[l];
        a.x_in = x;

        layernorm_forward(a.x_in, b.ln1_g, b.ln1_b, T, D, a.ln1_out, a.ln1_mean, a.ln1_rstd);
        linear_forward(a.ln1_out, b.w_qkv, b.b_qkv, T, D, 3 * D, a.qkv);

        a.probs.assign(H * T * T, 0.0);
        a.ctx.assign(T * D, 0.0);
        std::vector<double> scores(T);
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t qo = h * Dh, ko = D + h * Dh, vo = 2 * D + h * Dh;
            for (std::size_t t = 0; t < T; ++t) {
                const double* qt = a.qkv.data() + t * 3 * D + qo;
                double maxs = -1e300;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* ks = a.qkv.data() + s * 3 * D + ko;
                    double dot = 0.0;
                    for (std::size_t d = 0; d < Dh; ++d) {
                        dot += qt[d] * ks[d];
                    }
                    scores[s] = dot * scale;
                    maxs = std::max(maxs, scores[s]);
                }
                double denom = 0.0;
                double* pt = a.probs.data() + (h * T + t) * T;
                for (std::size_t s = 0; s <= t; ++s) {
                    pt[s] = std::exp(scores[s] - maxs);
                    denom += pt[s];
                }
                double* ct = a.ctx.data() + t * D + h * Dh;
                for (std::size_t s = 0; s <= t; ++s) {
                    pt[s] /= denom;
                    const double* vs = a.qkv.data() + s * 3 * D + vo;
                    for (std::size_t d = 0; d < Dh; ++d) {
                        ct[d] += pt[s] * vs[d];
                    }
                }
            }
        }

        std::vector<double> attn_out;
        linear_forward(a.ctx, b.w_o, b.b_o, T, D, D, attn_out);
        a.x_mid.assign(T * D, 0.0);
        for (std::size_t i = 0; i < T * D; ++i) {
            a.x_mid[i] = a.x_in[i] + attn_out[i];
        }

        layernorm_forward(a.x_mid, b.ln2_g, b.ln2_b, T, D, a.ln2_out, a.ln2_mean, a.ln2_rstd);
        linear_forward(a.ln2_out, b.w_in, b.b_in, T, D, M, a.pre);
        a.act.assign(T * M, 0.0);
        for (std::size_t i = 0; i < T * M; ++i) {
            a.act[i] = gelu(a.pre[i]);
        }
        std::vector<double> mlp_out;
        linear_forward(a.act, b.w_out, b.b_out, T, M, D, mlp_out);
        for (std::size_t i = 0; i < T * D; ++i) {
            x[i] = a.x_mid[i] + mlp_out[i];
        }
    }

    acts.x = x;
    layernorm_forward(acts.x, lnf_g_, lnf_b_, T, D, acts.lnf_out, acts.lnf_mean, acts.lnf_rstd);
    linear_forward(acts.lnf_out, w_head_, b_head_, T, D, V, acts.logits);
}

std::vector<double> ToyModel::forward_logprobs(std::span<const int> ids) const {
    check_ids(ids);
    Activations acts;
    forward(ids, acts);

    const auto V = static_cast<std::size_t>(config_.vocab_size);
    std::vector<double> out(acts.logits.size());
    for (std::size_t t = 0; t < acts.T; ++t) {
        const double* zt = acts.logits.data() + t * V;
        double maxz = zt[0];
        for (std::size_t c = 1; c < V; ++c) {
            maxz = std::max(maxz, zt[c]);
        }
        double sum = 0.0;
        for (std::size_t c = 0; c < V; ++c) {
            sum += std::exp(zt[c] - maxz);
        }
        const double lse = maxz + std::log(sum);
        double* ot = out.data() + t * V;
        for (std::size_t c = 0; c < V; ++c) {
            ot[c] = zt[c] - lse;
        }
    }
    return out;
}

ForwardBackwardResult ToyModel::forward_backward(std::span<const int> ids,
                                                 std::span<const double> target_weights) {
    check_ids(ids);
    if (target_weights.size() != ids.size()) {
        throw Error::contract("toy model: target_weights length mismatch");
    }
    if (!target_weights.empty() && target_weights.front() != 0.0) {
        throw Error::contract("toy model: position 0 cannot carry loss weight");
    }
    for (const double w : target_weights) {
        if (!std::isfinite(w) || w < 0.0) {
            throw Error::contract("toy model: target weights must be finite and non-negative");
        }
    }

    Activations acts;
    forward(ids, acts);

    const std::size_t T = acts.T;
    const auto V = static_cast<std::size_t>(config_.vocab_size);

    ForwardBackwardResult result;
    result.nll.assign(T, 0.0);
    std::vector<double> dlogits(T * V, 0.0);
    for (std::size_t j = 1; j < T; ++j) {
        const std::size_t row = j - 1;
        const double* zt = acts.logits.data() + row * V;
        double maxz = zt[0];
        for (std::size_t c = 1; c < V; ++c) {
            maxz = std::max(maxz, zt[c]);
        }
        double sum = 0.0;
        for (std::size_t c = 0; c < V; ++c) {
            sum += std::exp(zt[c] - maxz);
        }
        const double lse = maxz + std::log(sum);
        const auto target = static_cast<std::size_t>(ids[j]);
        result.nll[j] = lse - zt[target];

        const double tw = target_weights[j];
        if (tw != 0.0) {
            result.loss += tw * result.nll[j];
            double* dz = dlogits.data() + row * V;
            for (std::size_t c = 0; c < V; ++c) {
                dz[c] += tw * (std::exp(zt[c] - lse));
            }
            dz[target] -= tw;
        }
    }

    backward(ids, acts, std::move(dlogits));
    return result;
}

void ToyModel::backward(std::span<const int> ids, const Activations& acts,
                        std::vector<double> dlogits) {
    const std::size_t T = acts.T;
    const auto D = static_cast<std::size_t>(config_.model_dim);
    const auto H = static_cast<std::size_t>(config_.heads);
    const std::size_t Dh = D / H;
    const auto V = static_cast<std::size_t>(config_.vocab_size);
    const std::size_t M = D * static_cast<std::size_t>(config_.mlp_mult);
    const double scale = 1.0 / std::sqrt(static_cast<double>(Dh));
    (void)V;

    std::vector<double> d_lnf_out;
    linear_backward(acts.lnf_out, w_head_, b_head_, dlogits, T, D, V, d_lnf_out);
    std::vector<double> dx;
    layernorm_backward(acts.x, lnf_g_, lnf_b_, acts.lnf_mean, acts.lnf_rstd, d_lnf_out, T, D, dx);

    for (std::size_t l = blocks_.size(); l-- > 0;) {
        Block& b = blocks_[l];
        const BlockActs& a = acts.blocks[l];

        // x_out = x_mid + w_out(gelu(w_in(ln2(x_mid))))
        std::vector<double> dact;
        linear_backward(a.act, b.w_out, b.b_out, dx, T, M, D, dact);
        std::vector<double> dpre(T * M);
        for (std::size_t i = 0; i < T * M; ++i) {
            dpre[i] = dact[i] * gelu_grad(a.pre[i]);
        }
        std::vector<double> d_ln2_out;
        linear_backward(a.ln2_out, b.w_in, b.b_in, dpre, T, D, M, d_ln2_out);
        std::vector<double> dx_mid;
        layernorm_backward(a.x_mid, b.ln2_g, b.ln2_b, a.ln2_mean, a.ln2_rstd, d_ln2_out, T, D,
                           dx_mid);
        for (std::size_t i = 0; i < T * D; ++i) {
            dx_mid[i] += dx[i];  // residual
        }

        // x_mid = x_in + w_o(attend(qkv(ln1(x_in))))
        std::vector<double> dctx;
        linear_backward(a.ctx, b.w_o, b.b_o, dx_mid, T, D, D, dctx);

        std::vector<double> dqkv(T * 3 * D, 0.0);
        std::vector<double> dp(T), dscore(T);
        for (std::size_t h = 0; h < H; ++h) {
            const std::size_t qo = h * Dh, ko = D + h * Dh, vo = 2 * D + h * Dh;
            for (std::size_t t = 0; t < T; ++t) {
                const double* pt = a.probs.data() + (h * T + t) * T;
                const double* dct = dctx.data() + t * D + h * Dh;

                double dot_pp = 0.0;
                for (std::size_t s = 0; s <= t; ++s) {
                    const double* vs = a.qkv.data() + s * 3 * D + vo;
                    double acc = 0.0;
                    for (std::size_t d = 0; d < Dh; ++d) {
                        acc += dct[d] * vs[d];
                    }
                    dp[s] = acc;
                    dot_pp += pt[s] * acc;

                    double* dvs = dqkv.data() + s * 3 * D + vo;
                    for (std::size_t d = 0; d < Dh; ++d) {
                        dvs[d] += pt[s] * dct[d];
                    }
                }
                const double* qt = a.qkv.data() + t * 3 * D + qo;
                double* dqt = dqkv.data() + t * 3 * D + qo;
                for (std::size_t s = 0; s <= t; ++s) {
                    dscore[s] = pt[s] * (dp[s] - dot_pp);
                    const double* ks = a.qkv.data() + s * 3 * D + ko;
                    double* dks = dqkv.data() + s * 3 * D + ko;
                    const double g = dscore[s] * scale;
                    for (std::size_t d = 0; d < Dh; ++d) {
                        dqt[d] += g * ks[d];
                        dks[d] += g * qt[d];
                    }
                }
            }
        }

        std::vector<double> d_ln1_out;
        linear_backward(a.ln1_out, b.w_qkv, b.b_qkv, dqkv, T, D, 3 * D, d_ln1_out);
        std::vector<double> dx_in;
        layernorm_backward(a.x_in, b.ln1_g, b.ln1_b, a.ln1_mean, a.ln1_rstd, d_ln1_out, T, D,
                           dx_in);
        for (std::size_t i = 0; i < T * D; ++i) {
            dx_in[i] += dx_mid[i];  // residual
        }
        dx = std::move(dx_in);
    }

    for (std::size_t t = 0; t < T; ++t) {
        const double* dxt = dx.data() + t * D;
        double* gte = tok_emb_.g.data() + static_cast<std::size_t>(ids[t]) * D;
        double* gpe = pos_emb_.g.data() + t * D;
        for (std::size_t d = 0; d < D; ++d) {
            gte[d] += dxt[d];
            gpe[d] += dxt[d];
        }
    }
}

}  // namespace chorus::model
