#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fllm/errors.hpp"
#include "fllm/rng.hpp"
#include "fllm/tensor.hpp"

namespace fllm {

struct ModelConfig {
    int vocab_size = 256;  // byte-level
    int d_model = 128;
    int n_layers = 2;
    int n_heads = 4;
    int d_ff = 512;
    int max_seq_len = 64;
    uint64_t seed = 0;

    void validate() const {
        if (vocab_size <= 0 || d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_ff <= 0)
            throw ConfigError("model config: all sizes must be positive");
        if (max_seq_len < 2) throw ConfigError("model config: max_seq_len must be >= 2");
        if (d_model % n_heads != 0)
            throw ConfigError("model config: d_model (" + std::to_string(d_model) +
                              ") not divisible by n_heads (" + std::to_string(n_heads) + ")");
    }

    static ModelConfig desk_default() { return ModelConfig{}; }

    bool same_architecture(const ModelConfig& o) const {
        return vocab_size == o.vocab_size && d_model == o.d_model && n_layers == o.n_layers &&
               n_heads == o.n_heads && d_ff == o.d_ff && max_seq_len == o.max_seq_len;
    }

    bool operator==(const ModelConfig&) const = default;
};

// Closed-form parameter count. Token embedding doubles as the LM head
// (weight tying), so it is counted once. Per block: two layernorms
// (gain + bias), four d*d attention matrices, and the two MLP matrices.
inline int64_t parameter_count_formula(const ModelConfig& cfg) {
    int64_t d = cfg.d_model;
    int64_t per_block = 4 * d * d + 2 * d * cfg.d_ff + 4 * d;
    return static_cast<int64_t>(cfg.vocab_size) * d + static_cast<int64_t>(cfg.max_seq_len) * d +
           cfg.n_layers * per_block + 2 * d;
}

enum class Target { Wq, Wk, Wv, Wo, Win, Wout };

inline constexpr std::array<Target, 6> kAllTargets = {Target::Wq, Target::Wk,  Target::Wv,
                                                      Target::Wo, Target::Win, Target::Wout};

inline const char* target_name(Target t) {
    switch (t) {
        case Target::Wq: return "wq";
        case Target::Wk: return "wk";
        case Target::Wv: return "wv";
        case Target::Wo: return "wo";
        case Target::Win: return "w_in";
        case Target::Wout: return "w_out";
    }
    return "?";
}

inline std::optional<Target> target_from_name(const std::string& s) {
    for (Target t : kAllTargets)
        if (s == target_name(t)) return t;
    return std::nullopt;
}

// Hook interface through which adapters modify the forward pass without the
// model knowing about any particular adapter scheme.
template <typename S>
struct AdapterHooksT {
    virtual ~AdapterHooksT() = default;

    // Computes the projection for (layer, target); the base path is
    // g.linear(x, w). Implementations add their delta on top.
    virtual TensorT<S> project(GraphT<S>& g, int layer, Target target, const TensorT<S>& x,
                               const TensorT<S>& w) const {
        (void)layer;
        (void)target;
        return g.linear(x, w);
    }

    // Key/value prefix rows for the given layer, or nullopt for none.
    virtual std::optional<std::pair<TensorT<S>, TensorT<S>>> prefix_kv(GraphT<S>& g,
                                                                       int layer) const {
        (void)g;
        (void)layer;
        return std::nullopt;
    }

    // Diagnostic: when true the attention masks prefix slots to -inf.
    virtual bool mask_prefix_scores() const { return false; }
};

// Tiny pre-norm decoder-only transformer with learned positional embeddings
// and the LM head tied to the token embedding.
template <typename S>
class MiniLMT {
public:
    using Tensor = TensorT<S>;

    struct Block {
        Tensor ln1_gain, ln1_bias;
        Tensor wq, wk, wv, wo;  // [d_model, d_model], stored [out, in]
        Tensor ln2_gain, ln2_bias;
        Tensor w_in;   // [d_ff, d_model]
        Tensor w_out;  // [d_model, d_ff]
    };

    explicit MiniLMT(const ModelConfig& cfg) : cfg_(cfg) {
        cfg.validate();
        DetRng rng(cfg.seed);
        const S std = static_cast<S>(0.02);
        tok_emb_ = Tensor::gaussian({cfg.vocab_size, cfg.d_model}, std, rng);
        pos_emb_ = Tensor::gaussian({cfg.max_seq_len, cfg.d_model}, std, rng);
        blocks_.reserve(cfg.n_layers);
        for (int l = 0; l < cfg.n_layers; ++l) {
            Block b;
            b.ln1_gain = Tensor({cfg.d_model}, S(1));
            b.ln1_bias = Tensor({cfg.d_model}, S(0));
            b.wq = Tensor::gaussian({cfg.d_model, cfg.d_model}, std, rng);
            b.wk = Tensor::gaussian({cfg.d_model, cfg.d_model}, std, rng);
            b.wv = Tensor::gaussian({cfg.d_model, cfg.d_model}, std, rng);
            b.wo = Tensor::gaussian({cfg.d_model, cfg.d_model}, std, rng);
            b.ln2_gain = Tensor({cfg.d_model}, S(1));
            b.ln2_bias = Tensor({cfg.d_model}, S(0));
            b.w_in = Tensor::gaussian({cfg.d_ff, cfg.d_model}, std, rng);
            b.w_out = Tensor::gaussian({cfg.d_model, cfg.d_ff}, std, rng);
            blocks_.push_back(std::move(b));
        }
        lnf_gain_ = Tensor({cfg.d_model}, S(1));
        lnf_bias_ = Tensor({cfg.d_model}, S(0));
    }

    const ModelConfig& config() const { return cfg_; }

    Tensor forward(GraphT<S>& g, std::span<const int> tokens,
                   const AdapterHooksT<S>* hooks = nullptr) const {
        if (tokens.empty()) throw LengthError("forward: empty token sequence");
        if (static_cast<int>(tokens.size()) > cfg_.max_seq_len)
            throw LengthError("forward: sequence length " + std::to_string(tokens.size()) +
                              " exceeds max_seq_len " + std::to_string(cfg_.max_seq_len));
        int len = static_cast<int>(tokens.size());
        std::vector<int> positions(len);
        for (int i = 0; i < len; ++i) positions[i] = i;

        Tensor x = g.add(g.embedding(tok_emb_, tokens), g.embedding(pos_emb_, positions));
        for (int l = 0; l < cfg_.n_layers; ++l) {
            const Block& b = blocks_[l];
            Tensor h = g.layernorm(x, b.ln1_gain, b.ln1_bias);
            Tensor q = project(g, hooks, l, Target::Wq, h, b.wq);
            Tensor k = project(g, hooks, l, Target::Wk, h, b.wk);
            Tensor v = project(g, hooks, l, Target::Wv, h, b.wv);
            Tensor att;
            std::optional<std::pair<Tensor, Tensor>> kv;
            if (hooks) kv = hooks->prefix_kv(g, l);
            if (kv) {
                att = g.causal_attention(q, k, v, cfg_.n_heads, &kv->first, &kv->second,
                                         hooks->mask_prefix_scores());
            } else {
                att = g.causal_attention(q, k, v, cfg_.n_heads);
            }
            Tensor o = project(g, hooks, l, Target::Wo, att, b.wo);
            x = g.add(x, o);
            Tensor h2 = g.layernorm(x, b.ln2_gain, b.ln2_bias);
            Tensor m = project(g, hooks, l, Target::Win, h2, b.w_in);
            m = g.gelu(m);
            m = project(g, hooks, l, Target::Wout, m, b.w_out);
            x = g.add(x, m);
        }
        x = g.layernorm(x, lnf_gain_, lnf_bias_);
        return g.linear(x, tok_emb_);  // tied LM head
    }

    std::vector<Tensor> parameters() {
        std::vector<Tensor> ps;
        for (auto& [name, t] : named_parameters()) {
            (void)name;
            ps.push_back(t);
        }
        return ps;
    }

    std::vector<std::pair<std::string, Tensor>> named_parameters() {
        std::vector<std::pair<std::string, Tensor>> ps;
        ps.emplace_back("tok_emb", tok_emb_);
        ps.emplace_back("pos_emb", pos_emb_);
        for (size_t l = 0; l < blocks_.size(); ++l) {
            std::string p = "blocks." + std::to_string(l) + ".";
            Block& b = blocks_[l];
            ps.emplace_back(p + "ln1.gain", b.ln1_gain);
            ps.emplace_back(p + "ln1.bias", b.ln1_bias);
            ps.emplace_back(p + "attn.wq", b.wq);
            ps.emplace_back(p + "attn.wk", b.wk);
            ps.emplace_back(p + "attn.wv", b.wv);
            ps.emplace_back(p + "attn.wo", b.wo);
            ps.emplace_back(p + "ln2.gain", b.ln2_gain);
            ps.emplace_back(p + "ln2.bias", b.ln2_bias);
            ps.emplace_back(p + "mlp.w_in", b.w_in);
            ps.emplace_back(p + "mlp.w_out", b.w_out);
        }
        ps.emplace_back("lnf.gain", lnf_gain_);
        ps.emplace_back("lnf.bias", lnf_bias_);
        return ps;
    }

    int64_t parameter_count() {
        int64_t n = 0;
        for (auto& [name, t] : named_parameters()) {
            (void)name;
            n += static_cast<int64_t>(t.size());
        }
        return n;
    }

    void set_trainable(bool trainable) {
        for (auto& [name, t] : named_parameters()) {
            (void)name;
            t.set_requires_grad(trainable);
        }
    }

    MiniLMT clone() const {
        MiniLMT m = *this;
        m.tok_emb_ = tok_emb_.clone();
        m.pos_emb_ = pos_emb_.clone();
        for (size_t l = 0; l < blocks_.size(); ++l) {
            Block& b = m.blocks_[l];
            const Block& src = blocks_[l];
            b.ln1_gain = src.ln1_gain.clone();
            b.ln1_bias = src.ln1_bias.clone();
            b.wq = src.wq.clone();
            b.wk = src.wk.clone();
            b.wv = src.wv.clone();
            b.wo = src.wo.clone();
            b.ln2_gain = src.ln2_gain.clone();
            b.ln2_bias = src.ln2_bias.clone();
            b.w_in = src.w_in.clone();
            b.w_out = src.w_out.clone();
        }
        m.lnf_gain_ = lnf_gain_.clone();
        m.lnf_bias_ = lnf_bias_.clone();
        return m;
    }

    Tensor& token_embedding() { return tok_emb_; }
    const Tensor& token_embedding() const { return tok_emb_; }
    Tensor& positional_embedding() { return pos_emb_; }
    std::vector<Block>& blocks() { return blocks_; }
    const std::vector<Block>& blocks() const { return blocks_; }
    Tensor& final_norm_gain() { return lnf_gain_; }
    Tensor& final_norm_bias() { return lnf_bias_; }

    Tensor& weight(int layer, Target t) {
        Block& b = blocks_.at(layer);
        switch (t) {
            case Target::Wq: return b.wq;
            case Target::Wk: return b.wk;
            case Target::Wv: return b.wv;
            case Target::Wo: return b.wo;
            case Target::Win: return b.w_in;
            case Target::Wout: return b.w_out;
        }
        throw ContractError("unknown target");
    }

private:
    static Tensor project(GraphT<S>& g, const AdapterHooksT<S>* hooks, int layer, Target t,
                          const Tensor& x, const Tensor& w) {
        if (hooks) return hooks->project(g, layer, t, x, w);
        return g.linear(x, w);
    }

    ModelConfig cfg_;
    Tensor tok_emb_, pos_emb_;
    std::vector<Block> blocks_;
    Tensor lnf_gain_, lnf_bias_;
};

using MiniLM = MiniLMT<float>;

// ---- byte-level tokenizer and generation ----------------------------------

inline std::vector<int> bytes_to_tokens(std::span<const uint8_t> bytes) {
    return std::vector<int>(bytes.begin(), bytes.end());
}

inline std::vector<int> text_to_tokens(std::string_view text) {
    std::vector<int> t(text.size());
    for (size_t i = 0; i < text.size(); ++i) t[i] = static_cast<uint8_t>(text[i]);
    return t;
}

inline std::string tokens_to_text(std::span<const int> tokens) {
    std::string s(tokens.size(), '\0');
    for (size_t i = 0; i < tokens.size(); ++i) s[i] = static_cast<char>(tokens[i] & 0xff);
    return s;
}

enum class DecodeMode { Greedy, TopK };

// Autoregressive continuation. Greedy mode is fully deterministic (argmax,
// lowest index on ties); top-k sampling is deterministic given the seed.
// The context window slides when prompt + continuation exceeds max_seq_len.
template <typename S>
std::string generate(const MiniLMT<S>& model, std::string_view prompt, int max_new,
                     DecodeMode mode = DecodeMode::Greedy, int top_k = 8, uint64_t seed = 0,
                     const AdapterHooksT<S>* hooks = nullptr) {
    if (max_new < 0) throw ContractError("generate: max_new must be >= 0");
    std::vector<int> tokens = text_to_tokens(prompt);
    if (max_new == 0 || tokens.empty()) return std::string(prompt);
    DetRng rng(seed);
    int vocab = model.config().vocab_size;
    for (int step = 0; step < max_new; ++step) {
        int ctx_len = std::min<int>(static_cast<int>(tokens.size()), model.config().max_seq_len);
        std::span<const int> ctx(tokens.data() + tokens.size() - ctx_len,
                                 static_cast<size_t>(ctx_len));
        GraphT<S> g;
        TensorT<S> logits = model.forward(g, ctx, hooks);
        const S* row = logits.data() + static_cast<size_t>(ctx_len - 1) * vocab;
        int next = 0;
        if (mode == DecodeMode::Greedy) {
            for (int j = 1; j < vocab; ++j)
                if (row[j] > row[next]) next = j;
        } else {
            int k = std::min(std::max(top_k, 1), vocab);
            std::vector<int> idx(vocab);
            for (int j = 0; j < vocab; ++j) idx[j] = j;
            std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
                if (row[a] != row[b]) return row[a] > row[b];
                return a < b;
            });
            double mx = row[idx[0]];
            std::vector<double> w(k);
            double z = 0;
            for (int j = 0; j < k; ++j) {
                w[j] = std::exp(static_cast<double>(row[idx[j]]) - mx);
                z += w[j];
            }
            double u = rng.next_unit() * z;
            double acc = 0;
            next = idx[k - 1];
            for (int j = 0; j < k; ++j) {
                acc += w[j];
                if (u < acc) {
                    next = idx[j];
                    break;
                }
            }
        }
        tokens.push_back(next);
    }
    return tokens_to_text(tokens);
}

}  // namespace fllm
