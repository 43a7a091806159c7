#pragma once

// Attention-only decoder transformer.
//
//   X_0     = tok_emb[x] + pos_emb[t]
//   X_l+1   = X_l + Concat_h( softmax(causal(Q_h Xn^T K_g Xn / sqrt(d_h))) Xn V_g^T ) W_O^T + b_O
//             with Xn = LayerNorm_l(X_l) and g the key/value group of head h
//   logits  = LayerNorm_f(X_L) W_class^T + b_class
//
// Layers and heads are 0-based. Residual streams are indexed by how many
// blocks have been applied: residual[0] is the embedding, residual[l + 1] is
// the output of block l.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "logicirc/rng.hpp"
#include "logicirc/vocab.hpp"

namespace logicirc {

struct ModelConfig {
    int layers = 3;
    int heads = 3;
    int d_model = 264;
    int max_seq_len = 72;
    int vocab_size = 95;
    int kv_groups = 3;  // == heads: standard attention; fewer: grouped key/value sharing

    int head_dim() const { return d_model / heads; }
    int heads_per_group() const { return heads / kv_groups; }
    int group_of(int head) const { return head / heads_per_group(); }
    void validate() const;

    bool operator==(const ModelConfig&) const = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

template <class T>
using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVecT = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using Mat = MatT<float>;
using RowVec = RowVecT<float>;

template <class T>
struct LayerParams {
    RowVecT<T> ln_gain, ln_bias;
    MatT<T> wq;  // heads * d_h x d_model, head h owns rows [h*d_h, (h+1)*d_h)
    MatT<T> wk;  // kv_groups * d_h x d_model
    MatT<T> wv;  // kv_groups * d_h x d_model
    MatT<T> wo;  // d_model x d_model
    RowVecT<T> bo;
};

template <class T>
struct ModelParams {
    ModelConfig config;
    MatT<T> tok_emb;  // vocab x d_model
    MatT<T> pos_emb;  // max_seq_len x d_model
    std::vector<LayerParams<T>> layers;
    RowVecT<T> lnf_gain, lnf_bias;
    MatT<T> w_class;  // vocab x d_model
    RowVecT<T> b_class;

    static ModelParams zeros(const ModelConfig& config);

    // f(name, data, rows, cols) for every parameter in a fixed order.
    template <class F>
    void visit(F&& f) {
        visit_impl(*this, f);
    }
    template <class F>
    void visit(F&& f) const {
        visit_impl(*this, f);
    }

    std::size_t num_params() const;
    bool all_finite() const;

    template <class U>
    ModelParams<U> cast() const;

private:
    template <class Self, class F>
    static void visit_impl(Self& self, F& f) {
        auto m = [&](const std::string& name, auto& x) { f(name, x.data(), x.rows(), x.cols()); };
        m("tok_emb", self.tok_emb);
        m("pos_emb", self.pos_emb);
        for (std::size_t l = 0; l < self.layers.size(); ++l) {
            const std::string p = "layers." + std::to_string(l) + ".";
            auto& L = self.layers[l];
            m(p + "ln_gain", L.ln_gain);
            m(p + "ln_bias", L.ln_bias);
            m(p + "wq", L.wq);
            m(p + "wk", L.wk);
            m(p + "wv", L.wv);
            m(p + "wo", L.wo);
            m(p + "bo", L.bo);
        }
        m("lnf_gain", self.lnf_gain);
        m("lnf_bias", self.lnf_bias);
        m("w_class", self.w_class);
        m("b_class", self.b_class);
    }
};

using Params = ModelParams<float>;

// Closed-form parameter count.
std::size_t param_count(const ModelConfig& c);

// Weights ~ N(0, 0.02^2); biases 0; LayerNorm gains 1.
Params init_model(const ModelConfig& config, CounterRng& rng);

// Activation sites that can be captured and intervened on.
enum class Site : std::uint8_t {
    Embedding,    // X_0 (same tensor as Residual layer 0)
    Query,        // per head, d_h wide
    Key,          // per key/value group, d_h wide
    Value,        // per key/value group, d_h wide
    HeadOutput,   // per head attention output before W_O, d_h wide
    BlockOutput,  // attention-block output after W_O and bias, d_model wide
    Residual,     // residual stream X_layer, layer in [0, L]
};

std::string_view to_string(Site s);
Site site_from_string(std::string_view s);

struct CaptureSpec {
    bool residual = false;
    bool qkv = false;
    bool attention = false;
    bool head_output = false;
    bool block_output = false;
    bool final_norm = false;

    static CaptureSpec all() { return {true, true, true, true, true, true}; }
    static CaptureSpec none() { return {}; }
};

template <class T>
struct ActivationCache {
    int seq_len = 0;
    CaptureSpec captured;
    std::vector<MatT<T>> residual;                // L + 1 entries, seq x d_model
    std::vector<MatT<T>> query;                   // L entries, seq x heads*d_h
    std::vector<MatT<T>> key;                     // L entries, seq x groups*d_h
    std::vector<MatT<T>> value;                   // L entries, seq x groups*d_h
    std::vector<std::vector<MatT<T>>> attention;  // [layer][head], seq x seq
    std::vector<MatT<T>> head_output;             // L entries, seq x heads*d_h
    std::vector<MatT<T>> block_output;            // L entries, seq x d_model
    MatT<T> final_norm;                           // seq x d_model

    bool has(Site s) const;
    // Full tensor behind a site; throws std::invalid_argument if not captured.
    const MatT<T>& tensor(Site s, int layer) const;
};

using Cache = ActivationCache<float>;

// Replace a site's activations by a donor run's, or add a fixed vector.
// `unit` selects a head (Query, HeadOutput) or key/value group (Key, Value);
// -1 means every column of the site. Replacements are applied in order, then
// the sum of all additive deltas.
template <class T>
struct Intervention {
    enum class Mode : std::uint8_t { Replace, Add };

    Site site = Site::HeadOutput;
    int layer = 0;
    int unit = -1;
    std::vector<int> positions;
    Mode mode = Mode::Replace;
    const ActivationCache<T>* donor = nullptr;
    RowVecT<T> delta;
};

template <class T>
struct ForwardResult {
    MatT<T> logits;  // seq x vocab
    ActivationCache<T> cache;
};

template <class T>
ForwardResult<T> forward(const ModelParams<T>& params, std::span<const TokenId> tokens,
                         const CaptureSpec& capture = CaptureSpec::none(),
                         std::span<const Intervention<T>> interventions = {});

// Forward over several sequences packed into one set of matrix products.
// Returns logits per sequence.
template <class T>
std::vector<MatT<T>> forward_batch(const ModelParams<T>& params, std::span<const std::vector<TokenId>> seqs);

struct LossRegion {
    // Positions t >= start predict token t + 1. start = 0 is plain language
    // modelling over the whole sequence.
    std::vector<int> start;
};

template <class T>
struct LossAndGrads {
    double loss = 0.0;
    std::size_t predicted = 0;
    ModelParams<T> grads;
};

// Mean next-token cross-entropy and its exact gradient. `region` may be empty
// (every position) or hold one start per sequence.
template <class T>
LossAndGrads<T> loss_and_grads(const ModelParams<T>& params, std::span<const std::vector<TokenId>> seqs,
                               const LossRegion& region = {});

template <class T>
double loss_only(const ModelParams<T>& params, std::span<const std::vector<TokenId>> seqs,
                 const LossRegion& region = {});

// Checkpoint = directory with manifest.json plus one little-endian f32 file
// per named parameter.
void save_checkpoint(const std::filesystem::path& dir, const Params& params, const nlohmann::json& extra = {});
struct Checkpoint {
    Params params;
    nlohmann::json manifest;
};
Checkpoint load_checkpoint(const std::filesystem::path& dir);
// FNV-1a over the manifest's parameter list and every weight byte.
std::uint64_t params_hash(const Params& params);

}  // namespace logicirc
