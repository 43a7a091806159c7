#include "logicirc/model.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace logicirc {

using nlohmann::json;

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kMaskValue = -1e9;

}  // namespace

void ModelConfig::validate() const {
    auto req = [](bool ok, const std::string& what) {
        if (!ok) throw std::invalid_argument("invalid model config: " + what);
    };
    req(layers > 0 && heads > 0 && d_model > 0 && max_seq_len > 0 && vocab_size > 0 && kv_groups > 0,
        "all sizes must be positive");
    req(d_model % heads == 0, "heads must divide d_model");
    req(heads % kv_groups == 0, "kv_groups must divide heads");
}

json to_json(const ModelConfig& c) {
    return {{"layers", c.layers},         {"heads", c.heads},           {"d_model", c.d_model},
            {"max_seq_len", c.max_seq_len}, {"vocab_size", c.vocab_size}, {"kv_groups", c.kv_groups}};
}

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    c.layers = j.at("layers").get<int>();
    c.heads = j.at("heads").get<int>();
    c.d_model = j.at("d_model").get<int>();
    c.max_seq_len = j.at("max_seq_len").get<int>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.kv_groups = j.value("kv_groups", c.heads);
    c.validate();
    return c;
}

std::size_t param_count(const ModelConfig& c) {
    const std::size_t V = static_cast<std::size_t>(c.vocab_size);
    const std::size_t D = static_cast<std::size_t>(c.d_model);
    const std::size_t hd = static_cast<std::size_t>(c.heads * c.head_dim());
    const std::size_t gd = static_cast<std::size_t>(c.kv_groups * c.head_dim());
    const std::size_t per_layer = 2 * D + hd * D + 2 * gd * D + D * D + D;
    return V * D + static_cast<std::size_t>(c.max_seq_len) * D + static_cast<std::size_t>(c.layers) * per_layer +
           2 * D + V * D + V;
}

template <class T>
ModelParams<T> ModelParams<T>::zeros(const ModelConfig& c) {
    c.validate();
    const int D = c.d_model, dh = c.head_dim();
    ModelParams<T> p;
    p.config = c;
    p.tok_emb = MatT<T>::Zero(c.vocab_size, D);
    p.pos_emb = MatT<T>::Zero(c.max_seq_len, D);
    p.layers.resize(static_cast<std::size_t>(c.layers));
    for (auto& L : p.layers) {
        L.ln_gain = RowVecT<T>::Zero(D);
        L.ln_bias = RowVecT<T>::Zero(D);
        L.wq = MatT<T>::Zero(c.heads * dh, D);
        L.wk = MatT<T>::Zero(c.kv_groups * dh, D);
        L.wv = MatT<T>::Zero(c.kv_groups * dh, D);
        L.wo = MatT<T>::Zero(D, D);
        L.bo = RowVecT<T>::Zero(D);
    }
    p.lnf_gain = RowVecT<T>::Zero(D);
    p.lnf_bias = RowVecT<T>::Zero(D);
    p.w_class = MatT<T>::Zero(c.vocab_size, D);
    p.b_class = RowVecT<T>::Zero(c.vocab_size);
    return p;
}

template <class T>
std::size_t ModelParams<T>::num_params() const {
    std::size_t n = 0;
    visit([&](const std::string&, const T*, Eigen::Index r, Eigen::Index c) { n += static_cast<std::size_t>(r * c); });
    return n;
}

template <class T>
bool ModelParams<T>::all_finite() const {
    bool ok = true;
    visit([&](const std::string&, const T* d, Eigen::Index r, Eigen::Index c) {
        for (Eigen::Index i = 0; i < r * c; ++i) ok = ok && std::isfinite(d[i]);
    });
    return ok;
}

template <class T>
template <class U>
ModelParams<U> ModelParams<T>::cast() const {
    ModelParams<U> out;
    out.config = config;
    out.tok_emb = tok_emb.template cast<U>();
    out.pos_emb = pos_emb.template cast<U>();
    for (const auto& L : layers) {
        LayerParams<U> M;
        M.ln_gain = L.ln_gain.template cast<U>();
        M.ln_bias = L.ln_bias.template cast<U>();
        M.wq = L.wq.template cast<U>();
        M.wk = L.wk.template cast<U>();
        M.wv = L.wv.template cast<U>();
        M.wo = L.wo.template cast<U>();
        M.bo = L.bo.template cast<U>();
        out.layers.push_back(std::move(M));
    }
    out.lnf_gain = lnf_gain.template cast<U>();
    out.lnf_bias = lnf_bias.template cast<U>();
    out.w_class = w_class.template cast<U>();
    out.b_class = b_class.template cast<U>();
    return out;
}

Params init_model(const ModelConfig& config, CounterRng& rng) {
    Params p = Params::zeros(config);
    p.visit([&](const std::string& name, float* d, Eigen::Index r, Eigen::Index c) {
        const bool is_gain = name.ends_with("ln_gain") || name == "lnf_gain";
        const bool is_bias = r == 1;
        for (Eigen::Index i = 0; i < r * c; ++i) {
            if (is_gain)
                d[i] = 1.0F;
            else if (is_bias)
                d[i] = 0.0F;
            else
                d[i] = static_cast<float>(rng.normal(0.0, 0.02));
        }
    });
    return p;
}

std::string_view to_string(Site s) {
    switch (s) {
        case Site::Embedding: return "embedding";
        case Site::Query: return "query";
        case Site::Key: return "key";
        case Site::Value: return "value";
        case Site::HeadOutput: return "output";
        case Site::BlockOutput: return "block";
        case Site::Residual: return "residual";
    }
    return "?";
}

Site site_from_string(std::string_view s) {
    for (Site x : {Site::Embedding, Site::Query, Site::Key, Site::Value, Site::HeadOutput, Site::BlockOutput,
                   Site::Residual})
        if (to_string(x) == s) return x;
    throw std::invalid_argument("unknown site '" + std::string(s) + "'");
}

template <class T>
bool ActivationCache<T>::has(Site s) const {
    switch (s) {
        case Site::Embedding:
        case Site::Residual: return captured.residual;
        case Site::Query:
        case Site::Key:
        case Site::Value: return captured.qkv;
        case Site::HeadOutput: return captured.head_output;
        case Site::BlockOutput: return captured.block_output;
    }
    return false;
}

template <class T>
const MatT<T>& ActivationCache<T>::tensor(Site s, int layer) const {
    if (!has(s)) throw std::invalid_argument("site '" + std::string(to_string(s)) + "' not captured");
    auto pick = [&](const std::vector<MatT<T>>& v) -> const MatT<T>& {
        if (layer < 0 || layer >= static_cast<int>(v.size()))
            throw std::invalid_argument("layer " + std::to_string(layer) + " out of range for site '" +
                                        std::string(to_string(s)) + "'");
        return v[static_cast<std::size_t>(layer)];
    };
    switch (s) {
        case Site::Embedding:
            if (residual.empty()) throw std::invalid_argument("embedding not captured");
            return residual.front();
        case Site::Residual: return pick(residual);
        case Site::Query: return pick(query);
        case Site::Key: return pick(key);
        case Site::Value: return pick(value);
        case Site::HeadOutput: return pick(head_output);
        case Site::BlockOutput: return pick(block_output);
    }
    throw std::logic_error("unreachable");
}

namespace {

template <class T>
using ColVecT = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Everything one packed forward pass computes; the backward pass reads it.
template <class T>
struct Trace {
    std::vector<int> offset, length;
    int rows = 0;
    std::vector<MatT<T>> resid;                // L + 1
    std::vector<MatT<T>> xhat, normed;         // L + 1, index L is the final norm
    std::vector<ColVecT<T>> rstd;              // L + 1
    std::vector<MatT<T>> q, k, v, z, block;    // L
    std::vector<std::vector<MatT<T>>> probs;   // [layer][seq * heads + head]
    MatT<T> logits;
};

template <class T>
void layer_norm(const MatT<T>& x, const RowVecT<T>& gain, const RowVecT<T>& bias, MatT<T>& xhat, ColVecT<T>& rstd,
                MatT<T>& y) {
    const Eigen::Index n = x.rows(), d = x.cols();
    xhat.resize(n, d);
    rstd.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const T mean = x.row(i).mean();
        const auto centered = (x.row(i).array() - mean).eval();
        const T var = centered.square().mean();
        const T r = T(1) / std::sqrt(var + T(kLayerNormEps));
        rstd(i) = r;
        xhat.row(i) = centered * r;
    }
    y = (xhat.array().rowwise() * gain.array()).rowwise() + bias.array();
}

template <class T>
MatT<T> layer_norm_backward(const MatT<T>& dy, const MatT<T>& xhat, const ColVecT<T>& rstd, const RowVecT<T>& gain,
                            RowVecT<T>& dgain, RowVecT<T>& dbias) {
    dgain += (dy.array() * xhat.array()).colwise().sum().matrix();
    dbias += dy.colwise().sum();
    const MatT<T> dxhat = dy.array().rowwise() * gain.array();
    MatT<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
        const T m1 = dxhat.row(i).mean();
        const T m2 = (dxhat.row(i).array() * xhat.row(i).array()).mean();
        dx.row(i) = rstd(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
    }
    return dx;
}

struct SiteKey {
    Site site;
    int layer;
};

// Embedding is an alias of Residual layer 0.
SiteKey canonical(Site s, int layer) {
    if (s == Site::Embedding) return {Site::Residual, 0};
    return {s, layer};
}

template <class T>
void check_intervention(const ModelConfig& c, const Intervention<T>& iv) {
    const auto key = canonical(iv.site, iv.layer);
    const int max_layer = key.site == Site::Residual ? c.layers : c.layers - 1;
    if (key.layer < 0 || key.layer > max_layer)
        throw std::invalid_argument("intervention layer " + std::to_string(iv.layer) + " out of range");
    int units = 0;
    if (key.site == Site::Query || key.site == Site::HeadOutput) units = c.heads;
    if (key.site == Site::Key || key.site == Site::Value) units = c.kv_groups;
    if (iv.unit < -1 || (units == 0 && iv.unit != -1) || (units > 0 && iv.unit >= units))
        throw std::invalid_argument("intervention unit " + std::to_string(iv.unit) + " invalid for site '" +
                                    std::string(to_string(iv.site)) + "'");
    if (iv.mode == Intervention<T>::Mode::Replace && !iv.donor)
        throw std::invalid_argument("replacement intervention without donor cache");
}

template <class T>
void apply_interventions(MatT<T>& m, Site site, int layer, int offset, int seq_len, int unit_width,
                         std::span<const Intervention<T>> ivs) {
    // Additive deltas are summed first so that +v and -v cancel exactly.
    MatT<T> added;
    std::vector<char> touched;
    for (const auto& iv : ivs) {
        const auto key = canonical(iv.site, iv.layer);
        if (key.site != site || key.layer != layer) continue;
        const int col0 = iv.unit < 0 ? 0 : iv.unit * unit_width;
        const int width = iv.unit < 0 ? static_cast<int>(m.cols()) : unit_width;
        const MatT<T>* src = nullptr;
        if (iv.mode == Intervention<T>::Mode::Replace) {
            src = &iv.donor->tensor(site, layer);
            if (src->cols() != m.cols())
                throw std::invalid_argument("donor tensor width does not match the model");
        } else if (iv.delta.size() != width) {
            throw std::invalid_argument("additive intervention has width " + std::to_string(iv.delta.size()) +
                                        ", site needs " + std::to_string(width));
        }
        for (int pos : iv.positions) {
            if (pos < 0 || pos >= seq_len)
                throw std::invalid_argument("intervention position " + std::to_string(pos) + " outside sequence");
            auto dst = m.block(offset + pos, col0, 1, width);
            if (src) {
                if (pos >= src->rows())
                    throw std::invalid_argument("donor cache does not cover position " + std::to_string(pos));
                dst = src->block(pos, col0, 1, width);
            } else {
                if (added.size() == 0) {
                    added = MatT<T>::Zero(seq_len, m.cols());
                    touched.assign(static_cast<std::size_t>(seq_len), 0);
                }
                added.block(pos, col0, 1, width) += iv.delta;
                touched[static_cast<std::size_t>(pos)] = 1;
            }
        }
    }
    for (int pos = 0; pos < static_cast<int>(touched.size()); ++pos)
        if (touched[static_cast<std::size_t>(pos)]) m.row(offset + pos) += added.row(pos);
}

template <class T>
void run_forward(const ModelParams<T>& P, std::span<const std::span<const TokenId>> seqs,
                 std::span<const std::span<const Intervention<T>>> ivs, Trace<T>& tr) {
    const ModelConfig& c = P.config;
    const int D = c.d_model, H = c.heads, dh = c.head_dim(), L = c.layers;
    const T scale = T(1) / std::sqrt(T(dh));

    tr.offset.clear();
    tr.length.clear();
    int rows = 0;
    for (const auto& s : seqs) {
        if (s.empty()) throw std::invalid_argument("empty sequence");
        if (static_cast<int>(s.size()) > c.max_seq_len)
            throw std::invalid_argument("sequence of length " + std::to_string(s.size()) + " exceeds max_seq_len " +
                                        std::to_string(c.max_seq_len));
        tr.offset.push_back(rows);
        tr.length.push_back(static_cast<int>(s.size()));
        rows += static_cast<int>(s.size());
    }
    tr.rows = rows;
    const std::size_t nseq = seqs.size();
    auto ivs_of = [&](std::size_t s) { return s < ivs.size() ? ivs[s] : std::span<const Intervention<T>>{}; };
    for (std::size_t s = 0; s < ivs.size(); ++s)
        for (const auto& iv : ivs[s]) check_intervention(c, iv);

    auto apply = [&](MatT<T>& m, Site site, int layer, int width) {
        for (std::size_t s = 0; s < nseq; ++s)
            if (!ivs_of(s).empty()) apply_interventions(m, site, layer, tr.offset[s], tr.length[s], width, ivs_of(s));
    };

    tr.resid.assign(static_cast<std::size_t>(L + 1), {});
    tr.xhat.assign(static_cast<std::size_t>(L + 1), {});
    tr.normed.assign(static_cast<std::size_t>(L + 1), {});
    tr.rstd.assign(static_cast<std::size_t>(L + 1), {});
    tr.q.assign(static_cast<std::size_t>(L), {});
    tr.k.assign(static_cast<std::size_t>(L), {});
    tr.v.assign(static_cast<std::size_t>(L), {});
    tr.z.assign(static_cast<std::size_t>(L), {});
    tr.block.assign(static_cast<std::size_t>(L), {});
    tr.probs.assign(static_cast<std::size_t>(L), std::vector<MatT<T>>(nseq * static_cast<std::size_t>(H)));

    MatT<T>& x0 = tr.resid[0];
    x0.resize(rows, D);
    for (std::size_t s = 0; s < nseq; ++s) {
        for (int t = 0; t < tr.length[s]; ++t) {
            const TokenId id = seqs[s][static_cast<std::size_t>(t)];
            if (id < 0 || id >= c.vocab_size) throw std::invalid_argument("token id " + std::to_string(id) + " out of range");
            x0.row(tr.offset[s] + t) = P.tok_emb.row(id) + P.pos_emb.row(t);
        }
    }
    apply(x0, Site::Residual, 0, D);

    for (int l = 0; l < L; ++l) {
        const auto li = static_cast<std::size_t>(l);
        const LayerParams<T>& W = P.layers[li];
        layer_norm(tr.resid[li], W.ln_gain, W.ln_bias, tr.xhat[li], tr.rstd[li], tr.normed[li]);
        const MatT<T>& xn = tr.normed[li];
        tr.q[li].noalias() = xn * W.wq.transpose();
        tr.k[li].noalias() = xn * W.wk.transpose();
        tr.v[li].noalias() = xn * W.wv.transpose();
        apply(tr.q[li], Site::Query, l, dh);
        apply(tr.k[li], Site::Key, l, dh);
        apply(tr.v[li], Site::Value, l, dh);

        MatT<T>& z = tr.z[li];
        z.resize(rows, H * dh);
        for (std::size_t s = 0; s < nseq; ++s) {
            const int off = tr.offset[s], n = tr.length[s];
            for (int h = 0; h < H; ++h) {
                const int g = c.group_of(h);
                MatT<T>& p = tr.probs[li][s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
                p.noalias() = tr.q[li].block(off, h * dh, n, dh) * tr.k[li].block(off, g * dh, n, dh).transpose();
                p *= scale;
                for (int i = 0; i < n; ++i) {
                    for (int k = i + 1; k < n; ++k) p(i, k) += T(kMaskValue);
                    const T mx = p.row(i).maxCoeff();
                    p.row(i) = (p.row(i).array() - mx).exp();
                    p.row(i) /= p.row(i).sum();
                }
                z.block(off, h * dh, n, dh).noalias() = p * tr.v[li].block(off, g * dh, n, dh);
            }
        }
        apply(z, Site::HeadOutput, l, dh);

        tr.block[li].noalias() = z * W.wo.transpose();
        tr.block[li].rowwise() += W.bo;
        apply(tr.block[li], Site::BlockOutput, l, D);
        tr.resid[li + 1] = tr.resid[li] + tr.block[li];
        apply(tr.resid[li + 1], Site::Residual, l + 1, D);
    }

    const auto Lf = static_cast<std::size_t>(L);
    layer_norm(tr.resid[Lf], P.lnf_gain, P.lnf_bias, tr.xhat[Lf], tr.rstd[Lf], tr.normed[Lf]);
    tr.logits.noalias() = tr.normed[Lf] * P.w_class.transpose();
    tr.logits.rowwise() += P.b_class;
}

template <class T>
ActivationCache<T> extract_cache(const Trace<T>& tr, std::size_t s, int heads, const CaptureSpec& cap) {
    ActivationCache<T> c;
    const int off = tr.offset[s], n = tr.length[s];
    c.seq_len = n;
    c.captured = cap;
    auto rows = [&](const MatT<T>& m) -> MatT<T> { return m.middleRows(off, n); };
    const std::size_t L = tr.q.size();
    if (cap.residual)
        for (const auto& r : tr.resid) c.residual.push_back(rows(r));
    if (cap.qkv) {
        for (std::size_t l = 0; l < L; ++l) {
            c.query.push_back(rows(tr.q[l]));
            c.key.push_back(rows(tr.k[l]));
            c.value.push_back(rows(tr.v[l]));
        }
    }
    if (cap.attention) {
        c.attention.resize(L);
        for (std::size_t l = 0; l < L; ++l)
            for (int h = 0; h < heads; ++h)
                c.attention[l].push_back(tr.probs[l][s * static_cast<std::size_t>(heads) + static_cast<std::size_t>(h)]);
    }
    if (cap.head_output)
        for (const auto& z : tr.z) c.head_output.push_back(rows(z));
    if (cap.block_output)
        for (const auto& b : tr.block) c.block_output.push_back(rows(b));
    if (cap.final_norm) c.final_norm = rows(tr.normed.back());
    return c;
}

template <class T>
std::vector<std::span<const TokenId>> as_spans(std::span<const std::vector<TokenId>> seqs) {
    std::vector<std::span<const TokenId>> out;
    out.reserve(seqs.size());
    for (const auto& s : seqs) out.emplace_back(s);
    return out;
}

// Fills dlogits with d(mean CE)/d(logits) and returns the summed loss.
template <class T>
double cross_entropy(const Trace<T>& tr, std::span<const std::vector<TokenId>> seqs, const LossRegion& region,
                     MatT<T>* dlogits, std::size_t& predicted) {
    if (!region.start.empty() && region.start.size() != seqs.size())
        throw std::invalid_argument("loss region needs one start per sequence");
    predicted = 0;
    for (std::size_t s = 0; s < seqs.size(); ++s) {
        const int start = region.start.empty() ? 0 : region.start[s];
        predicted += static_cast<std::size_t>(std::max(0, tr.length[s] - 1 - start));
    }
    if (predicted == 0) throw std::invalid_argument("loss region selects no positions");
    if (dlogits) *dlogits = MatT<T>::Zero(tr.logits.rows(), tr.logits.cols());
    double total = 0.0;
    const T inv = T(1) / static_cast<T>(predicted);
    for (std::size_t s = 0; s < seqs.size(); ++s) {
        const int start = region.start.empty() ? 0 : region.start[s];
        for (int t = std::max(start, 0); t + 1 < tr.length[s]; ++t) {
            const int row = tr.offset[s] + t;
            const TokenId target = seqs[s][static_cast<std::size_t>(t + 1)];
            const auto lrow = tr.logits.row(row);
            const T mx = lrow.maxCoeff();
            const auto e = (lrow.array() - mx).exp().eval();
            const T sum = e.sum();
            total += static_cast<double>(std::log(sum) + mx - lrow(target));
            if (dlogits) {
                dlogits->row(row) = (e / sum).matrix() * inv;
                (*dlogits)(row, target) -= inv;
            }
        }
    }
    return total / static_cast<double>(predicted);
}

template <class T>
void run_backward(const ModelParams<T>& P, const Trace<T>& tr, std::span<const std::vector<TokenId>> seqs,
                  const MatT<T>& dlogits, ModelParams<T>& g) {
    const ModelConfig& c = P.config;
    const int H = c.heads, dh = c.head_dim(), L = c.layers;
    const T scale = T(1) / std::sqrt(T(dh));
    const auto Lf = static_cast<std::size_t>(L);

    g.w_class.noalias() += dlogits.transpose() * tr.normed[Lf];
    g.b_class += dlogits.colwise().sum();
    MatT<T> dn = dlogits * P.w_class;
    MatT<T> dx = layer_norm_backward(dn, tr.xhat[Lf], tr.rstd[Lf], P.lnf_gain, g.lnf_gain, g.lnf_bias);

    for (int l = L - 1; l >= 0; --l) {
        const auto li = static_cast<std::size_t>(l);
        const LayerParams<T>& W = P.layers[li];
        LayerParams<T>& G = g.layers[li];
        // The residual path passes dx through; the block output receives dx too.
        G.wo.noalias() += dx.transpose() * tr.z[li];
        G.bo += dx.colwise().sum();
        const MatT<T> dz = dx * W.wo;

        MatT<T> dq = MatT<T>::Zero(tr.rows, tr.q[li].cols());
        MatT<T> dk = MatT<T>::Zero(tr.rows, tr.k[li].cols());
        MatT<T> dv = MatT<T>::Zero(tr.rows, tr.v[li].cols());
        for (std::size_t s = 0; s < seqs.size(); ++s) {
            const int off = tr.offset[s], n = tr.length[s];
            for (int h = 0; h < H; ++h) {
                const int gi = c.group_of(h);
                const MatT<T>& p = tr.probs[li][s * static_cast<std::size_t>(H) + static_cast<std::size_t>(h)];
                const auto da = dz.block(off, h * dh, n, dh);
                const auto vg = tr.v[li].block(off, gi * dh, n, dh);
                const MatT<T> dp = da * vg.transpose();
                dv.block(off, gi * dh, n, dh).noalias() += p.transpose() * da;
                const ColVecT<T> rowdot = (dp.array() * p.array()).rowwise().sum();
                MatT<T> ds = p.array() * (dp.colwise() - rowdot).array();
                ds *= scale;
                dq.block(off, h * dh, n, dh).noalias() += ds * tr.k[li].block(off, gi * dh, n, dh);
                dk.block(off, gi * dh, n, dh).noalias() += ds.transpose() * tr.q[li].block(off, h * dh, n, dh);
            }
        }
        const MatT<T>& xn = tr.normed[li];
        G.wq.noalias() += dq.transpose() * xn;
        G.wk.noalias() += dk.transpose() * xn;
        G.wv.noalias() += dv.transpose() * xn;
        dn.noalias() = dq * W.wq;
        dn.noalias() += dk * W.wk;
        dn.noalias() += dv * W.wv;
        dx += layer_norm_backward(dn, tr.xhat[li], tr.rstd[li], W.ln_gain, G.ln_gain, G.ln_bias);
    }

    for (std::size_t s = 0; s < seqs.size(); ++s) {
        for (int t = 0; t < tr.length[s]; ++t) {
            const auto row = dx.row(tr.offset[s] + t);
            g.tok_emb.row(seqs[s][static_cast<std::size_t>(t)]) += row;
            g.pos_emb.row(t) += row;
        }
    }
}

}  // namespace

template <class T>
ForwardResult<T> forward(const ModelParams<T>& params, std::span<const TokenId> tokens, const CaptureSpec& capture,
                         std::span<const Intervention<T>> interventions) {
    Trace<T> tr;
    const std::span<const TokenId> seqs[1] = {tokens};
    const std::span<const Intervention<T>> ivs[1] = {interventions};
    run_forward<T>(params, seqs, ivs, tr);
    ForwardResult<T> out;
    out.logits = std::move(tr.logits);
    out.cache = extract_cache(tr, 0, params.config.heads, capture);
    return out;
}

template <class T>
std::vector<MatT<T>> forward_batch(const ModelParams<T>& params, std::span<const std::vector<TokenId>> seqs) {
    Trace<T> tr;
    const auto spans = as_spans<T>(seqs);
    run_forward<T>(params, spans, {}, tr);
    std::vector<MatT<T>> out;
    out.reserve(seqs.size());
    for (std::size_t s = 0; s < seqs.size(); ++s) out.push_back(tr.logits.middleRows(tr.offset[s], tr.length[s]));
    return out;
}

template <class T>
LossAndGrads<T> loss_and_grads(const ModelParams<T>& params, std::span<const std::vector<TokenId>> seqs,
                               const LossRegion& region) {
    Trace<T> tr;
    const auto spans = as_spans<T>(seqs);
    run_forward<T>(params, spans, {}, tr);
    LossAndGrads<T> out;
    MatT<T> dlogits;
    out.loss = cross_entropy(tr, seqs, region, &dlogits, out.predicted);
    if (!std::isfinite(out.loss)) throw std::runtime_error("non-finite loss " + std::to_string(out.loss));
    out.grads = ModelParams<T>::zeros(params.config);
    run_backward(params, tr, seqs, dlogits, out.grads);
    return out;
}

template <class T>
double loss_only(const ModelParams<T>& params, std::span<const std::vector<TokenId>> seqs, const LossRegion& region) {
    Trace<T> tr;
    const auto spans = as_spans<T>(seqs);
    run_forward<T>(params, spans, {}, tr);
    std::size_t predicted = 0;
    return cross_entropy<T>(tr, seqs, region, nullptr, predicted);
}

namespace {

constexpr const char* kCheckpointFormat = "logicirc-checkpoint";

std::string param_file_name(const std::string& name) { return name + ".f32"; }

}  // namespace

void save_checkpoint(const std::filesystem::path& dir, const Params& params, const json& extra) {
    static_assert(std::endian::native == std::endian::little, "checkpoint writer assumes a little-endian host");
    std::filesystem::create_directories(dir);
    json manifest = {{"format", kCheckpointFormat}, {"version", 1}, {"config", to_json(params.config)}};
    json list = json::array();
    params.visit([&](const std::string& name, const float* d, Eigen::Index r, Eigen::Index c) {
        const auto file = param_file_name(name);
        std::ofstream out(dir / file, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + (dir / file).string());
        out.write(reinterpret_cast<const char*>(d), static_cast<std::streamsize>(r * c * sizeof(float)));
        list.push_back({{"name", name}, {"rows", r}, {"cols", c}, {"file", file}});
    });
    manifest["params"] = list;
    manifest["param_hash"] = params_hash(params);
    manifest["extra"] = extra;
    const auto tmp = dir / "manifest.json.tmp";
    {
        std::ofstream out(tmp, std::ios::trunc);
        out << manifest.dump(2) << '\n';
        if (!out) throw std::runtime_error("cannot write manifest in " + dir.string());
    }
    std::filesystem::rename(tmp, dir / "manifest.json");
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("no checkpoint manifest in " + dir.string());
    Checkpoint ck;
    ck.manifest = json::parse(in);
    if (ck.manifest.at("format").get<std::string>() != kCheckpointFormat)
        throw std::runtime_error(dir.string() + " is not a logicirc checkpoint");
    ck.params = Params::zeros(model_config_from_json(ck.manifest.at("config")));
    std::map<std::string, json> entries;
    for (const auto& e : ck.manifest.at("params")) entries[e.at("name").get<std::string>()] = e;
    ck.params.visit([&](const std::string& name, float* d, Eigen::Index r, Eigen::Index c) {
        auto it = entries.find(name);
        if (it == entries.end()) throw std::runtime_error("checkpoint lacks parameter " + name);
        if (it->second.at("rows").get<Eigen::Index>() != r || it->second.at("cols").get<Eigen::Index>() != c)
            throw std::runtime_error("shape mismatch for parameter " + name);
        std::ifstream f(dir / it->second.at("file").get<std::string>(), std::ios::binary);
        const auto bytes = static_cast<std::streamsize>(r * c * sizeof(float));
        f.read(reinterpret_cast<char*>(d), bytes);
        if (f.gcount() != bytes) throw std::runtime_error("truncated parameter file for " + name);
    });
    if (ck.manifest.contains("param_hash") && ck.manifest["param_hash"].get<std::uint64_t>() != params_hash(ck.params))
        throw std::runtime_error("checkpoint hash mismatch in " + dir.string());
    return ck;
}

std::uint64_t params_hash(const Params& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto feed = [&](const unsigned char* p, std::size_t n) {
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 0x100000001b3ULL;
        }
    };
    params.visit([&](const std::string& name, const float* d, Eigen::Index r, Eigen::Index c) {
        feed(reinterpret_cast<const unsigned char*>(name.data()), name.size());
        feed(reinterpret_cast<const unsigned char*>(d), static_cast<std::size_t>(r * c) * sizeof(float));
    });
    return h;
}

#define LOGICIRC_INSTANTIATE(T)                                                                                     \
    template struct ModelParams<T>;                                                                                 \
    template struct ActivationCache<T>;                                                                             \
    template ForwardResult<T> forward<T>(const ModelParams<T>&, std::span<const TokenId>, const CaptureSpec&,       \
                                         std::span<const Intervention<T>>);                                         \
    template std::vector<MatT<T>> forward_batch<T>(const ModelParams<T>&, std::span<const std::vector<TokenId>>);  \
    template LossAndGrads<T> loss_and_grads<T>(const ModelParams<T>&, std::span<const std::vector<TokenId>>,        \
                                               const LossRegion&);                                                  \
    template double loss_only<T>(const ModelParams<T>&, std::span<const std::vector<TokenId>>, const LossRegion&);

LOGICIRC_INSTANTIATE(float)
LOGICIRC_INSTANTIATE(double)

template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template ModelParams<float> ModelParams<float>::cast<float>() const;

}  // namespace logicirc
