#include "backchain/model/forward.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "backchain/errors.hpp"
#include "kernels.hpp"

namespace backchain::model {

std::string to_string(Site site) {
    switch (site) {
        case Site::ResidPre: return "resid-pre";
        case Site::ResidPost: return "resid-post";
        case Site::AttnOut: return "attn-out";
        case Site::AttnScores: return "attn-scores";
        case Site::MlpOut: return "mlp-out";
    }
    return "?";
}

InterventionAction InterventionSpec::replace_at(int layer, Site site, std::vector<int> positions,
                                                Mat<float> payload) {
    InterventionAction a;
    a.layer = layer;
    a.site = site;
    a.kind = InterventionAction::Kind::Replace;
    a.positions = std::move(positions);
    a.payload = std::move(payload);
    return a;
}

InterventionAction InterventionSpec::add_at(int layer, Site site, std::vector<int> positions,
                                            Mat<float> payload) {
    InterventionAction a = replace_at(layer, site, std::move(positions), std::move(payload));
    a.kind = InterventionAction::Kind::Add;
    return a;
}

InterventionAction InterventionSpec::block_score(int layer, int query, std::vector<int> keys) {
    InterventionAction a;
    a.layer = layer;
    a.site = Site::AttnScores;
    a.kind = InterventionAction::Kind::BlockScore;
    a.query_position = query;
    a.key_positions = std::move(keys);
    return a;
}

void InterventionSpec::validate(const ModelConfig& config) const {
    for (const auto& a : actions) {
        if (a.layer < 1 || a.layer > config.layers)
            throw InvalidArgument("intervention layer out of range");
        if (a.kind == InterventionAction::Kind::BlockScore) {
            if (a.site != Site::AttnScores)
                throw InvalidArgument("block-score only applies to the attn-scores site");
            if (a.query_position < 0 || a.query_position >= config.context)
                throw InvalidArgument("block-score query position out of range");
            for (int k : a.key_positions) {
                if (k < 0 || k >= config.context)
                    throw InvalidArgument("block-score key position out of range");
                if (k > a.query_position)
                    throw InvalidArgument("block-score pair violates causality (key > query)");
            }
            continue;
        }
        const int want_cols = a.site == Site::AttnScores ? config.context : config.d_model;
        if (a.payload.cols != want_cols ||
            a.payload.rows != static_cast<int>(a.positions.size()))
            throw InvalidArgument("intervention payload shape mismatch at " + to_string(a.site));
        for (int p : a.positions) {
            if (p < 0 || p >= config.context)
                throw InvalidArgument("intervention position out of range");
        }
    }
}

namespace {

constexpr float kNegInf = -std::numeric_limits<float>::infinity();

void apply_stream_actions(const InterventionSpec& spec, int layer, Site site, Mat<float>& x,
                          int length) {
    for (const auto& a : spec.actions) {
        if (a.layer != layer || a.site != site) continue;
        if (a.kind == InterventionAction::Kind::BlockScore) continue;
        for (size_t i = 0; i < a.positions.size(); ++i) {
            const int p = a.positions[i];
            if (p >= length) throw InvalidArgument("intervention position beyond sequence length");
            const float* src = a.payload.row(static_cast<int>(i));
            float* dst = x.row(p);
            if (a.kind == InterventionAction::Kind::Replace) {
                std::copy(src, src + x.cols, dst);
            } else {
                for (int j = 0; j < x.cols; ++j) dst[j] += src[j];
            }
        }
    }
}

void apply_score_actions(const InterventionSpec& spec, int layer, Mat<float>& scores, int length) {
    for (const auto& a : spec.actions) {
        if (a.layer != layer || a.site != Site::AttnScores) continue;
        if (a.kind == InterventionAction::Kind::BlockScore) {
            if (a.query_position >= length)
                throw InvalidArgument("block-score query beyond sequence length");
            for (int k : a.key_positions) {
                if (k >= length) throw InvalidArgument("block-score key beyond sequence length");
                scores.at(a.query_position, k) = kNegInf;
            }
            continue;
        }
        for (size_t i = 0; i < a.positions.size(); ++i) {
            const int q = a.positions[i];
            if (q >= length) throw InvalidArgument("intervention position beyond sequence length");
            const float* src = a.payload.row(static_cast<int>(i));
            float* dst = scores.row(q);
            for (int k = 0; k <= q; ++k) {
                if (a.kind == InterventionAction::Kind::Replace) dst[k] = src[k];
                else dst[k] += src[k];
            }
            // The causal region above the diagonal stays -inf regardless.
        }
    }
}

}  // namespace

ActivationCache forward(const Parameters& params, const std::vector<int>& tokens,
                        const InterventionSpec& interventions) {
    const ModelConfig& config = params.config;
    const int T = static_cast<int>(tokens.size());
    if (T < 1 || T > config.context) throw InvalidArgument("sequence length out of range");
    for (int tok : tokens) {
        if (tok < 0 || tok >= config.vocab) throw InvalidArgument("token id out of range");
    }
    interventions.validate(config);

    const int d = config.d_model;
    const float scale = 1.0f / std::sqrt(static_cast<float>(config.head_dim()));
    const bool preln = config.norm == Norm::PreLn;
    const int L = config.layers;

    ActivationCache cache;
    cache.length = T;
    cache.resid.assign(static_cast<size_t>(L) + 1, Mat<float>());
    cache.attn_out.assign(static_cast<size_t>(L), Mat<float>());
    cache.mlp_out.assign(static_cast<size_t>(L), Mat<float>());
    cache.attn_pattern.assign(static_cast<size_t>(L), Mat<float>());
    cache.attn_scores.assign(static_cast<size_t>(L), Mat<float>());

    Mat<float> x(T, d);
    for (int p = 0; p < T; ++p) {
        const float* e = params.w_embed.row(tokens[static_cast<size_t>(p)]);
        const float* w = params.w_pos.row(p);
        float* dst = x.row(p);
        for (int j = 0; j < d; ++j) dst[j] = e[j] + w[j];
    }
    cache.resid[0] = x;

    for (int ll = 0; ll < L; ++ll) {
        const int layer = ll + 1;
        const auto& lp = params.layers[static_cast<size_t>(ll)];
        Mat<float>& stream_in = cache.resid[static_cast<size_t>(ll)];
        apply_stream_actions(interventions, layer, Site::ResidPre, stream_in, T);

        Mat<float> attn_input = stream_in;
        if (preln) {
            for (int p = 0; p < T; ++p)
                layer_norm_row<float>(stream_in.row(p), attn_input.row(p), lp.ln1_g.data(),
                                      lp.ln1_b.data(), d, nullptr, nullptr);
        }

        Mat<float> q(T, d), k(T, d), v(T, d);
        gemm_nn(q, attn_input, lp.w_q);
        gemm_nn(k, attn_input, lp.w_k);
        gemm_nn(v, attn_input, lp.w_v);
        for (int p = 0; p < T; ++p) {
            add_row_inplace(q.row(p), lp.b_q.data(), d);
            add_row_inplace(k.row(p), lp.b_k.data(), d);
            add_row_inplace(v.row(p), lp.b_v.data(), d);
        }

        Mat<float>& scores = cache.attn_scores[static_cast<size_t>(ll)];
        scores = Mat<float>(T, T);
        for (int p = 0; p < T; ++p) {
            float* row = scores.row(p);
            const float* qp = q.row(p);
            for (int j = 0; j <= p; ++j) row[j] = dot_row(qp, k.row(j), d) * scale;
            for (int j = p + 1; j < T; ++j) row[j] = kNegInf;
        }
        apply_score_actions(interventions, layer, scores, T);

        Mat<float>& pattern = cache.attn_pattern[static_cast<size_t>(ll)];
        pattern = Mat<float>(T, T);
        for (int p = 0; p < T; ++p) {
            const float* srow = scores.row(p);
            float* arow = pattern.row(p);
            float mx = kNegInf;
            for (int j = 0; j <= p; ++j) mx = std::max(mx, srow[j]);
            if (mx == kNegInf)
                throw NumericError("softmax row has empty support", layer, "attn-scores");
            double denom = 0;
            for (int j = 0; j <= p; ++j) {
                const float e = exp_of(srow[j] - mx);
                arow[j] = e;
                denom += e;
            }
            const float inv = static_cast<float>(1.0 / denom);
            for (int j = 0; j <= p; ++j) arow[j] *= inv;
        }

        Mat<float> z(T, d);
        gemm_nn(z, pattern, v);
        Mat<float>& attn = cache.attn_out[static_cast<size_t>(ll)];
        attn = Mat<float>(T, d);
        gemm_nn(attn, z, lp.w_o);
        for (int p = 0; p < T; ++p) add_row_inplace(attn.row(p), lp.b_o.data(), d);
        apply_stream_actions(interventions, layer, Site::AttnOut, attn, T);

        Mat<float> x_mid(T, d);
        for (size_t i = 0; i < x_mid.size(); ++i) x_mid.d[i] = stream_in.d[i] + attn.d[i];

        Mat<float> mlp_input = x_mid;
        if (preln) {
            for (int p = 0; p < T; ++p)
                layer_norm_row<float>(x_mid.row(p), mlp_input.row(p), lp.ln2_g.data(),
                                      lp.ln2_b.data(), d, nullptr, nullptr);
        }
        Mat<float> h(T, config.d_ff);
        gemm_nn(h, mlp_input, lp.w_in);
        for (int p = 0; p < T; ++p) add_row_inplace(h.row(p), lp.b_in.data(), config.d_ff);
        Mat<float> g(T, config.d_ff);
        for (size_t i = 0; i < h.size(); ++i) g.d[i] = gelu(h.d[i]);
        Mat<float>& mlp = cache.mlp_out[static_cast<size_t>(ll)];
        mlp = Mat<float>(T, d);
        gemm_nn(mlp, g, lp.w_out);
        for (int p = 0; p < T; ++p) add_row_inplace(mlp.row(p), lp.b_out.data(), d);
        apply_stream_actions(interventions, layer, Site::MlpOut, mlp, T);

        Mat<float> x_next(T, d);
        for (size_t i = 0; i < x_next.size(); ++i) x_next.d[i] = x_mid.d[i] + mlp.d[i];
        cache.resid[static_cast<size_t>(layer)] = std::move(x_next);
        apply_stream_actions(interventions, layer, Site::ResidPost,
                             cache.resid[static_cast<size_t>(layer)], T);
    }

    Mat<float> final_stream = cache.resid[static_cast<size_t>(L)];
    if (preln) {
        for (int p = 0; p < T; ++p)
            layer_norm_row<float>(cache.resid[static_cast<size_t>(L)].row(p), final_stream.row(p),
                                  params.lnf_g.data(), params.lnf_b.data(), d, nullptr, nullptr);
    }
    cache.logits = Mat<float>(T, config.vocab);
    gemm_nn(cache.logits, final_stream, params.w_unembed);
    return cache;
}

double sequence_loss(const Mat<float>& logits, const std::vector<int>& tokens,
                     const std::vector<uint8_t>& loss_mask) {
    const int T = logits.rows;
    if (static_cast<int>(tokens.size()) != T || static_cast<int>(loss_mask.size()) != T)
        throw InvalidArgument("sequence_loss shape mismatch");
    double total = 0;
    int count = 0;
    for (int p = 0; p < T; ++p) {
        if (!loss_mask[static_cast<size_t>(p)]) continue;
        if (p + 1 >= T) throw InvalidArgument("masked position has no next-token target");
        const int target = tokens[static_cast<size_t>(p) + 1];
        if (target < 0 || target >= logits.cols) throw InvalidArgument("target token out of range");
        const float* row = logits.row(p);
        float mx = row[0];
        for (int j = 1; j < logits.cols; ++j) mx = std::max(mx, row[j]);
        double denom = 0;
        for (int j = 0; j < logits.cols; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
        total += std::log(denom) - static_cast<double>(row[target] - mx);
        ++count;
    }
    if (count == 0) throw InvalidArgument("loss mask selects no positions");
    return total / count;
}

}  // namespace backchain::model
