#include "backchain/interp/circuits.hpp"

#include "backchain/errors.hpp"
#include "backchain/interp/scrub.hpp"
#include "../model/kernels.hpp"

namespace backchain::interp {

namespace {

void require_exact(const model::Parameters& params, bool approximate) {
    if (params.config.norm != model::Norm::None && !approximate)
        throw PreconditionError(
            "weight-product circuits are exact only without normalization; pass the "
            "approximation flag to compute them anyway");
}

// q_content W_Q (k_content W_K)^T composed as W_Q W_K^T.
Mat<float> qk_product(const model::LayerParamsT<float>& lp) {
    Mat<float> qk(lp.w_q.rows, lp.w_k.rows);
    gemm_nt(qk, lp.w_q, lp.w_k);
    return qk;
}

}  // namespace

Mat<float> qk_circuit_m0(const model::Parameters& params, bool approximate) {
    require_exact(params, approximate);
    const auto qk = qk_product(params.layers[0]);
    Mat<float> tmp(params.w_pos.rows, qk.cols);
    gemm_nn(tmp, params.w_pos, qk);
    Mat<float> m0(params.w_pos.rows, params.w_pos.rows);
    gemm_nt(m0, tmp, params.w_pos);
    return m0;
}

Mat<float> qk_circuit_m1(const model::Parameters& params, bool approximate) {
    require_exact(params, approximate);
    if (params.config.layers < 2) throw InvalidArgument("M1 needs at least two layers");
    const auto& l0 = params.layers[0];
    const int d = params.config.d_model;
    const int n_tokens = params.config.vocab - 3;  // node tokens only

    // Composed embeddings: rows are E W_OV^0 for node tokens.
    Mat<float> node_embed(n_tokens, d);
    for (int t = 0; t < n_tokens; ++t)
        std::copy(params.w_embed.row(t), params.w_embed.row(t) + d, node_embed.row(t));
    Mat<float> ov(n_tokens, d);
    {
        Mat<float> tmp(n_tokens, d);
        gemm_nn(tmp, node_embed, l0.w_v);
        gemm_nn(ov, tmp, l0.w_o);
    }
    // Plus the layer-1 MLP applied to each composed embedding.
    Mat<float> composed = ov;
    {
        Mat<float> h(n_tokens, params.config.d_ff);
        gemm_nn(h, ov, l0.w_in);
        for (int r = 0; r < h.rows; ++r) {
            float* row = h.row(r);
            for (int j = 0; j < h.cols; ++j)
                row[j] = model::gelu(row[j] + l0.b_in[static_cast<size_t>(j)]);
        }
        Mat<float> m(n_tokens, d);
        gemm_nn(m, h, l0.w_out);
        for (int r = 0; r < m.rows; ++r) {
            for (int j = 0; j < d; ++j)
                composed.at(r, j) += m.at(r, j) + l0.b_out[static_cast<size_t>(j)];
        }
    }

    const auto qk = qk_product(params.layers[1]);
    Mat<float> tmp(n_tokens, d);
    gemm_nn(tmp, composed, qk);
    Mat<float> m1(n_tokens, n_tokens);
    gemm_nt(m1, tmp, node_embed);
    return m1;
}

Mat<float> subgoal_matrix_rp(const model::Parameters& params, bool approximate) {
    require_exact(params, approximate);
    const auto qk = qk_product(params.layers[0]);
    Mat<float> tmp(params.w_pos.rows, qk.cols);
    gemm_nn(tmp, params.w_pos, qk);
    Mat<float> rp(params.w_pos.rows, params.w_embed.rows);
    gemm_nt(rp, tmp, params.w_embed);
    return rp;
}

DlaTable direct_logit_attribution(const model::Parameters& params,
                                  const model::ActivationCache& cache, std::vector<int> layers,
                                  int query_position) {
    const auto& config = params.config;
    for (int layer : layers) {
        if (layer < 1 || layer > config.layers) throw InvalidArgument("DLA layer out of range");
    }
    if (query_position < 0 || query_position >= cache.length)
        throw InvalidArgument("DLA query position out of range");

    DlaTable table;
    table.query_position = query_position;
    table.layers = layers;
    table.length = cache.length;
    table.contributions = Mat<float>(static_cast<int>(layers.size()) * cache.length, config.vocab);

    for (size_t li = 0; li < layers.size(); ++li) {
        const auto contrib = head_position_contributions(params, cache, layers[li], query_position);
        // Project each position's stream contribution onto the logits.
        Mat<float> block(cache.length, config.vocab);
        gemm_nn(block, contrib, params.w_unembed);
        for (int k = 0; k < cache.length; ++k) {
            std::copy(block.row(k), block.row(k) + config.vocab,
                      table.contributions.row(static_cast<int>(li) * cache.length + k));
        }
        // Head total: attention output row projected the same way.
        const auto& attn = cache.attn_out[static_cast<size_t>(layers[li]) - 1];
        std::vector<float> total(static_cast<size_t>(config.vocab), 0.0f);
        for (int j = 0; j < config.vocab; ++j) {
            float acc = 0;
            for (int c = 0; c < config.d_model; ++c)
                acc += attn.at(query_position, c) * params.w_unembed.at(c, j);
            total[static_cast<size_t>(j)] = acc;
        }
        table.head_totals.push_back(std::move(total));
    }
    return table;
}

}  // namespace backchain::interp
