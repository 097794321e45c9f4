#include "backchain/model/backward.hpp"

#include <cmath>
#include <limits>

#include "backchain/errors.hpp"
#include "backchain/threading.hpp"
#include "kernels.hpp"

namespace backchain::model {

namespace {

template <typename S>
bool all_finite(const Mat<S>& m) {
    for (S v : m.d) {
        if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
}

template <typename S>
void add_bias_rows(Mat<S>& m, const std::vector<S>& bias) {
    parallel_for(static_cast<size_t>(m.rows), [&](size_t lo, size_t hi) {
        for (size_t r = lo; r < hi; ++r) add_row_inplace(m.row(static_cast<int>(r)), bias.data(), m.cols);
    });
}

// dx for y = LN(x) given dy; also accumulates dgamma/dbeta (single-threaded
// rows: caller parallelizes disjoint row ranges and sums gains separately).
template <typename S>
void layer_norm_backward_row(const S* x, const S* dy, const S* g, S mean, S rstd, int d, S* dx,
                             S* dgamma, S* dbeta) {
    S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
    for (int i = 0; i < d; ++i) {
        const S xhat = (x[i] - mean) * rstd;
        const S dxhat = dy[i] * g[i];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        dgamma[i] += dy[i] * xhat;
        dbeta[i] += dy[i];
    }
    const S inv_d = S(1) / static_cast<S>(d);
    for (int i = 0; i < d; ++i) {
        const S xhat = (x[i] - mean) * rstd;
        const S dxhat = dy[i] * g[i];
        dx[i] = rstd * (dxhat - sum_dxhat * inv_d - xhat * sum_dxhat_xhat * inv_d);
    }
}

}  // namespace

template <typename S>
double batch_forward(const ParametersT<S>& params, const Batch& batch, TrainState<S>& ws) {
    const ModelConfig& config = params.config;
    const int B = batch.batch, T = batch.length, d = config.d_model, ff = config.d_ff;
    const int R = B * T;
    if (T > config.context) throw InvalidArgument("batch length exceeds context");
    const bool preln = config.norm == Norm::PreLn;
    const S scale = S(1) / std::sqrt(static_cast<S>(config.head_dim()));

    ws.layers.assign(static_cast<size_t>(config.layers), {});
    ws.x0 = Mat<S>(R, d);
    parallel_for(static_cast<size_t>(R), [&](size_t lo, size_t hi) {
        for (size_t r = lo; r < hi; ++r) {
            const int tok = batch.tokens[r];
            const int pos = static_cast<int>(r) % T;
            const S* e = params.w_embed.row(tok);
            const S* w = params.w_pos.row(pos);
            S* dst = ws.x0.row(static_cast<int>(r));
            for (int j = 0; j < d; ++j) dst[j] = e[j] + w[j];
        }
    });

    Mat<S> x = ws.x0;
    for (int ll = 0; ll < config.layers; ++ll) {
        auto& lw = ws.layers[static_cast<size_t>(ll)];
        const auto& lp = params.layers[static_cast<size_t>(ll)];
        lw.x_in = x;

        lw.attn_input = x;
        if (preln) {
            lw.ln1_mean.assign(static_cast<size_t>(R), S(0));
            lw.ln1_rstd.assign(static_cast<size_t>(R), S(0));
            parallel_for(static_cast<size_t>(R), [&](size_t lo, size_t hi) {
                for (size_t r = lo; r < hi; ++r)
                    layer_norm_row(lw.x_in.row(static_cast<int>(r)), lw.attn_input.row(static_cast<int>(r)),
                                   lp.ln1_g.data(), lp.ln1_b.data(), d, &lw.ln1_mean[r], &lw.ln1_rstd[r]);
            });
        }

        lw.q = Mat<S>(R, d);
        lw.k = Mat<S>(R, d);
        lw.v = Mat<S>(R, d);
        gemm_nn(lw.q, lw.attn_input, lp.w_q);
        gemm_nn(lw.k, lw.attn_input, lp.w_k);
        gemm_nn(lw.v, lw.attn_input, lp.w_v);
        add_bias_rows(lw.q, lp.b_q);
        add_bias_rows(lw.k, lp.b_k);
        add_bias_rows(lw.v, lp.b_v);

        lw.pattern.assign(static_cast<size_t>(B), Mat<S>());
        lw.z = Mat<S>(R, d);
        parallel_for(static_cast<size_t>(B), [&](size_t blo, size_t bhi) {
            for (size_t b = blo; b < bhi; ++b) {
                Mat<S>& pat = lw.pattern[b];
                pat = Mat<S>(T, T);
                const int base = static_cast<int>(b) * T;
                for (int p = 0; p < T; ++p) {
                    const S* qp = lw.q.row(base + p);
                    S* prow = pat.row(p);
                    S mx = -std::numeric_limits<S>::infinity();
                    for (int j = 0; j <= p; ++j) {
                        prow[j] = dot_row(qp, lw.k.row(base + j), d) * scale;
                        mx = std::max(mx, prow[j]);
                    }
                    S denom = S(0);
                    for (int j = 0; j <= p; ++j) {
                        prow[j] = exp_of(prow[j] - mx);
                        denom += prow[j];
                    }
                    const S inv = S(1) / denom;
                    S* zrow = lw.z.row(base + p);
                    for (int c = 0; c < d; ++c) zrow[c] = S(0);
                    for (int j = 0; j <= p; ++j) {
                        prow[j] *= inv;
                        axpy_row(zrow, lw.v.row(base + j), prow[j], d);
                    }
                }
            }
        });

        Mat<S> attn(R, d);
        gemm_nn(attn, lw.z, lp.w_o);
        add_bias_rows(attn, lp.b_o);

        lw.x_mid = Mat<S>(R, d);
        for (size_t i = 0; i < lw.x_mid.size(); ++i) lw.x_mid.d[i] = lw.x_in.d[i] + attn.d[i];

        lw.mlp_input = lw.x_mid;
        if (preln) {
            lw.ln2_mean.assign(static_cast<size_t>(R), S(0));
            lw.ln2_rstd.assign(static_cast<size_t>(R), S(0));
            parallel_for(static_cast<size_t>(R), [&](size_t lo, size_t hi) {
                for (size_t r = lo; r < hi; ++r)
                    layer_norm_row(lw.x_mid.row(static_cast<int>(r)), lw.mlp_input.row(static_cast<int>(r)),
                                   lp.ln2_g.data(), lp.ln2_b.data(), d, &lw.ln2_mean[r], &lw.ln2_rstd[r]);
            });
        }

        lw.h = Mat<S>(R, ff);
        gemm_nn(lw.h, lw.mlp_input, lp.w_in);
        add_bias_rows(lw.h, lp.b_in);
        lw.g = Mat<S>(R, ff);
        parallel_for(static_cast<size_t>(R), [&](size_t lo, size_t hi) {
            for (size_t r = lo; r < hi; ++r) {
                const S* hrow = lw.h.row(static_cast<int>(r));
                S* grow = lw.g.row(static_cast<int>(r));
                for (int j = 0; j < ff; ++j) grow[j] = gelu(hrow[j]);
            }
        });
        Mat<S> mlp(R, d);
        gemm_nn(mlp, lw.g, lp.w_out);
        add_bias_rows(mlp, lp.b_out);

        Mat<S> x_next(R, d);
        for (size_t i = 0; i < x_next.size(); ++i) x_next.d[i] = lw.x_mid.d[i] + mlp.d[i];
        if (!all_finite(x_next))
            throw NumericError("non-finite residual stream", ll + 1, "resid-post");
        x = std::move(x_next);
    }
    ws.x_final = x;

    const Mat<S>* readout = &ws.x_final;
    if (preln) {
        ws.lnf_mean.assign(static_cast<size_t>(R), S(0));
        ws.lnf_rstd.assign(static_cast<size_t>(R), S(0));
        ws.lnf_out = Mat<S>(R, d);
        parallel_for(static_cast<size_t>(R), [&](size_t lo, size_t hi) {
            for (size_t r = lo; r < hi; ++r)
                layer_norm_row(ws.x_final.row(static_cast<int>(r)), ws.lnf_out.row(static_cast<int>(r)),
                               params.lnf_g.data(), params.lnf_b.data(), d, &ws.lnf_mean[r],
                               &ws.lnf_rstd[r]);
        });
        readout = &ws.lnf_out;
    }

    ws.logits = Mat<S>(R, config.vocab);
    gemm_nn(ws.logits, *readout, params.w_unembed);

    // Loss and dlogits in one pass over masked rows.
    ws.mask_count = 0;
    for (int b = 0; b < B; ++b) {
        for (int p = 0; p < T - 1; ++p) {
            if (batch.masked(b, p)) ++ws.mask_count;
        }
        if (batch.masked(b, T - 1))
            throw InvalidArgument("masked position has no next-token target");
    }
    if (ws.mask_count == 0) throw InvalidArgument("batch loss mask selects no positions");

    ws.dlogits = Mat<S>(R, config.vocab);
    std::vector<double> row_loss(static_cast<size_t>(R), 0.0);
    const S inv_count = S(1) / static_cast<S>(ws.mask_count);
    parallel_for(static_cast<size_t>(R), [&](size_t lo, size_t hi) {
        for (size_t r = lo; r < hi; ++r) {
            const int b = static_cast<int>(r) / T, p = static_cast<int>(r) % T;
            S* drow = ws.dlogits.row(static_cast<int>(r));
            if (p + 1 >= T || !batch.masked(b, p)) continue;  // dlogits stays zero
            const int target = batch.token_at(b, p + 1);
            const S* row = ws.logits.row(static_cast<int>(r));
            S mx = row[0];
            for (int j = 1; j < config.vocab; ++j) mx = std::max(mx, row[j]);
            double denom = 0;
            for (int j = 0; j < config.vocab; ++j) denom += std::exp(static_cast<double>(row[j] - mx));
            row_loss[r] = std::log(denom) - static_cast<double>(row[target] - mx);
            const S inv_denom = static_cast<S>(1.0 / denom);
            for (int j = 0; j < config.vocab; ++j) {
                const S soft = std::exp(row[j] - mx) * inv_denom;
                drow[j] = (soft - (j == target ? S(1) : S(0))) * inv_count;
            }
        }
    });
    double total = 0;
    for (double v : row_loss) total += v;
    const double loss = total / ws.mask_count;
    if (!std::isfinite(loss)) throw NumericError("non-finite loss", config.layers, "logits");
    return loss;
}

template <typename S>
void batch_backward(const ParametersT<S>& params, const Batch& batch, TrainState<S>& ws,
                    ParametersT<S>& grads) {
    const ModelConfig& config = params.config;
    const int B = batch.batch, T = batch.length, d = config.d_model, ff = config.d_ff;
    const int R = B * T;
    const bool preln = config.norm == Norm::PreLn;
    const S scale = S(1) / std::sqrt(static_cast<S>(config.head_dim()));

    for (auto& t : grads.tensors()) std::fill(t.data, t.data + t.size, S(0));

    // Unembedding.
    const Mat<S>& readout = preln ? ws.lnf_out : ws.x_final;
    gemm_tn(grads.w_unembed, readout, ws.dlogits, true);
    Mat<S> dx(R, d);
    gemm_nt(dx, ws.dlogits, params.w_unembed);

    if (preln) {
        Mat<S> dxf(R, d);
        std::vector<S>& dg = grads.lnf_g;
        std::vector<S>& db = grads.lnf_b;
        for (int r = 0; r < R; ++r)
            layer_norm_backward_row(ws.x_final.row(r), dx.row(r), params.lnf_g.data(),
                                    ws.lnf_mean[static_cast<size_t>(r)], ws.lnf_rstd[static_cast<size_t>(r)],
                                    d, dxf.row(r), dg.data(), db.data());
        dx = std::move(dxf);
    }

    for (int ll = config.layers - 1; ll >= 0; --ll) {
        auto& lw = ws.layers[static_cast<size_t>(ll)];
        const auto& lp = params.layers[static_cast<size_t>(ll)];
        auto& lg = grads.layers[static_cast<size_t>(ll)];

        // MLP backward; dx is d(loss)/d(x_next).
        Mat<S> dg_act(R, ff);
        gemm_nt(dg_act, dx, lp.w_out);
        gemm_tn(lg.w_out, lw.g, dx, true);
        column_sums(lg.b_out, dx, true);

        Mat<S>& dh = dg_act;
        parallel_for(static_cast<size_t>(R), [&](size_t lo, size_t hi) {
            for (size_t r = lo; r < hi; ++r) {
                const S* hrow = lw.h.row(static_cast<int>(r));
                S* row = dh.row(static_cast<int>(r));
                for (int j = 0; j < ff; ++j) row[j] *= gelu_grad(hrow[j]);
            }
        });
        Mat<S> dmlp_input(R, d);
        gemm_nt(dmlp_input, dh, lp.w_in);
        gemm_tn(lg.w_in, lw.mlp_input, dh, true);
        column_sums(lg.b_in, dh, true);

        Mat<S> dx_mid = dx;  // residual branch
        if (preln) {
            Mat<S> tmp(R, d);
            for (int r = 0; r < R; ++r)
                layer_norm_backward_row(lw.x_mid.row(r), dmlp_input.row(r), lp.ln2_g.data(),
                                        lw.ln2_mean[static_cast<size_t>(r)], lw.ln2_rstd[static_cast<size_t>(r)],
                                        d, tmp.row(r), lg.ln2_g.data(), lg.ln2_b.data());
            for (size_t i = 0; i < dx_mid.size(); ++i) dx_mid.d[i] += tmp.d[i];
        } else {
            for (size_t i = 0; i < dx_mid.size(); ++i) dx_mid.d[i] += dmlp_input.d[i];
        }

        // Attention backward; da = dx_mid.
        Mat<S> dz(R, d);
        gemm_nt(dz, dx_mid, lp.w_o);
        gemm_tn(lg.w_o, lw.z, dx_mid, true);
        column_sums(lg.b_o, dx_mid, true);

        Mat<S> dq(R, d), dk(R, d), dv(R, d);
        parallel_for(static_cast<size_t>(B), [&](size_t blo, size_t bhi) {
            std::vector<S> dpat_row(static_cast<size_t>(T));
            for (size_t b = blo; b < bhi; ++b) {
                const Mat<S>& pat = lw.pattern[b];
                const int base = static_cast<int>(b) * T;
                for (int p = 0; p < T; ++p) {
                    for (int c = 0; c < d; ++c) {
                        dq.row(base + p)[c] = S(0);
                        dk.row(base + p)[c] = S(0);
                        dv.row(base + p)[c] = S(0);
                    }
                }
                for (int p = 0; p < T; ++p) {
                    const S* dz_row = dz.row(base + p);
                    const S* prow = pat.row(p);
                    // dv (accumulated over queries) and dpattern for this row.
                    S dot = S(0);
                    for (int j = 0; j <= p; ++j) {
                        const S acc = dot_row(dz_row, lw.v.row(base + j), d);
                        dpat_row[static_cast<size_t>(j)] = acc;
                        dot += acc * prow[j];
                    }
                    const S* qp = lw.q.row(base + p);
                    S* dq_row = dq.row(base + p);
                    for (int j = 0; j <= p; ++j) {
                        const S w = prow[j];
                        axpy_row(dv.row(base + j), dz_row, w, d);
                        const S dscore = w * (dpat_row[static_cast<size_t>(j)] - dot) * scale;
                        axpy_row(dq_row, lw.k.row(base + j), dscore, d);
                        axpy_row(dk.row(base + j), qp, dscore, d);
                    }
                }
            }
        });

        gemm_tn(lg.w_q, lw.attn_input, dq, true);
        gemm_tn(lg.w_k, lw.attn_input, dk, true);
        gemm_tn(lg.w_v, lw.attn_input, dv, true);
        column_sums(lg.b_q, dq, true);
        column_sums(lg.b_k, dk, true);
        column_sums(lg.b_v, dv, true);

        Mat<S> dattn_input(R, d);
        gemm_nt(dattn_input, dq, lp.w_q);
        gemm_nt(dattn_input, dk, lp.w_k, true);
        gemm_nt(dattn_input, dv, lp.w_v, true);

        if (preln) {
            Mat<S> tmp(R, d);
            for (int r = 0; r < R; ++r)
                layer_norm_backward_row(lw.x_in.row(r), dattn_input.row(r), lp.ln1_g.data(),
                                        lw.ln1_mean[static_cast<size_t>(r)], lw.ln1_rstd[static_cast<size_t>(r)],
                                        d, tmp.row(r), lg.ln1_g.data(), lg.ln1_b.data());
            for (size_t i = 0; i < dx_mid.size(); ++i) dx_mid.d[i] += tmp.d[i];
        } else {
            for (size_t i = 0; i < dx_mid.size(); ++i) dx_mid.d[i] += dattn_input.d[i];
        }
        dx = std::move(dx_mid);
    }

    // Embedding and positional gradients; ascending row order keeps the
    // accumulation deterministic.
    for (int r = 0; r < R; ++r) {
        const int tok = batch.tokens[static_cast<size_t>(r)];
        const int pos = r % T;
        add_row_inplace(grads.w_embed.row(tok), dx.row(r), d);
        add_row_inplace(grads.w_pos.row(pos), dx.row(r), d);
    }
}

template double batch_forward<float>(const ParametersT<float>&, const Batch&, TrainState<float>&);
template double batch_forward<double>(const ParametersT<double>&, const Batch&, TrainState<double>&);
template void batch_backward<float>(const ParametersT<float>&, const Batch&, TrainState<float>&,
                                    ParametersT<float>&);
template void batch_backward<double>(const ParametersT<double>&, const Batch&, TrainState<double>&,
                                     ParametersT<double>&);

}  // namespace backchain::model
