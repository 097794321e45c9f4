#include "backchain/interp/lens.hpp"

#include <cmath>

#include "backchain/errors.hpp"
#include "backchain/threading.hpp"

namespace backchain::interp {

SkipLens SkipLens::identity(const model::Parameters& params) {
    if (params.config.norm != model::Norm::None)
        throw PreconditionError("identity lens requires norm=none");
    SkipLens lens;
    lens.skipped_layers = 0;
    lens.source_layer = params.config.layers;
    lens.map.w = params.w_unembed;
    lens.map.b.assign(static_cast<size_t>(params.config.vocab), 0.0f);
    return lens;
}

SkipLens train_skip_lens(const model::Parameters& params,
                         const std::vector<task::TaskInstance>& dataset, int n,
                         const LogRegOptions& options, SkipLensReport* report) {
    const auto& config = params.config;
    if (n < 1 || n > config.layers - 1)
        throw InvalidArgument("skip lens expects 1 <= n <= layers-1");
    if (dataset.empty()) throw InvalidArgument("skip lens needs a dataset");
    const int source_layer = config.layers - n;
    const int d = config.d_model;

    // Features: x^{L-n} at every loss-masked position; targets: next token.
    std::vector<size_t> offsets(dataset.size() + 1, 0);
    std::vector<std::vector<int>> masked(dataset.size());
    std::vector<std::vector<int>> targets(dataset.size());
    for (size_t i = 0; i < dataset.size(); ++i) {
        const auto seq = task::encode_instance(dataset[i]);
        for (int p = 0; p + 1 < seq.length(); ++p) {
            if (!seq.loss_mask[static_cast<size_t>(p)]) continue;
            masked[i].push_back(p);
            targets[i].push_back(seq.tokens[static_cast<size_t>(p) + 1]);
        }
        offsets[i + 1] = offsets[i] + masked[i].size();
    }
    Mat<float> x(static_cast<int>(offsets.back()), d);
    std::vector<int> y(offsets.back(), 0);
    parallel_for(dataset.size(), [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
            const auto seq = task::encode_instance(dataset[i]);
            const auto cache = model::forward(params, seq.tokens);
            const auto& stream = cache.resid[static_cast<size_t>(source_layer)];
            for (size_t j = 0; j < masked[i].size(); ++j) {
                const size_t row = offsets[i] + j;
                std::copy(stream.row(masked[i][j]), stream.row(masked[i][j]) + d,
                          x.row(static_cast<int>(row)));
                y[row] = targets[i][j];
            }
        }
    });

    SkipLens lens;
    lens.skipped_layers = n;
    lens.source_layer = source_layer;
    lens.map = fit_softmax_regression(x, y, config.vocab, options);

    if (report) {
        report->skipped_layers = n;
        report->converged = lens.map.converged;
        const auto scores = logreg_scores(lens.map, x);
        double total = 0;
        for (int r = 0; r < scores.rows; ++r) {
            const float* row = scores.row(r);
            float mx = row[0];
            for (int j = 1; j < scores.cols; ++j) mx = std::max(mx, row[j]);
            double denom = 0;
            for (int j = 0; j < scores.cols; ++j)
                denom += std::exp(static_cast<double>(row[j] - mx));
            total += std::log(denom) - static_cast<double>(row[y[static_cast<size_t>(r)]] - mx);
        }
        report->train_loss = total / std::max(1, scores.rows);
    }
    return lens;
}

Mat<float> apply_skip_lens(const SkipLens& lens, const model::ActivationCache& cache) {
    const auto& stream = cache.resid[static_cast<size_t>(lens.source_layer)];
    return logreg_scores(lens.map, stream);
}

std::vector<int> lens_layer_argmax(const std::vector<SkipLens>& lenses,
                                   const model::ActivationCache& cache, int position) {
    std::vector<int> out;
    for (const auto& lens : lenses) {
        const auto logits = apply_skip_lens(lens, cache);
        const float* row = logits.row(position);
        int best = 0;
        for (int j = 1; j < logits.cols; ++j)
            if (row[j] > row[best]) best = j;
        out.push_back(best);
    }
    return out;
}

}  // namespace backchain::interp
