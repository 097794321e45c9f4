#include "backchain/model/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "backchain/errors.hpp"
#include "backchain/task.hpp"

namespace backchain::model {

namespace {

Batch small_task_batch(const ModelConfig& config, uint64_t seed, int batch_size) {
    // Token sequences come from the task generator sized to the config.
    const int n_nodes = (config.vocab - 3) / 2;
    if (2 * n_nodes + 3 != config.vocab || 4 * n_nodes - 1 > config.context)
        throw InvalidArgument("config vocab/context do not fit a task size");
    Batch batch;
    batch.batch = batch_size;
    batch.length = 4 * n_nodes - 1;
    for (int i = 0; i < batch_size; ++i) {
        const auto instance =
            task::make_instance(Rng::derive_seed(seed, static_cast<uint64_t>(i)), n_nodes);
        const auto seq = task::encode_instance(instance);
        batch.tokens.insert(batch.tokens.end(), seq.tokens.begin(), seq.tokens.end());
        batch.mask.insert(batch.mask.end(), seq.loss_mask.begin(), seq.loss_mask.end());
    }
    return batch;
}

}  // namespace

GradCheckReport check_gradients(const ModelConfig& config, uint64_t seed, double tolerance,
                                int min_coords, double fd_step) {
    if (config.layers > 2 || config.d_model > 16)
        throw PreconditionError("gradient check expects <= 2 layers and d <= 16");
    config.validate();

    Rng rng(seed);
    auto params = init_params<double>(config, rng);
    const Batch batch = small_task_batch(config, Rng::derive_seed(seed, 77), 4);

    TrainState<double> ws;
    batch_forward(params, batch, ws);
    auto grads = zeros_like(params);
    batch_backward(params, batch, ws, grads);

    auto p_tensors = params.tensors();
    auto g_tensors = grads.tensors();
    size_t total = 0;
    for (const auto& t : p_tensors) total += t.size;

    // Distinct random coordinates across the whole parameter set.
    std::set<size_t> picked;
    const size_t want = std::min(static_cast<size_t>(min_coords), total);
    while (picked.size() < want) picked.insert(rng.below(total));

    GradCheckReport report;
    TrainState<double> fd_ws;
    for (size_t flat : picked) {
        size_t offset = flat;
        size_t ti = 0;
        while (offset >= p_tensors[ti].size) {
            offset -= p_tensors[ti].size;
            ++ti;
        }
        double* slot = p_tensors[ti].data + offset;
        const double saved = *slot;
        *slot = saved + fd_step;
        const double up = batch_forward(params, batch, fd_ws);
        *slot = saved - fd_step;
        const double down = batch_forward(params, batch, fd_ws);
        *slot = saved;

        GradCheckCoord coord;
        coord.tensor = p_tensors[ti].name;
        coord.index = offset;
        coord.analytic = g_tensors[ti].data[offset];
        coord.numeric = (up - down) / (2.0 * fd_step);
        coord.rel_error = std::abs(coord.analytic - coord.numeric) /
                          (std::max(std::abs(coord.analytic), std::abs(coord.numeric)) + 1e-6);
        report.max_rel_error = std::max(report.max_rel_error, coord.rel_error);
        ++report.coords_checked;
        report.worst.push_back(coord);
    }
    std::sort(report.worst.begin(), report.worst.end(),
              [](const auto& a, const auto& b) { return a.rel_error > b.rel_error; });
    if (report.worst.size() > 10) report.worst.resize(10);

    if (report.max_rel_error > tolerance) {
        std::ostringstream msg;
        msg << "gradient check failed: max relative error " << report.max_rel_error
            << " exceeds tolerance " << tolerance << "; worst coordinates:";
        for (const auto& c : report.worst) {
            msg << " [" << c.tensor << "#" << c.index << " analytic=" << c.analytic
                << " numeric=" << c.numeric << " rel=" << c.rel_error << "]";
        }
        throw VerificationFailure(msg.str());
    }
    return report;
}

}  // namespace backchain::model
