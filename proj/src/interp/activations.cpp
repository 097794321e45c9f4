#include "backchain/interp/activations.hpp"

#include <cstring>
#include <fstream>

#include "backchain/errors.hpp"
#include "backchain/threading.hpp"

namespace backchain::interp {

std::vector<int> select_positions(const task::TaskInstance& instance,
                                  ActivationRequest::Select select) {
    const task::TokenLayout layout(instance.tree.n_nodes);
    std::vector<int> out;
    switch (select) {
        case ActivationRequest::Select::AllPositions:
            for (int p = 0; p < layout.context; ++p) out.push_back(p);
            break;
        case ActivationRequest::Select::EdgeTargets:
            for (int p = 1; p < layout.edge_region_end; p += 3) out.push_back(p);
            break;
        case ActivationRequest::Select::EdgeSources:
            for (int p = 0; p < layout.edge_region_end; p += 3) out.push_back(p);
            break;
        case ActivationRequest::Select::Commas:
            for (int p = 2; p < layout.edge_region_end; p += 3) out.push_back(p);
            break;
        case ActivationRequest::Select::PathPositions:
            for (size_t j = 0; j < instance.path.size(); ++j)
                out.push_back(layout.path_start + static_cast<int>(j));
            break;
        case ActivationRequest::Select::FirstPathPosition:
            out.push_back(layout.path_start);
            break;
    }
    return out;
}

namespace {

ActivationTable collect(const model::Parameters& params,
                        const std::vector<task::TaskInstance>& dataset,
                        const ActivationRequest& request, std::ostream* sink) {
    for (int layer : request.layers) {
        if (layer < 0 || layer > params.config.layers)
            throw InvalidArgument("activation layer out of range");
    }
    ActivationTable table;
    table.d_model = params.config.d_model;

    // Row budget per instance is fixed by the selector, so rows can be
    // written to a preallocated block per instance (parallel, deterministic).
    std::vector<size_t> offsets(dataset.size() + 1, 0);
    std::vector<std::vector<int>> positions(dataset.size());
    for (size_t i = 0; i < dataset.size(); ++i) {
        positions[i] = select_positions(dataset[i], request.select);
        offsets[i + 1] = offsets[i] + positions[i].size() * request.layers.size();
    }
    table.keys.resize(offsets.back());
    table.features.assign(offsets.back() * static_cast<size_t>(table.d_model), 0.0f);

    parallel_for(dataset.size(), [&](size_t lo, size_t hi) {
        for (size_t i = lo; i < hi; ++i) {
            const auto seq = task::encode_instance(dataset[i]);
            const auto cache = model::forward(params, seq.tokens);
            size_t row = offsets[i];
            for (int layer : request.layers) {
                const auto& stream = cache.resid[static_cast<size_t>(layer)];
                for (int p : positions[i]) {
                    table.keys[row] = {static_cast<int32_t>(i), static_cast<int32_t>(layer),
                                       static_cast<int32_t>(p)};
                    std::memcpy(table.features.data() + row * static_cast<size_t>(table.d_model),
                                stream.row(p), sizeof(float) * static_cast<size_t>(table.d_model));
                    ++row;
                }
            }
        }
    });

    if (sink) {
        const int64_t rows = static_cast<int64_t>(table.rows());
        const int32_t d = table.d_model;
        sink->write("BCACT1\n", 7);
        sink->write(reinterpret_cast<const char*>(&rows), sizeof(rows));
        sink->write(reinterpret_cast<const char*>(&d), sizeof(d));
        sink->write(reinterpret_cast<const char*>(table.keys.data()),
                    static_cast<std::streamsize>(table.keys.size() * sizeof(ActivationTable::Key)));
        sink->write(reinterpret_cast<const char*>(table.features.data()),
                    static_cast<std::streamsize>(table.features.size() * sizeof(float)));
        if (!*sink) throw IoError("failed writing activation table");
    }
    return table;
}

}  // namespace

ActivationTable collect_activations(const model::Parameters& params,
                                    const std::vector<task::TaskInstance>& dataset,
                                    const ActivationRequest& request) {
    return collect(params, dataset, request, nullptr);
}

void collect_activations_to_file(const model::Parameters& params,
                                 const std::vector<task::TaskInstance>& dataset,
                                 const ActivationRequest& request, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open activation table for writing: " + path);
    collect(params, dataset, request, &out);
}

void ActivationTable::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open activation table for writing: " + path);
    const int64_t n = static_cast<int64_t>(rows());
    const int32_t d = d_model;
    out.write("BCACT1\n", 7);
    out.write(reinterpret_cast<const char*>(&n), sizeof(n));
    out.write(reinterpret_cast<const char*>(&d), sizeof(d));
    out.write(reinterpret_cast<const char*>(keys.data()),
              static_cast<std::streamsize>(keys.size() * sizeof(Key)));
    out.write(reinterpret_cast<const char*>(features.data()),
              static_cast<std::streamsize>(features.size() * sizeof(float)));
    if (!out) throw IoError("failed writing activation table: " + path);
}

ActivationTable ActivationTable::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open activation table: " + path);
    char magic[7];
    in.read(magic, 7);
    if (!in || std::memcmp(magic, "BCACT1\n", 7) != 0)
        throw IoError("not an activation table: " + path);
    int64_t n = 0;
    int32_t d = 0;
    in.read(reinterpret_cast<char*>(&n), sizeof(n));
    in.read(reinterpret_cast<char*>(&d), sizeof(d));
    ActivationTable table;
    table.d_model = d;
    table.keys.resize(static_cast<size_t>(n));
    table.features.resize(static_cast<size_t>(n) * static_cast<size_t>(d));
    in.read(reinterpret_cast<char*>(table.keys.data()),
            static_cast<std::streamsize>(table.keys.size() * sizeof(Key)));
    in.read(reinterpret_cast<char*>(table.features.data()),
            static_cast<std::streamsize>(table.features.size() * sizeof(float)));
    if (!in) throw IoError("activation table truncated: " + path);
    return table;
}

}  // namespace backchain::interp
