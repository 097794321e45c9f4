#include "backchain/report.hpp"

#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "backchain/errors.hpp"

namespace backchain::report {

std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::string CsvTable::to_string() const {
    std::string out;
    for (size_t i = 0; i < header.size(); ++i) {
        out += header[i];
        out += (i + 1 < header.size()) ? ',' : '\n';
    }
    for (const auto& row : rows) {
        for (size_t i = 0; i < row.size(); ++i) {
            out += row[i];
            out += (i + 1 < row.size()) ? ',' : '\n';
        }
    }
    return out;
}

void CsvTable::write(const std::string& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open csv for writing: " + path);
    out << to_string();
    if (!out) throw IoError("failed writing csv: " + path);
}

CsvTable probe_table(const std::vector<interp::ProbeReport>& reports) {
    CsvTable t;
    t.header = {"probe", "layer", "f1"};
    for (const auto& r : reports)
        t.rows.push_back({r.probe, std::to_string(r.layer), format_double(r.f1)});
    return t;
}

CsvTable scrub_table(const interp::ScrubResult& result) {
    CsvTable t;
    t.header = {"depth", "l_cs", "l_model", "l_scrubbed", "l_random", "count", "skipped"};
    for (const auto& row : result.rows) {
        t.rows.push_back({std::to_string(row.depth), format_double(row.l_cs),
                          format_double(row.l_model), format_double(row.l_scrubbed),
                          format_double(row.l_random), std::to_string(row.count),
                          std::to_string(row.skipped)});
    }
    return t;
}

CsvTable depth_effect_table(const std::vector<interp::DepthEffect>& rows) {
    CsvTable t;
    t.header = {"depth", "mean_ld", "ci_lo", "ci_hi", "samples", "omitted"};
    for (const auto& row : rows) {
        t.rows.push_back({std::to_string(row.depth), format_double(row.ci.mean),
                          format_double(row.ci.lo), format_double(row.ci.hi),
                          std::to_string(row.samples), row.omitted ? "1" : "0"});
    }
    return t;
}

std::string probe_reports_json(const std::vector<interp::ProbeReport>& reports) {
    nlohmann::ordered_json arr = nlohmann::ordered_json::array();
    for (const auto& r : reports) {
        arr.push_back({{"probe", r.probe},
                       {"layer", r.layer},
                       {"f1", r.f1},
                       {"baseline_f1", r.baseline_f1},
                       {"per_label_f1", r.per_label_f1},
                       {"converged", r.converged},
                       {"note", r.note}});
    }
    return arr.dump(2);
}

std::vector<interp::ProbeReport> probe_reports_from_json(const std::string& text) {
    std::vector<interp::ProbeReport> out;
    for (const auto& j : nlohmann::json::parse(text)) {
        interp::ProbeReport r;
        r.probe = j.at("probe").get<std::string>();
        r.layer = j.at("layer").get<int>();
        r.f1 = j.at("f1").get<double>();
        r.baseline_f1 = j.at("baseline_f1").get<double>();
        r.per_label_f1 = j.at("per_label_f1").get<std::vector<double>>();
        r.converged = j.at("converged").get<bool>();
        r.note = j.at("note").get<std::string>();
        out.push_back(std::move(r));
    }
    return out;
}

void write_manifest(const RunManifest& manifest, const std::string& path) {
    nlohmann::ordered_json j;
    j["schema_version"] = manifest.schema_version;
    j["command"] = manifest.command;
    j["config_digest"] = manifest.config_digest;
    j["dataset_digest"] = manifest.dataset_digest;
    j["checkpoint_digest"] = manifest.checkpoint_digest;
    j["seeds"] = manifest.seeds;
    j["started_at"] = manifest.started_at;
    j["finished_at"] = manifest.finished_at;
    j["artifacts"] = manifest.artifacts;
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open manifest for writing: " + path);
    out << j.dump(2) << "\n";
}

RunManifest read_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open manifest: " + path);
    nlohmann::json j;
    in >> j;
    RunManifest m;
    m.schema_version = j.at("schema_version").get<int>();
    m.command = j.at("command").get<std::string>();
    m.config_digest = j.at("config_digest").get<std::string>();
    m.dataset_digest = j.at("dataset_digest").get<std::string>();
    m.checkpoint_digest = j.at("checkpoint_digest").get<std::string>();
    m.seeds = j.at("seeds").get<std::vector<uint64_t>>();
    m.started_at = j.at("started_at").get<std::string>();
    m.finished_at = j.at("finished_at").get<std::string>();
    m.artifacts = j.at("artifacts").get<std::vector<std::string>>();
    return m;
}

}  // namespace backchain::report
