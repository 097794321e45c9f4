#pragma once

#include <string>
#include <vector>

#include "backchain/interp/interventions.hpp"
#include "backchain/interp/probes.hpp"
#include "backchain/interp/scrub.hpp"

namespace backchain::report {

// Flat CSV writer; deterministic formatting (%.6g for doubles).
struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::string to_string() const;
    void write(const std::string& path) const;
};

std::string format_double(double v);

CsvTable probe_table(const std::vector<interp::ProbeReport>& reports);
CsvTable scrub_table(const interp::ScrubResult& result);
CsvTable depth_effect_table(const std::vector<interp::DepthEffect>& rows);

// Full-fidelity JSON (metadata included); parses back to the same values.
std::string probe_reports_json(const std::vector<interp::ProbeReport>& reports);
std::vector<interp::ProbeReport> probe_reports_from_json(const std::string& text);

struct RunManifest {
    std::string command;
    std::string config_digest;
    std::string dataset_digest;
    std::string checkpoint_digest;
    std::vector<uint64_t> seeds;
    std::string started_at;
    std::string finished_at;
    std::vector<std::string> artifacts;  // paths relative to the manifest
    int schema_version = 1;
};

void write_manifest(const RunManifest& manifest, const std::string& path);
RunManifest read_manifest(const std::string& path);

}  // namespace backchain::report
