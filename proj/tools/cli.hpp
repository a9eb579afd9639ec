#pragma once

#include "grouped_glm/dataset.hpp"
#include "grouped_glm/simulation.hpp"

#include <json.hpp>

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace grouped_glm::cli {

enum ExitCode { kOk = 0, kDataError = 2, kConvergenceError = 3 };

/// Full command line without the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Header `y,group,<covariates...>`; an intercept column is prepended unless
/// `intercept` is false. `z_names` selects random-slope covariates.
GroupedDataset read_grouped_csv(std::istream& in, const std::vector<std::string>& z_names = {},
                                bool intercept = true);

std::vector<std::string> preset_names();
/// Embedded experiment; throws std::invalid_argument for an unknown name.
ExperimentConfig preset(std::string_view name, bool fast);
nlohmann::json preset_json(std::string_view name, bool fast);

/// Throws std::invalid_argument on unknown keys or bad values.
ExperimentConfig config_from_json(const nlohmann::json& j);

/// Markdown tables in the column order GLM, RI, Group-FE, bcRI, bcRegFE (RegFE last).
void write_report(std::ostream& out, const std::vector<MetricsRow>& rows);
/// Long format: one line per (dgp, estimator, inference, G, n) with a CI.
void write_coverage_long(std::ostream& out, const std::vector<MetricsRow>& rows);

}  // namespace grouped_glm::cli
