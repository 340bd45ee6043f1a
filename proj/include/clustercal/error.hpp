#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace clustercal {

/// Broad failure class. Maps onto CLI exit codes.
enum class ErrorCategory { config, data, numerical };

inline int exit_code(ErrorCategory c) {
    switch (c) {
    case ErrorCategory::config: return 2;
    case ErrorCategory::data: return 3;
    case ErrorCategory::numerical: return 4;
    }
    return 1;
}

/// Exception carrying a module-qualified code such as "data.one_arm_cluster".
class Error : public std::runtime_error {
public:
    Error(ErrorCategory category, std::string code, const std::string& message)
        : std::runtime_error(message), category_(category), code_(std::move(code)) {}

    ErrorCategory category() const noexcept { return category_; }
    const std::string& code() const noexcept { return code_; }

private:
    ErrorCategory category_;
    std::string code_;
};

namespace errc {
// data_model
inline constexpr const char* empty_input = "data.empty_input";
inline constexpr const char* dimension_mismatch = "data.dimension_mismatch";
inline constexpr const char* one_arm_cluster = "data.one_arm_cluster";
inline constexpr const char* non_positive_weight = "data.non_positive_weight";
inline constexpr const char* invalid_probability = "data.invalid_probability";
inline constexpr const char* invalid_treatment = "data.invalid_treatment";
inline constexpr const char* parse_error = "data.parse_error";
inline constexpr const char* missing_column = "data.missing_column";
inline constexpr const char* inconsistent_cluster = "data.inconsistent_cluster";
inline constexpr const char* non_finite = "data.non_finite_value";
// working_models
inline constexpr const char* separation = "working_models.separation_detected";
inline constexpr const char* singular_information = "working_models.singular_information";
inline constexpr const char* wm_not_converged = "working_models.not_converged";
inline constexpr const char* unidentifiable = "working_models.unidentifiable";
inline constexpr const char* wm_dimension = "working_models.dimension_mismatch";
// calibration
inline constexpr const char* probability_out_of_range = "calibration.probability_out_of_range";
inline constexpr const char* cal_not_converged = "calibration.not_converged";
inline constexpr const char* collinear = "calibration.collinear_covariates";
inline constexpr const char* cal_one_arm = "calibration.one_arm_cluster";
inline constexpr const char* overflow = "calibration.numerical_overflow";
inline constexpr const char* cal_dimension = "calibration.dimension_mismatch";
// estimators
inline constexpr const char* singular_moment = "estimators.singular_moment";
inline constexpr const char* missing_design_info = "estimators.missing_design_info";
inline constexpr const char* est_probability = "estimators.probability_out_of_range";
inline constexpr const char* resample_degenerate = "estimators.resample_degenerate";
inline constexpr const char* est_config = "estimators.invalid_argument";
// diagnostics
inline constexpr const char* zero_variance = "diagnostics.zero_variance";
// simulation / cli
inline constexpr const char* sim_config = "config.invalid_scenario";
inline constexpr const char* unknown_scenario = "config.unknown_scenario";
inline constexpr const char* bad_option = "config.invalid_option";
inline constexpr const char* io = "config.io_error";
} // namespace errc

[[noreturn]] inline void fail(ErrorCategory category, const char* code, const std::string& message) {
    throw Error(category, code, message);
}

} // namespace clustercal
