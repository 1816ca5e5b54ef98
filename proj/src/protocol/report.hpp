#pragma once

#include <string>
#include <vector>

#include "protocol/matrix.hpp"

namespace magmix {

enum class ReportFormat { Csv, Markdown, Svg, All };

// "csv", "md", "svg" or "all"; anything else is a ConfigError.
ReportFormat parse_report_format(const std::string& name);

std::string report_csv(const std::vector<CrossMagMatrix>& matrices);
std::string report_markdown(const std::vector<CrossMagMatrix>& matrices, const std::vector<ArchSummary>& summaries,
                            const RobustnessReport* report);
std::string report_svg(const std::vector<ArchSummary>& summaries);

// Writes report.{csv,md,svg} (as selected) into out_dir and returns the paths.
// Output bytes depend only on the inputs.
std::vector<std::string> emit_report(const std::vector<CrossMagMatrix>& matrices,
                                     const std::vector<ArchSummary>& summaries, const RobustnessReport* report,
                                     const std::string& out_dir, ReportFormat format);

}  // namespace magmix
