#include "protocol/report.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>

namespace magmix {

ReportFormat parse_report_format(const std::string& name) {
  if (name == "csv") return ReportFormat::Csv;
  if (name == "md") return ReportFormat::Markdown;
  if (name == "svg") return ReportFormat::Svg;
  if (name == "all") return ReportFormat::All;
  throw ConfigError("unknown report format '" + name + "'; expected csv, md, svg or all");
}

namespace {

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), f, v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write '" + p.string() + "'");
  f << text;
  if (!f) throw IoError("failed writing '" + p.string() + "'");
}

}  // namespace

std::string report_csv(const std::vector<CrossMagMatrix>& matrices) {
  std::string out = "arch,train_mag,test_mag,run_seed,accuracy\n";
  for (const auto& m : matrices)
    for (int i = 0; i < kNumMags; ++i)
      for (int j = 0; j < kNumMags; ++j) {
        const auto& c = m.cells[i][j];
        if (!c.accuracy) continue;
        out += m.arch + "," + std::string(kMagLevels[i].label) + "," + std::string(kMagLevels[j].label) + "," +
               std::to_string(c.run_seed) + "," + fmt("%.6f", *c.accuracy) + "\n";
      }
  return out;
}

std::string report_markdown(const std::vector<CrossMagMatrix>& matrices, const std::vector<ArchSummary>& summaries,
                            const RobustnessReport* report) {
  std::string out = "# Cross-magnification accuracy\n\n";
  if (!matrices.empty() && !matrices.front().dataset_fingerprint.empty()) {
    out += "Dataset snapshot: `" + matrices.front().dataset_fingerprint + "`\n\n";
  }
  out += "Rows are training magnifications, columns testing magnifications; cells are top-1 accuracy.\n\n";
  for (const auto& m : matrices) {
    out += "## " + m.arch + "\n\n| train \\ test |";
    for (const auto& l : kMagLevels) out += " " + std::string(l.label) + " |";
    out += "\n|---|---|---|---|---|\n";
    for (int i = 0; i < kNumMags; ++i) {
      out += "| " + std::string(kMagLevels[i].label) + " |";
      for (int j = 0; j < kNumMags; ++j) {
        const auto& c = m.cells[i][j];
        out += " " + (c.accuracy ? fmt("%.3f", *c.accuracy) : std::string("n/a")) + " |";
      }
      out += "\n";
    }
    out += "\n";
    const auto it = std::find_if(summaries.begin(), summaries.end(), [&](const ArchSummary& s) { return s.arch == m.arch; });
    if (it != summaries.end()) {
      out += "Row means:";
      for (int i = 0; i < kNumMags; ++i) out += " " + std::string(kMagLevels[i].label) + " " + fmt("%.3f", it->row_means[i]);
      out += "\n\nOverall mean " + fmt("%.3f", it->overall_mean) + ", diagonal mean " + fmt("%.3f", it->diagonal_mean) +
             ", min cell " + fmt("%.3f", it->min_cell) + ", min off-diagonal cell " + fmt("%.3f", it->min_offdiag_cell) +
             ", generalization gap " + fmt("%.3f", it->generalization_gap) + ".\n\n";
    } else {
      out += "Incomplete matrix; excluded from aggregation.\n\n";
    }
    for (int i = 0; i < kNumMags; ++i)
      if (!m.row_errors[i].empty()) out += "Row " + std::string(kMagLevels[i].label) + " failed: " + m.row_errors[i] + "\n\n";
  }

  if (!summaries.empty()) {
    Index min_act = 0;
    for (const auto& s : summaries)
      if (s.activation_elems > 0 && (min_act == 0 || s.activation_elems < min_act)) min_act = s.activation_elems;
    out += "## Summary\n\n| arch | overall mean | diagonal mean | min cell | gap | params | activation elems | activation ratio |\n";
    out += "|---|---|---|---|---|---|---|---|\n";
    for (const auto& s : summaries) {
      out += "| " + s.arch + " | " + fmt("%.3f", s.overall_mean) + " | " + fmt("%.3f", s.diagonal_mean) + " | " +
             fmt("%.3f", s.min_cell) + " | " + fmt("%.3f", s.generalization_gap) + " | " + std::to_string(s.param_count) +
             " | " + std::to_string(s.activation_elems) + " | " +
             (min_act > 0 ? fmt("%.2f", static_cast<double>(s.activation_elems) / static_cast<double>(min_act)) : "n/a") +
             " |\n";
    }
    out += "\n";
  }

  if (report) {
    out += "## Rankings\n\n| rank | overall mean | diagonal mean | min cell |\n|---|---|---|---|\n";
    for (std::size_t k = 0; k < report->by_overall_mean.size(); ++k) {
      auto cell = [&](const RobustnessReport::Ranking& r) { return r[k].first + " (" + fmt("%.3f", r[k].second) + ")"; };
      out += "| " + std::to_string(k + 1) + " | " + cell(report->by_overall_mean) + " | " + cell(report->by_diagonal_mean) +
             " | " + cell(report->by_min_cell) + " |\n";
    }
    out += "\n## Reference trends\n\nObserved leaders compared with the reference findings. Logged, not asserted.\n\n";
    for (const auto& t : check_reference_trends(*report)) {
      out += "- " + t.statistic + ": expected leader " + t.expected_leader + ", observed leader " +
             (t.observed_leader.empty() ? std::string("none") : t.observed_leader) + ": " +
             (!t.agrees ? std::string("not evaluated (architecture absent)") : *t.agrees ? "agrees" : "disagrees") + "\n";
    }
  }
  return out;
}

std::string report_svg(const std::vector<ArchSummary>& summaries) {
  const int width = 720, height = 400, left = 60, right = 20, top = 40, bottom = 90;
  const int plot_w = width - left - right, plot_h = height - top - bottom;
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) + "\" height=\"" +
                    std::to_string(height) + "\" viewBox=\"0 0 " + std::to_string(width) + " " + std::to_string(height) +
                    "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out += "<text x=\"" + std::to_string(width / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">"
         "Overall mean accuracy across all train/test magnifications</text>\n";
  for (int t = 0; t <= 4; ++t) {
    const double v = t * 0.25;
    const int y = top + plot_h - static_cast<int>(v * plot_h);
    out += "<line x1=\"" + std::to_string(left) + "\" y1=\"" + std::to_string(y) + "\" x2=\"" +
           std::to_string(left + plot_w) + "\" y2=\"" + std::to_string(y) + "\" stroke=\"#dddddd\"/>\n";
    out += "<text x=\"" + std::to_string(left - 6) + "\" y=\"" + std::to_string(y + 4) + "\" text-anchor=\"end\">" +
           fmt("%.2f", v) + "</text>\n";
  }
  const std::size_t n = std::max<std::size_t>(1, summaries.size());
  const double slot = static_cast<double>(plot_w) / static_cast<double>(n);
  for (std::size_t k = 0; k < summaries.size(); ++k) {
    const auto& s = summaries[k];
    const double bw = slot * 0.6;
    const double x = left + slot * static_cast<double>(k) + (slot - bw) / 2.0;
    const double h = std::clamp(s.overall_mean, 0.0, 1.0) * plot_h;
    const double y = top + plot_h - h;
    out += "<rect x=\"" + fmt("%.1f", x) + "\" y=\"" + fmt("%.1f", y) + "\" width=\"" + fmt("%.1f", bw) + "\" height=\"" +
           fmt("%.1f", h) + "\" fill=\"#4a6fa5\"/>\n";
    out += "<text x=\"" + fmt("%.1f", x + bw / 2.0) + "\" y=\"" + fmt("%.1f", y - 4.0) + "\" text-anchor=\"middle\">" +
           fmt("%.3f", s.overall_mean) + "</text>\n";
    out += "<text x=\"" + fmt("%.1f", x + bw / 2.0) + "\" y=\"" + std::to_string(top + plot_h + 18) +
           "\" text-anchor=\"middle\">" + xml_escape(s.arch) + "</text>\n";
  }
  out += "<line x1=\"" + std::to_string(left) + "\" y1=\"" + std::to_string(top + plot_h) + "\" x2=\"" +
         std::to_string(left + plot_w) + "\" y2=\"" + std::to_string(top + plot_h) + "\" stroke=\"black\"/>\n";
  out += "</svg>\n";
  return out;
}

std::vector<std::string> emit_report(const std::vector<CrossMagMatrix>& matrices,
                                     const std::vector<ArchSummary>& summaries, const RobustnessReport* report,
                                     const std::string& out_dir, ReportFormat format) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create '" + out_dir + "': " + ec.message());
  std::vector<std::string> written;
  auto emit = [&](const char* name, const std::string& text) {
    const fs::path p = fs::path(out_dir) / name;
    write_file(p, text);
    written.push_back(p.string());
  };
  if (format == ReportFormat::Csv || format == ReportFormat::All) emit("report.csv", report_csv(matrices));
  if (format == ReportFormat::Markdown || format == ReportFormat::All) {
    emit("report.md", report_markdown(matrices, summaries, report));
  }
  if (format == ReportFormat::Svg || format == ReportFormat::All) emit("report.svg", report_svg(summaries));
  return written;
}

}  // namespace magmix
