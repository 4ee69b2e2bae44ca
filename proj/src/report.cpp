#include "hte/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "hte/error.hpp"
#include "hte/forest.hpp"
#include "hte/panel.hpp"

namespace hte {

namespace {

std::string printf_double(const char* format, int precision, double v) {
  if (std::isnan(v)) return "NA";
  if (std::isinf(v)) return v > 0 ? "Inf" : "-Inf";
  char buffer[64];
  std::snprintf(buffer, sizeof(buffer), format, precision, v);
  std::string out(buffer);
  if (out == "-0" || out.find_first_not_of("-0.") == std::string::npos) {
    if (out.front() == '-') out.erase(0, 1);
  }
  return out;
}

}  // namespace

std::string format_exact(double v) { return printf_double("%.*g", 17, v); }

std::string format_general(double v, int digits) { return printf_double("%.*g", digits, v); }

std::string format_fixed(double v, int decimals) { return printf_double("%.*f", decimals, v); }

std::string csv_escape(std::string_view field) {
  if (field.find_first_of(",\"\n\r") == std::string_view::npos) return std::string(field);
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

void write_csv_row(std::ostream& out, const std::vector<std::string>& fields) {
  for (std::size_t i = 0; i < fields.size(); ++i) {
    if (i > 0) out << ',';
    out << csv_escape(fields[i]);
  }
  out << '\n';
}

TextTable::TextTable(std::vector<std::string> header) { rows_.push_back(std::move(header)); }

void TextTable::add_row(std::vector<std::string> row) { rows_.push_back(std::move(row)); }

void TextTable::write(std::ostream& out) const {
  std::vector<std::size_t> width;
  for (const auto& row : rows_) {
    if (width.size() < row.size()) width.resize(row.size(), 0);
    for (std::size_t j = 0; j < row.size(); ++j) width[j] = std::max(width[j], row[j].size());
  }
  for (std::size_t r = 0; r < rows_.size(); ++r) {
    const auto& row = rows_[r];
    std::string line;
    for (std::size_t j = 0; j < row.size(); ++j) {
      const std::size_t pad = width[j] - row[j].size();
      if (j == 0) {
        line += row[j] + std::string(pad, ' ');
      } else {
        line += "  " + std::string(pad, ' ') + row[j];
      }
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out << line << '\n';
    if (r == 0) {
      std::size_t total = 0;
      for (std::size_t j = 0; j < width.size(); ++j) total += width[j] + (j == 0 ? 0 : 2);
      out << std::string(total, '-') << '\n';
    }
  }
}

void write_cape_csv(const PanelDataset& ds, const CapeSet& capes, std::ostream& out) {
  require(ds.size() == capes.size(), ErrorCode::kInvalidArgument,
          "CAPE set and dataset row counts differ");
  write_csv_row(out, {"unit_id", "year", "tau_hat", "se", "p_value", "significant"});
  for (std::size_t i = 0; i < ds.size(); ++i) {
    write_csv_row(out, {ds[i].unit_id, std::to_string(ds[i].year), format_exact(capes.tau_hat[i]),
                        format_exact(capes.se[i]), format_exact(capes.p_value[i]),
                        capes.significant[i] ? "1" : "0"});
  }
}

}  // namespace hte
