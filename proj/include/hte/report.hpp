#pragma once

#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

namespace hte {

class PanelDataset;
struct CapeSet;

// Shortest round-trippable text for a double (17 significant digits, %g style).
std::string format_exact(double v);
// %.<digits>g
std::string format_general(double v, int digits = 6);
// %.<decimals>f
std::string format_fixed(double v, int decimals);

std::string csv_escape(std::string_view field);
void write_csv_row(std::ostream& out, const std::vector<std::string>& fields);

// Plain-text table with right-aligned columns (first column left-aligned).
class TextTable {
 public:
  explicit TextTable(std::vector<std::string> header);
  void add_row(std::vector<std::string> row);
  void write(std::ostream& out) const;

 private:
  std::vector<std::vector<std::string>> rows_;
};

// unit_id, year, tau_hat, se, p_value, significant
void write_cape_csv(const PanelDataset& ds, const CapeSet& capes, std::ostream& out);

}  // namespace hte
