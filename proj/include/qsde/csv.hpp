#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace qsde {

/// Round-trip decimal form with 17 significant digits.
std::string fmt17(double v);

/// Minimal CSV writer: header row, then rows of already formatted cells.
class CsvWriter {
 public:
  explicit CsvWriter(std::vector<std::string> header);
  void row(std::vector<std::string> cells);
  void write(std::ostream& os) const;
  std::string str() const;
  void save(const std::string& path) const;

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

}  // namespace qsde
