#include "qsde/csv.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "qsde/errors.hpp"

namespace qsde {

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

std::string quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

void emit(std::ostream& os, const std::vector<std::string>& cells) {
  for (std::size_t i = 0; i < cells.size(); ++i) os << (i ? "," : "") << quote(cells[i]);
  os << '\n';
}

}  // namespace

CsvWriter::CsvWriter(std::vector<std::string> header) : header_(std::move(header)) {}

void CsvWriter::row(std::vector<std::string> cells) {
  if (cells.size() != header_.size()) throw InvalidInput("CSV row width does not match the header");
  rows_.push_back(std::move(cells));
}

void CsvWriter::write(std::ostream& os) const {
  emit(os, header_);
  for (const auto& r : rows_) emit(os, r);
}

std::string CsvWriter::str() const {
  std::ostringstream os;
  write(os);
  return os.str();
}

void CsvWriter::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open output file '" + path + "'");
  write(f);
  if (!f) throw ConfigError("failed writing '" + path + "'");
}

}  // namespace qsde
