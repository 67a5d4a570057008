#pragma once

// Text I/O helpers: exact double formatting, atomic file writes, and the
// dataset CSV format (header x1,...,xd,y[,z]).

#include <Eigen/Dense>

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "vem/kernels.hpp"

namespace vem {

/// A file could not be read or written.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shortest decimal representation that parses back to the same double.
std::string format_double(double x);
/// Strict parse of a full string; `what` names the field in error messages.
double parse_double(const std::string& text, const std::string& what);

std::string read_text_file(const std::string& path);
/// Write to a temporary sibling and rename into place.
void write_text_file_atomic(const std::string& path, const std::string& contents);

struct Dataset {
  Locations locs;
  Eigen::VectorXd y;
  std::optional<Eigen::VectorXd> z;  // latent values, when known

  Eigen::Index size() const { return y.size(); }
  int dim() const { return static_cast<int>(locs.cols()); }
};

std::string format_dataset_csv(const Dataset& data);
Dataset parse_dataset_csv(const std::string& text);
void write_dataset_csv(const std::string& path, const Dataset& data);
Dataset read_dataset_csv(const std::string& path);

/// Minimal CSV table: a header and rows of already formatted cells.
class CsvTable {
 public:
  explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}
  void add_row(std::vector<std::string> row);
  std::string str() const;
  void write(const std::string& path) const { write_text_file_atomic(path, str()); }
  const std::vector<std::string>& header() const { return header_; }
  const std::vector<std::vector<std::string>>& rows() const { return rows_; }

 private:
  std::vector<std::string> header_;
  std::vector<std::vector<std::string>> rows_;
};

/// Parse a numeric CSV with a header line; returns header and row values.
struct NumericCsv {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};
NumericCsv parse_numeric_csv(const std::string& text);

}  // namespace vem
