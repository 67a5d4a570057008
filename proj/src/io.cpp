#include "vem/io.hpp"

#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <system_error>

namespace vem {

std::string format_double(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), x);
  return std::string(buf, res.ptr);
}

double parse_double(const std::string& text, const std::string& what) {
  if (text == "nan") return std::nan("");
  if (text == "inf") return HUGE_VAL;
  if (text == "-inf") return -HUGE_VAL;
  double v = 0.0;
  const char* first = text.data();
  const char* last = text.data() + text.size();
  if (first != last && *first == '+') ++first;
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last || text.empty())
    throw std::invalid_argument("cannot parse '" + text + "' as a number for " + what);
  return v;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file_atomic(const std::string& path, const std::string& contents) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  std::error_code ec;
  if (target.has_parent_path()) fs::create_directories(target.parent_path(), ec);
  if (ec) throw IoError("cannot create directory '" + target.parent_path().string() + "': " + ec.message());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out << contents;
    out.flush();
    if (!out) throw IoError("write to '" + tmp.string() + "' failed");
  }
  fs::rename(tmp, target, ec);
  if (ec) throw IoError("cannot move '" + tmp.string() + "' to '" + path + "': " + ec.message());
}

namespace {

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(0, 1);
    out.push_back(cell);
  }
  return out;
}

}  // namespace

NumericCsv parse_numeric_csv(const std::string& text) {
  NumericCsv out;
  std::stringstream ss(text);
  std::string line;
  if (!std::getline(ss, line)) throw std::invalid_argument("CSV is empty");
  out.header = split_commas(line);
  int lineno = 1;
  while (std::getline(ss, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto cells = split_commas(line);
    if (cells.size() != out.header.size())
      throw std::invalid_argument("CSV line " + std::to_string(lineno) + " has " + std::to_string(cells.size()) +
                                  " cells, expected " + std::to_string(out.header.size()));
    std::vector<double> row;
    row.reserve(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) row.push_back(parse_double(cells[c], out.header[c]));
    out.rows.push_back(std::move(row));
  }
  return out;
}

std::string format_dataset_csv(const Dataset& data) {
  std::ostringstream os;
  const int d = data.dim();
  for (int k = 0; k < d; ++k) os << "x" << (k + 1) << ",";
  os << "y";
  if (data.z) os << ",z";
  os << "\n";
  for (Eigen::Index i = 0; i < data.size(); ++i) {
    for (int k = 0; k < d; ++k) os << format_double(data.locs(i, k)) << ",";
    os << format_double(data.y(i));
    if (data.z) os << "," << format_double((*data.z)(i));
    os << "\n";
  }
  return os.str();
}

Dataset parse_dataset_csv(const std::string& text) {
  const NumericCsv csv = parse_numeric_csv(text);
  int d = 0;
  while (d < static_cast<int>(csv.header.size()) && csv.header[d] == "x" + std::to_string(d + 1)) ++d;
  if (d == 0) throw std::invalid_argument("dataset header must start with x1");
  const auto rest = static_cast<int>(csv.header.size()) - d;
  if (rest < 1 || csv.header[d] != "y") throw std::invalid_argument("dataset header needs a y column after x1..xd");
  const bool has_z = rest == 2 && csv.header[d + 1] == "z";
  if (rest > 2 || (rest == 2 && !has_z)) throw std::invalid_argument("unexpected dataset columns after y");
  if (csv.rows.empty()) throw std::invalid_argument("dataset has no rows");
  const auto n = static_cast<Eigen::Index>(csv.rows.size());
  Dataset data{Locations(n, d), Eigen::VectorXd(n), std::nullopt};
  if (has_z) data.z = Eigen::VectorXd(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& row = csv.rows[static_cast<std::size_t>(i)];
    for (int k = 0; k < d; ++k) data.locs(i, k) = row[k];
    data.y(i) = row[d];
    if (has_z) (*data.z)(i) = row[d + 1];
  }
  return data;
}

void write_dataset_csv(const std::string& path, const Dataset& data) {
  write_text_file_atomic(path, format_dataset_csv(data));
}

Dataset read_dataset_csv(const std::string& path) { return parse_dataset_csv(read_text_file(path)); }

void CsvTable::add_row(std::vector<std::string> row) {
  if (row.size() != header_.size()) throw std::invalid_argument("CSV row width does not match header");
  rows_.push_back(std::move(row));
}

std::string CsvTable::str() const {
  std::ostringstream os;
  for (std::size_t i = 0; i < header_.size(); ++i) os << (i ? "," : "") << header_[i];
  os << "\n";
  for (const auto& row : rows_) {
    for (std::size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << row[i];
    os << "\n";
  }
  return os.str();
}

}  // namespace vem
