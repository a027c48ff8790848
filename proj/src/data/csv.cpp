#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "twostep/data.hpp"

namespace twostep::data {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_commas(std::string_view line) {
  std::vector<std::string_view> cells;
  std::size_t start = 0;
  for (;;) {
    const std::size_t comma = line.find(',', start);
    if (comma == std::string_view::npos) {
      cells.push_back(trim(line.substr(start)));
      return cells;
    }
    cells.push_back(trim(line.substr(start, comma - start)));
    start = comma + 1;
  }
}

std::string cell_location(const std::filesystem::path& path, std::size_t row, std::size_t col) {
  return path.string() + ": row " + std::to_string(row) + ", column " + std::to_string(col);
}

}  // namespace

std::filesystem::path manifest_path_for(const std::filesystem::path& csv) {
  std::filesystem::path p = csv;
  p.replace_extension(".manifest.json");
  return p;
}

DatasetHandle load_csv(const std::filesystem::path& path) {
  if (!std::filesystem::is_regular_file(path)) throw DataError("cannot open dataset file " + path.string());
  const auto manifest = manifest_path_for(path);
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open target manifest " + manifest.string());
  nlohmann::json j;
  try {
    in >> j;
    return load_csv(path, j.at("targets").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed target manifest " + manifest.string() + ": " + e.what());
  }
}

DatasetHandle load_csv(const std::filesystem::path& path, const std::vector<std::string>& targets) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset file " + path.string());

  std::string line;
  if (!std::getline(in, line)) throw DataError(path.string() + ": missing header row");
  const auto header = split_commas(line);

  std::vector<bool> is_target(header.size(), false);
  std::vector<std::string> input_names;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (std::find(targets.begin(), targets.end(), header[c]) != targets.end()) {
      is_target[c] = true;
    } else {
      input_names.emplace_back(header[c]);
    }
  }
  // Target order follows the manifest, not the file.
  std::vector<std::size_t> target_cols;
  for (const auto& t : targets) {
    auto it = std::find(header.begin(), header.end(), t);
    if (it == header.end()) throw DataError(path.string() + ": target column '" + t + "' not found");
    target_cols.push_back(static_cast<std::size_t>(it - header.begin()));
  }

  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> row_values(header.size());
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    ++row;
    const auto cells = split_commas(line);
    if (cells.size() != header.size()) {
      throw DataError(path.string() + ": row " + std::to_string(row) + " has " +
                      std::to_string(cells.size()) + " cells, header has " +
                      std::to_string(header.size()));
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const auto cell = cells[c];
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc() || ptr != cell.data() + cell.size() || cell.empty()) {
        throw DataError(cell_location(path, row, c + 1) + ": not a number: '" +
                        std::string(cell) + "'");
      }
      if (!std::isfinite(v)) {
        throw DataError(cell_location(path, row, c + 1) + ": NaN or Inf is not allowed");
      }
      row_values[c] = v;
    }
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (!is_target[c]) x.push_back(row_values[c]);
    }
    for (std::size_t c : target_cols) y.push_back(row_values[c]);
  }
  if (row == 0) throw DataError(path.string() + ": no data rows");
  return DatasetHandle(std::move(input_names), targets, std::move(x), std::move(y),
                       "csv:" + path.string());
}

void write_csv(const DatasetHandle& handle, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  const auto& in_names = handle.input_names();
  const auto& t_names = handle.target_names();
  for (std::size_t j = 0; j < in_names.size(); ++j) out << (j ? "," : "") << in_names[j];
  for (const auto& t : t_names) out << ',' << t;
  out << '\n';
  char buf[32];
  auto emit = [&](double v) {
    const int len = std::snprintf(buf, sizeof buf, "%.17g", v);
    out.write(buf, len);
  };
  for (std::size_t r = 0; r < handle.n_samples(); ++r) {
    const auto x = handle.input_row(r);
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (j) out << ',';
      emit(x[j]);
    }
    for (double v : handle.target_row(r)) {
      out << ',';
      emit(v);
    }
    out << '\n';
  }
  if (!out) throw DataError("failed writing " + path.string());

  std::ofstream manifest(manifest_path_for(path));
  manifest << nlohmann::json{{"targets", t_names}}.dump() << '\n';
  if (!manifest) throw DataError("failed writing manifest for " + path.string());
}

}  // namespace twostep::data
