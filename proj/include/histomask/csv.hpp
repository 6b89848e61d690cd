// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "histomask/common.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace histomask {

/// Shortest-stable text form used in every output file: 9 significant digits.
std::string format_real(double v);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const std::filesystem::path& path);

/// Numeric matrix with a header row; every cell must parse as a real.
MatD read_matrix_csv(const std::filesystem::path& path, std::vector<std::string>* header = nullptr);
void write_matrix_csv(const std::filesystem::path& path, const MatD& m,
                      const std::vector<std::string>& header);

void write_text_file(const std::filesystem::path& path, const std::string& content);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace histomask
