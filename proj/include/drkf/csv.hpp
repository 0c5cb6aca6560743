#pragma once

// Small CSV helpers. Numeric output always uses 17 significant digits so that
// values round-trip exactly.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <string_view>
#include <vector>

#include "drkf/matalg.hpp"

namespace drkf::csv {

std::string format(double v);

std::vector<std::string> split_line(std::string_view line);

/// Throws kIo on malformed numbers.
double parse_double(std::string_view field);

/// Headerless numeric matrix, one row per line. Throws kIo on missing files,
/// ragged rows or unparsable entries.
Matrix read_matrix(const std::filesystem::path& path);
void write_matrix(const std::filesystem::path& path, const Matrix& m);
void write_matrix(std::ostream& out, const Matrix& m);

/// Joins already formatted fields with commas.
std::string join(const std::vector<std::string>& fields);

}  // namespace drkf::csv
