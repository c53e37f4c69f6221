#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace casemix::textio {

/// Shortest decimal string that parses back to the same double.
std::string format_double(double v);

/// Full-string parse; nullopt on anything that is not a finite number.
std::optional<double> parse_double(std::string_view s);

/// Splits one CSV line, honouring double-quoted fields.
std::vector<std::string> split_csv_line(std::string_view line);

/// Quotes a field when it contains a comma, quote or newline.
std::string csv_field(std::string_view s);

std::string_view trim(std::string_view s);

}  // namespace casemix::textio
