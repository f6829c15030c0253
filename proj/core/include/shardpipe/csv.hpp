#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "shardpipe/xshards.hpp"

namespace shardpipe {

// Comma-delimited, RFC 4180 quoting (double quotes, "" escapes, CRLF or LF
// line ends). The first record is the header. A column whose every value
// parses as a number becomes Float, anything else String.
RecordBatch parse_csv(std::string_view text);

// Throws DataError for a missing file and for ragged rows, naming the 1-based
// line number where the offending record starts.
Shards read_csv(const std::filesystem::path& path, std::size_t n_parts);

// Writes a batch back out (header plus rows). Floats use the shortest form
// that round-trips.
std::string to_csv(const RecordBatch& batch);
void write_csv(const std::filesystem::path& path, const RecordBatch& batch);

}  // namespace shardpipe
