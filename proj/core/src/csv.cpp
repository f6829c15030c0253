#include "shardpipe/csv.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "shardpipe/errors.hpp"

namespace shardpipe {

namespace {

struct Record {
  std::size_t line = 0;  // 1-based line where the record starts
  std::vector<std::string> fields;
};

std::vector<Record> split_records(std::string_view text) {
  std::vector<Record> records;
  std::size_t i = 0;
  std::size_t line = 1;
  if (text.starts_with("\xEF\xBB\xBF")) i = 3;  // UTF-8 BOM
  while (i < text.size()) {
    Record rec;
    rec.line = line;
    std::string field;
    bool in_quotes = false;
    bool record_done = false;
    while (i < text.size() && !record_done) {
      const char c = text[i];
      if (in_quotes) {
        if (c == '"') {
          if (i + 1 < text.size() && text[i + 1] == '"') {
            field.push_back('"');
            i += 2;
            continue;
          }
          in_quotes = false;
        } else {
          if (c == '\n') ++line;
          field.push_back(c);
        }
        ++i;
        continue;
      }
      switch (c) {
        case '"':
          in_quotes = true;
          ++i;
          break;
        case ',':
          rec.fields.push_back(std::move(field));
          field.clear();
          ++i;
          break;
        case '\r':
          ++i;
          if (i < text.size() && text[i] == '\n') ++i;
          ++line;
          record_done = true;
          break;
        case '\n':
          ++i;
          ++line;
          record_done = true;
          break;
        default:
          field.push_back(c);
          ++i;
      }
    }
    if (in_quotes) throw DataError("unterminated quoted field starting on line " + std::to_string(rec.line));
    rec.fields.push_back(std::move(field));
    // A bare blank line carries no record.
    if (rec.fields.size() == 1 && rec.fields[0].empty()) continue;
    records.push_back(std::move(rec));
  }
  return records;
}

bool parse_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  if (*begin == '+') ++begin;
  const auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

RecordBatch parse_csv(std::string_view text) {
  const auto records = split_records(text);
  if (records.empty()) throw DataError("CSV has no header line");
  const auto& header = records.front().fields;
  const std::size_t n_cols = header.size();
  for (std::size_t r = 1; r < records.size(); ++r) {
    if (records[r].fields.size() != n_cols) {
      throw DataError("ragged row at line " + std::to_string(records[r].line) + ": expected " +
                      std::to_string(n_cols) + " fields, got " +
                      std::to_string(records[r].fields.size()));
    }
  }

  std::vector<Column> columns;
  for (std::size_t c = 0; c < n_cols; ++c) {
    std::vector<double> numbers;
    numbers.reserve(records.size() - 1);
    bool numeric = true;
    for (std::size_t r = 1; r < records.size() && numeric; ++r) {
      double v = 0.0;
      numeric = parse_number(records[r].fields[c], v);
      numbers.push_back(v);
    }
    if (numeric) {
      columns.push_back({header[c], std::move(numbers)});
    } else {
      std::vector<std::string> strings;
      strings.reserve(records.size() - 1);
      for (std::size_t r = 1; r < records.size(); ++r) strings.push_back(records[r].fields[c]);
      columns.push_back({header[c], std::move(strings)});
    }
  }
  for (std::size_t a = 0; a < n_cols; ++a) {
    for (std::size_t b = a + 1; b < n_cols; ++b) {
      if (header[a] == header[b]) throw DataError("duplicate CSV column '" + header[a] + "'");
    }
  }
  return RecordBatch(std::move(columns));
}

Shards read_csv(const std::filesystem::path& path, std::size_t n_parts) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open CSV file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return shards_from_rows(parse_csv(ss.str()), n_parts);
}

namespace {

std::string quote_if_needed(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

}  // namespace

std::string to_csv(const RecordBatch& batch) {
  std::string out;
  const auto& cols = batch.columns();
  for (std::size_t c = 0; c < cols.size(); ++c) {
    if (c) out += ',';
    out += quote_if_needed(cols[c].name);
  }
  out += '\n';
  for (std::size_t r = 0; r < batch.num_rows(); ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      if (c) out += ',';
      std::visit(
          [&](const auto& v) {
            using T = typename std::decay_t<decltype(v)>::value_type;
            if constexpr (std::is_same_v<T, std::string>) {
              out += quote_if_needed(v[r]);
            } else if constexpr (std::is_same_v<T, double>) {
              out += format_double(v[r]);
            } else {
              out += std::to_string(v[r]);
            }
          },
          cols[c].data);
    }
    out += '\n';
  }
  return out;
}

void write_csv(const std::filesystem::path& path, const RecordBatch& batch) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write CSV file " + path.string());
  out << to_csv(batch);
}

}  // namespace shardpipe
