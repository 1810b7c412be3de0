#pragma once

#include <map>
#include <string>
#include <vector>

namespace vhm {

// %.6g formatting used for every numeric value in CSV output.
std::string fmt_g6(double v);

std::vector<std::string> split_csv_line(const std::string& line);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

// key=value files (one pair per line, '#' comments)
using KeyValues = std::map<std::string, std::string>;
KeyValues read_key_values(const std::string& path);
void write_key_values(const std::string& path, const KeyValues& kv);

double kv_double(const KeyValues& kv, const std::string& key, double fallback);
long kv_long(const KeyValues& kv, const std::string& key, long fallback);
std::string kv_string(const KeyValues& kv, const std::string& key, const std::string& fallback);

} // namespace vhm
