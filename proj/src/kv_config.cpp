#include "i2cl/kv_config.hpp"

#include <fstream>
#include <sstream>

#include "i2cl/error.hpp"

namespace i2cl {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) {
    return "";
  }
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& v, const std::string& where) {
  if (v.size() < 2 || v.front() != '"' || v.back() != '"') {
    return v;
  }
  std::string out;
  for (std::size_t i = 1; i + 1 < v.size(); ++i) {
    if (v[i] != '\\') {
      out.push_back(v[i]);
      continue;
    }
    if (i + 2 >= v.size()) {
      throw FormatError(where + ": dangling escape");
    }
    const char c = v[++i];
    switch (c) {
      case 'n':
        out.push_back('\n');
        break;
      case 't':
        out.push_back('\t');
        break;
      case '"':
      case '\\':
        out.push_back(c);
        break;
      default:
        throw FormatError(where + ": unknown escape \\" + std::string(1, c));
    }
  }
  return out;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse(const std::string& text, const std::string& origin) {
  KeyValueConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') {
      continue;
    }
    const auto eq = t.find('=');
    const std::string where = origin + ":" + std::to_string(lineno);
    if (eq == std::string::npos) {
      throw FormatError(where + ": expected 'key = value'");
    }
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) {
      throw FormatError(where + ": empty key");
    }
    cfg.values_[key] = unquote(trim(t.substr(eq + 1)), where);
  }
  return cfg;
}

KeyValueConfig KeyValueConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) {
    throw ConfigError("cannot read config file '" + path.string() + "'");
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

std::string KeyValueConfig::quote(const std::string& raw) {
  const bool plain = !raw.empty() && raw.find_first_of(" \t\n\"\\#") == std::string::npos;
  if (plain) {
    return raw;
  }
  std::string out = "\"";
  for (char c : raw) {
    switch (c) {
      case '\n':
        out += "\\n";
        break;
      case '\t':
        out += "\\t";
        break;
      case '"':
        out += "\\\"";
        break;
      case '\\':
        out += "\\\\";
        break;
      default:
        out.push_back(c);
    }
  }
  return out + "\"";
}

std::string KeyValueConfig::to_string() const {
  std::string out;
  for (const auto& [k, v] : values_) {
    out += k + " = " + quote(v) + "\n";
  }
  return out;
}

void KeyValueConfig::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) {
    throw Error("cannot write '" + path.string() + "'");
  }
  out << to_string();
}

std::string KeyValueConfig::get(const std::string& key) const {
  const auto it = values_.find(key);
  if (it == values_.end()) {
    throw ConfigError("missing config key '" + key + "'");
  }
  return it->second;
}

std::string KeyValueConfig::get(const std::string& key, const std::string& fallback) const {
  const auto it = values_.find(key);
  return it == values_.end() ? fallback : it->second;
}

long long KeyValueConfig::get_int(const std::string& key, long long fallback) const {
  if (!has(key)) {
    return fallback;
  }
  try {
    std::size_t used = 0;
    const long long v = std::stoll(get(key), &used);
    if (used != get(key).size()) {
      throw std::invalid_argument(key);
    }
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' is not an integer: '" + get(key) + "'");
  }
}

std::uint64_t KeyValueConfig::get_u64(const std::string& key, std::uint64_t fallback) const {
  if (!has(key)) {
    return fallback;
  }
  try {
    std::size_t used = 0;
    const unsigned long long v = std::stoull(get(key), &used);
    if (used != get(key).size() || get(key).front() == '-') {
      throw std::invalid_argument(key);
    }
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' is not an unsigned integer: '" + get(key) + "'");
  }
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  if (!has(key)) {
    return fallback;
  }
  try {
    std::size_t used = 0;
    const double v = std::stod(get(key), &used);
    if (used != get(key).size()) {
      throw std::invalid_argument(key);
    }
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "' is not a number: '" + get(key) + "'");
  }
}

std::vector<std::string> KeyValueConfig::split_list(const std::string& value) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream in(value);
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) {
      out.push_back(item);
    }
  }
  return out;
}

std::vector<std::string> KeyValueConfig::get_list(const std::string& key) const {
  return has(key) ? split_list(get(key)) : std::vector<std::string>{};
}

}  // namespace i2cl
