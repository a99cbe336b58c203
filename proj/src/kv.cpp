#include "efficientspeech/kv.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "efficientspeech/errors.hpp"

namespace es {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace

std::string format_double(double v) {
  // %.17g round-trips every double.
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

KeyValues KeyValues::parse(const std::string& text, const std::string& source) {
  KeyValues kv;
  kv.source_ = source;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw DataError(source + ":" + std::to_string(lineno) + ": expected key=value, got '" + t + "'");
    }
    const std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw DataError(source + ":" + std::to_string(lineno) + ": empty key");
    if (kv.values_.count(key)) {
      throw DataError(source + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
    }
    kv.set(key, trim(t.substr(eq + 1)));
    kv.lines_[key] = lineno;
  }
  return kv;
}

KeyValues KeyValues::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw DataError("cannot read config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse(ss.str(), path);
}

const std::string& KeyValues::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw DataError(source_ + ": missing key '" + key + "'");
  return it->second;
}

double KeyValues::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    std::size_t used = 0;
    double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    auto line = lines_.count(key) ? ":" + std::to_string(lines_.at(key)) : std::string();
    throw DataError(source_ + line + ": key '" + key + "' expects a number, got '" + v + "'");
  }
}

long long KeyValues::get_int(const std::string& key) const {
  const std::string& v = get(key);
  long long out = 0;
  auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) {
    auto line = lines_.count(key) ? ":" + std::to_string(lines_.at(key)) : std::string();
    throw DataError(source_ + line + ": key '" + key + "' expects an integer, got '" + v + "'");
  }
  return out;
}

std::size_t KeyValues::get_size(const std::string& key) const {
  const long long v = get_int(key);
  if (v < 0) throw DataError(source_ + ": key '" + key + "' must be non-negative");
  return static_cast<std::size_t>(v);
}

void KeyValues::set(const std::string& key, const std::string& value) {
  if (!values_.count(key)) order_.push_back(key);
  values_[key] = value;
}

void KeyValues::set(const std::string& key, double value) { set(key, format_double(value)); }

void KeyValues::set(const std::string& key, long long value) { set(key, std::to_string(value)); }

void KeyValues::require(const std::vector<std::string>& required) const {
  for (const auto& k : required) {
    if (!has(k)) throw DataError(source_ + ": missing key '" + k + "'");
  }
}

void KeyValues::reject_unknown(const std::set<std::string>& allowed) const {
  for (const auto& k : order_) {
    if (!allowed.count(k)) {
      auto line = lines_.count(k) ? ":" + std::to_string(lines_.at(k)) : std::string();
      throw DataError(source_ + line + ": unknown key '" + k + "'");
    }
  }
}

std::string KeyValues::to_text() const {
  std::string out;
  for (const auto& k : order_) out += k + "=" + values_.at(k) + "\n";
  return out;
}

}  // namespace es
