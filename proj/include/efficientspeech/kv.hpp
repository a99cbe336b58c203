#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

namespace es {

// Flat `key=value` text used by configs and the archive's config blob. Lines starting with
// '#' and blank lines are ignored; whitespace around keys and values is trimmed.
class KeyValues {
 public:
  static KeyValues parse(const std::string& text, const std::string& source = "<text>");
  static KeyValues load(const std::string& path);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  double get_double(const std::string& key) const;
  long long get_int(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;

  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, double value);
  void set(const std::string& key, long long value);
  void set(const std::string& key, std::size_t value) { set(key, static_cast<long long>(value)); }
  void set(const std::string& key, int value) { set(key, static_cast<long long>(value)); }

  // Throws DataError naming the first key from `required` that is absent, or the first present
  // key not in `allowed` when `allowed` is non-empty.
  void require(const std::vector<std::string>& required) const;
  void reject_unknown(const std::set<std::string>& allowed) const;

  // Serialized in insertion order so output is stable.
  std::string to_text() const;

  const std::vector<std::string>& keys() const { return order_; }

 private:
  std::string source_;
  std::map<std::string, std::string> values_;
  std::map<std::string, int> lines_;
  std::vector<std::string> order_;
};

std::string format_double(double v);

}  // namespace es
