#pragma once

// Plain `key=value` text used for config files and checkpoint headers.
// Blank lines and lines starting with '#' are ignored; keys keep file order.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace vmed {

class KeyValues {
 public:
  static KeyValues parse(std::string_view text);
  static KeyValues load(const std::string& path);

  std::string to_string() const;

  void set(const std::string& key, std::string value);
  void set(const std::string& key, double value);
  void set(const std::string& key, std::size_t value);
  bool contains(const std::string& key) const;
  const std::string* find(const std::string& key) const;

  // Throws std::invalid_argument naming the key on a missing or malformed value.
  std::string get_string(const std::string& key) const;
  double get_double(const std::string& key) const;
  std::size_t get_size(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;

  const std::vector<std::pair<std::string, std::string>>& entries() const { return entries_; }

 private:
  std::vector<std::pair<std::string, std::string>> entries_;
};

// Shortest decimal form that round-trips to the same double.
std::string format_double(double value);

}  // namespace vmed
