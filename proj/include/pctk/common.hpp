#pragma once
//
// Shared error types and small utilities used across the toolkit.
//

#include <cstdint>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace pctk {

// Bad configuration, bad CLI usage, contract violations by the caller.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Value outside the mathematical domain of an operation.
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Tensor / state shape mismatch.
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed or unusable input data (corpus, vocab files, checkpoints).
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values or other numerical failure at run time.
struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// A multistep method was asked to step without enough stored derivatives.
struct InsufficientHistoryError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---- small utilities -------------------------------------------------

inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open file for reading: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open file for writing: " + path);
  out << text;
  if (!out) throw DataError("failed writing file: " + path);
}

inline std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::string cur;
  for (char c : s) {
    if (c == sep) {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  parts.push_back(cur);
  return parts;
}

}  // namespace pctk
