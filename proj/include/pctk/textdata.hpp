#pragma once
//
// textdata — corpus ingestion, tokenization, and contiguous batching.
//
// Char-level tokens are UTF-8 codepoints; word-level tokens are whitespace
// runsplits. Id 0 is always <unk>. The batcher splits the id stream into
// `batch` contiguous lanes and walks non-overlapping windows of length seq;
// targets are the stream successors of the inputs, so the last target of a
// window is the first input of the next one.
//

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "pctk/common.hpp"

namespace textdata {

enum class Level { Char, Word };

Level parse_level(const std::string& s);  // "char" | "word"
std::string level_str(Level level);

struct Vocab {
  Level level = Level::Char;
  std::vector<std::string> id_to_token;  // [0] = "<unk>"
  std::unordered_map<std::string, int> token_to_id;

  int size() const { return static_cast<int>(id_to_token.size()); }

  // Most frequent tokens win; ties break lexicographically. max_size counts
  // the <unk> slot. Empty corpus -> DataError.
  static Vocab build(const std::string& text, Level level, int max_size);

  std::vector<int> encode(const std::string& text) const;
  // Char level concatenates tokens; word level joins with single spaces.
  std::string decode(const std::vector<int>& ids) const;

  // Two-column file: id<TAB>token, control bytes and '\' escaped as \uXXXX.
  void save(const std::string& path) const;
  static Vocab load(const std::string& path);
};

// Deterministic 90/10 (by default) split at a byte offset advanced to the
// next UTF-8 codepoint boundary.
std::pair<std::string, std::string> split_train_valid(const std::string& text,
                                                      double train_frac = 0.9);

struct Batch {
  int batch = 0;
  int seq = 0;
  std::vector<int> inputs;   // [batch*seq], row-major
  std::vector<int> targets;  // stream successor of each input
};

class BatchStream {
 public:
  // Requires ids.size() >= batch*(seq+1).
  BatchStream(std::vector<int> ids, int batch, int seq);

  int num_windows() const { return windows_; }
  int batch_size() const { return batch_; }
  int seq_len() const { return seq_; }
  std::size_t tokens_per_window() const {
    return static_cast<std::size_t>(batch_) * static_cast<std::size_t>(seq_);
  }

  Batch window(int i) const;  // random access, i in [0, num_windows())

 private:
  std::vector<int> ids_;
  int batch_;
  int seq_;
  std::size_t lane_len_;
  int windows_;
};

}  // namespace textdata
