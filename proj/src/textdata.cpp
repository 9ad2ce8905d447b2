#include "pctk/textdata.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <map>
#include <sstream>

namespace textdata {

namespace {

// ---- UTF-8 ------------------------------------------------------------

bool is_continuation(unsigned char c) { return (c & 0xC0) == 0x80; }

// Appends the codepoints of `text` to `out` as UTF-8 substrings.
// Malformed sequences are a data defect, not something to paper over.
void split_codepoints(const std::string& text, std::vector<std::string>& out) {
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    unsigned char c = static_cast<unsigned char>(text[i]);
    std::size_t len = 0;
    if (c < 0x80) {
      len = 1;
    } else if ((c & 0xE0) == 0xC0) {
      len = 2;
    } else if ((c & 0xF0) == 0xE0) {
      len = 3;
    } else if ((c & 0xF8) == 0xF0) {
      len = 4;
    } else {
      throw pctk::DataError("invalid UTF-8 byte at offset " + std::to_string(i));
    }
    if (i + len > n)
      throw pctk::DataError("truncated UTF-8 sequence at offset " + std::to_string(i));
    for (std::size_t k = 1; k < len; ++k) {
      if (!is_continuation(static_cast<unsigned char>(text[i + k])))
        throw pctk::DataError("invalid UTF-8 continuation at offset " +
                              std::to_string(i + k));
    }
    out.emplace_back(text, i, len);
    i += len;
  }
}

bool is_space_byte(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

void split_words(const std::string& text, std::vector<std::string>& out) {
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    while (i < n && is_space_byte(text[i])) ++i;
    std::size_t start = i;
    while (i < n && !is_space_byte(text[i])) ++i;
    if (i > start) out.emplace_back(text, start, i - start);
  }
}

void tokenize(const std::string& text, Level level, std::vector<std::string>& out) {
  if (level == Level::Char)
    split_codepoints(text, out);
  else
    split_words(text, out);
}

// ---- \uXXXX escaping for the vocab file --------------------------------

bool needs_escape(unsigned char c) { return c < 0x20 || c == 0x7F || c == '\\'; }

std::string escape_token(const std::string& token) {
  std::string out;
  out.reserve(token.size());
  for (unsigned char c : token) {
    if (needs_escape(c)) {
      char buf[8];
      std::snprintf(buf, sizeof buf, "\\u%04X", static_cast<unsigned>(c));
      out += buf;
    } else {
      out.push_back(static_cast<char>(c));
    }
  }
  return out;
}

void append_utf8(std::string& out, unsigned long cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

std::string unescape_token(const std::string& s, const std::string& path) {
  std::string out;
  out.reserve(s.size());
  std::size_t i = 0;
  while (i < s.size()) {
    if (s[i] == '\\') {
      if (i + 6 > s.size() || s[i + 1] != 'u')
        throw pctk::DataError("bad escape in vocab file: " + path);
      unsigned long cp = 0;
      for (std::size_t k = i + 2; k < i + 6; ++k) {
        char c = s[k];
        cp <<= 4;
        if (c >= '0' && c <= '9')
          cp |= static_cast<unsigned long>(c - '0');
        else if (c >= 'a' && c <= 'f')
          cp |= static_cast<unsigned long>(c - 'a' + 10);
        else if (c >= 'A' && c <= 'F')
          cp |= static_cast<unsigned long>(c - 'A' + 10);
        else
          throw pctk::DataError("bad \\u escape in vocab file: " + path);
      }
      append_utf8(out, cp);
      i += 6;
    } else {
      out.push_back(s[i]);
      ++i;
    }
  }
  return out;
}

constexpr const char* kUnk = "<unk>";

}  // namespace

// ---- Level --------------------------------------------------------------

Level parse_level(const std::string& s) {
  if (s == "char") return Level::Char;
  if (s == "word") return Level::Word;
  throw pctk::ConfigError("unknown vocab level '" + s + "' (expected char|word)");
}

std::string level_str(Level level) {
  return level == Level::Char ? "char" : "word";
}

// ---- Vocab ----------------------------------------------------------------

Vocab Vocab::build(const std::string& text, Level level, int max_size) {
  if (max_size < 2)
    throw pctk::ConfigError("vocab max_size must be at least 2 (got " +
                            std::to_string(max_size) + ")");
  std::vector<std::string> tokens;
  tokenize(text, level, tokens);
  if (tokens.empty()) throw pctk::DataError("cannot build a vocab from an empty corpus");

  // std::map keeps ties in lexicographic order for free once counts match.
  std::map<std::string, long long> counts;
  for (const auto& t : tokens) ++counts[t];

  std::vector<std::pair<std::string, long long>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocab v;
  v.level = level;
  v.id_to_token.push_back(kUnk);
  const std::size_t keep =
      std::min(ranked.size(), static_cast<std::size_t>(max_size) - 1);
  for (std::size_t i = 0; i < keep; ++i) v.id_to_token.push_back(ranked[i].first);
  for (std::size_t id = 0; id < v.id_to_token.size(); ++id)
    v.token_to_id[v.id_to_token[id]] = static_cast<int>(id);
  return v;
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<std::string> tokens;
  tokenize(text, level, tokens);
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) {
    auto it = token_to_id.find(t);
    ids.push_back(it == token_to_id.end() ? 0 : it->second);
  }
  return ids;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    int id = ids[i];
    if (id < 0 || id >= size())
      throw pctk::DataError("decode: id " + std::to_string(id) +
                            " outside vocab of size " + std::to_string(size()));
    if (level == Level::Word && i > 0) out.push_back(' ');
    out += id_to_token[static_cast<std::size_t>(id)];
  }
  return out;
}

void Vocab::save(const std::string& path) const {
  std::ostringstream out;
  out << "# level=" << level_str(level) << "\n";
  for (std::size_t id = 0; id < id_to_token.size(); ++id)
    out << id << '\t' << escape_token(id_to_token[id]) << '\n';
  pctk::write_text_file(path, out.str());
}

Vocab Vocab::load(const std::string& path) {
  const std::string text = pctk::read_text_file(path);
  Vocab v;
  bool saw_header = false;
  std::size_t line_no = 0;
  for (const std::string& line : pctk::split(text, '\n')) {
    ++line_no;
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line == "# level=char")
        v.level = Level::Char;
      else if (line == "# level=word")
        v.level = Level::Word;
      else
        throw pctk::DataError("bad header in vocab file: " + path);
      saw_header = true;
      continue;
    }
    const std::size_t tab = line.find('\t');
    if (tab == std::string::npos)
      throw pctk::DataError("missing tab on line " + std::to_string(line_no) +
                            " of vocab file: " + path);
    const std::string id_text = line.substr(0, tab);
    int id = 0;
    try {
      std::size_t used = 0;
      id = std::stoi(id_text, &used);
      if (used != id_text.size()) throw std::invalid_argument(id_text);
    } catch (const std::exception&) {
      throw pctk::DataError("bad id '" + id_text + "' in vocab file: " + path);
    }
    if (id != static_cast<int>(v.id_to_token.size()))
      throw pctk::DataError("non-contiguous ids in vocab file: " + path);
    v.id_to_token.push_back(unescape_token(line.substr(tab + 1), path));
  }
  if (!saw_header) throw pctk::DataError("missing level header in vocab file: " + path);
  if (v.id_to_token.empty() || v.id_to_token[0] != kUnk)
    throw pctk::DataError("vocab file must start with id 0 = <unk>: " + path);
  for (std::size_t id = 0; id < v.id_to_token.size(); ++id) {
    if (!v.token_to_id.emplace(v.id_to_token[id], static_cast<int>(id)).second)
      throw pctk::DataError("duplicate token in vocab file: " + path);
  }
  return v;
}

// ---- splitting ------------------------------------------------------------

std::pair<std::string, std::string> split_train_valid(const std::string& text,
                                                      double train_frac) {
  if (!(train_frac > 0.0) || !(train_frac < 1.0))
    throw pctk::ConfigError("train_frac must be in (0, 1)");
  std::size_t cut =
      static_cast<std::size_t>(static_cast<double>(text.size()) * train_frac);
  // Never split a codepoint in half.
  while (cut < text.size() && is_continuation(static_cast<unsigned char>(text[cut])))
    ++cut;
  return {text.substr(0, cut), text.substr(cut)};
}

// ---- BatchStream ------------------------------------------------------------

BatchStream::BatchStream(std::vector<int> ids, int batch, int seq)
    : ids_(std::move(ids)), batch_(batch), seq_(seq) {
  if (batch_ < 1 || seq_ < 1)
    throw pctk::ConfigError("batch and seq must be positive");
  const std::size_t need = static_cast<std::size_t>(batch_) *
                           (static_cast<std::size_t>(seq_) + 1);
  if (ids_.size() < need)
    throw pctk::DataError("token stream too short: have " +
                          std::to_string(ids_.size()) + ", need at least " +
                          std::to_string(need) + " for batch " +
                          std::to_string(batch_) + ", seq " + std::to_string(seq_));
  lane_len_ = ids_.size() / static_cast<std::size_t>(batch_);
  // The final position of each lane only ever serves as a target.
  windows_ = static_cast<int>((lane_len_ - 1) / static_cast<std::size_t>(seq_));
}

Batch BatchStream::window(int i) const {
  if (i < 0 || i >= windows_)
    throw pctk::DomainError("window index " + std::to_string(i) +
                            " outside [0, " + std::to_string(windows_) + ")");
  Batch b;
  b.batch = batch_;
  b.seq = seq_;
  b.inputs.reserve(tokens_per_window());
  b.targets.reserve(tokens_per_window());
  for (int lane = 0; lane < batch_; ++lane) {
    const std::size_t base = static_cast<std::size_t>(lane) * lane_len_ +
                             static_cast<std::size_t>(i) * static_cast<std::size_t>(seq_);
    for (int k = 0; k < seq_; ++k) {
      b.inputs.push_back(ids_[base + static_cast<std::size_t>(k)]);
      b.targets.push_back(ids_[base + static_cast<std::size_t>(k) + 1]);
    }
  }
  return b;
}

}  // namespace textdata
