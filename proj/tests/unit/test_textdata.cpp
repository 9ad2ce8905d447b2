#include <doctest.h>

#include <cstdio>
#include <set>
#include <string>
#include <vector>

#include "pctk/common.hpp"
#include "pctk/textdata.hpp"

using textdata::Batch;
using textdata::BatchStream;
using textdata::Level;
using textdata::Vocab;

namespace {

std::string temp_path(const char* name) {
  return std::string("./") + name;
}

}  // namespace

// ==== vocab construction ====================================================

TEST_CASE("char vocab over 'abab' has unk plus two tokens") {
  Vocab v = Vocab::build("abab", Level::Char, 1000);
  CHECK(v.size() == 3);
  CHECK(v.id_to_token[0] == "<unk>");
  // a and b tie on frequency; lexicographic order breaks the tie.
  CHECK(v.id_to_token[1] == "a");
  CHECK(v.id_to_token[2] == "b");
  CHECK(v.encode("abab") == std::vector<int>{1, 2, 1, 2});
  CHECK(v.decode(v.encode("abab")) == "abab");
}

TEST_CASE("word vocab with max_size 2 keeps only the most frequent word") {
  Vocab v = Vocab::build("a b a", Level::Word, 2);
  CHECK(v.size() == 2);
  CHECK(v.id_to_token[1] == "a");
  CHECK(v.encode("a b a") == std::vector<int>{1, 0, 1});
  CHECK(v.decode({1, 0, 1}) == "a <unk> a");
}

TEST_CASE("frequency ranks ids, lexicographic order breaks ties") {
  // e:3  b:2  d:2  a:1  c:1
  Vocab v = Vocab::build("eeebbdd ac", Level::Char, 1000);
  REQUIRE(v.size() == 7);  // unk, e, b, d, space|a|c by count then lex
  CHECK(v.id_to_token[1] == "e");
  CHECK(v.id_to_token[2] == "b");
  CHECK(v.id_to_token[3] == "d");
  CHECK(v.id_to_token[4] == " ");
  CHECK(v.id_to_token[5] == "a");
  CHECK(v.id_to_token[6] == "c");
}

TEST_CASE("char vocab cap drops the least frequent characters to unk") {
  Vocab v = Vocab::build("cccbba", Level::Char, 3);
  CHECK(v.size() == 3);
  CHECK(v.id_to_token[1] == "c");
  CHECK(v.id_to_token[2] == "b");
  CHECK(v.encode("abc") == std::vector<int>{0, 2, 1});
}

TEST_CASE("vocab construction is deterministic") {
  const std::string corpus = "the quick brown fox jumps over the lazy dog";
  Vocab a = Vocab::build(corpus, Level::Word, 1000);
  Vocab b = Vocab::build(corpus, Level::Word, 1000);
  CHECK(a.id_to_token == b.id_to_token);
}

TEST_CASE("multi-byte codepoints are single char tokens") {
  const std::string text = "h\xC3\xA9llo \xF0\x9F\x98\x80";  // héllo + emoji
  Vocab v = Vocab::build(text, Level::Char, 1000);
  CHECK(v.token_to_id.count("\xC3\xA9") == 1);
  CHECK(v.token_to_id.count("\xF0\x9F\x98\x80") == 1);
  CHECK(v.decode(v.encode(text)) == text);
}

TEST_CASE("vocab build rejects bad input") {
  CHECK_THROWS_AS(Vocab::build("", Level::Char, 100), pctk::DataError);
  CHECK_THROWS_AS(Vocab::build("  \n\t ", Level::Word, 100), pctk::DataError);
  CHECK_THROWS_AS(Vocab::build("ok", Level::Char, 1), pctk::ConfigError);
  CHECK_THROWS_AS(Vocab::build("\xFF", Level::Char, 100), pctk::DataError);
  CHECK_THROWS_AS(Vocab::build("\xC3", Level::Char, 100), pctk::DataError);
}

TEST_CASE("word-level encode maps unknown words to id 0") {
  Vocab v = Vocab::build("alpha beta alpha", Level::Word, 1000);
  std::vector<int> ids = v.encode("alpha gamma beta");
  REQUIRE(ids.size() == 3);
  CHECK(ids[0] == v.token_to_id.at("alpha"));
  CHECK(ids[1] == 0);
  CHECK(ids[2] == v.token_to_id.at("beta"));
}

TEST_CASE("decode rejects out-of-range ids") {
  Vocab v = Vocab::build("ab", Level::Char, 1000);
  CHECK_THROWS_AS(v.decode({99}), pctk::DataError);
  CHECK_THROWS_AS(v.decode({-1}), pctk::DataError);
}

// ==== vocab file round trip ==================================================

TEST_CASE("vocab save/load round-trips, including escaped control bytes") {
  const std::string text = "line one\nline two\ttabbed \\ backslash";
  Vocab v = Vocab::build(text, Level::Char, 1000);
  REQUIRE(v.token_to_id.count("\n") == 1);
  REQUIRE(v.token_to_id.count("\t") == 1);
  REQUIRE(v.token_to_id.count("\\") == 1);

  const std::string path = temp_path("vocab_roundtrip.tsv");
  v.save(path);
  Vocab r = Vocab::load(path);
  CHECK(r.level == v.level);
  CHECK(r.id_to_token == v.id_to_token);
  CHECK(r.decode(r.encode(text)) == text);

  // The file itself must hold the escapes, not raw control bytes.
  const std::string raw = pctk::read_text_file(path);
  CHECK(raw.find("\\u000A") != std::string::npos);
  CHECK(raw.find("\\u0009") != std::string::npos);
  CHECK(raw.find("\\u005C") != std::string::npos);
  std::remove(path.c_str());
}

TEST_CASE("vocab load rejects malformed files") {
  const std::string path = temp_path("vocab_bad.tsv");

  pctk::write_text_file(path, "0\t<unk>\n1\ta\n");
  CHECK_THROWS_AS(Vocab::load(path), pctk::DataError);  // no header

  pctk::write_text_file(path, "# level=char\n0 <unk>\n");
  CHECK_THROWS_AS(Vocab::load(path), pctk::DataError);  // no tab

  pctk::write_text_file(path, "# level=char\n0\t<unk>\n2\ta\n");
  CHECK_THROWS_AS(Vocab::load(path), pctk::DataError);  // id gap

  pctk::write_text_file(path, "# level=char\n0\ta\n");
  CHECK_THROWS_AS(Vocab::load(path), pctk::DataError);  // id 0 not <unk>

  pctk::write_text_file(path, "# level=char\n0\t<unk>\n1\t\\x41\n");
  CHECK_THROWS_AS(Vocab::load(path), pctk::DataError);  // bad escape

  std::remove(path.c_str());
}

TEST_CASE("word vocab keeps its level through save/load") {
  Vocab v = Vocab::build("aa bb aa", Level::Word, 1000);
  const std::string path = temp_path("vocab_word.tsv");
  v.save(path);
  Vocab r = Vocab::load(path);
  CHECK(r.level == Level::Word);
  CHECK(r.encode("aa cc") == std::vector<int>{1, 0});
  std::remove(path.c_str());
}

// ==== train/valid split =====================================================

TEST_CASE("split_train_valid cuts at the 90% byte offset") {
  std::string text(100, 'x');
  auto [train, valid] = textdata::split_train_valid(text);
  CHECK(train.size() == 90);
  CHECK(valid.size() == 10);
  CHECK(train + valid == text);
}

TEST_CASE("split_train_valid never splits a codepoint") {
  // 89 ASCII bytes then a 2-byte codepoint straddling offset 90.
  std::string text(89, 'x');
  text += "\xC3\xA9";
  text += std::string(9, 'y');
  auto [train, valid] = textdata::split_train_valid(text);
  CHECK(train + valid == text);
  CHECK_NOTHROW(Vocab::build(train, Level::Char, 1000));
  CHECK_NOTHROW(Vocab::build(valid, Level::Char, 1000));
}

TEST_CASE("split_train_valid honours other fractions and rejects bad ones") {
  std::string text(10, 'a');
  auto [train, valid] = textdata::split_train_valid(text, 0.5);
  CHECK(train.size() == 5);
  CHECK(valid.size() == 5);
  CHECK_THROWS_AS(textdata::split_train_valid(text, 0.0), pctk::ConfigError);
  CHECK_THROWS_AS(textdata::split_train_valid(text, 1.0), pctk::ConfigError);
}

// ==== batching ===============================================================

TEST_CASE("10 tokens, batch 1, seq 4 gives two windows and drops two tokens") {
  std::vector<int> ids{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  BatchStream s(ids, 1, 4);
  REQUIRE(s.num_windows() == 2);

  Batch w0 = s.window(0);
  CHECK(w0.inputs == std::vector<int>{0, 1, 2, 3});
  CHECK(w0.targets == std::vector<int>{1, 2, 3, 4});

  Batch w1 = s.window(1);
  CHECK(w1.inputs == std::vector<int>{4, 5, 6, 7});
  CHECK(w1.targets == std::vector<int>{5, 6, 7, 8});

  // Tokens 8 and 9 never appear as inputs.
  std::set<int> seen;
  for (int i = 0; i < s.num_windows(); ++i)
    for (int id : s.window(i).inputs) seen.insert(id);
  CHECK(seen.size() == 8);
  CHECK(seen.count(8) == 0);
  CHECK(seen.count(9) == 0);
}

TEST_CASE("a stream of exactly batch*(seq+1) tokens yields one window") {
  std::vector<int> ids{0, 1, 2, 3, 4, 5, 6, 7};  // batch 2, seq 3 -> need 8
  BatchStream s(ids, 2, 3);
  REQUIRE(s.num_windows() == 1);
  Batch w = s.window(0);
  CHECK(w.inputs == std::vector<int>{0, 1, 2, 4, 5, 6});
  CHECK(w.targets == std::vector<int>{1, 2, 3, 5, 6, 7});
}

TEST_CASE("lanes are contiguous stream segments") {
  std::vector<int> ids{0, 1, 2, 3, 4, 5, 6, 7, 8, 9};
  BatchStream s(ids, 2, 2);  // lane length 5, two windows
  REQUIRE(s.num_windows() == 2);

  Batch w0 = s.window(0);
  CHECK(w0.inputs == std::vector<int>{0, 1, 5, 6});
  CHECK(w0.targets == std::vector<int>{1, 2, 6, 7});

  Batch w1 = s.window(1);
  CHECK(w1.inputs == std::vector<int>{2, 3, 7, 8});
  CHECK(w1.targets == std::vector<int>{3, 4, 8, 9});
}

TEST_CASE("every target is the stream successor of its input") {
  std::vector<int> ids;
  for (int i = 0; i < 101; ++i) ids.push_back(i);
  BatchStream s(ids, 4, 7);
  for (int w = 0; w < s.num_windows(); ++w) {
    Batch b = s.window(w);
    REQUIRE(b.inputs.size() == s.tokens_per_window());
    for (std::size_t k = 0; k < b.inputs.size(); ++k)
      CHECK(b.targets[k] == b.inputs[k] + 1);
  }
}

TEST_CASE("windows never overlap and cover distinct positions") {
  std::vector<int> ids;
  for (int i = 0; i < 64; ++i) ids.push_back(i);
  BatchStream s(ids, 2, 5);
  std::set<int> seen;
  for (int w = 0; w < s.num_windows(); ++w)
    for (int id : s.window(w).inputs) {
      CHECK(seen.insert(id).second);  // an input position appears once
    }
}

TEST_CASE("batch stream rejects short streams and bad indices") {
  std::vector<int> ids{0, 1, 2, 3, 4, 5, 6};
  CHECK_THROWS_AS(BatchStream(ids, 2, 3), pctk::DataError);  // need 8
  CHECK_THROWS_AS(BatchStream(ids, 0, 3), pctk::ConfigError);
  CHECK_THROWS_AS(BatchStream(ids, 2, 0), pctk::ConfigError);

  BatchStream s(ids, 1, 3);
  REQUIRE(s.num_windows() == 2);
  CHECK_THROWS_AS(s.window(-1), pctk::DomainError);
  CHECK_THROWS_AS(s.window(2), pctk::DomainError);
}

// ==== end-to-end text pipeline ==============================================

TEST_CASE("corpus to batches pipeline stays consistent") {
  const std::string corpus =
      "it was the best of times, it was the worst of times, "
      "it was the age of wisdom, it was the age of foolishness";
  auto [train, valid] = textdata::split_train_valid(corpus);
  Vocab v = Vocab::build(train, Level::Char, 1000);
  std::vector<int> ids = v.encode(train);
  BatchStream s(ids, 2, 8);
  REQUIRE(s.num_windows() >= 1);
  Batch b = s.window(0);
  for (int id : b.inputs) {
    CHECK(id >= 0);
    CHECK(id < v.size());
  }
  // Valid text encodes too (possibly with unks), using the train vocab.
  CHECK_NOTHROW(v.encode(valid));
}
