#include <gtest/gtest.h>

#include "diagann/text.hpp"
#include "oracles.hpp"

using namespace diagann;

namespace {

std::vector<std::string> norms(std::string_view s) { return text::normalize(s); }

}  // namespace

TEST(Text, TokenizeFoldsCaseAndStripsPunctuation) {
  const auto t = text::tokenize("  Hello, WORLD!  it's -- fine.");
  ASSERT_EQ(t.size(), 4u);
  EXPECT_EQ(t[0].norm, "hello");
  EXPECT_EQ(t[1].norm, "world");
  EXPECT_EQ(t[2].norm, "its");
  EXPECT_EQ(t[3].norm, "fine");
  EXPECT_EQ(t[0].begin, 2u);
  EXPECT_EQ(t[0].end, 8u);
}

TEST(Text, OffsetsCoverRawToken) {
  const std::string s = "ab  \"cd\"\tef";
  for (const auto& tok : text::tokenize(s)) {
    const std::string raw = s.substr(tok.begin, tok.end - tok.begin);
    EXPECT_EQ(raw.find_first_of(" \t"), std::string::npos);
  }
}

TEST(Text, NonAsciiBytesKept) {
  const auto n = norms("Caf\xC3\xA9 NA\xC3\x8FVE");
  ASSERT_EQ(n.size(), 2u);
  EXPECT_EQ(n[0], "caf\xC3\xA9");
  EXPECT_EQ(n[1], "na\xC3\x8Fve");
}

TEST(Text, EditDistanceMatchesOracle) {
  const std::vector<std::string> vocab = {"a", "b", "c", "d"};
  for (int i = 0; i < 300; ++i) {
    const auto a = norms(oracle::random_sentence(vocab, oracle::uniform(0, 8)));
    const auto b = norms(oracle::random_sentence(vocab, oracle::uniform(0, 8)));
    EXPECT_EQ(text::token_edit_distance(a, b), oracle::levenshtein(a, b));
    EXPECT_DOUBLE_EQ(text::token_similarity(a, b), oracle::similarity(a, b));
  }
}

TEST(Text, SimilarityOfEmptyPair) {
  EXPECT_EQ(text::text_similarity("", ""), 1.0);
  EXPECT_EQ(text::text_similarity("word", ""), 0.0);
}

TEST(Text, LcsMatchesFullTableOracle) {
  const std::vector<std::string> vocab = {"x", "y", "z", "w", "v"};
  for (int i = 0; i < 400; ++i) {
    const auto a = norms(oracle::random_sentence(vocab, oracle::uniform(0, 40)));
    const auto b = norms(oracle::random_sentence(vocab, oracle::uniform(0, 300)));
    ASSERT_EQ(text::lcs_length(a, b), oracle::lcs_table(a, b));
  }
}

TEST(Text, LcsMatchesSubsequenceEnumeration) {
  const std::vector<std::string> vocab = {"p", "q", "r"};
  for (int i = 0; i < 200; ++i) {
    const auto a = norms(oracle::random_sentence(vocab, oracle::uniform(0, 10)));
    const auto b = norms(oracle::random_sentence(vocab, oracle::uniform(0, 12)));
    ASSERT_EQ(text::lcs_length(a, b), oracle::lcs_enumerate(a, b));
  }
}

TEST(Text, LcsAcrossWordBoundaries) {
  // more than 64 and 128 distinct positions exercise multi-word carries
  std::vector<std::string> a, b;
  for (int i = 0; i < 200; ++i) a.push_back(std::to_string(i % 7));
  for (int i = 0; i < 333; ++i) b.push_back(std::to_string((i * 3) % 7));
  EXPECT_EQ(text::lcs_length(a, b), oracle::lcs_table(a, b));
}
