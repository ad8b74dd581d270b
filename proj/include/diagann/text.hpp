#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace diagann::text {

/// A normalized token and the byte range of its raw whitespace-delimited
/// source word.
struct Token {
  std::string norm;
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Splits on ASCII whitespace, case-folds ASCII letters and strips ASCII
/// punctuation from each word. Words that are pure punctuation vanish.
std::vector<Token> tokenize(std::string_view s);

/// Normalized token strings only.
std::vector<std::string> normalize(std::string_view s);

std::string trim(std::string_view s);
std::string to_lower(std::string_view s);

/// Levenshtein distance over token sequences (unit costs).
std::size_t token_edit_distance(std::span<const std::string> a,
                                std::span<const std::string> b);

/// 1 - edit / max(|a|, |b|). Two empty sequences are identical (1.0); one
/// empty side gives 0.
double token_similarity(std::span<const std::string> a,
                        std::span<const std::string> b);

/// token_similarity over normalized text.
double text_similarity(std::string_view a, std::string_view b);

/// Longest common subsequence length over token sequences. Bit-parallel,
/// O(|a| * |b| / 64).
std::size_t lcs_length(std::span<const std::string> a,
                       std::span<const std::string> b);

}  // namespace diagann::text
