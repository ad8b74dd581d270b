#include "diagann/text.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstdint>
#include <unordered_map>

namespace diagann::text {
namespace {

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' ||
         c == '\v';
}

bool is_punct(unsigned char c) { return c < 0x80 && std::ispunct(c); }

}  // namespace

std::vector<Token> tokenize(std::string_view s) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && is_space(static_cast<unsigned char>(s[i]))) ++i;
    const std::size_t begin = i;
    while (i < s.size() && !is_space(static_cast<unsigned char>(s[i]))) ++i;
    if (begin == i) break;
    std::string norm;
    norm.reserve(i - begin);
    for (std::size_t k = begin; k < i; ++k) {
      const auto c = static_cast<unsigned char>(s[k]);
      if (is_punct(c)) continue;
      norm.push_back(c < 0x80 ? static_cast<char>(std::tolower(c))
                              : static_cast<char>(c));
    }
    if (!norm.empty()) out.push_back({std::move(norm), begin, i});
  }
  return out;
}

std::vector<std::string> normalize(std::string_view s) {
  std::vector<std::string> out;
  for (auto& t : tokenize(s)) out.push_back(std::move(t.norm));
  return out;
}

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && is_space(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && is_space(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string to_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) {
    const auto u = static_cast<unsigned char>(c);
    if (u < 0x80) c = static_cast<char>(std::tolower(u));
  }
  return out;
}

std::size_t token_edit_distance(std::span<const std::string> a,
                                std::span<const std::string> b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double token_similarity(std::span<const std::string> a,
                        std::span<const std::string> b) {
  const std::size_t longest = std::max(a.size(), b.size());
  if (longest == 0) return 1.0;
  return 1.0 - static_cast<double>(token_edit_distance(a, b)) /
                   static_cast<double>(longest);
}

double text_similarity(std::string_view a, std::string_view b) {
  const auto ta = normalize(a);
  const auto tb = normalize(b);
  return token_similarity(ta, tb);
}

std::size_t lcs_length(std::span<const std::string> a,
                       std::span<const std::string> b) {
  if (a.empty() || b.empty()) return 0;
  // Hyyro's bit-vector LCS: V starts all ones; each matched column clears
  // one bit. The answer is the number of zero bits among |a| positions.
  const std::size_t words = (a.size() + 63) / 64;
  std::unordered_map<std::string_view, std::vector<std::uint64_t>> masks;
  for (std::size_t i = 0; i < a.size(); ++i) {
    auto& m = masks[a[i]];
    if (m.empty()) m.assign(words, 0);
    m[i / 64] |= std::uint64_t{1} << (i % 64);
  }
  std::vector<std::uint64_t> v(words, ~std::uint64_t{0});
  for (const auto& tok : b) {
    const auto it = masks.find(tok);
    if (it == masks.end()) continue;
    const auto& m = it->second;
    unsigned carry = 0, borrow = 0;
    for (std::size_t w = 0; w < words; ++w) {
      const std::uint64_t x = v[w];
      const std::uint64_t u = x & m[w];
      const unsigned __int128 sum =
          static_cast<unsigned __int128>(x) + u + carry;
      carry = static_cast<unsigned>(sum >> 64);
      const std::uint64_t diff = x - u - borrow;
      borrow = (x < u || (x - u) < borrow) ? 1 : 0;
      v[w] = static_cast<std::uint64_t>(sum) | diff;
    }
  }
  std::size_t zeros = 0;
  for (std::size_t w = 0; w < words; ++w) {
    std::uint64_t x = ~v[w];
    if (w + 1 == words && a.size() % 64 != 0)
      x &= (std::uint64_t{1} << (a.size() % 64)) - 1;
    zeros += static_cast<std::size_t>(std::popcount(x));
  }
  return zeros;
}

}  // namespace diagann::text
