#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace latf {

// Scans text-bearing files (.py, .txt, .md) under the given roots and
// collects distinct alphabetic tokens, lowercased, within the length
// band. Paths are visited in sorted order so the result is stable for a
// given tree. Useful where no system wordlist is installed.
std::vector<std::string> harvest_words(const std::vector<std::string>& roots,
                                       int min_len = 5, int max_len = 15,
                                       size_t file_limit = 0);

// Deterministic pseudo-word generator (syllable chains with common
// affixes); fallback corpus when no real text is available.
std::vector<std::string> synthesize_words(size_t count, uint64_t seed,
                                          int min_len = 5, int max_len = 15);

}  // namespace latf
