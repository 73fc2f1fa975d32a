#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "latf/data.hpp"
#include "latf/rng.hpp"

namespace latf {

struct InfillOptions {
  double mask_p = 0.4;
  int min_len = 5;
  int max_len = 15;
  // target split sizes; scaled down proportionally when the filtered
  // corpus is smaller than their sum
  int train_n = 201000;
  int valid_n = 10000;
  int test_n = 10000;
};

// masked form of a word: each character independently replaced by '-'
std::string mask_word(const std::string& word, double mask_p, Rng& rng);

// Filters to purely alphabetic words within the length band (lowercased,
// deduplicated), then builds one masked example per word and slices
// word-disjoint splits. Vocabulary: #, $, '-', a..z (29 symbols).
Datasets gen_infill_dataset(const std::vector<std::string>& raw_words,
                            const InfillOptions& opt, uint64_t seed);

std::vector<std::string> read_wordlist(const std::string& path);

// filter diagnostics (how much of the raw wordlist survived)
struct InfillStats {
  size_t raw_words = 0;
  size_t kept_words = 0;
  double retention() const {
    return raw_words ? static_cast<double>(kept_words) / static_cast<double>(raw_words)
                     : 0.0;
  }
};

Datasets gen_infill_dataset(const std::vector<std::string>& raw_words,
                            const InfillOptions& opt, uint64_t seed,
                            InfillStats* stats);

}  // namespace latf
