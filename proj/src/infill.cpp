#include "latf/infill.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

namespace latf {

std::string mask_word(const std::string& word, double mask_p, Rng& rng) {
  std::string out = word;
  for (char& c : out) {
    if (rng.real01() < mask_p) c = '-';
  }
  return out;
}

std::vector<std::string> read_wordlist(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open wordlist " + path);
  std::vector<std::string> words;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) words.push_back(line);
  }
  return words;
}

Datasets gen_infill_dataset(const std::vector<std::string>& raw_words,
                            const InfillOptions& opt, uint64_t seed) {
  return gen_infill_dataset(raw_words, opt, seed, nullptr);
}

Datasets gen_infill_dataset(const std::vector<std::string>& raw_words,
                            const InfillOptions& opt, uint64_t seed,
                            InfillStats* stats) {
  if (opt.mask_p < 0.0 || opt.mask_p > 1.0)
    throw std::invalid_argument("gen_infill_dataset: mask_p must lie in [0,1]");
  if (opt.min_len < 1 || opt.max_len < opt.min_len)
    throw std::invalid_argument("gen_infill_dataset: bad length band");

  std::vector<std::string> words;
  std::unordered_set<std::string> seen;
  for (const std::string& raw : raw_words) {
    if (static_cast<int>(raw.size()) < opt.min_len ||
        static_cast<int>(raw.size()) > opt.max_len)
      continue;
    bool alpha = true;
    std::string w;
    w.reserve(raw.size());
    for (char c : raw) {
      if (!std::isalpha(static_cast<unsigned char>(c))) {
        alpha = false;
        break;
      }
      w.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    }
    if (!alpha) continue;
    if (seen.insert(w).second) words.push_back(std::move(w));
  }
  if (stats) {
    stats->raw_words = raw_words.size();
    stats->kept_words = words.size();
  }
  if (words.empty())
    throw std::invalid_argument("gen_infill_dataset: no words survive the filter");

  Rng split_rng(derive_seed(seed, {tag("infill_split")}));
  split_rng.shuffle(words);

  int64_t want_total = static_cast<int64_t>(opt.train_n) + opt.valid_n + opt.test_n;
  int64_t have = static_cast<int64_t>(words.size());
  int64_t train_n = opt.train_n, valid_n = opt.valid_n, test_n = opt.test_n;
  if (have < want_total) {
    // preserve the requested ratio on a smaller corpus
    valid_n = std::max<int64_t>(1, have * opt.valid_n / want_total);
    test_n = std::max<int64_t>(1, have * opt.test_n / want_total);
    train_n = have - valid_n - test_n;
    if (train_n < 1)
      throw std::invalid_argument("gen_infill_dataset: corpus too small to split");
  }

  Datasets out;
  std::vector<std::string> letters;
  letters.push_back("-");
  for (char c = 'a'; c <= 'z'; ++c) letters.push_back(std::string(1, c));
  out.vocab = Vocab::for_symbols(letters);

  auto make_example = [&](const std::string& w, uint64_t index) {
    Rng rng(derive_seed(seed, {tag("mask"), index}));
    std::string masked = mask_word(w, opt.mask_p, rng);
    Example ex;
    ex.source.reserve(w.size());
    ex.target.reserve(w.size());
    for (char c : masked) ex.source.push_back(out.vocab.id(std::string(1, c)));
    for (char c : w) ex.target.push_back(out.vocab.id(std::string(1, c)));
    return ex;
  };

  int64_t idx = 0;
  for (; idx < train_n && idx < have; ++idx)
    out.train.examples.push_back(make_example(words[static_cast<size_t>(idx)],
                                              static_cast<uint64_t>(idx)));
  for (int64_t stop = idx + valid_n; idx < stop && idx < have; ++idx)
    out.valid.examples.push_back(make_example(words[static_cast<size_t>(idx)],
                                              static_cast<uint64_t>(idx)));
  for (int64_t stop = idx + test_n; idx < stop && idx < have; ++idx)
    out.test.examples.push_back(make_example(words[static_cast<size_t>(idx)],
                                             static_cast<uint64_t>(idx)));
  return out;
}

}  // namespace latf
