#include "latf/words.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>

#include "latf/rng.hpp"

namespace fs = std::filesystem;

namespace latf {

std::vector<std::string> harvest_words(const std::vector<std::string>& roots,
                                       int min_len, int max_len,
                                       size_t file_limit) {
  std::vector<std::string> files;
  for (const std::string& root : roots) {
    std::error_code ec;
    if (!fs::exists(root, ec)) continue;
    for (auto it = fs::recursive_directory_iterator(
             root, fs::directory_options::skip_permission_denied, ec);
         it != fs::recursive_directory_iterator(); it.increment(ec)) {
      if (ec) break;
      if (!it->is_regular_file(ec)) continue;
      std::string ext = it->path().extension().string();
      if (ext == ".py" || ext == ".txt" || ext == ".md")
        files.push_back(it->path().string());
    }
  }
  std::sort(files.begin(), files.end());
  if (file_limit && files.size() > file_limit) files.resize(file_limit);

  std::set<std::string> words;
  std::string token;
  for (const std::string& path : files) {
    std::ifstream is(path, std::ios::binary);
    if (!is) continue;
    std::string content((std::istreambuf_iterator<char>(is)),
                        std::istreambuf_iterator<char>());
    token.clear();
    auto flush = [&]() {
      int len = static_cast<int>(token.size());
      if (len >= min_len && len <= max_len) words.insert(token);
      token.clear();
    };
    for (char c : content) {
      if (std::isalpha(static_cast<unsigned char>(c))) {
        token.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
      } else {
        flush();
      }
    }
    flush();
  }
  return std::vector<std::string>(words.begin(), words.end());
}

std::vector<std::string> synthesize_words(size_t count, uint64_t seed,
                                          int min_len, int max_len) {
  static const char* onsets[] = {"b",  "c",  "d",  "f",  "g",  "h",  "j",
                                 "k",  "l",  "m",  "n",  "p",  "r",  "s",
                                 "t",  "v",  "w",  "br", "ch", "cl", "cr",
                                 "dr", "fl", "gr", "pl", "pr", "sh", "sl",
                                 "sp", "st", "str", "th", "tr"};
  static const char* vowels[] = {"a", "e", "i", "o", "u", "ai", "ea", "ee",
                                 "io", "ou"};
  static const char* codas[] = {"",  "",  "n",  "r",  "s",  "t",  "l",
                                "m", "d", "ck", "ng", "st", "nd"};
  static const char* suffixes[] = {"",     "",    "",     "ing", "ed",
                                   "er",   "ly",  "tion", "ness", "ment",
                                   "able", "ous", "ish"};
  std::set<std::string> words;
  Rng rng(derive_seed(seed, {tag("synth_words")}));
  while (words.size() < count) {
    std::string w;
    int syllables = 2 + static_cast<int>(rng.below(3));
    for (int s = 0; s < syllables; ++s) {
      w += onsets[rng.below(std::size(onsets))];
      w += vowels[rng.below(std::size(vowels))];
      w += codas[rng.below(std::size(codas))];
    }
    w += suffixes[rng.below(std::size(suffixes))];
    if (static_cast<int>(w.size()) >= min_len &&
        static_cast<int>(w.size()) <= max_len)
      words.insert(w);
  }
  return std::vector<std::string>(words.begin(), words.end());
}

}  // namespace latf
