#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace latf {

using TokenSequence = std::vector<int>;

// Symbol table. Ids 0 and 1 are pinned to the prompt separator '#' and
// the terminator '$'; task symbols follow in the order given.
class Vocab {
 public:
  static constexpr const char* kSep = "#";
  static constexpr const char* kEnd = "$";

  Vocab() = default;
  static Vocab for_symbols(const std::vector<std::string>& task_symbols);

  int sep_id() const { return 0; }
  int end_id() const { return 1; }
  int size() const { return static_cast<int>(symbols_.size()); }
  const std::string& symbol(int id) const;
  int id(const std::string& symbol) const;  // throws on unknown
  bool contains(const std::string& symbol) const;

  TokenSequence encode(const std::vector<std::string>& symbols) const;
  std::vector<std::string> decode(const TokenSequence& ids) const;

  void save(const std::string& path) const;  // one symbol per line
  static Vocab load(const std::string& path);

  uint64_t content_hash() const;

 private:
  std::vector<std::string> symbols_;
  std::unordered_map<std::string, int> index_;
  void push(const std::string& s);
};

struct Example {
  TokenSequence source;
  TokenSequence target;
  // Optional per-target-position distributions over the full vocabulary
  // (rows sum to 1). Empty when the task has hard targets.
  std::vector<std::vector<double>> soft_targets;

  bool has_soft_targets() const { return !soft_targets.empty(); }
};

struct Dataset {
  std::vector<Example> examples;
  int size() const { return static_cast<int>(examples.size()); }
};

struct Datasets {
  Vocab vocab;
  Dataset train, valid, test;
};

// z = source # target $  (the decoder-input layout shared by every task;
// separator and terminator ids are pinned to 0 and 1 by Vocab)
TokenSequence build_z(const Example& ex);
// index of the first scored prediction row: |source| + 1 separator - 1
inline int prompt_rows(const Example& ex) {
  return static_cast<int>(ex.source.size());
}

// Stable identity of an example (source/target ids only), used to key
// per-example random streams and the canonical aggregation order.
uint64_t example_content_hash(const Example& ex);

// JSON-lines dataset file: one object per line with "source" and
// "target" symbol arrays and an optional "soft_targets" matrix.
void save_jsonl(const Dataset& ds, const Vocab& vocab, const std::string& path);
Dataset load_jsonl(const std::string& path, const Vocab& vocab);

// Write/read a dataset directory: vocab.txt plus <split>.jsonl files.
void save_dataset_dir(const Datasets& data, const std::string& dir);
Datasets load_dataset_dir(const std::string& dir);

// Tab-separated seq2seq file: "src tokens<TAB>tgt tokens", whitespace
// separated symbols. The vocabulary is built from the union of symbols
// observed across the given files plus the specials.
Datasets ingest_tsv(const std::string& train_path,
                    const std::string& valid_path = "",
                    const std::string& test_path = "");

}  // namespace latf
