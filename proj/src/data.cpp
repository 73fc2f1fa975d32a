#include "latf/data.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "latf/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace latf {

void Vocab::push(const std::string& s) {
  if (index_.count(s))
    throw std::invalid_argument("Vocab: duplicate symbol '" + s + "'");
  index_[s] = static_cast<int>(symbols_.size());
  symbols_.push_back(s);
}

Vocab Vocab::for_symbols(const std::vector<std::string>& task_symbols) {
  Vocab v;
  v.push(kSep);
  v.push(kEnd);
  for (const std::string& s : task_symbols) v.push(s);
  return v;
}

const std::string& Vocab::symbol(int id) const {
  if (id < 0 || id >= size())
    throw std::invalid_argument("Vocab: id " + std::to_string(id) +
                                " out of range");
  return symbols_[static_cast<size_t>(id)];
}

int Vocab::id(const std::string& symbol) const {
  auto it = index_.find(symbol);
  if (it == index_.end())
    throw std::invalid_argument("Vocab: unknown symbol '" + symbol + "'");
  return it->second;
}

bool Vocab::contains(const std::string& symbol) const {
  return index_.count(symbol) != 0;
}

TokenSequence Vocab::encode(const std::vector<std::string>& symbols) const {
  TokenSequence ids;
  ids.reserve(symbols.size());
  for (const std::string& s : symbols) ids.push_back(id(s));
  return ids;
}

std::vector<std::string> Vocab::decode(const TokenSequence& ids) const {
  std::vector<std::string> out;
  out.reserve(ids.size());
  for (int i : ids) out.push_back(symbol(i));
  return out;
}

void Vocab::save(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write vocab " + path);
  for (const std::string& s : symbols_) os << s << "\n";
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open vocab " + path);
  Vocab v;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    v.push(line);
  }
  if (v.size() < 2 || v.symbols_[0] != kSep || v.symbols_[1] != kEnd)
    throw std::runtime_error("vocab " + path +
                             ": first two symbols must be # and $");
  return v;
}

uint64_t Vocab::content_hash() const {
  uint64_t h = tag("vocab");
  for (const std::string& s : symbols_) h = mix_u64(h ^ tag(s));
  return h;
}

TokenSequence build_z(const Example& ex) {
  TokenSequence z;
  z.reserve(ex.source.size() + ex.target.size() + 2);
  z.insert(z.end(), ex.source.begin(), ex.source.end());
  z.push_back(0);  // '#'
  z.insert(z.end(), ex.target.begin(), ex.target.end());
  z.push_back(1);  // '$'
  return z;
}

uint64_t example_content_hash(const Example& ex) {
  uint64_t h = tag("example");
  for (int id : ex.source) h = mix_u64(h ^ static_cast<uint64_t>(id) * 2 + 0);
  h = mix_u64(h ^ tag("|"));
  for (int id : ex.target) h = mix_u64(h ^ static_cast<uint64_t>(id) * 2 + 1);
  return h;
}

// ---------------------------------------------------------------------
// jsonl
// ---------------------------------------------------------------------

void save_jsonl(const Dataset& ds, const Vocab& vocab, const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write dataset " + path);
  for (const Example& ex : ds.examples) {
    json j;
    j["source"] = vocab.decode(ex.source);
    j["target"] = vocab.decode(ex.target);
    if (ex.has_soft_targets()) j["soft_targets"] = ex.soft_targets;
    os << j.dump() << "\n";
  }
  if (!os) throw std::runtime_error("dataset write failed: " + path);
}

Dataset load_jsonl(const std::string& path, const Vocab& vocab) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open dataset " + path);
  Dataset ds;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " +
                               e.what());
    }
    Example ex;
    ex.source = vocab.encode(j.at("source").get<std::vector<std::string>>());
    ex.target = vocab.encode(j.at("target").get<std::vector<std::string>>());
    if (j.count("soft_targets")) {
      ex.soft_targets = j["soft_targets"].get<std::vector<std::vector<double>>>();
      if (ex.soft_targets.size() != ex.target.size())
        throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                 ": soft_targets rows do not match target");
      for (const auto& row : ex.soft_targets)
        if (static_cast<int>(row.size()) != vocab.size())
          throw std::runtime_error(path + ":" + std::to_string(lineno) +
                                   ": soft_targets row width != vocab size");
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

void save_dataset_dir(const Datasets& data, const std::string& dir) {
  fs::create_directories(dir);
  data.vocab.save((fs::path(dir) / "vocab.txt").string());
  save_jsonl(data.train, data.vocab, (fs::path(dir) / "train.jsonl").string());
  save_jsonl(data.valid, data.vocab, (fs::path(dir) / "valid.jsonl").string());
  save_jsonl(data.test, data.vocab, (fs::path(dir) / "test.jsonl").string());
}

Datasets load_dataset_dir(const std::string& dir) {
  Datasets out;
  out.vocab = Vocab::load((fs::path(dir) / "vocab.txt").string());
  auto load_split = [&](const char* name) {
    fs::path p = fs::path(dir) / (std::string(name) + ".jsonl");
    return fs::exists(p) ? load_jsonl(p.string(), out.vocab) : Dataset{};
  };
  out.train = load_split("train");
  out.valid = load_split("valid");
  out.test = load_split("test");
  return out;
}

// ---------------------------------------------------------------------
// tsv ingestion
// ---------------------------------------------------------------------

namespace {

struct RawPair {
  std::vector<std::string> source, target;
};

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream is(s);
  std::vector<std::string> out;
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::vector<RawPair> read_tsv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open tsv " + path);
  std::vector<RawPair> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto tab = line.find('\t');
    if (tab == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": expected <source>\\t<target>");
    RawPair p;
    p.source = split_ws(line.substr(0, tab));
    p.target = split_ws(line.substr(tab + 1));
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

Datasets ingest_tsv(const std::string& train_path, const std::string& valid_path,
                    const std::string& test_path) {
  std::vector<std::vector<RawPair>> splits;
  splits.push_back(read_tsv(train_path));
  splits.push_back(valid_path.empty() ? std::vector<RawPair>{}
                                      : read_tsv(valid_path));
  splits.push_back(test_path.empty() ? std::vector<RawPair>{}
                                     : read_tsv(test_path));

  std::set<std::string> observed;
  for (const auto& split : splits)
    for (const RawPair& p : split) {
      observed.insert(p.source.begin(), p.source.end());
      observed.insert(p.target.begin(), p.target.end());
    }
  observed.erase(Vocab::kSep);
  observed.erase(Vocab::kEnd);

  Datasets out;
  out.vocab = Vocab::for_symbols(
      std::vector<std::string>(observed.begin(), observed.end()));
  auto to_dataset = [&](const std::vector<RawPair>& pairs) {
    Dataset ds;
    for (const RawPair& p : pairs) {
      Example ex;
      ex.source = out.vocab.encode(p.source);
      ex.target = out.vocab.encode(p.target);
      ds.examples.push_back(std::move(ex));
    }
    return ds;
  };
  out.train = to_dataset(splits[0]);
  out.valid = to_dataset(splits[1]);
  out.test = to_dataset(splits[2]);
  return out;
}

}  // namespace latf
