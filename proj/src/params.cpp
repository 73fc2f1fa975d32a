#include "latf/params.hpp"

#include <bit>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace latf {

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

int ParamStore::add(const std::string& name, std::vector<int> shape,
                    std::vector<double> values) {
  if (index_.count(name))
    throw std::invalid_argument("ParamStore: duplicate name " + name);
  int64_t n = 1;
  for (int e : shape) n *= e;
  if (n != static_cast<int64_t>(values.size()))
    throw std::invalid_argument("ParamStore: " + name + " shape " +
                                shape_str(shape) + " does not hold " +
                                std::to_string(values.size()) + " values");
  Entry e;
  e.name = name;
  e.shape = std::move(shape);
  e.data = std::make_shared<std::vector<double>>(std::move(values));
  entries_.push_back(std::move(e));
  int id = static_cast<int>(entries_.size()) - 1;
  index_[name] = id;
  return id;
}

int ParamStore::add_zeros(const std::string& name, std::vector<int> shape) {
  int64_t n = 1;
  for (int e : shape) n *= e;
  return add(name, std::move(shape),
             std::vector<double>(static_cast<size_t>(n), 0.0));
}

bool ParamStore::has(const std::string& name) const {
  return index_.count(name) != 0;
}

const ParamStore::Entry& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end())
    throw std::invalid_argument("ParamStore: no parameter named " + name);
  return entries_[static_cast<size_t>(it->second)];
}

ParamStore::Entry& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end())
    throw std::invalid_argument("ParamStore: no parameter named " + name);
  return entries_[static_cast<size_t>(it->second)];
}

int64_t ParamStore::total_values() const {
  int64_t n = 0;
  for (const Entry& e : entries_) n += e.numel();
  return n;
}

Tensor ParamStore::bind(const std::string& name, bool requires_grad) const {
  const Entry& e = at(name);
  return Tensor::share(e.shape, e.data, requires_grad);
}

Tensor ParamStore::bind(int i, bool requires_grad) const {
  const Entry& e = entries_[static_cast<size_t>(i)];
  return Tensor::share(e.shape, e.data, requires_grad);
}

ParamStore ParamStore::clone() const {
  ParamStore out;
  for (const Entry& e : entries_) out.add(e.name, e.shape, *e.data);
  return out;
}

// ---------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------

namespace {

void write_u32(std::ostream& os, uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint32_t read_u32(std::istream& is) {
  uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!is) throw std::runtime_error("checkpoint: truncated file");
  return v;
}

}  // namespace

void save_checkpoint(const ParamStore& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path);
  os.write("LATF", 4);
  write_u32(os, kCheckpointVersion);
  write_u32(os, static_cast<uint32_t>(params.size()));
  for (const auto& e : params.entries()) {
    write_u32(os, static_cast<uint32_t>(e.name.size()));
    os.write(e.name.data(), static_cast<std::streamsize>(e.name.size()));
    write_u32(os, static_cast<uint32_t>(e.shape.size()));
    for (int ext : e.shape) write_u32(os, static_cast<uint32_t>(ext));
    os.write(reinterpret_cast<const char*>(e.data->data()),
             static_cast<std::streamsize>(e.data->size() * sizeof(double)));
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

ParamStore load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "LATF", 4) != 0)
    throw std::runtime_error("checkpoint " + path + ": bad magic");
  uint32_t version = read_u32(is);
  if (version != kCheckpointVersion)
    throw std::runtime_error("checkpoint " + path + ": unsupported version " +
                             std::to_string(version));
  uint32_t count = read_u32(is);
  ParamStore out;
  for (uint32_t i = 0; i < count; ++i) {
    uint32_t name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    uint32_t ndim = read_u32(is);
    std::vector<int> shape(ndim);
    int64_t n = 1;
    for (uint32_t j = 0; j < ndim; ++j) {
      shape[j] = static_cast<int>(read_u32(is));
      n *= shape[j];
    }
    std::vector<double> values(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!is) throw std::runtime_error("checkpoint " + path + ": truncated");
    out.add(name, std::move(shape), std::move(values));
  }
  return out;
}

// ---------------------------------------------------------------------
// manifest
// ---------------------------------------------------------------------

std::string format_double(double v) {
  char buf[40];
  snprintf(buf, sizeof(buf), "%.17g", v);
  double back = strtod(buf, nullptr);
  if (back == v) {
    // try shorter forms that still round-trip
    for (int prec = 1; prec < 17; ++prec) {
      char b2[40];
      snprintf(b2, sizeof(b2), "%.*g", prec, v);
      if (strtod(b2, nullptr) == v) return b2;
    }
  }
  return buf;
}

void Manifest::set(const std::string& key, const std::string& value) {
  auto it = index_.find(key);
  if (it != index_.end()) {
    items_[it->second].second = value;
  } else {
    index_[key] = items_.size();
    items_.emplace_back(key, value);
  }
}

void Manifest::set(const std::string& key, int64_t value) {
  set(key, std::to_string(value));
}

void Manifest::set(const std::string& key, uint64_t value) {
  set(key, std::to_string(value));
}

void Manifest::set(const std::string& key, double value) {
  set(key, format_double(value));
}

bool Manifest::has(const std::string& key) const {
  return index_.count(key) != 0;
}

const std::string& Manifest::get(const std::string& key) const {
  auto it = index_.find(key);
  if (it == index_.end())
    throw std::runtime_error("manifest: missing key " + key);
  return items_[it->second].second;
}

std::string Manifest::get_or(const std::string& key,
                             const std::string& fallback) const {
  auto it = index_.find(key);
  return it == index_.end() ? fallback : items_[it->second].second;
}

int64_t Manifest::get_int(const std::string& key) const {
  return std::stoll(get(key));
}

uint64_t Manifest::get_u64(const std::string& key) const {
  return std::stoull(get(key));
}

double Manifest::get_double(const std::string& key) const {
  return std::stod(get(key));
}

void Manifest::save(const std::string& path) const {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write manifest " + path);
  for (const auto& [k, v] : items_) os << k << "=" << v << "\n";
  if (!os) throw std::runtime_error("manifest write failed: " + path);
}

Manifest Manifest::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open manifest " + path);
  Manifest m;
  std::string line;
  size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error(path + ":" + std::to_string(lineno) +
                               ": expected key=value");
    m.set(line.substr(0, eq), line.substr(eq + 1));
  }
  return m;
}

}  // namespace latf
