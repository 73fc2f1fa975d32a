#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "latf/tensor.hpp"

namespace latf {

// Ordered collection of named parameter tensors. Order is the checkpoint
// order; needs to be stable for bit-exact round-trips.
class ParamStore {
 public:
  struct Entry {
    std::string name;
    std::vector<int> shape;
    std::shared_ptr<std::vector<double>> data;
    int64_t numel() const { return static_cast<int64_t>(data->size()); }
  };

  int add(const std::string& name, std::vector<int> shape,
          std::vector<double> values);
  int add_zeros(const std::string& name, std::vector<int> shape);

  bool has(const std::string& name) const;
  const Entry& at(const std::string& name) const;
  Entry& at(const std::string& name);
  const Entry& entry(int i) const { return entries_[static_cast<size_t>(i)]; }
  Entry& entry(int i) { return entries_[static_cast<size_t>(i)]; }
  int size() const { return static_cast<int>(entries_.size()); }
  int64_t total_values() const;

  // Leaf tensor aliasing the stored buffer.
  Tensor bind(const std::string& name, bool requires_grad) const;
  Tensor bind(int i, bool requires_grad) const;

  ParamStore clone() const;  // deep copy of the buffers

  const std::vector<Entry>& entries() const { return entries_; }

 private:
  std::vector<Entry> entries_;
  std::unordered_map<std::string, int> index_;
};

// Checkpoint file: "LATF" magic, little-endian u32 version, u32 tensor
// count, then per tensor (u32 name length, name bytes, u32 ndim,
// u32 extents..., float64 little-endian payload). Round-trips bit-exactly.
inline constexpr uint32_t kCheckpointVersion = 1;
void save_checkpoint(const ParamStore& params, const std::string& path);
ParamStore load_checkpoint(const std::string& path);

// Plain-text key=value manifest, one pair per line, '#' comments.
// Writing preserves insertion order so reruns emit identical bytes.
class Manifest {
 public:
  void set(const std::string& key, const std::string& value);
  void set(const std::string& key, int64_t value);
  void set(const std::string& key, uint64_t value);
  void set(const std::string& key, double value);
  bool has(const std::string& key) const;
  const std::string& get(const std::string& key) const;
  std::string get_or(const std::string& key, const std::string& fallback) const;
  int64_t get_int(const std::string& key) const;
  uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;

  void save(const std::string& path) const;
  static Manifest load(const std::string& path);

  const std::vector<std::pair<std::string, std::string>>& items() const {
    return items_;
  }

 private:
  std::vector<std::pair<std::string, std::string>> items_;
  std::unordered_map<std::string, size_t> index_;
};

std::string format_double(double v);  // shortest round-trip decimal

}  // namespace latf
