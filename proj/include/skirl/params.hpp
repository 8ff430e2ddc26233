#pragma once

// Named parameter store with Adam state, global-norm clipping, versioned
// immutable snapshots, and the binary checkpoint format: header (format
// version + named shape table) followed by the raw little-endian float
// payload of each parameter, in name order.

#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "skirl/tensor.hpp"

namespace skirl::nd {

using NamedTensors = std::map<std::string, Tensor>;

uint64_t named_hash(const NamedTensors& m);

struct ParamSnapshot {
  int64_t version = 0;
  NamedTensors values;
  uint64_t hash() const { return named_hash(values); }
};

using SnapshotPtr = std::shared_ptr<const ParamSnapshot>;

class ParamStore {
 public:
  void add(const std::string& name, Tensor init);
  bool has(const std::string& name) const { return values_.count(name) > 0; }
  const Tensor& get(const std::string& name) const;
  void set(const NamedTensors& new_values);  // shapes must match; bumps version

  size_t count() const { return values_.size(); }
  int64_t version() const;

  // point-in-time immutable view; safe to read from any thread
  SnapshotPtr snapshot() const;

  void load(const NamedTensors& loaded) { set(loaded); }
  NamedTensors values() const;

 private:
  NamedTensors values_;
  int64_t version_ = 0;
  mutable std::mutex mu_;
};

struct AdamConfig {
  float lr = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  // applies one update to store (missing grads are treated as zero)
  void step(ParamStore& store, const NamedTensors& grads);

  int64_t steps_taken() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  AdamConfig cfg_;
  int64_t t_ = 0;
  std::map<std::string, std::vector<float>> m_, v_;
};

// scales grads in place so the global L2 norm is at most max_norm;
// returns the pre-clip norm
double clip_global_norm(NamedTensors& grads, float max_norm);

void save_checkpoint(const std::string& path, const NamedTensors& values);
NamedTensors load_checkpoint(const std::string& path);

}  // namespace skirl::nd
