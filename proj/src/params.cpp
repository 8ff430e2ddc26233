#include "skirl/params.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "skirl/kernels.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint writer assumes a little-endian host");

namespace skirl::nd {

uint64_t named_hash(const NamedTensors& m) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (const auto& [name, t] : m) {
    h = fnv1a64(name.data(), name.size(), h);
    h = fnv1a64(t.shape().data(), t.shape().size() * sizeof(int), h);
    h = fnv1a64(t.data(), size_t(t.size()) * sizeof(float), h);
  }
  return h;
}

void ParamStore::add(const std::string& name, Tensor init) {
  std::lock_guard<std::mutex> lk(mu_);
  if (values_.count(name)) throw std::logic_error("duplicate parameter: " + name);
  values_.emplace(name, std::move(init));
}

const Tensor& ParamStore::get(const std::string& name) const {
  std::lock_guard<std::mutex> lk(mu_);
  auto it = values_.find(name);
  if (it == values_.end()) throw std::out_of_range("unknown parameter: " + name);
  return it->second;
}

void ParamStore::set(const NamedTensors& new_values) {
  std::lock_guard<std::mutex> lk(mu_);
  for (const auto& [name, t] : new_values) {
    auto it = values_.find(name);
    if (it == values_.end()) throw std::out_of_range("unknown parameter: " + name);
    if (it->second.shape() != t.shape())
      throw std::invalid_argument("parameter shape changed: " + name);
    it->second = t;
  }
  ++version_;
}

int64_t ParamStore::version() const {
  std::lock_guard<std::mutex> lk(mu_);
  return version_;
}

SnapshotPtr ParamStore::snapshot() const {
  std::lock_guard<std::mutex> lk(mu_);
  auto s = std::make_shared<ParamSnapshot>();
  s->version = version_;
  s->values = values_;  // Tensor buffers are shared, not copied
  return s;
}

NamedTensors ParamStore::values() const {
  std::lock_guard<std::mutex> lk(mu_);
  return values_;
}

void Adam::step(ParamStore& store, const NamedTensors& grads) {
  ++t_;
  const float bias1 = 1.0f - std::pow(cfg_.beta1, float(t_));
  const float bias2 = 1.0f - std::pow(cfg_.beta2, float(t_));
  NamedTensors updated;
  for (const auto& [name, g] : grads) {
    const Tensor& p = store.get(name);
    if (p.shape() != g.shape()) throw std::invalid_argument("grad shape mismatch for " + name);
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) m.assign(size_t(p.size()), 0.0f);
    if (v.empty()) v.assign(size_t(p.size()), 0.0f);
    std::vector<float> pnew(p.vec());
    kern::active().adam_step(pnew.data(), g.data(), m.data(), v.data(), p.size(), cfg_.lr,
                             cfg_.beta1, cfg_.beta2, cfg_.eps, bias1, bias2);
    updated.emplace(name, Tensor(p.shape(), std::move(pnew)));
  }
  store.set(updated);
}

double clip_global_norm(NamedTensors& grads, float max_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) sq += kern::active().dot(g.data(), g.data(), g.size());
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    float s = float(double(max_norm) / norm);
    for (auto& [name, g] : grads) {
      std::vector<float> scaled(size_t(g.size()));
      kern::active().scale(g.data(), s, scaled.data(), g.size());
      g = Tensor(g.shape(), std::move(scaled));
    }
  }
  return norm;
}

namespace {
template <typename T>
void put(std::ofstream& f, T v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(T));
}
template <typename T>
T take(std::ifstream& f) {
  T v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(T));
  return v;
}
constexpr uint32_t kMagic = 0x53504353;  // "SCPS"
constexpr uint32_t kVersion = 1;
}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& values) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot open checkpoint for write: " + path);
  put(f, kMagic);
  put(f, kVersion);
  put(f, uint32_t(values.size()));
  for (const auto& [name, t] : values) {  // std::map iterates in name order
    put(f, uint16_t(name.size()));
    f.write(name.data(), std::streamsize(name.size()));
    put(f, uint8_t(t.shape().size()));
    for (int d : t.shape()) put(f, uint32_t(d));
  }
  for (const auto& [name, t] : values)
    f.write(reinterpret_cast<const char*>(t.data()), std::streamsize(size_t(t.size()) * 4));
  if (!f) throw std::runtime_error("checkpoint write failed: " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  if (take<uint32_t>(f) != kMagic) throw std::runtime_error("bad checkpoint magic: " + path);
  if (take<uint32_t>(f) != kVersion) throw std::runtime_error("unsupported checkpoint version");
  uint32_t n = take<uint32_t>(f);
  std::vector<std::pair<std::string, Shape>> table;
  table.reserve(n);
  for (uint32_t i = 0; i < n; ++i) {
    uint16_t len = take<uint16_t>(f);
    std::string name(len, '\0');
    f.read(name.data(), len);
    uint8_t nd = take<uint8_t>(f);
    Shape s(nd);
    for (auto& d : s) d = int(take<uint32_t>(f));
    table.emplace_back(std::move(name), std::move(s));
  }
  NamedTensors out;
  for (auto& [name, s] : table) {
    std::vector<float> data(size_t(shape_size(s)));
    f.read(reinterpret_cast<char*>(data.data()), std::streamsize(data.size() * 4));
    out.emplace(name, Tensor(s, std::move(data)));
  }
  if (!f) throw std::runtime_error("truncated checkpoint: " + path);
  return out;
}

}  // namespace skirl::nd
