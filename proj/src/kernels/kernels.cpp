#include "skirl/kernels.hpp"

#include <cmath>
#include <cstdlib>
#include <stdexcept>

namespace skirl::kern {

namespace {

void add_s(const float* a, const float* b, float* out, int n) {
  for (int i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_s(const float* a, const float* b, float* out, int n) {
  for (int i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_s(const float* a, const float* b, float* out, int n) {
  for (int i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_s(const float* x, float s, float* out, int n) {
  for (int i = 0; i < n; ++i) out[i] = x[i] * s;
}

void axpy_s(float a, const float* x, float* y, int n) {
  for (int i = 0; i < n; ++i) y[i] = y[i] + a * x[i];
}

void relu_s(const float* x, float* out, int n) {
  for (int i = 0; i < n; ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_grad_s(const float* x, const float* gout, float* gacc, int n) {
  for (int i = 0; i < n; ++i)
    if (x[i] > 0.0f) gacc[i] += gout[i];
}

double dot_s(const float* a, const float* b, int n) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

double sum_s(const float* x, int n) {
  double acc = 0.0;
  for (int i = 0; i < n; ++i) acc += double(x[i]);
  return acc;
}

bool all_finite_s(const float* x, int n) {
  for (int i = 0; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

void gemm_nn_s(const float* a, const float* b, float* c, int m, int k, int n) {
  std::vector<double> row(size_t(n));
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) row[j] = 0.0;
    for (int p = 0; p < k; ++p) {
      const double av = a[size_t(i) * k + p];
      const float* brow = b + size_t(p) * n;
      for (int j = 0; j < n; ++j) row[j] += av * double(brow[j]);
    }
    for (int j = 0; j < n; ++j) c[size_t(i) * n + j] = float(row[j]);
  }
}

void gemm_nt_s(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      c[size_t(i) * n + j] = float(dot_s(a + size_t(i) * k, b + size_t(j) * k, k));
}

void gemm_tn_s(const float* a, const float* b, float* c, int m, int k, int n) {
  // A is [k,m], B is [k,n]
  std::vector<double> acc(size_t(m) * n, 0.0);
  for (int p = 0; p < k; ++p) {
    const float* arow = a + size_t(p) * m;
    const float* brow = b + size_t(p) * n;
    for (int i = 0; i < m; ++i) {
      const double av = arow[i];
      double* crow = acc.data() + size_t(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * double(brow[j]);
    }
  }
  for (size_t i = 0; i < acc.size(); ++i) c[i] = float(acc[i]);
}

void adam_step_s(float* p, const float* g, float* m, float* v, int n,
                 float lr, float beta1, float beta2, float eps,
                 float bias1, float bias2) {
  for (int i = 0; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
    const float mhat = m[i] / bias1;
    const float vhat = v[i] / bias2;
    p[i] = p[i] - lr * mhat / (std::sqrt(vhat) + eps);
  }
}

const KernelTable kScalar = {
    "scalar", add_s,    sub_s,    mul_s,    scale_s,  axpy_s,      relu_s,
    relu_grad_s, dot_s, sum_s,    all_finite_s,       gemm_nn_s,   gemm_nt_s,
    gemm_tn_s,   adam_step_s,
};

const KernelTable* pick_default() {
  if (const char* env = std::getenv("SKIRL_BACKEND")) {
    std::string want(env);
    if (want == "scalar") return &kScalar;
#if defined(__x86_64__) || defined(_M_X64)
    if (want == "avx2" && avx2_supported()) return &avx2_table();
#endif
  }
#if defined(__x86_64__) || defined(_M_X64)
  if (avx2_supported()) return &avx2_table();
#endif
  return &kScalar;
}

const KernelTable* g_active = nullptr;

}  // namespace

const KernelTable& scalar_table() { return kScalar; }

const KernelTable& active() {
  if (!g_active) g_active = pick_default();
  return *g_active;
}

std::vector<std::string> available_backends() {
  std::vector<std::string> out = {"scalar"};
#if defined(__x86_64__) || defined(_M_X64)
  if (avx2_supported()) out.push_back("avx2");
#endif
  return out;
}

void force_backend(const std::string& name) {
  if (name == "scalar") {
    g_active = &kScalar;
    return;
  }
#if defined(__x86_64__) || defined(_M_X64)
  if (name == "avx2") {
    if (!avx2_supported()) throw std::invalid_argument("avx2 not supported on this cpu");
    g_active = &avx2_table();
    return;
  }
#endif
  throw std::invalid_argument("unknown kernel backend: " + name);
}

}  // namespace skirl::kern
