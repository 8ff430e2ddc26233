#pragma once

// Data-parallel inner loops behind the tensor ops. Every kernel has a scalar
// reference implementation and (on x86-64) an AVX2 variant; the active table
// is picked once at startup from CPUID and can be overridden with
// SKIRL_BACKEND=scalar|avx2 or force_backend() in tests.
//
// Reductions (dot, sum, gemm accumulators) run in double regardless of lane.

#include <cstdint>
#include <string>
#include <vector>

namespace skirl::kern {

struct KernelTable {
  const char* name;

  // elementwise, out may alias inputs
  void (*add)(const float* a, const float* b, float* out, int n);
  void (*sub)(const float* a, const float* b, float* out, int n);
  void (*mul)(const float* a, const float* b, float* out, int n);
  void (*scale)(const float* x, float s, float* out, int n);
  void (*axpy)(float a, const float* x, float* y, int n);  // y += a*x
  void (*relu)(const float* x, float* out, int n);
  void (*relu_grad)(const float* x, const float* gout, float* gacc, int n);

  // reductions, double accumulation
  double (*dot)(const float* a, const float* b, int n);
  double (*sum)(const float* x, int n);

  bool (*all_finite)(const float* x, int n);

  // C[m,n] = A[m,k] * B[k,n], all row-major, double accumulation
  void (*gemm_nn)(const float* a, const float* b, float* c, int m, int k, int n);
  // C[m,n] = A[m,k] * B[n,k]^T
  void (*gemm_nt)(const float* a, const float* b, float* c, int m, int k, int n);
  // C[m,n] = A[k,m]^T * B[k,n]
  void (*gemm_tn)(const float* a, const float* b, float* c, int m, int k, int n);

  // fused Adam update, in place on p/m/v
  void (*adam_step)(float* p, const float* g, float* m, float* v, int n,
                    float lr, float beta1, float beta2, float eps,
                    float bias1, float bias2);
};

const KernelTable& active();
std::vector<std::string> available_backends();
// throws std::invalid_argument for unknown/unavailable names
void force_backend(const std::string& name);

const KernelTable& scalar_table();
#if defined(__x86_64__) || defined(_M_X64)
bool avx2_supported();
const KernelTable& avx2_table();
#endif

}  // namespace skirl::kern
