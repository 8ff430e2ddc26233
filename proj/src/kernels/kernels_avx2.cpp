// AVX2 kernel lane. Compiled with -mavx2 (this TU only); entered only after a
// runtime CPUID check. Elementwise kernels perform the same per-element
// operation order as the scalar lane and match it bit-exactly; reduction
// kernels accumulate in 4 double lanes, so they may differ from the scalar
// lane in the last ulp (equivalence tests allow that).

#include "skirl/kernels.hpp"

#if defined(__x86_64__) || defined(_M_X64)

#include <immintrin.h>

#include <cmath>
#include <vector>

namespace skirl::kern {

namespace {

void add_v(const float* a, const float* b, float* out, int n) {
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_add_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_v(const float* a, const float* b, float* out, int n) {
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_sub_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_v(const float* a, const float* b, float* out, int n) {
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) out[i] = a[i] * b[i];
}

void scale_v(const float* x, float s, float* out, int n) {
  const __m256 vs = _mm256_set1_ps(s);
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_mul_ps(_mm256_loadu_ps(x + i), vs));
  for (; i < n; ++i) out[i] = x[i] * s;
}

void axpy_v(float a, const float* x, float* y, int n) {
  // mul+add, not fma, to stay bit-identical with the scalar lane
  const __m256 va = _mm256_set1_ps(a);
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 prod = _mm256_mul_ps(va, _mm256_loadu_ps(x + i));
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(y + i), prod));
  }
  for (; i < n; ++i) y[i] = y[i] + a * x[i];
}

void relu_v(const float* x, float* out, int n) {
  const __m256 zero = _mm256_setzero_ps();
  int i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(out + i, _mm256_max_ps(_mm256_loadu_ps(x + i), zero));
  for (; i < n; ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
}

void relu_grad_v(const float* x, const float* gout, float* gacc, int n) {
  const __m256 zero = _mm256_setzero_ps();
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
    __m256 g = _mm256_and_ps(_mm256_loadu_ps(gout + i), mask);
    _mm256_storeu_ps(gacc + i, _mm256_add_ps(_mm256_loadu_ps(gacc + i), g));
  }
  for (; i < n; ++i)
    if (x[i] > 0.0f) gacc[i] += gout[i];
}

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  return _mm_cvtsd_f64(lo) + _mm_cvtsd_f64(_mm_unpackhi_pd(lo, lo));
}

double dot_v(const float* a, const float* b, int n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 va = _mm256_loadu_ps(a + i);
    __m256 vb = _mm256_loadu_ps(b + i);
    acc0 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_castps256_ps128(va)),
                           _mm256_cvtps_pd(_mm256_castps256_ps128(vb)), acc0);
    acc1 = _mm256_fmadd_pd(_mm256_cvtps_pd(_mm256_extractf128_ps(va, 1)),
                           _mm256_cvtps_pd(_mm256_extractf128_ps(vb, 1)), acc1);
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += double(a[i]) * double(b[i]);
  return acc;
}

double sum_v(const float* x, int n) {
  __m256d acc0 = _mm256_setzero_pd();
  __m256d acc1 = _mm256_setzero_pd();
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 v = _mm256_loadu_ps(x + i);
    acc0 = _mm256_add_pd(acc0, _mm256_cvtps_pd(_mm256_castps256_ps128(v)));
    acc1 = _mm256_add_pd(acc1, _mm256_cvtps_pd(_mm256_extractf128_ps(v, 1)));
  }
  double acc = hsum(_mm256_add_pd(acc0, acc1));
  for (; i < n; ++i) acc += double(x[i]);
  return acc;
}

bool all_finite_v(const float* x, int n) {
  // finite iff exponent bits are not all ones
  const __m256i expmask = _mm256_set1_epi32(0x7f800000);
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256i bits = _mm256_loadu_si256(reinterpret_cast<const __m256i*>(x + i));
    __m256i exp = _mm256_and_si256(bits, expmask);
    __m256i bad = _mm256_cmpeq_epi32(exp, expmask);
    if (!_mm256_testz_si256(bad, bad)) return false;
  }
  for (; i < n; ++i)
    if (!std::isfinite(x[i])) return false;
  return true;
}

// rowacc[j] += av * brow[j] over doubles
inline void daxpy_row(double av, const float* brow, double* rowacc, int n) {
  const __m256d vav = _mm256_set1_pd(av);
  int j = 0;
  for (; j + 4 <= n; j += 4) {
    __m256d b = _mm256_cvtps_pd(_mm_loadu_ps(brow + j));
    __m256d acc = _mm256_loadu_pd(rowacc + j);
    _mm256_storeu_pd(rowacc + j, _mm256_fmadd_pd(vav, b, acc));
  }
  for (; j < n; ++j) rowacc[j] += av * double(brow[j]);
}

void gemm_nn_v(const float* a, const float* b, float* c, int m, int k, int n) {
  std::vector<double> row(size_t(n));
  for (int i = 0; i < m; ++i) {
    for (int j = 0; j < n; ++j) row[j] = 0.0;
    for (int p = 0; p < k; ++p)
      daxpy_row(double(a[size_t(i) * k + p]), b + size_t(p) * n, row.data(), n);
    for (int j = 0; j < n; ++j) c[size_t(i) * n + j] = float(row[j]);
  }
}

void gemm_nt_v(const float* a, const float* b, float* c, int m, int k, int n) {
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      c[size_t(i) * n + j] = float(dot_v(a + size_t(i) * k, b + size_t(j) * k, k));
}

void gemm_tn_v(const float* a, const float* b, float* c, int m, int k, int n) {
  std::vector<double> acc(size_t(m) * n, 0.0);
  for (int p = 0; p < k; ++p) {
    const float* arow = a + size_t(p) * m;
    const float* brow = b + size_t(p) * n;
    for (int i = 0; i < m; ++i)
      daxpy_row(double(arow[i]), brow, acc.data() + size_t(i) * n, n);
  }
  for (size_t i = 0; i < acc.size(); ++i) c[i] = float(acc[i]);
}

void adam_step_v(float* p, const float* g, float* m, float* v, int n,
                 float lr, float beta1, float beta2, float eps,
                 float bias1, float bias2) {
  const __m256 vb1 = _mm256_set1_ps(beta1), vb1c = _mm256_set1_ps(1.0f - beta1);
  const __m256 vb2 = _mm256_set1_ps(beta2), vb2c = _mm256_set1_ps(1.0f - beta2);
  const __m256 vlr = _mm256_set1_ps(lr), veps = _mm256_set1_ps(eps);
  const __m256 vbias1 = _mm256_set1_ps(bias1), vbias2 = _mm256_set1_ps(bias2);
  int i = 0;
  for (; i + 8 <= n; i += 8) {
    __m256 gi = _mm256_loadu_ps(g + i);
    __m256 mi = _mm256_add_ps(_mm256_mul_ps(vb1, _mm256_loadu_ps(m + i)), _mm256_mul_ps(vb1c, gi));
    __m256 vi = _mm256_add_ps(_mm256_mul_ps(vb2, _mm256_loadu_ps(v + i)),
                              _mm256_mul_ps(vb2c, _mm256_mul_ps(gi, gi)));
    _mm256_storeu_ps(m + i, mi);
    _mm256_storeu_ps(v + i, vi);
    __m256 mhat = _mm256_div_ps(mi, vbias1);
    __m256 vhat = _mm256_div_ps(vi, vbias2);
    __m256 upd = _mm256_div_ps(_mm256_mul_ps(vlr, mhat), _mm256_add_ps(_mm256_sqrt_ps(vhat), veps));
    _mm256_storeu_ps(p + i, _mm256_sub_ps(_mm256_loadu_ps(p + i), upd));
  }
  for (; i < n; ++i) {
    m[i] = beta1 * m[i] + (1.0f - beta1) * g[i];
    v[i] = beta2 * v[i] + (1.0f - beta2) * g[i] * g[i];
    const float mhat = m[i] / bias1;
    const float vhat = v[i] / bias2;
    p[i] = p[i] - lr * mhat / (std::sqrt(vhat) + eps);
  }
}

const KernelTable kAvx2 = {
    "avx2",      add_v,  sub_v, mul_v,        scale_v,   axpy_v,    relu_v,
    relu_grad_v, dot_v,  sum_v, all_finite_v, gemm_nn_v, gemm_nt_v,
    gemm_tn_v,   adam_step_v,
};

}  // namespace

bool avx2_supported() { return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma"); }

const KernelTable& avx2_table() { return kAvx2; }

}  // namespace skirl::kern

#endif  // x86-64
