#include "gemm.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace tloc::ad::kernels {

namespace {

constexpr std::size_t kMr = 8;
constexpr std::size_t kNr = 16;
// Depth of one packed block; keeps a B panel resident in L1.
constexpr std::size_t kKc = 256;

using Vec = double __attribute__((vector_size(64)));
constexpr std::size_t kLanes = sizeof(Vec) / sizeof(double);
constexpr std::size_t kVecs = kNr / kLanes;

Vec load(const double* p) {
  Vec v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

// A matrix operand, stored transposed when `trans` is set.
struct Operand {
  const double* data;
  std::size_t ld;
  bool trans;
};

// Rows [i, i + rows) and depths [p0, p0 + kc) of op(A), interleaved as
// out[p * kMr + r], zero-padded to kMr rows.
void pack_a(const Operand& a, std::size_t i, std::size_t rows, std::size_t p0, std::size_t kc, double* out) {
  if (!a.trans) {
    for (std::size_t r = 0; r < kMr; ++r) {
      if (r < rows) {
        const double* src = a.data + (i + r) * a.ld + p0;
        for (std::size_t p = 0; p < kc; ++p) out[p * kMr + r] = src[p];
      } else {
        for (std::size_t p = 0; p < kc; ++p) out[p * kMr + r] = 0.0;
      }
    }
    return;
  }
  for (std::size_t p = 0; p < kc; ++p) {
    const double* src = a.data + (p0 + p) * a.ld + i;
    double* dst = out + p * kMr;
    for (std::size_t r = 0; r < rows; ++r) dst[r] = src[r];
    for (std::size_t r = rows; r < kMr; ++r) dst[r] = 0.0;
  }
}

// Depths [p0, p0 + kc) of op(B) (k×n) as consecutive kNr-column panels,
// panel-major, each laid out out[p * kNr + q] and zero-padded.
void pack_b(const Operand& b, std::size_t n, std::size_t p0, std::size_t kc, double* out) {
  for (std::size_t j = 0; j < n; j += kNr) {
    const std::size_t cols = std::min(kNr, n - j);
    double* panel = out + (j / kNr) * kc * kNr;
    for (std::size_t p = 0; p < kc; ++p) {
      double* dst = panel + p * kNr;
      if (!b.trans) {
        const double* src = b.data + (p0 + p) * b.ld + j;
        for (std::size_t q = 0; q < cols; ++q) dst[q] = src[q];
      } else {
        for (std::size_t q = 0; q < cols; ++q) dst[q] = b.data[(j + q) * b.ld + p0 + p];
      }
      for (std::size_t q = cols; q < kNr; ++q) dst[q] = 0.0;
    }
  }
}

// kMr×kNr product of packed panels. Accumulators are named locals: GCC keeps
// an array of vectors in memory across the loop.
void tile(std::size_t kc, const double* ap, const double* bp, double* c, std::size_t ldc, std::size_t rows,
          std::size_t cols, bool add) {
  static_assert(kMr == 8 && kVecs == 2);
  Vec c00{}, c01{}, c10{}, c11{}, c20{}, c21{}, c30{}, c31{};
  Vec c40{}, c41{}, c50{}, c51{}, c60{}, c61{}, c70{}, c71{};
  for (std::size_t p = 0; p < kc; ++p) {
    const Vec b0 = load(bp + p * kNr);
    const Vec b1 = load(bp + p * kNr + kLanes);
    const double* av = ap + p * kMr;
    c00 += av[0] * b0; c01 += av[0] * b1;
    c10 += av[1] * b0; c11 += av[1] * b1;
    c20 += av[2] * b0; c21 += av[2] * b1;
    c30 += av[3] * b0; c31 += av[3] * b1;
    c40 += av[4] * b0; c41 += av[4] * b1;
    c50 += av[5] * b0; c51 += av[5] * b1;
    c60 += av[6] * b0; c61 += av[6] * b1;
    c70 += av[7] * b0; c71 += av[7] * b1;
  }
  const Vec acc[kMr][kVecs] = {{c00, c01}, {c10, c11}, {c20, c21}, {c30, c31},
                               {c40, c41}, {c50, c51}, {c60, c61}, {c70, c71}};
  if (rows == kMr && cols == kNr) {
    for (std::size_t r = 0; r < kMr; ++r) {
      double* row = c + r * ldc;
      for (std::size_t q = 0; q < kVecs; ++q) {
        Vec v = acc[r][q];
        if (add) v += load(row + q * kLanes);
        std::memcpy(row + q * kLanes, &v, sizeof v);
      }
    }
    return;
  }
  double buf[kMr][kNr];
  std::memcpy(buf, acc, sizeof buf);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t q = 0; q < cols; ++q) c[r * ldc + q] = add ? c[r * ldc + q] + buf[r][q] : buf[r][q];
  }
}

void gemm(std::size_t m, std::size_t n, std::size_t k, const Operand& a, const Operand& b, double* c,
          std::size_t ldc, bool accumulate) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate) {
      for (std::size_t r = 0; r < m; ++r) std::fill_n(c + r * ldc, n, 0.0);
    }
    return;
  }
  const std::size_t panels = (n + kNr - 1) / kNr;
  thread_local std::vector<double> bpack;
  thread_local std::vector<double> apack;
  bpack.resize(panels * kNr * std::min(k, kKc));
  apack.resize(kMr * std::min(k, kKc));
  for (std::size_t p0 = 0; p0 < k; p0 += kKc) {
    const std::size_t kc = std::min(kKc, k - p0);
    const bool add = accumulate || p0 > 0;
    pack_b(b, n, p0, kc, bpack.data());
    for (std::size_t i = 0; i < m; i += kMr) {
      const std::size_t rows = std::min(kMr, m - i);
      pack_a(a, i, rows, p0, kc, apack.data());
      for (std::size_t jp = 0; jp < panels; ++jp) {
        const std::size_t j = jp * kNr;
        tile(kc, apack.data(), bpack.data() + jp * kc * kNr, c + i * ldc + j, ldc, rows, std::min(kNr, n - j), add);
      }
    }
  }
}

}  // namespace

void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda, const double* b,
             std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  gemm(m, n, k, {a, lda, false}, {b, ldb, false}, c, ldc, accumulate);
}

void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda, const double* b,
             std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  gemm(m, n, k, {a, lda, false}, {b, ldb, true}, c, ldc, accumulate);
}

void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, std::size_t lda, const double* b,
             std::size_t ldb, double* c, std::size_t ldc, bool accumulate) {
  gemm(m, n, k, {a, lda, true}, {b, ldb, false}, c, ldc, accumulate);
}

}  // namespace tloc::ad::kernels
