#pragma once

// Raw loops shared by the autodiff ops. Everything here is single-threaded and
// deterministic: accumulation order depends only on the extents.

#include <cstddef>
#include <vector>

namespace dmoco::kernels {

/// C[M,N] (+)= A[M,K] * B[K,N], all row-major and contiguous.
template <typename T>
void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C, bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < M * N; ++i) C[i] = T{0};
  for (std::size_t i = 0; i < M; ++i) {
    T* c = C + i * N;
    const T* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = a[k];
      if (av == T{0}) continue;
      const T* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

/// C[M,N] (+)= A[K,M]^T * B[K,N].
template <typename T>
void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C, bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < M * N; ++i) C[i] = T{0};
  for (std::size_t k = 0; k < K; ++k) {
    const T* a = A + k * M;
    const T* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const T av = a[i];
      if (av == T{0}) continue;
      T* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

/// out[C,R] = in[R,C]^T
template <typename T>
void transpose(std::size_t R, std::size_t Cn, const T* in, T* out) {
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < Cn; ++c) out[c * R + r] = in[r * Cn + c];
}

/// C[M,N] (+)= A[M,K] * B[N,K]^T. Transposes B into scratch then runs NN.
template <typename T>
void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const T* A, const T* B, T* C, bool accumulate,
             std::vector<T>& scratch) {
  scratch.resize(K * N);
  transpose(N, K, B, scratch.data());
  gemm_nn(M, N, K, A, scratch.data(), C, accumulate);
}

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel, stride, pad;
  std::size_t out_h() const { return (height + 2 * pad - kernel) / stride + 1; }
  std::size_t out_w() const { return (width + 2 * pad - kernel) / stride + 1; }
  std::size_t patch() const { return channels * kernel * kernel; }
};

/// Unfold one image [C,H,W] into columns [C*k*k, Ho*Wo] with zero padding.
template <typename T>
void im2col(const ConvGeometry& g, const T* img, T* cols) {
  const std::size_t ho = g.out_h(), wo = g.out_w();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(g.height) &&
                                ix < static_cast<std::ptrdiff_t>(g.width);
            row[oy * wo + ox] = inside ? img[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                                             static_cast<std::size_t>(ix)]
                                       : T{0};
          }
        }
      }
}

/// Adjoint of im2col: scatter-add columns back onto an image [C,H,W].
template <typename T>
void col2im(const ConvGeometry& g, const T* cols, T* img) {
  const std::size_t ho = g.out_h(), wo = g.out_w();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const T* row = cols + ((c * g.kernel + ky) * g.kernel + kx) * ho * wo;
        for (std::size_t oy = 0; oy < ho; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t ox = 0; ox < wo; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            img[(c * g.height + static_cast<std::size_t>(iy)) * g.width + static_cast<std::size_t>(ix)] +=
                row[oy * wo + ox];
          }
        }
      }
}

}  // namespace dmoco::kernels
