#pragma once

#include <functional>
#include <vector>

#include "whittle/tensor.hpp"

namespace whittle::ndgrad {

// Elementwise arithmetic. Shapes must match exactly; no broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

// Tensor-scalar arithmetic. Scalar results carry a 64-bit value mirror so
// loss composition does not lose precision to float32 storage.
Tensor scalar_mul(const Tensor& x, double c);
Tensor scalar_add(const Tensor& x, double c);

// Full reduction to a [1] tensor; accumulates in 64-bit.
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor reshape(const Tensor& x, std::vector<int64_t> new_shape);
Tensor relu(const Tensor& x);

/// Elementwise y_i = f(x_i) with user-supplied derivative df(x_i). Both are
/// evaluated in double on the stored float values.
Tensor map_unary(const Tensor& x, const std::function<double(double)>& f,
                 const std::function<double(double)>& dfdx, const char* name);

/// Cross-correlation, no bias: input [N,Cin,H,W], weight [Cout,Cin,k,k].
Tensor conv2d(const Tensor& input, const Tensor& weight, int stride, int padding);

/// Batch normalization over [N,C,H,W] (per-channel) or [N,C] (per-feature).
/// Train mode normalizes by batch statistics and writes running_mean /
/// running_var in place (unbiased variance); eval mode reads them.
Tensor batchnorm(const Tensor& input, const Tensor& gamma, const Tensor& beta,
                 Tensor running_mean, Tensor running_var, bool training,
                 double momentum = 0.1, double eps = 1e-5);

/// input [N,D] x weight [K,D]^T + bias [K].
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

/// [N,C,H,W] -> [N,C], mean over the spatial extent.
Tensor global_avg_pool(const Tensor& x);

/// Multiplies dim-1 slices by a length-C vector: y[n,c,...] = x[n,c,...]*s[c].
Tensor scale_channels(const Tensor& x, const Tensor& s);

/// Scatters channels into a wider zero tensor: y[n, index_map[c], ...] =
/// x[n, c, ...]. Aligns residual branches whose surviving channel sets
/// differ after hard pruning.
Tensor embed_channels(const Tensor& x, const std::vector<int64_t>& index_map,
                      int64_t out_channels);

/// Mean over the batch of -log softmax(logits)[label]; [1] output with a
/// 64-bit mirror. Backward is (softmax - onehot)/N.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// Row argmax of a [N,K] tensor (ties to the lower index). Not recorded.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace whittle::ndgrad
