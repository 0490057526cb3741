#pragma once

#include <span>
#include <vector>

#include "cellnas/rng.hpp"
#include "cellnas/tensor.hpp"

// Differentiable primitives. Every function takes the tape that records it;
// with a non-recording tape (or no grad-requiring inputs) nothing is recorded.
// Feature maps are [batch, channels, height, width].
namespace cellnas::ops {

struct Conv2dParams {
    int stride = 1;
    int padding = 0;
    int dilation = 1;
    int groups = 1;
};

// Output spatial extent for one axis.
std::size_t conv_out_size(std::size_t in, std::size_t kernel, const Conv2dParams& p);

// Cross-correlation of x [B,Cin,H,W] with kernel [Cout,Cin/groups,kh,kw].
Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernel, const Conv2dParams& p);

// 3x3 window, stride 1, padding 1. Max routes the gradient to the first
// maximal element in row-major window order; average excludes padding.
Tensor max_pool3(Tape& tape, const Tensor& x);
Tensor avg_pool3(Tape& tape, const Tensor& x);

Tensor relu(Tape& tape, const Tensor& x);
Tensor sigmoid(Tape& tape, const Tensor& x);
Tensor add(Tape& tape, const Tensor& x, const Tensor& y);
Tensor mul(Tape& tape, const Tensor& x, const Tensor& y);
Tensor scale(Tape& tape, const Tensor& x, double c);
Tensor shift(Tape& tape, const Tensor& x, double c);
Tensor sum(Tape& tape, const Tensor& x);
Tensor mean(Tape& tape, const Tensor& x);

// Numerically stable softmax along `axis`.
Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis);

// Per-channel running statistics owned by a normalization layer.
struct NormStats {
    std::vector<double> running_mean;
    std::vector<double> running_var;

    static NormStats fresh(std::size_t channels) {
        return {std::vector<double>(channels, 0.0), std::vector<double>(channels, 1.0)};
    }
};

enum class NormMode { Train, Eval };

inline constexpr double kNormEpsilon = 1e-5;
inline constexpr double kNormMomentum = 0.1;

// Batch normalization over (B,H,W) per channel followed by gain/bias.
// Train mode uses batch statistics and, if update_running, folds them into
// `stats` with momentum 0.1 (unbiased variance). Eval mode uses `stats`.
Tensor normalize(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, NormStats& stats,
                 NormMode mode, bool update_running = true);

Tensor concat_channels(Tape& tape, std::span<const Tensor> xs);

// Mean squared error over all elements.
Tensor mse_loss(Tape& tape, const Tensor& pred, const Tensor& target);

// Batch-averaged KL(target || softmax(pred_logits)); the distribution runs over
// every axis after the first. Targets must be normalized per batch item.
Tensor kl_div_loss(Tape& tape, const Tensor& pred_logits, const Tensor& target_dist);

// Row r of a rank-2 tensor.
Tensor row(Tape& tape, const Tensor& x, std::size_t r);

// out = sum_k w[k] * xs[k]. Undefined entries of xs stand for zero tensors and
// are skipped. `shape` is the common shape of the defined entries.
Tensor weighted_sum(Tape& tape, std::span<const Tensor> xs, const Tensor& w, const Shape& shape);

// Inverted dropout: each element is zeroed with probability `rate` and
// otherwise scaled by 1/(1-rate). rate >= 1 zeroes everything.
Tensor dropout(Tape& tape, const Tensor& x, double rate, Rng& rng);

// Nearest-neighbour resize of the spatial axes.
Tensor resize_nearest(Tape& tape, const Tensor& x, std::size_t height, std::size_t width);

// Adds bias[c] to every element of channel c.
Tensor bias_add(Tape& tape, const Tensor& x, const Tensor& bias);

// A [m,n] times x [n].
Tensor matvec(Tape& tape, const Tensor& a, const Tensor& x);

}  // namespace cellnas::ops
