#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "cellnas/ops.hpp"
#include "cellnas/tensor.hpp"

namespace cellnas {

// Candidate operations. The enumerator value is the column index in the
// architecture matrix when the full operation set is in use.
enum class OpKind : std::uint8_t { SepConv3, SepConv5, DilConv3, DilConv5, MaxPool3, AvgPool3, Zero, Skip };

inline constexpr std::array<OpKind, 8> kAllOps = {OpKind::SepConv3, OpKind::SepConv5, OpKind::DilConv3,
                                                   OpKind::DilConv5, OpKind::MaxPool3, OpKind::AvgPool3,
                                                   OpKind::Zero,     OpKind::Skip};

std::string_view op_name(OpKind kind);
std::optional<OpKind> op_from_name(std::string_view name);
bool is_weight_free(OpKind kind);

struct OpOptions {
    int sep_conv_blocks = 2;       // 1 gives a cheaper single-block separable conv
    bool normalize_pools = false;  // parameter-free normalization after pooling
    bool operator==(const OpOptions&) const = default;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

// relu -> depthwise kxk (dilated) -> pointwise 1x1 -> normalize
struct ConvBlock {
    Tensor depthwise;  // [C,1,k,k]
    Tensor pointwise;  // [C,C,1,1]
    Tensor gain;       // [C]
    Tensor bias;       // [C]
    ops::NormStats stats;
    int dilation = 1;
    int padding = 0;
};

class OpInstance {
public:
    OpKind kind() const { return kind_; }
    int channels() const { return channels_; }

    std::vector<NamedTensor> params() const;
    std::size_t param_count() const;

    // Output has the input's shape. Train mode uses batch statistics and, when
    // update_stats is set, advances the running statistics.
    Tensor apply(Tape& tape, const Tensor& x, bool training, bool update_stats = true);

    // Deep copy: parameters and statistics are not shared.
    OpInstance clone() const;

    // Copies parameter values (not statistics) from an op of the same kind/channels.
    void copy_weights_from(const OpInstance& other);

    std::vector<ops::NormStats*> norm_stats();
    std::vector<const ops::NormStats*> norm_stats() const;

private:
    friend OpInstance build_op(OpKind kind, int channels, std::uint64_t seed, const OpOptions& options);

    OpKind kind_ = OpKind::Zero;
    int channels_ = 0;
    std::vector<ConvBlock> blocks_;
    bool normalize_pools_ = false;
    ops::NormStats pool_stats_;
};

// Deterministic in (kind, channels, seed, options). Weights use a fan-in
// scaled uniform init U(-1/sqrt(fan_in), 1/sqrt(fan_in)); gains 1, biases 0.
OpInstance build_op(OpKind kind, int channels, std::uint64_t seed, const OpOptions& options = {});

Tensor apply_op(Tape& tape, OpInstance& op, const Tensor& x, bool training);

// Closed-form learnable parameter count of an op.
std::size_t op_param_count(OpKind kind, int channels, const OpOptions& options = {});

// Convolution multiply-adds for one [1,C,H,W] input.
std::size_t op_mult_adds(OpKind kind, int channels, std::size_t height, std::size_t width,
                         const OpOptions& options = {});

}  // namespace cellnas
