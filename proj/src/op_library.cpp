#include "cellnas/op_library.hpp"

#include <cmath>

#include "cellnas/errors.hpp"
#include "cellnas/rng.hpp"

namespace cellnas {

namespace {

constexpr std::array<std::string_view, 8> kOpNames = {"sep_conv_3", "sep_conv_5", "dil_conv_3", "dil_conv_5",
                                                      "max_pool_3", "avg_pool_3", "zero",       "skip"};

struct ConvGeometry {
    int kernel;
    int dilation;
    int blocks;
};

std::optional<ConvGeometry> conv_geometry(OpKind kind, const OpOptions& options) {
    switch (kind) {
        case OpKind::SepConv3: return ConvGeometry{3, 1, options.sep_conv_blocks};
        case OpKind::SepConv5: return ConvGeometry{5, 1, options.sep_conv_blocks};
        case OpKind::DilConv3: return ConvGeometry{3, 2, 1};
        case OpKind::DilConv5: return ConvGeometry{5, 2, 1};
        default: return std::nullopt;
    }
}

Tensor uniform_init(Shape shape, std::size_t fan_in, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (double& v : t.data()) v = rng.uniform(-bound, bound);
    return t;
}

}  // namespace

std::string_view op_name(OpKind kind) { return kOpNames[static_cast<std::size_t>(kind)]; }

std::optional<OpKind> op_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kOpNames.size(); ++i)
        if (kOpNames[i] == name) return static_cast<OpKind>(i);
    return std::nullopt;
}

bool is_weight_free(OpKind kind) {
    return kind == OpKind::Zero || kind == OpKind::Skip || kind == OpKind::MaxPool3 || kind == OpKind::AvgPool3;
}

OpInstance build_op(OpKind kind, int channels, std::uint64_t seed, const OpOptions& options) {
    if (channels < 1) throw ParameterError("build_op: channels must be >= 1, got " + std::to_string(channels));
    if (options.sep_conv_blocks < 1) throw ParameterError("build_op: sep_conv_blocks must be >= 1");
    OpInstance op;
    op.kind_ = kind;
    op.channels_ = channels;
    op.normalize_pools_ = options.normalize_pools && (kind == OpKind::MaxPool3 || kind == OpKind::AvgPool3);
    if (op.normalize_pools_) op.pool_stats_ = ops::NormStats::fresh(static_cast<std::size_t>(channels));

    if (auto geo = conv_geometry(kind, options)) {
        Rng rng(mix_seed(seed, static_cast<std::uint64_t>(kind)));
        const auto c = static_cast<std::size_t>(channels);
        const auto k = static_cast<std::size_t>(geo->kernel);
        for (int b = 0; b < geo->blocks; ++b) {
            ConvBlock block;
            block.dilation = geo->dilation;
            block.padding = geo->dilation * (geo->kernel - 1) / 2;
            block.depthwise = uniform_init({c, 1, k, k}, k * k, rng);
            block.pointwise = uniform_init({c, c, 1, 1}, c, rng);
            block.gain = Tensor::full({c}, 1.0, true);
            block.bias = Tensor::zeros({c}, true);
            block.stats = ops::NormStats::fresh(c);
            op.blocks_.push_back(std::move(block));
        }
    }
    return op;
}

std::vector<NamedTensor> OpInstance::params() const {
    std::vector<NamedTensor> out;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
        const std::string prefix = "block" + std::to_string(b) + ".";
        out.push_back({prefix + "depthwise", blocks_[b].depthwise});
        out.push_back({prefix + "pointwise", blocks_[b].pointwise});
        out.push_back({prefix + "norm.gain", blocks_[b].gain});
        out.push_back({prefix + "norm.bias", blocks_[b].bias});
    }
    return out;
}

std::size_t OpInstance::param_count() const {
    std::size_t n = 0;
    for (const auto& p : params()) n += p.tensor.numel();
    return n;
}

Tensor OpInstance::apply(Tape& tape, const Tensor& x, bool training, bool update_stats) {
    if (x.rank() != 4 || x.dim(1) != static_cast<std::size_t>(channels_)) {
        throw DimensionError("apply_op(" + std::string(op_name(kind_)) + "): expected " + std::to_string(channels_) +
                             " channels, got shape " + shape_str(x.shape()));
    }
    const auto mode = training ? ops::NormMode::Train : ops::NormMode::Eval;
    switch (kind_) {
        case OpKind::Zero: return Tensor::zeros(x.shape());
        case OpKind::Skip: return x;
        case OpKind::MaxPool3:
        case OpKind::AvgPool3: {
            Tensor y = kind_ == OpKind::MaxPool3 ? ops::max_pool3(tape, x) : ops::avg_pool3(tape, x);
            if (!normalize_pools_) return y;
            const auto c = static_cast<std::size_t>(channels_);
            return ops::normalize(tape, y, Tensor::full({c}, 1.0), Tensor::zeros({c}), pool_stats_, mode, update_stats);
        }
        default: break;
    }
    Tensor h = x;
    for (auto& block : blocks_) {
        h = ops::relu(tape, h);
        h = ops::conv2d(tape, h, block.depthwise,
                        {.stride = 1, .padding = block.padding, .dilation = block.dilation, .groups = channels_});
        h = ops::conv2d(tape, h, block.pointwise, {});
        h = ops::normalize(tape, h, block.gain, block.bias, block.stats, mode, update_stats);
    }
    return h;
}

OpInstance OpInstance::clone() const {
    OpInstance copy = *this;
    for (auto& b : copy.blocks_) {
        b.depthwise = b.depthwise.clone();
        b.pointwise = b.pointwise.clone();
        b.gain = b.gain.clone();
        b.bias = b.bias.clone();
    }
    return copy;
}

void OpInstance::copy_weights_from(const OpInstance& other) {
    if (other.kind_ != kind_ || other.channels_ != channels_ || other.blocks_.size() != blocks_.size()) {
        throw DimensionError("copy_weights_from: incompatible op " + std::string(op_name(other.kind_)) + " into " +
                             std::string(op_name(kind_)));
    }
    auto mine = params();
    auto theirs = other.params();
    for (std::size_t i = 0; i < mine.size(); ++i) mine[i].tensor.assign(theirs[i].tensor);
}

std::vector<ops::NormStats*> OpInstance::norm_stats() {
    std::vector<ops::NormStats*> out;
    for (auto& b : blocks_) out.push_back(&b.stats);
    if (normalize_pools_) out.push_back(&pool_stats_);
    return out;
}

std::vector<const ops::NormStats*> OpInstance::norm_stats() const {
    std::vector<const ops::NormStats*> out;
    for (const auto& b : blocks_) out.push_back(&b.stats);
    if (normalize_pools_) out.push_back(&pool_stats_);
    return out;
}

Tensor apply_op(Tape& tape, OpInstance& op, const Tensor& x, bool training) { return op.apply(tape, x, training); }

std::size_t op_param_count(OpKind kind, int channels, const OpOptions& options) {
    const auto geo = conv_geometry(kind, options);
    if (!geo) return 0;
    const auto c = static_cast<std::size_t>(channels);
    const auto k = static_cast<std::size_t>(geo->kernel);
    return static_cast<std::size_t>(geo->blocks) * (k * k * c + c * c + 2 * c);
}

std::size_t op_mult_adds(OpKind kind, int channels, std::size_t height, std::size_t width, const OpOptions& options) {
    const auto geo = conv_geometry(kind, options);
    if (!geo) return 0;
    const auto c = static_cast<std::size_t>(channels);
    const auto k = static_cast<std::size_t>(geo->kernel);
    return static_cast<std::size_t>(geo->blocks) * (k * k * c + c * c) * height * width;
}

}  // namespace cellnas
