#include "cellnas/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "cellnas/errors.hpp"

namespace cellnas::ops {

namespace {

void require_rank(const Tensor& x, std::size_t rank, const char* op) {
    if (x.rank() != rank) {
        throw DimensionError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                             shape_str(x.shape()));
    }
}

void require_same_shape(const Tensor& x, const Tensor& y, const char* op) {
    if (x.shape() != y.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(x.shape()) + " vs " +
                             shape_str(y.shape()));
    }
}

struct Dims4 {
    std::size_t b, c, h, w;
    explicit Dims4(const Tensor& x) : b(x.dim(0)), c(x.dim(1)), h(x.dim(2)), w(x.dim(3)) {}
    std::size_t plane() const { return h * w; }
};

// Range [lo, hi) of output positions o with 0 <= o*stride - pad + offset < in.
void valid_range(std::ptrdiff_t in, std::ptrdiff_t out, std::ptrdiff_t stride, std::ptrdiff_t pad,
                 std::ptrdiff_t offset, std::ptrdiff_t& lo, std::ptrdiff_t& hi) {
    const std::ptrdiff_t shift = pad - offset;  // need o*stride >= shift and o*stride <= in-1+shift
    lo = shift <= 0 ? 0 : (shift + stride - 1) / stride;
    const std::ptrdiff_t top = in - 1 + shift;
    hi = top < 0 ? 0 : std::min(out, top / stride + 1);
    if (hi < lo) hi = lo;
}

}  // namespace

std::size_t conv_out_size(std::size_t in, std::size_t kernel, const Conv2dParams& p) {
    const std::ptrdiff_t span = static_cast<std::ptrdiff_t>(p.dilation) * (static_cast<std::ptrdiff_t>(kernel) - 1) + 1;
    const std::ptrdiff_t padded = static_cast<std::ptrdiff_t>(in) + 2 * p.padding;
    if (padded < span) return 0;
    return static_cast<std::size_t>((padded - span) / p.stride + 1);
}

Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& kernel, const Conv2dParams& p) {
    require_rank(x, 4, "conv2d input");
    require_rank(kernel, 4, "conv2d kernel");
    if (p.stride <= 0 || p.dilation <= 0) throw ParameterError("conv2d: stride and dilation must be positive");
    if (p.padding < 0) throw ParameterError("conv2d: padding must be non-negative");
    if (p.groups <= 0) throw ParameterError("conv2d: groups must be positive");
    const Dims4 in(x);
    const std::size_t cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
    const auto groups = static_cast<std::size_t>(p.groups);
    if (in.c % groups != 0 || cout % groups != 0) {
        throw DimensionError("conv2d: groups=" + std::to_string(groups) + " must divide Cin=" + std::to_string(in.c) +
                             " and Cout=" + std::to_string(cout));
    }
    const std::size_t cin_g = in.c / groups, cout_g = cout / groups;
    if (kernel.dim(1) != cin_g) {
        throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " expects " +
                             std::to_string(kernel.dim(1)) + " input channels per group, input has " +
                             std::to_string(cin_g));
    }
    const std::size_t ho = conv_out_size(in.h, kh, p), wo = conv_out_size(in.w, kw, p);
    if (ho == 0 || wo == 0) {
        throw DimensionError("conv2d: kernel " + shape_str(kernel.shape()) + " does not fit input " +
                             shape_str(x.shape()));
    }

    Tensor out = Tensor::zeros({in.b, cout, ho, wo});
    const auto xd = x.data();
    const auto kd = kernel.data();
    auto od = out.data();
    const std::ptrdiff_t s = p.stride, pad = p.padding, dil = p.dilation;

    // Iterates every (input, kernel, output) triple in a fixed order and hands
    // flat indices to `visit(x_idx, k_idx, o_idx)` one output row at a time.
    auto sweep = [=](auto&& visit_row) {
        for (std::size_t b = 0; b < in.b; ++b) {
            for (std::size_t oc = 0; oc < cout; ++oc) {
                const std::size_t g = oc / cout_g;
                for (std::size_t icl = 0; icl < cin_g; ++icl) {
                    const std::size_t ic = g * cin_g + icl;
                    const std::size_t x_plane = (b * in.c + ic) * in.plane();
                    const std::size_t o_plane = (b * cout + oc) * ho * wo;
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        std::ptrdiff_t oy_lo, oy_hi;
                        valid_range(static_cast<std::ptrdiff_t>(in.h), static_cast<std::ptrdiff_t>(ho), s, pad,
                                    static_cast<std::ptrdiff_t>(ky) * dil, oy_lo, oy_hi);
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            std::ptrdiff_t ox_lo, ox_hi;
                            valid_range(static_cast<std::ptrdiff_t>(in.w), static_cast<std::ptrdiff_t>(wo), s, pad,
                                        static_cast<std::ptrdiff_t>(kx) * dil, ox_lo, ox_hi);
                            const std::size_t k_idx = ((oc * cin_g + icl) * kh + ky) * kw + kx;
                            for (std::ptrdiff_t oy = oy_lo; oy < oy_hi; ++oy) {
                                const std::ptrdiff_t iy = oy * s - pad + static_cast<std::ptrdiff_t>(ky) * dil;
                                const std::ptrdiff_t ix0 = ox_lo * s - pad + static_cast<std::ptrdiff_t>(kx) * dil;
                                visit_row(x_plane + static_cast<std::size_t>(iy) * in.w + static_cast<std::size_t>(ix0),
                                          k_idx, o_plane + static_cast<std::size_t>(oy) * wo + static_cast<std::size_t>(ox_lo),
                                          static_cast<std::size_t>(ox_hi - ox_lo));
                            }
                        }
                    }
                }
            }
        }
    };

    sweep([&](std::size_t xi, std::size_t ki, std::size_t oi, std::size_t n) {
        const double w = kd[ki];
        for (std::size_t t = 0; t < n; ++t) od[oi + t] += w * xd[xi + t * static_cast<std::size_t>(s)];
    });

    if (tape.needs_grad({&x, &kernel})) {
        tape.record(out, [x, kernel, out, sweep, s]() mutable {
            const auto gout = std::as_const(out).grad();
            const auto xd = std::as_const(x).data();
            const auto kd = std::as_const(kernel).data();
            const bool gx = x.requires_grad(), gk = kernel.requires_grad();
            std::span<double> dx = gx ? x.grad() : std::span<double>{};
            std::span<double> dk = gk ? kernel.grad() : std::span<double>{};
            const auto step = static_cast<std::size_t>(s);
            sweep([&](std::size_t xi, std::size_t ki, std::size_t oi, std::size_t n) {
                if (gx) {
                    const double w = kd[ki];
                    for (std::size_t t = 0; t < n; ++t) dx[xi + t * step] += w * gout[oi + t];
                }
                if (gk) {
                    double acc = 0.0;
                    for (std::size_t t = 0; t < n; ++t) acc += gout[oi + t] * xd[xi + t * step];
                    dk[ki] += acc;
                }
            });
        });
    }
    return out;
}

Tensor max_pool3(Tape& tape, const Tensor& x) {
    require_rank(x, 4, "max_pool3");
    const Dims4 d(x);
    if (d.h == 0 || d.w == 0) throw ParameterError("max_pool3: spatial size must be positive");
    Tensor out = Tensor::zeros(x.shape());
    std::vector<std::size_t> argmax(x.numel());
    const auto xd = x.data();
    auto od = out.data();
    for (std::size_t pl = 0; pl < d.b * d.c; ++pl) {
        const std::size_t base = pl * d.plane();
        for (std::size_t y = 0; y < d.h; ++y) {
            for (std::size_t xx = 0; xx < d.w; ++xx) {
                double best = -std::numeric_limits<double>::infinity();
                std::size_t best_idx = base + y * d.w + xx;
                for (std::size_t yy = y == 0 ? 0 : y - 1; yy <= std::min(d.h - 1, y + 1); ++yy) {
                    for (std::size_t xw = xx == 0 ? 0 : xx - 1; xw <= std::min(d.w - 1, xx + 1); ++xw) {
                        const std::size_t idx = base + yy * d.w + xw;
                        if (xd[idx] > best) {
                            best = xd[idx];
                            best_idx = idx;
                        }
                    }
                }
                od[base + y * d.w + xx] = best;
                argmax[base + y * d.w + xx] = best_idx;
            }
        }
    }
    if (tape.needs_grad({&x})) {
        tape.record(out, [x, out, argmax = std::move(argmax)]() mutable {
            const auto g = std::as_const(out).grad();
            auto dx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) dx[argmax[i]] += g[i];
        });
    }
    return out;
}

Tensor avg_pool3(Tape& tape, const Tensor& x) {
    require_rank(x, 4, "avg_pool3");
    const Dims4 d(x);
    if (d.h == 0 || d.w == 0) throw ParameterError("avg_pool3: spatial size must be positive");
    Tensor out = Tensor::zeros(x.shape());
    const auto xd = x.data();
    auto od = out.data();
    auto window = [d](std::size_t y, std::size_t xx, auto&& visit) {
        const std::size_t y0 = y == 0 ? 0 : y - 1, y1 = std::min(d.h - 1, y + 1);
        const std::size_t x0 = xx == 0 ? 0 : xx - 1, x1 = std::min(d.w - 1, xx + 1);
        const double inv = 1.0 / static_cast<double>((y1 - y0 + 1) * (x1 - x0 + 1));
        for (std::size_t yy = y0; yy <= y1; ++yy)
            for (std::size_t xw = x0; xw <= x1; ++xw) visit(yy * d.w + xw, inv);
    };
    for (std::size_t pl = 0; pl < d.b * d.c; ++pl) {
        const std::size_t base = pl * d.plane();
        for (std::size_t y = 0; y < d.h; ++y) {
            for (std::size_t xx = 0; xx < d.w; ++xx) {
                double acc = 0.0, inv = 0.0;
                window(y, xx, [&](std::size_t off, double w) {
                    acc += xd[base + off];
                    inv = w;
                });
                od[base + y * d.w + xx] = acc * inv;
            }
        }
    }
    if (tape.needs_grad({&x})) {
        tape.record(out, [x, out, d, window]() mutable {
            const auto g = std::as_const(out).grad();
            auto dx = x.grad();
            for (std::size_t pl = 0; pl < d.b * d.c; ++pl) {
                const std::size_t base = pl * d.plane();
                for (std::size_t y = 0; y < d.h; ++y)
                    for (std::size_t xx = 0; xx < d.w; ++xx) {
                        const double go = g[base + y * d.w + xx];
                        window(y, xx, [&](std::size_t off, double w) { dx[base + off] += go * w; });
                    }
            }
        });
    }
    return out;
}

namespace {

// Elementwise unary op with derivative expressed through (input, output).
template <class Fwd, class Deriv>
Tensor unary(Tape& tape, const Tensor& x, Fwd fwd, Deriv deriv) {
    Tensor out = Tensor::zeros(x.shape());
    const auto xd = x.data();
    auto od = out.data();
    for (std::size_t i = 0; i < xd.size(); ++i) od[i] = fwd(xd[i]);
    if (tape.needs_grad({&x})) {
        tape.record(out, [x, out, deriv]() mutable {
            const auto g = std::as_const(out).grad();
            const auto xd = std::as_const(x).data();
            const auto od = std::as_const(out).data();
            auto dx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * deriv(xd[i], od[i]);
        });
    }
    return out;
}

}  // namespace

Tensor relu(Tape& tape, const Tensor& x) {
    return unary(
        tape, x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(Tape& tape, const Tensor& x) {
    return unary(
        tape, x,
        [](double v) {
            if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
            const double e = std::exp(v);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor scale(Tape& tape, const Tensor& x, double c) {
    return unary(tape, x, [c](double v) { return c * v; }, [c](double, double) { return c; });
}

Tensor shift(Tape& tape, const Tensor& x, double c) {
    return unary(tape, x, [c](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor add(Tape& tape, const Tensor& x, const Tensor& y) {
    require_same_shape(x, y, "add");
    Tensor out = Tensor::zeros(x.shape());
    const auto xd = x.data(), yd = y.data();
    auto od = out.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] + yd[i];
    if (tape.needs_grad({&x, &y})) {
        tape.record(out, [x, y, out]() mutable {
            const auto g = std::as_const(out).grad();
            for (const Tensor* t : {&x, &y}) {
                if (!t->requires_grad()) continue;
                auto d = t->grad();
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
            }
        });
    }
    return out;
}

Tensor mul(Tape& tape, const Tensor& x, const Tensor& y) {
    require_same_shape(x, y, "mul");
    Tensor out = Tensor::zeros(x.shape());
    const auto xd = x.data(), yd = y.data();
    auto od = out.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * yd[i];
    if (tape.needs_grad({&x, &y})) {
        tape.record(out, [x, y, out]() mutable {
            const auto g = std::as_const(out).grad();
            const auto xd = std::as_const(x).data(), yd = std::as_const(y).data();
            if (x.requires_grad()) {
                auto d = x.grad();
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * yd[i];
            }
            if (y.requires_grad()) {
                auto d = y.grad();
                for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * xd[i];
            }
        });
    }
    return out;
}

Tensor sum(Tape& tape, const Tensor& x) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    Tensor out = Tensor::scalar(acc);
    if (tape.needs_grad({&x})) {
        tape.record(out, [x, out]() mutable {
            const double g = std::as_const(out).grad()[0];
            for (double& d : x.grad()) d += g;
        });
    }
    return out;
}

Tensor mean(Tape& tape, const Tensor& x) {
    if (x.numel() == 0) throw DimensionError("mean: empty tensor");
    return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel()));
}

Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) {
        throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(x.shape()));
    }
    const auto& sh = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= sh[i];
    for (std::size_t i = axis + 1; i < sh.size(); ++i) inner *= sh[i];
    const std::size_t len = sh[axis];
    if (len == 0) throw DimensionError("softmax: empty reduction axis");

    Tensor out = Tensor::zeros(sh);
    const auto xd = x.data();
    auto od = out.data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xd[base + k * inner]);
            double z = 0.0;
            for (std::size_t k = 0; k < len; ++k) {
                const double e = std::exp(xd[base + k * inner] - mx);
                od[base + k * inner] = e;
                z += e;
            }
            for (std::size_t k = 0; k < len; ++k) od[base + k * inner] /= z;
        }
    }
    if (tape.needs_grad({&x})) {
        tape.record(out, [x, out, outer, inner, len]() mutable {
            const auto g = std::as_const(out).grad();
            const auto y = std::as_const(out).data();
            auto dx = x.grad();
            for (std::size_t o = 0; o < outer; ++o) {
                for (std::size_t in = 0; in < inner; ++in) {
                    const std::size_t base = o * len * inner + in;
                    double dot = 0.0;
                    for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
                    for (std::size_t k = 0; k < len; ++k) {
                        const std::size_t i = base + k * inner;
                        dx[i] += y[i] * (g[i] - dot);
                    }
                }
            }
        });
    }
    return out;
}

Tensor normalize(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& bias, NormStats& stats,
                 NormMode mode, bool update_running) {
    require_rank(x, 4, "normalize");
    const Dims4 d(x);
    if (gain.numel() != d.c || bias.numel() != d.c || stats.running_mean.size() != d.c ||
        stats.running_var.size() != d.c) {
        throw DimensionError("normalize: input has " + std::to_string(d.c) + " channels but gain/bias have " +
                             std::to_string(gain.numel()) + "/" + std::to_string(bias.numel()));
    }
    const std::size_t n = d.b * d.plane();
    if (n == 0) throw DimensionError("normalize: empty input");
    const auto xd = x.data();
    const auto gd = gain.data(), bd = bias.data();

    std::vector<double> mu(d.c), inv_std(d.c);
    for (std::size_t c = 0; c < d.c; ++c) {
        if (mode == NormMode::Train) {
            double s = 0.0;
            for (std::size_t b = 0; b < d.b; ++b) {
                const std::size_t base = (b * d.c + c) * d.plane();
                for (std::size_t i = 0; i < d.plane(); ++i) s += xd[base + i];
            }
            const double m = s / static_cast<double>(n);
            double v = 0.0;
            for (std::size_t b = 0; b < d.b; ++b) {
                const std::size_t base = (b * d.c + c) * d.plane();
                for (std::size_t i = 0; i < d.plane(); ++i) {
                    const double t = xd[base + i] - m;
                    v += t * t;
                }
            }
            const double var = v / static_cast<double>(n);
            mu[c] = m;
            inv_std[c] = 1.0 / std::sqrt(var + kNormEpsilon);
            if (update_running) {
                const double unbiased = n > 1 ? v / static_cast<double>(n - 1) : var;
                stats.running_mean[c] = (1.0 - kNormMomentum) * stats.running_mean[c] + kNormMomentum * m;
                stats.running_var[c] = (1.0 - kNormMomentum) * stats.running_var[c] + kNormMomentum * unbiased;
            }
        } else {
            mu[c] = stats.running_mean[c];
            inv_std[c] = 1.0 / std::sqrt(stats.running_var[c] + kNormEpsilon);
        }
    }

    Tensor out = Tensor::zeros(x.shape());
    Tensor xhat = Tensor::zeros(x.shape());
    auto od = out.data();
    auto hd = xhat.data();
    for (std::size_t b = 0; b < d.b; ++b) {
        for (std::size_t c = 0; c < d.c; ++c) {
            const std::size_t base = (b * d.c + c) * d.plane();
            for (std::size_t i = 0; i < d.plane(); ++i) {
                const double h = (xd[base + i] - mu[c]) * inv_std[c];
                hd[base + i] = h;
                od[base + i] = gd[c] * h + bd[c];
            }
        }
    }

    if (tape.needs_grad({&x, &gain, &bias})) {
        tape.record(out, [x, gain, bias, out, xhat, inv_std = std::move(inv_std), d, n, mode]() mutable {
            const auto g = std::as_const(out).grad();
            const auto hd = std::as_const(xhat).data();
            const auto gd = std::as_const(gain).data();
            std::vector<double> sum_g(d.c, 0.0), sum_gh(d.c, 0.0);
            for (std::size_t b = 0; b < d.b; ++b) {
                for (std::size_t c = 0; c < d.c; ++c) {
                    const std::size_t base = (b * d.c + c) * d.plane();
                    for (std::size_t i = 0; i < d.plane(); ++i) {
                        sum_g[c] += g[base + i];
                        sum_gh[c] += g[base + i] * hd[base + i];
                    }
                }
            }
            if (gain.requires_grad()) {
                auto dg = gain.grad();
                for (std::size_t c = 0; c < d.c; ++c) dg[c] += sum_gh[c];
            }
            if (bias.requires_grad()) {
                auto db = bias.grad();
                for (std::size_t c = 0; c < d.c; ++c) db[c] += sum_g[c];
            }
            if (x.requires_grad()) {
                auto dx = x.grad();
                const double inv_n = 1.0 / static_cast<double>(n);
                for (std::size_t b = 0; b < d.b; ++b) {
                    for (std::size_t c = 0; c < d.c; ++c) {
                        const std::size_t base = (b * d.c + c) * d.plane();
                        const double k = gd[c] * inv_std[c];
                        for (std::size_t i = 0; i < d.plane(); ++i) {
                            if (mode == NormMode::Train) {
                                dx[base + i] += k * (g[base + i] - inv_n * sum_g[c] - inv_n * hd[base + i] * sum_gh[c]);
                            } else {
                                dx[base + i] += k * g[base + i];
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

Tensor concat_channels(Tape& tape, std::span<const Tensor> xs) {
    if (xs.empty()) throw DimensionError("concat_channels: no inputs");
    for (const auto& t : xs) require_rank(t, 4, "concat_channels");
    const Dims4 first(xs[0]);
    std::size_t total_c = 0;
    for (const auto& t : xs) {
        const Dims4 d(t);
        if (d.b != first.b || d.h != first.h || d.w != first.w) {
            throw DimensionError("concat_channels: " + shape_str(t.shape()) + " disagrees with " +
                                 shape_str(xs[0].shape()) + " outside the channel axis");
        }
        total_c += d.c;
    }
    Tensor out = Tensor::zeros({first.b, total_c, first.h, first.w});
    auto od = out.data();
    const std::size_t plane = first.plane();
    std::size_t c_off = 0;
    for (const auto& t : xs) {
        const Dims4 d(t);
        const auto td = t.data();
        for (std::size_t b = 0; b < d.b; ++b)
            std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(b * d.c * plane), d.c * plane,
                        od.begin() + static_cast<std::ptrdiff_t>((b * total_c + c_off) * plane));
        c_off += d.c;
    }
    if (tape.needs_grad(xs)) {
        tape.record(out, [inputs = std::vector<Tensor>(xs.begin(), xs.end()), out, total_c, plane]() mutable {
            const auto g = std::as_const(out).grad();
            std::size_t c_off = 0;
            for (auto& t : inputs) {
                const Dims4 d(t);
                if (t.requires_grad()) {
                    auto dt = t.grad();
                    for (std::size_t b = 0; b < d.b; ++b)
                        for (std::size_t i = 0; i < d.c * plane; ++i)
                            dt[b * d.c * plane + i] += g[(b * total_c + c_off) * plane + i];
                }
                c_off += d.c;
            }
        });
    }
    return out;
}

Tensor mse_loss(Tape& tape, const Tensor& pred, const Tensor& target) {
    require_same_shape(pred, target, "mse_loss");
    if (pred.numel() == 0) throw DimensionError("mse_loss: empty input");
    const auto p = pred.data(), t = target.data();
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double r = p[i] - t[i];
        acc += r * r;
    }
    const double inv_n = 1.0 / static_cast<double>(p.size());
    Tensor out = Tensor::scalar(acc * inv_n);
    if (tape.needs_grad({&pred, &target})) {
        tape.record(out, [pred, target, out, inv_n]() mutable {
            const double g = std::as_const(out).grad()[0];
            const auto p = std::as_const(pred).data(), t = std::as_const(target).data();
            if (pred.requires_grad()) {
                auto d = pred.grad();
                for (std::size_t i = 0; i < p.size(); ++i) d[i] += g * 2.0 * inv_n * (p[i] - t[i]);
            }
            if (target.requires_grad()) {
                auto d = target.grad();
                for (std::size_t i = 0; i < p.size(); ++i) d[i] -= g * 2.0 * inv_n * (p[i] - t[i]);
            }
        });
    }
    return out;
}

Tensor kl_div_loss(Tape& tape, const Tensor& pred_logits, const Tensor& target_dist) {
    require_same_shape(pred_logits, target_dist, "kl_div_loss");
    if (pred_logits.rank() < 2) throw DimensionError("kl_div_loss: need [batch, ...] inputs");
    const std::size_t batch = pred_logits.dim(0);
    const std::size_t len = pred_logits.numel() / batch;
    const auto p = pred_logits.data(), t = target_dist.data();

    std::vector<double> log_q(p.size());
    double total = 0.0;
    for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t base = b * len;
        double tsum = 0.0;
        for (std::size_t k = 0; k < len; ++k) {
            if (!(t[base + k] >= 0.0)) {
                throw ValidationError("kl_div_loss: negative target entry in batch item " + std::to_string(b));
            }
            tsum += t[base + k];
        }
        if (std::abs(tsum - 1.0) > 1e-6) {
            throw ValidationError("kl_div_loss: target of batch item " + std::to_string(b) + " sums to " +
                                  std::to_string(tsum));
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, p[base + k]);
        double z = 0.0;
        for (std::size_t k = 0; k < len; ++k) z += std::exp(p[base + k] - mx);
        const double lse = mx + std::log(z);
        for (std::size_t k = 0; k < len; ++k) {
            log_q[base + k] = p[base + k] - lse;
            const double tk = t[base + k];
            if (tk > 0.0) total += tk * (std::log(tk) - log_q[base + k]);
        }
    }
    const double inv_b = 1.0 / static_cast<double>(batch);
    Tensor out = Tensor::scalar(total * inv_b);
    if (tape.needs_grad({&pred_logits})) {
        tape.record(out, [pred_logits, target_dist, out, log_q = std::move(log_q), batch, len, inv_b]() mutable {
            const double g = std::as_const(out).grad()[0];
            const auto t = std::as_const(target_dist).data();
            auto d = pred_logits.grad();
            for (std::size_t b = 0; b < batch; ++b) {
                const std::size_t base = b * len;
                double tsum = 0.0;
                for (std::size_t k = 0; k < len; ++k) tsum += t[base + k];
                for (std::size_t k = 0; k < len; ++k) {
                    d[base + k] += g * inv_b * (std::exp(log_q[base + k]) * tsum - t[base + k]);
                }
            }
        });
    }
    return out;
}

Tensor row(Tape& tape, const Tensor& x, std::size_t r) {
    require_rank(x, 2, "row");
    if (r >= x.dim(0)) throw DimensionError("row: index " + std::to_string(r) + " out of " + shape_str(x.shape()));
    const std::size_t m = x.dim(1);
    const auto xd = x.data();
    Tensor out = Tensor::from({m}, std::vector<double>(xd.begin() + static_cast<std::ptrdiff_t>(r * m),
                                                       xd.begin() + static_cast<std::ptrdiff_t>((r + 1) * m)));
    if (tape.needs_grad({&x})) {
        tape.record(out, [x, out, r, m]() mutable {
            const auto g = std::as_const(out).grad();
            auto d = x.grad();
            for (std::size_t k = 0; k < m; ++k) d[r * m + k] += g[k];
        });
    }
    return out;
}

Tensor weighted_sum(Tape& tape, std::span<const Tensor> xs, const Tensor& w, const Shape& shape) {
    if (w.numel() != xs.size()) {
        throw DimensionError("weighted_sum: " + std::to_string(xs.size()) + " terms but " + std::to_string(w.numel()) +
                             " weights");
    }
    for (const auto& t : xs) {
        if (t.defined() && t.shape() != shape) {
            throw DimensionError("weighted_sum: term shape " + shape_str(t.shape()) + " != " + shape_str(shape));
        }
    }
    Tensor out = Tensor::zeros(shape);
    auto od = out.data();
    const auto wd = w.data();
    for (std::size_t k = 0; k < xs.size(); ++k) {
        if (!xs[k].defined()) continue;
        const auto td = xs[k].data();
        const double wk = wd[k];
        for (std::size_t i = 0; i < od.size(); ++i) od[i] += wk * td[i];
    }
    bool any = tape.needs_grad({&w}) || tape.needs_grad(xs);
    if (any) {
        tape.record(out, [terms = std::vector<Tensor>(xs.begin(), xs.end()), w, out]() mutable {
            const auto g = std::as_const(out).grad();
            const auto wd = std::as_const(w).data();
            std::span<double> dw = w.requires_grad() ? w.grad() : std::span<double>{};
            for (std::size_t k = 0; k < terms.size(); ++k) {
                auto& t = terms[k];
                if (!t.defined()) continue;
                if (t.requires_grad()) {
                    auto dt = t.grad();
                    for (std::size_t i = 0; i < g.size(); ++i) dt[i] += wd[k] * g[i];
                }
                if (!dw.empty()) {
                    const auto td = std::as_const(t).data();
                    double acc = 0.0;
                    for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * td[i];
                    dw[k] += acc;
                }
            }
        });
    }
    return out;
}

Tensor dropout(Tape& tape, const Tensor& x, double rate, Rng& rng) {
    if (rate < 0.0 || std::isnan(rate)) throw ParameterError("dropout: rate must be in [0, 1]");
    if (rate == 0.0) return x;
    std::vector<double> mask(x.numel(), 0.0);
    if (rate < 1.0) {
        const double keep_scale = 1.0 / (1.0 - rate);
        for (double& m : mask) m = rng.uniform() >= rate ? keep_scale : 0.0;
    }
    Tensor out = Tensor::zeros(x.shape());
    const auto xd = x.data();
    auto od = out.data();
    for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * mask[i];
    if (tape.needs_grad({&x})) {
        tape.record(out, [x, out, mask = std::move(mask)]() mutable {
            const auto g = std::as_const(out).grad();
            auto dx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * mask[i];
        });
    }
    return out;
}

Tensor resize_nearest(Tape& tape, const Tensor& x, std::size_t height, std::size_t width) {
    require_rank(x, 4, "resize_nearest");
    const Dims4 d(x);
    if (height == 0 || width == 0 || d.h == 0 || d.w == 0) throw ParameterError("resize_nearest: empty spatial size");
    if (d.h == height && d.w == width) return x;
    std::vector<std::size_t> src(d.b * d.c * height * width);
    Tensor out = Tensor::zeros({d.b, d.c, height, width});
    const auto xd = x.data();
    auto od = out.data();
    for (std::size_t pl = 0; pl < d.b * d.c; ++pl) {
        for (std::size_t y = 0; y < height; ++y) {
            const std::size_t sy = y * d.h / height;
            for (std::size_t xx = 0; xx < width; ++xx) {
                const std::size_t sx = xx * d.w / width;
                const std::size_t o = (pl * height + y) * width + xx;
                src[o] = pl * d.plane() + sy * d.w + sx;
                od[o] = xd[src[o]];
            }
        }
    }
    if (tape.needs_grad({&x})) {
        tape.record(out, [x, out, src = std::move(src)]() mutable {
            const auto g = std::as_const(out).grad();
            auto dx = x.grad();
            for (std::size_t i = 0; i < g.size(); ++i) dx[src[i]] += g[i];
        });
    }
    return out;
}

Tensor bias_add(Tape& tape, const Tensor& x, const Tensor& bias) {
    require_rank(x, 4, "bias_add");
    const Dims4 d(x);
    if (bias.numel() != d.c) {
        throw DimensionError("bias_add: " + std::to_string(bias.numel()) + " biases for " + std::to_string(d.c) +
                             " channels");
    }
    Tensor out = Tensor::zeros(x.shape());
    const auto xd = x.data(), bd = bias.data();
    auto od = out.data();
    for (std::size_t b = 0; b < d.b; ++b)
        for (std::size_t c = 0; c < d.c; ++c) {
            const std::size_t base = (b * d.c + c) * d.plane();
            for (std::size_t i = 0; i < d.plane(); ++i) od[base + i] = xd[base + i] + bd[c];
        }
    if (tape.needs_grad({&x, &bias})) {
        tape.record(out, [x, bias, out, d]() mutable {
            const auto g = std::as_const(out).grad();
            if (x.requires_grad()) {
                auto dx = x.grad();
                for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
            }
            if (bias.requires_grad()) {
                auto db = bias.grad();
                for (std::size_t b = 0; b < d.b; ++b)
                    for (std::size_t c = 0; c < d.c; ++c) {
                        const std::size_t base = (b * d.c + c) * d.plane();
                        for (std::size_t i = 0; i < d.plane(); ++i) db[c] += g[base + i];
                    }
            }
        });
    }
    return out;
}

Tensor matvec(Tape& tape, const Tensor& a, const Tensor& x) {
    require_rank(a, 2, "matvec matrix");
    require_rank(x, 1, "matvec vector");
    const std::size_t m = a.dim(0), n = a.dim(1);
    if (x.dim(0) != n) {
        throw DimensionError("matvec: " + shape_str(a.shape()) + " times " + shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros({m});
    const auto ad = a.data(), xd = x.data();
    auto od = out.data();
    for (std::size_t i = 0; i < m; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < n; ++j) acc += ad[i * n + j] * xd[j];
        od[i] = acc;
    }
    if (tape.needs_grad({&a, &x})) {
        tape.record(out, [a, x, out, m, n]() mutable {
            const auto g = std::as_const(out).grad();
            const auto ad = std::as_const(a).data(), xd = std::as_const(x).data();
            if (x.requires_grad()) {
                auto dx = x.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) dx[j] += ad[i * n + j] * g[i];
            }
            if (a.requires_grad()) {
                auto da = a.grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) da[i * n + j] += g[i] * xd[j];
            }
        });
    }
    return out;
}

}  // namespace cellnas::ops
