#include "cellnas/task.hpp"

#include <algorithm>
#include <bit>
#include <cmath>

#include "cellnas/errors.hpp"

namespace cellnas {

void validate_task(const ToyTaskSpec& s) {
    if (s.image_size < 8 || s.image_size % 2 != 0) throw ParameterError("task: image_size must be even and >= 8");
    if (s.channels < 1) throw ParameterError("task: channels must be >= 1");
    if (s.n_train < 1 || s.n_val < 1 || s.n_holdout < 1) throw ParameterError("task: every split needs >= 1 sample");
    if (s.distractors < 0) throw ParameterError("task: distractors must be >= 0");
    if (!(s.noise >= 0.0)) throw ParameterError("task: noise must be >= 0");
    if (!(s.label_sigma > 0.0)) throw ParameterError("task: label_sigma must be positive");
}

namespace {

using Image = std::vector<double>;

// Separable Gaussian blur with zero padding; sigma 0 copies.
Image blur(const Image& img, int n, double sigma) {
    if (sigma <= 0.0) return img;
    const int r = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
    double total = 0.0;
    for (int i = -r; i <= r; ++i) total += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (double& v : k) v /= total;
    Image tmp(img.size(), 0.0), out(img.size(), 0.0);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) {
                const int xx = x + i;
                if (xx >= 0 && xx < n) acc += k[static_cast<std::size_t>(i + r)] * img[static_cast<std::size_t>(y * n + xx)];
            }
            tmp[static_cast<std::size_t>(y * n + x)] = acc;
        }
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double acc = 0.0;
            for (int i = -r; i <= r; ++i) {
                const int yy = y + i;
                if (yy >= 0 && yy < n) acc += k[static_cast<std::size_t>(i + r)] * tmp[static_cast<std::size_t>(yy * n + x)];
            }
            out[static_cast<std::size_t>(y * n + x)] = acc;
        }
    return out;
}

Image downsample2(const Image& img, int n) {
    const int m = n / 2;
    Image out(static_cast<std::size_t>(m * m));
    for (int y = 0; y < m; ++y)
        for (int x = 0; x < m; ++x) {
            double acc = 0.0;
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) acc += img[static_cast<std::size_t>((2 * y + dy) * n + 2 * x + dx)];
            out[static_cast<std::size_t>(y * m + x)] = acc / 4.0;
        }
    return out;
}

// Fixed per-channel rendering parameters of a stream.
struct StreamGains {
    std::vector<double> gain;
    std::vector<double> sigma;
};

StreamGains draw_gains(int channels, Rng& rng, double sigma_lo, double sigma_hi) {
    StreamGains g;
    for (int c = 0; c < channels; ++c) {
        g.gain.push_back(rng.uniform(0.5, 1.5) * (rng.uniform() < 0.25 ? -1.0 : 1.0));
        g.sigma.push_back(rng.uniform(sigma_lo, sigma_hi));
    }
    return g;
}

Sample draw_sample(const ToyTaskSpec& spec, const StreamGains& g3, const StreamGains& g4, Rng& rng) {
    const int n = spec.image_size;
    Sample s;
    s.center_y = 3 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - 6)));
    s.center_x = 3 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - 6)));

    Image scene(static_cast<std::size_t>(n * n), 0.0);
    const double radius = rng.uniform(1.8, 2.6);
    const double amp = rng.uniform(0.8, 1.2);
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const double d = std::hypot(y - s.center_y, x - s.center_x);
            scene[static_cast<std::size_t>(y * n + x)] += amp * std::exp(-0.5 * (d - radius) * (d - radius) / 0.25);
        }
    for (int k = 0; k < spec.distractors; ++k) {
        int cy = 0, cx = 0;
        for (int attempt = 0; attempt < 100; ++attempt) {
            cy = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - 4)));
            cx = 2 + static_cast<int>(rng.below(static_cast<std::uint64_t>(n - 4)));
            if (std::hypot(cy - s.center_y, cx - s.center_x) >= 5.0) break;
        }
        const double width = rng.uniform(1.0, 1.6);
        const double a = rng.uniform(0.8, 1.2);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) {
                const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                scene[static_cast<std::size_t>(y * n + x)] += a * std::exp(-0.5 * d2 / (width * width));
            }
    }

    const auto C = static_cast<std::size_t>(spec.channels);
    const auto N = static_cast<std::size_t>(n), M = N / 2;
    s.b3 = Tensor::zeros({C, N, N});
    s.b4 = Tensor::zeros({C, M, M});
    for (std::size_t c = 0; c < C; ++c) {
        const Image fine = blur(scene, n, g3.sigma[c]);
        const Image coarse = downsample2(blur(scene, n, g4.sigma[c]), n);
        for (std::size_t i = 0; i < N * N; ++i) s.b3.data()[c * N * N + i] = g3.gain[c] * fine[i] + spec.noise * rng.normal();
        for (std::size_t i = 0; i < M * M; ++i) s.b4.data()[c * M * M + i] = g4.gain[c] * coarse[i] + spec.noise * rng.normal();
    }

    s.label = Tensor::zeros({1, N, N});
    double total = 0.0;
    const double sig2 = spec.label_sigma * spec.label_sigma;
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            const double d2 = (y - s.center_y) * (y - s.center_y) + (x - s.center_x) * (x - s.center_x);
            total += s.label.data()[static_cast<std::size_t>(y * n + x)] = std::exp(-0.5 * d2 / sig2);
        }
    if (spec.objective == Objective::CenterMapKL)
        for (double& v : s.label.data()) v /= total;
    return s;
}

}  // namespace

ToyDataset::ToyDataset(ToyTaskSpec spec) : spec_(spec) {
    validate_task(spec_);
    Rng render(mix_seed(spec_.seed, 0x7a5c));
    const StreamGains g3 = draw_gains(spec_.channels, render, 0.0, 0.6);
    const StreamGains g4 = draw_gains(spec_.channels, render, 0.5, 1.2);
    const auto fill = [&](std::vector<Sample>& out, int n, std::uint64_t stream) {
        Rng rng(mix_seed(spec_.seed, stream));
        for (int i = 0; i < n; ++i) out.push_back(draw_sample(spec_, g3, g4, rng));
    };
    fill(train_, spec_.n_train, 0x51);
    fill(val_, spec_.n_val, 0x52);
    fill(holdout_, spec_.n_holdout, 0x53);
}

const std::vector<Sample>& ToyDataset::split(DataSplit s) const {
    switch (s) {
        case DataSplit::Train: return train_;
        case DataSplit::Val: return val_;
        case DataSplit::Holdout: return holdout_;
    }
    throw UsageError("unknown split");
}

Batch ToyDataset::make_batch(DataSplit s, std::span<const std::size_t> indices) const {
    const auto& samples = split(s);
    const std::size_t B = indices.size();
    const auto C = static_cast<std::size_t>(spec_.channels);
    const auto N = static_cast<std::size_t>(spec_.image_size), M = N / 2;
    Batch b{{Tensor::zeros({B, C, N, N}), Tensor::zeros({B, C, M, M})}, Tensor::zeros({B, 1, N, N}), 0};
    for (std::size_t k = 0; k < B; ++k) {
        if (indices[k] >= samples.size()) throw DimensionError("make_batch: sample index out of range");
        const Sample& x = samples[indices[k]];
        std::copy(x.b3.data().begin(), x.b3.data().end(), b.inputs[0].data().begin() + static_cast<long>(k * C * N * N));
        std::copy(x.b4.data().begin(), x.b4.data().end(), b.inputs[1].data().begin() + static_cast<long>(k * C * M * M));
        std::copy(x.label.data().begin(), x.label.data().end(), b.target.data().begin() + static_cast<long>(k * N * N));
    }
    return b;
}

std::uint64_t sample_hash(const Sample& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    const auto mix = [&h](std::span<const double> xs) {
        for (double v : xs) {
            auto bits = std::bit_cast<std::uint64_t>(v);
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xff;
                h *= 0x100000001b3ULL;
            }
        }
    };
    mix(s.b3.data());
    mix(s.b4.data());
    return h;
}

LossFn loss_for(Objective objective) {
    if (objective == Objective::CenterMapKL) {
        return [](Tape& tape, const Tensor& pred, const Tensor& target) { return ops::kl_div_loss(tape, pred, target); };
    }
    return [](Tape& tape, const Tensor& pred, const Tensor& target) { return ops::mse_loss(tape, pred, target); };
}

std::pair<int, int> map_argmax(std::span<const double> map, int height, int width) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < static_cast<std::size_t>(height * width); ++i)
        if (map[i] > map[best]) best = i;
    return {static_cast<int>(best) / width, static_cast<int>(best) % width};
}

double localization_credit(std::span<const double> map, int height, int width, int center_y, int center_x) {
    const double top = *std::max_element(map.begin(), map.end());
    int ties = 0, near = 0;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            if (map[static_cast<std::size_t>(y * width + x)] != top) continue;
            ++ties;
            if (std::abs(y - center_y) <= 1 && std::abs(x - center_x) <= 1) ++near;
        }
    return ties ? static_cast<double>(near) / ties : 0.0;
}

double random_localization_baseline(std::span<const std::pair<int, int>> centers, int height, int width) {
    if (centers.empty()) return 0.0;
    double total = 0.0;
    for (auto [cy, cx] : centers) {
        const int rows = std::min(cy + 1, height - 1) - std::max(cy - 1, 0) + 1;
        const int cols = std::min(cx + 1, width - 1) - std::max(cx - 1, 0) + 1;
        total += static_cast<double>(rows * cols) / static_cast<double>(height * width);
    }
    return total / static_cast<double>(centers.size());
}

}  // namespace cellnas
