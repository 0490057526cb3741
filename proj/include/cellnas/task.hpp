#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cellnas/search.hpp"

namespace cellnas {

enum class Objective { CenterMapMSE, CenterMapKL };

// Synthetic two-stream localization task. Each scene holds one ring (the
// target) and a few filled blobs (distractors); the label is a Gaussian
// response map centred on the ring.
struct ToyTaskSpec {
    int image_size = 16;
    int channels = 8;  // per stream
    int n_train = 200;
    int n_val = 200;
    int n_holdout = 100;
    Objective objective = Objective::CenterMapMSE;
    std::uint64_t seed = 0;
    int distractors = 2;
    double noise = 0.05;
    double label_sigma = 1.0;

    bool operator==(const ToyTaskSpec&) const = default;
};

void validate_task(const ToyTaskSpec& spec);

struct Sample {
    Tensor b3;     // [C, S, S]
    Tensor b4;     // [C, S/2, S/2]
    Tensor label;  // [1, S, S]
    int center_y = 0;
    int center_x = 0;
};

class ToyDataset : public BatchSource {
public:
    explicit ToyDataset(ToyTaskSpec spec);

    const ToyTaskSpec& spec() const { return spec_; }
    const std::vector<Sample>& split(DataSplit s) const;

    std::size_t size(DataSplit s) const override { return split(s).size(); }
    Batch make_batch(DataSplit s, std::span<const std::size_t> indices) const override;

private:
    ToyTaskSpec spec_;
    std::vector<Sample> train_, val_, holdout_;
};

// Deterministic in spec; each split draws from its own seed sub-stream.
inline ToyDataset generate_dataset(const ToyTaskSpec& spec) { return ToyDataset(spec); }

// FNV-1a over the bit patterns of a sample's streams.
std::uint64_t sample_hash(const Sample& s);

LossFn loss_for(Objective objective);

// Index of the first maximum of a [S,S] map, row-major.
std::pair<int, int> map_argmax(std::span<const double> map, int height, int width);

// Expected hit (argmax within one pixel of the centre) when ties among maxima
// are broken uniformly at random. A constant map scores the random baseline.
double localization_credit(std::span<const double> map, int height, int width, int center_y, int center_x);

// Probability that a uniformly random pixel lands within one pixel (Chebyshev)
// of each given centre, averaged over the centres.
double random_localization_baseline(std::span<const std::pair<int, int>> centers, int height, int width);

struct EvalReport {
    double loss = 0.0;
    double accuracy = 0.0;  // argmax within one pixel of the true centre
    double random_baseline = 0.0;
    std::size_t samples = 0;
};

}  // namespace cellnas
