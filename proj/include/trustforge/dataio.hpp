#pragma once

// Dataset plumbing: IDX parsing (plain or gzipped), a checked downloader,
// stratified splits, and the synthetic sets used by the regression and
// bias experiments. Pixels are scaled by 1/255 into [0,1].

#include "trustforge/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace trustforge::data {

struct Dataset {
    Tensor inputs;               // [N, d] rows; image pixels in [0,1]
    Shape sample_shape;          // {784} flat, {1,28,28} image, {1} regression
    std::vector<Index> labels;   // classification targets, size N (else empty)
    std::vector<Index> groups;   // optional protected attribute per sample
    Tensor targets;              // regression targets [N,1] (else empty)

    Index size() const { return inputs.shape.empty() ? 0 : inputs.shape[0]; }
    Index dim() const { return inputs.shape.size() > 1 ? inputs.shape[1] : 0; }
};

struct SplitPair {
    Dataset train, test;
};

// IDX container: magic 2051 (image, 3 dims) or 2049 (label, 1 dim),
// big-endian u32 dims, then raw unsigned bytes
enum class IdxKind { Images, Labels };
struct IdxData {
    IdxKind kind;
    std::vector<Index> dims;
    std::vector<uint8_t> bytes;
};

IdxData parse_idx(const std::vector<uint8_t>& raw);
std::vector<uint8_t> write_idx(const IdxData& d);  // exact inverse of parse_idx

std::vector<uint8_t> gunzip(const std::vector<uint8_t>& gz);
std::vector<uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<uint8_t>& bytes);

Tensor idx_to_float(const IdxData& d);       // [N, rows*cols] scaled 1/255
std::vector<Index> idx_to_labels(const IdxData& d);

std::string default_data_dir();  // $TRUSTFORGE_DATA_DIR or ~/.cache/trustforge

// reads the four train/test IDX files from <dir>/<name>/, accepting .gz too
SplitPair load_idx_dataset(const std::string& dir, const std::string& name);

// downloads any missing gzip files for "mnist" or "fashion" and checks the
// decompressed payload lengths
void fetch_dataset(const std::string& name, const std::string& dir);

SplitPair stratified_split(const Dataset& d, Scalar test_fraction, uint64_t seed);
Dataset stratified_subset(const Dataset& d, Index per_class, uint64_t seed);
Dataset take(const Dataset& d, const std::vector<Index>& rows);

// x ~ U(x_range), y = 2x + 1 + Normal(0, noise_sd^2)
Dataset synth_regression(Index n, Scalar xmin, Scalar xmax, Scalar noise_sd, uint64_t seed);

// group g ~ group_probs, features ~ Normal(group_means[g], I); labels = group
Dataset synth_biased_mixture(Index n, const std::vector<std::vector<Scalar>>& group_means,
                             const std::vector<Scalar>& group_probs, uint64_t seed);

Tensor one_hot(const std::vector<Index>& labels, Index classes);

std::vector<std::vector<Index>> make_batches(Index n, Index batch, Rng* shuffle_rng);

}  // namespace trustforge::data
