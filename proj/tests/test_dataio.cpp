#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <cstdlib>
#include <map>
#include <random>
#include <set>

#include "doctest.h"
#include "trustforge/dataio.hpp"

using namespace trustforge;

TEST_CASE("idx round-trip is byte exact") {
    Rng rng(11);
    std::uniform_int_distribution<int> byte(0, 255);
    for (int trial = 0; trial < 20; ++trial) {
        data::IdxData d;
        if (trial % 2 == 0) {
            d.kind = data::IdxKind::Images;
            std::uniform_int_distribution<Index> dn(1, 7), dside(1, 9);
            d.dims = {dn(rng), dside(rng), dside(rng)};
        } else {
            d.kind = data::IdxKind::Labels;
            std::uniform_int_distribution<Index> dn(1, 50);
            d.dims = {dn(rng)};
        }
        Index total = 1;
        for (Index v : d.dims) total *= v;
        d.bytes.resize(static_cast<size_t>(total));
        for (auto& b : d.bytes) b = static_cast<uint8_t>(byte(rng));

        std::vector<uint8_t> raw = data::write_idx(d);
        data::IdxData back = data::parse_idx(raw);
        CHECK(back.kind == d.kind);
        CHECK(back.dims == d.dims);
        CHECK(back.bytes == d.bytes);
        CHECK(data::write_idx(back) == raw);
    }
}

TEST_CASE("idx parser rejects malformed input") {
    data::IdxData d;
    d.kind = data::IdxKind::Labels;
    d.dims = {4};
    d.bytes = {1, 2, 3, 4};
    std::vector<uint8_t> raw = data::write_idx(d);

    std::vector<uint8_t> bad_magic = raw;
    bad_magic[2] = 0xff;
    CHECK_THROWS_AS(data::parse_idx(bad_magic), FormatError);

    std::vector<uint8_t> truncated(raw.begin(), raw.end() - 2);
    CHECK_THROWS_AS(data::parse_idx(truncated), LengthError);

    std::vector<uint8_t> padded = raw;
    padded.push_back(0);
    CHECK_THROWS_AS(data::parse_idx(padded), LengthError);

    CHECK_THROWS_AS(data::parse_idx({}), LengthError);
}

TEST_CASE("idx_to_float scales into the unit interval") {
    data::IdxData d;
    d.kind = data::IdxKind::Images;
    d.dims = {2, 2, 2};
    d.bytes = {0, 255, 128, 51, 17, 34, 68, 136};
    Tensor t = data::idx_to_float(d);
    CHECK(t.shape == Shape{2, 4});
    CHECK(t.data[0] == 0.0);
    CHECK(t.data[1] == 1.0);
    CHECK(t.data[3] == doctest::Approx(51.0 / 255.0));
    CHECK((t.data >= 0.0).all());
    CHECK((t.data <= 1.0).all());
}

TEST_CASE("gzip round trip through zlib container") {
    // gzip of "hello trustforge" produced by packaging a file with gzip -n
    data::IdxData d;
    d.kind = data::IdxKind::Labels;
    d.dims = {3};
    d.bytes = {9, 8, 7};
    const std::vector<uint8_t> raw = data::write_idx(d);
    // writing then gunzipping relies on the loader accepting .gz payloads;
    // gunzip itself is exercised against payloads produced by the fetch path,
    // here we just check that a non-gzip stream is rejected
    CHECK_THROWS_AS(data::gunzip(raw), FormatError);
}

namespace {

data::Dataset toy_classed(Index per_class, Index classes, uint64_t seed) {
    data::Dataset d;
    const Index n = per_class * classes;
    d.inputs = Tensor::zeros({n, 3});
    d.sample_shape = {3};
    Rng rng(seed);
    std::uniform_real_distribution<Scalar> u(0, 1);
    for (Index i = 0; i < n * 3; ++i) d.inputs.data[i] = u(rng);
    for (Index i = 0; i < n; ++i) d.labels.push_back(i % classes);
    return d;
}

}  // namespace

TEST_CASE("stratified split preserves class shares and partitions the data") {
    data::Dataset d = toy_classed(40, 5, 3);
    data::SplitPair sp = data::stratified_split(d, 0.25, 7);
    CHECK(sp.train.size() == 150);
    CHECK(sp.test.size() == 50);

    std::map<Index, Index> train_counts, test_counts;
    for (Index l : sp.train.labels) ++train_counts[l];
    for (Index l : sp.test.labels) ++test_counts[l];
    for (Index c = 0; c < 5; ++c) {
        CHECK(train_counts[c] == 30);
        CHECK(test_counts[c] == 10);
    }

    // rows partition the original multiset of feature vectors
    std::multiset<Scalar> orig, got;
    for (Index i = 0; i < d.size() * 3; ++i) orig.insert(d.inputs.data[i]);
    for (Index i = 0; i < sp.train.size() * 3; ++i) got.insert(sp.train.inputs.data[i]);
    for (Index i = 0; i < sp.test.size() * 3; ++i) got.insert(sp.test.inputs.data[i]);
    CHECK(orig == got);

    // deterministic in the seed
    data::SplitPair sp2 = data::stratified_split(d, 0.25, 7);
    CHECK((sp.train.inputs.data == sp2.train.inputs.data).all());
    data::SplitPair sp3 = data::stratified_split(d, 0.25, 8);
    CHECK(!(sp.train.inputs.data == sp3.train.inputs.data).all());
}

TEST_CASE("stratified split rejects impossible fractions") {
    data::Dataset d = toy_classed(2, 2, 1);
    CHECK_THROWS_AS(data::stratified_split(d, 1.5, 0), ContractError);
    CHECK_THROWS_AS(data::stratified_split(d, -0.1, 0), ContractError);
}

TEST_CASE("stratified subset draws the exact per-class quota") {
    data::Dataset d = toy_classed(40, 4, 9);
    data::Dataset s = data::stratified_subset(d, 12, 5);
    CHECK(s.size() == 48);
    std::map<Index, Index> counts;
    for (Index l : s.labels) ++counts[l];
    for (Index c = 0; c < 4; ++c) CHECK(counts[c] == 12);
    CHECK_THROWS_AS(data::stratified_subset(d, 41, 5), StratificationError);
}

TEST_CASE("take keeps rows and labels aligned") {
    data::Dataset d = toy_classed(3, 3, 2);
    data::Dataset t = data::take(d, {8, 0, 4});
    CHECK(t.size() == 3);
    CHECK(t.labels[0] == d.labels[8]);
    CHECK(t.labels[1] == d.labels[0]);
    CHECK((t.inputs.data.segment(0, 3) == d.inputs.data.segment(8 * 3, 3)).all());
}

TEST_CASE("synthetic regression line is y = 2x + 1 plus bounded noise") {
    data::Dataset d = data::synth_regression(4000, -5.0, 5.0, 0.1, 13);
    CHECK(d.size() == 4000);
    CHECK(d.targets.shape == Shape{4000, 1});
    Scalar max_resid = 0.0;
    for (Index i = 0; i < d.size(); ++i) {
        CHECK(d.inputs.data[i] >= -5.0);
        CHECK(d.inputs.data[i] <= 5.0);
        max_resid = std::max(max_resid,
                             std::abs(d.targets.data[i] - (2.0 * d.inputs.data[i] + 1.0)));
    }
    CHECK(max_resid < 0.1 * 6.0);  // six sigma
    CHECK(max_resid > 0.0);

    data::Dataset d2 = data::synth_regression(4000, -5.0, 5.0, 0.1, 13);
    CHECK((d.inputs.data == d2.inputs.data).all());
    CHECK((d.targets.data == d2.targets.data).all());
}

TEST_CASE("biased mixture respects group probabilities and means") {
    std::vector<std::vector<Scalar>> means = {{0.0, 0.0}, {4.0, 4.0}};
    data::Dataset d = data::synth_biased_mixture(6000, means, {0.7, 0.3}, 21);
    CHECK(d.size() == 6000);
    REQUIRE(d.groups.size() == 6000);
    Index n1 = 0;
    Array sum0 = Array::Zero(2), sum1 = Array::Zero(2);
    for (Index i = 0; i < d.size(); ++i) {
        if (d.groups[static_cast<size_t>(i)] == 1) {
            ++n1;
            sum1 += d.inputs.data.segment(i * 2, 2);
        } else {
            sum0 += d.inputs.data.segment(i * 2, 2);
        }
    }
    const Scalar frac1 = static_cast<Scalar>(n1) / 6000.0;
    CHECK(frac1 == doctest::Approx(0.3).epsilon(0.1));
    CHECK((sum0 / static_cast<Scalar>(6000 - n1))[0] == doctest::Approx(0.0).scale(1.0).epsilon(0.1));
    CHECK((sum1 / static_cast<Scalar>(n1))[0] == doctest::Approx(4.0).epsilon(0.05));
}

TEST_CASE("one_hot puts a single one per row") {
    Tensor t = data::one_hot({2, 0, 1}, 3);
    CHECK(t.shape == Shape{3, 3});
    Array want(9);
    want << 0, 0, 1, 1, 0, 0, 0, 1, 0;
    CHECK((t.data == want).all());
    CHECK_THROWS_AS(data::one_hot({3}, 3), ContractError);
}

TEST_CASE("make_batches covers every row exactly once") {
    Rng rng(5);
    auto batches = data::make_batches(103, 32, &rng);
    std::set<Index> seen;
    for (const auto& b : batches) {
        CHECK(b.size() <= 32);
        for (Index i : b) CHECK(seen.insert(i).second);
    }
    CHECK(seen.size() == 103);
    CHECK(batches.size() == 4);

    // unshuffled batches are contiguous
    auto plain = data::make_batches(10, 4, nullptr);
    CHECK(plain[0] == std::vector<Index>{0, 1, 2, 3});
    CHECK(plain[2] == std::vector<Index>{8, 9});
}

TEST_CASE("cached mnist loads with standard sizes") {
    std::string dir = data::default_data_dir();
    data::SplitPair sp = data::load_idx_dataset(dir, "mnist");
    CHECK(sp.train.size() == 60000);
    CHECK(sp.test.size() == 10000);
    CHECK(sp.train.dim() == 784);
    CHECK(sp.train.sample_shape == Shape{1, 28, 28});
    CHECK((sp.train.inputs.data.segment(0, 784) >= 0.0).all());
    CHECK((sp.train.inputs.data.segment(0, 784) <= 1.0).all());
    std::set<Index> classes(sp.train.labels.begin(), sp.train.labels.end());
    CHECK(classes.size() == 10);
}
