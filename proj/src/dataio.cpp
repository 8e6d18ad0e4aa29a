#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "trustforge/dataio.hpp"

#include <httplib.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

namespace trustforge::data {

namespace {

uint32_t read_be32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) |
           uint32_t(p[3]);
}

void write_be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

}  // namespace

IdxData parse_idx(const std::vector<uint8_t>& raw) {
    if (raw.size() < 4)
        throw LengthError("idx: expected at least 4 header bytes, got " +
                          std::to_string(raw.size()));
    uint32_t magic = read_be32(raw.data());
    IdxData d;
    size_t ndims;
    if (magic == 2051) {
        d.kind = IdxKind::Images;
        ndims = 3;
    } else if (magic == 2049) {
        d.kind = IdxKind::Labels;
        ndims = 1;
    } else {
        throw FormatError("idx: bad magic " + std::to_string(magic) +
                          " (expected 2051 for images or 2049 for labels)");
    }
    size_t header = 4 + 4 * ndims;
    if (raw.size() < header)
        throw LengthError("idx: expected " + std::to_string(header) +
                          " header bytes, got " + std::to_string(raw.size()));
    size_t count = 1;
    for (size_t i = 0; i < ndims; ++i) {
        uint32_t dim = read_be32(raw.data() + 4 + 4 * i);
        d.dims.push_back(static_cast<Index>(dim));
        count *= dim;
    }
    if (raw.size() != header + count)
        throw LengthError("idx: expected " + std::to_string(header + count) +
                          " bytes total, got " + std::to_string(raw.size()));
    d.bytes.assign(raw.begin() + header, raw.end());
    return d;
}

std::vector<uint8_t> write_idx(const IdxData& d) {
    std::vector<uint8_t> out;
    out.reserve(4 + 4 * d.dims.size() + d.bytes.size());
    write_be32(out, d.kind == IdxKind::Images ? 2051u : 2049u);
    for (Index dim : d.dims) write_be32(out, static_cast<uint32_t>(dim));
    out.insert(out.end(), d.bytes.begin(), d.bytes.end());
    return out;
}

std::vector<uint8_t> gunzip(const std::vector<uint8_t>& gz) {
    z_stream zs{};
    if (inflateInit2(&zs, 15 + 16) != Z_OK) throw FormatError("gunzip: inflateInit failed");
    std::vector<uint8_t> out;
    std::vector<uint8_t> buf(1 << 16);
    zs.next_in = const_cast<Bytef*>(gz.data());
    zs.avail_in = static_cast<uInt>(gz.size());
    int rc = Z_OK;
    while (rc != Z_STREAM_END) {
        zs.next_out = buf.data();
        zs.avail_out = static_cast<uInt>(buf.size());
        rc = inflate(&zs, Z_NO_FLUSH);
        if (rc != Z_OK && rc != Z_STREAM_END) {
            inflateEnd(&zs);
            throw FormatError("gunzip: corrupt stream (zlib rc " + std::to_string(rc) + ")");
        }
        out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
        if (rc == Z_OK && zs.avail_in == 0 && zs.avail_out != 0) {
            inflateEnd(&zs);
            throw FormatError("gunzip: truncated stream");
        }
    }
    inflateEnd(&zs);
    return out;
}

std::vector<uint8_t> read_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open " + path);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                               std::istreambuf_iterator<char>());
    return bytes;
}

void write_file(const std::string& path, const std::vector<uint8_t>& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + path);
    f.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

Tensor idx_to_float(const IdxData& d) {
    if (d.kind != IdxKind::Images)
        throw ContractError("idx_to_float: expected an image file");
    Index n = d.dims[0];
    Index per = n > 0 ? static_cast<Index>(d.bytes.size()) / n : 0;
    Array a(static_cast<Index>(d.bytes.size()));
    for (size_t i = 0; i < d.bytes.size(); ++i) a[static_cast<Index>(i)] = d.bytes[i] / 255.0;
    return Tensor({n, per}, std::move(a));
}

std::vector<Index> idx_to_labels(const IdxData& d) {
    if (d.kind != IdxKind::Labels)
        throw ContractError("idx_to_labels: expected a label file");
    return std::vector<Index>(d.bytes.begin(), d.bytes.end());
}

std::string default_data_dir() {
    if (const char* env = std::getenv("TRUSTFORGE_DATA_DIR")) return env;
    if (const char* home = std::getenv("HOME"))
        return std::string(home) + "/.cache/trustforge";
    return ".trustforge-data";
}

namespace {

const char* kIdxFiles[4] = {"train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                            "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"};

// decompressed sizes for the canonical 28x28 train/test files
const size_t kIdxSizes[4] = {60000u * 784u + 16u, 60000u + 8u, 10000u * 784u + 16u,
                             10000u + 8u};

std::vector<uint8_t> read_maybe_gz(const std::string& base) {
    namespace fs = std::filesystem;
    if (fs::exists(base)) return read_file(base);
    if (fs::exists(base + ".gz")) return gunzip(read_file(base + ".gz"));
    throw IoError("dataset file missing: " + base +
                  " (run fetch-data or point TRUSTFORGE_DATA_DIR at a populated cache)");
}

Dataset images_with_labels(const IdxData& im, const IdxData& lb) {
    if (im.dims[0] != lb.dims[0])
        throw FormatError("dataset: " + std::to_string(im.dims[0]) + " images but " +
                          std::to_string(lb.dims[0]) + " labels");
    Dataset d;
    d.inputs = idx_to_float(im);
    d.sample_shape = {1, im.dims[1], im.dims[2]};
    d.labels = idx_to_labels(lb);
    return d;
}

}  // namespace

SplitPair load_idx_dataset(const std::string& dir, const std::string& name) {
    std::string root = dir + "/" + name + "/";
    IdxData tri = parse_idx(read_maybe_gz(root + kIdxFiles[0]));
    IdxData trl = parse_idx(read_maybe_gz(root + kIdxFiles[1]));
    IdxData tei = parse_idx(read_maybe_gz(root + kIdxFiles[2]));
    IdxData tel = parse_idx(read_maybe_gz(root + kIdxFiles[3]));
    return SplitPair{images_with_labels(tri, trl), images_with_labels(tei, tel)};
}

void fetch_dataset(const std::string& name, const std::string& dir) {
    namespace fs = std::filesystem;
    struct Mirror {
        std::string host;
        std::string base;
        bool https;
    };
    std::vector<Mirror> mirrors;
    if (name == "mnist") {
        mirrors.push_back({"storage.googleapis.com", "/cvdf-datasets/mnist/", true});
        mirrors.push_back({"ossci-datasets.s3.amazonaws.com", "/mnist/", true});
    } else if (name == "fashion") {
        mirrors.push_back(
            {"fashion-mnist.s3-website.eu-central-1.amazonaws.com", "/", false});
    } else {
        throw ContractError("fetch_dataset: unknown dataset '" + name +
                            "' (expected mnist or fashion)");
    }
    std::string root = dir + "/" + name + "/";
    fs::create_directories(root);
    for (int i = 0; i < 4; ++i) {
        std::string plain = root + kIdxFiles[i];
        std::string gz = plain + ".gz";
        if (fs::exists(plain) || fs::exists(gz)) continue;
        std::string body;
        std::string last_err = "no mirror attempted";
        for (const Mirror& m : mirrors) {
            std::string path = m.base + kIdxFiles[i] + ".gz";
            httplib::Result res;
            if (m.https) {
                httplib::SSLClient cli(m.host);
                cli.set_follow_location(true);
                cli.set_read_timeout(60, 0);
                res = cli.Get(path);
            } else {
                httplib::Client cli(m.host);
                cli.set_follow_location(true);
                cli.set_read_timeout(60, 0);
                res = cli.Get(path);
            }
            if (res && res->status == 200) {
                body = res->body;
                break;
            }
            last_err = m.host + path + " -> " +
                       (res ? "HTTP " + std::to_string(res->status)
                            : "transport error " + httplib::to_string(res.error()));
        }
        if (body.empty())
            throw IoError("fetch_dataset: could not download " +
                          std::string(kIdxFiles[i]) + ": " + last_err);
        std::vector<uint8_t> gz_bytes(body.begin(), body.end());
        std::vector<uint8_t> raw = gunzip(gz_bytes);
        if (raw.size() != kIdxSizes[i])
            throw LengthError("fetch_dataset: " + std::string(kIdxFiles[i]) +
                              " decompressed to " + std::to_string(raw.size()) +
                              " bytes, expected " + std::to_string(kIdxSizes[i]));
        parse_idx(raw);  // structural check before committing to disk
        write_file(gz, gz_bytes);
    }
}

Dataset take(const Dataset& d, const std::vector<Index>& rows) {
    Dataset out;
    out.sample_shape = d.sample_shape;
    const Index w = d.dim();
    out.inputs = Tensor({static_cast<Index>(rows.size()), w},
                        Array(static_cast<Index>(rows.size()) * w));
    for (size_t i = 0; i < rows.size(); ++i) {
        Index r = rows[i];
        if (r < 0 || r >= d.size())
            throw ContractError("take: row " + std::to_string(r) + " out of range");
        out.inputs.data.segment(static_cast<Index>(i) * w, w) =
            d.inputs.data.segment(r * w, w);
        if (!d.labels.empty()) out.labels.push_back(d.labels[r]);
        if (!d.groups.empty()) out.groups.push_back(d.groups[r]);
    }
    if (d.targets.size() > 0) {
        out.targets = Tensor({static_cast<Index>(rows.size()), 1},
                             Array(static_cast<Index>(rows.size())));
        for (size_t i = 0; i < rows.size(); ++i)
            out.targets.data[static_cast<Index>(i)] = d.targets.data[rows[i]];
    }
    return out;
}

SplitPair stratified_split(const Dataset& d, Scalar test_fraction, uint64_t seed) {
    if (!(test_fraction > 0.0 && test_fraction < 1.0))
        throw ContractError("stratified_split: test_fraction must be in (0,1), got " +
                            std::to_string(test_fraction));
    const Index n = d.size();
    Rng rng(seed);
    std::vector<Index> test_rows, train_rows;
    if (d.labels.empty()) {
        std::vector<Index> idx(n);
        std::iota(idx.begin(), idx.end(), 0);
        std::shuffle(idx.begin(), idx.end(), rng);
        Index ntest = static_cast<Index>(std::llround(test_fraction * n));
        test_rows.assign(idx.begin(), idx.begin() + ntest);
        train_rows.assign(idx.begin() + ntest, idx.end());
    } else {
        std::map<Index, std::vector<Index>> by_class;
        for (Index i = 0; i < n; ++i) by_class[d.labels[i]].push_back(i);
        for (auto& [c, rows] : by_class)
            if (rows.size() < 2)
                throw StratificationError("stratified_split: class " + std::to_string(c) +
                                          " has only " + std::to_string(rows.size()) +
                                          " sample(s)");
        for (auto& [c, rows] : by_class) std::shuffle(rows.begin(), rows.end(), rng);
        // largest-remainder quotas so the total is round(f*N) and every class
        // stays within one sample of its exact share
        Index total = static_cast<Index>(std::llround(test_fraction * n));
        std::vector<std::pair<Scalar, Index>> remainders;  // (-frac, class)
        std::map<Index, Index> quota;
        Index assigned = 0;
        for (auto& [c, rows] : by_class) {
            Scalar exact = test_fraction * static_cast<Scalar>(rows.size());
            Index base = static_cast<Index>(std::floor(exact));
            quota[c] = base;
            assigned += base;
            remainders.push_back({-(exact - static_cast<Scalar>(base)), c});
        }
        std::sort(remainders.begin(), remainders.end());
        for (auto& [negfrac, c] : remainders) {
            if (assigned >= total) break;
            quota[c] += 1;
            ++assigned;
        }
        for (auto& [c, rows] : by_class) {
            Index q = quota[c];
            for (size_t i = 0; i < rows.size(); ++i)
                (static_cast<Index>(i) < q ? test_rows : train_rows).push_back(rows[i]);
        }
        std::sort(test_rows.begin(), test_rows.end());
        std::sort(train_rows.begin(), train_rows.end());
    }
    return SplitPair{take(d, train_rows), take(d, test_rows)};
}

Dataset stratified_subset(const Dataset& d, Index per_class, uint64_t seed) {
    if (d.labels.empty()) throw ContractError("stratified_subset: dataset has no labels");
    Rng rng(seed);
    std::map<Index, std::vector<Index>> by_class;
    for (Index i = 0; i < d.size(); ++i) by_class[d.labels[i]].push_back(i);
    std::vector<Index> rows;
    for (auto& [c, v] : by_class) {
        if (static_cast<Index>(v.size()) < per_class)
            throw StratificationError("stratified_subset: class " + std::to_string(c) +
                                      " has " + std::to_string(v.size()) + " < " +
                                      std::to_string(per_class) + " samples");
        std::shuffle(v.begin(), v.end(), rng);
        rows.insert(rows.end(), v.begin(), v.begin() + per_class);
    }
    std::sort(rows.begin(), rows.end());
    return take(d, rows);
}

Dataset synth_regression(Index n, Scalar xmin, Scalar xmax, Scalar noise_sd, uint64_t seed) {
    if (n <= 0) throw ContractError("synth_regression: n must be positive");
    if (!(xmax > xmin)) throw ContractError("synth_regression: degenerate x range");
    Rng rng(seed);
    std::uniform_real_distribution<Scalar> ux(xmin, xmax);
    std::normal_distribution<Scalar> noise(0.0, noise_sd);
    Dataset d;
    d.sample_shape = {1};
    d.inputs = Tensor({n, 1}, Array(n));
    d.targets = Tensor({n, 1}, Array(n));
    for (Index i = 0; i < n; ++i) {
        Scalar x = ux(rng);
        d.inputs.data[i] = x;
        d.targets.data[i] = 2.0 * x + 1.0 + (noise_sd > 0.0 ? noise(rng) : 0.0);
    }
    return d;
}

Dataset synth_biased_mixture(Index n, const std::vector<std::vector<Scalar>>& group_means,
                             const std::vector<Scalar>& group_probs, uint64_t seed) {
    if (group_means.empty() || group_means.size() != group_probs.size())
        throw ContractError("synth_biased_mixture: need matching group means and probs");
    Scalar psum = 0.0;
    for (Scalar p : group_probs) {
        if (p < 0.0) throw ContractError("synth_biased_mixture: negative group prob");
        psum += p;
    }
    if (std::abs(psum - 1.0) > 1e-9)
        throw ContractError("synth_biased_mixture: group probs sum to " +
                            std::to_string(psum) + ", expected 1");
    const size_t dim = group_means[0].size();
    for (const auto& m : group_means)
        if (m.size() != dim)
            throw ContractError("synth_biased_mixture: group means differ in dimension");
    Rng rng(seed);
    std::uniform_real_distribution<Scalar> u01(0.0, 1.0);
    std::normal_distribution<Scalar> unit(0.0, 1.0);
    Dataset d;
    d.sample_shape = {static_cast<Index>(dim)};
    d.inputs = Tensor({n, static_cast<Index>(dim)}, Array(n * static_cast<Index>(dim)));
    for (Index i = 0; i < n; ++i) {
        Scalar r = u01(rng);
        size_t g = 0;
        Scalar acc = 0.0;
        for (size_t k = 0; k < group_probs.size(); ++k) {
            acc += group_probs[k];
            if (r <= acc || k + 1 == group_probs.size()) { g = k; break; }
        }
        for (size_t j = 0; j < dim; ++j)
            d.inputs.data[i * static_cast<Index>(dim) + static_cast<Index>(j)] =
                group_means[g][j] + unit(rng);
        d.labels.push_back(static_cast<Index>(g));
        d.groups.push_back(static_cast<Index>(g));
    }
    return d;
}

Tensor one_hot(const std::vector<Index>& labels, Index classes) {
    const Index n = static_cast<Index>(labels.size());
    Array a = Array::Zero(n * classes);
    for (Index i = 0; i < n; ++i) {
        if (labels[i] < 0 || labels[i] >= classes)
            throw ContractError("one_hot: label " + std::to_string(labels[i]) +
                                " out of range [0," + std::to_string(classes) + ")");
        a[i * classes + labels[i]] = 1.0;
    }
    return Tensor({n, classes}, std::move(a));
}

std::vector<std::vector<Index>> make_batches(Index n, Index batch, Rng* shuffle_rng) {
    if (batch <= 0) throw ContractError("make_batches: batch size must be positive");
    std::vector<Index> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    if (shuffle_rng) std::shuffle(idx.begin(), idx.end(), *shuffle_rng);
    std::vector<std::vector<Index>> out;
    for (Index start = 0; start < n; start += batch) {
        Index end = std::min(n, start + batch);
        out.emplace_back(idx.begin() + start, idx.begin() + end);
    }
    return out;
}

}  // namespace trustforge::data
