#include "trustforge/runio.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "trustforge/dataio.hpp"

namespace trustforge::runio {

std::string sha256_hex(const std::string& bytes) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1 ||
        EVP_DigestUpdate(ctx, bytes.data(), bytes.size()) != 1 ||
        EVP_DigestFinal_ex(ctx, md, &len) != 1) {
        EVP_MD_CTX_free(ctx);
        throw IoError("sha256 digest failed");
    }
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(len * 2);
    for (unsigned int i = 0; i < len; ++i) {
        out.push_back(hex[md[i] >> 4]);
        out.push_back(hex[md[i] & 0xf]);
    }
    return out;
}

std::string sha256_file(const std::string& path) {
    std::vector<uint8_t> bytes = data::read_file(path);
    return sha256_hex(std::string(bytes.begin(), bytes.end()));
}

namespace {

void write_pgm_bytes(const std::string& path, Index h, Index w, const Array& vals) {
    std::ostringstream os;
    os << "P5\n" << w << ' ' << h << "\n255\n";
    std::string head = os.str();
    std::vector<uint8_t> body(head.begin(), head.end());
    body.reserve(body.size() + static_cast<size_t>(h * w));
    for (Index i = 0; i < h * w; ++i)
        body.push_back(static_cast<uint8_t>(std::lround(std::clamp(vals[i], 0.0, 1.0) * 255.0)));
    data::write_file(path, body);
}

}  // namespace

void write_pgm(const std::string& path, const Tensor& img) {
    if (img.shape.size() != 2) throw ContractError("write_pgm: need a 2-d image");
    write_pgm_bytes(path, img.shape[0], img.shape[1], img.data);
}

void write_pgm_grid(const std::string& path, const Tensor& rows, Index h, Index w, Index cols) {
    if (rows.shape.size() != 2 || rows.shape[1] != h * w)
        throw ContractError("write_pgm_grid: rows must be [n, h*w]");
    if (cols < 1) throw ContractError("write_pgm_grid: cols must be >= 1");
    const Index n = rows.shape[0];
    const Index grid_rows = (n + cols - 1) / cols;
    Array canvas = Array::Zero(grid_rows * h * cols * w);
    for (Index i = 0; i < n; ++i) {
        const Index gr = i / cols, gc = i % cols;
        for (Index r = 0; r < h; ++r)
            for (Index c = 0; c < w; ++c)
                canvas[(gr * h + r) * (cols * w) + gc * w + c] = rows.data[i * h * w + r * w + c];
    }
    write_pgm_bytes(path, grid_rows * h, cols * w, canvas);
}

std::string csv_escape(const std::string& cell) {
    if (cell.find_first_of(",\"\n\r") == std::string::npos) return cell;
    std::string out = "\"";
    for (char c : cell) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out.push_back('"');
    return out;
}

RunLock::RunLock(const std::string& dir) {
    std::filesystem::create_directories(dir);
    path_ = dir + "/.lock";
    if (std::filesystem::exists(path_))
        throw IoError("output directory " + dir + " is locked by another run");
    std::ofstream os(path_);
    if (!os) throw IoError("cannot create lock in " + dir);
    os << "locked\n";
}

RunLock::~RunLock() {
    std::error_code ec;
    std::filesystem::remove(path_, ec);
}

}  // namespace trustforge::runio
