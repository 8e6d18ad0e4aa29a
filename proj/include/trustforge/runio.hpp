#pragma once

#include <string>

#include "trustforge/tensor.hpp"

namespace trustforge::runio {

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

// P5 binary PGM; values clamped to [0,1] then scaled to 0..255
void write_pgm(const std::string& path, const Tensor& img);
// tiles row-major flattened images [n, h*w] into a cols-wide grid
void write_pgm_grid(const std::string& path, const Tensor& rows, Index h, Index w, Index cols);

std::string csv_escape(const std::string& cell);

// exclusive lock file inside dir; throws IoError if already held
class RunLock {
  public:
    explicit RunLock(const std::string& dir);
    ~RunLock();
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

  private:
    std::string path_;
};

}  // namespace trustforge::runio
