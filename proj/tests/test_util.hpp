// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include <gtest/gtest.h>

#include "ckstn/tensor.hpp"

namespace ckstn::testing {

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double lo = -1.0,
                            double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Matrix m(rows, cols);
  for (double& v : m.data) v = dist(rng);
  return m;
}

inline Tensor random_param(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double lo = -1.0,
                           double hi = 1.0) {
  return Tensor(random_matrix(rows, cols, rng, lo, hi), true);
}

/// Fresh directory named after the running test, removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    path_ = std::filesystem::temp_directory_path() /
            ("ckstn_" + std::string(info->test_suite_name()) + "_" + info->name());
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace ckstn::testing
