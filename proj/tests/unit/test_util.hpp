#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include <gtest/gtest.h>

#include "fairalign/error.hpp"

#ifndef FAIRALIGN_DATA_DIR
#error "FAIRALIGN_DATA_DIR must be defined"
#endif

namespace fairalign::testing {

inline std::filesystem::path data_dir() { return FAIRALIGN_DATA_DIR; }
inline std::filesystem::path fixture_dir() { return FAIRALIGN_FIXTURE_DIR; }

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("fairalign-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace fairalign::testing

#define EXPECT_ERRC(stmt, errc)                                          \
  do {                                                                   \
    try {                                                                \
      stmt;                                                              \
      ADD_FAILURE() << "expected " #errc " from " #stmt;                 \
    } catch (const ::fairalign::Error& e_) {                             \
      EXPECT_EQ(e_.code(), errc) << e_.what();                           \
    }                                                                    \
  } while (0)
