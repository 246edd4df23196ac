#pragma once

#include <filesystem>
#include <string>
#include <unistd.h>

#include <gtest/gtest.h>

#include "cpn/cpn.hpp"

namespace cpn::testing {

template <class F>
void expect_code(ErrorCode code, F&& fn) {
  try {
    fn();
    ADD_FAILURE() << "expected " << to_string(code);
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), code) << e.what();
  }
}

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
    std::string name = info ? std::string(info->test_suite_name()) + "_" + info->name() : "cpn";
    path_ = std::filesystem::temp_directory_path() / ("cpn_" + name + "_" + std::to_string(::getpid()));
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

/// Small consistent bundle: `classes` classes with `per_class` records each,
/// class c's features near the unit vector e_(c mod d); first half base, then
/// one val class, rest novel.
inline DatasetBundle toy_bundle(std::size_t classes = 6, std::size_t per_class = 5, std::size_t dim = 4,
                                std::size_t m = 3, std::uint64_t seed = 1) {
  RngStream rng(seed, 0);
  EmbeddingTable emb{Mat(classes * per_class, dim), {}};
  AttributeTable attrs{m, {}};
  std::vector<ClassId> base, val, novel;
  for (ClassId c = 0; c < classes; ++c) {
    Vec z(m);
    for (double& x : z) x = rng.bernoulli(0.5) ? rng.uniform(0.5, 1.5) : 0.0;
    z[c % m] = 1.0;
    attrs.vectors.emplace(c, z);
    for (std::size_t i = 0; i < per_class; ++i) {
      const std::size_t r = c * per_class + i;
      for (std::size_t k = 0; k < dim; ++k) emb.features(r, k) = 0.1 * rng.normal() + (k == c % dim ? 1.0 : 0.0);
      emb.labels.push_back(c);
    }
    if (c < classes / 2) {
      base.push_back(c);
    } else if (c == classes / 2) {
      val.push_back(c);
    } else {
      novel.push_back(c);
    }
  }
  return validate_bundle(std::move(emb), std::move(attrs), make_split(base, val, novel));
}

}  // namespace cpn::testing
