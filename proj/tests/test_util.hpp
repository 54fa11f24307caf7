#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "propcache/mpg.hpp"
#include "propcache/rng.hpp"
#include "propcache/tensor.hpp"

namespace testutil {

inline propcache::Tensor random_matrix(propcache::Rng& rng, std::size_t r, std::size_t c,
                                       double scale = 1.0) {
  propcache::Tensor t = propcache::Tensor::matrix(r, c);
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

inline propcache::Tensor random_unit_rows(propcache::Rng& rng, std::size_t r, std::size_t c) {
  return propcache::ops::l2_normalize_rows(random_matrix(rng, r, c));
}

// Adds N(0, scale²) to every parameter so no path of the generator is zero.
inline void perturb_params(const propcache::MpgParams& p, propcache::Rng& rng,
                           double scale = 0.3) {
  for (auto v : p.all())
    for (auto& x : v.mutable_value().data()) x += scale * rng.normal();
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("propcache_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& rel) const { return path_ / rel; }

 private:
  std::filesystem::path path_;
};

}  // namespace testutil
