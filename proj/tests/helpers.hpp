#pragma once

#include <unistd.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "finerec/corpus.hpp"
#include "finerec/rng.hpp"

namespace testutil {

namespace fs = std::filesystem;

// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = fs::temp_directory_path() /
            ("finerec-test-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& name) const { return path_ / name; }

 private:
  fs::path path_;
};

inline std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const fs::path& p, const std::string& content) {
  std::ofstream out(p, std::ios::binary);
  out << content;
}

inline fs::path data_dir() { return fs::path(FINEREC_TEST_DATA_DIR); }

// Random interaction records: `users` x `items` universe, each user touching
// a random number of items in [lo, hi]. Timestamps are random, so duplicates
// and ties occur.
inline std::vector<finerec::InteractionRecord> random_records(finerec::Xoshiro256& rng,
                                                              std::size_t users, std::size_t items,
                                                              std::size_t lo, std::size_t hi) {
  std::vector<finerec::InteractionRecord> recs;
  for (std::size_t u = 0; u < users; ++u) {
    const auto n = lo + rng.below(hi - lo + 1);
    for (std::size_t k = 0; k < n; ++k) {
      recs.push_back({"u" + std::to_string(u), "i" + std::to_string(rng.below(items)),
                      static_cast<std::int64_t>(rng.below(50)), "r" + std::to_string(k)});
    }
  }
  return recs;
}

// Degrees of a corpus as (user -> count, item -> count).
inline std::pair<std::map<std::string, std::size_t>, std::map<std::string, std::size_t>> degrees(
    const finerec::Corpus& c) {
  std::map<std::string, std::size_t> du, di;
  for (const auto& [u, seq] : c.sequences()) {
    for (const auto& e : seq) {
      ++du[u];
      ++di[e.item_id];
    }
  }
  return {du, di};
}

// Independent k-core: repeatedly delete every edge touching a node whose
// degree is below k, recounting from scratch each round.
inline std::set<std::pair<std::string, std::string>> kcore_oracle(
    std::set<std::pair<std::string, std::string>> edges, std::size_t k) {
  while (true) {
    std::map<std::string, std::size_t> du, di;
    for (const auto& [u, i] : edges) {
      ++du[u];
      ++di[i];
    }
    std::set<std::pair<std::string, std::string>> keep;
    for (const auto& e : edges) {
      if (du[e.first] >= k && di[e.second] >= k) keep.insert(e);
    }
    if (keep.size() == edges.size()) return keep;
    edges = std::move(keep);
  }
}

inline std::set<std::pair<std::string, std::string>> edge_set(const finerec::Corpus& c) {
  std::set<std::pair<std::string, std::string>> out;
  for (const auto& [u, seq] : c.sequences()) {
    for (const auto& e : seq) out.emplace(u, e.item_id);
  }
  return out;
}

}  // namespace testutil
