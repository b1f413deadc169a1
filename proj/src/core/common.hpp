// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace kdf {

inline constexpr const char* kVersion = "1.0.0";

// Error taxonomy maps 1:1 onto the C API status codes and CLI exit codes.
enum class ErrorKind {
  InvalidArgument,  // bad shapes, bad config values, bad usage
  Io,               // missing/unreadable/unwritable paths
  Format,           // malformed CSV rows, corrupt checkpoints, undecodable images
  Numeric,          // NaN loss and friends
};

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

// --------------------------------------------------------------------- hashing

// FNV-1a, used for input-data fingerprints and named RNG stream derivation.
uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ull);
uint64_t fnv1a64(std::string_view s, uint64_t seed = 0xcbf29ce484222325ull);

// Content hash of a file, hex-encoded. Throws Error(Io) if unreadable.
std::string file_fingerprint(const std::string& path);

// file_fingerprint extended to directories: hashes every regular file under
// the tree together with its relative path, in sorted order.
std::string path_fingerprint(const std::string& path);

uint64_t splitmix64(uint64_t x);

// ------------------------------------------------------------------------- rng

// Named sub-stream of a master seed: rng(seed, "shuffle", epoch) and
// rng(seed, "init") never collide, so adding consumers does not perturb
// existing streams.
std::mt19937_64 seeded_rng(uint64_t seed, std::string_view stream, uint64_t index = 0);

// Uniform in [0,1) with 53 bits, independent of distribution internals.
double uniform01(std::mt19937_64& rng);

// Standard normal via Box-Muller on uniform01 draws (two per sample), so the
// sequence is pinned by the engine alone, not by libstdc++'s distributions.
float normal_sample(std::mt19937_64& rng);

// Fisher-Yates permutation of 0..n-1 driven by uniform01, so the result
// depends only on the engine state.
std::vector<size_t> shuffled_indices(size_t n, std::mt19937_64& rng);

// -------------------------------------------------------------------- strings

std::string format_double(double v, int decimals);
// Shortest decimal form that parses back to the same double.
std::string format_number(double v);
bool iequals(std::string_view a, std::string_view b);
std::string trim(std::string_view s);
std::vector<std::string> split(std::string_view s, char sep);

}  // namespace kdf
