#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace pmpd {

/// Derives an independent 64-bit seed for a named random sub-stream
/// ("weights", "truncation", "sampler", "training", ...) from a global seed.
std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stream);

/// Hex-encoded BLAKE2b digest of `bytes`, `digest_bytes` long (8..64).
std::string hash_hex(std::span<const std::byte> bytes, std::size_t digest_bytes = 16);
std::string hash_hex(std::string_view text, std::size_t digest_bytes = 16);

std::string base64_encode(std::span<const std::byte> bytes);
std::vector<std::byte> base64_decode(std::string_view text);

/// Runs fn(i) for i in [0, n) on up to `threads` workers. Results written by index
/// are independent of the thread count; the first exception is rethrown.
void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn);

}  // namespace pmpd
