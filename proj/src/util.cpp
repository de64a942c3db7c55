#include "pmpd/util.hpp"

#include <sodium.h>

#include <algorithm>
#include <atomic>
#include <cstring>
#include <exception>
#include <mutex>
#include <thread>

#include "pmpd/errors.hpp"

namespace pmpd {
namespace {

void ensure_sodium() {
  static const int status = sodium_init();
  if (status < 0) {
    throw Error("libsodium initialization failed");
  }
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t global_seed, std::string_view stream) {
  ensure_sodium();
  std::uint8_t key[8];
  for (int i = 0; i < 8; ++i) {
    key[i] = static_cast<std::uint8_t>(global_seed >> (8 * i));
  }
  std::uint8_t out[8];
  if (crypto_generichash(out, sizeof(out), reinterpret_cast<const unsigned char*>(stream.data()),
                         stream.size(), key, sizeof(key)) != 0) {
    throw Error("derive_seed: hashing failed");
  }
  std::uint64_t seed = 0;
  for (int i = 0; i < 8; ++i) {
    seed |= static_cast<std::uint64_t>(out[i]) << (8 * i);
  }
  return seed;
}

std::string hash_hex(std::span<const std::byte> bytes, std::size_t digest_bytes) {
  ensure_sodium();
  if (digest_bytes == 0 || digest_bytes > crypto_generichash_BYTES_MAX)
    throw ValueError("hash_hex: digest size out of range");
  std::vector<unsigned char> out(digest_bytes);
  if (crypto_generichash(out.data(), out.size(), reinterpret_cast<const unsigned char*>(bytes.data()),
                         bytes.size(), nullptr, 0) != 0) {
    throw Error("hash_hex: hashing failed");
  }
  std::string hex(out.size() * 2 + 1, '\0');
  sodium_bin2hex(hex.data(), hex.size(), out.data(), out.size());
  hex.pop_back();
  return hex;
}

std::string hash_hex(std::string_view text, std::size_t digest_bytes) {
  return hash_hex(std::as_bytes(std::span(text.data(), text.size())), digest_bytes);
}

std::string base64_encode(std::span<const std::byte> bytes) {
  ensure_sodium();
  const std::size_t len =
      sodium_base64_ENCODED_LEN(bytes.size(), sodium_base64_VARIANT_ORIGINAL);
  std::string out(len, '\0');
  sodium_bin2base64(out.data(), out.size(), reinterpret_cast<const unsigned char*>(bytes.data()),
                    bytes.size(), sodium_base64_VARIANT_ORIGINAL);
  out.resize(std::strlen(out.c_str()));
  return out;
}

std::vector<std::byte> base64_decode(std::string_view text) {
  ensure_sodium();
  std::vector<std::byte> out(text.size() / 4 * 3 + 3);
  std::size_t written = 0;
  if (sodium_base642bin(reinterpret_cast<unsigned char*>(out.data()), out.size(), text.data(),
                        text.size(), nullptr, &written, nullptr,
                        sodium_base64_VARIANT_ORIGINAL) != 0) {
    throw InputError("invalid base64 payload");
  }
  out.resize(written);
  return out;
}

void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(n)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    pool.reserve(threads);
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!first_error) first_error = std::current_exception();
          }
        }
      });
    }
  }
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace pmpd
