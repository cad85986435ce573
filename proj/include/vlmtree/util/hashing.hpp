#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>

namespace vlmtree {

using Sha256Digest = std::array<std::uint8_t, 32>;

Sha256Digest sha256(std::span<const std::uint8_t> bytes);
Sha256Digest sha256(std::string_view text);

std::string to_hex(const Sha256Digest& digest);
std::string sha256_hex(std::string_view text);

// Standard base64 (RFC 4648) with padding.
std::string base64_encode(std::span<const std::uint8_t> bytes);

// Folds a digest and a seed into a 64-bit value for seeding per-request RNGs.
std::uint64_t mix_seed(std::uint64_t seed, const Sha256Digest& digest);
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace vlmtree
