#pragma once

// SHA-256 digests over byte ranges and files (OpenSSL EVP). All provenance
// hashes in run manifests use this one algorithm; the manifest header names
// it so auditors know what to recompute.

#include <cstdint>
#include <string>
#include <vector>

namespace xkd {

std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& s);
std::string sha256_file(const std::string& path);

}  // namespace xkd
