#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace moedis {

// Entry point behind the moedis binary. args excludes the program name.
// Returns 0 on success, nonzero on usage or runtime errors (message on err).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

// Lowercase hex SHA-256 of a byte string.
std::string sha256_hex(const std::string& bytes);

}  // namespace moedis
