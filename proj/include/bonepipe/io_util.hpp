#pragma once

#include <string>

namespace bonepipe {

// Writes `contents` to `path` via a temp file in the same directory plus
// rename, so readers never observe a half-written file.
void atomic_write_file(const std::string& path, const std::string& contents);

std::string read_file(const std::string& path);

}  // namespace bonepipe
