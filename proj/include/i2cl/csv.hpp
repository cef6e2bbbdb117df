#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "i2cl/error.hpp"

namespace i2cl {

/// Opens `path` for writing at full double precision and emits each metadata
/// entry as a leading "# " line, ahead of the header row.
inline std::ofstream open_csv(const std::filesystem::path& path,
                              const std::vector<std::string>& metadata = {}) {
  std::ofstream out(path);
  if (!out) {
    throw Error("cannot write '" + path.string() + "'");
  }
  out.precision(17);
  for (const std::string& m : metadata) {
    out << "# " << m << "\n";
  }
  return out;
}

inline void finish_csv(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) {
    throw Error("write failed for '" + path.string() + "'");
  }
}

}  // namespace i2cl
