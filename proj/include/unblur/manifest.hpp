#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "unblur/errors.hpp"

namespace unblur {

// One record per image: relative path, split tag, per-image seed,
// kernel checksum (hex). Seed and checksum are "0" for sharp entries.
struct ManifestEntry {
  std::string path;  // relative to the manifest file's directory
  std::string tag;   // "sharp" | "blurred"
  uint64_t seed = 0;
  std::string checksum = "0";
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestEntry> entries;
  std::vector<std::string> skipped;  // paths recorded as skipped

  std::filesystem::path resolve(const ManifestEntry& e) const {
    return base_dir / e.path;
  }
};

inline Manifest read_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open manifest: " + file.string());
  Manifest m;
  m.base_dir = file.has_parent_path() ? file.parent_path()
                                      : std::filesystem::path(".");
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (line[0] == '#') {
      std::istringstream c(line.substr(1));
      std::string word, path;
      if (c >> word >> path && word == "skipped") m.skipped.push_back(path);
      continue;
    }
    std::istringstream is(line);
    ManifestEntry e;
    std::string seed_str;
    if (!(is >> e.path >> e.tag >> seed_str >> e.checksum))
      throw DataError("malformed manifest record at " + file.string() + ":" +
                      std::to_string(lineno));
    if (e.tag != "sharp" && e.tag != "blurred")
      throw DataError("unknown split tag '" + e.tag + "' at " + file.string() +
                      ":" + std::to_string(lineno));
    e.seed = std::stoull(seed_str);
    m.entries.push_back(std::move(e));
  }
  return m;
}

inline void write_manifest(const std::filesystem::path& file, const Manifest& m) {
  std::ofstream out(file);
  if (!out) throw DataError("cannot write manifest: " + file.string());
  for (const auto& s : m.skipped) out << "# skipped " << s << "\n";
  for (const auto& e : m.entries)
    out << e.path << "\t" << e.tag << "\t" << e.seed << "\t" << e.checksum
        << "\n";
}

// Convenience used by tools and tests: list a directory of images as a
// manifest of sharp entries in sorted filename order.
inline Manifest manifest_from_dir(const std::filesystem::path& dir,
                                  const std::string& tag = "sharp") {
  Manifest m;
  m.base_dir = dir;
  std::vector<std::string> names;
  for (const auto& de : std::filesystem::directory_iterator(dir)) {
    if (!de.is_regular_file()) continue;
    auto ext = de.path().extension().string();
    for (auto& ch : ext) ch = static_cast<char>(std::tolower(ch));
    if (ext == ".png" || ext == ".jpg" || ext == ".jpeg")
      names.push_back(de.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  for (auto& n : names) m.entries.push_back({n, tag, 0, "0"});
  return m;
}

}  // namespace unblur
