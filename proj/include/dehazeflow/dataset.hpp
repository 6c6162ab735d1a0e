#pragma once

// Paired image folders: <root>/hazy/<name> matched with <root>/clean/<name>.

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "dehazeflow/error.hpp"
#include "dehazeflow/image_io.hpp"
#include "dehazeflow/training.hpp"

namespace dehazeflow {

template <class T>
struct NamedPairs {
  std::vector<std::string> names;
  std::vector<ImagePair<T>> pairs;
};

inline bool is_image_path(const std::filesystem::path& p) {
  try {
    (void)image_format_for(p.string());
    return true;
  } catch (const FormatError&) {
    return false;
  }
}

/// Every image in <root>/hazy with a same-named partner in <root>/clean,
/// sorted by name. Missing partners or size mismatches are data errors.
template <class T = float>
NamedPairs<T> load_paired_directory(const std::string& root) {
  namespace fs = std::filesystem;
  const fs::path hazy_dir = fs::path(root) / "hazy";
  const fs::path clean_dir = fs::path(root) / "clean";
  if (!fs::is_directory(hazy_dir) || !fs::is_directory(clean_dir)) {
    throw IoError(root + ": expected subdirectories hazy/ and clean/");
  }
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(hazy_dir)) {
    if (e.is_regular_file() && is_image_path(e.path())) names.push_back(e.path().filename().string());
  }
  std::sort(names.begin(), names.end());
  if (names.empty()) throw IoError(hazy_dir.string() + ": no images");
  NamedPairs<T> out;
  for (const auto& n : names) {
    const fs::path partner = clean_dir / n;
    if (!fs::exists(partner)) throw IoError("no clean image for " + (hazy_dir / n).string());
    ImagePair<T> p{load_image<T>((hazy_dir / n).string()), load_image<T>(partner.string())};
    if (p.hazy.shape() != p.clean.shape()) {
      throw FormatError(n + ": hazy " + p.hazy.shape().str() + " vs clean " + p.clean.shape().str());
    }
    out.names.push_back(n);
    out.pairs.push_back(std::move(p));
  }
  return out;
}

}  // namespace dehazeflow
