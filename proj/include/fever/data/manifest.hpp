#pragma once

#include <filesystem>
#include <variant>

#include "fever/data/datasets.hpp"

namespace fever::data {

// 8-bit PNG <-> CHW floats scaled by 1/255. Channels 1 (gray) or 3 (RGB).
Array<float> read_png(const std::filesystem::path& path, std::size_t channels = 3);
void write_png(const std::filesystem::path& path, const float* chw, const ImageShape& shape);

enum class ManifestKind { labeled, triplet, unlabeled };

// CSV with a header row; image paths are relative to the manifest's directory.
//   labeled:   path,label
//   triplet:   path1,path2,path3,similar_pair   (pair is 12, 13 or 23)
//   unlabeled: path
LabeledDataset load_labeled_manifest(const std::filesystem::path& path, std::size_t num_classes = 8,
                                     std::size_t channels = 3);
TripletDataset load_triplet_manifest(const std::filesystem::path& path, std::size_t channels = 3);
UnlabeledDataset load_unlabeled_manifest(const std::filesystem::path& path, std::size_t channels = 3);

using AnyDataset = std::variant<LabeledDataset, TripletDataset, UnlabeledDataset>;
AnyDataset load_manifest(const std::filesystem::path& path, ManifestKind kind);

// Writes every image as <dir>/<stem>/<i>.png and the manifest as <dir>/<stem>.csv.
// Returns the manifest path.
std::filesystem::path write_manifest(const std::filesystem::path& dir, const std::string& stem,
                                     const LabeledDataset& ds);
std::filesystem::path write_manifest(const std::filesystem::path& dir, const std::string& stem,
                                     const TripletDataset& ds);
std::filesystem::path write_manifest(const std::filesystem::path& dir, const std::string& stem,
                                     const UnlabeledDataset& ds);

}  // namespace fever::data
