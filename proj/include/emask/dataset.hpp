#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "emask/tensor.hpp"

namespace emask {

// In-memory face set: pre-cropped, aligned images with identity labels and
// binary attributes.
struct FaceSet {
  ImageTensor images;          // [N,3,H,W] in [-1,1]
  torch::Tensor attributes;    // [N,n] float 0/1
  torch::Tensor identities;    // [N] int64
  std::vector<std::string> names;
  std::vector<std::string> attribute_names;

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
  int64_t image_size() const { return images.size(2); }
  int64_t attribute_count() const { return attributes.size(1); }

  FaceSet select(const torch::Tensor& indices) const;
  FaceSet select(const std::vector<int64_t>& indices) const;
  std::vector<int64_t> indices_of_identity(int64_t identity) const;
  std::vector<int64_t> indices_excluding_identity(int64_t identity) const;
  int64_t identity_count() const;
};

struct SyntheticFaceOptions {
  int64_t identities = 8;
  int64_t per_identity = 16;
  int64_t image_size = 32;
  int64_t attributes = 13;
  uint64_t seed = 0;
};

// Procedural stand-in for an aligned face corpus: each identity is a fixed
// arrangement of coloured blobs inside a face ellipse; each image jitters it
// and stamps one small patch per active attribute.
FaceSet make_synthetic_faces(const SyntheticFaceOptions& options);

enum class Split { kTrain, kVal, kTest };
std::string split_name(Split split);
Split parse_split(const std::string& name);

// Deterministic split from a seeded hash of the file name (70/15/15).
Split assign_split(const std::string& filename, uint64_t seed);

struct IndexEntry {
  std::string file;  // relative to root
  int64_t identity = 0;
  std::vector<int> attributes;
  Split split = Split::kTrain;
};

struct DatasetIndex {
  std::filesystem::path root;
  std::vector<std::string> attribute_names;
  std::vector<IndexEntry> entries;
  uint64_t seed = 0;

  void save(const std::filesystem::path& path) const;
  static DatasetIndex load(const std::filesystem::path& path);

  // Decode images of the given split (all splits when split is empty).
  FaceSet load_faces(const std::vector<Split>& splits, int64_t image_size) const;
};

// One diagnostic per rejected CSV row.
struct IngestDiagnostic {
  std::size_t row = 0;  // 1-based data row, header is row 0
  std::string message;
};

struct IngestResult {
  DatasetIndex index;
  std::vector<IngestDiagnostic> diagnostics;
  bool ok() const { return diagnostics.empty(); }
};

// Parses "filename,[identity,]attr1,...,attrN". Without an identity column the
// identity is the file-name prefix up to the first '_'. With require_files
// unset, rows naming absent images are kept (attribute lookup only).
IngestResult ingest_directory(const std::filesystem::path& image_dir,
                              const std::filesystem::path& attributes_csv, uint64_t seed,
                              bool require_files = true);

// 8-bit RGB lossless I/O; pixels map to [-1,1] via v/127.5 - 1.
ImageTensor read_image(const std::filesystem::path& path, int64_t image_size = -1);
void write_image(const std::filesystem::path& path, const ImageTensor& image);
torch::Tensor quantize_to_u8(const ImageTensor& image);

}  // namespace emask
