#include "emask/dataset.hpp"

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <cmath>
#include <algorithm>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include "emask/hash.hpp"
#include "json.hpp"

namespace emask {

namespace fs = std::filesystem;
using json = nlohmann::json;

FaceSet FaceSet::select(const torch::Tensor& indices) const {
  FaceSet out;
  out.images = images.index_select(0, indices);
  out.attributes = attributes.index_select(0, indices);
  out.identities = identities.index_select(0, indices);
  auto idx = indices.to(torch::kInt64).contiguous();
  const auto* p = idx.data_ptr<int64_t>();
  for (int64_t i = 0; i < idx.numel(); ++i) {
    out.names.push_back(p[i] < static_cast<int64_t>(names.size()) ? names[p[i]] : std::string{});
  }
  out.attribute_names = attribute_names;
  return out;
}

FaceSet FaceSet::select(const std::vector<int64_t>& indices) const {
  return select(torch::tensor(indices, torch::kInt64));
}

std::vector<int64_t> FaceSet::indices_of_identity(int64_t identity) const {
  std::vector<int64_t> out;
  auto ids = identities.contiguous();
  for (int64_t i = 0; i < ids.numel(); ++i) {
    if (ids[i].item<int64_t>() == identity) out.push_back(i);
  }
  return out;
}

std::vector<int64_t> FaceSet::indices_excluding_identity(int64_t identity) const {
  std::vector<int64_t> out;
  auto ids = identities.contiguous();
  for (int64_t i = 0; i < ids.numel(); ++i) {
    if (ids[i].item<int64_t>() != identity) out.push_back(i);
  }
  return out;
}

int64_t FaceSet::identity_count() const {
  if (size() == 0) return 0;
  return std::get<0>(at::_unique(identities)).numel();
}

FaceSet make_synthetic_faces(const SyntheticFaceOptions& o) {
  if (o.identities < 1 || o.per_identity < 1 || o.image_size < 4 || o.attributes < 1) {
    throw ValueError("synthetic faces: invalid options");
  }
  auto gen = make_generator(o.seed);
  const auto opts = torch::TensorOptions().dtype(torch::kFloat32);
  const int64_t s = o.image_size;
  auto axis = (torch::arange(s, opts) + 0.5) / s * 2.0 - 1.0;
  auto v = axis.view({s, 1}).expand({s, s});
  auto u = axis.view({1, s}).expand({s, s});

  auto blob = [&](const torch::Tensor& cu, const torch::Tensor& cv, double radius, double du,
                  double dv) {
    auto d2 = (u - cu - du).pow(2) + (v - cv - dv).pow(2);
    return torch::exp(-d2 / (2 * radius * radius));
  };

  // Per-identity structure.
  constexpr int kBlobs = 5;
  auto skin = torch::rand({o.identities, 3}, gen, opts) * 0.6 - 0.1;
  auto blob_pos = torch::rand({o.identities, kBlobs, 2}, gen, opts) * 1.0 - 0.5;
  auto blob_radius = torch::rand({o.identities, kBlobs}, gen, opts) * 0.15 + 0.12;
  auto blob_color = torch::rand({o.identities, kBlobs, 3}, gen, opts) * 2.0 - 1.0;
  auto eye_height = torch::rand({o.identities}, gen, opts) * 0.3 - 0.35;
  auto eye_gap = torch::rand({o.identities}, gen, opts) * 0.3 + 0.25;

  // Fixed attribute patches on a ring near the border.
  auto attr_color = torch::full({o.attributes, 3}, -0.6, opts);
  for (int64_t a = 0; a < o.attributes; ++a) attr_color[a][a % 3] = 0.9;

  const int64_t n = o.identities * o.per_identity;
  auto images = torch::empty({n, 3, s, s}, opts);
  auto attributes = (torch::rand({n, o.attributes}, gen, opts) < 0.5).to(torch::kFloat32);
  auto identities = torch::empty({n}, torch::kInt64);
  std::vector<std::string> names;
  const double pixel = 2.0 / s;

  for (int64_t id = 0; id < o.identities; ++id) {
    for (int64_t k = 0; k < o.per_identity; ++k) {
      const int64_t idx = id * o.per_identity + k;
      auto jitter = torch::rand({4}, gen, opts);
      const double du = (jitter[0].item<double>() * 2 - 1) * pixel;
      const double dv = (jitter[1].item<double>() * 2 - 1) * pixel;
      const double gain = 0.9 + 0.2 * jitter[2].item<double>();

      auto face_mask = torch::sigmoid(
          (1.0 - ((u - du) / 0.72).pow(2) - ((v - dv) / 0.88).pow(2)) * 12.0);
      auto img = torch::full({3, s, s}, -0.7, opts);
      img = img + face_mask.unsqueeze(0) * (skin[id].view({3, 1, 1}) + 0.7);
      for (int b = 0; b < kBlobs; ++b) {
        auto g = blob(blob_pos[id][b][0], blob_pos[id][b][1], blob_radius[id][b].item<double>(),
                      du, dv);
        img = img + gain * 0.6 * (face_mask * g).unsqueeze(0) * blob_color[id][b].view({3, 1, 1});
      }
      for (double side : {-1.0, 1.0}) {
        auto cu = eye_gap[id] * side * 0.5;
        auto g = blob(cu, eye_height[id], 0.07, du, dv);
        img = img - 1.2 * g.unsqueeze(0);
      }
      for (int64_t a = 0; a < o.attributes; ++a) {
        if (attributes[idx][a].item<float>() < 0.5) continue;
        const double angle = 2.0 * std::numbers::pi * static_cast<double>(a) / o.attributes;
        auto cu = torch::tensor(0.78 * std::cos(angle), opts);
        auto cv = torch::tensor(0.78 * std::sin(angle), opts);
        auto g = blob(cu, cv, 0.1, 0.0, 0.0).unsqueeze(0);
        img = img * (1 - g) + g * attr_color[a].view({3, 1, 1});
      }
      img = img + torch::randn({3, s, s}, gen, opts) * 0.03;
      images[idx] = img.clamp(-1.0, 1.0);
      identities[idx] = id;
      std::ostringstream name;
      name << "id" << id << "_" << k << ".png";
      names.push_back(name.str());
    }
  }

  FaceSet set;
  set.images = images;
  set.attributes = attributes;
  set.identities = identities;
  set.names = std::move(names);
  for (int64_t a = 0; a < o.attributes; ++a) set.attribute_names.push_back("attr" + std::to_string(a));
  return set;
}

std::string split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "train";
}

Split parse_split(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  throw DataError("unknown split: " + name);
}

Split assign_split(const std::string& filename, uint64_t seed) {
  Fnv1a hash;
  hash.update(&seed, sizeof(seed));
  hash.update(filename.data(), filename.size());
  const auto bucket = hash.digest() % 100;
  if (bucket < 70) return Split::kTrain;
  if (bucket < 85) return Split::kVal;
  return Split::kTest;
}

void DatasetIndex::save(const fs::path& path) const {
  json j;
  j["root"] = root.string();
  j["seed"] = seed;
  j["attributes"] = attribute_names;
  j["entries"] = json::array();
  for (const auto& e : entries) {
    j["entries"].push_back({{"file", e.file},
                            {"identity", e.identity},
                            {"attributes", e.attributes},
                            {"split", split_name(e.split)}});
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write index: " + path.string());
  out << j.dump(2) << '\n';
}

DatasetIndex DatasetIndex::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read index: " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw DataError("malformed index " + path.string() + ": " + e.what());
  }
  DatasetIndex index;
  index.root = j.at("root").get<std::string>();
  index.seed = j.value("seed", uint64_t{0});
  index.attribute_names = j.at("attributes").get<std::vector<std::string>>();
  for (const auto& e : j.at("entries")) {
    IndexEntry entry;
    entry.file = e.at("file").get<std::string>();
    entry.identity = e.at("identity").get<int64_t>();
    entry.attributes = e.at("attributes").get<std::vector<int>>();
    entry.split = parse_split(e.at("split").get<std::string>());
    if (entry.attributes.size() != index.attribute_names.size()) {
      throw DataError("index entry " + entry.file + ": attribute width mismatch");
    }
    index.entries.push_back(std::move(entry));
  }
  return index;
}

FaceSet DatasetIndex::load_faces(const std::vector<Split>& splits, int64_t image_size) const {
  std::vector<torch::Tensor> images;
  std::vector<torch::Tensor> attrs;
  std::vector<int64_t> ids;
  FaceSet set;
  for (const auto& e : entries) {
    if (!splits.empty() && std::find(splits.begin(), splits.end(), e.split) == splits.end()) {
      continue;
    }
    images.push_back(read_image(root / e.file, image_size));
    std::vector<float> a(e.attributes.begin(), e.attributes.end());
    attrs.push_back(torch::tensor(a));
    ids.push_back(e.identity);
    set.names.push_back(e.file);
  }
  if (images.empty()) throw DataError("no images in the requested split(s)");
  set.images = torch::stack(images);
  set.attributes = torch::stack(attrs);
  set.identities = torch::tensor(ids, torch::kInt64);
  set.attribute_names = attribute_names;
  return set;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream stream(line);
  while (std::getline(stream, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' ')) cell.pop_back();
    while (!cell.empty() && cell.front() == ' ') cell.erase(cell.begin());
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

IngestResult ingest_directory(const fs::path& image_dir, const fs::path& attributes_csv,
                              uint64_t seed, bool require_files) {
  IngestResult result;
  result.index.root = fs::absolute(image_dir);
  result.index.seed = seed;

  std::ifstream in(attributes_csv);
  if (!in) {
    result.diagnostics.push_back({0, "cannot open attributes CSV " + attributes_csv.string()});
    return result;
  }
  std::string line;
  if (!std::getline(in, line)) {
    result.diagnostics.push_back({0, "empty attributes CSV"});
    return result;
  }
  auto header = split_csv_line(line);
  if (header.size() < 2 || header[0] != "filename") {
    result.diagnostics.push_back({0, "header must be 'filename' followed by attribute names"});
    return result;
  }
  const bool has_identity = header[1] == "identity";
  const std::size_t first_attr = has_identity ? 2 : 1;
  if (header.size() <= first_attr) {
    result.diagnostics.push_back({0, "no attribute columns"});
    return result;
  }
  result.index.attribute_names.assign(header.begin() + first_attr, header.end());

  std::map<std::string, int64_t> identity_ids;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty() || line == "\r") continue;
    auto cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      result.diagnostics.push_back({row, "expected " + std::to_string(header.size()) +
                                             " columns, got " + std::to_string(cells.size())});
      continue;
    }
    IndexEntry entry;
    entry.file = cells[0];
    const bool present = fs::exists(image_dir / entry.file);
    if (require_files && !present) {
      result.diagnostics.push_back({row, "missing image file " + entry.file});
      continue;
    }
    std::string identity_key =
        has_identity ? cells[1] : entry.file.substr(0, entry.file.find('_'));
    auto [it, inserted] =
        identity_ids.emplace(identity_key, static_cast<int64_t>(identity_ids.size()));
    entry.identity = it->second;
    bool row_ok = true;
    for (std::size_t c = first_attr; c < cells.size(); ++c) {
      if (cells[c] == "0" || cells[c] == "1") {
        entry.attributes.push_back(cells[c] == "1" ? 1 : 0);
      } else {
        result.diagnostics.push_back({row, "non-binary value '" + cells[c] + "' in column " +
                                               header[c]});
        row_ok = false;
        break;
      }
    }
    if (!row_ok) continue;
    try {
      if (present) read_image(image_dir / entry.file);
    } catch (const Error& e) {
      result.diagnostics.push_back({row, e.what()});
      continue;
    }
    entry.split = assign_split(entry.file, seed);
    result.index.entries.push_back(std::move(entry));
  }
  return result;
}

ImageTensor read_image(const fs::path& path, int64_t image_size) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("cannot decode image " + path.string());
  if (image_size > 0 && (bgr.rows != image_size || bgr.cols != image_size)) {
    throw ShapeError("image " + path.string() + " is " + std::to_string(bgr.cols) + "x" +
                     std::to_string(bgr.rows) + ", expected " + std::to_string(image_size));
  }
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat32) / 127.5 - 1.0;
}

torch::Tensor quantize_to_u8(const ImageTensor& image) {
  return ((image.detach().to(torch::kFloat64).clamp(-1.0, 1.0) + 1.0) * 127.5)
      .round()
      .to(torch::kUInt8);
}

void write_image(const fs::path& path, const ImageTensor& image) {
  auto chw = image.dim() == 4 ? image[0] : image;
  if (chw.dim() != 3 || chw.size(0) != 3) throw ShapeError("write_image expects [3,H,W]");
  auto hwc = quantize_to_u8(chw).permute({1, 2, 0}).contiguous();
  cv::Mat rgb(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3,
              hwc.data_ptr<uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(rgb, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write image " + path.string());
}

}  // namespace emask
