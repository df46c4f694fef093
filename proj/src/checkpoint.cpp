#include "emask/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "emask/error.hpp"
#include "emask/hash.hpp"

namespace emask {

namespace {

constexpr char kMagic[8] = {'E', 'M', 'S', 'K', 'C', 'K', 'P', 'T'};

class Writer {
 public:
  template <typename T>
  void pod(const T& value) {
    out_.append(reinterpret_cast<const char*>(&value), sizeof(T));
  }
  void str(const std::string& s) {
    pod<uint64_t>(s.size());
    out_.append(s);
  }
  void raw(const void* data, std::size_t size) {
    out_.append(static_cast<const char*>(data), size);
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  explicit Reader(const std::string& in) : in_(in) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, in_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  std::string str() {
    const auto n = pod<uint64_t>();
    need(n);
    std::string s = in_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  const char* raw(std::size_t n) {
    need(n);
    const char* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == in_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > in_.size()) throw CheckpointError("checkpoint payload truncated");
  }
  const std::string& in_;
  std::size_t pos_ = 0;
};

int8_t dtype_code(torch::Dtype dtype) {
  switch (dtype) {
    case torch::kFloat32: return 0;
    case torch::kFloat64: return 1;
    case torch::kInt64: return 2;
    default: throw CheckpointError("unsupported tensor dtype in checkpoint");
  }
}

torch::Dtype code_dtype(int8_t code) {
  switch (code) {
    case 0: return torch::kFloat32;
    case 1: return torch::kFloat64;
    case 2: return torch::kInt64;
    default: throw CheckpointError("unknown dtype code in checkpoint");
  }
}

}  // namespace

std::string encode_checkpoint(const CheckpointManifest& m) {
  Writer payload;
  payload.pod<int32_t>(m.stage_completed);
  payload.str(m.config_hash);
  payload.str(m.rng_state);
  payload.pod<uint64_t>(m.components.size());
  for (const auto& [name, params] : m.components) {
    payload.str(name);
    payload.pod<uint64_t>(params.size());
    for (const auto& [pname, tensor] : params.entries()) {
      auto t = tensor.detach().contiguous();
      payload.str(pname);
      payload.pod<int8_t>(dtype_code(t.scalar_type()));
      payload.pod<uint32_t>(static_cast<uint32_t>(t.dim()));
      for (int64_t d = 0; d < t.dim(); ++d) payload.pod<int64_t>(t.size(d));
      payload.pod<uint64_t>(t.nbytes());
      payload.raw(t.data_ptr(), t.nbytes());
    }
  }
  payload.pod<uint64_t>(m.blobs.size());
  for (const auto& [key, value] : m.blobs) {
    payload.str(key);
    payload.str(value);
  }
  const std::string body = payload.take();

  Fnv1a digest;
  digest.update(body);
  Writer file;
  file.raw(kMagic, sizeof(kMagic));
  file.pod<uint32_t>(m.format_version);
  file.pod<uint64_t>(body.size());
  file.raw(body.data(), body.size());
  file.pod<uint64_t>(digest.digest());
  return file.take();
}

CheckpointManifest decode_checkpoint(const std::string& bytes) {
  constexpr std::size_t kHeader = sizeof(kMagic) + sizeof(uint32_t) + sizeof(uint64_t);
  if (bytes.size() < kHeader + sizeof(uint64_t) ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint file (bad magic)");
  }
  uint32_t version;
  uint64_t body_size;
  std::memcpy(&version, bytes.data() + sizeof(kMagic), sizeof(version));
  std::memcpy(&body_size, bytes.data() + sizeof(kMagic) + sizeof(version), sizeof(body_size));
  if (version != kCheckpointFormatVersion) {
    throw CheckpointError("checkpoint format version " + std::to_string(version) +
                          " is not supported (expected " +
                          std::to_string(kCheckpointFormatVersion) + ")");
  }
  if (bytes.size() != kHeader + body_size + sizeof(uint64_t)) {
    throw CheckpointError("checkpoint integrity error: size mismatch");
  }
  const std::string body = bytes.substr(kHeader, body_size);
  uint64_t stored;
  std::memcpy(&stored, bytes.data() + kHeader + body_size, sizeof(stored));
  Fnv1a digest;
  digest.update(body);
  if (digest.digest() != stored) throw CheckpointError("checkpoint integrity error: digest mismatch");

  CheckpointManifest m;
  m.format_version = version;
  Reader r(body);
  m.stage_completed = r.pod<int32_t>();
  m.config_hash = r.str();
  m.rng_state = r.str();
  const auto n_components = r.pod<uint64_t>();
  for (uint64_t c = 0; c < n_components; ++c) {
    auto name = r.str();
    ParamSet params;
    const auto n_tensors = r.pod<uint64_t>();
    for (uint64_t t = 0; t < n_tensors; ++t) {
      auto pname = r.str();
      const auto dtype = code_dtype(r.pod<int8_t>());
      const auto dims = r.pod<uint32_t>();
      std::vector<int64_t> shape;
      for (uint32_t d = 0; d < dims; ++d) shape.push_back(r.pod<int64_t>());
      const auto nbytes = r.pod<uint64_t>();
      auto tensor = torch::empty(shape, torch::TensorOptions().dtype(dtype));
      if (tensor.nbytes() != nbytes) throw CheckpointError("tensor size mismatch in " + pname);
      std::memcpy(tensor.data_ptr(), r.raw(nbytes), nbytes);
      params.add(std::move(pname), tensor);
    }
    m.components.emplace(std::move(name), std::move(params));
  }
  const auto n_blobs = r.pod<uint64_t>();
  for (uint64_t b = 0; b < n_blobs; ++b) {
    auto key = r.str();
    m.blobs.emplace(std::move(key), r.str());
  }
  if (!r.done()) throw CheckpointError("checkpoint integrity error: trailing bytes");
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const CheckpointManifest& manifest) {
  const auto bytes = encode_checkpoint(manifest);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

CheckpointManifest load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("missing checkpoint " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return decode_checkpoint(buffer.str());
}

}  // namespace emask
