#include "harmon/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <json.hpp>

#include "harmon/errors.hpp"

namespace harmon {
namespace {

constexpr char kMagic[8] = {'H', 'A', 'R', 'M', 'C', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;
// Guard against garbage length fields before we try to allocate them.
constexpr uint64_t kMaxBlob = uint64_t{1} << 33;

uint64_t fnv1a(const char* data, size_t n) {
  uint64_t h = 1469598103934665603ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= 1099511628211ULL;
  }
  return h;
}

void append_raw(std::string& out, const void* p, size_t n) {
  out.append(static_cast<const char*>(p), n);
}

template <typename T>
void append_pod(std::string& out, T v) {
  append_raw(out, &v, sizeof(T));
}

// Bounds-checked sequential reader over the in-memory payload.
struct Cursor {
  const char* p;
  size_t left;

  void take(void* dst, size_t n) {
    if (n > left) throw FormatError("checkpoint: truncated payload");
    std::memcpy(dst, p, n);
    p += n;
    left -= n;
  }
  template <typename T>
  T pod() {
    T v;
    take(&v, sizeof(T));
    return v;
  }
  std::string str(uint64_t n) {
    if (n > kMaxBlob) throw FormatError("checkpoint: implausible string size");
    std::string s(static_cast<size_t>(n), '\0');
    take(s.data(), static_cast<size_t>(n));
    return s;
  }
};

nlohmann::json meta_json(const Checkpoint& ckpt) {
  nlohmann::json j;
  j["model"] = nlohmann::json::parse(model_config_json(ckpt.model));
  j["step"] = ckpt.step;
  j["rng"] = ckpt.rng_state;
  j["opt"]["generator_step"] = ckpt.generator_opt_step;
  j["opt"]["critic_step"] = ckpt.critic_opt_step;
  return j;
}

void parse_meta(const std::string& text, Checkpoint& ckpt) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: invalid metadata JSON: ") +
                      e.what());
  }
  try {
    ckpt.model = parse_model_config(j.at("model").dump());
    ckpt.step = j.at("step").get<int64_t>();
    ckpt.rng_state = j.at("rng").get<std::string>();
    ckpt.generator_opt_step = j.at("opt").at("generator_step").get<int64_t>();
    ckpt.critic_opt_step = j.at("opt").at("critic_step").get<int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint: missing metadata field: ") +
                      e.what());
  }
  if (ckpt.step < 0) throw FormatError("checkpoint: negative step");
}

}  // namespace

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return &t;
  }
  return nullptr;
}

void write_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  const std::string meta = meta_json(ckpt).dump();

  std::string body;
  append_pod<uint64_t>(body, meta.size());
  append_raw(body, meta.data(), meta.size());
  append_pod<uint64_t>(body, ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    if (t.data.size() != static_cast<size_t>(shape_numel(t.shape))) {
      throw ShapeError("checkpoint: tensor " + t.name +
                       " payload does not match its shape");
    }
    append_pod<uint32_t>(body, static_cast<uint32_t>(t.name.size()));
    append_raw(body, t.name.data(), t.name.size());
    append_pod<uint32_t>(body, static_cast<uint32_t>(t.shape.size()));
    for (int64_t d : t.shape) append_pod<int64_t>(body, d);
    append_raw(body, t.data.data(), t.data.size() * sizeof(float));
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("checkpoint: cannot open " + path + " for writing");
  out.write(kMagic, sizeof(kMagic));
  uint32_t version = kVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  uint64_t checksum = fnv1a(body.data(), body.size());
  out.write(reinterpret_cast<const char*>(&checksum), sizeof(checksum));
  out.write(body.data(), static_cast<std::streamsize>(body.size()));
  if (!out) throw IoError("checkpoint: write failed for " + path);
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) throw IoError("checkpoint: cannot open " + path);
  const auto size = static_cast<uint64_t>(in.tellg());
  constexpr uint64_t kHeader = sizeof(kMagic) + sizeof(uint32_t) + sizeof(uint64_t);
  if (size < kHeader) throw FormatError("checkpoint: file too small");
  in.seekg(0);
  std::string raw(static_cast<size_t>(size), '\0');
  in.read(raw.data(), static_cast<std::streamsize>(size));
  if (!in) throw IoError("checkpoint: read failed for " + path);

  if (std::memcmp(raw.data(), kMagic, sizeof(kMagic)) != 0) {
    throw FormatError("checkpoint: bad magic (not a checkpoint file?)");
  }
  uint32_t version;
  std::memcpy(&version, raw.data() + sizeof(kMagic), sizeof(version));
  if (version != kVersion) {
    throw FormatError("checkpoint: unsupported version " +
                      std::to_string(version));
  }
  uint64_t stored;
  std::memcpy(&stored, raw.data() + sizeof(kMagic) + sizeof(version),
              sizeof(stored));
  const char* body = raw.data() + kHeader;
  const size_t body_len = static_cast<size_t>(size - kHeader);
  if (fnv1a(body, body_len) != stored) {
    throw FormatError("checkpoint: payload checksum mismatch");
  }

  Cursor cur{body, body_len};
  Checkpoint ckpt;
  const auto meta_len = cur.pod<uint64_t>();
  parse_meta(cur.str(meta_len), ckpt);
  const auto count = cur.pod<uint64_t>();
  if (count > kMaxBlob) throw FormatError("checkpoint: implausible tensor count");
  ckpt.tensors.reserve(static_cast<size_t>(count));
  for (uint64_t i = 0; i < count; ++i) {
    CheckpointTensor t;
    t.name = cur.str(cur.pod<uint32_t>());
    const auto rank = cur.pod<uint32_t>();
    if (rank > 8) throw FormatError("checkpoint: implausible tensor rank");
    t.shape.resize(rank);
    for (auto& d : t.shape) {
      d = cur.pod<int64_t>();
      if (d <= 0) throw FormatError("checkpoint: nonpositive dimension");
    }
    const int64_t numel = shape_numel(t.shape);
    if (static_cast<uint64_t>(numel) > kMaxBlob / sizeof(float)) {
      throw FormatError("checkpoint: implausible tensor size");
    }
    t.data.resize(static_cast<size_t>(numel));
    cur.take(t.data.data(), t.data.size() * sizeof(float));
    ckpt.tensors.push_back(std::move(t));
  }
  if (cur.left != 0) throw FormatError("checkpoint: trailing bytes");
  return ckpt;
}

void load_weights(HarmonizationModel& model, const Checkpoint& ckpt) {
  for (const auto& [name, t] : model.parameters()) {
    const CheckpointTensor* src = ckpt.find(name);
    if (!src) throw FormatError("checkpoint: missing tensor " + name);
    if (src->shape != t.shape()) {
      throw FormatError("checkpoint: tensor " + name + " has mismatched shape");
    }
    Tensor dst = t;
    auto out = dst.mutable_value();
    std::copy(src->data.begin(), src->data.end(), out.begin());
    dst.zero_grad();
  }
}

HarmonizationModel load_model(const Checkpoint& ckpt) {
  HarmonizationModel model(ckpt.model);
  load_weights(model, ckpt);
  return model;
}

}  // namespace harmon
