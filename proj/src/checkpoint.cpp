#include "ccm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

namespace ccm {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes little-endian");

template <class U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}
  template <class U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, s_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string r = s_.substr(pos_, n);
    pos_ += n;
    return r;
  }
  void read_into(void* dst, size_t n) {
    need(n);
    std::memcpy(dst, s_.data() + pos_, n);
    pos_ += n;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(size_t n) const {
    if (s_.size() - pos_ < n) throw IoError("checkpoint truncated");
  }
  const std::string& s_;
  size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const TensorMap& tensors) {
  std::string out = "CCM1";
  put<uint32_t>(out, static_cast<uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > 0xFFFF) throw IoError("tensor name too long: " + name.substr(0, 32));
    if (t.rank() > 0xFF) throw IoError("tensor rank too large");
    put<uint16_t>(out, static_cast<uint16_t>(name.size()));
    out += name;
    put<uint8_t>(out, static_cast<uint8_t>(t.rank()));
    for (int64_t d : t.shape()) put<uint64_t>(out, static_cast<uint64_t>(d));
    out.append(reinterpret_cast<const char*>(t.ptr()), sizeof(float) * static_cast<size_t>(t.numel()));
  }
  return out;
}

TensorMap decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.bytes(4) != "CCM1") throw IoError("not a CCM1 checkpoint (bad magic)");
  const auto count = r.get<uint32_t>();
  TensorMap out;
  for (uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<uint16_t>();
    std::string name = r.bytes(len);
    const auto rank = r.get<uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<int64_t>(r.get<uint64_t>());
    Tensor t(shape);
    r.read_into(t.ptr(), sizeof(float) * static_cast<size_t>(t.numel()));
    if (!out.emplace(std::move(name), std::move(t)).second) throw IoError("duplicate tensor name");
  }
  if (!r.done()) throw IoError("trailing bytes after checkpoint payload");
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const TensorMap& tensors) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_checkpoint(tensors);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed: " + path.string());
}

TensorMap load_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingArtifact(path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

}  // namespace ccm
