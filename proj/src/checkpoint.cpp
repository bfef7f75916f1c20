#include "normbench/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "normbench/errors.hpp"

namespace normbench {

namespace {

constexpr char kMagic[4] = {'N', 'B', 'C', 'K'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, bytes.data(), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> b) : b_(b) {}

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b_[pos_ + i]) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(b_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const noexcept { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > b_.size()) throw CheckpointError("checkpoint header runs past the end of the file");
  }
  std::span<const std::uint8_t> b_;
  std::size_t pos_ = 0;
};

}  // namespace

void Checkpoint::add(std::string name, Shape shape, std::vector<float> data) {
  if (shape_numel(shape) != data.size()) throw ShapeError("array '" + name + "' does not match its shape");
  if (find(name)) throw CheckpointError("duplicate array name '" + name + "'");
  arrays_.push_back(NamedArray{std::move(name), std::move(shape), std::move(data)});
}

const NamedArray* Checkpoint::find(std::string_view name) const {
  for (const auto& a : arrays_)
    if (a.name == name) return &a;
  return nullptr;
}

const NamedArray& Checkpoint::at(std::string_view name) const {
  if (const auto* a = find(name)) return *a;
  throw CheckpointError("checkpoint has no array '" + std::string(name) + "'");
}

std::vector<std::uint8_t> Checkpoint::serialize() const {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_u32(out, kVersion);
  put_u32(out, static_cast<std::uint32_t>(arrays_.size()));
  std::uint64_t offset = 0;
  for (const auto& a : arrays_) {
    put_u32(out, static_cast<std::uint32_t>(a.name.size()));
    out.insert(out.end(), a.name.begin(), a.name.end());
    put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) put_u64(out, d);
    put_u64(out, offset);
    put_u64(out, a.data.size());
    offset += 4 * a.data.size();
  }
  for (const auto& a : arrays_)
    for (float f : a.data) put_u32(out, std::bit_cast<std::uint32_t>(f));
  put_u32(out, crc_of(out));
  return out;
}

Checkpoint Checkpoint::deserialize(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError("not an NBCK checkpoint (bad magic or file too short)");
  const auto body = bytes.first(bytes.size() - 4);
  Reader tail(bytes.last(4));
  const std::uint32_t stored = tail.u32(), actual = crc_of(body);
  if (stored != actual) throw CheckpointError("checksum mismatch: file is truncated or corrupt");

  Reader r(body);
  r.str(4);
  const std::uint32_t version = r.u32();
  if (version != kVersion) throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  const std::uint32_t count = r.u32();
  struct Entry {
    std::string name;
    Shape shape;
    std::uint64_t offset, numel;
  };
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str(r.u32());
    const std::uint32_t ndim = r.u32();
    for (std::uint32_t k = 0; k < ndim; ++k) e.shape.push_back(r.u64());
    e.offset = r.u64();
    e.numel = r.u64();
    entries.push_back(std::move(e));
  }
  const std::size_t payload = r.pos();
  Checkpoint ck;
  for (auto& e : entries) {
    if (e.shape.empty() || shape_numel(e.shape) != e.numel)
      throw CheckpointError("array '" + e.name + "' has inconsistent shape");
    if (payload + e.offset + 4 * e.numel > body.size())
      throw CheckpointError("array '" + e.name + "' runs past the end of the payload");
    std::vector<float> data(e.numel);
    for (std::size_t k = 0; k < e.numel; ++k) {
      const std::uint8_t* p = body.data() + payload + e.offset + 4 * k;
      const std::uint32_t u = static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
                              static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
      data[k] = std::bit_cast<float>(u);
    }
    ck.add(std::move(e.name), std::move(e.shape), std::move(data));
  }
  return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw CheckpointError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw CheckpointError("write to '" + path.string() + "' failed");
}

Checkpoint Checkpoint::load(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw CheckpointError("cannot open checkpoint '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace normbench
