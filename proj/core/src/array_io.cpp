#include "fusionbench/array_io.hpp"

#include <cstring>
#include <fstream>
#include <iterator>

#include "fusionbench/errors.hpp"

namespace fusionbench {

namespace {

constexpr std::array<char, 4> kEndMarker{'F', 'E', 'N', 'D'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_bytes(std::vector<std::uint8_t>& out, const void* data, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  out.insert(out.end(), p, p + n);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint64_t offset() const { return pos_; }

  void need(std::uint64_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw FormatError(std::string("truncated file while reading ") + what, pos_);
    }
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  std::string str(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  float f32() {
    const std::uint32_t bits = u32("array values");
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
  }

  std::uint64_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::uint64_t pos_ = 0;
};

}  // namespace

const NamedArray& ArrayFile::get(const std::string& name) const {
  for (const auto& a : arrays)
    if (a.name == name) return a;
  throw InputError("array not found: " + name);
}

std::vector<std::uint8_t> encode_array_file(const ArrayFile& file) {
  std::vector<std::uint8_t> out;
  put_bytes(out, file.magic.data(), 4);
  put_u32(out, file.version);
  put_u32(out, static_cast<std::uint32_t>(file.arrays.size()));
  for (const auto& a : file.arrays) {
    std::uint64_t count = 1;
    for (auto d : a.shape) count *= d;
    if (count != a.values.size()) throw InputError("array shape/value mismatch: " + a.name);
    put_u32(out, static_cast<std::uint32_t>(a.name.size()));
    put_bytes(out, a.name.data(), a.name.size());
    put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) put_u32(out, d);
    for (float f : a.values) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      put_u32(out, bits);
    }
  }
  put_u32(out, static_cast<std::uint32_t>(file.metadata.size()));
  put_bytes(out, file.metadata.data(), file.metadata.size());
  put_bytes(out, kEndMarker.data(), 4);
  return out;
}

ArrayFile decode_array_file(std::span<const std::uint8_t> bytes,
                            const std::array<char, 4>& expected_magic) {
  Reader in(bytes);
  ArrayFile file;
  const std::string magic = in.str(4, "magic");
  std::memcpy(file.magic.data(), magic.data(), 4);
  if (file.magic != expected_magic) {
    throw FormatError("bad magic '" + magic + "', expected '" +
                          std::string(expected_magic.data(), 4) + "'",
                      0);
  }
  const std::uint64_t version_at = in.offset();
  file.version = in.u32("version");
  if (file.version != kArrayFormatVersion) {
    throw FormatError("unsupported format version " + std::to_string(file.version), version_at);
  }
  const std::uint32_t count = in.u32("array count");
  for (std::uint32_t k = 0; k < count; ++k) {
    NamedArray a;
    const std::uint32_t name_len = in.u32("name length");
    a.name = in.str(name_len, "array name");
    const std::uint64_t rank_at = in.offset();
    const std::uint32_t rank = in.u32("rank");
    if (rank > 8) throw FormatError("implausible array rank " + std::to_string(rank), rank_at);
    std::uint64_t n = 1;
    for (std::uint32_t d = 0; d < rank; ++d) {
      a.shape.push_back(in.u32("dims"));
      n *= a.shape.back();
      if (n > in.remaining()) {
        throw FormatError("array '" + a.name + "' larger than the remaining file", in.offset());
      }
    }
    in.need(4 * n, "array values");
    a.values.resize(n);
    for (auto& v : a.values) v = in.f32();
    file.arrays.push_back(std::move(a));
  }
  const std::uint32_t meta_len = in.u32("metadata length");
  file.metadata = in.str(meta_len, "metadata");
  const std::uint64_t end_at = in.offset();
  const std::string end = in.str(4, "end marker");
  if (std::memcmp(end.data(), kEndMarker.data(), 4) != 0) {
    throw FormatError("missing end marker", end_at);
  }
  if (in.remaining() != 0) throw FormatError("trailing bytes after end marker", in.offset());
  return file;
}

void write_array_file(const std::filesystem::path& path, const ArrayFile& file) {
  const auto bytes = encode_array_file(file);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw InputError("write failed: " + path.string());
}

ArrayFile read_array_file(const std::filesystem::path& path,
                          const std::array<char, 4>& expected_magic) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open for reading: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return decode_array_file(bytes, expected_magic);
}

NamedArray to_named_array(const std::string& name, const Tensor& t) {
  NamedArray a;
  a.name = name;
  a.shape = {static_cast<std::uint32_t>(t.channels), static_cast<std::uint32_t>(t.height),
             static_cast<std::uint32_t>(t.width)};
  a.values.reserve(t.size());
  for (double x : t.data) a.values.push_back(static_cast<float>(x));
  return a;
}

Tensor to_tensor(const NamedArray& a) {
  if (a.shape.size() != 3) throw InputError("expected a rank-3 array: " + a.name);
  Tensor t(static_cast<int>(a.shape[0]), static_cast<int>(a.shape[1]),
           static_cast<int>(a.shape[2]));
  for (std::size_t i = 0; i < a.values.size(); ++i) t.data[i] = a.values[i];
  return t;
}

}  // namespace fusionbench
