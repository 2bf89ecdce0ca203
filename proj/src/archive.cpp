#include "multilane/archive.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "multilane/errors.hpp"

namespace multilane {
inline namespace MULTILANE_PRECISION_NS {

namespace {

constexpr char kMagic[4] = {'M', 'L', 'T', 'A'};

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto bits = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(bits & 0xFFu));
    bits = static_cast<U>(bits >> 8);
  }
}

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

  template <typename T>
  T take(const char* what) {
    need(sizeof(T), what);
    std::make_unsigned_t<T> v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::make_unsigned_t<T>>(bytes_[pos_ + i]) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string take_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw LoadError(std::string("MLTA archive truncated while reading ") + what);
    }
  }

  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

void Archive::put(std::string name, Tensor tensor) {
  if (!tensor.defined()) throw ContractError("Archive::put: undefined tensor '" + name + "'");
  if (name.size() > 0xFFFF) throw ContractError("Archive::put: name too long");
  auto it = std::find_if(entries_.begin(), entries_.end(),
                         [&](const auto& e) { return e.first == name; });
  if (it != entries_.end()) {
    it->second = std::move(tensor);
  } else {
    entries_.emplace_back(std::move(name), std::move(tensor));
  }
}

bool Archive::contains(const std::string& name) const { return find(name).has_value(); }

std::optional<Tensor> Archive::find(const std::string& name) const {
  for (const auto& [key, value] : entries_) {
    if (key == name) return value;
  }
  return std::nullopt;
}

const Tensor& Archive::get(const std::string& name) const {
  for (const auto& [key, value] : entries_) {
    if (key == name) return value;
  }
  throw LoadError("MLTA archive: missing entry '" + name + "'");
}

const Tensor& Archive::get(const std::string& name, const Shape& expected) const {
  const Tensor& t = get(name);
  if (t.shape() != expected) {
    throw LoadError("MLTA archive: entry '" + name + "' has shape " + shape_string(t.shape()) +
                    ", expected " + shape_string(expected));
  }
  return t;
}

std::vector<std::uint8_t> Archive::serialize() const {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(entries_.size()));
  for (const auto& [name, tensor] : entries_) {
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    const bool wide = sizeof(Real) == 8;
    out.push_back(wide ? kFloat64 : kFloat32);
    out.push_back(static_cast<std::uint8_t>(tensor.rank()));
    for (auto extent : tensor.shape()) put_le<std::uint64_t>(out, extent);
    for (Real v : tensor.values()) {
      if (wide) {
        put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(static_cast<double>(v)));
      } else {
        put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      }
    }
  }
  return out;
}

Archive Archive::deserialize(const std::vector<std::uint8_t>& bytes) {
  Reader in(bytes);
  const std::string magic = in.take_string(4, "magic");
  if (magic != std::string(kMagic, 4)) throw LoadError("MLTA archive: bad magic bytes");
  const auto version = in.take<std::uint32_t>("version");
  if (version != kVersion) {
    throw LoadError("MLTA archive: unsupported version " + std::to_string(version));
  }
  const auto count = in.take<std::uint32_t>("entry count");
  Archive archive;
  for (std::uint32_t e = 0; e < count; ++e) {
    const auto name_len = in.take<std::uint16_t>("name length");
    std::string name = in.take_string(name_len, "name");
    const auto dtype = in.take<std::uint8_t>("dtype");
    if (dtype != kFloat32 && dtype != kFloat64) {
      throw LoadError("MLTA archive: entry '" + name + "' has unknown dtype " +
                      std::to_string(dtype));
    }
    const auto rank = in.take<std::uint8_t>("rank");
    if (rank == 0) throw LoadError("MLTA archive: entry '" + name + "' has rank 0");
    Shape shape(rank);
    std::size_t numel = 1;
    for (auto& extent : shape) {
      extent = static_cast<std::size_t>(in.take<std::uint64_t>("extent"));
      if (extent == 0) throw LoadError("MLTA archive: entry '" + name + "' has zero extent");
      numel *= extent;
    }
    const std::size_t width = dtype == kFloat32 ? 4 : 8;
    in.need(numel * width, "payload");
    std::vector<Real> values(numel);
    for (auto& v : values) {
      if (dtype == kFloat32) {
        v = static_cast<Real>(std::bit_cast<float>(in.take<std::uint32_t>("payload")));
      } else {
        v = static_cast<Real>(std::bit_cast<double>(in.take<std::uint64_t>("payload")));
      }
    }
    archive.put(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  if (!in.done()) throw LoadError("MLTA archive: trailing bytes after last entry");
  return archive;
}

void Archive::save(const std::filesystem::path& path) const {
  const auto bytes = serialize();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path.string() + "'");
}

Archive Archive::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  return deserialize(bytes);
}

}  // namespace MULTILANE_PRECISION_NS
}  // namespace multilane
