#include "bevuda/numerics/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "bevuda/errors.hpp"

namespace bevuda::numerics {

namespace {

constexpr std::uint32_t kMaxRank = 16;
constexpr std::uint32_t kMaxName = 1u << 16;

template <typename U>
void put_le(std::ostream& os, U v) {
  std::array<char, sizeof(U)> bytes{};
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  }
  os.write(bytes.data(), bytes.size());
  if (!os) throw FormatError("write failed");
}

template <typename U>
U get_le(std::istream& is) {
  std::array<unsigned char, sizeof(U)> bytes{};
  is.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (!is) throw FormatError("unexpected end of file");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

}  // namespace

void write_u32(std::ostream& os, std::uint32_t v) { put_le(os, v); }
void write_u64(std::ostream& os, std::uint64_t v) { put_le(os, v); }
void write_f64(std::ostream& os, double v) { put_le(os, std::bit_cast<std::uint64_t>(v)); }
std::uint32_t read_u32(std::istream& is) { return get_le<std::uint32_t>(is); }
std::uint64_t read_u64(std::istream& is) { return get_le<std::uint64_t>(is); }
double read_f64(std::istream& is) { return std::bit_cast<double>(get_le<std::uint64_t>(is)); }

void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, static_cast<std::uint32_t>(s.size()));
  os.write(s.data(), static_cast<std::streamsize>(s.size()));
  if (!os) throw FormatError("write failed");
}

std::string read_string(std::istream& is) {
  const std::uint32_t n = read_u32(is);
  if (n > kMaxName) throw FormatError("string length " + std::to_string(n) + " exceeds limit");
  std::string s(n, '\0');
  is.read(s.data(), n);
  if (!is) throw FormatError("unexpected end of file in string");
  return s;
}

void write_tensor(std::ostream& os, const Tensor& t) {
  write_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) write_u64(os, e);
  for (double v : t.values()) write_f64(os, v);
}

Tensor read_tensor(std::istream& is) {
  const std::uint32_t rank = read_u32(is);
  if (rank == 0 || rank > kMaxRank) throw FormatError("invalid tensor rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = read_u64(is);
    if (e == 0 || e > (1ull << 32)) throw FormatError("invalid tensor extent");
  }
  std::vector<double> values(shape_size(shape));
  for (double& v : values) v = read_f64(is);
  return Tensor(std::move(shape), std::move(values));
}

void write_entries(std::ostream& os, const ParameterSet& entries) {
  write_u64(os, entries.size());
  for (const auto& [name, t] : entries) {
    write_string(os, name);
    write_tensor(os, t);
  }
}

ParameterSet read_entries(std::istream& is) {
  const std::uint64_t count = read_u64(is);
  ParameterSet out;
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = read_string(is);
    out.insert(name, read_tensor(is));
  }
  return out;
}

void write_checkpoint(std::ostream& os, const ParameterSet& params) {
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  write_u32(os, params.version());
  write_entries(os, params);
}

ParameterSet read_checkpoint(std::istream& is) {
  char magic[sizeof(kCheckpointMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kCheckpointMagic, sizeof(magic)) != 0) {
    throw FormatError("not a checkpoint file (bad magic)");
  }
  const std::uint32_t version = read_u32(is);
  if (version != ParameterSet::kFormatVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  ParameterSet params = read_entries(is);
  params.set_version(version);
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw FormatError("cannot open " + tmp.string() + " for writing");
    write_checkpoint(os, params);
    os.flush();
    if (!os) throw FormatError("failed writing " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

ParameterSet load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  return read_checkpoint(is);
}

}  // namespace bevuda::numerics
