#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>

#include "bevuda/numerics/parameters.hpp"

namespace bevuda::numerics {

// Binary layout, all integers and doubles little-endian:
//
//   magic    8 bytes  "BEVUDACK"
//   version  u32
//   count    u64
//   count x { name_len u32, name bytes, rank u32, dims u64[rank], values f64[prod(dims)] }
//
// The entry block (count + entries) is reused verbatim for named tensors
// inside corpus files.

inline constexpr char kCheckpointMagic[8] = {'B', 'E', 'V', 'U', 'D', 'A', 'C', 'K'};

void write_u32(std::ostream& os, std::uint32_t v);
void write_u64(std::ostream& os, std::uint64_t v);
void write_f64(std::ostream& os, double v);
void write_string(std::ostream& os, const std::string& s);
std::uint32_t read_u32(std::istream& is);
std::uint64_t read_u64(std::istream& is);
double read_f64(std::istream& is);
std::string read_string(std::istream& is);

void write_tensor(std::ostream& os, const Tensor& t);
Tensor read_tensor(std::istream& is);

/// Entry block: count followed by (name, tensor) pairs in name order.
void write_entries(std::ostream& os, const ParameterSet& entries);
ParameterSet read_entries(std::istream& is);

void write_checkpoint(std::ostream& os, const ParameterSet& params);
ParameterSet read_checkpoint(std::istream& is);

/// Writes to a sibling temporary file, then renames over `path`.
void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params);
ParameterSet load_checkpoint(const std::filesystem::path& path);

}  // namespace bevuda::numerics
