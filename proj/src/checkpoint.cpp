#include "fmoe/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "fmoe/errors.hpp"

namespace fmoe {

namespace {

constexpr std::array<char, 10> kCkptMagic{'F', 'M', 'O', 'E', '-', 'C', 'K', 'P', 'T', '\0'};

void write_u32(std::ostream& out, std::uint32_t v) {
  char bytes[4];
  for (int i = 0; i < 4; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes, 4);
}

void write_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes, 8);
}

std::uint32_t read_u32(std::istream& in) {
  unsigned char bytes[4];
  in.read(reinterpret_cast<char*>(bytes), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char bytes[8];
  in.read(reinterpret_cast<char*>(bytes), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return v;
}

void write_matrix(std::ostream& out, const Matrix& m) {
  write_u64(out, m.rows());
  write_u64(out, m.cols());
  for (std::size_t i = 0; i < m.size(); ++i)
    write_u64(out, std::bit_cast<std::uint64_t>(m.data()[i]));
}

Matrix read_matrix(std::istream& in) {
  const std::uint64_t rows = read_u64(in);
  const std::uint64_t cols = read_u64(in);
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i)
    m.data()[i] = std::bit_cast<double>(read_u64(in));
  if (!in) throw ProtocolError("checkpoint: truncated matrix data");
  return m;
}

}  // namespace

void save_checkpoint(const std::string& path, const MoEConfig& config, const GateParams& gate,
                     std::span<const ExpertParams> experts) {
  if (experts.size() != config.total_experts())
    throw ShapeError("save_checkpoint: expert list must cover every global index");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ProtocolError("checkpoint: cannot open " + path + " for writing");
  out.write(kCkptMagic.data(), kCkptMagic.size());
  write_u32(out, kCheckpointVersion);
  write_u64(out, config.n_b);
  write_u64(out, config.d_m);
  write_u64(out, config.d_h);
  write_u64(out, config.k);
  write_u64(out, config.n_e_local);
  write_u64(out, config.world_size);
  write_u64(out, config.total_experts());
  write_u64(out, config.seed);
  write_matrix(out, gate.w_g);
  for (const ExpertParams& e : experts) {
    write_matrix(out, e.w1);
    write_matrix(out, e.b1);
    write_matrix(out, e.w2);
    write_matrix(out, e.b2);
  }
  if (!out) throw ProtocolError("checkpoint: write to " + path + " failed");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ProtocolError("checkpoint: cannot open " + path);
  std::array<char, 10> magic;
  in.read(magic.data(), magic.size());
  if (!in || magic != kCkptMagic) throw ProtocolError("checkpoint: bad header in " + path);
  const std::uint32_t version = read_u32(in);
  if (version != kCheckpointVersion)
    throw ProtocolError("checkpoint: unsupported version " + std::to_string(version));

  Checkpoint ckpt;
  ckpt.config.n_b = read_u64(in);
  ckpt.config.d_m = read_u64(in);
  ckpt.config.d_h = read_u64(in);
  ckpt.config.k = read_u64(in);
  ckpt.config.n_e_local = read_u64(in);
  ckpt.config.world_size = read_u64(in);
  const std::uint64_t total = read_u64(in);
  ckpt.config.seed = read_u64(in);
  if (!in || total != ckpt.config.total_experts())
    throw ProtocolError("checkpoint: inconsistent expert count in " + path);

  ckpt.gate.w_g = read_matrix(in);
  ckpt.gate.tag = ParamTag::World;
  ckpt.experts.resize(total);
  for (std::uint64_t g = 0; g < total; ++g) {
    ckpt.experts[g].w1 = read_matrix(in);
    ckpt.experts[g].b1 = read_matrix(in);
    ckpt.experts[g].w2 = read_matrix(in);
    ckpt.experts[g].b2 = read_matrix(in);
    ckpt.experts[g].tag = ParamTag::NoSync;
  }
  return ckpt;
}

}  // namespace fmoe
