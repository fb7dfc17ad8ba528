#pragma once

// Binary model checkpoint, little-endian throughout:
//
//   16 bytes  magic "EPEE-MULTIEXIT" 0x00 0x01 (last byte is the version)
//   u32       number of config fields
//   per field u16 name length, name bytes, u64 value
//   u32       number of parameter matrices
//   per matrix u64 rows, u64 cols, rows*cols f64 values
//
// Matrices appear in MultiExitModel::parameters() order.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "epee/errors.hpp"
#include "epee/model.hpp"

namespace epee {

inline constexpr std::array<char, 16> kCheckpointMagic = {'E', 'P', 'E', 'E', '-', 'M', 'U', 'L',
                                                          'T', 'I', 'E', 'X', 'I', 'T', '\0', '\x01'};

namespace detail {

template <typename T>
void put_le(std::ostream& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
  auto bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.put(static_cast<char>(bits & 0xFF));
    bits = static_cast<U>(bits >> 8);
  }
}

template <typename T>
T get_le(std::istream& in) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint16_t>>;
  unsigned char buf[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(T))) throw InputError("checkpoint: truncated file");
  U bits = 0;
  for (std::size_t i = sizeof(T); i-- > 0;) bits = static_cast<U>((bits << 8) | buf[i]);
  return std::bit_cast<T>(bits);
}

inline std::vector<std::pair<std::string, std::uint64_t>> config_fields(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"num_layers", c.num_layers}, {"hidden_dim", c.hidden_dim},
          {"num_heads", c.num_heads},   {"ffn_dim", c.ffn_dim},       {"num_classes", c.num_classes},
          {"max_seq_len", c.max_seq_len}, {"seed", c.seed}};
}

}  // namespace detail

inline void save_checkpoint(std::ostream& out, const MultiExitModel& model) {
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  const auto fields = detail::config_fields(model.config());
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(fields.size()));
  for (const auto& [name, value] : fields) {
    detail::put_le<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint64_t>(out, value);
  }
  const auto params = model.parameters();
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  for (const Parameter* p : params) {
    detail::put_le<std::uint64_t>(out, p->value.rows());
    detail::put_le<std::uint64_t>(out, p->value.cols());
    for (double v : p->value.data()) detail::put_le<double>(out, v);
  }
}

inline MultiExitModel load_checkpoint(std::istream& in) {
  std::array<char, 16> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kCheckpointMagic) {
    throw InputError("checkpoint: bad magic header");
  }
  std::map<std::string, std::uint64_t> fields;
  const auto n_fields = detail::get_le<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < n_fields; ++i) {
    const auto len = detail::get_le<std::uint16_t>(in);
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw InputError("checkpoint: truncated field name");
    fields[name] = detail::get_le<std::uint64_t>(in);
  }
  auto field = [&](const char* name) {
    auto it = fields.find(name);
    if (it == fields.end()) throw InputError(std::string("checkpoint: missing config field ") + name);
    return it->second;
  };
  ModelConfig cfg;
  cfg.vocab_size = field("vocab_size");
  cfg.num_layers = field("num_layers");
  cfg.hidden_dim = field("hidden_dim");
  cfg.num_heads = field("num_heads");
  cfg.ffn_dim = field("ffn_dim");
  cfg.num_classes = field("num_classes");
  cfg.max_seq_len = field("max_seq_len");
  cfg.seed = field("seed");
  MultiExitModel model(cfg);
  const auto params = model.parameters();
  if (detail::get_le<std::uint32_t>(in) != params.size()) throw InputError("checkpoint: parameter count mismatch");
  for (Parameter* p : params) {
    const auto rows = detail::get_le<std::uint64_t>(in);
    const auto cols = detail::get_le<std::uint64_t>(in);
    if (rows != p->value.rows() || cols != p->value.cols()) {
      throw InputError("checkpoint: " + p->name + " has shape " + Matrix::shape_string(rows, cols) + ", expected " +
                       p->value.shape());
    }
    for (double& v : p->value.data()) v = detail::get_le<double>(in);
  }
  if (in.peek() != std::char_traits<char>::eof()) throw InputError("checkpoint: trailing bytes");
  return model;
}

inline void save_checkpoint_file(const std::string& path, const MultiExitModel& model) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path);
  save_checkpoint(out, model);
  if (!out) throw InputError("write failed for checkpoint " + path);
}

inline MultiExitModel load_checkpoint_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint " + path);
  try {
    return load_checkpoint(in);
  } catch (const InputError& e) {
    throw InputError(path + ": " + e.what());
  }
}

}  // namespace epee
