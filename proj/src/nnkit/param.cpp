#include "pctk/nnkit/param.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace nnkit {

Parameter& ParamStore::create(const std::string& name, std::vector<int> shape) {
  if (contains(name)) throw pctk::ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->value = Tensor(shape);
  p->grad = Tensor(std::move(shape));
  params_.push_back(std::move(p));
  index_[name] = params_.size() - 1;
  return *params_.back();
}

Parameter& ParamStore::at(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw pctk::ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

const Parameter& ParamStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw pctk::ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

std::size_t ParamStore::total_params() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.numel();
  return n;
}

void ParamStore::zero_grads() {
  for (auto& p : params_) p->grad.fill(0.0);
}

// ---- checkpoint io ----------------------------------------------------

namespace {

constexpr char kMagic[4] = {'P', 'C', 'K', '1'};

void put_u32(std::ostream& out, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (!in) throw pctk::DataError("checkpoint truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) |
         (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64(std::ostream& out, double v) {
  const std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((bits >> (8 * i)) & 0xff);
  out.write(reinterpret_cast<const char*>(b), 8);
}

double get_f64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  if (!in) throw pctk::DataError("checkpoint truncated");
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_checkpoint(const ParamStore& store, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw pctk::DataError("cannot open checkpoint for writing: " + path);
  out.write(kMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(store.size()));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Parameter& p = store.item(i);
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_u32(out, static_cast<std::uint32_t>(p.value.rank()));
    for (int d = 0; d < p.value.rank(); ++d)
      put_u32(out, static_cast<std::uint32_t>(p.value.dim(d)));
  }
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Parameter& p = store.item(i);
    for (std::size_t k = 0; k < p.value.numel(); ++k) put_f64(out, p.value[k]);
  }
  if (!out) throw pctk::DataError("failed writing checkpoint: " + path);
}

void load_checkpoint(ParamStore& store, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw pctk::DataError("cannot open checkpoint for reading: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw pctk::DataError("bad checkpoint magic in " + path);
  const std::uint32_t count = get_u32(in);
  if (count != store.size())
    throw pctk::DataError("checkpoint parameter count mismatch: file has " +
                          std::to_string(count) + ", store has " +
                          std::to_string(store.size()));
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = get_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (!in) throw pctk::DataError("checkpoint truncated");
    const Parameter& p = store.item(i);
    if (name != p.name)
      throw pctk::DataError("checkpoint order mismatch at index " + std::to_string(i) +
                            ": file has '" + name + "', store has '" + p.name + "'");
    const std::uint32_t rank = get_u32(in);
    if (static_cast<int>(rank) != p.value.rank())
      throw pctk::DataError("checkpoint rank mismatch for " + name);
    for (std::uint32_t d = 0; d < rank; ++d) {
      const std::uint32_t dim = get_u32(in);
      if (static_cast<int>(dim) != p.value.dim(static_cast<int>(d)))
        throw pctk::DataError("checkpoint shape mismatch for " + name);
    }
  }
  for (std::uint32_t i = 0; i < count; ++i) {
    Parameter& p = store.item(i);
    for (std::size_t k = 0; k < p.value.numel(); ++k) p.value[k] = get_f64(in);
  }
}

}  // namespace nnkit
