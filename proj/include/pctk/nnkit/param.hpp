#pragma once
//
// Named learnable parameters with paired gradient buffers, kept in a store
// whose iteration order is insertion order. That order defines the on-disk
// checkpoint layout, so it must be deterministic for a given model config.
//
// Checkpoint format (binary, little-endian):
//   magic "PCK1"
//   u32 parameter count
//   per parameter, in store order: u32 name length, name bytes,
//                                  u32 rank, u32 dims[rank]
//   then raw f64 payloads, in the same order
//

#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "pctk/nnkit/tensor.hpp"

namespace nnkit {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;  // same shape, zero between steps
};

class ParamStore {
 public:
  Parameter& create(const std::string& name, std::vector<int> shape);

  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  Parameter& at(const std::string& name);
  const Parameter& at(const std::string& name) const;

  std::size_t size() const { return params_.size(); }  // number of tensors
  std::size_t total_params() const;                    // number of scalars

  Parameter& item(std::size_t i) { return *params_[i]; }
  const Parameter& item(std::size_t i) const { return *params_[i]; }

  void zero_grads();

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

void save_checkpoint(const ParamStore& store, const std::string& path);

// Loads into an already-built store; names, order and shapes must match the
// file exactly, otherwise DataError.
void load_checkpoint(ParamStore& store, const std::string& path);

}  // namespace nnkit
