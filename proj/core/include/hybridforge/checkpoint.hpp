#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hybridforge/model.hpp"
#include "hybridforge/tasks.hpp"

namespace hybridforge {

// On-disk layout (all integers little-endian):
//   "HYBF" | u16 version | u32 n_tensors
//   n_tensors x { u32 name_len | name (UTF-8) | u8 dtype | u8 rank | u64 dims[rank] | payload }
//   footer: u8 has_model
//           [has_model] u64 x 7 ModelConfig fields | u32 n_layers | n_layers x { u8 'F'|'L' | u8 tag_len | tag }
//           u32 n_meta | n_meta x { u32 key_len | key | u32 value_len | value }
//   u64 FNV-1a of every preceding byte
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct TensorRecord {
    std::string name;
    DType dtype = DType::F32;
    Shape shape;
    std::vector<std::uint8_t> payload;
};

struct Container {
    std::vector<TensorRecord> tensors;
    std::optional<ModelConfig> config;
    HybridSpec spec;  // meaningful only with config
    std::map<std::string, std::string> meta;

    template <class T>
    void add(const std::string& name, const Tensor<T>& t);
    const TensorRecord* find(const std::string& name) const;
    // Throws FormatError when the tensor is absent or has a different dtype.
    template <class T>
    Tensor<T> get(const std::string& name) const;
    const std::string& meta_at(const std::string& key) const;
};

std::vector<std::uint8_t> encode_container(const Container& c);
// Throws FormatError carrying the byte offset of the first problem.
Container decode_container(std::span<const std::uint8_t> bytes);

void write_container(const Container& c, const std::filesystem::path& path);
Container read_container(const std::filesystem::path& path);

template <class T>
Container model_to_container(const Model<T>& model);
template <class T>
Model<T> model_from_container(const Container& c);

template <class T>
void save_checkpoint(const Model<T>& model, const std::filesystem::path& path);
template <class T>
Model<T> load_checkpoint(const std::filesystem::path& path);

// Distilled sublayers indexed by layer; absent entries are skipped.
template <class T>
using LinearBlockSet = std::vector<std::optional<LinearBlockWeights<T>>>;

template <class T>
void save_linear_blocks(const LinearBlockSet<T>& blocks, const ModelConfig& config, const std::filesystem::path& path);
template <class T>
LinearBlockSet<T> load_linear_blocks(const std::filesystem::path& path);

// Splits stored as "split.{name}.tokens" [n x seq] and "split.{name}.answer_offsets"
// / "split.{name}.answer_positions" (CSR layout); answers are re-read from tokens.
void add_split(Container& c, const std::string& name, const Split& split);
Split get_split(const Container& c, const std::string& name);

} // namespace hybridforge
