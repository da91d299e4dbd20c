#pragma once

#include <cstdint>
#include <string>

namespace circ {

// Where activation vectors get normalized. None keeps the residual stream
// a plain sum; RmsInternal applies RMS normalization to each node's channel
// inputs without touching the stream itself.
enum class Normalization { None, RmsInternal };

struct ModelConfig {
  int n_layers = 2;        // 0 is allowed: token+position embedding straight to logits
  int n_heads = 2;         // attention heads per layer
  int d_model = 16;        // residual stream width
  int d_head = 8;          // per-head projection width
  int d_mlp = 32;          // MLP hidden width
  int vocab_size = 0;
  int max_positions = 16;  // learned absolute position table size
  Normalization norm = Normalization::None;
  std::uint64_t seed = 0;
};

// Throws std::invalid_argument when any dimension is out of range.
void validate_config(const ModelConfig& cfg);

// Canonical JSON rendering of a config; key order is fixed so the string is
// stable across runs and platforms.
std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

// FNV-1a over the canonical JSON, hex encoded. Ties circuits and score
// tables to the exact model shape they were computed on.
std::string config_hash(const ModelConfig& cfg);

std::string to_string(Normalization n);
Normalization normalization_from_string(const std::string& s);

}  // namespace circ
