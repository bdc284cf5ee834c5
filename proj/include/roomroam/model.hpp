#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "roomroam/geometry.hpp"

namespace roomroam {

struct ModelConfig {
  int image_size = 224;
  int patch_size = 16;
  int in_channels = 3;
  int embed_dim = 768;
  int depth = 12;
  int heads = 12;
  int mlp_ratio = 4;
  int head_hidden = 0;  // 0: linear head on the class token

  int grid() const { return image_size / patch_size; }
  int patches() const { return grid() * grid(); }
  int tokens() const { return patches() + 1; }
  int patch_dim() const { return patch_size * patch_size * in_channels; }
  int head_dim() const { return embed_dim / heads; }
  int mlp_dim() const { return embed_dim * mlp_ratio; }

  void validate() const;  // throws Config

  static ModelConfig vit_b16() { return {}; }
  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct Tensor {
  std::vector<int> shape;
  std::vector<double> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s);
  std::size_t size() const { return data.size(); }
  double* ptr() { return data.data(); }
  const double* ptr() const { return data.data(); }
};

std::string shape_string(const std::vector<int>& shape);

struct LayerParams {
  Tensor norm1_w, norm1_b;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor norm2_w, norm2_b;
  Tensor fc1_w, fc1_b, fc2_w, fc2_b;
};

// Linear weights are stored [in, out] and applied as x * W + b.
struct ModelParams {
  Tensor patch_w, patch_b;
  Tensor cls_token;
  Tensor pos_embed;  // [tokens, D]; row 0 belongs to the class token
  std::vector<LayerParams> layers;
  Tensor norm_w, norm_b;
  Tensor head_hidden_w, head_hidden_b;  // empty without a hidden head layer
  Tensor head_w, head_b;

  // Zero tensors with the shapes implied by the config.
  static ModelParams zeros(const ModelConfig& config);

  // Canonical order; the names are those used by the model file.
  std::vector<std::pair<std::string, Tensor*>> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;

  std::size_t parameter_count() const;
  bool all_finite() const;
};

// Checks every tensor shape against the config (throws Shape).
void check_shapes(const ModelParams& params, const ModelConfig& config);

// Whether decoupled weight decay applies: linear and patch weights only, never norms, biases or embeddings.
bool decays(const std::string& tensor_name);

// Truncated-normal(0.02) weights, unit norms, zero biases; head per init_head.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed, double label_mean);

// Fresh regression head: weights uniform in +-1/sqrt(fan_in), output bias = label_mean.
void init_head(ModelParams& params, const ModelConfig& config, std::uint64_t seed, double label_mean);

// Softmax attention of every layer and head: at(l, h, i, j), rows x cols per map.
struct AttentionMaps {
  int layers = 0;
  int heads = 0;
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  AttentionMaps() = default;
  AttentionMaps(int l, int h, int r, int c)
      : layers(l), heads(h), rows(r), cols(c), data(static_cast<std::size_t>(l) * h * r * c, 0.0) {}
  std::size_t index(int l, int h, int i, int j) const {
    return ((static_cast<std::size_t>(l) * heads + h) * rows + i) * cols + j;
  }
  double at(int l, int h, int i, int j) const { return data[index(l, h, i, j)]; }
  double& at(int l, int h, int i, int j) { return data[index(l, h, i, j)]; }
};

struct ForwardResult {
  double output = 0.0;
  AttentionMaps attention;
};

// Binary image replicated over in_channels, patches flattened in (channel, row, column) order.
std::vector<double> image_to_patches(const BinaryImage& image, const ModelConfig& config);

ForwardResult forward(const ModelParams& params, const ModelConfig& config, const BinaryImage& image);
double predict_value(const ModelParams& params, const ModelConfig& config, const BinaryImage& image);

struct BatchGradient {
  double loss = 0.0;  // mean squared error
  std::vector<double> predictions;
  ModelParams grads;
};

// Per-sample gradients are reduced over a fixed partition of the batch into chunks, in index
// order, so the result does not depend on the thread count.
BatchGradient backward(const ModelParams& params, const ModelConfig& config, std::span<const BinaryImage> images,
                       std::span<const double> labels);
BatchGradient backward_serial(const ModelParams& params, const ModelConfig& config,
                              std::span<const BinaryImage> images, std::span<const double> labels);

struct Heatmap {
  int grid = 0;
  std::vector<double> values;  // row-major grid x grid, in [0, 1]

  double at(int r, int c) const { return values[static_cast<std::size_t>(r) * grid + c]; }
};

// Head-averaged rollout with the residual folded in, class row over the patch columns,
// min-max normalised (constant maps become all zeros).
Heatmap attention_rollout(const AttentionMaps& maps);
// Rollout product before normalisation: rows x cols, row-stochastic.
std::vector<double> rollout_matrix(const AttentionMaps& maps);

struct Prediction {
  double resets = 0.0;
  Heatmap heatmap;
};
Prediction predict(const ModelParams& params, const ModelConfig& config, const BinaryImage& image);

// RRVT container, tensors as little-endian float32.
std::string serialize(const ModelParams& params, const ModelConfig& config);
std::pair<ModelParams, ModelConfig> deserialize(std::string_view bytes);
void save_model(const std::filesystem::path& path, const ModelParams& params, const ModelConfig& config);
std::pair<ModelParams, ModelConfig> load_model(const std::filesystem::path& path);
// Parameters as they are after a save/load round trip.
ModelParams round_to_float(const ModelParams& params);

// Safetensors-style weight dictionary: u64 header length, JSON header, raw little-endian data.
struct ExternalTensor {
  std::vector<int> shape;
  std::vector<double> data;
};
using TensorDict = std::map<std::string, ExternalTensor>;
TensorDict read_safetensors(const std::filesystem::path& path);
void write_safetensors(const std::filesystem::path& path, const TensorDict& tensors);

struct NameRule {
  std::string external;
  std::string internal;
  std::string transform;  // copy | squeeze | linear | conv | qkv_weight:N | qkv_bias:N
};
// Whitespace-separated rules, '#' comments, "{i}" expands over encoder blocks.
std::vector<NameRule> parse_name_table(std::string_view text, int depth);
std::vector<NameRule> load_name_table(const std::filesystem::path& path, int depth);

// Loads the backbone from an external dictionary and initialises a fresh head. Throws Import
// listing every missing key, or naming the expected and found shapes.
ModelParams import_pretrained(const TensorDict& weights, const ModelConfig& config, const std::vector<NameRule>& table,
                              std::uint64_t seed, double label_mean);
ModelParams import_pretrained(const std::filesystem::path& weight_file, const ModelConfig& config,
                              const std::filesystem::path& table_file, std::uint64_t seed, double label_mean);

}  // namespace roomroam
