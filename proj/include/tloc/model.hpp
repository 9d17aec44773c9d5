#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tloc/tensor.hpp"

namespace tloc::model {

using ad::Tensor;

enum class Branches { kRgbOnly, kDual };

std::string_view branches_name(Branches b);
Branches parse_branches(std::string_view text);

struct ModelConfig {
  std::size_t image_h = 32;
  std::size_t image_w = 32;
  std::size_t patch = 4;
  std::size_t seg_classes = 8;
  // Width of the learned per-class segmentation embedding fed to the patch
  // projection (plays the role of input channels).
  std::size_t seg_embed_dim = 3;
  std::size_t embed_dim = 64;
  std::size_t depth = 4;
  std::size_t heads = 4;
  std::size_t ffn_dim = 128;
  Branches branches = Branches::kDual;
  bool mff = true;
  bool attentive_fusion = true;
  bool scene_head = true;
  std::size_t scorer_hidden = 8;
  std::size_t k_coarse = 1;
  std::size_t k_middle = 1;
  std::size_t k_fine = 1;
  std::size_t k_scene = 1;
  std::size_t hidden_middle = 4;
  std::size_t hidden_fine = 4;

  static constexpr std::size_t kRgbChannels = 3;

  std::size_t num_patches() const { return (image_h / patch) * (image_w / patch); }
  std::size_t tokens() const { return 1 + num_patches(); }
  bool dual() const { return branches == Branches::kDual; }

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;

  /// `key=value` lines, one per field, in a fixed order.
  std::string to_text() const;
  static ModelConfig from_text(std::string_view text);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Images for a mini-batch. rgb is [batch × 3 × H × W] in [0, 1]; seg holds
/// class ids [batch × H × W] and may be empty for rgb-only models.
struct ImageBatch {
  std::size_t batch = 0;
  std::vector<double> rgb;
  std::vector<std::int32_t> seg;
};

struct LinearParams {
  Tensor w;
  Tensor b;
};

struct LayerNormParams {
  Tensor gain;
  Tensor bias;
};

struct BlockParams {
  LayerNormParams ln1;
  LinearParams qkv;
  LinearParams out;
  LayerNormParams ln2;
  LinearParams ffn1;
  LinearParams ffn2;
};

struct BranchParams {
  // Only the segmentation branch has an embedding table.
  Tensor seg_embed;
  LinearParams patch;
  Tensor cls;  // [1 × C]
  Tensor pos;  // [(1 + N) × C]
  std::vector<BlockParams> blocks;
};

/// Per-layer projection f and back-projection g, shared by both branches.
struct FusionParams {
  LinearParams f;
  LinearParams g;
};

/// Dense stack producing one score per branch CLS token.
struct ScorerParams {
  LinearParams hidden;
  LinearParams out;
};

struct HeadParams {
  std::vector<LinearParams> layers;  // GELU between consecutive layers
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Attention probabilities per layer, laid out [batch][head][T][T].
struct AttentionMaps {
  std::size_t batch = 0;
  std::size_t heads = 0;
  std::size_t tokens = 0;
  std::vector<std::vector<double>> rgb;
  std::vector<std::vector<double>> seg;
};

struct ForwardOptions {
  bool record_attention = false;
};

struct ForwardResult {
  Tensor coarse;
  Tensor middle;
  Tensor fine;
  Tensor scene;  // undefined when the scene head is disabled
  Tensor fused;  // f_mm, [batch × 2C]
  // [batch × 2] branch weights; undefined unless attentive fusion ran.
  Tensor branch_weights;
  // Final token sequences of each branch, [batch·T × C].
  Tensor rgb_tokens;
  Tensor seg_tokens;
  std::optional<AttentionMaps> attention;
};

/// Attention maps of one layer and branch for one sample, [heads × T × T].
/// Throws std::logic_error when the forward pass did not record attention.
std::vector<double> attention_export(const ForwardResult& result, std::size_t layer, bool seg_branch,
                                     std::size_t sample);

class Model {
 public:
  /// Random initialization: weights ~ N(0, 0.02²), biases zero, layer-norm
  /// gains one, fusion projections identity.
  Model(const ModelConfig& config, std::uint64_t seed);
  // A copy would share parameter storage; use copy_parameters_from.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedTensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  ForwardResult forward(const ImageBatch& images, const ForwardOptions& options = {}) const;

  BranchParams& rgb() { return rgb_; }
  BranchParams& seg() { return seg_; }
  std::vector<FusionParams>& fusion() { return fusion_; }
  ScorerParams& scorer() { return scorer_; }
  HeadParams& head(std::string_view name);

  /// Copies parameter values from another model with the same configuration.
  void copy_parameters_from(const Model& other);

 private:
  void register_params();

  ModelConfig config_;
  BranchParams rgb_;
  BranchParams seg_;
  std::vector<FusionParams> fusion_;
  ScorerParams scorer_;
  HeadParams coarse_;
  HeadParams middle_;
  HeadParams fine_;
  HeadParams scene_;
  std::vector<NamedTensor> params_;
};

/// [batch·T × C] token sequences with CLS at row b·T of each sample.
Tensor patch_embed_rgb(const ModelConfig& config, const BranchParams& params, std::span<const double> rgb,
                       std::size_t batch);
Tensor patch_embed_seg(const ModelConfig& config, const BranchParams& params, std::span<const std::int32_t> seg,
                       std::size_t batch);

/// Pre-norm self-attention and feed-forward sublayers, each with a residual.
Tensor encoder_block(const Tensor& x, const BlockParams& params, std::size_t batch, std::size_t heads,
                     std::vector<double>* attention = nullptr);

struct BranchPair {
  Tensor rgb;
  Tensor seg;
};

/// Replaces both branches' CLS rows with g(f(cls_rgb) + f(cls_seg)). Patch rows
/// are passed through untouched. Throws std::logic_error unless the
/// configuration is dual-branch with MFF enabled.
BranchPair mff_exchange(const ModelConfig& config, const Tensor& rgb, const Tensor& seg,
                        const FusionParams& params, std::size_t batch);

struct FusedFeatures {
  Tensor fused;    // [batch × 2C]
  Tensor weights;  // [batch × 2]
};

/// Softmax branch weights w, then [(1 + w_rgb)·cls_rgb || (1 + w_seg)·cls_seg].
FusedFeatures attentive_fuse(const Tensor& cls_rgb, const Tensor& cls_seg, const ScorerParams& params);

/// Branch weights computed by the scorer alone, [batch × 2].
Tensor branch_scores(const Tensor& cls_rgb, const Tensor& cls_seg, const ScorerParams& params);

/// Row indices of the CLS tokens for a batch.
std::vector<std::size_t> cls_rows(std::size_t batch, std::size_t tokens);

// Checkpoint: magic, config text block, tensor manifest, little-endian f64
// payloads.
void save_checkpoint(std::ostream& out, const Model& model);
void save_checkpoint(const std::string& path, const Model& model);
Model load_checkpoint(std::istream& in);
Model load_checkpoint(const std::string& path);

}  // namespace tloc::model
