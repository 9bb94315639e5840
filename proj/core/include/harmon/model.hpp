#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "harmon/tensor.hpp"
#include "harmon/volume.hpp"

namespace harmon {

struct ModelConfig {
  int label_count = 3;   // K, one style site per entry
  int noise_dim = 8;     // subject-specific residual style
  int base_channels = 16;
  int down_levels = 2;   // content encoder stride-2 stages
  int res_blocks = 4;
  float leaky_slope = 0.2f;
  int patch_depth = 3;   // image critic stride-2 stages
  uint64_t seed = 1;

  // Content code channel width; doubles per downsampling stage.
  int content_channels() const { return base_channels << down_levels; }
  int stride() const { return 1 << down_levels; }
  void validate() const;
};

// Single-object JSON round trip, shared by checkpoints and config files.
std::string model_config_json(const ModelConfig& config);
ModelConfig parse_model_config(const std::string& json_text);

// Spatial anatomical representation, shape [1, C_b, D', H', W'].
using ContentCode = Tensor;

// Style code s = (noise, label). The label part is continuous inside the
// network; the {-1,+1} convention only pins the training targets.
struct StyleCode {
  Tensor noise;  // [noise_dim]
  Tensor label;  // [label_count], kept in (-1,1) by a saturating head
};

struct HarmonizationTarget {
  enum class Variant { kSite, kAgnostic };
  enum class NoisePolicy { kZero, kSampled };

  Variant variant = Variant::kAgnostic;
  int site = 0;
  NoisePolicy noise_policy = NoisePolicy::kZero;
  uint64_t noise_seed = 0;

  static HarmonizationTarget site_target(int site);
  static HarmonizationTarget agnostic(NoisePolicy policy = NoisePolicy::kZero,
                                      uint64_t noise_seed = 0);

  // The +1/-1 vector this target feeds to the generator. Rejects site
  // indexes outside [0, k).
  LabelVector label(int k) const;
};

struct CriticOut {
  Tensor realism;  // unbounded least-squares targets
  Tensor label;    // [K] in (-1,1)
};

// The full network set: content encoder, style encoder, generator, and the
// image/content critics with their label-prediction heads. Weights are
// created once from the config seed (fan-in scaled uniform) and shared by
// all forward calls; inference is read-only.
class HarmonizationModel {
 public:
  explicit HarmonizationModel(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }

  // x: [1,1,D,H,W] normalized volume; extents divisible by stride().
  ContentCode encode_content(Tape& tape, const Tensor& x) const;
  StyleCode encode_style(Tape& tape, const Tensor& x) const;
  // Output matches the extents the content code was encoded from.
  Tensor generate(Tape& tape, const ContentCode& content,
                  const StyleCode& style) const;

  // Image critic: patch realism map + site label prediction.
  CriticOut image_critic(Tape& tape, const Tensor& x) const;
  // Content critic: scalar realism + site label prediction on the code.
  CriticOut content_critic(Tape& tape, const ContentCode& c) const;

  Tensor discriminate(Tape& tape, const Tensor& x) const;
  Tensor predict_label(Tape& tape, const Tensor& x) const;
  Tensor discriminate_content(Tape& tape, const ContentCode& c) const;
  Tensor predict_label_content(Tape& tape, const ContentCode& c) const;

  // One-volume inference entry point.
  Volume harmonize(const Volume& x, const HarmonizationTarget& target) const;
  StyleCode make_target_style(const HarmonizationTarget& target) const;

  // Named parameters in a stable order. The generator group covers both
  // encoders and the generator; the critic group covers all critic heads.
  const std::vector<std::pair<std::string, Tensor>>& parameters() const {
    return params_;
  }
  std::vector<std::pair<std::string, Tensor>> generator_parameters() const;
  std::vector<std::pair<std::string, Tensor>> critic_parameters() const;
  Tensor parameter(const std::string& name) const;

 private:
  struct Conv {
    Tensor w;
    Tensor b;  // undefined when normalization follows
    int stride = 1;
    int padding = 0;
  };
  struct Linear {
    Tensor w;
    Tensor b;
  };
  struct ResBlock {
    Conv c1, c2;
  };

  Tensor conv_in_lrelu(Tape& t, const Tensor& x, const Conv& c) const;
  Tensor res_forward(Tape& t, const Tensor& x, const ResBlock& b) const;
  Tensor ada_res_forward(Tape& t, const Tensor& x, const ResBlock& b,
                         const Tensor& style_params, int64_t offset) const;
  Tensor trunk_forward(Tape& t, const Tensor& x,
                       const std::vector<Conv>& trunk) const;

  ModelConfig config_;
  std::vector<std::pair<std::string, Tensor>> params_;

  // content encoder
  Conv eb_stem_;
  std::vector<Conv> eb_down_;
  std::vector<ResBlock> eb_res_;
  // style encoder
  std::vector<Conv> es_down_;
  Linear es_noise_, es_label_;
  // generator
  Linear g_mlp1_, g_mlp2_;
  std::vector<ResBlock> g_res_;
  std::vector<Conv> g_up_;
  Conv g_out_;
  // image critic
  std::vector<Conv> dx_trunk_;
  Conv dx_adv_;
  Linear dx_label_;
  // content critic
  std::vector<Conv> db_trunk_;
  Linear db_adv_, db_label_;
};

}  // namespace harmon
