#pragma once

#include <cstdint>
#include <string>

#include "harmon/ssim.hpp"
#include "harmon/tensor.hpp"
#include "harmon/volume.hpp"

namespace harmon {

struct LossWeights {
  float ssim_mix = 0.5f;     // SSIM share of the fidelity mix, in [0,1]
  float rec = 10.0f;         // self-reconstruction fidelity
  float cycle = 10.0f;       // round-trip translation fidelity
  float lum = 5.0f;          // luminance match to the style reference
  float structural = 5.0f;   // structure match between restylings
  float cla = 1.0f;          // style-encoder site classification
  float adv_image = 1.0f;    // image realism game
  float adv_content = 1.0f;  // content distribution alignment game
  float pre_content = 1.0f;  // site prediction on content codes
  float pre_image_g = 1.0f;  // target-site prediction on generated images
  float pre_image_d = 1.0f;  // site prediction on real images
  float latent = 1.0f;       // noise/content recovery from generated images
  void validate() const;
};

// mix*ssim_loss + (1-mix)*mean abs difference. The endpoint mixes skip the
// unused branch, so mix=0 carries no window-size precondition and mix=1 is
// bitwise equal to ssim_loss.
Tensor reconstruction_loss(Tape& tape, const Tensor& x,
                           const Tensor& reconstructed, float mix,
                           const SsimParams& params);
Tensor cycle_loss(Tape& tape, const Tensor& x, const Tensor& cycled, float mix,
                  const SsimParams& params);

// 1 - mean structure term: invariant to positive affine restyling.
Tensor structural_consistency_loss(Tape& tape, const Tensor& a,
                                   const Tensor& b, const SsimParams& params);
// 1 - mean luminance term: penalizes mean-intensity mismatch only.
Tensor luminance_consistency_loss(Tape& tape, const Tensor& a, const Tensor& b,
                                  const SsimParams& params);

// Least-squares realism game. The critic drives real scores to 1 and fake
// scores to 0; the generator drives fake scores to 1.
Tensor lsgan_critic_loss(Tape& tape, const Tensor& real_score,
                         const Tensor& fake_score);
Tensor lsgan_generator_loss(Tape& tape, const Tensor& fake_score);

// Mean squared error between a (-1,1) prediction head and a {-1,+1} label.
// Shared form behind site classification on the style head, site prediction
// on images, and site prediction on content codes.
Tensor label_prediction_loss(Tape& tape, const Tensor& prediction,
                             const LabelVector& target);

// mean|recovered_noise - target_noise| + mean|recovered_content - content|.
// The content target is stop-gradiented: only the recovery path trains.
Tensor latent_recovery_loss(Tape& tape, const Tensor& recovered_noise,
                            const Tensor& target_noise,
                            const Tensor& recovered_content,
                            const Tensor& source_content);

// Raw per-term values of one step, before weighting.
struct GeneratorTerms {
  double reconstruction = 0;
  double cycle = 0;
  double luminance = 0;
  double structural = 0;
  double classification = 0;
  double adv_image = 0;
  double adv_content = 0;
  double pre_image = 0;
  double pre_content = 0;  // enters the total with a minus sign
  double latent = 0;
};
struct CriticTerms {
  double adv_image = 0;
  double adv_content = 0;
  double pre_image = 0;
  double pre_content = 0;
};

// Weighted signed sums. The encoders maximize site prediction on content,
// hence the single negative contribution on the generator side; critic-side
// adversarial terms are the separate least-squares updates, not negations.
double total_generator_objective(const GeneratorTerms& t,
                                 const LossWeights& w);
double total_critic_objective(const CriticTerms& t, const LossWeights& w);

// Tape-resident per-term scalars of one step, the backpropagation-side twin
// of GeneratorTerms/CriticTerms. All fields must be defined shape-{1} tensors.
struct GeneratorTermTensors {
  Tensor reconstruction, cycle, luminance, structural, classification;
  Tensor adv_image, adv_content, pre_image, pre_content, latent;
};
struct CriticTermTensors {
  Tensor adv_image, adv_content, pre_image, pre_content;
};

GeneratorTerms report_values(const GeneratorTermTensors& t);
CriticTerms report_values(const CriticTermTensors& t);

// Same signed sums assembled on the tape, so one backward pass trains on
// exactly what the report totals describe.
Tensor weighted_generator_objective(Tape& tape, const GeneratorTermTensors& t,
                                    const LossWeights& w);
Tensor weighted_critic_objective(Tape& tape, const CriticTermTensors& t,
                                 const LossWeights& w);

struct LossReport {
  int64_t step = 0;
  GeneratorTerms generator;
  CriticTerms critic;
  double generator_total = 0;
  double critic_total = 0;
};

// One JSON object per line; parse inverts emit.
std::string loss_report_json_line(const LossReport& r);
LossReport parse_loss_report_line(const std::string& line);

}  // namespace harmon
