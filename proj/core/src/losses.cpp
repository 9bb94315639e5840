#include "harmon/losses.hpp"

#include <cmath>
#include <string>

#include <json.hpp>

#include "harmon/errors.hpp"

namespace harmon {

namespace {

void check_weight(const char* name, float v) {
  if (!std::isfinite(v) || v < 0.0f) {
    throw ConfigError(std::string("loss weight ") + name +
                      " must be finite and nonnegative");
  }
}

Tensor mixed_fidelity(Tape& tape, const Tensor& x, const Tensor& y, float mix,
                      const SsimParams& params) {
  if (!(mix >= 0.0f && mix <= 1.0f)) {
    throw ConfigError("fidelity mix must lie in [0,1]");
  }
  if (!x.defined() || !y.defined() || x.shape() != y.shape()) {
    throw ShapeError("fidelity loss needs matching extents");
  }
  if (mix == 1.0f) return ssim_loss(tape, x, y, params);
  Tensor l1 = tape.mean(tape.abs(tape.sub(x, y)));
  if (mix == 0.0f) return l1;
  Tensor ss = ssim_loss(tape, x, y, params);
  return tape.add(tape.mul(ss, mix), tape.mul(l1, 1.0f - mix));
}

}  // namespace

void LossWeights::validate() const {
  if (!(ssim_mix >= 0.0f && ssim_mix <= 1.0f)) {
    throw ConfigError("ssim_mix must lie in [0,1]");
  }
  check_weight("rec", rec);
  check_weight("cycle", cycle);
  check_weight("lum", lum);
  check_weight("structural", structural);
  check_weight("cla", cla);
  check_weight("adv_image", adv_image);
  check_weight("adv_content", adv_content);
  check_weight("pre_content", pre_content);
  check_weight("pre_image_g", pre_image_g);
  check_weight("pre_image_d", pre_image_d);
  check_weight("latent", latent);
}

Tensor reconstruction_loss(Tape& tape, const Tensor& x,
                           const Tensor& reconstructed, float mix,
                           const SsimParams& params) {
  return mixed_fidelity(tape, x, reconstructed, mix, params);
}

Tensor cycle_loss(Tape& tape, const Tensor& x, const Tensor& cycled, float mix,
                  const SsimParams& params) {
  return mixed_fidelity(tape, x, cycled, mix, params);
}

Tensor structural_consistency_loss(Tape& tape, const Tensor& a,
                                   const Tensor& b, const SsimParams& params) {
  return tape.sub(1.0f, structure_term(tape, a, b, params));
}

Tensor luminance_consistency_loss(Tape& tape, const Tensor& a, const Tensor& b,
                                  const SsimParams& params) {
  return tape.sub(1.0f, luminance_term(tape, a, b, params));
}

Tensor lsgan_critic_loss(Tape& tape, const Tensor& real_score,
                         const Tensor& fake_score) {
  Tensor real_gap = tape.sub(real_score, 1.0f);
  Tensor real_term = tape.mean(tape.mul(real_gap, real_gap));
  Tensor fake_term = tape.mean(tape.mul(fake_score, fake_score));
  return tape.add(real_term, fake_term);
}

Tensor lsgan_generator_loss(Tape& tape, const Tensor& fake_score) {
  Tensor gap = tape.sub(fake_score, 1.0f);
  return tape.mean(tape.mul(gap, gap));
}

Tensor label_prediction_loss(Tape& tape, const Tensor& prediction,
                             const LabelVector& target) {
  if (!prediction.defined() || prediction.rank() != 1 ||
      prediction.numel() != target.k()) {
    throw ShapeError("prediction length does not match " +
                     std::to_string(target.k()) + " label entries");
  }
  Tensor t = Tensor::from_data({target.k()}, target.entries());
  Tensor diff = tape.sub(prediction, t);
  return tape.mean(tape.mul(diff, diff));
}

Tensor latent_recovery_loss(Tape& tape, const Tensor& recovered_noise,
                            const Tensor& target_noise,
                            const Tensor& recovered_content,
                            const Tensor& source_content) {
  Tensor noise_term =
      tape.mean(tape.abs(tape.sub(recovered_noise, target_noise)));
  Tensor content_term = tape.mean(
      tape.abs(tape.sub(recovered_content, tape.detach(source_content))));
  return tape.add(noise_term, content_term);
}

double total_generator_objective(const GeneratorTerms& t,
                                 const LossWeights& w) {
  return static_cast<double>(w.rec) * t.reconstruction +
         static_cast<double>(w.cycle) * t.cycle +
         static_cast<double>(w.lum) * t.luminance +
         static_cast<double>(w.structural) * t.structural +
         static_cast<double>(w.cla) * t.classification +
         static_cast<double>(w.adv_image) * t.adv_image +
         static_cast<double>(w.adv_content) * t.adv_content +
         static_cast<double>(w.pre_image_g) * t.pre_image -
         static_cast<double>(w.pre_content) * t.pre_content +
         static_cast<double>(w.latent) * t.latent;
}

double total_critic_objective(const CriticTerms& t, const LossWeights& w) {
  return static_cast<double>(w.adv_image) * t.adv_image +
         static_cast<double>(w.adv_content) * t.adv_content +
         static_cast<double>(w.pre_image_d) * t.pre_image +
         static_cast<double>(w.pre_content) * t.pre_content;
}

namespace {

float term_value(const Tensor& t, const char* name) {
  if (!t.defined() || t.numel() != 1) {
    throw ShapeError(std::string("loss term ") + name +
                     " must be a defined scalar tensor");
  }
  return t.scalar();
}

}  // namespace

GeneratorTerms report_values(const GeneratorTermTensors& t) {
  GeneratorTerms r;
  r.reconstruction = term_value(t.reconstruction, "reconstruction");
  r.cycle = term_value(t.cycle, "cycle");
  r.luminance = term_value(t.luminance, "luminance");
  r.structural = term_value(t.structural, "structural");
  r.classification = term_value(t.classification, "classification");
  r.adv_image = term_value(t.adv_image, "adv_image");
  r.adv_content = term_value(t.adv_content, "adv_content");
  r.pre_image = term_value(t.pre_image, "pre_image");
  r.pre_content = term_value(t.pre_content, "pre_content");
  r.latent = term_value(t.latent, "latent");
  return r;
}

CriticTerms report_values(const CriticTermTensors& t) {
  CriticTerms r;
  r.adv_image = term_value(t.adv_image, "adv_image");
  r.adv_content = term_value(t.adv_content, "adv_content");
  r.pre_image = term_value(t.pre_image, "pre_image");
  r.pre_content = term_value(t.pre_content, "pre_content");
  return r;
}

Tensor weighted_generator_objective(Tape& tape, const GeneratorTermTensors& t,
                                    const LossWeights& w) {
  report_values(t);  // shape validation
  Tensor acc = tape.mul(t.reconstruction, w.rec);
  acc = tape.add(acc, tape.mul(t.cycle, w.cycle));
  acc = tape.add(acc, tape.mul(t.luminance, w.lum));
  acc = tape.add(acc, tape.mul(t.structural, w.structural));
  acc = tape.add(acc, tape.mul(t.classification, w.cla));
  acc = tape.add(acc, tape.mul(t.adv_image, w.adv_image));
  acc = tape.add(acc, tape.mul(t.adv_content, w.adv_content));
  acc = tape.add(acc, tape.mul(t.pre_image, w.pre_image_g));
  acc = tape.add(acc, tape.mul(t.pre_content, -w.pre_content));
  acc = tape.add(acc, tape.mul(t.latent, w.latent));
  return acc;
}

Tensor weighted_critic_objective(Tape& tape, const CriticTermTensors& t,
                                 const LossWeights& w) {
  report_values(t);  // shape validation
  Tensor acc = tape.mul(t.adv_image, w.adv_image);
  acc = tape.add(acc, tape.mul(t.adv_content, w.adv_content));
  acc = tape.add(acc, tape.mul(t.pre_image, w.pre_image_d));
  acc = tape.add(acc, tape.mul(t.pre_content, w.pre_content));
  return acc;
}

std::string loss_report_json_line(const LossReport& r) {
  nlohmann::json j{
      {"step", r.step},
      {"rec", r.generator.reconstruction},
      {"cycle", r.generator.cycle},
      {"lum", r.generator.luminance},
      {"struct", r.generator.structural},
      {"cla", r.generator.classification},
      {"adv_image_g", r.generator.adv_image},
      {"adv_content_g", r.generator.adv_content},
      {"pre_image_g", r.generator.pre_image},
      {"pre_content_g", r.generator.pre_content},
      {"latent", r.generator.latent},
      {"adv_image_d", r.critic.adv_image},
      {"adv_content_d", r.critic.adv_content},
      {"pre_image_d", r.critic.pre_image},
      {"pre_content_d", r.critic.pre_content},
      {"g_total", r.generator_total},
      {"d_total", r.critic_total},
  };
  return j.dump();
}

LossReport parse_loss_report_line(const std::string& line) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad loss log line: ") + e.what());
  }
  LossReport r;
  try {
    r.step = j.at("step").get<int64_t>();
    r.generator.reconstruction = j.at("rec").get<double>();
    r.generator.cycle = j.at("cycle").get<double>();
    r.generator.luminance = j.at("lum").get<double>();
    r.generator.structural = j.at("struct").get<double>();
    r.generator.classification = j.at("cla").get<double>();
    r.generator.adv_image = j.at("adv_image_g").get<double>();
    r.generator.adv_content = j.at("adv_content_g").get<double>();
    r.generator.pre_image = j.at("pre_image_g").get<double>();
    r.generator.pre_content = j.at("pre_content_g").get<double>();
    r.generator.latent = j.at("latent").get<double>();
    r.critic.adv_image = j.at("adv_image_d").get<double>();
    r.critic.adv_content = j.at("adv_content_d").get<double>();
    r.critic.pre_image = j.at("pre_image_d").get<double>();
    r.critic.pre_content = j.at("pre_content_d").get<double>();
    r.generator_total = j.at("g_total").get<double>();
    r.critic_total = j.at("d_total").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("loss log line missing fields: ") +
                      e.what());
  }
  return r;
}

}  // namespace harmon
