#include "harmon/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "harmon/errors.hpp"
#include "harmon/nifti.hpp"

namespace harmon {
namespace {

// Distinct derivation streams so the pool split (a pure function of the
// config) never consumes from the checkpointed step RNG.
constexpr uint64_t kPoolStream = 11;
constexpr uint64_t kStepStream = 12;

const TrainConfig& validated(const TrainConfig& c) {
  c.validate();
  return c;
}

void check_normalized(const Volume& v, const char* which) {
  for (float x : v.voxels) {
    if (!(x >= -1e-4f && x <= 1.0f + 1e-4f)) {
      throw ConfigError(std::string("train_step expects normalized ") + which +
                        " volume in [0,1]");
    }
  }
}

void check_finite(std::initializer_list<std::pair<const char*, double>> terms,
                  int64_t step) {
  for (const auto& [name, value] : terms) {
    if (!std::isfinite(value)) {
      throw NumericError("training step " + std::to_string(step) +
                         ": loss term " + name + " is not finite");
    }
  }
}

std::string checkpoint_name(int64_t step) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "ckpt-%06lld.bin",
                static_cast<long long>(step));
  return buf;
}

void reject_unknown(const nlohmann::json& j,
                    std::initializer_list<const char*> allowed,
                    const char* what) {
  for (const auto& [key, unused] : j.items()) {
    bool known = false;
    for (const char* k : allowed) known = known || key == k;
    if (!known) {
      throw FormatError(std::string(what) + ": unknown key \"" + key + "\"");
    }
  }
}

template <typename T>
void get_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

LossWeights parse_weights(const nlohmann::json& j) {
  reject_unknown(j,
                 {"ssim_mix", "rec", "cycle", "lum", "structural", "cla",
                  "adv_image", "adv_content", "pre_content", "pre_image_g",
                  "pre_image_d", "latent"},
                 "weights");
  LossWeights w;
  get_if(j, "ssim_mix", w.ssim_mix);
  get_if(j, "rec", w.rec);
  get_if(j, "cycle", w.cycle);
  get_if(j, "lum", w.lum);
  get_if(j, "structural", w.structural);
  get_if(j, "cla", w.cla);
  get_if(j, "adv_image", w.adv_image);
  get_if(j, "adv_content", w.adv_content);
  get_if(j, "pre_content", w.pre_content);
  get_if(j, "pre_image_g", w.pre_image_g);
  get_if(j, "pre_image_d", w.pre_image_d);
  get_if(j, "latent", w.latent);
  return w;
}

nlohmann::json weights_json(const LossWeights& w) {
  return nlohmann::json{{"ssim_mix", w.ssim_mix},
                        {"rec", w.rec},
                        {"cycle", w.cycle},
                        {"lum", w.lum},
                        {"structural", w.structural},
                        {"cla", w.cla},
                        {"adv_image", w.adv_image},
                        {"adv_content", w.adv_content},
                        {"pre_content", w.pre_content},
                        {"pre_image_g", w.pre_image_g},
                        {"pre_image_d", w.pre_image_d},
                        {"latent", w.latent}};
}

SsimParams parse_ssim(const nlohmann::json& j) {
  reject_unknown(j,
                 {"window_radius", "window_sigma", "k1", "k2", "dynamic_range",
                  "alpha", "beta", "gamma", "mode"},
                 "ssim");
  SsimParams p;
  get_if(j, "window_radius", p.window_radius);
  get_if(j, "window_sigma", p.window_sigma);
  get_if(j, "k1", p.k1);
  get_if(j, "k2", p.k2);
  get_if(j, "dynamic_range", p.dynamic_range);
  get_if(j, "alpha", p.alpha);
  get_if(j, "beta", p.beta);
  get_if(j, "gamma", p.gamma);
  if (j.contains("mode")) {
    const auto mode = j.at("mode").get<std::string>();
    if (mode == "windowed") {
      p.mode = SsimMode::kWindowed;
    } else if (mode == "global") {
      p.mode = SsimMode::kGlobal;
    } else {
      throw FormatError("ssim: mode must be \"windowed\" or \"global\"");
    }
  }
  return p;
}

nlohmann::json ssim_json(const SsimParams& p) {
  return nlohmann::json{
      {"window_radius", p.window_radius},
      {"window_sigma", p.window_sigma},
      {"k1", p.k1},
      {"k2", p.k2},
      {"dynamic_range", p.dynamic_range},
      {"alpha", p.alpha},
      {"beta", p.beta},
      {"gamma", p.gamma},
      {"mode", p.mode == SsimMode::kWindowed ? "windowed" : "global"}};
}

}  // namespace

void TrainConfig::validate() const {
  if (steps < 0) throw ConfigError("train config: steps must be >= 0");
  if (batch_size <= 0) throw ConfigError("train config: batch size must be positive");
  if (batch_size != 1) {
    throw ConfigError("train config: only batch size 1 is implemented");
  }
  for (float lr : {lr_generator, lr_critic}) {
    if (!std::isfinite(lr) || lr < 0.0f) {
      throw ConfigError("train config: learning rates must be finite and >= 0");
    }
  }
  if (!(beta1 >= 0.0f && beta1 < 1.0f) || !(beta2 >= 0.0f && beta2 < 1.0f)) {
    throw ConfigError("train config: moment decays must lie in [0,1)");
  }
  if (!(labeled_fraction > 0.0f && labeled_fraction < 1.0f)) {
    throw ConfigError("train config: labeled fraction must lie in (0,1)");
  }
  if (checkpoint_interval < 0) {
    throw ConfigError("train config: checkpoint interval must be >= 0");
  }
  weights.validate();
  model.validate();
  ssim.validate();
}

TrainConfig parse_train_config(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("train config: expected a JSON object");
  reject_unknown(j,
                 {"steps", "batch_size", "lr_generator", "lr_critic", "beta1",
                  "beta2", "seed", "labeled_fraction", "checkpoint_interval",
                  "corpus_manifest", "out_dir", "weights", "model", "ssim"},
                 "train config");
  TrainConfig c;
  try {
    get_if(j, "steps", c.steps);
    get_if(j, "batch_size", c.batch_size);
    get_if(j, "lr_generator", c.lr_generator);
    get_if(j, "lr_critic", c.lr_critic);
    get_if(j, "beta1", c.beta1);
    get_if(j, "beta2", c.beta2);
    get_if(j, "seed", c.seed);
    get_if(j, "labeled_fraction", c.labeled_fraction);
    get_if(j, "checkpoint_interval", c.checkpoint_interval);
    get_if(j, "corpus_manifest", c.corpus_manifest);
    get_if(j, "out_dir", c.out_dir);
    if (j.contains("weights")) c.weights = parse_weights(j.at("weights"));
    if (j.contains("model")) c.model = parse_model_config(j.at("model").dump());
    if (j.contains("ssim")) c.ssim = parse_ssim(j.at("ssim"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("train config: mistyped field: ") + e.what());
  }
  c.validate();
  return c;
}

std::string train_config_json(const TrainConfig& c) {
  nlohmann::json j;
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["lr_generator"] = c.lr_generator;
  j["lr_critic"] = c.lr_critic;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["seed"] = c.seed;
  j["labeled_fraction"] = c.labeled_fraction;
  j["checkpoint_interval"] = c.checkpoint_interval;
  j["corpus_manifest"] = c.corpus_manifest;
  j["out_dir"] = c.out_dir;
  j["weights"] = weights_json(c.weights);
  j["model"] = nlohmann::json::parse(model_config_json(c.model));
  j["ssim"] = ssim_json(c.ssim);
  return j.dump(2);
}

Trainer::Trainer(const TrainConfig& config)
    : config_(validated(config)),
      model_(config_.model),
      opt_g_(model_.generator_parameters(),
             AdamConfig{config_.lr_generator, config_.beta1, config_.beta2,
                        1e-8f}),
      opt_d_(model_.critic_parameters(),
             AdamConfig{config_.lr_critic, config_.beta1, config_.beta2,
                        1e-8f}),
      rng_(derive_seed(config_.seed, kStepStream)) {}

LossReport Trainer::train_step(const Volume& x_u, const LabeledVolume& x_l) {
  const int64_t step = step_ + 1;
  const int k = config_.model.label_count;
  if (x_l.label.k() != k) {
    throw ConfigError("train_step: label length does not match the model");
  }
  check_normalized(x_u, "unlabeled");
  check_normalized(x_l.volume, "labeled");
  const LossWeights& w = config_.weights;

  // One noise draw per step; both phases see the same fake samples.
  std::vector<float> noise(static_cast<size_t>(config_.model.noise_dim));
  for (auto& n : noise) n = rng_.normal();
  Tensor n_r = Tensor::from_data({config_.model.noise_dim}, noise);
  Tensor target_label = Tensor::from_data({k}, x_l.label.entries());
  const StyleCode s_r{n_r, target_label};

  Tensor xu = volume_to_tensor(x_u);
  Tensor xl = volume_to_tensor(x_l.volume);

  // Critic phase. The generator legs run with recording off: they only
  // supply constants here, so no gradient reaches the generator side.
  Tape td;
  td.set_recording(false);
  ContentCode cu_const = model_.encode_content(td, xu);
  ContentCode cl_const = model_.encode_content(td, xl);
  Tensor fake_const = model_.generate(td, cu_const, s_r);
  td.set_recording(true);

  CriticOut real_img = model_.image_critic(td, xl);
  CriticOut fake_img = model_.image_critic(td, fake_const);
  CriticOut real_code = model_.content_critic(td, cl_const);
  CriticOut fake_code = model_.content_critic(td, cu_const);

  CriticTermTensors ct;
  ct.adv_image = lsgan_critic_loss(td, real_img.realism, fake_img.realism);
  ct.adv_content = lsgan_critic_loss(td, real_code.realism, fake_code.realism);
  ct.pre_image = label_prediction_loss(td, real_img.label, x_l.label);
  ct.pre_content = label_prediction_loss(td, real_code.label, x_l.label);
  const CriticTerms critic_report = report_values(ct);
  check_finite({{"adv_image_d", critic_report.adv_image},
                {"adv_content_d", critic_report.adv_content},
                {"pre_image_d", critic_report.pre_image},
                {"pre_content_d", critic_report.pre_content}},
               step);
  Tensor critic_objective = weighted_critic_objective(td, ct, w);
  td.backward(critic_objective);
  opt_d_.step();

  // Generator phase, against the just-updated critics.
  Tape tg;
  ContentCode c_u = model_.encode_content(tg, xu);
  StyleCode s_u = model_.encode_style(tg, xu);
  ContentCode c_l = model_.encode_content(tg, xl);
  StyleCode s_l = model_.encode_style(tg, xl);
  Tensor x_uu = model_.generate(tg, c_u, s_u);
  Tensor x_ul = model_.generate(tg, c_u, s_r);
  ContentCode c_ul = model_.encode_content(tg, x_ul);
  StyleCode s_ul = model_.encode_style(tg, x_ul);
  Tensor x_cc = model_.generate(tg, c_ul, s_u);

  CriticOut judged_fake = model_.image_critic(tg, x_ul);
  CriticOut judged_cu = model_.content_critic(tg, c_u);
  CriticOut judged_cl = model_.content_critic(tg, c_l);

  GeneratorTermTensors gt;
  gt.reconstruction = reconstruction_loss(tg, xu, x_uu, w.ssim_mix, config_.ssim);
  gt.cycle = cycle_loss(tg, xu, x_cc, w.ssim_mix, config_.ssim);
  gt.luminance = luminance_consistency_loss(tg, xl, x_ul, config_.ssim);
  gt.structural = structural_consistency_loss(tg, x_uu, x_ul, config_.ssim);
  gt.classification = label_prediction_loss(tg, s_l.label, x_l.label);
  gt.adv_image = lsgan_generator_loss(tg, judged_fake.realism);
  gt.adv_content = lsgan_generator_loss(tg, judged_cu.realism);
  gt.pre_image = label_prediction_loss(tg, judged_fake.label, x_l.label);
  gt.pre_content = label_prediction_loss(tg, judged_cl.label, x_l.label);
  gt.latent = latent_recovery_loss(tg, s_ul.noise, n_r, c_ul, c_u);
  const GeneratorTerms gen_report = report_values(gt);
  check_finite({{"rec", gen_report.reconstruction},
                {"cycle", gen_report.cycle},
                {"lum", gen_report.luminance},
                {"struct", gen_report.structural},
                {"cla", gen_report.classification},
                {"adv_image_g", gen_report.adv_image},
                {"adv_content_g", gen_report.adv_content},
                {"pre_image_g", gen_report.pre_image},
                {"pre_content_g", gen_report.pre_content},
                {"latent", gen_report.latent}},
               step);
  Tensor generator_objective = weighted_generator_objective(tg, gt, w);
  tg.backward(generator_objective);
  opt_g_.step();
  // The generator backward also deposited gradients on critic weights
  // (through the fake paths and the label-scrub term); drop them so the
  // next critic update starts clean.
  for (const auto& [name, t] : model_.critic_parameters()) {
    Tensor p = t;
    p.zero_grad();
  }

  step_ = step;
  LossReport report;
  report.step = step;
  report.generator = gen_report;
  report.critic = critic_report;
  report.generator_total = total_generator_objective(gen_report, w);
  report.critic_total = total_critic_objective(critic_report, w);
  return report;
}

Checkpoint Trainer::snapshot() const {
  Checkpoint c;
  c.model = config_.model;
  c.step = step_;
  c.rng_state = rng_.save_state();
  c.generator_opt_step = opt_g_.step_count();
  c.critic_opt_step = opt_d_.step_count();
  for (const auto& [name, t] : model_.parameters()) {
    auto v = t.value();
    c.tensors.push_back({name, t.shape(), std::vector<float>(v.begin(), v.end())});
  }
  const auto dump_moments = [&c](const Adam& opt, const std::string& prefix) {
    const AdamState& st = opt.state();
    for (size_t i = 0; i < opt.params().size(); ++i) {
      const auto& name = opt.params()[i].first;
      const auto n = static_cast<int64_t>(st.m[i].size());
      c.tensors.push_back({prefix + ".m." + name, {n}, st.m[i]});
      c.tensors.push_back({prefix + ".v." + name, {n}, st.v[i]});
    }
  };
  dump_moments(opt_g_, "opt.g");
  dump_moments(opt_d_, "opt.d");
  return c;
}

void Trainer::save(const std::string& path) const {
  write_checkpoint(snapshot(), path);
}

void Trainer::restore(const Checkpoint& ckpt) {
  if (model_config_json(ckpt.model) != model_config_json(config_.model)) {
    throw ConfigError("checkpoint was written under a different model config");
  }
  load_weights(model_, ckpt);
  const auto load_moments = [&ckpt](Adam& opt, const std::string& prefix,
                                    int64_t opt_step) {
    AdamState st;
    st.step = opt_step;
    for (const auto& [name, p] : opt.params()) {
      const CheckpointTensor* m = ckpt.find(prefix + ".m." + name);
      const CheckpointTensor* v = ckpt.find(prefix + ".v." + name);
      if (!m || !v) {
        throw FormatError("checkpoint: missing optimizer moments for " + name);
      }
      st.m.push_back(m->data);
      st.v.push_back(v->data);
    }
    opt.restore(std::move(st));
  };
  load_moments(opt_g_, "opt.g", ckpt.generator_opt_step);
  load_moments(opt_d_, "opt.d", ckpt.critic_opt_step);
  rng_.load_state(ckpt.rng_state);
  step_ = ckpt.step;
}

PoolAssignment assign_pools(const Manifest& manifest, float labeled_fraction,
                            uint64_t seed) {
  if (!(labeled_fraction > 0.0f && labeled_fraction < 1.0f)) {
    throw ConfigError("labeled fraction must lie in (0,1)");
  }
  const size_t n = manifest.records.size();
  if (n == 0) throw ConfigError("corpus manifest lists no records");

  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    const auto& ra = manifest.records[a];
    const auto& rb = manifest.records[b];
    return std::tie(ra.subject, ra.site, ra.file) <
           std::tie(rb.subject, rb.site, rb.file);
  });

  Rng shuffle_rng(derive_seed(seed, kPoolStream));
  const auto perm = shuffle_rng.permutation(static_cast<int64_t>(n));
  const auto labeled_count = static_cast<size_t>(
      std::ceil(static_cast<double>(labeled_fraction) * static_cast<double>(n)));

  PoolAssignment pools;
  for (size_t i = 0; i < n; ++i) {
    const size_t rec = order[static_cast<size_t>(perm[i])];
    (i < labeled_count ? pools.labeled : pools.unlabeled).push_back(rec);
  }
  if (pools.labeled.empty() || pools.unlabeled.empty()) {
    throw ConfigError("labeled fraction leaves an empty training pool");
  }
  return pools;
}

TrainResult run_training(const TrainConfig& config,
                         const std::string& resume_checkpoint) {
  config.validate();
  if (config.corpus_manifest.empty()) {
    throw ConfigError("train config: corpus manifest path is empty");
  }
  if (config.out_dir.empty()) {
    throw ConfigError("train config: output directory is empty");
  }

  const Manifest manifest = read_manifest(config.corpus_manifest);
  const int k = config.model.label_count;
  if (static_cast<int>(manifest.site_names.size()) != k) {
    throw ConfigError("corpus has " +
                      std::to_string(manifest.site_names.size()) +
                      " sites but the model expects " + std::to_string(k));
  }
  const PoolAssignment pools =
      assign_pools(manifest, config.labeled_fraction, config.seed);

  const auto base_dir =
      std::filesystem::path(config.corpus_manifest).parent_path();
  const auto load = [&](size_t rec_index) {
    const auto& rec = manifest.records[rec_index];
    return read_nifti((base_dir / rec.file).string());
  };
  std::vector<Volume> unlabeled;
  unlabeled.reserve(pools.unlabeled.size());
  for (size_t idx : pools.unlabeled) unlabeled.push_back(load(idx));
  std::vector<LabeledVolume> labeled;
  labeled.reserve(pools.labeled.size());
  for (size_t idx : pools.labeled) {
    const auto& rec = manifest.records[idx];
    labeled.push_back({load(idx), LabelVector::site(rec.site, k),
                       rec.site_name});
  }

  Trainer trainer(config);
  const bool resuming = !resume_checkpoint.empty();
  if (resuming) trainer.restore(read_checkpoint(resume_checkpoint));

  std::filesystem::create_directories(config.out_dir);
  const auto out_dir = std::filesystem::path(config.out_dir);
  const auto log_path = (out_dir / "loss_log.jsonl").string();
  std::ofstream log(log_path, resuming ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot open loss log " + log_path);

  TrainResult result;
  result.log_path = log_path;
  while (trainer.step_count() < config.steps) {
    // Index draws precede the in-step noise draw, all on the trainer RNG,
    // so a resumed run replays the identical schedule.
    const auto u = static_cast<size_t>(
        trainer.rng().index(static_cast<int64_t>(unlabeled.size())));
    const auto l = static_cast<size_t>(
        trainer.rng().index(static_cast<int64_t>(labeled.size())));
    const LossReport report = trainer.train_step(unlabeled[u], labeled[l]);
    log << loss_report_json_line(report) << '\n';
    log.flush();
    if (!log) throw IoError("failed writing loss log " + log_path);
    result.reports.push_back(report);
    ++result.steps_run;
    if (config.checkpoint_interval > 0 &&
        trainer.step_count() % config.checkpoint_interval == 0 &&
        trainer.step_count() < config.steps) {
      trainer.save((out_dir / checkpoint_name(trainer.step_count())).string());
    }
  }
  const auto final_path =
      (out_dir / checkpoint_name(trainer.step_count())).string();
  trainer.save(final_path);
  result.final_checkpoint = final_path;
  return result;
}

}  // namespace harmon
