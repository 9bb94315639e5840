#include "harmon/model.hpp"

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "harmon/errors.hpp"
#include "harmon/rng.hpp"

namespace harmon {

namespace {

constexpr float kNormEps = 1e-5f;
constexpr int kStyleDepth = 4;  // style encoder stride-2 stages

std::vector<float> uniform_fill(Rng& rng, int64_t n, float bound) {
  std::vector<float> v(static_cast<size_t>(n));
  for (auto& x : v) x = rng.uniform(-bound, bound);
  return v;
}

void check_volume_tensor(const Tensor& x, const char* who) {
  if (!x.defined() || x.rank() != 5 || x.dim(0) != 1 || x.dim(1) != 1) {
    throw ShapeError(std::string(who) + " expects shape [1,1,D,H,W], got " +
                     (x.defined() ? shape_to_string(x.shape()) : "undefined"));
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (label_count < 2) throw ConfigError("label_count must be at least 2");
  if (noise_dim < 1) throw ConfigError("noise_dim must be positive");
  if (base_channels < 1) throw ConfigError("base_channels must be positive");
  if (down_levels < 1) throw ConfigError("down_levels must be positive");
  if (res_blocks < 1) throw ConfigError("res_blocks must be positive");
  if (patch_depth < 1) throw ConfigError("patch_depth must be positive");
  if (!(leaky_slope > 0.0f) || !(leaky_slope < 1.0f)) {
    throw ConfigError("leaky_slope must lie in (0,1)");
  }
}

HarmonizationTarget HarmonizationTarget::site_target(int site) {
  HarmonizationTarget t;
  t.variant = Variant::kSite;
  t.site = site;
  return t;
}

HarmonizationTarget HarmonizationTarget::agnostic(NoisePolicy policy,
                                                  uint64_t noise_seed) {
  HarmonizationTarget t;
  t.variant = Variant::kAgnostic;
  t.noise_policy = policy;
  t.noise_seed = noise_seed;
  return t;
}

LabelVector HarmonizationTarget::label(int k) const {
  if (variant == Variant::kAgnostic) return LabelVector::agnostic(k);
  if (site < 0 || site >= k) {
    throw ConfigError("site index " + std::to_string(site) +
                      " out of range for " + std::to_string(k) + " sites");
  }
  return LabelVector::site(site, k);
}

HarmonizationModel::HarmonizationModel(const ModelConfig& config)
    : config_(config) {
  config_.validate();
  Rng rng(config_.seed);

  auto add_param = [&](const std::string& name, Tensor t) {
    params_.emplace_back(name, t);
    return t;
  };
  // Fan-in scaled uniform weights, zero biases. Convs feeding a
  // normalization layer carry no bias (it would be cancelled anyway).
  auto make_conv = [&](const std::string& name, int in_c, int out_c, int k,
                       int stride, int padding, bool with_bias) {
    Conv c;
    const int64_t fan_in = static_cast<int64_t>(in_c) * k * k * k;
    const float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
    c.w = add_param(
        name + ".w",
        Tensor::from_data({out_c, in_c, k, k, k},
                          uniform_fill(rng, out_c * fan_in, bound), true));
    if (with_bias) c.b = add_param(name + ".b", Tensor::zeros({out_c}, true));
    c.stride = stride;
    c.padding = padding;
    return c;
  };
  auto make_linear = [&](const std::string& name, int in_f, int out_f) {
    Linear l;
    const float bound = 1.0f / std::sqrt(static_cast<float>(in_f));
    l.w = add_param(
        name + ".w",
        Tensor::from_data({out_f, in_f},
                          uniform_fill(rng, int64_t(out_f) * in_f, bound),
                          true));
    l.b = add_param(name + ".b", Tensor::zeros({out_f}, true));
    return l;
  };

  const int cb = config_.content_channels();

  // Content encoder: wide stem, stride-2 stages, residual refinement.
  eb_stem_ = make_conv("eb.stem", 1, config_.base_channels, 7, 1, 3, false);
  int ch = config_.base_channels;
  for (int i = 0; i < config_.down_levels; ++i) {
    eb_down_.push_back(
        make_conv("eb.down" + std::to_string(i), ch, ch * 2, 3, 2, 1, false));
    ch *= 2;
  }
  for (int i = 0; i < config_.res_blocks; ++i) {
    const std::string base = "eb.res" + std::to_string(i);
    eb_res_.push_back({make_conv(base + ".c1", cb, cb, 3, 1, 1, false),
                       make_conv(base + ".c2", cb, cb, 3, 1, 1, false)});
  }

  // Style encoder: no normalization anywhere, so global intensity
  // statistics survive to the pooled feature.
  ch = 1;
  int oc = config_.base_channels;
  for (int i = 0; i < kStyleDepth; ++i) {
    es_down_.push_back(
        make_conv("es.down" + std::to_string(i), ch, oc, 3, 2, 1, true));
    ch = oc;
    oc *= 2;
  }
  es_noise_ = make_linear("es.noise", ch, config_.noise_dim);
  es_label_ = make_linear("es.label", ch, config_.label_count);

  // Generator: style MLP feeds per-channel scale/shift pairs into the
  // normalization of every residual conv.
  const int style_dim = config_.noise_dim + config_.label_count;
  const int hidden = config_.base_channels * 8;
  const int ada_params = config_.res_blocks * 2 * 2 * cb;
  g_mlp1_ = make_linear("g.mlp1", style_dim, hidden);
  g_mlp2_ = make_linear("g.mlp2", hidden, ada_params);
  for (int i = 0; i < config_.res_blocks; ++i) {
    const std::string base = "g.res" + std::to_string(i);
    g_res_.push_back({make_conv(base + ".c1", cb, cb, 3, 1, 1, false),
                      make_conv(base + ".c2", cb, cb, 3, 1, 1, false)});
  }
  ch = cb;
  for (int i = 0; i < config_.down_levels; ++i) {
    g_up_.push_back(
        make_conv("g.up" + std::to_string(i), ch, ch / 2, 3, 1, 1, true));
    ch /= 2;
  }
  g_out_ = make_conv("g.out", ch, 1, 7, 1, 3, true);

  // Image critic trunk shared by the realism and label heads.
  ch = 1;
  oc = config_.base_channels;
  for (int i = 0; i < config_.patch_depth; ++i) {
    dx_trunk_.push_back(
        make_conv("dx.t" + std::to_string(i), ch, oc, 4, 2, 1, true));
    ch = oc;
    oc *= 2;
  }
  dx_adv_ = make_conv("dx.adv", ch, 1, 3, 1, 1, true);
  dx_label_ = make_linear("dx.label", ch, config_.label_count);

  // Content critic works on the code, so it starts at full width.
  db_trunk_.push_back(make_conv("db.t0", cb, cb, 3, 2, 1, true));
  db_trunk_.push_back(make_conv("db.t1", cb, cb, 3, 2, 1, true));
  db_adv_ = make_linear("db.adv", cb, 1);
  db_label_ = make_linear("db.label", cb, config_.label_count);
}

Tensor HarmonizationModel::conv_in_lrelu(Tape& t, const Tensor& x,
                                         const Conv& c) const {
  Tensor h = t.conv3d(x, c.w, c.b, c.stride, c.padding);
  h = t.instance_norm(h, kNormEps);
  return t.leaky_relu(h, config_.leaky_slope);
}

Tensor HarmonizationModel::res_forward(Tape& t, const Tensor& x,
                                       const ResBlock& b) const {
  Tensor h = t.instance_norm(t.conv3d(x, b.c1.w, b.c1.b, 1, 1), kNormEps);
  h = t.leaky_relu(h, config_.leaky_slope);
  h = t.instance_norm(t.conv3d(h, b.c2.w, b.c2.b, 1, 1), kNormEps);
  return t.add(x, h);
}

Tensor HarmonizationModel::ada_res_forward(Tape& t, const Tensor& x,
                                           const ResBlock& b,
                                           const Tensor& style_params,
                                           int64_t offset) const {
  const int64_t cb = config_.content_channels();
  // Scales are offsets from identity so a zero MLP output injects nothing.
  Tensor scale1 = t.add(t.slice(style_params, offset, cb), 1.0f);
  Tensor shift1 = t.slice(style_params, offset + cb, cb);
  Tensor scale2 = t.add(t.slice(style_params, offset + 2 * cb, cb), 1.0f);
  Tensor shift2 = t.slice(style_params, offset + 3 * cb, cb);
  Tensor h = t.instance_norm(t.conv3d(x, b.c1.w, b.c1.b, 1, 1), kNormEps,
                             scale1, shift1);
  h = t.leaky_relu(h, config_.leaky_slope);
  h = t.instance_norm(t.conv3d(h, b.c2.w, b.c2.b, 1, 1), kNormEps, scale2,
                      shift2);
  return t.add(x, h);
}

Tensor HarmonizationModel::trunk_forward(Tape& t, const Tensor& x,
                                         const std::vector<Conv>& trunk) const {
  Tensor h = x;
  for (const auto& c : trunk) {
    h = t.leaky_relu(t.conv3d(h, c.w, c.b, c.stride, c.padding),
                     config_.leaky_slope);
  }
  return h;
}

ContentCode HarmonizationModel::encode_content(Tape& tape,
                                               const Tensor& x) const {
  check_volume_tensor(x, "encode_content");
  const int s = config_.stride();
  for (size_t axis = 2; axis < 5; ++axis) {
    if (x.dim(axis) % s != 0) {
      throw ShapeError("content encoder needs extents divisible by " +
                       std::to_string(s) + ", got " +
                       shape_to_string(x.shape()));
    }
  }
  Tensor h = conv_in_lrelu(tape, x, eb_stem_);
  for (const auto& c : eb_down_) h = conv_in_lrelu(tape, h, c);
  for (const auto& b : eb_res_) h = res_forward(tape, h, b);
  return h;
}

StyleCode HarmonizationModel::encode_style(Tape& tape, const Tensor& x) const {
  check_volume_tensor(x, "encode_style");
  Tensor h = trunk_forward(tape, x, es_down_);
  Tensor g = tape.reshape(tape.mean(h, {2, 3, 4}), {h.dim(1)});
  StyleCode s;
  s.noise = tape.linear(g, es_noise_.w, es_noise_.b);
  s.label = tape.tanh(tape.linear(g, es_label_.w, es_label_.b));
  return s;
}

Tensor HarmonizationModel::generate(Tape& tape, const ContentCode& content,
                                    const StyleCode& style) const {
  const int64_t cb = config_.content_channels();
  if (!content.defined() || content.rank() != 5 || content.dim(0) != 1 ||
      content.dim(1) != cb) {
    throw ShapeError(
        "generate expects a content code of shape [1," + std::to_string(cb) +
        ",D',H',W'], got " +
        (content.defined() ? shape_to_string(content.shape()) : "undefined"));
  }
  if (!style.noise.defined() || style.noise.rank() != 1 ||
      style.noise.numel() != config_.noise_dim) {
    throw ShapeError("style noise must be rank-1 of length " +
                     std::to_string(config_.noise_dim));
  }
  if (!style.label.defined() || style.label.rank() != 1 ||
      style.label.numel() != config_.label_count) {
    throw ShapeError("style label must be rank-1 of length " +
                     std::to_string(config_.label_count));
  }
  Tensor s = tape.concat({style.noise, style.label});
  Tensor h = tape.leaky_relu(tape.linear(s, g_mlp1_.w, g_mlp1_.b),
                             config_.leaky_slope);
  Tensor ada = tape.linear(h, g_mlp2_.w, g_mlp2_.b);

  Tensor y = content;
  int64_t offset = 0;
  for (const auto& b : g_res_) {
    y = ada_res_forward(tape, y, b, ada, offset);
    offset += 4 * cb;
  }
  for (const auto& up : g_up_) {
    y = tape.resample3d(y, ResampleFactor::kUp2, ResampleMode::kNearest);
    y = tape.leaky_relu(tape.conv3d(y, up.w, up.b, 1, 1), config_.leaky_slope);
  }
  y = tape.conv3d(y, g_out_.w, g_out_.b, 1, g_out_.padding);
  // Saturating output rescaled to the normalized intensity range.
  return tape.mul(tape.add(tape.tanh(y), 1.0f), 0.5f);
}

CriticOut HarmonizationModel::image_critic(Tape& tape, const Tensor& x) const {
  check_volume_tensor(x, "image_critic");
  const int64_t min_extent = int64_t{1} << config_.patch_depth;
  for (size_t axis = 2; axis < 5; ++axis) {
    if (x.dim(axis) < min_extent) {
      throw ShapeError("image critic needs extents of at least " +
                       std::to_string(min_extent) + ", got " +
                       shape_to_string(x.shape()));
    }
  }
  Tensor h = trunk_forward(tape, x, dx_trunk_);
  CriticOut out;
  out.realism = tape.conv3d(h, dx_adv_.w, dx_adv_.b, 1, dx_adv_.padding);
  Tensor g = tape.reshape(tape.mean(h, {2, 3, 4}), {h.dim(1)});
  out.label = tape.tanh(tape.linear(g, dx_label_.w, dx_label_.b));
  return out;
}

CriticOut HarmonizationModel::content_critic(Tape& tape,
                                             const ContentCode& c) const {
  const int64_t cb = config_.content_channels();
  if (!c.defined() || c.rank() != 5 || c.dim(0) != 1 || c.dim(1) != cb) {
    throw ShapeError(
        "content critic expects a code of shape [1," + std::to_string(cb) +
        ",D',H',W'], got " +
        (c.defined() ? shape_to_string(c.shape()) : "undefined"));
  }
  Tensor h = trunk_forward(tape, c, db_trunk_);
  Tensor g = tape.reshape(tape.mean(h, {2, 3, 4}), {h.dim(1)});
  CriticOut out;
  out.realism = tape.linear(g, db_adv_.w, db_adv_.b);
  out.label = tape.tanh(tape.linear(g, db_label_.w, db_label_.b));
  return out;
}

Tensor HarmonizationModel::discriminate(Tape& tape, const Tensor& x) const {
  return image_critic(tape, x).realism;
}

Tensor HarmonizationModel::predict_label(Tape& tape, const Tensor& x) const {
  return image_critic(tape, x).label;
}

Tensor HarmonizationModel::discriminate_content(Tape& tape,
                                                const ContentCode& c) const {
  return content_critic(tape, c).realism;
}

Tensor HarmonizationModel::predict_label_content(Tape& tape,
                                                 const ContentCode& c) const {
  return content_critic(tape, c).label;
}

StyleCode HarmonizationModel::make_target_style(
    const HarmonizationTarget& target) const {
  std::vector<float> noise(static_cast<size_t>(config_.noise_dim), 0.0f);
  if (target.noise_policy == HarmonizationTarget::NoisePolicy::kSampled) {
    Rng rng(target.noise_seed);
    for (auto& v : noise) v = rng.normal();
  }
  StyleCode s;
  s.noise = Tensor::from_data({config_.noise_dim}, std::move(noise));
  s.label = Tensor::from_data({config_.label_count},
                              target.label(config_.label_count).entries());
  return s;
}

Volume HarmonizationModel::harmonize(const Volume& x,
                                     const HarmonizationTarget& target) const {
  for (float v : x.voxels) {
    if (!(v >= -1e-4f && v <= 1.0f + 1e-4f)) {
      throw ConfigError("harmonize expects a normalized volume in [0,1]");
    }
  }
  Tape tape;
  tape.set_recording(false);
  Tensor in = volume_to_tensor(x);
  ContentCode code = encode_content(tape, in);
  StyleCode style = make_target_style(target);
  Tensor out = generate(tape, code, style);
  return tensor_to_volume(out, x);
}

std::vector<std::pair<std::string, Tensor>>
HarmonizationModel::generator_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, t] : params_) {
    if (name.rfind("eb.", 0) == 0 || name.rfind("es.", 0) == 0 ||
        name.rfind("g.", 0) == 0) {
      out.emplace_back(name, t);
    }
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>>
HarmonizationModel::critic_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& [name, t] : params_) {
    if (name.rfind("dx.", 0) == 0 || name.rfind("db.", 0) == 0) {
      out.emplace_back(name, t);
    }
  }
  return out;
}

Tensor HarmonizationModel::parameter(const std::string& name) const {
  for (const auto& [n, t] : params_) {
    if (n == name) return t;
  }
  throw ConfigError("unknown parameter " + name);
}

std::string model_config_json(const ModelConfig& config) {
  nlohmann::json j;
  j["label_count"] = config.label_count;
  j["noise_dim"] = config.noise_dim;
  j["base_channels"] = config.base_channels;
  j["down_levels"] = config.down_levels;
  j["res_blocks"] = config.res_blocks;
  j["leaky_slope"] = config.leaky_slope;
  j["patch_depth"] = config.patch_depth;
  j["seed"] = config.seed;
  return j.dump();
}

ModelConfig parse_model_config(const std::string& json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw FormatError("model config: expected a JSON object");
  static const char* kKeys[] = {"label_count", "noise_dim",   "base_channels",
                                "down_levels", "res_blocks",  "leaky_slope",
                                "patch_depth", "seed"};
  for (const auto& [key, unused] : j.items()) {
    bool known = false;
    for (const char* k : kKeys) known = known || key == k;
    if (!known) throw FormatError("model config: unknown key \"" + key + "\"");
  }
  // Absent keys keep their defaults.
  ModelConfig config;
  try {
    if (j.contains("label_count")) config.label_count = j["label_count"].get<int>();
    if (j.contains("noise_dim")) config.noise_dim = j["noise_dim"].get<int>();
    if (j.contains("base_channels")) config.base_channels = j["base_channels"].get<int>();
    if (j.contains("down_levels")) config.down_levels = j["down_levels"].get<int>();
    if (j.contains("res_blocks")) config.res_blocks = j["res_blocks"].get<int>();
    if (j.contains("leaky_slope")) config.leaky_slope = j["leaky_slope"].get<float>();
    if (j.contains("patch_depth")) config.patch_depth = j["patch_depth"].get<int>();
    if (j.contains("seed")) config.seed = j["seed"].get<uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("model config: mistyped field: ") + e.what());
  }
  config.validate();
  return config;
}

}  // namespace harmon
