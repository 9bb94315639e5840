#include <algorithm>
#include <cstdint>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "harmon/checkpoint.hpp"
#include "harmon/errors.hpp"
#include "harmon/eval.hpp"
#include "harmon/model.hpp"
#include "harmon/nifti.hpp"
#include "harmon/phantom.hpp"
#include "harmon/probe.hpp"
#include "harmon/trainer.hpp"
#include "harmon/volume.hpp"

namespace {

using namespace harmon;
namespace fs = std::filesystem;

// Exit contract: 0 success, 1 usage (flags, config values, refusals),
// 2 data (unreadable or inconsistent artifacts), 3 numerical failure.
constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kData = 2;
constexpr int kNumeric = 3;

bool quiet_logs() {
  const char* v = std::getenv("HARMON_LOG");
  return v != nullptr && std::string(v) == "quiet";
}

void info(const std::string& line) {
  if (!quiet_logs()) std::cout << line << "\n";
}

int classify(const Error& e) {
  return dynamic_cast<const NumericError*>(&e) != nullptr ? kNumeric : kData;
}

int fail_usage(const std::string& message) {
  std::cerr << "error: " << message << "\n";
  return kUsage;
}

int fail(const Error& e) {
  std::cerr << "error: " << e.what() << "\n";
  return classify(e);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string now_utc() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

// Existing outputs are never clobbered silently.
int refuse_existing(const fs::path& p, bool force) {
  if (!force && fs::exists(p)) {
    return fail_usage(p.string() + " already exists; pass --force to replace it");
  }
  return kOk;
}

std::vector<LabeledVolume> load_labeled_set(const Manifest& manifest,
                                            const fs::path& dir) {
  const int k = static_cast<int>(manifest.site_names.size());
  std::vector<LabeledVolume> out;
  out.reserve(manifest.records.size());
  for (const auto& rec : manifest.records) {
    out.push_back({read_nifti((dir / rec.file).string()),
                   LabelVector::site(rec.site, k), rec.site_name});
  }
  return out;
}

std::vector<const Volume*> volume_ptrs(const std::vector<LabeledVolume>& set) {
  std::vector<const Volume*> out;
  out.reserve(set.size());
  for (const auto& lv : set) out.push_back(&lv.volume);
  return out;
}

nlohmann::json probe_run_json(const ProbeRun& run) {
  return {{"accuracy", run.accuracy}, {"fold_accuracies", run.fold_accuracies}};
}

// ---------------------------------------------------------------------------
// phantom-gen

struct PhantomGenArgs {
  std::string config_path;
  std::string out_dir;
  uint64_t seed = 0;
  bool seed_set = false;
  bool force = false;
};

int cmd_phantom_gen(const PhantomGenArgs& args) {
  PhantomConfig config;
  try {
    config = parse_phantom_config(read_text_file(args.config_path));
  } catch (const Error& e) {
    return fail_usage(std::string("bad phantom config: ") + e.what());
  }
  if (args.seed_set) config.seed = args.seed;

  const fs::path out(args.out_dir);
  if (int rc = refuse_existing(out / "manifest.json", args.force)) return rc;
  std::cout << "phantom-gen config:\n" << phantom_config_json(config) << "\n";

  try {
    generate_corpus(config, out);
  } catch (const Error& e) {
    return fail(e);
  }
  std::cout << "manifest: " << (out / "manifest.json").string() << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  std::string config_path;
  std::string out_dir;
  std::string resume;
  int64_t steps = 0;
  bool steps_set = false;
  uint64_t seed = 0;
  bool seed_set = false;
  bool force = false;
};

int cmd_train(const TrainArgs& args) {
  TrainConfig config;
  try {
    config = parse_train_config(read_text_file(args.config_path));
    if (!args.out_dir.empty()) config.out_dir = args.out_dir;
    if (args.steps_set) config.steps = args.steps;
    if (args.seed_set) config.seed = args.seed;
    config.validate();
    if (config.out_dir.empty()) {
      throw ConfigError("no output directory (config out_dir or --out)");
    }
    if (config.corpus_manifest.empty()) {
      throw ConfigError("no corpus manifest in config");
    }
  } catch (const Error& e) {
    return fail_usage(std::string("bad train config: ") + e.what());
  }

  if (args.resume.empty()) {
    if (int rc = refuse_existing(fs::path(config.out_dir) / "loss_log.jsonl",
                                 args.force)) {
      return rc;
    }
  }
  std::cout << "train config:\n" << train_config_json(config) << "\n";

  try {
    const TrainResult res = run_training(config, args.resume);
    info("steps run: " + std::to_string(res.steps_run));
    std::cout << "loss log: " << res.log_path << "\n";
    std::cout << "checkpoint: " << res.final_checkpoint << "\n";
  } catch (const Error& e) {
    return fail(e);
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// harmonize

struct HarmonizeArgs {
  std::string weights;
  std::string input;
  std::string target = "agnostic";
  std::string noise = "zero";
  std::string out_dir;
  bool force = false;
};

int cmd_harmonize(const HarmonizeArgs& args) {
  HarmonizationTarget target;
  if (args.target == "agnostic") {
    target = HarmonizationTarget::agnostic();
  } else if (args.target.rfind("site:", 0) == 0) {
    try {
      target = HarmonizationTarget::site_target(std::stoi(args.target.substr(5)));
    } catch (const std::exception&) {
      return fail_usage("--target site index is not a number: " + args.target);
    }
  } else {
    return fail_usage("--target must be \"agnostic\" or \"site:<k>\"");
  }
  if (args.noise == "zero") {
    target.noise_policy = HarmonizationTarget::NoisePolicy::kZero;
  } else if (args.noise.rfind("seed:", 0) == 0) {
    target.noise_policy = HarmonizationTarget::NoisePolicy::kSampled;
    try {
      target.noise_seed = std::stoull(args.noise.substr(5));
    } catch (const std::exception&) {
      return fail_usage("--noise seed is not a number: " + args.noise);
    }
  } else {
    return fail_usage("--noise must be \"zero\" or \"seed:<n>\"");
  }

  nlohmann::json resolved{{"weights", args.weights},
                          {"input", args.input},
                          {"target", args.target},
                          {"noise", args.noise},
                          {"out", args.out_dir}};
  std::cout << "harmonize config:\n" << resolved.dump(2) << "\n";

  try {
    const Checkpoint ckpt = read_checkpoint(args.weights);
    const int k = ckpt.model.label_count;
    if (target.variant == HarmonizationTarget::Variant::kSite &&
        (target.site < 0 || target.site >= k)) {
      return fail_usage("target site " + std::to_string(target.site) +
                        " out of range; the checkpoint was trained with " +
                        std::to_string(k) + " sites (0.." +
                        std::to_string(k - 1) + ")");
    }

    std::vector<fs::path> inputs;
    if (fs::is_directory(args.input)) {
      for (const auto& entry : fs::directory_iterator(args.input)) {
        if (entry.is_regular_file() && entry.path().extension() == ".nii") {
          inputs.push_back(entry.path());
        }
      }
      std::sort(inputs.begin(), inputs.end());
      if (inputs.empty()) {
        throw ConfigError("no .nii volumes in " + args.input);
      }
    } else if (fs::exists(args.input)) {
      inputs.push_back(args.input);
    } else {
      throw IoError("input path does not exist: " + args.input);
    }

    const fs::path out(args.out_dir);
    for (const auto& in : inputs) {
      if (int rc = refuse_existing(out / in.filename(), args.force)) return rc;
    }

    const HarmonizationModel model = load_model(ckpt);
    fs::create_directories(out);
    for (const auto& in : inputs) {
      const Volume v = read_nifti(in.string());
      const Volume h = model.harmonize(v, target);
      write_nifti(h, (out / in.filename()).string());
      info("harmonized " + in.filename().string());
    }
    std::cout << "wrote " << inputs.size() << " volume(s) to "
              << out.string() << "\n";
  } catch (const Error& e) {
    return fail(e);
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string originals;
  std::string harmonized;
  std::string manifest;
  std::string out_dir;
  std::string target_name;
  bool force = false;
};

int cmd_evaluate(const EvaluateArgs& args) {
  nlohmann::json resolved{{"originals", args.originals},
                          {"harmonized", args.harmonized},
                          {"manifest", args.manifest},
                          {"out", args.out_dir},
                          {"target_name", args.target_name}};
  std::cout << "evaluate config:\n" << resolved.dump(2) << "\n";
  if (int rc = refuse_existing(fs::path(args.out_dir) / "summary.json",
                               args.force)) {
    return rc;
  }

  try {
    const Manifest manifest = read_manifest(args.manifest);
    const auto originals = load_labeled_set(manifest, args.originals);
    const auto harmonized = load_labeled_set(manifest, args.harmonized);

    EvalReport report;
    report.corpus = args.manifest;
    report.timestamp = now_utc();
    report.pre_sites = {site_mean_distributions(originals, false),
                        site_mean_distributions(originals, true)};
    report.pre_w1 = pairwise_w1_matrix(report.pre_sites.whole);
    report.pre_w1_foreground = pairwise_w1_matrix(report.pre_sites.foreground);
    report.pre_luminance = luminance_similarity_summary(volume_ptrs(originals));

    TargetEval target;
    target.target = args.target_name;
    target.sites = {site_mean_distributions(harmonized, false),
                    site_mean_distributions(harmonized, true)};
    target.w1 = pairwise_w1_matrix(target.sites.whole);
    target.w1_foreground = pairwise_w1_matrix(target.sites.foreground);
    target.luminance = luminance_similarity_summary(volume_ptrs(harmonized));
    target.structural = structural_preservation_summary(
        volume_ptrs(originals), volume_ptrs(harmonized));
    report.targets.push_back(std::move(target));

    emit_report(report, args.out_dir);
    std::cout << "wrote " << (fs::path(args.out_dir) / "summary.json").string()
              << "\n";
  } catch (const Error& e) {
    return fail(e);
  }
  return kOk;
}

// ---------------------------------------------------------------------------
// probe

struct ProbeArgs {
  std::string volumes;
  std::string manifest;
  std::string harmonized;
  std::string out_dir;
  int folds = 5;
  uint64_t seed = 0;
  bool force = false;
};

int cmd_probe(const ProbeArgs& args) {
  nlohmann::json resolved{{"volumes", args.volumes},
                          {"manifest", args.manifest},
                          {"harmonized", args.harmonized},
                          {"out", args.out_dir},
                          {"folds", args.folds},
                          {"seed", args.seed}};
  std::cout << "probe config:\n" << resolved.dump(2) << "\n";
  if (int rc = refuse_existing(fs::path(args.out_dir) / "probe.json",
                               args.force)) {
    return rc;
  }

  try {
    const Manifest manifest = read_manifest(args.manifest);
    const auto raw_set = load_labeled_set(manifest, args.volumes);
    ProbeResult result;
    result.folds = args.folds;
    result.chance = manifest.site_names.empty()
                        ? 0.0
                        : 1.0 / static_cast<double>(manifest.site_names.size());
    result.raw = run_site_probe(raw_set, args.folds, args.seed);
    nlohmann::json j{{"schema_version", 1},
                     {"site_probe",
                      {{"raw", probe_run_json(result.raw)},
                       {"harmonized", nullptr},
                       {"chance", result.chance},
                       {"folds", result.folds}}}};
    if (!args.harmonized.empty()) {
      const auto harmonized_set = load_labeled_set(manifest, args.harmonized);
      result.harmonized = run_site_probe(harmonized_set, args.folds, args.seed);
      j["site_probe"]["harmonized"] = probe_run_json(result.harmonized);
    }

    fs::create_directories(args.out_dir);
    const auto path = (fs::path(args.out_dir) / "probe.json").string();
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path);
    out << j.dump(2) << "\n";
    std::cout << "wrote " << path << "\n";
    std::cout << "raw accuracy: " << result.raw.accuracy << "\n";
    if (!args.harmonized.empty()) {
      std::cout << "harmonized accuracy: " << result.harmonized.accuracy
                << "\n";
    }
  } catch (const Error& e) {
    return fail(e);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"3D MRI scanner/site style harmonization toolkit"};
  app.require_subcommand(1);

  PhantomGenArgs pg;
  CLI::App* gen = app.add_subcommand(
      "phantom-gen", "Render a synthetic multi-site corpus with a manifest");
  gen->add_option("--config", pg.config_path,
                  "Phantom corpus config JSON ({} for defaults)")
      ->required();
  gen->add_option("--out", pg.out_dir, "Output corpus directory")->required();
  CLI::Option* pg_seed =
      gen->add_option("--seed", pg.seed, "Override the config seed")
          ->capture_default_str();
  gen->add_flag("--force", pg.force, "Replace existing outputs");

  TrainArgs tr;
  CLI::App* train = app.add_subcommand(
      "train", "Train the harmonization networks on a corpus");
  train->add_option("--config", tr.config_path, "Train config JSON")
      ->required();
  train->add_option("--out", tr.out_dir, "Override the config out_dir");
  train->add_option("--resume", tr.resume,
                    "Continue from a checkpoint, appending to the loss log");
  CLI::Option* tr_steps =
      train->add_option("--steps", tr.steps, "Override the config step count")
          ->capture_default_str();
  CLI::Option* tr_seed =
      train->add_option("--seed", tr.seed, "Override the config seed")
          ->capture_default_str();
  train->add_flag("--force", tr.force, "Replace an existing loss log");

  HarmonizeArgs hz;
  CLI::App* harmonize = app.add_subcommand(
      "harmonize", "Restyle volumes toward a target site or agnostic style");
  harmonize->add_option("--weights", hz.weights, "Trained checkpoint file")
      ->required();
  harmonize->add_option("--input", hz.input, "A .nii volume or a directory")
      ->required();
  harmonize
      ->add_option("--target", hz.target, "\"site:<k>\" or \"agnostic\"")
      ->capture_default_str();
  harmonize
      ->add_option("--noise", hz.noise,
                   "Style noise: \"zero\" or \"seed:<n>\"")
      ->capture_default_str();
  harmonize->add_option("--out", hz.out_dir, "Output directory")->required();
  harmonize->add_flag("--force", hz.force, "Replace existing outputs");

  EvaluateArgs ev;
  CLI::App* evaluate = app.add_subcommand(
      "evaluate", "Compare site statistics before and after harmonization");
  evaluate->add_option("--originals", ev.originals, "Directory of originals")
      ->required();
  evaluate
      ->add_option("--harmonized", ev.harmonized, "Directory of harmonized twins")
      ->required();
  evaluate->add_option("--manifest", ev.manifest, "Corpus manifest JSON")
      ->required();
  evaluate->add_option("--out", ev.out_dir, "Report directory")->required();
  evaluate
      ->add_option("--target-name", ev.target_name,
                   "Label for the harmonized set in reports")
      ->capture_default_str();
  evaluate->add_flag("--force", ev.force, "Replace an existing report");

  ProbeArgs pr;
  CLI::App* probe = app.add_subcommand(
      "probe", "Cross-validated site classification from intensity statistics");
  probe->add_option("--volumes", pr.volumes, "Directory of volumes")
      ->required();
  probe->add_option("--manifest", pr.manifest, "Corpus manifest JSON")
      ->required();
  probe->add_option("--harmonized", pr.harmonized,
                    "Optional directory of harmonized twins to compare");
  probe->add_option("--out", pr.out_dir, "Report directory")->required();
  probe->add_option("--folds", pr.folds, "Cross-validation folds")
      ->capture_default_str();
  probe->add_option("--seed", pr.seed, "Fold assignment seed")
      ->capture_default_str();
  probe->add_flag("--force", pr.force, "Replace an existing report");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  pg.seed_set = pg_seed->count() > 0;
  tr.steps_set = tr_steps->count() > 0;
  tr.seed_set = tr_seed->count() > 0;

  if (gen->parsed()) return cmd_phantom_gen(pg);
  if (train->parsed()) return cmd_train(tr);
  if (harmonize->parsed()) return cmd_harmonize(hz);
  if (evaluate->parsed()) return cmd_evaluate(ev);
  if (probe->parsed()) return cmd_probe(pr);
  return kUsage;
}
