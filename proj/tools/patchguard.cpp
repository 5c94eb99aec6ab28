// Command-line entry point: synth-data, gen, train, eval, analyze.
// Exit codes: 0 success, 1 user error, 2 internal failure.

#include <CLI11.hpp>
#include <Eigen/Core>

#include <algorithm>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include <json.hpp>

#include "patchguard/config.hpp"
#include "patchguard/datasets.hpp"
#include "patchguard/evalkit.hpp"
#include "patchguard/io.hpp"
#include "patchguard/pseudogen.hpp"
#include "patchguard/saliency.hpp"
#include "patchguard/train.hpp"

namespace fs = std::filesystem;
using namespace patchguard;
using nlohmann::json;

namespace {

/// Failures caused by the caller's inputs (paths, flags, files).
struct UserError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log_event(const json& j) { std::cerr << j.dump() << '\n'; }

/// Flag values that override config keys; only flags given on the command
/// line end up in the override layer.
class Overrides {
 public:
  CLI::Option* add(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto& slot = values_.emplace_back(key, std::string{});
    return app->add_option(flag, slot.second, help);
  }
  CLI::Option* add_switch(CLI::App* app, const std::string& flag, const std::string& key, const std::string& help) {
    auto& slot = switches_.emplace_back(key, false);
    return app->add_flag(flag, slot.second, help);
  }
  config::Layer layer() const {
    config::Layer l;
    for (const auto& [key, value] : values_)
      if (!value.empty()) l[key] = value;
    for (const auto& [key, on] : switches_)
      if (on) l[key] = "true";
    return l;
  }

 private:
  std::deque<std::pair<std::string, std::string>> values_;
  std::deque<std::pair<std::string, bool>> switches_;
};

struct Common {
  std::string config_file;
  std::string out;
};

/// defaults <- optional base file <- --config file <- flags
config::Layer resolve(const Common& c, const Overrides& o, const std::optional<fs::path>& base = {}) {
  auto l = config::defaults();
  if (base) config::merge(l, config::read_ini(*base, l));
  if (!c.config_file.empty()) config::merge(l, config::read_ini(c.config_file, l));
  config::merge(l, o.layer());
  if (config::get_bool(l, "run.deterministic")) Eigen::setNbThreads(1);
  return l;
}

void write_text(const fs::path& p, const std::string& text) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p);
  if (!out) throw UserError("cannot write " + p.string());
  out << text;
}

datasets::DatasetSplit load_data(const config::Layer& l, std::size_t image_size) {
  const auto& path = config::get(l, "data.path");
  if (path.empty()) throw UserError("--data is required");
  return datasets::load_folder(path, image_size);
}

/// Saliency source for pseudo-anomaly generation. The Grad-CAM backbone is
/// loaded from `backbone` when that file exists, otherwise trained on the
/// normals and saved there.
std::shared_ptr<saliency::SaliencyProvider> make_provider(const config::Layer& l, const std::vector<Image>& normals,
                                                          const fs::path& backbone) {
  const auto& kind = config::get(l, "gen.saliency");
  if (kind == "uniform") return std::make_shared<saliency::OracleProvider>();
  if (kind != "gradcam") throw config::ConfigError("gen.saliency must be gradcam or uniform, got '" + kind + "'");
  const auto seed = config::get_size(l, "run.seed");
  auto net = std::make_shared<saliency::SmallCnn>(normals.at(0).shape.at(2), seed);
  if (fs::exists(backbone)) {
    net->load_weights(nd::load_checkpoint(backbone));
    log_event({{"event", "backbone_loaded"}, {"path", backbone.string()}});
  } else {
    const double loss = saliency::train_proxy(
        *net, normals, {.steps = config::get_size(l, "gen.proxy_steps"), .seed = seed});
    nd::save_checkpoint(net->to_checkpoint(), backbone);
    log_event({{"event", "backbone_trained"}, {"path", backbone.string()}, {"final_loss", loss}});
  }
  return std::make_shared<saliency::GradCamProvider>(std::move(net), config::get_size(l, "gen.k_soft"));
}

// ---------------------------------------------------------------------------

int cmd_synth(const datasets::SynthSpec& spec, const std::string& out) {
  auto split = datasets::make_synthetic(spec);
  datasets::save_folder(split, out, datasets::to_json(spec));
  log_event({{"event", "synth_data"}, {"out", out}, {"train", split.train.size()}, {"test", split.test.size()}});
  return 0;
}

/// Re-reads a written corpus and checks masks and outside-mask pixels.
std::size_t audit_corpus(const fs::path& dir, const std::vector<Image>& sources) {
  std::size_t bad = 0;
  for (std::size_t i = 0; i < sources.size(); ++i) {
    char stem[16];
    std::snprintf(stem, sizeof stem, "%03zu.png", i);
    const Image im = io::read_png(dir / "images" / stem);
    const Mask m = io::read_mask(dir / "masks" / stem);
    bool ok = mask_count(m) > 0 && im.shape == sources[i].shape;
    const std::size_t C = im.shape.at(2);
    for (std::size_t p = 0; ok && p < m.size(); ++p)
      if (m[p] == 0.0)
        for (std::size_t c = 0; c < C; ++c) ok = ok && im[p * C + c] == sources[i][p * C + c];
    if (!ok) {
      ++bad;
      log_event({{"event", "audit_failure"}, {"index", i}});
    }
  }
  return bad;
}

int cmd_gen(const config::Layer& l, const fs::path& out, bool verify, const std::string& backbone) {
  const auto model = config::model_config(l);
  auto data = load_data(l, model.image_size);
  fs::create_directories(out);
  write_text(out / "config.resolved", config::to_ini(l));
  auto provider = make_provider(l, data.train, backbone.empty() ? out / "backbone.ckpt" : fs::path(backbone));
  auto tc = config::train_config(l);
  pseudogen::write_corpus(out, data.train, data.train_names, *provider, tc.seed, tc.gen);
  log_event({{"event", "gen"}, {"out", out.string()}, {"samples", data.train.size()}});
  if (verify) {
    const auto bad = audit_corpus(out, data.train);
    log_event({{"event", "audit"}, {"checked", data.train.size()}, {"failures", bad}});
    if (bad) return 2;
  }
  return 0;
}

int cmd_train(const config::Layer& l, const fs::path& out, bool resume) {
  const auto mc = config::model_config(l);
  const auto tc = config::train_config(l);
  auto data = load_data(l, mc.image_size);
  fs::create_directories(out / "ckpt");
  auto provider = make_provider(l, data.train, out / "ckpt" / "backbone");
  vit::ViTDetector model(mc, tc.seed);
  train::TrainOptions opts;
  opts.resume = resume;
  opts.resolved_config = config::to_ini(l);
  opts.on_epoch = [](const train::EpochLog& e) {
    auto j = train::to_json(e);
    j["event"] = "epoch";
    log_event(j);
  };
  const auto res = train::train(tc, model, data.train, *provider, out, opts);
  for (const auto& w : res.warnings) log_event({{"event", "warning"}, {"message", w}});
  const char* status = res.status == train::Status::Completed     ? "completed"
                       : res.status == train::Status::EarlyStopped ? "early_stopped"
                                                                   : "halted_non_finite";
  log_event({{"event", "train_done"}, {"status", status}, {"epochs", res.epochs_completed}, {"run", out.string()}});
  if (res.status == train::Status::HaltedNonFinite) {
    std::cerr << "training halted: " << res.halt_reason << "; last good checkpoint kept in " << (out / "ckpt" / "last") << '\n';
    return 2;
  }
  return 0;
}

vit::ViTDetector load_model(const std::string& ckpt) {
  if (ckpt.empty()) throw UserError("--ckpt is required");
  if (!fs::exists(ckpt)) throw UserError("checkpoint not found: " + ckpt);
  return vit::ViTDetector::from_checkpoint(nd::load_checkpoint(ckpt));
}

std::string file_stem_for(const std::string& sample_name) {
  std::string s = sample_name;
  std::replace(s.begin(), s.end(), '/', '_');
  return s;
}

int cmd_eval(const config::Layer& l, const fs::path& out, const std::string& ckpt) {
  auto model = load_model(ckpt);
  auto data = load_data(l, model.config().image_size);
  const auto attack = config::eval_attack(l);
  const auto batch = config::get_size(l, "eval.batch");
  fs::create_directories(out);
  write_text(out / "config.resolved", config::to_ini(l));
  const auto report = evalkit::evaluate(model, data.test, attack, {.batch = batch});
  auto j = evalkit::to_json(report);
  j["checkpoint"] = ckpt;
  write_text(out / "report.json", j.dump(2) + "\n");
  const auto table = evalkit::render_table(report);
  write_text(out / "table.md", table);
  std::cout << table;

  const auto n_maps = std::min(config::get_size(l, "eval.heatmaps"), data.test.size());
  if (n_maps) {
    std::vector<datasets::TestSample> head(data.test.begin(), data.test.begin() + static_cast<long>(n_maps));
    const auto clean = evalkit::model_outputs(model, head, std::nullopt, batch);
    std::optional<evalkit::Outputs> adv;
    if (attack) adv = evalkit::model_outputs(model, head, attack, batch);
    for (std::size_t i = 0; i < n_maps; ++i) {
      const auto stem = file_stem_for(head[i].name);
      evalkit::write_heatmap(out / "heatmaps" / (stem + "_clean.png"), head[i].image, head[i].mask, clean.maps[i]);
      if (adv) evalkit::write_heatmap(out / "heatmaps" / (stem + "_adv.png"), head[i].image, head[i].mask, adv->maps[i]);
    }
  }
  log_event({{"event", "eval_done"}, {"out", out.string()}, {"runtime_seconds", report.runtime_seconds}});
  return 0;
}

int cmd_analyze(const config::Layer& l, const fs::path& out, const std::string& ckpt) {
  auto model = load_model(ckpt);
  auto data = load_data(l, model.config().image_size);
  auto attack = config::eval_attack(l);
  if (!attack) throw UserError("analyze needs an attack; --attack none is not allowed");
  fs::create_directories(out);
  write_text(out / "config.resolved", config::to_ini(l));
  const auto prof = evalkit::vulnerability_by_attention(model, data.test, *attack, config::get_size(l, "analyze.clusters"),
                                                        config::get_size(l, "eval.batch"));
  write_text(out / "profile.csv", evalkit::to_csv(prof));
  json clusters = json::array();
  for (const auto& c : prof.clusters)
    clusters.push_back({{"cluster_id", c.id}, {"members", c.members.size()}, {"mean_attention_degree", c.mean_attention_degree},
                        {"auroc_clean", c.auroc_clean}, {"auroc_adv", c.auroc_adv}, {"vulnerability", c.vulnerability},
                        {"merged", c.merged}});
  json j = {{"clusters", clusters},      {"uninformative", prof.uninformative}, {"warnings", prof.warnings},
            {"attack", attacks::to_json(*attack)}, {"checkpoint", ckpt}};
  if (prof.clusters.size() >= 2) j["spearman_cluster_vs_vulnerability"] = evalkit::vulnerability_trend(prof);
  write_text(out / "profile.json", j.dump(2) + "\n");
  std::cout << evalkit::to_csv(prof);
  for (const auto& w : prof.warnings) log_event({{"event", "warning"}, {"message", w}});
  return 0;
}

void add_common(CLI::App* sub, Common& c, Overrides& o, bool needs_out = true) {
  auto* out = sub->add_option("--out", c.out, "Output directory");
  if (needs_out) out->required();
  sub->add_option("--config", c.config_file, "INI config file layered over the defaults");
  o.add(sub, "--seed", "run.seed", "Master seed");
  o.add_switch(sub, "--deterministic", "run.deterministic", "Single-threaded, bit-reproducible execution");
}

void add_attack_flags(CLI::App* sub, Overrides& o) {
  o.add(sub, "--attack", "attack.kind", "pgd | segpgd | fgsm | none");
  o.add(sub, "--eps", "attack.eps", "L-inf budget, decimal or rational such as 8/255");
  o.add(sub, "--iters", "attack.iters", "Attack iterations");
  o.add(sub, "--step", "attack.step", "Step size, or auto for 2.5 * eps / iters");
  o.add(sub, "--batch", "eval.batch", "Evaluation batch size");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarially robust patch-level anomaly detection and localization"};
  app.require_subcommand(1);

  datasets::SynthSpec synth;
  std::string texture = "value-noise";
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth-data", "Write a synthetic texture dataset in the MVTec folder layout");
  synth_cmd->add_option("--out", synth_out, "Dataset directory")->required();
  synth_cmd->add_option("--texture", texture, "stripes | checker | value-noise");
  synth_cmd->add_option("--size", synth.image_size, "Image side length in pixels (>= 16)");
  synth_cmd->add_option("--n-train", synth.n_train, "Normal training images");
  synth_cmd->add_option("--n-test", synth.n_test, "Test images");
  synth_cmd->add_option("--anomalous-fraction", synth.anomalous_fraction, "Share of test images with a defect");
  synth_cmd->add_option("--seed", synth.seed, "Seed");

  Common gen_c, train_c, eval_c, analyze_c;
  Overrides gen_o, train_o, eval_o, analyze_o;
  bool verify = false, resume = false;
  std::string backbone, eval_ckpt, analyze_ckpt;

  auto* gen_cmd = app.add_subcommand("gen", "Generate a pseudo-anomaly corpus from the normal training images");
  add_common(gen_cmd, gen_c, gen_o);
  gen_o.add(gen_cmd, "--data", "data.path", "Dataset root")->required();
  gen_o.add(gen_cmd, "--k-soft", "gen.k_soft", "Soft views fused into the saliency map (0 = single Grad-CAM map)");
  gen_o.add(gen_cmd, "--saliency", "gen.saliency", "gradcam | uniform");
  gen_o.add(gen_cmd, "--image-size", "model.image_size", "Resize images to this side length");
  gen_cmd->add_option("--backbone", backbone, "Grad-CAM backbone checkpoint (trained and saved when missing)");
  gen_cmd->add_flag("--verify", verify, "Audit the written corpus (masks and outside-mask pixels)");

  auto* train_cmd = app.add_subcommand("train", "Adversarially train the detector");
  add_common(train_cmd, train_c, train_o);
  train_o.add(train_cmd, "--data", "data.path", "Dataset root");
  train_o.add(train_cmd, "--epochs", "train.epochs", "Training epochs");
  train_o.add(train_cmd, "--alpha", "model.alpha", "Regularizer weight");
  train_o.add(train_cmd, "--batch-size", "train.batch_size", "Source images per step");
  train_o.add(train_cmd, "--lr", "train.lr", "Peak learning rate");
  train_o.add(train_cmd, "--eps", "train.eps", "Training attack budget, such as 8/255 (0 = clean training)");
  train_o.add(train_cmd, "--iters", "train.iters", "Training attack iterations");
  train_o.add(train_cmd, "--patience", "train.patience", "Early-stopping patience in epochs (0 = off)");
  train_o.add(train_cmd, "--k-soft", "gen.k_soft", "Soft views fused into the saliency map");
  train_o.add(train_cmd, "--saliency", "gen.saliency", "gradcam | uniform");
  train_o.add(train_cmd, "--image-size", "model.image_size", "Model input side length");
  train_o.add(train_cmd, "--patch-size", "model.patch_size", "Patch side length");
  train_o.add(train_cmd, "--dim", "model.dim", "Embedding width");
  train_o.add(train_cmd, "--depth", "model.depth", "Encoder blocks");
  train_o.add(train_cmd, "--heads", "model.heads", "Attention heads");
  train_o.add(train_cmd, "--mlp-ratio", "model.mlp_ratio", "MLP expansion");
  train_o.add(train_cmd, "--reg-layer", "model.reg_layer", "Regularized attention: disc or an encoder index");
  train_cmd->add_flag("--resume", resume, "Continue from <out>/ckpt/last with <out>/config.resolved as the base config");

  auto* eval_cmd = app.add_subcommand("eval", "Clean and adversarial image/pixel AUROC");
  add_common(eval_cmd, eval_c, eval_o);
  eval_cmd->add_option("--ckpt", eval_ckpt, "Detector checkpoint")->required();
  eval_o.add(eval_cmd, "--data", "data.path", "Dataset root")->required();
  add_attack_flags(eval_cmd, eval_o);
  eval_o.add(eval_cmd, "--heatmaps", "eval.heatmaps", "Write side-by-side heatmaps for the first N test images");

  auto* analyze_cmd = app.add_subcommand("analyze", "Vulnerability against attention degree");
  add_common(analyze_cmd, analyze_c, analyze_o);
  analyze_cmd->add_option("--ckpt", analyze_ckpt, "Detector checkpoint")->required();
  analyze_o.add(analyze_cmd, "--data", "data.path", "Dataset root")->required();
  add_attack_flags(analyze_cmd, analyze_o);
  analyze_o.add(analyze_cmd, "--clusters", "analyze.clusters", "Attention-degree quantile clusters");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  auto* active = app.get_subcommands().front();
  try {
    if (active == synth_cmd) {
      synth.texture = datasets::texture_from_name(texture);
      return cmd_synth(synth, synth_out);
    }
    if (active == gen_cmd) return cmd_gen(resolve(gen_c, gen_o), gen_c.out, verify, backbone);
    if (active == train_cmd) {
      std::optional<fs::path> base;
      if (resume) base = fs::path(train_c.out) / "config.resolved";
      return cmd_train(resolve(train_c, train_o, base), train_c.out, resume);
    }
    if (active == eval_cmd) return cmd_eval(resolve(eval_c, eval_o), eval_c.out, eval_ckpt);
    if (active == analyze_cmd) return cmd_analyze(resolve(analyze_c, analyze_o), analyze_c.out, analyze_ckpt);
  } catch (const UserError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n\n" << active->help();
    return 1;
  } catch (const datasets::DatasetError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const io::IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const nd::CheckpointError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
