// Copyright 2026 The viewmoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// Command-line front end. run_cli() is the whole program; main() only forwards
// argv and the standard streams, so tests drive it in-process.
#pragma once

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <string>
#include <vector>

#include "viewmoe/audit.hpp"
#include "viewmoe/metrics.hpp"
#include "viewmoe/training.hpp"

namespace viewmoe::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::Usage:
      return kUsage;
    case ErrorKind::Numeric:
      return kNumeric;
    case ErrorKind::Data:
    case ErrorKind::Logic:
      return kData;
  }
  return kData;
}

struct GlobalOptions {
  std::string config_path;
  std::string preset = "tiny";
  std::vector<std::string> overrides;  // key=value
  std::uint64_t seed = 0;
  bool seed_given = false;
  int threads = 1;
  std::string out;
};

inline std::map<std::string, std::string> parse_overrides(const std::vector<std::string>& overrides) {
  std::map<std::string, std::string> kv;
  for (const auto& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--set expects key=value, got '" + o + "'");
    kv[o.substr(0, eq)] = o.substr(eq + 1);
  }
  return kv;
}

/// preset, then the config file, then --set overrides, then --seed.
inline TrainConfig resolve_config(const GlobalOptions& g) {
  TrainConfig c = TrainConfig::preset(g.preset);
  if (!g.config_path.empty()) c.apply(parse_key_values(read_file(g.config_path), g.config_path));
  c.apply(parse_overrides(g.overrides));
  if (g.seed_given) c.seed = g.seed;
  c.validate();
  return c;
}

/// Settings stored in a checkpoint header, then the config file, --set and
/// --seed on top. Model hyperparameters are fixed by the checkpoint.
inline TrainConfig config_from_checkpoint(const Checkpoint& ck, const GlobalOptions& g) {
  TrainConfig c = TrainConfig::preset(g.preset);
  std::map<std::string, std::string> saved;
  for (const auto& [k, v] : ck.header)
    if (k.rfind("config.", 0) == 0) saved[k.substr(7)] = v;
  c.apply(saved);
  c.model = model_config_from(ck.header);
  const ModelConfig fixed = c.model;
  if (!g.config_path.empty()) c.apply(parse_key_values(read_file(g.config_path), g.config_path));
  c.apply(parse_overrides(g.overrides));
  if (g.seed_given) c.seed = g.seed;
  if (!(c.model == fixed))
    throw HyperparameterMismatch("model hyperparameters cannot be overridden for an existing checkpoint");
  c.validate();
  return c;
}

inline fs::path require_out(const GlobalOptions& g) {
  if (g.out.empty()) throw UsageError("--out is required for this command");
  return g.out;
}

inline std::string train_log_header() { return "step,scene,photometric,l_div,l_sc,total,grad_norm,paired_kl\n"; }

inline std::string train_log_row(const TrainStepReport& r) {
  return std::to_string(r.step) + "," + std::to_string(r.scene) + "," + format_double(r.photometric) + "," +
         format_double(r.l_div) + "," + format_double(r.l_sc) + "," + format_double(r.total) + "," +
         format_double(r.grad_norm) + "," + format_double(r.paired_kl) + "\n";
}

inline std::vector<std::size_t> parse_views(const std::string& spec, const SceneDataset& d, ViewTag fallback) {
  if (spec.empty()) return d.views_tagged(fallback);
  std::vector<std::size_t> out;
  std::istringstream in(spec);
  for (std::string cell; std::getline(in, cell, ',');) {
    if (cell.empty() || cell.find_first_not_of("0123456789") != std::string::npos)
      throw UsageError("--views expects comma-separated view indices, got '" + spec + "'");
    const auto v = static_cast<std::size_t>(std::stoull(cell));
    if (v >= d.size()) throw UsageError("view " + cell + " does not exist in scene " + std::to_string(d.id));
    out.push_back(v);
  }
  return out;
}

/// Encoder inputs for rendering a scene: its source views plus, when shots > 0,
/// the first `shots` finetune views.
inline std::vector<std::size_t> render_sources(const SceneDataset& d, std::size_t shots) {
  return shots ? evaluation_sources(d, shots) : d.views_tagged(ViewTag::Source);
}

inline int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"viewmoe: mixture-of-view-experts novel view synthesis on procedural scenes", "viewmoe"};
  app.require_subcommand(1);
  app.fallthrough();  // global options may also follow the subcommand
  GlobalOptions g;
  app.add_option("--config", g.config_path, "key = value settings file")->check(CLI::ExistingFile);
  app.add_option("--preset", g.preset, "base settings")->check(CLI::IsMember({"tiny", "small", "paper"}));
  app.add_option("--set", g.overrides, "override one setting, key=value (repeatable)");
  auto* seed_opt = app.add_option("--seed", g.seed, "random seed");
  app.add_option("--threads", g.threads, "worker threads; 1 gives the determinism contract")
      ->check(CLI::Range(1, 256));
  app.add_option("--out", g.out, "output directory or file");

  std::string data_dir, scene_path, ckpt_path, resume_path, views_spec;
  std::size_t shots = 0, first_id = 0, checkpoint_every = 0, log_every = 100;
  long long steps = -1;

  auto* gen = app.add_subcommand("gen-scenes", "generate procedural scenes with ground-truth views");
  gen->add_option("--first-id", first_id, "id of the first scene");

  auto* train = app.add_subcommand("train", "train a model on every scene under --data");
  train->add_option("--data", data_dir, "directory of scene_<id> folders")->required()->check(CLI::ExistingDirectory);
  train->add_option("--resume", resume_path, "continue from a checkpoint")->check(CLI::ExistingFile);
  train->add_option("--steps", steps, "total steps (overrides the config)");
  train->add_option("--checkpoint-every", checkpoint_every, "also write step_<n>.move every n steps");
  train->add_option("--log-every", log_every, "progress line every n steps");

  auto* finetune = app.add_subcommand("finetune", "few-shot finetune a checkpoint on one scene");
  finetune->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  finetune->add_option("--scene", scene_path)->required()->check(CLI::ExistingDirectory);
  finetune->add_option("--shots", shots, "finetune views to use (default: config shots)");
  finetune->add_option("--steps", steps, "finetuning steps (default: config finetune_steps)");

  auto* render = app.add_subcommand("render", "render views of a scene to PPM");
  auto* eval = app.add_subcommand("eval", "PSNR and SSIM of rendered views, written as CSV");
  auto* depth = app.add_subcommand("depth-maps", "depth-from-attention maps as grayscale PPM");
  for (auto* sub : {render, eval, depth}) {
    sub->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
    sub->add_option("--scene", scene_path)->required()->check(CLI::ExistingDirectory);
    sub->add_option("--views", views_spec, "comma-separated view indices (default: target views)");
    sub->add_option("--shots", shots, "also encode the first n finetune views");
  }

  auto* maps = app.add_subcommand("expert-maps", "expert maps, usage histograms and cross-scene overlap");
  maps->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);
  maps->add_option("--data", data_dir, "directory of scene_<id> folders")->required()->check(CLI::ExistingDirectory);

  auto* gcheck = app.add_subcommand("gradcheck", "compare every registered gradient with central differences");
  auto* inspect = app.add_subcommand("inspect-checkpoint", "print a checkpoint's header and tensor shapes");
  inspect->add_option("--checkpoint", ckpt_path)->required()->check(CLI::ExistingFile);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << app.help();
    return kUsage;
  }
  g.seed_given = seed_opt->count() > 0;

  try {
    set_num_threads(g.threads);
    retain_heap_memory();

    if (*gen) {
      const TrainConfig c = resolve_config(g);
      const fs::path root = require_out(g);
      Rng seeds(c.seed);
      for (std::size_t i = 0; i < c.num_scenes; ++i) {
        const int id = static_cast<int>(first_id + i);
        const auto d = generate_dataset(static_cast<std::uint64_t>(id), seeds.next(), c.dataset_options());
        save_dataset(scene_dir(root, id), d);
        out << "wrote " << scene_dir(root, id).string() << " (" << d.size() << " views, "
            << d.scene().primitives.size() << " primitives)\n";
      }
      return kOk;
    }

    if (*train) {
      TrainConfig c = resolve_config(g);
      if (steps >= 0) c.steps = static_cast<std::size_t>(steps);
      const fs::path dir = require_out(g);
      fs::create_directories(dir);
      const auto datasets = load_datasets(data_dir);
      if (datasets.empty()) throw InsufficientViews("no scene_<id> folders under " + data_dir);
      std::vector<TrainingScene> scenes;
      for (const auto& d : datasets) scenes.push_back(training_scene(d));
      std::unique_ptr<Trainer> t;
      if (resume_path.empty()) {
        t = std::make_unique<Trainer>(c, scenes);
      } else {
        const auto ck = load_checkpoint(resume_path);
        c = config_from_checkpoint(ck, g);
        if (steps >= 0) c.steps = static_cast<std::size_t>(steps);
        t = std::make_unique<Trainer>(c, scenes, ck);
      }
      const fs::path log_path = dir / "train_log.csv";
      std::ofstream log(log_path, t->steps_done() ? std::ios::app : std::ios::trunc);
      if (!log) throw IoError("cannot write " + log_path.string());
      if (!t->steps_done()) log << train_log_header();
      const auto t0 = std::chrono::steady_clock::now();
      while (t->steps_done() < c.steps) {
        const auto r = t->step();
        log << train_log_row(r);
        if (log_every && (r.step % log_every == 0 || r.step + 1 == c.steps))
          logger().info("step {} scene {} photometric {:.6g} total {:.6g}", r.step, r.scene, r.photometric, r.total);
        if (checkpoint_every && t->steps_done() % checkpoint_every == 0)
          save_checkpoint(dir / ("step_" + std::to_string(t->steps_done()) + ".move"), t->checkpoint());
      }
      save_checkpoint(dir / "final.move", t->checkpoint());
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out << "trained to step " << t->steps_done() << " in " << std::fixed << std::setprecision(1) << secs
          << " s; wrote " << (dir / "final.move").string() << "\n";
      return kOk;
    }

    if (*finetune) {
      const auto ck = load_checkpoint(ckpt_path);
      TrainConfig c = config_from_checkpoint(ck, g);
      const auto d = load_dataset(scene_path);
      const std::size_t n_shots = shots ? shots : c.shots;
      const std::size_t n_steps = steps >= 0 ? static_cast<std::size_t>(steps) : c.finetune_steps;
      const Model tuned = finetune_few_shot(model_from_checkpoint(ck), d, n_shots, n_steps, c);
      Checkpoint outc;
      outc.header = ck.header;
      for (const auto& [k, v] : c.to_map()) outc.header["config." + k] = v;
      outc.header["finetune.scene"] = std::to_string(d.id);
      outc.header["finetune.shots"] = std::to_string(n_shots);
      outc.header["finetune.steps"] = std::to_string(n_steps);
      outc.tensors = model_state(tuned);
      const fs::path dir = require_out(g);
      fs::create_directories(dir);
      save_checkpoint(dir / "finetuned.move", outc);
      out << "finetuned on " << n_shots << " shots for " << n_steps << " steps; wrote "
          << (dir / "finetuned.move").string() << "\n";
      return kOk;
    }

    if (*render || *eval || *depth) {
      const auto ck = load_checkpoint(ckpt_path);
      const TrainConfig c = config_from_checkpoint(ck, g);
      const Model model = model_from_checkpoint(ck);
      const auto d = load_dataset(scene_path);
      const auto sources = render_sources(d, shots);
      const auto views = parse_views(views_spec, d, ViewTag::Target);
      if (views.empty()) throw InsufficientViews("scene " + std::to_string(d.id) + " has no views to render");

      if (*eval) {
        EvalReport rep = evaluate(model, d, sources, views, c.samples);
        rep.checkpoint_id = fs::path(ckpt_path).stem().string();
        const fs::path dest = require_out(g);
        if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
        write_file(dest, encode_eval_csv(rep));
        out << "scene " << rep.scene_id << " checkpoint " << rep.checkpoint_id << ": mean PSNR " << std::fixed
            << std::setprecision(3) << rep.mean_psnr() << " dB, mean SSIM " << rep.mean_ssim() << "\n";
        return kOk;
      }
      std::vector<Camera> cams;
      std::vector<const Image*> ims;
      for (auto v : sources) {
        cams.push_back(d.cameras[v]);
        ims.push_back(&d.images[v]);
      }
      const FeatureBank bank = model.encode(cams, ims);
      RenderOptions opt;
      opt.samples = c.samples;
      opt.near = d.near;
      opt.far = d.far;
      const fs::path dir = require_out(g);
      fs::create_directories(dir);
      for (auto v : views) {
        const auto r = render_image(model, d.cameras[v], bank, opt);
        const Camera& cam = d.cameras[v];
        if (*render) {
          write_ppm(dir / ("view_" + std::to_string(v) + ".ppm"), r.rgb);
          out << "view " << v << ": PSNR " << std::fixed << std::setprecision(3) << psnr(r.rgb, d.images[v]) << " dB\n";
        } else {
          write_ppm(dir / ("depth_" + std::to_string(v) + ".ppm"), depth_image(r.depth, cam.width, cam.height, d.near, d.far));
          const auto [lo, hi] = std::minmax_element(r.depth.begin(), r.depth.end());
          out << "view " << v << ": depth in [" << *lo << ", " << *hi << "]\n";
        }
      }
      return kOk;
    }

    if (*maps) {
      const auto ck = load_checkpoint(ckpt_path);
      const TrainConfig c = config_from_checkpoint(ck, g);
      const auto datasets = load_datasets(data_dir);
      if (datasets.empty()) throw InsufficientViews("no scene_<id> folders under " + data_dir);
      const auto sum = emit_expert_artifacts(model_from_checkpoint(ck), datasets, require_out(g), c.samples);
      for (const auto& f : sum.files) out << "wrote " << f.string() << "\n";
      return kOk;
    }

    if (*gcheck) {
      const TrainConfig c = resolve_config(g);
      bool all = true;
      for (const auto& r : run_gradcheck_suite(c)) {
        out << (r.pass ? "PASS " : "FAIL ") << r.name << " max_rel_err " << std::scientific << std::setprecision(3)
            << r.max_rel_err << " (" << std::fixed << std::setprecision(1) << r.seconds << " s)\n";
        all = all && r.pass;
      }
      if (!all) throw GradcheckFailure("at least one gradient path exceeds the tolerance");
      return kOk;
    }

    if (*inspect) {
      const auto ck = load_checkpoint(ckpt_path);
      out << "header:\n";
      for (const auto& [k, v] : ck.header) out << "  " << k << " = " << v << "\n";
      std::size_t total = 0;
      out << "tensors:\n";
      for (const auto& [k, t] : ck.tensors) {
        out << "  " << k << " " << shape_str(t.shape) << "\n";
        total += t.values.size();
      }
      out << ck.tensors.size() << " tensors, " << total << " values\n";
      return kOk;
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kData;
  }
  return kUsage;
}

}  // namespace viewmoe::cli
