#pragma once

// Command-line surface: gen, train, eval, diag, bank dump, gradcheck.
// Exit codes: 0 success, 1 usage error, 2 runtime error.

#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "specpl/checkpoint.hpp"
#include "specpl/config.hpp"
#include "specpl/eval.hpp"
#include "specpl/spectral_diag.hpp"
#include "specpl/teacher.hpp"
#include "specpl/trainer.hpp"

namespace specpl {

namespace detail {

/// Writes to path, or to fallback when path is empty or "-".
template <typename F>
void emit(const std::string& path, std::ostream& fallback, F&& write) {
  if (path.empty() || path == "-") {
    write(fallback);
    return;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  write(out);
  if (!out) throw IoError(path, "write failed");
}

struct ConfigOptions {
  std::string file;
  std::vector<std::string> overrides;

  void attach(CLI::App* app) {
    app->add_option("--config", file, "key = value configuration file");
    app->add_option("--set", overrides, "override a configuration key (key=value)");
  }

  RunConfig resolve() const {
    RunConfig cfg = file.empty() ? RunConfig{} : load_config(file);
    apply_environment(cfg);
    for (const auto& o : overrides) apply_override(cfg, o);
    return cfg;
  }
};

inline void write_eval_report(std::ostream& out, const RunConfig& cfg, const BaseToNovelRun& run) {
  std::ostringstream s;
  s << resolved_config_header(cfg);
  s << std::fixed << std::setprecision(4);
  s << "metric\tvalue\n";
  s << "base_acc\t" << run.result.base_acc << '\n';
  s << "novel_acc\t" << run.result.novel_acc << '\n';
  s << "hm\t" << run.result.hm << '\n';
  s << "gap_percent\t" << run.result.gap_percent << '\n';
  s << "granule_source_acc\t" << run.granule_source_acc << '\n';
  s << "granule_factual_acc\t" << run.granule_factual_acc << '\n';
  out << s.str();
}

}  // namespace detail

inline int cli_main(int argc, const char* const* argv, std::ostream& out = std::cout,
                    std::ostream& err = std::cerr) {
  CLI::App app{"Spectral prompt-learning toolkit on synthetic latents", "specpl"};
  app.require_subcommand(1);

  detail::ConfigOptions gen_cfg, train_cfg, diag_cfg, grad_cfg;
  std::string gen_out, train_cache, train_out, train_history, eval_ckpt, eval_cache, eval_report;
  std::string diag_cache, diag_out, dump_ckpt, dump_out;
  std::size_t diag_k = 7, diag_bands = 10, diag_grid = 14;
  std::size_t gc_dim = 8, gc_classes = 4, gc_bank = 6, gc_batch = 5;
  double gc_step = 1e-5, gc_tol = 1e-4;

  auto* gen = app.add_subcommand("gen", "generate a synthetic latent cache");
  gen_cfg.attach(gen);
  gen->add_option("--out", gen_out, "cache file to write")->required();

  auto* train = app.add_subcommand("train", "train on the base classes and write a checkpoint");
  train_cfg.attach(train);
  train->add_option("--cache", train_cache, "latent cache (default: generate from config)");
  train->add_option("--out", train_out, "checkpoint path (default: config 'checkpoint')");
  train->add_option("--history", train_history, "loss history path (default: config 'history')");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint base-to-novel");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint written by train")->required();
  eval->add_option("--cache", eval_cache, "latent cache (default: the checkpoint's config)");
  eval->add_option("--report", eval_report, "report path (default: stdout)");

  auto* diag = app.add_subcommand("diag", "spectral separability report for a cache");
  diag_cfg.attach(diag);
  diag->add_option("--cache", diag_cache, "latent cache (default: generate from config)");
  const CLI::Validator odd(
      [](const std::string& v) { return std::stoul(v) % 2 == 1 ? std::string() : "kernel must be odd"; }, "ODD");
  diag->add_option("--k", diag_k, "smoothing kernel")->check(CLI::PositiveNumber & odd)->capture_default_str();
  diag->add_option("--bands", diag_bands, "radial bands")->check(CLI::PositiveNumber)->capture_default_str();
  diag->add_option("--grid", diag_grid, "square analysis grid")->check(CLI::Range(2, 4096))->capture_default_str();
  diag->add_option("--out", diag_out, "report path (default: stdout)");

  auto* bank = app.add_subcommand("bank", "semantic bank utilities");
  bank->require_subcommand(1);
  auto* dump = bank->add_subcommand("dump", "print the bank stored in a checkpoint");
  dump->add_option("--checkpoint", dump_ckpt, "checkpoint written by train")->required();
  dump->add_option("--out", dump_out, "output path (default: stdout)");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference check of the full objective");
  grad_cfg.attach(grad);
  grad->add_option("--dim", gc_dim, "embedding width")->capture_default_str();
  grad->add_option("--classes", gc_classes, "class count")->capture_default_str();
  grad->add_option("--bank-size", gc_bank, "bank entries")->capture_default_str();
  grad->add_option("--batch", gc_batch, "batch size")->capture_default_str();
  grad->add_option("--step", gc_step, "central difference step")->capture_default_str();
  grad->add_option("--tolerance", gc_tol, "max relative error")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  }

  try {
    if (*gen) {
      const RunConfig cfg = gen_cfg.resolve();
      const auto cache = generate_dataset(cfg.data, cfg.samples_per_class());
      write_cache(cache, gen_out);
      out << resolved_config_header(cfg);
      out << "wrote " << cache.size() << " latents to " << gen_out << '\n';
    } else if (*train) {
      RunConfig cfg = train_cfg.resolve();
      if (!train_cache.empty()) cfg.cache = train_cache;
      if (!train_out.empty()) cfg.checkpoint = train_out;
      if (!train_history.empty()) cfg.history = train_history;
      out << resolved_config_header(cfg);
      const auto split = prepare_split(load_or_generate(cfg), cfg);
      const TrainState st = train_base(split, cfg);
      save_checkpoint(cfg.checkpoint, cfg, st);
      detail::emit(cfg.history, out, [&](std::ostream& o) {
        o << resolved_config_header(cfg);
        write_history(o, st.epoch_history);
      });
      out << "steps\t" << st.step << '\n';
      if (!st.epoch_history.empty()) out << "final_total\t" << st.epoch_history.back().total << '\n';
      out << "checkpoint\t" << cfg.checkpoint << '\n';
    } else if (*eval) {
      const Checkpoint ck = load_checkpoint(eval_ckpt);
      RunConfig cfg = ck.config;
      if (!eval_cache.empty()) cfg.cache = eval_cache;
      const auto split = prepare_split(load_or_generate(cfg), cfg);
      TrainState st;
      st.params = ck.params;
      st.bank = ck.bank;
      st.encoder = make_encoder(split.grid, cfg.train);
      const auto run = evaluate_state(st, split, cfg);
      detail::emit(eval_report, out, [&](std::ostream& o) { detail::write_eval_report(o, cfg, run); });
    } else if (*diag) {
      RunConfig cfg = diag_cfg.resolve();
      if (!diag_cache.empty()) cfg.cache = diag_cache;
      DiagnosticParams p{diag_k, diag_bands, diag_grid, diag_grid};
      const auto report = diagnose(load_or_generate(cfg), p);
      detail::emit(diag_out, out, [&](std::ostream& o) { write_spectral_report(o, report); });
    } else if (*dump) {
      const Checkpoint ck = load_checkpoint(dump_ckpt);
      detail::emit(dump_out, out, [&](std::ostream& o) { ck.bank.dump(o); });
    } else if (*grad) {
      RunConfig cfg = grad_cfg.resolve();
      TrainConfig tc = cfg.train;
      tc.embed_dim = gc_dim;
      tc.bank_size = gc_bank;
      tc.kernel = std::min<std::size_t>(tc.kernel, 7);
      const auto problem = make_gradient_problem(tc, gc_classes, gc_batch, cfg.train.seed);
      const auto report = gradient_check(problem.state, problem.batch, problem.config, gc_step);
      std::ostringstream s;
      s << std::setprecision(6);
      s << "tensor\tindex\tanalytic\tnumeric\trel_error\n";
      for (const auto& e : report.parameters) {
        s << e.name << '\t' << e.index << '\t' << e.analytic << '\t' << e.numeric << '\t' << e.rel_error << '\n';
      }
      for (const auto& e : report.excluded) {
        s << "excluded\t" << e.name << "\tanalytic=" << e.analytic_max_abs << "\tnumeric=" << e.numeric_max_abs
          << '\n';
      }
      s << "scalars_checked\t" << report.scalars_checked << '\n';
      s << "max_rel_error\t" << report.max_relative_error() << '\t' << report.worst.name << '\n';
      out << s.str();
      if (!(report.max_relative_error() < gc_tol)) {
        err << "gradient check failed: " << report.max_relative_error() << " >= " << gc_tol << '\n';
        return 2;
      }
    }
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace specpl
