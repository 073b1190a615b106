#pragma once

// Text checkpoint: resolved-config block, "bank <rows>" followed by the bank
// dump, then one block per parameter tensor ("param <name> <rows> <cols>" and
// row-major values, one matrix row per line), closed by "end".

#include <fstream>
#include <iomanip>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>

#include "specpl/config.hpp"
#include "specpl/semantic_bank.hpp"
#include "specpl/trainer.hpp"

namespace specpl {

struct Checkpoint {
  RunConfig config;
  ModelParams params;
  SemanticBank bank;
};

inline void write_checkpoint(std::ostream& out, const RunConfig& cfg, const ModelParams& params,
                             const SemanticBank& bank) {
  std::ostringstream s;
  s << resolved_config_header(cfg);
  s << "bank " << bank.fill_count() << '\n';
  bank.dump(s);
  s << std::setprecision(17);
  params.visit([&](const std::string& name, const auto& t) {
    s << "param " << name << ' ' << t.rows() << ' ' << t.cols() << '\n';
    for (Eigen::Index i = 0; i < t.rows(); ++i) {
      for (Eigen::Index j = 0; j < t.cols(); ++j) {
        if (j) s << ' ';
        s << t(i, j);
      }
      s << '\n';
    }
  });
  s << "end\n";
  out << s.str();
}

inline void save_checkpoint(const std::string& path, const RunConfig& cfg, const TrainState& st) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError(path, "cannot open checkpoint for writing");
  write_checkpoint(out, cfg, st.params, st.bank);
  if (!out) throw IoError(path, "failed writing checkpoint");
}

inline Checkpoint read_checkpoint(std::istream& in) {
  Checkpoint ck;
  ck.config = parse_resolved_header(in);

  std::string line;
  if (!std::getline(in, line)) throw FormatError("missing bank section");
  std::istringstream bank_line(line);
  std::string tag;
  std::size_t rows = 0;
  if (!(bank_line >> tag >> rows) || tag != "bank") throw FormatError("expected 'bank <rows>', got: " + line);
  ck.bank = SemanticBank::load(in, rows);

  std::map<std::string, Mat> blocks;
  while (std::getline(in, line)) {
    if (line == "end") break;
    std::istringstream head(line);
    std::string name;
    Eigen::Index r = 0, c = 0;
    if (!(head >> tag >> name >> r >> c) || tag != "param" || r < 0 || c < 0) {
      throw FormatError("malformed parameter header: " + line);
    }
    Mat m(r, c);
    for (Eigen::Index i = 0; i < r; ++i) {
      if (!std::getline(in, line)) throw FormatError("truncated parameter '" + name + "'");
      std::istringstream row(line);
      for (Eigen::Index j = 0; j < c; ++j) {
        if (!(row >> m(i, j))) throw FormatError("malformed row in parameter '" + name + "'");
      }
    }
    blocks.emplace(name, std::move(m));
  }
  if (line != "end") throw FormatError("checkpoint is missing its 'end' marker");

  ck.params.proj_low.band = Band::low;
  ck.params.proj_high.band = Band::high;
  ck.params.visit([&](const std::string& name, auto& t) {
    const auto it = blocks.find(name);
    if (it == blocks.end()) throw FormatError("checkpoint lacks parameter '" + name + "'");
    t.resize(it->second.rows(), it->second.cols());
    t = it->second;
    blocks.erase(it);
  });
  if (!blocks.empty()) throw FormatError("unknown parameter '" + blocks.begin()->first + "'");
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path, "cannot open checkpoint");
  return read_checkpoint(in);
}

/// Tab-separated per-epoch loss history; disabled terms are written as "-".
inline void write_history(std::ostream& out, std::span<const LossBreakdown> epochs) {
  std::ostringstream s;
  s << std::setprecision(10);
  s << "epoch\tcls\tsem\tgranule_f\tgranule_cf\ttotal\n";
  auto opt = [&](const std::optional<double>& v) {
    if (v) s << *v;
    else s << '-';
  };
  for (std::size_t e = 0; e < epochs.size(); ++e) {
    const auto& b = epochs[e];
    s << (e + 1) << '\t' << b.cls << '\t';
    opt(b.sem);
    s << '\t';
    opt(b.granule_f);
    s << '\t';
    opt(b.granule_cf);
    s << '\t' << b.total << '\n';
  }
  out << s.str();
}

}  // namespace specpl
