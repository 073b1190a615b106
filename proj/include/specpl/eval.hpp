#pragma once

// Base-to-novel protocol, inference path and metrics.
//
// Inference only needs the frozen image embedding, the raw class rows, the
// bank and the aggregator. Neither the latent teacher nor the FiLM branch is
// consulted.

#include <map>
#include <optional>
#include <random>
#include <span>
#include <vector>

#include "specpl/config.hpp"
#include "specpl/granule_film.hpp"
#include "specpl/objectives.hpp"
#include "specpl/semantic_bank.hpp"
#include "specpl/text_refinement.hpp"
#include "specpl/trainer.hpp"

namespace specpl {

struct Prediction {
  Vec logits;
  std::size_t label = 0;
};

/// logits = s * mixed * v; ties resolve to the lowest class index.
inline Prediction predict(const Vec& v, const TextFeatureSet& features, double scale) {
  Prediction p;
  p.logits = scale * (features.mixed * v);
  for (Eigen::Index c = 1; c < p.logits.size(); ++c) {
    if (p.logits(c) > p.logits(Eigen::Index(p.label))) p.label = static_cast<std::size_t>(c);
  }
  return p;
}

/// Raw rows refined through the bank (when enabled) and mixed with eta.
inline TextFeatureSet inference_features(const Mat& raw, const SemanticBank& bank, const Aggregator& agg,
                                         const TrainConfig& cfg) {
  TextFeatureSet f{raw, raw, raw, cfg.eta};
  if (cfg.use_bank) f = refine_all(std::move(f), bank, agg);
  f.mixed = mix(f);
  return f;
}

inline double harmonic_mean(double base, double novel) {
  if (base < 0.0 || novel < 0.0) throw ParameterError("accuracies must be non-negative");
  return base + novel > 0.0 ? 2.0 * base * novel / (base + novel) : 0.0;
}

/// 100 * (base - novel) / base
inline double generalization_gap(double base, double novel) {
  if (!(base > 0.0)) throw ParameterError("generalization gap needs a positive base accuracy");
  return 100.0 * (base - novel) / base;
}

struct EvalResult {
  double base_acc = 0.0;   // percent
  double novel_acc = 0.0;  // percent
  double hm = 0.0;         // percent
  double gap_percent = 0.0;

  bool operator==(const EvalResult&) const = default;
};

inline EvalResult make_result(double base, double novel) {
  return EvalResult{base, novel, harmonic_mean(base, novel), base > 0.0 ? generalization_gap(base, novel) : 0.0};
}

/// Even class indices are base classes, odd ones novel. Within each class the
/// first `shots` samples are the train (or prototype) pool, the next
/// `val_per_class` the validation pool when selection is on, the rest test.
struct ProtocolSplit {
  std::vector<LatentRecord> base_train;  // labels remapped to base indices
  std::vector<LatentRecord> base_val;
  std::vector<LatentRecord> base_test;
  std::vector<LatentRecord> novel_proto;  // labels remapped to novel indices
  std::vector<LatentRecord> novel_test;
  std::size_t num_base = 0;
  std::size_t num_novel = 0;
};

inline ProtocolSplit split_base_novel(const LatentCache& cache, const RunConfig& cfg) {
  std::size_t classes = 0;
  for (const auto& r : cache.records) classes = std::max<std::size_t>(classes, r.class_label + 1);
  if (classes < 2) throw ProtocolError("base-to-novel evaluation needs at least 2 classes");
  ProtocolSplit s;
  s.num_base = (classes + 1) / 2;
  s.num_novel = classes / 2;
  const std::size_t val = cfg.select_by_val ? cfg.val_per_class : 0;
  std::vector<std::size_t> seen(classes, 0);
  for (const auto& r : cache.records) {
    const std::size_t idx = seen[r.class_label]++;
    LatentRecord local = r;
    local.class_label = r.class_label / 2;
    const bool base = r.class_label % 2 == 0;
    if (idx < cfg.shots) {
      (base ? s.base_train : s.novel_proto).push_back(std::move(local));
    } else if (idx < cfg.shots + val) {
      if (base) s.base_val.push_back(std::move(local));
    } else {
      (base ? s.base_test : s.novel_test).push_back(std::move(local));
    }
  }
  if (s.base_train.empty()) throw ProtocolError("no base-class training samples");
  if (s.novel_proto.empty()) throw ProtocolError("no novel-class prototype samples");
  return s;
}

/// Per-class mean image embeddings (frozen novel-class text rows).
inline Mat class_prototypes(std::span<const SampleFeatures> samples, std::size_t classes) {
  Mat proto = Mat::Zero(Eigen::Index(classes), samples.empty() ? 0 : samples.front().image.size());
  std::vector<double> counts(classes, 0.0);
  for (const auto& s : samples) {
    proto.row(Eigen::Index(s.label)) += s.image.transpose();
    counts[s.label] += 1.0;
  }
  for (std::size_t c = 0; c < classes; ++c) {
    if (counts[c] > 0.0) proto.row(Eigen::Index(c)) /= counts[c];
  }
  return proto;
}

/// Percentage of samples whose predicted label matches.
inline double accuracy(std::span<const SampleFeatures> samples, const TextFeatureSet& features, double scale) {
  if (samples.empty()) return 0.0;
  std::size_t hit = 0;
  for (const auto& s : samples) hit += predict(s.image, features, scale).label == s.label;
  return 100.0 * double(hit) / double(samples.size());
}

/// Accuracy of the FiLM branch against granule-source labels on randomly
/// permuted batches (counterfactual = true), or against own labels. Samples
/// are shuffled before batching so batches mix classes.
inline double granule_accuracy(const ModelParams& p, const SemanticBank& bank,
                               std::span<const SampleFeatures> samples, const TrainConfig& cfg,
                               bool counterfactual, std::uint64_t seed) {
  if (samples.empty()) return 0.0;
  std::mt19937_64 rng(seed);
  const Mat refined = class_rows(p, bank, cfg);
  const auto order = random_permutation(samples.size(), rng);
  std::vector<SampleFeatures> batch;
  std::size_t hit = 0;
  for (std::size_t start = 0; start < samples.size(); start += cfg.batch_size) {
    const std::size_t n = std::min(cfg.batch_size, samples.size() - start);
    batch.clear();
    for (std::size_t i = 0; i < n; ++i) batch.push_back(samples[order[start + i]]);
    const auto perm = counterfactual ? random_permutation(n, rng) : [&] {
      std::vector<std::size_t> id(n);
      for (std::size_t i = 0; i < n; ++i) id[i] = i;
      return id;
    }();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t src = perm[i];
      Vec shared;
      switch (cfg.anchor) {
        case SharedAnchorPolicy::raw_text_by_label: shared = p.text.row(Eigen::Index(batch[i].label)).transpose(); break;
        case SharedAnchorPolicy::refined_text_by_label: shared = refined.row(Eigen::Index(batch[i].label)).transpose(); break;
        case SharedAnchorPolicy::image_embedding: shared = batch[i].image; break;
      }
      const auto granule = project_band(p.proj_high, batch[src].stats_high);
      const Vec vg = film_modulate(fuse(shared, granule, p.fusion), batch[i].image, p.film);
      const Vec logits = cfg.logit_scale * (p.text * vg);
      Eigen::Index best = 0;
      for (Eigen::Index c = 1; c < logits.size(); ++c) if (logits(c) > logits(best)) best = c;
      hit += static_cast<std::size_t>(best) == batch[src].label;
    }
  }
  return 100.0 * double(hit) / double(samples.size());
}

struct BaseToNovelRun {
  EvalResult result;
  double granule_source_acc = 0.0;  // counterfactual FiLM branch, base test set
  double granule_factual_acc = 0.0;
  TrainState state;
  Mat novel_text;  // frozen novel rows
  RunConfig config;
};

/// Prepared features for every split, under the run's encoder.
struct PreparedSplit {
  std::vector<SampleFeatures> base_train, base_val, base_test, novel_proto, novel_test;
  Grid grid;
  std::size_t num_base = 0;
  std::size_t num_novel = 0;
};

inline PreparedSplit prepare_split(const LatentCache& cache, const RunConfig& cfg) {
  const ProtocolSplit s = split_base_novel(cache, cfg);
  PreparedSplit p;
  p.grid = cache.records.front().latent.grid();
  p.num_base = s.num_base;
  p.num_novel = s.num_novel;
  const auto enc = make_encoder(p.grid, cfg.train);
  const std::size_t k = cfg.train.kernel;
  p.base_train = prepare_samples(enc, s.base_train, k);
  p.base_val = prepare_samples(enc, s.base_val, k);
  p.base_test = prepare_samples(enc, s.base_test, k);
  p.novel_proto = prepare_samples(enc, s.novel_proto, k);
  p.novel_test = prepare_samples(enc, s.novel_test, k);
  return p;
}

/// Evaluates a trained state on a prepared split.
inline BaseToNovelRun evaluate_state(const TrainState& state, const PreparedSplit& split, const RunConfig& cfg) {
  BaseToNovelRun run;
  run.config = cfg;
  run.novel_text = class_prototypes(split.novel_proto, split.num_novel);
  const auto& tc = cfg.train;
  const auto base_f = inference_features(state.params.text, state.bank, state.params.aggregator, tc);
  const auto novel_f = inference_features(run.novel_text, state.bank, state.params.aggregator, tc);
  run.result = make_result(accuracy(split.base_test, base_f, tc.logit_scale),
                           accuracy(split.novel_test, novel_f, tc.logit_scale));
  const std::uint64_t probe_seed = tc.seed ^ 0x9e3779b97f4a7c15ULL;
  run.granule_source_acc = granule_accuracy(state.params, state.bank, split.base_test, tc, true, probe_seed);
  run.granule_factual_acc = granule_accuracy(state.params, state.bank, split.base_test, tc, false, probe_seed);
  run.state = state;
  return run;
}

inline LatentCache load_or_generate(const RunConfig& cfg) {
  if (!cfg.cache.empty()) return read_cache(cfg.cache);
  return generate_dataset(cfg.data, cfg.samples_per_class());
}

/// Trains on the base split of a cache.
inline TrainState train_base(const PreparedSplit& split, const RunConfig& cfg) {
  EpochScore score;
  if (cfg.select_by_val && !split.base_val.empty()) {
    score = [&](const TrainState& st) {
      const auto f = inference_features(st.params.text, st.bank, st.params.aggregator, cfg.train);
      return accuracy(split.base_val, f, cfg.train.logit_scale);
    };
  }
  return fit(std::span<const SampleFeatures>(split.base_train), split.num_base, split.grid, cfg.train, score);
}

inline BaseToNovelRun run_base_to_novel(const RunConfig& cfg, const LatentCache& cache) {
  const auto split = prepare_split(cache, cfg);
  return evaluate_state(train_base(split, cfg), split, cfg);
}

inline BaseToNovelRun run_base_to_novel(const RunConfig& cfg) {
  if (cfg.data.num_classes < 2) throw ProtocolError("base-to-novel evaluation needs at least 2 classes");
  return run_base_to_novel(cfg, load_or_generate(cfg));
}

}  // namespace specpl
