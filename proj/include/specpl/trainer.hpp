#pragma once

// Frozen toy visual encoder, the trainable parameter registry, the batch
// objective with its hand-written backward pass, Adam, the fit loop and the
// finite-difference gradient harness.

#include <cmath>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "specpl/granule_film.hpp"
#include "specpl/nn.hpp"
#include "specpl/objectives.hpp"
#include "specpl/semantic_bank.hpp"
#include "specpl/spectral_proxy.hpp"
#include "specpl/teacher.hpp"
#include "specpl/text_refinement.hpp"

namespace specpl {

/// Fixed random linear map R^{C*h*w} -> R^d followed by l2 normalization.
struct ToyVisualEncoder {
  Mat weights;
  Grid grid;
  std::uint64_t seed = 0;

  static ToyVisualEncoder make(const Grid& grid, std::size_t dim, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(grid.size())));
    ToyVisualEncoder enc{Mat(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(grid.size())),
                         grid, seed};
    for (Eigen::Index i = 0; i < enc.weights.rows(); ++i)
      for (Eigen::Index j = 0; j < enc.weights.cols(); ++j) enc.weights(i, j) = dist(rng);
    return enc;
  }

  std::size_t dim() const { return static_cast<std::size_t>(weights.rows()); }
  bool operator==(const ToyVisualEncoder& o) const {
    return grid == o.grid && seed == o.seed && weights == o.weights;
  }
};

template <typename T>
Vec encode_visual(const ToyVisualEncoder& enc, const BasicLatent<T>& z) {
  if (!(z.grid() == enc.grid)) throw ParameterError("latent shape does not match the encoder");
  Vec flat(static_cast<Eigen::Index>(z.size()));
  auto values = z.values();
  for (std::size_t n = 0; n < values.size(); ++n) flat(Eigen::Index(n)) = double(values[n]);
  return l2_normalize(enc.weights * flat);
}

struct TrainConfig {
  std::size_t embed_dim = 32;
  std::size_t kernel = 7;
  LossWeights weights;
  std::size_t bank_size = 64;
  double tau = 0.07;
  double momentum = 0.1;
  double eta = 1.0;
  double logit_scale = 100.0;
  std::size_t epochs = 20;
  std::size_t batch_size = 16;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  bool use_bank = true;
  bool use_sem = true;
  bool use_gf = true;
  bool use_gcf = true;
  SharedAnchorPolicy anchor = SharedAnchorPolicy::raw_text_by_label;
  bool refresh = false;
  double refresh_fraction = 0.25;
  double text_init_noise = 0.01;
};

/// Everything the optimizer may touch.
struct ModelParams {
  Mat text;  // raw class rows for the trained classes
  ProjectionHead proj_low;
  ProjectionHead proj_high;
  Aggregator aggregator;
  FusionNet fusion;
  FiLMNet film;

  template <typename F>
  void visit(F&& f) {
    f(std::string("text"), text);
    proj_low.mlp.visit("proj_low", f);
    proj_high.mlp.visit("proj_high", f);
    aggregator.visit("aggregator", f);
    fusion.visit("fusion", f);
    film.visit("film", f);
  }
  template <typename F>
  void visit(F&& f) const {
    f(std::string("text"), text);
    proj_low.mlp.visit("proj_low", f);
    proj_high.mlp.visit("proj_high", f);
    aggregator.visit("aggregator", f);
    fusion.visit("fusion", f);
    film.visit("film", f);
  }

  static ModelParams zeros_like(const ModelParams& p) {
    return ModelParams{Mat::Zero(p.text.rows(), p.text.cols()),
                       ProjectionHead{Mlp::zeros_like(p.proj_low.mlp), Band::low},
                       ProjectionHead{Mlp::zeros_like(p.proj_high.mlp), Band::high},
                       Aggregator::zeros_like(p.aggregator),
                       FusionNet::zeros_like(p.fusion),
                       FiLMNet::zeros_like(p.film)};
  }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    visit([&](const std::string&, const auto& t) { n += static_cast<std::size_t>(t.size()); });
    return n;
  }

  bool operator==(const ModelParams& o) const {
    bool same = true;
    std::vector<const double*> mine;
    std::vector<std::size_t> sizes;
    visit([&](const std::string&, const auto& t) {
      mine.push_back(t.data());
      sizes.push_back(static_cast<std::size_t>(t.size()));
    });
    std::size_t i = 0;
    o.visit([&](const std::string&, const auto& t) {
      if (i >= mine.size() || sizes[i] != static_cast<std::size_t>(t.size()) ||
          !std::equal(mine[i], mine[i] + sizes[i], t.data())) {
        same = false;
      }
      ++i;
    });
    return same && i == mine.size();
  }
};

/// Flat view of one named parameter tensor.
struct TensorRef {
  std::string name;
  double* data = nullptr;
  std::size_t size = 0;
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;
};

inline std::vector<TensorRef> tensor_refs(ModelParams& p) {
  std::vector<TensorRef> refs;
  p.visit([&](const std::string& name, auto& t) {
    refs.push_back(TensorRef{name, t.data(), static_cast<std::size_t>(t.size()), t.rows(), t.cols()});
  });
  return refs;
}

/// Adam (beta1 0.9, beta2 0.999, eps 1e-8), no weight decay.
struct AdamState {
  ModelParams first;
  ModelParams second;
  std::size_t steps = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  static AdamState for_params(const ModelParams& p) {
    return AdamState{ModelParams::zeros_like(p), ModelParams::zeros_like(p)};
  }

  void apply(ModelParams& params, ModelParams& grad, double learning_rate) {
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, double(steps));
    const double c2 = 1.0 - std::pow(beta2, double(steps));
    auto p = tensor_refs(params);
    auto g = tensor_refs(grad);
    auto m = tensor_refs(first);
    auto v = tensor_refs(second);
    for (std::size_t t = 0; t < p.size(); ++t) {
      for (std::size_t n = 0; n < p[t].size; ++n) {
        const double gn = g[t].data[n];
        m[t].data[n] = beta1 * m[t].data[n] + (1.0 - beta1) * gn;
        v[t].data[n] = beta2 * v[t].data[n] + (1.0 - beta2) * gn * gn;
        const double mhat = m[t].data[n] / c1;
        const double vhat = v[t].data[n] / c2;
        p[t].data[n] -= learning_rate * mhat / (std::sqrt(vhat) + eps);
      }
    }
  }
};

/// Per-sample quantities that do not depend on trainable parameters. Band
/// statistics come from detached latents.
struct SampleFeatures {
  Vec image;       // frozen image embedding v
  Vec stats_low;   // phi(base)
  Vec stats_high;  // phi(detail)
  std::size_t label = 0;
};

template <typename T>
SampleFeatures prepare_sample(const ToyVisualEncoder& enc, const BasicLatent<T>& z, std::size_t label,
                              std::size_t kernel) {
  const auto zd = z.template cast<double>();
  const auto bands = factorize(zd, kernel);
  return SampleFeatures{encode_visual(enc, zd), band_stats(bands.base), band_stats(bands.detail), label};
}

inline std::vector<SampleFeatures> prepare_samples(const ToyVisualEncoder& enc,
                                                   std::span<const LatentRecord> records,
                                                   std::size_t kernel) {
  std::vector<SampleFeatures> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back(prepare_sample(enc, r.latent, r.class_label, kernel));
  return out;
}

struct ObjectiveResult {
  LossBreakdown parts;
  Mat pseudo_labels;          // rows: samples (empty when use_sem is off)
  std::vector<Vec> t_low;     // per-sample low-band embeddings
};

/// Refined rows for the current parameters (raw rows when the bank is off).
inline Mat class_rows(const ModelParams& p, const SemanticBank& bank, const TrainConfig& cfg,
                      RefineAllTrace* trace = nullptr) {
  if (!cfg.use_bank) return p.text;
  TextFeatureSet f{p.text, {}, {}, cfg.eta};
  return refine_all(std::move(f), bank, p.aggregator, trace).refined;
}

namespace detail {

inline void check_term(const char* term, double value) {
  if (!std::isfinite(value)) throw DivergenceError(term, "loss became non-finite");
}

}  // namespace detail

/// Batch objective. When grad is given, accumulates d total / d params into it.
/// frozen_pseudo replaces the recomputed pseudo-labels (used by the
/// finite-difference harness to honour the stop-gradient).
inline ObjectiveResult evaluate_objective(const ModelParams& p, const SemanticBank& bank,
                                          std::span<const SampleFeatures> batch,
                                          std::span<const std::size_t> perm, const TrainConfig& cfg,
                                          ModelParams* grad = nullptr,
                                          const Mat* frozen_pseudo = nullptr) {
  const std::size_t n = batch.size();
  if (n == 0) throw ParameterError("empty batch");
  const bool granules = cfg.use_gf || cfg.use_gcf;
  if (cfg.use_gcf) require_permutation(perm, n);
  const double inv_n = 1.0 / double(n);
  const double s = cfg.logit_scale;

  ObjectiveResult res;
  res.parts.weights = cfg.weights;
  res.parts.logit_scale = s;

  RefineAllTrace refine_trace;
  const Mat refined = class_rows(p, bank, cfg, &refine_trace);

  Mat g_refined = Mat::Zero(refined.rows(), refined.cols());
  Mat g_text = Mat::Zero(p.text.rows(), p.text.cols());

  // Band embeddings.
  std::vector<BandEmbedding> low(n), high(n);
  std::vector<ProjectionTrace> low_tr(n), high_tr(n);
  std::vector<Vec> g_low(n), g_high(n);
  for (std::size_t i = 0; i < n; ++i) {
    low[i] = project_band(p.proj_low, batch[i].stats_low, &low_tr[i]);
    g_low[i] = Vec::Zero(low[i].vector.size());
    if (granules) {
      high[i] = project_band(p.proj_high, batch[i].stats_high, &high_tr[i]);
      g_high[i] = Vec::Zero(high[i].vector.size());
    }
    res.t_low.push_back(low[i].vector);
  }

  // Main classification loss.
  double cls = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto ce = loss_cls(batch[i].image, refined, batch[i].label, s);
    cls += ce.loss;
    if (grad) g_refined += inv_n * ce.grad_rows;
  }
  res.parts.cls = cls * inv_n;
  detail::check_term("cls", res.parts.cls);

  // Semantic alignment with stop-gradient pseudo-labels.
  if (cfg.use_sem) {
    res.pseudo_labels.resize(Eigen::Index(n), refined.rows());
    double sem = 0.0;
    const double w = cfg.weights.sem * inv_n;
    for (std::size_t i = 0; i < n; ++i) {
      const auto row = Eigen::Index(i);
      if (frozen_pseudo) {
        res.pseudo_labels.row(row) = frozen_pseudo->row(row);
      } else {
        res.pseudo_labels.row(row) = pseudo_labels(batch[i].image, refined, s).transpose();
      }
      const auto sa = loss_sem(res.pseudo_labels.row(row).transpose(), p.text, low[i].vector);
      sem += sa.loss;
      if (grad) {
        g_text += w * sa.grad_raw;
        g_low[i] += w * sa.grad_low;
      }
    }
    res.parts.sem = sem * inv_n;
    detail::check_term("sem", *res.parts.sem);
  }

  // Granule branch.
  if (granules) {
    auto anchor = [&](std::size_t i) -> Vec {
      switch (cfg.anchor) {
        case SharedAnchorPolicy::raw_text_by_label: return p.text.row(Eigen::Index(batch[i].label)).transpose();
        case SharedAnchorPolicy::refined_text_by_label: return refined.row(Eigen::Index(batch[i].label)).transpose();
        case SharedAnchorPolicy::image_embedding: return batch[i].image;
      }
      return {};
    };
    auto route_anchor = [&](std::size_t i, const Vec& g) {
      const auto y = Eigen::Index(batch[i].label);
      switch (cfg.anchor) {
        case SharedAnchorPolicy::raw_text_by_label: g_text.row(y) += g.transpose(); break;
        case SharedAnchorPolicy::refined_text_by_label: g_refined.row(y) += g.transpose(); break;
        case SharedAnchorPolicy::image_embedding: break;
      }
    };

    // One modulated prediction: anchor of sample i, granule of sample src, target label of src.
    auto granule_term = [&](std::size_t i, std::size_t src, double weight) {
      FuseTrace ft;
      const Vec shared = anchor(i);
      const Vec c = fuse(shared, high[src], p.fusion, &ft);
      FiLMTrace lt;
      const Vec vg = film_modulate(c, batch[i].image, p.film, &lt);
      const auto ce = scaled_cross_entropy(vg, p.text, batch[src].label, s);
      if (grad) {
        g_text += weight * ce.grad_rows;
        const Vec g_c = film_backward(p.film, lt, vg, weight * ce.grad_query, grad->film);
        const FuseGrad fg = fuse_backward(p.fusion, ft, g_c, grad->fusion);
        route_anchor(i, fg.shared);
        g_high[src] += fg.granule;
      }
      return ce.loss;
    };

    if (cfg.use_gf) {
      double f = 0.0;
      for (std::size_t i = 0; i < n; ++i) f += granule_term(i, i, cfg.weights.granule_f * inv_n);
      res.parts.granule_f = f * inv_n;
      detail::check_term("granule_f", *res.parts.granule_f);
    }
    if (cfg.use_gcf) {
      double f = 0.0;
      for (std::size_t i = 0; i < n; ++i) f += granule_term(i, perm[i], cfg.weights.granule_cf * inv_n);
      res.parts.granule_cf = f * inv_n;
      detail::check_term("granule_cf", *res.parts.granule_cf);
    }
  }

  res.parts.total = total_loss(res.parts);
  detail::check_term("total", res.parts.total);

  if (grad) {
    for (std::size_t i = 0; i < n; ++i) {
      if (cfg.use_sem) project_band_backward(p.proj_low, low_tr[i], low[i], g_low[i], grad->proj_low.mlp);
      if (granules) project_band_backward(p.proj_high, high_tr[i], high[i], g_high[i], grad->proj_high.mlp);
    }
    if (cfg.use_bank) {
      g_text += refine_all_backward(bank, p.aggregator, refine_trace, g_refined, grad->aggregator);
    } else {
      g_text += g_refined;
    }
    grad->text += g_text;
  }
  return res;
}

struct TrainState {
  ModelParams params;
  SemanticBank bank;
  ToyVisualEncoder encoder;
  AdamState adam;
  std::size_t step = 0;
  std::vector<LossBreakdown> history;        // one entry per optimizer step
  std::vector<LossBreakdown> epoch_history;  // batch-mean per epoch
  std::mt19937_64 rng;
};

/// Fresh parameters. Text rows start at per-class mean image embeddings plus noise.
inline TrainState init_state(std::span<const SampleFeatures> samples, std::size_t num_classes,
                             const Grid& grid, const TrainConfig& cfg, ToyVisualEncoder encoder) {
  const std::size_t d = cfg.embed_dim;
  TrainState st;
  st.rng.seed(cfg.seed);
  st.encoder = std::move(encoder);

  Mat text = Mat::Zero(Eigen::Index(num_classes), Eigen::Index(d));
  std::vector<double> counts(num_classes, 0.0);
  for (const auto& s : samples) {
    text.row(Eigen::Index(s.label)) += s.image.transpose();
    counts[s.label] += 1.0;
  }
  std::normal_distribution<double> noise(0.0, cfg.text_init_noise);
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (counts[c] > 0.0) text.row(Eigen::Index(c)) /= counts[c];
    for (Eigen::Index j = 0; j < text.cols(); ++j) text(Eigen::Index(c), j) += noise(st.rng);
  }

  st.params.text = std::move(text);
  st.params.proj_low = ProjectionHead::init(grid.channels, d, Band::low, st.rng);
  st.params.proj_high = ProjectionHead::init(grid.channels, d, Band::high, st.rng);
  st.params.aggregator = Aggregator::init(d, st.rng, 1.0 / std::sqrt(double(d)));
  st.params.fusion = FusionNet::init(d, st.rng);
  st.params.film = FiLMNet::init(d, st.rng);
  st.adam = AdamState::for_params(st.params);
  st.bank = SemanticBank(cfg.bank_size, d, cfg.momentum, cfg.tau);
  return st;
}

/// One optimizer update on a prepared batch. Bank entries are read-only here.
inline LossBreakdown train_step(TrainState& st, std::span<const SampleFeatures> batch,
                                const TrainConfig& cfg) {
  if (cfg.use_bank && !st.bank.full()) throw StateError("train_step needs a full bank when use_bank is set");
  const auto perm = random_permutation(batch.size(), st.rng);
  ModelParams grad = ModelParams::zeros_like(st.params);
  const auto res = evaluate_objective(st.params, st.bank, batch, perm, cfg, &grad);
  st.adam.apply(st.params, grad, cfg.learning_rate);
  ++st.step;
  st.history.push_back(res.parts);
  return res.parts;
}

/// train_step on raw latent records.
inline LossBreakdown train_step(TrainState& st, std::span<const LatentRecord> batch,
                                const TrainConfig& cfg) {
  const auto features = prepare_samples(st.encoder, batch, cfg.kernel);
  return train_step(st, std::span<const SampleFeatures>(features), cfg);
}

/// Class-stratified epoch order: per-class shuffles interleaved round-robin.
inline std::vector<std::size_t> stratified_order(std::span<const SampleFeatures> samples,
                                                 std::mt19937_64& rng) {
  std::size_t classes = 0;
  for (const auto& s : samples) classes = std::max(classes, s.label + 1);
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < samples.size(); ++i) by_class[samples[i].label].push_back(i);
  for (auto& v : by_class) std::shuffle(v.begin(), v.end(), rng);
  std::vector<std::size_t> order;
  order.reserve(samples.size());
  for (std::size_t round = 0; order.size() < samples.size(); ++round) {
    for (const auto& v : by_class) {
      if (round < v.size()) order.push_back(v[round]);
    }
  }
  return order;
}

inline std::vector<SampleFeatures> gather(std::span<const SampleFeatures> samples,
                                          std::span<const std::size_t> idx) {
  std::vector<SampleFeatures> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(samples[i]);
  return out;
}

/// Feeds the first ceil(M / batch_size) batches to the bank (no optimizer step).
inline void fill_bank(TrainState& st, std::span<const SampleFeatures> samples, const TrainConfig& cfg) {
  const std::size_t bs = std::max<std::size_t>(1, cfg.batch_size);
  const std::size_t batches = (cfg.bank_size + bs - 1) / bs;
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  for (std::size_t b = 0; b < batches; ++b) {
    for (std::size_t i = 0; i < bs; ++i) {
      if (cursor == order.size()) {
        order = stratified_order(samples, st.rng);
        cursor = 0;
      }
      const auto& s = samples[order[cursor++]];
      st.bank.absorb(project_band(st.params.proj_low, s.stats_low));
    }
  }
}

/// Re-absorbs t_low from a uniform subsample of the training set.
inline void refresh_bank(TrainState& st, std::span<const SampleFeatures> samples, const TrainConfig& cfg) {
  std::vector<std::size_t> idx(samples.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  std::shuffle(idx.begin(), idx.end(), st.rng);
  const auto keep = static_cast<std::size_t>(std::ceil(cfg.refresh_fraction * double(samples.size())));
  idx.resize(std::min(keep, idx.size()));
  std::vector<BandEmbedding> stream;
  stream.reserve(idx.size());
  for (std::size_t i : idx) stream.push_back(project_band(st.params.proj_low, samples[i].stats_low));
  st.bank.refresh(stream);
}

inline LossBreakdown mean_breakdown(std::span<const LossBreakdown> steps) {
  LossBreakdown m;
  if (steps.empty()) return m;
  m.weights = steps.front().weights;
  m.logit_scale = steps.front().logit_scale;
  const double inv = 1.0 / double(steps.size());
  auto avg = [&](auto member) -> std::optional<double> {
    if (!(steps.front().*member)) return std::nullopt;
    double acc = 0.0;
    for (const auto& s : steps) acc += (s.*member).value_or(0.0);
    return acc * inv;
  };
  for (const auto& s : steps) m.cls += s.cls;
  m.cls *= inv;
  m.sem = avg(&LossBreakdown::sem);
  m.granule_f = avg(&LossBreakdown::granule_f);
  m.granule_cf = avg(&LossBreakdown::granule_cf);
  m.total = total_loss(m);
  return m;
}

/// Optional per-epoch score used for checkpoint selection (higher is better).
using EpochScore = std::function<double(const TrainState&)>;

/// Trains on prepared samples. Deterministic given cfg.seed.
inline TrainState fit(std::span<const SampleFeatures> samples, std::size_t num_classes, const Grid& grid,
                      const TrainConfig& cfg, const EpochScore& score = {}) {
  if (samples.empty()) throw ParameterError("fit needs at least one sample");
  if (cfg.batch_size == 0) throw ParameterError("batch_size must be positive");
  TrainState st = init_state(samples, num_classes, grid, cfg,
                             ToyVisualEncoder::make(grid, cfg.embed_dim, cfg.seed));
  if (cfg.use_bank) fill_bank(st, samples, cfg);

  std::optional<TrainState> best;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto order = stratified_order(samples, st.rng);
    const std::size_t first = st.history.size();
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const auto batch = gather(samples, std::span<const std::size_t>(order).subspan(start, end - start));
      train_step(st, std::span<const SampleFeatures>(batch), cfg);
    }
    st.epoch_history.push_back(
        mean_breakdown(std::span<const LossBreakdown>(st.history).subspan(first)));
    if (cfg.refresh && cfg.use_bank) refresh_bank(st, samples, cfg);
    if (score) {
      const double sc = score(st);
      if (sc > best_score) {
        best_score = sc;
        best = st;
      }
    }
  }
  if (best) {
    // Keep the full history of the run; only the parameters roll back.
    best->history = st.history;
    best->epoch_history = st.epoch_history;
    return *std::move(best);
  }
  return st;
}

/// The encoder fit() builds for a given grid and config.
inline ToyVisualEncoder make_encoder(const Grid& grid, const TrainConfig& cfg) {
  return ToyVisualEncoder::make(grid, cfg.embed_dim, cfg.seed);
}

/// Trains on cache records: prepares features with the config's encoder.
inline TrainState fit(const LatentCache& cache, const TrainConfig& cfg, const EpochScore& score = {}) {
  if (cache.empty()) throw ParameterError("fit needs a non-empty cache");
  const Grid grid = cache.records.front().latent.grid();
  std::size_t classes = 0;
  for (const auto& r : cache.records) classes = std::max<std::size_t>(classes, r.class_label + 1);
  const auto samples = prepare_samples(make_encoder(grid, cfg), cache.records, cfg.kernel);
  return fit(std::span<const SampleFeatures>(samples), classes, grid, cfg, score);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient harness.

struct GradientEntry {
  std::string name;
  std::size_t index = 0;  // worst scalar within the tensor
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_error = 0.0;
};

/// Frozen quantity probed by perturbation: its analytic gradient is zero by
/// construction while the loss still depends on it numerically.
struct ExcludedEntry {
  std::string name;
  double analytic_max_abs = 0.0;
  double numeric_max_abs = 0.0;
};

struct GradientReport {
  std::vector<GradientEntry> parameters;  // worst scalar per tensor
  std::vector<ExcludedEntry> excluded;
  GradientEntry worst;
  std::size_t scalars_checked = 0;

  double max_relative_error() const { return worst.rel_error; }
};

/// |a - n| / max(|a|, |n|, floor). Below the floor the comparison is absolute,
/// which covers gradients that vanish exactly (e.g. shift-invariant biases).
inline double relative_error(double analytic, double numeric, double floor = 1e-5) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Central finite differences of the total objective against the analytic
/// gradient for every trainable scalar. The permutation and the pseudo-labels
/// are held fixed across perturbations.
inline GradientReport gradient_check(const TrainState& state, std::span<const LatentRecord> batch,
                                     const TrainConfig& cfg, double step = 1e-5) {
  const auto features = prepare_samples(state.encoder, batch, cfg.kernel);
  const std::span<const SampleFeatures> fs(features);
  std::mt19937_64 rng = state.rng;
  const auto perm = random_permutation(batch.size(), rng);

  ModelParams params = state.params;
  ModelParams grad = ModelParams::zeros_like(params);
  const auto base = evaluate_objective(params, state.bank, fs, perm, cfg, &grad);
  const Mat* frozen = cfg.use_sem ? &base.pseudo_labels : nullptr;
  auto loss_at = [&](const ModelParams& p, const SemanticBank& bank) {
    return evaluate_objective(p, bank, fs, perm, cfg, nullptr, frozen).parts.total;
  };

  GradientReport report;
  auto p_refs = tensor_refs(params);
  auto g_refs = tensor_refs(grad);
  for (std::size_t t = 0; t < p_refs.size(); ++t) {
    GradientEntry worst{p_refs[t].name};
    for (std::size_t n = 0; n < p_refs[t].size; ++n) {
      double& x = p_refs[t].data[n];
      const double saved = x;
      x = saved + step;
      const double up = loss_at(params, state.bank);
      x = saved - step;
      const double down = loss_at(params, state.bank);
      x = saved;
      const double numeric = (up - down) / (2.0 * step);
      const double analytic = g_refs[t].data[n];
      const double err = relative_error(analytic, numeric);
      if (n == 0 || err > worst.rel_error) worst = GradientEntry{p_refs[t].name, n, analytic, numeric, err};
      ++report.scalars_checked;
    }
    if (worst.rel_error >= report.worst.rel_error || report.parameters.empty()) report.worst = worst;
    report.parameters.push_back(worst);
  }

  // Bank entries: perturbed without renormalization to expose the dependence.
  if (cfg.use_bank && state.bank.full()) {
    ExcludedEntry e{"bank.entries"};
    Mat rows = state.bank.entries();
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
      for (Eigen::Index j = 0; j < rows.cols(); ++j) {
        Mat up = rows, down = rows;
        up(i, j) += step;
        down(i, j) -= step;
        const double lu = loss_at(params, SemanticBank::from_raw_entries(up, state.bank.momentum(), state.bank.temperature()));
        const double ld = loss_at(params, SemanticBank::from_raw_entries(down, state.bank.momentum(), state.bank.temperature()));
        e.numeric_max_abs = std::max(e.numeric_max_abs, std::abs(lu - ld) / (2.0 * step));
      }
    }
    report.excluded.push_back(e);
  }

  // Teacher latents: detached, so the analytic gradient is zero.
  {
    ExcludedEntry e{"teacher.latents"};
    std::vector<LatentRecord> perturbed(batch.begin(), batch.end());
    const float fstep = 1e-2f;
    for (std::size_t r = 0; r < perturbed.size(); ++r) {
      auto values = perturbed[r].latent.values();
      const std::size_t probes = std::min<std::size_t>(values.size(), 8);
      for (std::size_t n = 0; n < probes; ++n) {
        const float saved = values[n];
        values[n] = saved + fstep;
        const auto fu = prepare_samples(state.encoder, perturbed, cfg.kernel);
        values[n] = saved - fstep;
        const auto fd = prepare_samples(state.encoder, perturbed, cfg.kernel);
        values[n] = saved;
        const double lu = evaluate_objective(params, state.bank, fu, perm, cfg, nullptr, frozen).parts.total;
        const double ld = evaluate_objective(params, state.bank, fd, perm, cfg, nullptr, frozen).parts.total;
        e.numeric_max_abs = std::max(e.numeric_max_abs, std::abs(lu - ld) / (2.0 * double(fstep)));
      }
    }
    report.excluded.push_back(e);
  }
  return report;
}

/// Small random problem for the gradient harness: every parameter (including
/// the zero-initialized FiLM/fusion output layers) is randomized and the bank
/// holds random unit vectors.
struct GradientProblem {
  TrainState state;
  std::vector<LatentRecord> batch;
  TrainConfig config;
};

inline GradientProblem make_gradient_problem(TrainConfig cfg, std::size_t classes, std::size_t batch_size,
                                             std::uint64_t seed, Grid grid = Grid{4, 8, 8}) {
  if (classes == 0 || batch_size == 0) throw ParameterError("gradient problem needs classes and samples");
  SyntheticSpec spec;
  spec.num_classes = classes;
  spec.grid = grid;
  spec.seed = seed;
  const auto cache = generate_dataset(spec, (batch_size + classes - 1) / classes);
  GradientProblem gp;
  gp.config = cfg;
  // Round-robin over classes so small batches still mix labels.
  const std::size_t per_class = cache.size() / classes;
  for (std::size_t i = 0; gp.batch.size() < batch_size; ++i) {
    gp.batch.push_back(cache.records[(i % classes) * per_class + i / classes]);
  }
  const auto enc = make_encoder(grid, cfg);
  const auto features = prepare_samples(enc, gp.batch, cfg.kernel);
  gp.state = init_state(features, classes, grid, cfg, enc);

  std::mt19937_64 rng(seed ^ 0xa5a5a5a5ULL);
  std::uniform_real_distribution<double> jitter(-0.5, 0.5);
  gp.state.params.visit([&](const std::string& name, auto& t) {
    if (name == "text") return;
    for (Eigen::Index n = 0; n < t.size(); ++n) t.data()[n] += jitter(rng);
  });
  Mat rows(Eigen::Index(cfg.bank_size), Eigen::Index(cfg.embed_dim));
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index i = 0; i < rows.rows(); ++i)
    for (Eigen::Index j = 0; j < rows.cols(); ++j) rows(i, j) = normal(rng);
  gp.state.bank = SemanticBank::from_entries(rows, cfg.momentum, cfg.tau);
  return gp;
}

}  // namespace specpl
