#pragma once

// Frozen dictionary of unit-norm low-band prototypes. Entries are written only
// by absorb/refresh (sequential fill, then nearest-neighbour EMA) and are
// never part of the trainable parameter set.

#include <iomanip>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>

#include "specpl/nn.hpp"
#include "specpl/spectral_proxy.hpp"

namespace specpl {

class SemanticBank {
 public:
  enum class Mode { filling, ema };

  SemanticBank() = default;

  SemanticBank(std::size_t capacity, std::size_t dim, double momentum = 0.1,
               double temperature = 0.07)
      : entries_(Mat::Zero(static_cast<Eigen::Index>(capacity), static_cast<Eigen::Index>(dim))),
        momentum_(momentum),
        temperature_(temperature) {
    if (capacity == 0 || dim == 0) throw ParameterError("bank capacity and width must be positive");
    if (!(momentum > 0.0 && momentum < 1.0)) throw ParameterError("bank momentum must lie in (0, 1)");
    if (!(temperature > 0.0)) throw ParameterError("bank temperature must be positive");
  }

  /// Builds a full bank from explicit rows (each normalized on entry).
  static SemanticBank from_entries(const Mat& rows, double momentum = 0.1,
                                   double temperature = 0.07) {
    SemanticBank bank(static_cast<std::size_t>(rows.rows()), static_cast<std::size_t>(rows.cols()),
                      momentum, temperature);
    for (Eigen::Index m = 0; m < rows.rows(); ++m) {
      bank.absorb(l2_normalize(Vec(rows.row(m).transpose())));
    }
    return bank;
  }

  /// Full bank holding rows verbatim, without normalization.
  static SemanticBank from_raw_entries(const Mat& rows, double momentum = 0.1,
                                       double temperature = 0.07) {
    SemanticBank bank(static_cast<std::size_t>(rows.rows()), static_cast<std::size_t>(rows.cols()),
                      momentum, temperature);
    bank.entries_ = rows;
    bank.fill_count_ = bank.capacity();
    return bank;
  }

  std::size_t capacity() const { return static_cast<std::size_t>(entries_.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(entries_.cols()); }
  std::size_t fill_count() const { return fill_count_; }
  Mode mode() const { return fill_count_ < capacity() ? Mode::filling : Mode::ema; }
  bool full() const { return mode() == Mode::ema; }
  double momentum() const { return momentum_; }
  double temperature() const { return temperature_; }

  /// Filled rows only.
  auto entries() const { return entries_.topRows(static_cast<Eigen::Index>(fill_count_)); }
  Vec entry(std::size_t m) const { return entries_.row(static_cast<Eigen::Index>(m)).transpose(); }

  /// Index of the most similar filled entry; ties resolve to the lowest index.
  std::size_t nearest(const Vec& v) const {
    if (fill_count_ == 0) throw StateError("nearest-neighbour query on an empty bank");
    std::size_t best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (std::size_t m = 0; m < fill_count_; ++m) {
      const double sim = entries_.row(static_cast<Eigen::Index>(m)).dot(v);
      if (sim > best_sim) {
        best_sim = sim;
        best = m;
      }
    }
    return best;
  }

  /// Sequential fill while slots remain, otherwise EMA update of the nearest
  /// entry followed by renormalization. Returns the slot written. Inputs are
  /// expected to be unit-norm already.
  std::size_t absorb(const Vec& t_low) {
    if (static_cast<std::size_t>(t_low.size()) != dim()) throw ParameterError("bank input width mismatch");
    if (!t_low.allFinite()) throw NumericalError("non-finite bank input");
    if (fill_count_ < capacity()) {
      const std::size_t slot = fill_count_++;
      entries_.row(static_cast<Eigen::Index>(slot)) = t_low.transpose();
      return slot;
    }
    const std::size_t slot = nearest(t_low);
    const auto row = static_cast<Eigen::Index>(slot);
    Vec updated = (1.0 - momentum_) * entries_.row(row).transpose() + momentum_ * t_low;
    entries_.row(row) = l2_normalize(updated).transpose();
    return slot;
  }

  std::size_t absorb(const BandEmbedding& t_low) { return absorb(t_low.vector); }

  void refresh(std::span<const BandEmbedding> stream) {
    if (!full()) throw StateError("refresh requires a full bank");
    for (const auto& e : stream) absorb(e.vector);
  }

  bool operator==(const SemanticBank& o) const {
    return entries_ == o.entries_ && fill_count_ == o.fill_count_ && momentum_ == o.momentum_ &&
           temperature_ == o.temperature_;
  }

  /// Header "M d mu tau", then one line of d values per filled entry.
  void dump(std::ostream& out) const {
    std::ostringstream s;
    s << std::setprecision(17);
    s << capacity() << ' ' << dim() << ' ' << momentum_ << ' ' << temperature_ << '\n';
    for (std::size_t m = 0; m < fill_count_; ++m) {
      for (std::size_t j = 0; j < dim(); ++j) {
        if (j) s << ' ';
        s << entries_(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(j));
      }
      s << '\n';
    }
    out << s.str();
  }

  /// Inverse of dump. Reads the header line and `rows` entry lines (M by
  /// default; fewer for a bank that was still filling).
  static SemanticBank load(std::istream& in, std::optional<std::size_t> rows = std::nullopt) {
    std::string line;
    if (!std::getline(in, line)) throw FormatError("missing bank header");
    std::istringstream header(line);
    std::size_t capacity = 0, dim = 0;
    double mu = 0.0, tau = 0.0;
    if (!(header >> capacity >> dim >> mu >> tau)) throw FormatError("malformed bank header: " + line);
    SemanticBank bank(capacity, dim, mu, tau);
    const std::size_t count = rows.value_or(capacity);
    if (count > capacity) throw FormatError("bank row count exceeds its capacity");
    for (std::size_t m = 0; m < count; ++m) {
      if (!std::getline(in, line)) throw FormatError("bank has fewer entries than declared");
      std::istringstream row(line);
      for (std::size_t j = 0; j < dim; ++j) {
        double v = 0.0;
        if (!(row >> v)) throw FormatError("malformed bank entry " + std::to_string(m));
        bank.entries_(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(j)) = v;
      }
    }
    bank.fill_count_ = count;
    return bank;
  }

 private:
  Mat entries_;
  std::size_t fill_count_ = 0;
  double momentum_ = 0.1;
  double temperature_ = 0.07;
};

struct RetrievalResult {
  Vec weights;  // softmax attention over entries
  Vec context;  // weighted sum of entries
};

/// alpha = softmax(<t, b_m> / tau), r = sum_m alpha_m b_m.
inline RetrievalResult soft_retrieve(const SemanticBank& bank, const Vec& t) {
  if (!bank.full()) throw StateError("retrieval from an unfilled bank");
  if (static_cast<std::size_t>(t.size()) != bank.dim()) throw ParameterError("query width mismatch");
  if (!t.allFinite()) throw NumericalError("non-finite retrieval query");
  const Mat& b = bank.entries();
  RetrievalResult r;
  r.weights = softmax(b * t / bank.temperature());
  r.context = b.transpose() * r.weights;
  return r;
}

/// d loss / d t from d loss / d context. Bank entries are constants.
inline Vec soft_retrieve_backward(const SemanticBank& bank, const RetrievalResult& r,
                                  const Vec& grad_context) {
  const Mat& b = bank.entries();
  const Vec g_alpha = b * grad_context;
  const Vec g_scores = r.weights.cwiseProduct(g_alpha.array().matrix() -
                                              Vec::Constant(g_alpha.size(), r.weights.dot(g_alpha)));
  return b.transpose() * g_scores / bank.temperature();
}

}  // namespace specpl
