// Generates a small synthetic dataset, trains briefly on the base classes and
// prints base/novel accuracy plus the spectral overlap of the cache.

#include <iomanip>
#include <iostream>

#include "specpl/specpl.hpp"

int main() {
  specpl::RunConfig cfg;
  cfg.train.epochs = 5;
  cfg.test_per_class = 16;

  const auto cache = specpl::generate_dataset(cfg.data, cfg.samples_per_class());
  const auto diag = specpl::diagnose(cache, cfg.diag);
  const auto run = specpl::run_base_to_novel(cfg, cache);

  std::cout << std::fixed << std::setprecision(2);
  std::cout << "spectral overlap  " << diag.overlap << " +/- " << diag.overlap_std << '\n';
  std::cout << "base accuracy     " << run.result.base_acc << '\n';
  std::cout << "novel accuracy    " << run.result.novel_acc << '\n';
  std::cout << "harmonic mean     " << run.result.hm << '\n';
}
