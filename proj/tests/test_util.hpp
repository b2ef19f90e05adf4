#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "multistyle/corpus.hpp"
#include "multistyle/experiment.hpp"
#include "multistyle/math.hpp"

namespace mstest {

using namespace multistyle;

inline CorpusSpec two_axis_spec(int n = 1000, std::uint64_t seed = 3) {
  CorpusSpec s;
  s.axes = build_axes({sentiment_axis(), formality_axis()}, s.vocab_size);
  s.num_sequences = n;
  s.seed = seed;
  return s;
}

inline Vector random_vector(std::mt19937_64& rng, std::size_t n, double scale = 2.0) {
  std::normal_distribution<double> g(0.0, scale);
  Vector v(n);
  for (double& x : v) x = g(rng);
  return v;
}

// max |a-b| / max(1, |b|)
inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1.0, std::abs(b)); }

template <typename F>
double central_diff(F&& f, Vector& x, std::size_t i, double h) {
  const double saved = x[i];
  x[i] = saved + h;
  const double up = f(x);
  x[i] = saved - h;
  const double down = f(x);
  x[i] = saved;
  return (up - down) / (2 * h);
}

}  // namespace mstest
