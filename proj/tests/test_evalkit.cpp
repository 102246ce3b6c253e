#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "celldiff/evalkit.hpp"
#include "celldiff/rng.hpp"

using namespace celldiff;

namespace {

Extractor quick_extractor(const Dataset& train, const Dataset& held,
                          double* acc = nullptr) {
  ExtractorConfig cfg;
  cfg.image_size = train.images.at(0).height;
  cfg.num_classes = train.num_classes;
  cfg.epochs = 10;
  return train_feature_extractor(train, held, cfg, acc);
}

FeatureStats stats_of(const std::vector<std::vector<double>>& rows) {
  // direct construction for the frechet unit tests
  FeatureStats st;
  st.dim = static_cast<int>(rows[0].size());
  st.n = static_cast<long>(rows.size());
  st.mu.assign(static_cast<std::size_t>(st.dim), 0.0);
  st.sigma.assign(static_cast<std::size_t>(st.dim) * st.dim, 0.0);
  for (const auto& r : rows)
    for (int i = 0; i < st.dim; ++i) st.mu[static_cast<std::size_t>(i)] += r[static_cast<std::size_t>(i)];
  for (auto& v : st.mu) v /= static_cast<double>(st.n);
  for (const auto& r : rows)
    for (int i = 0; i < st.dim; ++i)
      for (int j = 0; j < st.dim; ++j)
        st.sigma[static_cast<std::size_t>(i) * st.dim + j] +=
            (r[static_cast<std::size_t>(i)] - st.mu[static_cast<std::size_t>(i)]) *
            (r[static_cast<std::size_t>(j)] - st.mu[static_cast<std::size_t>(j)]) /
            static_cast<double>(st.n - 1);
  return st;
}

}  // namespace

TEST_CASE("feature stats: identical images give a zero covariance") {
  Dataset toy = make_toy_dataset("bars", 40, 8, 3);
  Dataset held = make_toy_dataset("bars", 16, 8, 4);
  Extractor ex = quick_extractor(toy, held);
  std::vector<Grid> same(6, toy.images[0]);
  FeatureStats st = feature_stats(same, ex);
  for (double v : st.sigma) CHECK(std::fabs(v) < 1e-18);
}

TEST_CASE("feature stats: duplicating the set keeps mu, rescales sigma by 2(n-1)/(2n-1)") {
  Dataset toy = make_toy_dataset("blobs", 40, 8, 5);
  Dataset held = make_toy_dataset("blobs", 16, 8, 6);
  Extractor ex = quick_extractor(toy, held);
  std::vector<Grid> base(toy.images.begin(), toy.images.begin() + 9);
  std::vector<Grid> doubled = base;
  doubled.insert(doubled.end(), base.begin(), base.end());
  FeatureStats a = feature_stats(base, ex);
  FeatureStats b = feature_stats(doubled, ex);
  const double n = static_cast<double>(a.n);
  const double factor = 2.0 * (n - 1.0) / (2.0 * n - 1.0);
  for (int i = 0; i < a.dim; ++i)
    CHECK(a.mu[static_cast<std::size_t>(i)] ==
          doctest::Approx(b.mu[static_cast<std::size_t>(i)]).epsilon(1e-10));
  for (std::size_t i = 0; i < a.sigma.size(); ++i)
    CHECK(b.sigma[i] == doctest::Approx(a.sigma[i] * factor).epsilon(1e-8));
}

TEST_CASE("feature stats match a two-pass oracle") {
  Dataset toy = make_toy_dataset("bars", 40, 8, 7);
  Dataset held = make_toy_dataset("bars", 16, 8, 8);
  Extractor ex = quick_extractor(toy, held);
  std::vector<Grid> set(toy.images.begin(), toy.images.begin() + 12);
  FeatureStats st = feature_stats(set, ex);
  std::vector<std::vector<double>> rows;
  for (const auto& g : set) rows.push_back(ex.features(g));
  FeatureStats ref = stats_of(rows);
  for (std::size_t i = 0; i < st.mu.size(); ++i)
    CHECK(std::fabs(st.mu[i] - ref.mu[i]) < 1e-10);
  for (std::size_t i = 0; i < st.sigma.size(); ++i)
    CHECK(std::fabs(st.sigma[i] - ref.sigma[i]) < 1e-10);
  CHECK_THROWS_AS(feature_stats({toy.images[0]}, ex), std::invalid_argument);
}

TEST_CASE("frechet distance: identity, mean offsets, commuting diagonals") {
  Rng rng(11);
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 40; ++i) {
    std::vector<double> r(5);
    rng.fill_normal(r.data(), r.size());
    rows.push_back(std::move(r));
  }
  FeatureStats a = stats_of(rows);
  CHECK(frechet_distance(a, a) < 1e-8);

  // identical identity covariances, shifted means: distance is |d|^2 exactly
  FeatureStats i1, i2;
  i1.dim = i2.dim = 3;
  i1.n = i2.n = 100;
  i1.mu = {0.0, 0.0, 0.0};
  i2.mu = {1.0, -2.0, 0.5};
  i1.sigma = {1, 0, 0, 0, 1, 0, 0, 0, 1};
  i2.sigma = i1.sigma;
  CHECK(frechet_distance(i1, i2) == doctest::Approx(5.25).epsilon(1e-12));

  // commuting diagonal covariances: |dmu|^2 + sum (sqrt(sa)-sqrt(sb))^2
  FeatureStats d1 = i1, d2 = i2;
  d1.sigma = {4, 0, 0, 0, 9, 0, 0, 0, 1};
  d2.sigma = {1, 0, 0, 0, 25, 0, 0, 0, 1};
  const double expect = 5.25 + (2.0 - 1.0) * (2.0 - 1.0) +
                        (3.0 - 5.0) * (3.0 - 5.0) + 0.0;
  CHECK(frechet_distance(d1, d2) == doctest::Approx(expect).epsilon(1e-10));

  // symmetry and positivity
  CHECK(frechet_distance(d1, d2) ==
        doctest::Approx(frechet_distance(d2, d1)).epsilon(1e-8));
  CHECK(frechet_distance(d1, d2) >= 0.0);

  FeatureStats bad = d1;
  bad.dim = 2;
  CHECK_THROWS_AS(frechet_distance(d1, bad), std::invalid_argument);
}

TEST_CASE("toy extractor reaches 95% held-out accuracy, deterministically") {
  Dataset train = make_toy_dataset("bars", 400, 8, 21);
  Dataset held = make_toy_dataset("bars", 100, 8, 22);
  double acc1 = 0.0, acc2 = 0.0;
  Extractor e1 = quick_extractor(train, held, &acc1);
  Extractor e2 = quick_extractor(train, held, &acc2);
  CHECK(acc1 >= 0.95);
  CHECK(acc1 == acc2);
  for (std::size_t p = 0; p < e1.params.entries.size(); ++p)
    CHECK(e1.params.entries[p].value == e2.params.entries[p].value);
}

TEST_CASE("single-class training data is rejected") {
  Dataset bad = make_toy_dataset("bars", 20, 8, 23);
  for (auto& l : bad.labels) l = 0;
  ExtractorConfig cfg;
  CHECK_THROWS_AS(train_feature_extractor(bad, bad, cfg),
                  std::invalid_argument);
}

TEST_CASE("fid: self-distance is tiny, symmetric, and separates noise") {
  Dataset train = make_toy_dataset("bars", 400, 8, 31);
  Dataset held = make_toy_dataset("bars", 120, 8, 32);
  Extractor ex = quick_extractor(train, held);

  CHECK(fid(held.images, held.images, ex) < 1e-6);

  // monotone separation under increasing corruption
  Rng rng(33);
  double last = fid(held.images, held.images, ex);
  for (double level : {0.3, 0.8, 2.0}) {
    std::vector<Grid> noisy = held.images;
    for (auto& g : noisy)
      for (auto& v : g.data) v += level * rng.normal();
    const double score = fid(noisy, held.images, ex);
    CHECK(score >= last);
    last = score;
  }

  // pure-noise images vs the reference, against split-vs-split baseline
  std::vector<Grid> noise;
  for (int i = 0; i < 120; ++i) {
    Grid g(1, 8, 8);
    rng.fill_normal(g.data.data(), g.data.size());
    for (auto& v : g.data) v = std::clamp(v, -1.0, 1.0);
    noise.push_back(std::move(g));
  }
  Dataset other = make_toy_dataset("bars", 120, 8, 34);
  const double baseline = fid(other.images, held.images, ex);
  const double noisy_score = fid(noise, held.images, ex);
  CHECK(noisy_score > 5.0 * baseline);

  // symmetry on a nontrivial pair
  const double ab = fid(noise, held.images, ex);
  const double ba = fid(held.images, noise, ex);
  CHECK(ab == doctest::Approx(ba).epsilon(1e-8));
}
