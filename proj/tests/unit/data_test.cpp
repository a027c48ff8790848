#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "twostep/data.hpp"
#include "twostep/space.hpp"
#include "temp_dir.hpp"

using namespace twostep;
using namespace twostep::data;

namespace {

DatasetHandle tiny_handle() {
  // x = [1, 2, 3] and [10, 10, 40]; targets in (0, 1).
  return DatasetHandle({"a", "b"}, {"t"}, {1, 10, 2, 10, 3, 40}, {0.1, 0.2, 0.3}, "test");
}

void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::string error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

}  // namespace

TEST_CASE("DatasetHandle validates shape and values") {
  CHECK_THROWS_AS(DatasetHandle({"a"}, {"t"}, {1, 2}, {0.5}, "x"), DataError);
  CHECK_THROWS_AS(DatasetHandle({"a"}, {"t"}, {}, {}, "x"), DataError);
  CHECK_THROWS_AS(DatasetHandle({"a"}, {"t"}, {NAN}, {0.5}, "x"), DataError);
  const auto h = tiny_handle();
  CHECK(h.n_samples() == 3);
  CHECK(h.input(2, 1) == 40.0);
  CHECK(h.target_row(1)[0] == 0.2);
}

TEST_CASE("CSV round trip is exact") {
  TempDir dir;
  const auto h = generate_synthetic_activation(50, 3);
  const auto path = dir.path() / "data.csv";
  write_csv(h, path);
  CHECK(std::filesystem::exists(dir.path() / "data.manifest.json"));
  const auto back = load_csv(path);
  CHECK(back.input_names() == h.input_names());
  CHECK(back.target_names() == h.target_names());
  for (std::size_t r = 0; r < h.n_samples(); ++r) {
    for (std::size_t c = 0; c < h.n_inputs(); ++c) REQUIRE(back.input(r, c) == h.input(r, c));
    for (std::size_t c = 0; c < h.n_outputs(); ++c) REQUIRE(back.target(r, c) == h.target(r, c));
  }
}

TEST_CASE("CSV errors name the offending cell") {
  TempDir dir;
  const auto path = dir.path() / "bad.csv";
  write_file(path, "x1,x2,y\n1,2,0.5\n3,abc,0.5\n");
  const auto msg = error_of([&] { load_csv(path, {"y"}); });
  CHECK(msg.find("row 2, column 2") != std::string::npos);
  CHECK(msg.find("'abc'") != std::string::npos);

  write_file(path, "x1,y\n1,nan\n");
  CHECK(error_of([&] { load_csv(path, {"y"}); }).find("NaN or Inf") != std::string::npos);

  write_file(path, "x1,y\n1,0.5,7\n");
  CHECK(error_of([&] { load_csv(path, {"y"}); }).find("row 1 has 3 cells") != std::string::npos);

  write_file(path, "x1,y\n1,0.5\n");
  CHECK(error_of([&] { load_csv(path, {"z"}); }).find("'z' not found") != std::string::npos);
  CHECK(error_of([&] { load_csv(path); }).find("manifest") != std::string::npos);
  CHECK_THROWS_AS(load_csv(dir.path() / "missing.csv", {"y"}), DataError);
}

TEST_CASE("target order follows the manifest") {
  TempDir dir;
  const auto path = dir.path() / "d.csv";
  write_file(path, "y2,x,y1\n0.2,5,0.1\n0.4,6,0.3\n");
  const auto h = load_csv(path, {"y1", "y2"});
  CHECK(h.input_names() == std::vector<std::string>{"x"});
  CHECK(h.target(0, 0) == 0.1);
  CHECK(h.target(0, 1) == 0.2);
}

TEST_CASE("subset size uses floor with tolerance") {
  CHECK(subset_size(19'700'000, 0.00025) == 4925);
  CHECK(subset_size(10'000, 0.005) == 50);
  CHECK(subset_size(10, 0.01) == 1);
  CHECK(subset_size(1000, 1.0) == 1000);
  CHECK(subset_size(3, 0.5) == 1);
  CHECK(round_half_up(2.5) == 3);
  CHECK(round_half_up(0.1 * 5.0) == 1);
  CHECK(round_half_up(2.4999) == 2);
  CHECK_THROWS_AS(subset_indices(10, 0.0, 1), DataError);
  CHECK_THROWS_AS(subset_indices(10, 1.5, 1), DataError);
}

TEST_CASE("subset of a large virtual pool is distinct, sorted and seeded") {
  const auto a = subset_indices(19'700'000, 0.00025, 17);
  CHECK(a.size() == 4925);
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(std::adjacent_find(a.begin(), a.end()) == a.end());
  CHECK(a.back() < 19'700'000);
  CHECK(subset_indices(19'700'000, 0.00025, 17) == a);
  CHECK(subset_indices(19'700'000, 0.00025, 18) != a);
}

TEST_CASE("p_subset = 1 is the identity") {
  const auto a = subset_indices(100, 1.0, 5);
  std::vector<std::size_t> all(100);
  std::iota(all.begin(), all.end(), std::size_t{0});
  CHECK(a == all);
}

TEST_CASE("subset draws are simple random samples") {
  // Each of 20 rows should be chosen with probability 5/20.
  std::vector<int> hits(20, 0);
  constexpr int kDraws = 20'000;
  for (int s = 0; s < kDraws; ++s) {
    for (auto i : subset_indices(20, 0.25, space::derive_seed(1, 0, s, "subset"))) ++hits[i];
  }
  for (int h : hits) CHECK(std::abs(h / double(kDraws) - 0.25) < 0.02);
}

TEST_CASE("split sizes and partition") {
  std::vector<std::size_t> rows(4925);
  std::iota(rows.begin(), rows.end(), std::size_t{100});
  const auto s = split_indices(rows, 0.8, 9);
  CHECK(s.train.size() == 3940);
  CHECK(s.validation.size() == 985);

  const auto h = split_indices(std::span(rows).first(10), 0.5, 9);
  CHECK(h.train.size() == 5);
  CHECK(h.validation.size() == 5);

  const auto two = split_indices(std::span(rows).first(2), 0.5, 9);
  CHECK(two.train.size() == 1);
  CHECK(two.validation.size() == 1);

  CHECK_THROWS_AS(split_indices(std::span(rows).first(1), 0.8, 9), DataError);
  CHECK_THROWS_AS(split_indices(rows, 1.0, 9), DataError);
}

TEST_CASE("split is a seeded partition of the input rows") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const auto rows = subset_indices(1000, 0.1 + 0.01 * static_cast<double>(seed), seed);
    const auto s = split_indices(rows, 0.8, seed * 7 + 1);
    REQUIRE(std::is_sorted(s.train.begin(), s.train.end()));
    REQUIRE(std::is_sorted(s.validation.begin(), s.validation.end()));
    std::vector<std::size_t> merged;
    std::merge(s.train.begin(), s.train.end(), s.validation.begin(), s.validation.end(),
               std::back_inserter(merged));
    REQUIRE(merged == rows);
    REQUIRE(split_indices(rows, 0.8, seed * 7 + 1).train == s.train);
  }
}

TEST_CASE("make_split works on a subset view") {
  auto handle = std::make_shared<const DatasetHandle>(generate_synthetic_activation(200, 1));
  const auto view = make_subset(handle, 0.5, 4);
  CHECK(view.indices.size() == 100);
  const auto split = make_split(view, 0.8, 5);
  CHECK(split.train.size() == 80);
  for (auto r : split.validation) {
    CHECK(std::binary_search(view.indices.begin(), view.indices.end(), r));
  }
}

TEST_CASE("standardizer uses population statistics of the fit rows") {
  const auto h = tiny_handle();
  const std::vector<std::size_t> rows{0, 1, 2};
  const auto s = fit_standardizer(h, rows);
  CHECK(s.mean()[0] == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(s.stddev()[0] == doctest::Approx(std::sqrt(2.0 / 3.0)).epsilon(1e-15));
  CHECK(s.mean()[1] == doctest::Approx(20.0));
  CHECK(s.stddev()[1] == doctest::Approx(std::sqrt(200.0)).epsilon(1e-14));

  // Fit on rows {0, 1}: column b is constant there.
  const std::vector<std::size_t> two{0, 1};
  const auto msg = error_of([&] { fit_standardizer(h, two); });
  CHECK(msg.find("'b'") != std::string::npos);
  CHECK_THROWS_AS(fit_standardizer(h, std::span(rows).first(1)), DataError);
}

TEST_CASE("standardization uses the fitted statistics on held-out rows") {
  const auto h = generate_synthetic_activation(500, 8);
  std::vector<std::size_t> fit_rows(400);
  std::iota(fit_rows.begin(), fit_rows.end(), std::size_t{0});
  const auto s = fit_standardizer(h, fit_rows);

  const auto train = materialize(h, fit_rows, s);
  for (Eigen::Index j = 0; j < train.inputs.rows(); ++j) {
    const double m = train.inputs.row(j).mean();
    const double var = (train.inputs.row(j).array() - m).square().mean();
    CHECK(std::abs(m) < 1e-12);
    CHECK(std::abs(var - 1.0) < 1e-12);
  }

  const std::vector<std::size_t> held{450};
  const auto x = materialize(h, held, s);
  for (std::size_t j = 0; j < h.n_inputs(); ++j) {
    const double expected = (h.input(450, j) - s.mean()[j]) / s.stddev()[j];
    CHECK(x.inputs(static_cast<Eigen::Index>(j), 0) == doctest::Approx(expected).epsilon(1e-15));
  }
  CHECK(x.targets(2, 0) == h.target(450, 2));

  std::vector<double> row(h.input_row(450).begin(), h.input_row(450).end());
  const auto original = row;
  s.apply(row);
  s.invert(row);
  for (std::size_t j = 0; j < row.size(); ++j) {
    CHECK(std::abs(row[j] - original[j]) <= 1e-12 * std::max(1.0, std::abs(original[j])));
  }
}

TEST_CASE("synthetic activation data") {
  const auto h = generate_synthetic_activation(2000, 21);
  CHECK(h.n_inputs() == kActivationInputs);
  CHECK(h.n_outputs() == kActivationOutputs);
  CHECK(h.input_names().front() == "Tair");
  CHECK(h.input_names().back() == "kappa_4");
  for (std::size_t r = 0; r < h.n_samples(); ++r) {
    REQUIRE(h.input(r, 0) >= 230.0);
    REQUIRE(h.input(r, 0) <= 310.0);
    REQUIRE(h.input(r, 3) >= 1.0);
    REQUIRE(h.input(r, 3) <= 500.0);
    for (std::size_t m = 0; m < 4; ++m) {
      REQUIRE(h.target(r, m) > 0.0);
      REQUIRE(h.target(r, m) < 1.0);
      REQUIRE(h.target(r, m) == synthetic_activation_fraction(h.input(r, 0), h.input(r, 2),
                                                              h.input(r, 3), h.input(r, 4 + m),
                                                              h.input(r, 8 + m), h.input(r, 12 + m)));
    }
  }
  CHECK(generate_synthetic_activation(2000, 21) == h);
  CHECK_FALSE(generate_synthetic_activation(2000, 22) == h);
}

TEST_CASE("activation fraction is monotone in updraft and hygroscopicity") {
  double prev = 0.0;
  for (double w = 1.0; w <= 500.0; w *= 1.5) {
    const double f = synthetic_activation_fraction(280, 0.9, w, 100, 0.1, 0.5);
    CHECK(f > prev);
    prev = f;
  }
  CHECK(synthetic_activation_fraction(280, 0.9, 10, 100, 0.1, 0.2) <
        synthetic_activation_fraction(280, 0.9, 10, 100, 0.1, 0.8));
  CHECK(synthetic_activation_fraction(280, 0.9, 10, 100, 0.1, 0.5) >
        synthetic_activation_fraction(280, 0.9, 10, 1000, 0.1, 0.5));
}

TEST_CASE("dataset refs") {
  DatasetRef ref;
  ref.kind = DatasetRef::Kind::synthetic_activation;
  ref.n_samples = 300;
  ref.holdout_samples = 100;
  ref.seed = 4;
  const nlohmann::json j = ref;
  CHECK(j.at("kind") == "synthetic_activation");
  CHECK(j.get<DatasetRef>() == ref);

  const auto r = resolve(ref);
  CHECK(r.pool->n_samples() == 300);
  REQUIRE(r.holdout);
  CHECK(r.holdout->n_samples() == 100);
  const auto all = generate_synthetic_activation(400, 4);
  CHECK(r.holdout->input(0, 0) == all.input(300, 0));
  CHECK(pool_size(ref) == 300);
  CHECK(DatasetCache::global().get(ref).pool == DatasetCache::global().get(ref).pool);

  DatasetRef v;
  v.kind = DatasetRef::Kind::virtual_size;
  v.n_samples = 19'700'000;
  CHECK(pool_size(v) == 19'700'000);
  CHECK_THROWS_AS(resolve(v), DataError);
}
