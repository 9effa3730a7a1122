#include <doctest.h>

#include <algorithm>
#include <filesystem>
#include <sstream>

#include "cmrc/metrics.hpp"
#include "cmrc/rng.hpp"

using namespace cmrc;

namespace {

DomainScore score(std::string name, std::size_t domain, std::size_t count, double f1, double em = 0.0) {
  return DomainScore{std::move(name), domain, count, em, f1};
}

EvalReport three_step_report() {
  EvalReport r;
  r.metadata["method"] = "ma_mrc";
  r.metadata["seed"] = 4;
  r.steps.push_back(make_step_report(0, 2, "c", {score("c", 2, 10, 80.13, 70.0)}));
  r.steps.push_back(make_step_report(1, 0, "a", {score("c", 2, 10, 75.5, 60.0), score("a", 0, 20, 66.0, 50.0)}));
  r.steps.push_back(make_step_report(
      2, 1, "b", {score("c", 2, 10, 70.11, 55.0), score("a", 0, 20, 61.0, 40.0), score("b", 1, 10, 90.0, 85.0)}));
  return r;
}

}  // namespace

TEST_CASE("exact match and token F1") {
  const std::vector<int> a{1, 2, 3};
  const EmF1 same = em_f1(a, a);
  CHECK(same.em == 1.0);
  CHECK(same.f1 == 1.0);

  const EmF1 partial = em_f1(std::vector<int>{1, 2, 3}, std::vector<int>{2, 3, 4});
  CHECK(partial.em == 0.0);
  CHECK(partial.f1 == doctest::Approx(2.0 / 3.0).epsilon(1e-14));

  const EmF1 disjoint = em_f1(std::vector<int>{5, 6}, std::vector<int>{7});
  CHECK(disjoint.em == 0.0);
  CHECK(disjoint.f1 == 0.0);

  const EmF1 empty = em_f1(std::vector<int>{}, std::vector<int>{7});
  CHECK(empty.em == 0.0);
  CHECK(empty.f1 == 0.0);

  CHECK_THROWS(em_f1(a, std::vector<int>{}));
}

TEST_CASE("F1 counts repeated tokens as a multiset") {
  // pred [1,1,2] vs gold [1,2,2]: overlap {1,2} = 2, p = r = 2/3.
  CHECK(em_f1(std::vector<int>{1, 1, 2}, std::vector<int>{1, 2, 2}).f1 == doctest::Approx(2.0 / 3.0));
  // pred [1] vs gold [1,1,1,1]: p = 1, r = 1/4, f1 = 0.4.
  CHECK(em_f1(std::vector<int>{1}, std::vector<int>{1, 1, 1, 1}).f1 == doctest::Approx(0.4));
  CHECK(em_f1(std::vector<int>{1, 1, 1, 1}, std::vector<int>{1}).f1 == doctest::Approx(0.4));
}

TEST_CASE("F1 of any non-empty sequence with itself is one") {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<int> x(1 + rng.below(10));
    for (int& v : x) v = static_cast<int>(rng.below(5));
    CHECK(em_f1(x, x).f1 == 1.0);
    CHECK(em_f1(x, x).em == 1.0);
  }
}

TEST_CASE("average F1 reproduces the published upper-bound rows") {
  const std::vector<double> corpus_setting{78.24, 68.66, 68.03, 58.63, 63.47};
  const std::vector<double> question_setting{83.86, 85.16, 81.03, 92.36, 83.36, 65.30, 84.22, 88.82};
  CHECK(std::abs(f1_avg(corpus_setting) - 67.41) <= 0.005);
  CHECK(std::abs(f1_avg(question_setting) - 83.01) <= 0.005);
  CHECK(f1_avg(std::vector<double>{42.5}) == 42.5);
  CHECK_THROWS(f1_avg(std::vector<double>{}));
}

TEST_CASE("pooled F1 weighting") {
  const std::vector<DomainScore> equal{score("a", 0, 50, 80.0), score("b", 1, 50, 40.0), score("c", 2, 50, 10.0)};
  CHECK(f1_all(std::span<const DomainScore>(equal)) == f1_avg(std::vector<double>{80.0, 40.0, 10.0}));

  const std::vector<DomainScore> skewed{score("a", 0, 100, 1.0), score("b", 1, 300, 0.0)};
  CHECK(f1_all(std::span<const DomainScore>(skewed)) == doctest::Approx(0.25));
  CHECK(f1_avg(std::vector<double>{1.0, 0.0}) == 0.5);

  const std::vector<DomainScore> single{score("a", 0, 7, 63.2)};
  CHECK(f1_all(std::span<const DomainScore>(single)) == 63.2);
}

TEST_CASE("pooled per-sample F1 does not depend on pool order") {
  Rng rng(2);
  std::vector<double> pool(501);
  for (double& v : pool) v = rng.uniform() * (rng.uniform() < 0.1 ? 1e6 : 1.0);
  const double reference = f1_all(std::span<const double>(pool));
  for (int trial = 0; trial < 20; ++trial) {
    rng.shuffle(std::span<double>(pool));
    CHECK(f1_all(std::span<const double>(pool)) == reference);
  }
}

TEST_CASE("step rows carry their averages") {
  const EvalReport r = three_step_report();
  for (const StepReport& s : r.steps) {
    double total = 0.0;
    for (const auto& d : s.scores) total += d.f1;
    CHECK(std::abs(s.f1_avg - total / static_cast<double>(s.scores.size())) < 1e-9);
  }
  CHECK(r.steps[1].f1_all == doctest::Approx((75.5 * 10 + 66.0 * 20) / 30.0));
}

TEST_CASE("forgetting matrix") {
  SUBCASE("single step has no deltas") {
    EvalReport r;
    r.steps.push_back(make_step_report(0, 0, "a", {score("a", 0, 5, 50.0)}));
    const ForgettingMatrix m = forgetting_matrix(r);
    CHECK(m.f1.size() == 1);
    CHECK(m.f1[0].size() == 1);
    CHECK(m.deltas.empty());
  }
  SUBCASE("lower-triangular with introduction-minus-final deltas") {
    const ForgettingMatrix m = forgetting_matrix(three_step_report());
    CHECK(m.domains == std::vector<std::string>{"c", "a", "b"});
    REQUIRE(m.f1.size() == 3);
    for (std::size_t t = 0; t < 3; ++t) CHECK(m.f1[t].size() == t + 1);
    REQUIRE(m.deltas.size() == 2);
    CHECK(m.deltas[0] == doctest::Approx(10.02).epsilon(1e-12));
    CHECK(m.deltas[1] == doctest::Approx(5.0));
  }
  SUBCASE("malformed rows are rejected") {
    EvalReport r = three_step_report();
    r.steps[1].scores.pop_back();
    CHECK_THROWS(forgetting_matrix(r));
  }
}

TEST_CASE("reports round-trip exactly") {
  const EvalReport r = three_step_report();
  CHECK(report_from_json(report_to_json(r)) == r);
  const auto path = std::filesystem::temp_directory_path() / "cmrc_test_report.json";
  write_report(path, r);
  CHECK(read_report(path) == r);
  std::filesystem::remove(path);

  nlohmann::json bad = report_to_json(r);
  bad["schema"] = "something-else";
  CHECK_THROWS(report_from_json(bad));
}

TEST_CASE("curve CSV has a header and one row per step") {
  std::ostringstream out;
  write_curve_csv(out, three_step_report());
  std::istringstream in(out.str());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "step,domain,f1,em,f1_avg,f1_all");
  CHECK(lines[3].rfind("2,b,90.0000,85.0000,", 0) == 0);
}

TEST_CASE("report table lists every domain") {
  std::ostringstream out;
  print_report_table(out, three_step_report());
  for (const char* name : {"c", "a", "b"}) CHECK(out.str().find(name) != std::string::npos);
}
