#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <json.hpp>

namespace fs = std::filesystem;

namespace {

const fs::path kWork = fs::temp_directory_path() / "cmrc_test_cli";

int cli(const std::string& args, const std::string& log = "last.log") {
  const std::string cmd = std::string(CMRC_CLI) + " " + args + " >" + (kWork / log).string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return status == -1 ? -1 : WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string tree_digest(const fs::path& dir) {
  std::string out;
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());
  for (const auto& f : files) out += f.string() + "\n" + slurp(dir / f) + "\n";
  return out;
}

std::string p(const std::string& name) { return (kWork / name).string(); }

const std::string kSmallModel = " --hidden 8 --layers 1 --heads 2 --epochs 1 --batch 4 --memory 6";

struct Workspace {
  Workspace() {
    fs::remove_all(kWork);
    fs::create_directories(kWork);
  }
};

const Workspace& workspace() {
  static const Workspace w;
  return w;
}

}  // namespace

TEST_CASE("gen twice gives identical trees") {
  workspace();
  REQUIRE(cli("gen --setting cdaq --domains 3 --seed 7 --train 16 --test 8 --out " + p("gen_a")) == 0);
  REQUIRE(cli("gen --setting cdaq --domains 3 --seed 7 --train 16 --test 8 --out " + p("gen_b")) == 0);
  CHECK(tree_digest(p("gen_a")) == tree_digest(p("gen_b")));
  CHECK(fs::exists(kWork / "gen_a" / "vocab.txt"));
  CHECK(fs::exists(kWork / "gen_a" / "stream.json"));
}

TEST_CASE("run then report gives one CSV row per step") {
  workspace();
  REQUIRE(cli("gen --setting cdac --domains 3 --seed 1 --train 24 --test 8 --out " + p("data")) == 0);
  REQUIRE(cli("run --method lower --data " + p("data") + kSmallModel + " --out " + p("lower.json")) == 0);
  REQUIRE(cli("report " + p("lower.json") + " --csv " + p("lower.csv"), "table.txt") == 0);
  std::istringstream csv(slurp(p("lower.csv")));
  std::string line;
  std::vector<std::string> rows;
  while (std::getline(csv, line)) rows.push_back(line);
  REQUIRE(rows.size() == 4);
  CHECK(rows[0] == "step,domain,f1,em,f1_avg,f1_all");
  CHECK(slurp(p("table.txt")).find("corpus2") != std::string::npos);
  CHECK(fs::exists(p("lower.json.timings.json")));
}

TEST_CASE("the order flag is recorded and followed") {
  workspace();
  if (!fs::exists(p("data"))) REQUIRE(cli("gen --setting cdac --domains 3 --seed 1 --train 24 --test 8 --out " + p("data")) == 0);
  REQUIRE(cli("run --method ma_mrc --order 2,0,1 --data " + p("data") + kSmallModel + " --out " + p("ordered.json")) == 0);
  const auto j = nlohmann::json::parse(slurp(p("ordered.json")));
  CHECK(j.at("metadata").at("order") == nlohmann::json{2, 0, 1});
  const std::vector<std::string> expected{"corpus2", "corpus0", "corpus1"};
  for (std::size_t t = 0; t < 3; ++t) CHECK(j.at("steps")[t].at("domain_name") == expected[t]);
}

TEST_CASE("repeated runs write byte-identical reports") {
  workspace();
  if (!fs::exists(p("data"))) REQUIRE(cli("gen --setting cdac --domains 3 --seed 1 --train 24 --test 8 --out " + p("data")) == 0);
  REQUIRE(cli("run --method der --seed 3 --data " + p("data") + kSmallModel + " --out " + p("r1.json")) == 0);
  REQUIRE(cli("run --method der --seed 3 --data " + p("data") + kSmallModel + " --out " + p("r2.json")) == 0);
  CHECK(slurp(p("r1.json")) == slurp(p("r2.json")));
}

TEST_CASE("a JSON manifest configures a run and flags override it") {
  workspace();
  if (!fs::exists(p("data"))) REQUIRE(cli("gen --setting cdac --domains 3 --seed 1 --train 24 --test 8 --out " + p("data")) == 0);
  {
    std::ofstream out(p("manifest.json"));
    out << R"({"method": "agem", "seed": 9, "epochs": 1, "batch_size": 4, "memory_capacity": 6,
               "model": {"hidden": 8, "layers": 1, "heads": 2}})";
  }
  REQUIRE(cli("run --config " + p("manifest.json") + " --seed 4 --data " + p("data") + " --out " + p("m.json")) == 0);
  const auto j = nlohmann::json::parse(slurp(p("m.json")));
  CHECK(j.at("metadata").at("method") == "agem");
  CHECK(j.at("metadata").at("seed") == 4);

  {
    std::ofstream out(p("bad_manifest.json"));
    out << R"({"method": "agem", "typo_key": 1})";
  }
  CHECK(cli("run --config " + p("bad_manifest.json") + " --data " + p("data") + " --out " + p("x.json")) != 0);
}

TEST_CASE("eval scores a saved checkpoint") {
  workspace();
  if (!fs::exists(p("data"))) REQUIRE(cli("gen --setting cdac --domains 3 --seed 1 --train 24 --test 8 --out " + p("data")) == 0);
  REQUIRE(cli("run --method lower --data " + p("data") + kSmallModel + " --out " + p("e.json") + " --save-model " +
              p("model.ckpt")) == 0);
  REQUIRE(cli("eval --checkpoint " + p("model.ckpt") + " --data " + p("data") + " --out " + p("eval.json")) == 0);
  const auto final_row = nlohmann::json::parse(slurp(p("e.json"))).at("steps").back().at("scores");
  const auto eval_row = nlohmann::json::parse(slurp(p("eval.json"))).at("steps").back().at("scores");
  REQUIRE(eval_row.size() == 3);
  for (const auto& s : final_row) {
    bool matched = false;
    for (const auto& e : eval_row)
      if (e.at("name") == s.at("name")) matched = e.at("f1") == s.at("f1");
    CHECK(matched);
  }
}

TEST_CASE("gradcheck passes") {
  workspace();
  CHECK(cli("gradcheck --seed 2", "gradcheck.txt") == 0);
  CHECK(slurp(p("gradcheck.txt")).find("FAIL") == std::string::npos);
}

TEST_CASE("bad invocations exit nonzero with a message") {
  workspace();
  CHECK(cli("run --bogus-flag", "err1.txt") != 0);
  CHECK(!slurp(p("err1.txt")).empty());
  CHECK(cli("run --method nope --data " + kWork.string(), "err2.txt") != 0);
  CHECK(cli("report " + p("does_not_exist.json"), "err3.txt") != 0);
  CHECK(cli("gen --setting xyz --out " + p("x"), "err4.txt") != 0);
  CHECK(cli("frobnicate", "err5.txt") != 0);
  CHECK(cli("run --data " + p("no_such_dir"), "err6.txt") != 0);
}
