#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <unistd.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>

#include "circ/reference.hpp"
#include "circ/tasks.hpp"
#include "doctest.h"

using namespace circ;

namespace {
namespace fs = std::filesystem;

struct TmpDir {
  fs::path p;
  TmpDir() : p(fs::temp_directory_path() / ("circ_tasks_" + std::to_string(::getpid()))) {
    fs::create_directories(p);
  }
  ~TmpDir() { fs::remove_all(p); }
};

}  // namespace

TEST_CASE("every kind generates valid distinct examples") {
  for (const std::string kind : {"mirror-retrieval-ab", "mirror-retrieval-ba",
                                 "greater-than-2digit", "repeat-last-distinct",
                                 "parity-agreement"}) {
    const TaskSpec t = generate_task(kind, 40, 11);
    CHECK(t.id == kind);
    CHECK(int(t.examples.size()) == 40);
    std::set<std::vector<int>> seen;
    for (const auto& ex : t.examples) {
      CHECK(ex.clean.size() == ex.corrupted.size());
      CHECK(ex.clean != ex.corrupted);
      CHECK(!ex.metric.positive.empty());
      std::vector<int> pair = ex.clean;
      pair.insert(pair.end(), ex.corrupted.begin(), ex.corrupted.end());
      seen.insert(pair);
      for (const int tok : ex.clean) {
        CHECK(tok >= 0);
        CHECK(tok < ToyVocab::kSize);
      }
    }
    CHECK(int(seen.size()) == 40);
    CHECK(t.token_names.size() == std::size_t(ToyVocab::kSize));
  }
}

TEST_CASE("capacity limits are enforced exactly") {
  CHECK_NOTHROW(generate_task("mirror-retrieval-ab", 552, 1));
  CHECK_THROWS_AS(generate_task("mirror-retrieval-ab", 553, 1), std::invalid_argument);
  CHECK_NOTHROW(generate_task("greater-than-2digit", 776, 1));
  CHECK_THROWS_AS(generate_task("greater-than-2digit", 777, 1), std::invalid_argument);
  CHECK_NOTHROW(generate_task("repeat-last-distinct", 612, 1));
  CHECK_THROWS_AS(generate_task("repeat-last-distinct", 613, 1), std::invalid_argument);
  CHECK_NOTHROW(generate_task("parity-agreement", 576, 1));
  CHECK_THROWS_AS(generate_task("parity-agreement", 577, 1), std::invalid_argument);
  CHECK_THROWS_AS(generate_task("mirror-retrieval-ab", 0, 1), std::invalid_argument);
  CHECK_THROWS_AS(generate_task("no-such-kind", 4, 1), std::invalid_argument);
}

TEST_CASE("the two mirror kinds transcribe one shared fact table") {
  const TaskSpec ab = generate_task("mirror-retrieval-ab", 552, 19);
  const TaskSpec ba = generate_task("mirror-retrieval-ba", 552, 19);
  // collect a -> b facts stated by each direction
  std::set<std::pair<int, int>> fab, fba;
  for (const auto& ex : ab.examples) {
    fab.insert({ex.clean[0] - ToyVocab::kEntityA, ex.target - ToyVocab::kEntityB});
  }
  for (const auto& ex : ba.examples) {
    fba.insert({ex.target - ToyVocab::kEntityA, ex.clean[0] - ToyVocab::kEntityB});
  }
  CHECK(fab == fba);
  // and the table is a bijection
  std::set<int> lhs, rhs;
  for (const auto& [a, b] : fab) {
    lhs.insert(a);
    rhs.insert(b);
  }
  CHECK(int(lhs.size()) == ToyVocab::kNEntities);
  CHECK(int(rhs.size()) == ToyVocab::kNEntities);
  // a different seed permutes differently
  const TaskSpec other = generate_task("mirror-retrieval-ab", 552, 20);
  std::set<std::pair<int, int>> fother;
  for (const auto& ex : other.examples) {
    fother.insert({ex.clean[0] - ToyVocab::kEntityA, ex.target - ToyVocab::kEntityB});
  }
  CHECK(fab != fother);
}

TEST_CASE("task structure carries a perfect predictor") {
  SUBCASE("greater-than splits the year range at the stated year") {
    const TaskSpec t = generate_task("greater-than-2digit", 100, 7);
    for (const auto& ex : t.examples) {
      const int y = ex.clean[1] - ToyVocab::kYears;
      CHECK(y >= 2);
      CHECK(y <= 98);
      CHECK(ex.corrupted[1] == ToyVocab::kYears + 1);
      CHECK(ex.corrupted[0] == ex.clean[0]);
      CHECK(int(ex.metric.positive.size()) == 99 - y);
      CHECK(int(ex.metric.negative.size()) == y + 1);
      for (const int v : ex.metric.positive) CHECK(v - ToyVocab::kYears > y);
      for (const int v : ex.metric.negative) CHECK(v - ToyVocab::kYears <= y);
      CHECK(ex.target == ToyVocab::kYears + y + 1);
      CHECK(ex.metric.mode == MetricMode::ProbDiff);
    }
  }
  SUBCASE("repeat-last answers with the token that appears once") {
    const TaskSpec t = generate_task("repeat-last-distinct", 100, 7);
    for (const auto& ex : t.examples) {
      int once = -1;
      for (const int tok : ex.clean) {
        if (std::count(ex.clean.begin(), ex.clean.end(), tok) == 1) once = tok;
      }
      CHECK(once == ex.target);
      CHECK(ex.metric.positive == std::vector<int>{once});
      // the corruption flips which token is the singleton
      int conce = -1;
      for (const int tok : ex.corrupted) {
        if (std::count(ex.corrupted.begin(), ex.corrupted.end(), tok) == 1) conce = tok;
      }
      CHECK(conce == ex.metric.negative[0]);
    }
  }
  SUBCASE("parity wants the verb form agreeing with the subject noun") {
    const TaskSpec t = generate_task("parity-agreement", 100, 7);
    CHECK(t.family == TaskFamily::Formal);
    for (const auto& ex : t.examples) {
      const bool plural_subject = ex.clean[0] >= ToyVocab::kNounPl;
      CHECK(ex.target == -1);
      for (const int v : ex.metric.positive) {
        CHECK((v >= ToyVocab::kVerbPl) == plural_subject);
      }
      for (const int v : ex.metric.negative) {
        CHECK((v >= ToyVocab::kVerbPl) != plural_subject);
      }
      // corruption flips only the subject's form, attractor untouched
      CHECK(ex.corrupted[2] == ex.clean[2]);
      CHECK(ex.corrupted[0] != ex.clean[0]);
    }
  }
}

TEST_CASE("jsonl round trip preserves every field") {
  TmpDir tmp;
  for (const std::string kind : {"greater-than-2digit", "parity-agreement",
                                 "mirror-retrieval-ab"}) {
    const TaskSpec t = generate_task(kind, 25, 13);
    const std::string path = (tmp.p / (kind + ".jsonl")).string();
    save_task(t, path);
    const TaskSpec back = load_task(path);
    CHECK(back.id == kind);
    REQUIRE(back.examples.size() == t.examples.size());
    for (std::size_t i = 0; i < t.examples.size(); i++) {
      const auto& a = t.examples[i];
      const auto& b = back.examples[i];
      CHECK(a.clean == b.clean);
      CHECK(a.corrupted == b.corrupted);
      CHECK(a.metric.positive == b.metric.positive);
      CHECK(a.metric.negative == b.metric.negative);
      CHECK(a.metric.mode == b.metric.mode);
      CHECK(a.target == b.target);
    }
  }
}

TEST_CASE("task set round trip keeps families and symbols") {
  TmpDir tmp;
  const std::vector<TaskSpec> tasks = {generate_task("parity-agreement", 10, 2),
                                       generate_task("mirror-retrieval-ab", 10, 2)};
  save_task_set(tasks, tmp.p.string());
  const auto back = load_task_set((tmp.p / "manifest.json").string());
  REQUIRE(back.size() == 2);
  CHECK(back[0].id == "parity-agreement");
  CHECK(back[0].family == TaskFamily::Formal);
  CHECK(back[1].family == TaskFamily::Functional);
  CHECK(back[0].token_names == tasks[0].token_names);
  CHECK(back[1].examples[3].clean == tasks[1].examples[3].clean);
}

TEST_CASE("malformed task files are rejected with context") {
  TmpDir tmp;
  const std::string path = (tmp.p / "bad.jsonl").string();
  {
    std::ofstream f(path);
    f << R"({"clean": [1, 2], "corrupted": [1], "positive": [3], "negative": []})" << "\n";
  }
  CHECK_THROWS_WITH_AS(load_task(path), doctest::Contains("bad.jsonl:1:"), std::runtime_error);
  {
    std::ofstream f(path);
    f << R"({"clean": [1, 2], "corrupted": [1, 3], "positive": [], "negative": []})" << "\n";
  }
  CHECK_THROWS(load_task(path));
  {
    std::ofstream f(path);
    f << "not json\n";
  }
  CHECK_THROWS(load_task(path));
}

TEST_CASE("zeroed model scores zero logit difference everywhere") {
  const TaskSpec t = generate_task("mirror-retrieval-ab", 12, 3);
  ModelConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 1;
  cfg.d_model = 8;
  cfg.d_head = 4;
  cfg.d_mlp = 8;
  cfg.vocab_size = ToyVocab::kSize;
  cfg.max_positions = 4;
  ModelParams p = build_model(cfg);
  std::fill(p.data.begin(), p.data.end(), 0.0);
  CHECK(eval_metric(p, t, false) == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(eval_metric(p, t, true) == doctest::Approx(0.0).epsilon(1e-15));

  // flat logits under a probability metric: mass difference counts set sizes
  const TaskSpec gt = generate_task("greater-than-2digit", 5, 3);
  const double got = eval_metric(p, gt, false);
  double want = 0.0;
  for (const auto& ex : gt.examples) {
    want += double(int(ex.metric.positive.size()) - int(ex.metric.negative.size())) /
            ToyVocab::kSize;
  }
  want /= gt.examples.size();
  CHECK(got == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("parallel metric evaluation matches the serial loop") {
  const TaskSpec t = generate_task("repeat-last-distinct", 20, 5);
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 12;
  cfg.d_head = 6;
  cfg.d_mlp = 16;
  cfg.vocab_size = ToyVocab::kSize;
  cfg.max_positions = 4;
  cfg.seed = 2;
  const ModelParams p = build_model(cfg);
  CHECK(eval_metric(p, t, false) == reference::eval_metric_serial(p, t, false));
  CHECK(eval_metric(p, t, true) == reference::eval_metric_serial(p, t, true));
  const TaskCaches c = build_task_caches(p, t);
  CHECK(c.mean_clean == eval_metric(p, t, false));
  CHECK(c.mean_corr == eval_metric(p, t, true));
  REQUIRE(c.clean.size() == t.examples.size());
  CHECK(c.clean[3].logits == forward_with_cache(p, t.examples[3].clean).logits);
}

TEST_CASE("train examples carry targets and positive sets") {
  const TaskSpec t = generate_task("parity-agreement", 8, 2);
  const auto exs = train_examples(t);
  REQUIRE(exs.size() == 8);
  for (std::size_t i = 0; i < exs.size(); i++) {
    CHECK(exs[i].tokens == t.examples[i].clean);
    CHECK(exs[i].target == -1);
    CHECK(exs[i].positive == t.examples[i].metric.positive);
  }
  const TaskSpec m = generate_task("mirror-retrieval-ab", 8, 2);
  for (const auto& ex : train_examples(m)) CHECK(ex.target >= ToyVocab::kEntityB);
}
