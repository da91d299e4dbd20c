#include "circ/tasks.hpp"

#include <omp.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "circ/rng.hpp"
#include "json.hpp"

namespace circ {

std::string to_string(TaskFamily f) {
  return f == TaskFamily::Formal ? "formal" : "functional";
}

TaskFamily family_from_string(const std::string& s) {
  if (s == "formal") return TaskFamily::Formal;
  if (s == "functional") return TaskFamily::Functional;
  throw std::invalid_argument("bad task family: " + s);
}

// ----------------------------------------------------------------------
// vocabulary
// ----------------------------------------------------------------------

std::vector<std::string> ToyVocab::names() {
  std::vector<std::string> v(kSize);
  char buf[8];
  for (int i = 0; i < kNYears; i++) {
    std::snprintf(buf, sizeof buf, "y%02d", i);
    v[kYears + i] = buf;
  }
  for (int i = 0; i < kNEntities; i++) {
    std::snprintf(buf, sizeof buf, "a%02d", i);
    v[kEntityA + i] = buf;
    std::snprintf(buf, sizeof buf, "b%02d", i);
    v[kEntityB + i] = buf;
  }
  for (int i = 0; i < kNNames; i++) {
    std::snprintf(buf, sizeof buf, "n%02d", i);
    v[kNames + i] = buf;
  }
  for (int i = 0; i < kNLemmas; i++) {
    std::snprintf(buf, sizeof buf, "ns%02d", i);
    v[kNounSg + i] = buf;
    std::snprintf(buf, sizeof buf, "np%02d", i);
    v[kNounPl + i] = buf;
  }
  for (int i = 0; i < kNVerbs; i++) {
    std::snprintf(buf, sizeof buf, "vs%d", i);
    v[kVerbSg + i] = buf;
    std::snprintf(buf, sizeof buf, "vp%d", i);
    v[kVerbPl + i] = buf;
  }
  for (int i = 0; i < kNContext; i++) {
    std::snprintf(buf, sizeof buf, "c%d", i);
    v[kContext + i] = buf;
  }
  v[kArrow] = "->";
  v[kTo] = "to";
  v[kOf] = "of";
  return v;
}

// ----------------------------------------------------------------------
// generators
// ----------------------------------------------------------------------

namespace {

// Streams hang off the task seed: 1 reserves the shared mirror fact table,
// each kind shuffles its combination list on its own stream.
enum : std::uint64_t {
  kStreamFacts = 1,
  kStreamMirrorAb = 2,
  kStreamMirrorBa = 3,
  kStreamGreater = 4,
  kStreamRepeat = 5,
  kStreamParity = 6,
};

template <typename T>
void shuffle(std::vector<T>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; i--) {
    std::swap(v[i - 1], v[rng.below(i)]);
  }
}

std::vector<int> mirror_table(std::uint64_t seed) {
  std::vector<int> perm(ToyVocab::kNEntities);
  for (int i = 0; i < ToyVocab::kNEntities; i++) perm[i] = i;
  Rng rng = Rng(seed).fork(kStreamFacts);
  shuffle(perm, rng);
  return perm;
}

void check_capacity(int size, int capacity, const std::string& kind) {
  if (size < 1) throw std::invalid_argument("task size must be >= 1");
  if (size > capacity) {
    throw std::invalid_argument(kind + " supports at most " + std::to_string(capacity) +
                                " distinct examples");
  }
}

TaskSpec make_mirror(int size, std::uint64_t seed, bool ab) {
  const auto perm = mirror_table(seed);
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < ToyVocab::kNEntities; i++) {
    for (int j = 0; j < ToyVocab::kNEntities; j++) {
      if (i != j) pairs.push_back({i, j});
    }
  }
  check_capacity(size, static_cast<int>(pairs.size()),
                 ab ? "mirror-retrieval-ab" : "mirror-retrieval-ba");
  Rng rng = Rng(seed).fork(ab ? kStreamMirrorAb : kStreamMirrorBa);
  shuffle(pairs, rng);
  TaskSpec t;
  t.id = ab ? "mirror-retrieval-ab" : "mirror-retrieval-ba";
  t.family = TaskFamily::Functional;
  for (int n = 0; n < size; n++) {
    const auto [i, j] = pairs[n];
    TaskExample ex;
    if (ab) {
      ex.clean = {ToyVocab::kEntityA + i, ToyVocab::kArrow};
      ex.corrupted = {ToyVocab::kEntityA + j, ToyVocab::kArrow};
      ex.target = ToyVocab::kEntityB + perm[i];
      ex.metric.positive = {ToyVocab::kEntityB + perm[i]};
      ex.metric.negative = {ToyVocab::kEntityB + perm[j]};
    } else {
      ex.clean = {ToyVocab::kEntityB + perm[i], ToyVocab::kArrow};
      ex.corrupted = {ToyVocab::kEntityB + perm[j], ToyVocab::kArrow};
      ex.target = ToyVocab::kEntityA + i;
      ex.metric.positive = {ToyVocab::kEntityA + i};
      ex.metric.negative = {ToyVocab::kEntityA + j};
    }
    ex.metric.mode = MetricMode::LogitDiff;
    t.examples.push_back(std::move(ex));
  }
  t.token_names = ToyVocab::names();
  return t;
}

TaskSpec make_greater_than(int size, std::uint64_t seed) {
  std::vector<std::pair<int, int>> combos;  // (context, year)
  for (int c = 0; c < ToyVocab::kNContext; c++) {
    for (int y = 2; y <= 98; y++) combos.push_back({c, y});
  }
  check_capacity(size, static_cast<int>(combos.size()), "greater-than-2digit");
  Rng rng = Rng(seed).fork(kStreamGreater);
  shuffle(combos, rng);
  TaskSpec t;
  t.id = "greater-than-2digit";
  t.family = TaskFamily::Functional;
  for (int n = 0; n < size; n++) {
    const auto [c, y] = combos[n];
    TaskExample ex;
    ex.clean = {ToyVocab::kContext + c, ToyVocab::kYears + y, ToyVocab::kTo};
    ex.corrupted = {ToyVocab::kContext + c, ToyVocab::kYears + 1, ToyVocab::kTo};
    ex.target = ToyVocab::kYears + y + 1;
    ex.metric.mode = MetricMode::ProbDiff;
    for (int v = y + 1; v <= 99; v++) ex.metric.positive.push_back(ToyVocab::kYears + v);
    for (int v = 0; v <= y; v++) ex.metric.negative.push_back(ToyVocab::kYears + v);
    t.examples.push_back(std::move(ex));
  }
  t.token_names = ToyVocab::names();
  return t;
}

TaskSpec make_repeat_last(int size, std::uint64_t seed) {
  std::vector<std::array<int, 3>> combos;  // (a, b, which token repeats)
  for (int a = 0; a < ToyVocab::kNNames; a++) {
    for (int b = 0; b < ToyVocab::kNNames; b++) {
      if (a == b) continue;
      combos.push_back({a, b, 0});
      combos.push_back({a, b, 1});
    }
  }
  check_capacity(size, static_cast<int>(combos.size()), "repeat-last-distinct");
  Rng rng = Rng(seed).fork(kStreamRepeat);
  shuffle(combos, rng);
  TaskSpec t;
  t.id = "repeat-last-distinct";
  t.family = TaskFamily::Functional;
  for (int n = 0; n < size; n++) {
    const auto [a, b, form] = combos[n];
    const int ta = ToyVocab::kNames + a, tb = ToyVocab::kNames + b;
    TaskExample ex;
    // the answer is the token that appears once; the corruption flips the
    // final token, which flips the answer
    if (form == 0) {
      ex.clean = {ta, tb, tb};
      ex.corrupted = {ta, tb, ta};
      ex.target = ta;
      ex.metric.positive = {ta};
      ex.metric.negative = {tb};
    } else {
      ex.clean = {ta, tb, ta};
      ex.corrupted = {ta, tb, tb};
      ex.target = tb;
      ex.metric.positive = {tb};
      ex.metric.negative = {ta};
    }
    ex.metric.mode = MetricMode::LogitDiff;
    t.examples.push_back(std::move(ex));
  }
  t.token_names = ToyVocab::names();
  return t;
}

TaskSpec make_parity(int size, std::uint64_t seed) {
  std::vector<std::array<int, 4>> combos;  // (subject lemma, parity, attractor lemma, parity)
  for (int i = 0; i < ToyVocab::kNLemmas; i++) {
    for (int s = 0; s < 2; s++) {
      for (int j = 0; j < ToyVocab::kNLemmas; j++) {
        for (int a = 0; a < 2; a++) combos.push_back({i, s, j, a});
      }
    }
  }
  check_capacity(size, static_cast<int>(combos.size()), "parity-agreement");
  Rng rng = Rng(seed).fork(kStreamParity);
  shuffle(combos, rng);
  auto noun = [](int lemma, int plural) {
    return (plural ? ToyVocab::kNounPl : ToyVocab::kNounSg) + lemma;
  };
  TaskSpec t;
  t.id = "parity-agreement";
  t.family = TaskFamily::Formal;
  for (int n = 0; n < size; n++) {
    const auto [i, s, j, a] = combos[n];
    TaskExample ex;
    ex.clean = {noun(i, s), ToyVocab::kOf, noun(j, a)};
    ex.corrupted = {noun(i, 1 - s), ToyVocab::kOf, noun(j, a)};
    ex.metric.mode = MetricMode::ProbDiff;
    for (int v = 0; v < ToyVocab::kNVerbs; v++) {
      ex.metric.positive.push_back((s ? ToyVocab::kVerbPl : ToyVocab::kVerbSg) + v);
      ex.metric.negative.push_back((s ? ToyVocab::kVerbSg : ToyVocab::kVerbPl) + v);
    }
    // no single answer token: training spreads mass over the positive forms
    ex.target = -1;
    t.examples.push_back(std::move(ex));
  }
  t.token_names = ToyVocab::names();
  return t;
}

}  // namespace

TaskSpec generate_task(const std::string& kind, int size, std::uint64_t seed) {
  if (kind == "mirror-retrieval-ab") return make_mirror(size, seed, true);
  if (kind == "mirror-retrieval-ba") return make_mirror(size, seed, false);
  if (kind == "greater-than-2digit") return make_greater_than(size, seed);
  if (kind == "repeat-last-distinct") return make_repeat_last(size, seed);
  if (kind == "parity-agreement") return make_parity(size, seed);
  throw std::invalid_argument("unknown task kind: " + kind);
}

// ----------------------------------------------------------------------
// io
// ----------------------------------------------------------------------

namespace {

void validate_example(const TaskExample& ex) {
  if (ex.clean.empty()) throw std::invalid_argument("example with empty clean sequence");
  if (ex.clean.size() != ex.corrupted.size()) {
    throw std::invalid_argument("clean and corrupted sequences differ in length");
  }
  if (ex.metric.positive.empty()) {
    throw std::invalid_argument("example with empty positive set");
  }
}

nlohmann::ordered_json example_to_json(const TaskExample& ex) {
  nlohmann::ordered_json j;
  j["clean"] = ex.clean;
  j["corrupted"] = ex.corrupted;
  j["positive"] = ex.metric.positive;
  j["negative"] = ex.metric.negative;
  if (ex.metric.mode != MetricMode::LogitDiff) j["mode"] = to_string(ex.metric.mode);
  if (ex.target >= 0) j["target"] = ex.target;
  return j;
}

TaskExample example_from_json(const nlohmann::json& j) {
  TaskExample ex;
  ex.clean = j.at("clean").get<std::vector<int>>();
  ex.corrupted = j.at("corrupted").get<std::vector<int>>();
  ex.metric.positive = j.at("positive").get<std::vector<int>>();
  ex.metric.negative = j.at("negative").get<std::vector<int>>();
  ex.metric.mode = metric_mode_from_string(j.value("mode", "logit_diff"));
  ex.target = j.value("target", -1);
  validate_example(ex);
  return ex;
}

}  // namespace

void save_task(const TaskSpec& task, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  for (const auto& ex : task.examples) f << example_to_json(ex).dump() << "\n";
}

TaskSpec load_task(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + path);
  TaskSpec t;
  t.id = std::filesystem::path(path).stem().string();
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    lineno++;
    if (line.empty()) continue;
    try {
      t.examples.push_back(example_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (t.examples.empty()) throw std::runtime_error("no examples in " + path);
  return t;
}

void save_task_set(const std::vector<TaskSpec>& tasks, const std::string& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::ordered_json manifest;
  manifest["tasks"] = nlohmann::ordered_json::array();
  for (const auto& t : tasks) {
    const std::string fname = t.id + ".jsonl";
    save_task(t, dir + "/" + fname);
    nlohmann::ordered_json e;
    e["id"] = t.id;
    e["family"] = to_string(t.family);
    e["path"] = fname;
    if (!t.token_names.empty()) e["tokens"] = t.token_names;
    manifest["tasks"].push_back(e);
  }
  std::ofstream f(dir + "/manifest.json", std::ios::binary);
  if (!f) throw std::runtime_error("cannot write manifest in " + dir);
  f << manifest.dump(2) << "\n";
}

std::vector<TaskSpec> load_task_set(const std::string& manifest_path) {
  std::ifstream f(manifest_path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read " + manifest_path);
  nlohmann::json manifest;
  f >> manifest;
  const auto dir = std::filesystem::path(manifest_path).parent_path();
  std::vector<TaskSpec> tasks;
  for (const auto& e : manifest.at("tasks")) {
    TaskSpec t = load_task((dir / e.at("path").get<std::string>()).string());
    t.id = e.at("id").get<std::string>();
    t.family = family_from_string(e.at("family").get<std::string>());
    if (e.contains("tokens")) t.token_names = e.at("tokens").get<std::vector<std::string>>();
    tasks.push_back(std::move(t));
  }
  return tasks;
}

// ----------------------------------------------------------------------
// evaluation
// ----------------------------------------------------------------------

double eval_metric(const ModelParams& params, const TaskSpec& task, bool corrupted_inputs) {
  if (task.examples.empty()) throw std::invalid_argument("task with no examples");
  const int n = static_cast<int>(task.examples.size());
  std::vector<double> vals(n);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; i++) {
    const auto& ex = task.examples[i];
    const auto cache =
        forward_with_cache(params, corrupted_inputs ? ex.corrupted : ex.clean);
    vals[i] = metric_value(cache, ex.metric);
  }
  double s = 0.0;
  for (const double v : vals) s += v;
  return s / n;
}

double eval_accuracy(const ModelParams& params, const TaskSpec& task) {
  if (task.examples.empty()) throw std::invalid_argument("task with no examples");
  const int n = static_cast<int>(task.examples.size());
  std::vector<char> ok(n);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; i++) {
    const auto& ex = task.examples[i];
    const auto cache = forward_with_cache(params, ex.clean);
    MetricSpec prob = ex.metric;
    prob.mode = MetricMode::ProbDiff;
    prob.scale = 1.0;
    prob.offset = 0.0;
    ok[i] = metric_value(cache, prob) > 0.0;
  }
  int hits = 0;
  for (const char c : ok) hits += c;
  return double(hits) / n;
}

std::vector<TrainExample> train_examples(const TaskSpec& task) {
  std::vector<TrainExample> out;
  out.reserve(task.examples.size());
  for (const auto& ex : task.examples) {
    out.push_back({ex.clean, ex.target, ex.metric.positive});
  }
  return out;
}

TaskCaches build_task_caches(const ModelParams& params, const TaskSpec& task) {
  if (task.examples.empty()) throw std::invalid_argument("task with no examples");
  const int n = static_cast<int>(task.examples.size());
  TaskCaches tc;
  tc.clean.resize(n);
  tc.corr.resize(n);
  tc.m_clean.resize(n);
  tc.m_corr.resize(n);
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; i++) {
    const auto& ex = task.examples[i];
    validate_example(ex);
    tc.clean[i] = forward_with_cache(params, ex.clean);
    tc.corr[i] = forward_with_cache(params, ex.corrupted);
    tc.m_clean[i] = metric_value(tc.clean[i], ex.metric);
    tc.m_corr[i] = metric_value(tc.corr[i], ex.metric);
  }
  double sc = 0.0, sx = 0.0;
  for (int i = 0; i < n; i++) {
    sc += tc.m_clean[i];
    sx += tc.m_corr[i];
  }
  tc.mean_clean = sc / n;
  tc.mean_corr = sx / n;
  return tc;
}

}  // namespace circ
