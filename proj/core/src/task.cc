#include "ranktuner/task.h"

#include <algorithm>
#include <set>

#include "ranktuner/error.h"
#include "ranktuner/random.h"

namespace ranktuner {
namespace {

constexpr int kFirstDataToken = static_cast<int>(kNumTaskKinds);
constexpr std::size_t kMaxAttempts = 100000;

struct Alphabet {
  int first = kFirstDataToken;
  int size = 0;
  int at(std::size_t i) const { return first + static_cast<int>(i); }
};

std::vector<int> random_tokens(Rng& rng, const Alphabet& a, std::size_t n) {
  std::vector<int> t(n);
  for (auto& v : t) v = a.at(rng.below(a.size));
  return t;
}

std::vector<int> distinct_tokens(Rng& rng, const Alphabet& a, std::size_t n) {
  std::vector<int> pool(a.size);
  for (int i = 0; i < a.size; ++i) pool[i] = a.at(i);
  // Partial Fisher-Yates.
  for (std::size_t i = 0; i < n; ++i) {
    std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
  }
  return {pool.begin(), pool.begin() + n};
}

std::vector<int> sample_data(TaskKind kind, int label, Rng& rng, const Alphabet& a,
                             std::size_t n, std::size_t vocab) {
  switch (kind) {
    case TaskKind::kParityOfMarked: {
      // Marked count drawn uniformly among counts of the requested parity,
      // not binomially: low-order statistics of the count then carry signal.
      std::vector<std::size_t> counts;
      for (std::size_t c = static_cast<std::size_t>(label); c <= n; c += 2) counts.push_back(c);
      const std::size_t marked = counts[rng.below(counts.size())];
      const int half = a.size / 2;
      std::vector<int> t(n);
      for (std::size_t i = 0; i < n; ++i) {
        t[i] = i < marked ? a.at(half + rng.below(a.size - half)) : a.at(rng.below(half));
      }
      rng.shuffle(t);
      return t;
    }
    case TaskKind::kMajorityToken: {
      for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
        auto t = random_tokens(rng, a, n);
        std::vector<int> full{0};
        full.insert(full.end(), t.begin(), t.end());
        if (label_for(kind, full, vocab) == label) return t;
      }
      throw ConfigError("cannot generate a sequence with the requested label");
    }
    case TaskKind::kDuplicateDetect: {
      if (label == 0) return distinct_tokens(rng, a, n);
      auto t = distinct_tokens(rng, a, n - 1);
      const int dup = t[rng.below(t.size())];
      t.insert(t.begin() + static_cast<std::ptrdiff_t>(rng.below(t.size() + 1)), dup);
      return t;
    }
    case TaskKind::kSortedOrder: {
      if (label == 1) {
        auto t = random_tokens(rng, a, n);
        std::sort(t.begin(), t.end());
        return t;
      }
      const bool near_sorted = rng.below(2) == 0;
      for (std::size_t attempt = 0; attempt < kMaxAttempts; ++attempt) {
        auto t = random_tokens(rng, a, n);
        if (near_sorted) {
          std::sort(t.begin(), t.end());
          const std::size_t i = rng.below(n - 1);
          if (t[i] == t[i + 1]) continue;
          std::swap(t[i], t[i + 1]);
        }
        if (!std::is_sorted(t.begin(), t.end())) return t;
      }
      throw ConfigError("cannot generate an unsorted sequence");
    }
  }
  throw ConfigError("unknown task kind");
}

}  // namespace

std::string_view task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::kParityOfMarked: return "parity-of-marked";
    case TaskKind::kMajorityToken: return "majority-token";
    case TaskKind::kDuplicateDetect: return "duplicate-detect";
    case TaskKind::kSortedOrder: return "sorted-order";
  }
  return "unknown";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "parity-of-marked" || name == "parity") return TaskKind::kParityOfMarked;
  if (name == "majority-token" || name == "majority") return TaskKind::kMajorityToken;
  if (name == "duplicate-detect" || name == "duplicate") return TaskKind::kDuplicateDetect;
  if (name == "sorted-order" || name == "sorted") return TaskKind::kSortedOrder;
  throw ConfigError("unknown task kind \"" + std::string(name) + "\"");
}

std::string_view split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValidation: return "validation";
    case Split::kTest: return "test";
  }
  return "unknown";
}

const std::vector<Example>& Task::split(Split s) const {
  switch (s) {
    case Split::kTrain: return train;
    case Split::kValidation: return validation;
    case Split::kTest: return test;
  }
  throw InputError("unknown split");
}

int label_for(TaskKind kind, std::span<const int> tokens, std::size_t vocab_size) {
  if (tokens.empty()) throw InputError("label_for: empty sequence");
  const auto data = tokens.subspan(1);
  // Marked tokens: the upper half of the data alphabet.
  const int upper = kFirstDataToken + (static_cast<int>(vocab_size) - kFirstDataToken) / 2;
  switch (kind) {
    case TaskKind::kParityOfMarked: {
      std::size_t marked = 0;
      for (int t : data) marked += (t >= upper) ? 1 : 0;
      return static_cast<int>(marked % 2);
    }
    case TaskKind::kMajorityToken: {
      std::ptrdiff_t balance = 0;
      for (int t : data) balance += (t >= upper) ? 1 : -1;
      return balance > 0 ? 1 : 0;
    }
    case TaskKind::kDuplicateDetect: {
      std::set<int> seen;
      for (int t : data) {
        if (!seen.insert(t).second) return 1;
      }
      return 0;
    }
    case TaskKind::kSortedOrder:
      return std::is_sorted(data.begin(), data.end()) ? 1 : 0;
  }
  throw ConfigError("unknown task kind");
}

Task make_task(TaskKind kind, std::uint64_t seed, const TaskSizes& sizes,
               std::size_t vocab_size) {
  if (sizes.train == 0 || sizes.validation == 0 || sizes.test == 0) {
    throw ConfigError("make_task: every split needs at least one example");
  }
  if (sizes.seq_len < 3) throw ConfigError("make_task: seq_len must be >= 3");
  if (vocab_size < kNumTaskKinds + 2) {
    throw ConfigError("make_task: vocabulary too small for the task alphabet");
  }
  const Alphabet alphabet{kFirstDataToken,
                          static_cast<int>(vocab_size) - kFirstDataToken};
  const std::size_t n = sizes.seq_len - 1;
  if (kind == TaskKind::kDuplicateDetect &&
      n > static_cast<std::size_t>(alphabet.size)) {
    throw ConfigError("make_task: duplicate-detect needs seq_len - 1 <= alphabet");
  }

  Task task;
  task.kind = kind;
  task.seed = seed;
  task.vocab_size = vocab_size;
  const int marker = static_cast<int>(kind);
  std::set<std::vector<int>> seen;

  auto fill = [&](std::vector<Example>& out, std::size_t count, Split split) {
    Rng rng(seed, std::string("task/") + std::string(task_kind_name(kind)) + "/" +
                      std::string(split_name(split)));
    std::vector<int> labels(count);
    for (std::size_t i = 0; i < count; ++i) labels[i] = static_cast<int>(i % 2);
    rng.shuffle(labels);
    out.reserve(count);
    for (int label : labels) {
      std::size_t attempt = 0;
      while (true) {
        if (++attempt > kMaxAttempts) {
          throw ConfigError("make_task: sequence space exhausted; shrink the splits");
        }
        std::vector<int> tokens{marker};
        auto data = sample_data(kind, label, rng, alphabet, n, vocab_size);
        tokens.insert(tokens.end(), data.begin(), data.end());
        if (!seen.insert(tokens).second) continue;
        out.push_back({std::move(tokens), label});
        break;
      }
    }
  };
  fill(task.train, sizes.train, Split::kTrain);
  fill(task.validation, sizes.validation, Split::kValidation);
  fill(task.test, sizes.test, Split::kTest);
  return task;
}

Task make_task(std::string_view kind, std::uint64_t seed, const TaskSizes& sizes,
               std::size_t vocab_size) {
  return make_task(parse_task_kind(kind), seed, sizes, vocab_size);
}

void to_json(nlohmann::json& j, const Example& e) {
  j = nlohmann::json{{"tokens", e.tokens}, {"label", e.label}};
}

void from_json(const nlohmann::json& j, Example& e) {
  j.at("tokens").get_to(e.tokens);
  j.at("label").get_to(e.label);
}

void to_json(nlohmann::json& j, const Task& t) {
  j = nlohmann::json{{"kind", task_kind_name(t.kind)},
                     {"seed", t.seed},
                     {"vocab_size", t.vocab_size},
                     {"train", t.train},
                     {"validation", t.validation},
                     {"test", t.test}};
}

void from_json(const nlohmann::json& j, Task& t) {
  t.kind = parse_task_kind(j.at("kind").get<std::string>());
  j.at("seed").get_to(t.seed);
  j.at("vocab_size").get_to(t.vocab_size);
  j.at("train").get_to(t.train);
  j.at("validation").get_to(t.validation);
  j.at("test").get_to(t.test);
}

}  // namespace ranktuner
