#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcpnet/autodiff.hpp"
#include "mcpnet/dataset.hpp"
#include "mcpnet/encoder.hpp"
#include "mcpnet/parallel.hpp"
#include "mcpnet/trainer.hpp"
#include "mcpnet/views.hpp"

namespace mcpnet {

inline constexpr std::size_t kRetrievalKs[] = {1, 5, 10, 20, 50};

struct EvalConfig {
  std::size_t clip_length = 16;
  bool three_clip = false;  // average start/centre/end clips instead of the centre clip
  std::size_t batch = 32;
  std::size_t threads = 1;
};

// One L2-normalised embedding per video, rows ordered as in the split.
struct FeatureBank {
  Tensor<double> rows;
  std::vector<std::uint32_t> labels;
  std::vector<std::uint32_t> ids;
  Split split = Split::Train;

  std::size_t size() const { return ids.size(); }
  std::size_t dim() const { return rows.dim(1); }
  std::span<const double> row(std::size_t i) const { return {rows.ptr() + i * dim(), dim()}; }
};

inline std::size_t center_start(std::size_t frames, std::size_t length) {
  if (frames < length) throw std::out_of_range("video has fewer frames than the clip length");
  return (frames - length) / 2;
}

inline FeatureBank extract_features(const DatasetStore& data, const ParameterStore<float>& store,
                                    const ArchConfig& arch = {}, const EvalConfig& cfg = {}) {
  if (data.size() == 0) throw std::invalid_argument("extract_features: empty split");
  const std::size_t n = data.size(), d = arch.feature_dim(), per = cfg.three_clip ? 3 : 1;
  std::vector<Clip> clips(n * per);
  for (std::size_t i = 0; i < n; ++i) {
    const VideoRecord& v = data.records[i];
    const std::size_t mid = center_start(v.frames.frames, cfg.clip_length);
    if (cfg.three_clip) {
      const std::size_t starts[3] = {0, mid, v.frames.frames - cfg.clip_length};
      for (std::size_t c = 0; c < 3; ++c) clips[i * 3 + c] = sample_clip(v, starts[c], 1, cfg.clip_length);
    } else {
      clips[i] = sample_clip(v, mid, 1, cfg.clip_length);
    }
  }
  const std::size_t batch = std::max<std::size_t>(1, cfg.batch);
  const std::size_t chunks = (clips.size() + batch - 1) / batch;
  std::vector<float> raw(clips.size() * d);
  parallel_for(chunks, cfg.threads, [&](std::size_t c) {
    std::vector<const Clip*> ptrs;
    for (std::size_t i = c * batch; i < std::min(clips.size(), (c + 1) * batch); ++i) ptrs.push_back(&clips[i]);
    const Tensor<float> f = backbone_features(store, ptrs, arch);
    std::copy(f.ptr(), f.ptr() + f.size(), raw.begin() + static_cast<std::ptrdiff_t>(c * batch * d));
  });

  FeatureBank bank;
  bank.rows = Tensor<double>(Shape{n, d});
  bank.split = data.split;
  for (std::size_t i = 0; i < n; ++i) {
    bank.ids.push_back(data.records[i].id);
    bank.labels.push_back(data.records[i].label);
    double* dst = bank.rows.ptr() + i * d;
    for (std::size_t c = 0; c < per; ++c)
      for (std::size_t j = 0; j < d; ++j) dst[j] += static_cast<double>(raw[(i * per + c) * d + j]);
    double ss = 0;
    for (std::size_t j = 0; j < d; ++j) ss += dst[j] * dst[j];
    // An all-zero feature (dead network) has no direction; leave it at zero.
    if (ss > 0) {
      const double norm = std::sqrt(ss);
      for (std::size_t j = 0; j < d; ++j) dst[j] /= norm;
    }
  }
  return bank;
}

// ---------------------------------------------------------------------------
// Retrieval

struct RetrievalResult {
  std::uint32_t query_id = 0;
  std::vector<std::uint32_t> neighbors;          // best first
  std::vector<std::pair<std::size_t, bool>> hits;  // (k, any of top-k shares the label)
};

// Bank indices ordered by descending cosine similarity, ties by lower id.
inline std::vector<std::size_t> rank_bank(std::span<const double> query, const FeatureBank& bank, std::size_t k) {
  if (bank.size() == 0) throw std::invalid_argument("retrieve: empty bank");
  if (k == 0 || k > bank.size()) throw std::invalid_argument("retrieve: k must be in [1, bank size]");
  if (query.size() != bank.dim()) throw std::invalid_argument("retrieve: query dimension mismatch");
  std::vector<double> sim(bank.size());
  for (std::size_t i = 0; i < bank.size(); ++i) sim[i] = dot_similarity(query, bank.row(i));
  std::vector<std::size_t> idx(bank.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (sim[a] != sim[b]) return sim[a] > sim[b];
                      return bank.ids[a] < bank.ids[b];
                    });
  idx.resize(k);
  return idx;
}

inline RetrievalResult retrieve(std::span<const double> query, std::uint32_t query_label, std::uint32_t query_id,
                                const FeatureBank& bank, std::size_t k) {
  const std::vector<std::size_t> top = rank_bank(query, bank, k);
  RetrievalResult r;
  r.query_id = query_id;
  bool hit = false;
  std::size_t next_k = 0;
  for (std::size_t i = 0; i < top.size(); ++i) {
    r.neighbors.push_back(bank.ids[top[i]]);
    hit = hit || bank.labels[top[i]] == query_label;
    while (next_k < std::size(kRetrievalKs) && kRetrievalKs[next_k] == i + 1) {
      r.hits.emplace_back(kRetrievalKs[next_k++], hit);
    }
  }
  if (std::find(std::begin(kRetrievalKs), std::end(kRetrievalKs), k) == std::end(kRetrievalKs)) r.hits.emplace_back(k, hit);
  return r;
}

struct RetrievalMetrics {
  std::vector<std::pair<std::size_t, double>> topk;  // (k, accuracy)

  double at(std::size_t k) const {
    for (const auto& [kk, acc] : topk)
      if (kk == k) return acc;
    throw std::out_of_range("retrieval metrics: no top-" + std::to_string(k));
  }
};

// Fraction of test queries with a same-label neighbour among the top k of the
// train bank, for every standard k not exceeding the bank size.
inline RetrievalMetrics retrieval_accuracy(const FeatureBank& test, const FeatureBank& train) {
  if (test.size() == 0 || train.size() == 0) throw std::invalid_argument("retrieval_accuracy: empty split");
  std::vector<std::size_t> ks;
  for (std::size_t k : kRetrievalKs)
    if (k <= train.size()) ks.push_back(k);
  std::vector<std::size_t> hits(ks.size(), 0);
  for (std::size_t q = 0; q < test.size(); ++q) {
    const RetrievalResult r = retrieve(test.row(q), test.labels[q], test.ids[q], train, ks.back());
    for (std::size_t i = 0; i < ks.size(); ++i)
      if (r.hits[i].second) ++hits[i];
  }
  RetrievalMetrics m;
  for (std::size_t i = 0; i < ks.size(); ++i)
    m.topk.emplace_back(ks[i], static_cast<double>(hits[i]) / static_cast<double>(test.size()));
  return m;
}

// Label-permutation control: the same features with labels shuffled.
inline FeatureBank permute_labels(FeatureBank bank, std::uint64_t seed) {
  Rng rng(seed);
  rng.shuffle(bank.labels);
  return bank;
}

// Normal-approximation 95% interval for a binomial proportion.
inline std::pair<double, double> binomial_interval(double p, std::size_t n) {
  const double half = 1.96 * std::sqrt(p * (1 - p) / static_cast<double>(n));
  return {p - half, p + half};
}

inline void write_retrieval_csv(std::ostream& os, const RetrievalMetrics& m) {
  os << "k,accuracy\n";
  char buf[64];
  for (const auto& [k, acc] : m.topk) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f\n", k, acc);
    os << buf;
  }
}

// ---------------------------------------------------------------------------
// Fine-tuned classification

struct FinetuneConfig {
  std::size_t hidden = 64;
  double lr = 0.005;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t epochs = 10;
  std::size_t batch_size = 16;
  std::size_t clip_length = 16;
  bool augment = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (hidden == 0) throw std::invalid_argument("finetune: hidden must be > 0");
    if (!(lr > 0)) throw std::invalid_argument("finetune: lr must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("finetune: momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw std::invalid_argument("finetune: weight_decay must be >= 0");
    if (epochs < 1) throw std::invalid_argument("finetune: epochs must be >= 1");
    if (batch_size < 2) throw std::invalid_argument("finetune: batch_size must be >= 2");
  }
};

struct ClassifyResult {
  double top1 = 0;
  std::vector<double> epoch_loss;
};

namespace detail {

template <class Real>
NodeId classifier_logits(Graph<Real>& g, const Bound& b, NodeId feature) {
  NodeId h = relu(g, affine(g, feature, b["cls.fc1.weight"], b["cls.fc1.bias"]));
  return affine(g, h, b["cls.fc2.weight"], b["cls.fc2.bias"]);
}

template <class Real>
NodeId cross_entropy(Graph<Real>& g, NodeId logits, std::vector<std::size_t> labels) {
  const NodeId m = row_max(g, logits);
  const NodeId lse = add(g, log(g, row_sum(g, exp(g, sub_rows(g, logits, m)))), m);
  return mean(g, sub(g, lse, gather(g, logits, std::move(labels))));
}

}  // namespace detail

// Appends a two-layer classifier to the backbone and fine-tunes everything.
// `pretrained` == nullptr trains the same network from a random init.
inline ClassifyResult finetune_classify(const ParameterStore<float>* pretrained, const DatasetStore& train,
                                        const DatasetStore& test, const FinetuneConfig& cfg,
                                        const ArchConfig& arch = {}) {
  cfg.validate();
  if (train.size() < 2 || test.size() == 0) throw std::invalid_argument("finetune: splits too small");
  const std::size_t classes = std::max(train.num_classes, test.num_classes);
  ParameterStore<float> store = pretrained ? *pretrained : init_params<float>(derive_seed(cfg.seed, "scratch-init"), arch);
  detail::add_affine(store, "cls", 1, arch.feature_dim(), cfg.hidden, derive_seed(cfg.seed, "classifier"));
  detail::add_affine(store, "cls", 2, cfg.hidden, classes, derive_seed(cfg.seed, "classifier"));
  Velocity<float> velocity;
  ClassifyResult result;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<std::size_t> order = epoch_order(train.size(), derive_seed(cfg.seed, "finetune"), epoch);
    double loss_sum = 0;
    std::size_t steps = 0;
    for (std::size_t begin = 0; begin + 1 < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      std::vector<Clip> clips;
      std::vector<std::size_t> labels;
      for (std::size_t i = begin; i < end; ++i) {
        const VideoRecord& v = train.records[order[i]];
        Rng rng(derive_seed(cfg.seed, "finetune-clip", epoch, v.id));
        const auto hi = static_cast<std::int64_t>(v.frames.frames) - static_cast<std::int64_t>(cfg.clip_length);
        if (hi < 0) throw std::out_of_range("finetune: video shorter than clip length");
        Clip c = sample_clip(v, static_cast<std::size_t>(rng.uniform_int(0, hi)), 1, cfg.clip_length);
        clips.push_back(cfg.augment ? augment(c, rng.next()) : std::move(c));
        labels.push_back(v.label);
      }
      Graph<float> g;
      const Bound b = bind(g, store);
      std::vector<BatchStats<float>> stats;
      const NodeId f = encode(g, b, store, g.input(clips_to_tensor<float>(clips)), arch, Mode::Train, &stats);
      const NodeId loss = detail::cross_entropy(g, detail::classifier_logits(g, b, f), labels);
      const float lv = g.value(loss).item();
      if (!std::isfinite(lv)) {
        throw TrainingDiverged("finetune diverged at epoch " + std::to_string(epoch) + ": loss is not finite");
      }
      try {
        sgd_step(store.params, velocity, g.backward(loss), cfg.lr, cfg.momentum, cfg.weight_decay);
      } catch (const NonFiniteGradient& e) {
        throw TrainingDiverged("finetune diverged at epoch " + std::to_string(epoch) + ": " + e.what());
      }
      update_running_stats(store, stats, arch);
      loss_sum += lv;
      ++steps;
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(steps));
  }

  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < test.size(); begin += 32) {
    std::vector<Clip> clips;
    for (std::size_t i = begin; i < std::min(test.size(), begin + 32); ++i) {
      const VideoRecord& v = test.records[i];
      clips.push_back(sample_clip(v, center_start(v.frames.frames, cfg.clip_length), 1, cfg.clip_length));
    }
    Graph<float> g;
    const Bound b = bind(g, store);
    const NodeId f = encode(g, b, store, g.input(clips_to_tensor<float>(clips)), arch, Mode::Eval);
    const Tensor<float>& logits = g.value(detail::classifier_logits(g, b, f));
    for (std::size_t i = 0; i < clips.size(); ++i) {
      const float* row = logits.ptr() + i * classes;
      const std::size_t pred = static_cast<std::size_t>(std::max_element(row, row + classes) - row);
      if (pred == test.records[begin + i].label) ++correct;
    }
  }
  result.top1 = static_cast<double>(correct) / static_cast<double>(test.size());
  return result;
}

// ---------------------------------------------------------------------------
// Ablation grid

// One pretrain+evaluate configuration. `pretrain` == false is the
// from-scratch baseline.
struct CellSpec {
  bool pretrain = true;
  TrainConfig train;

  std::string key(std::uint64_t seed) const {
    std::string k = pretrain ? train.describe() : std::string("scratch\n");
    return k + "cell_seed=" + std::to_string(seed);
  }
};

struct CellResult {
  bool ok = false;
  std::string error;
  double classify_top1 = 0;
  std::optional<double> retrieval_top1;
};

struct AblationSetup {
  const DatasetStore* train = nullptr;
  const DatasetStore* test = nullptr;
  TrainConfig base;
  FinetuneConfig finetune;
  ArchConfig arch;
  EvalConfig eval;
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

// Runs one cell for one seed. The seed replaces both the pretraining and the
// fine-tuning seed, so every cell is reproducible from it.
inline CellResult run_cell(const AblationSetup& setup, const CellSpec& spec, std::uint64_t seed) {
  CellResult r;
  try {
    FinetuneConfig ft = setup.finetune;
    ft.seed = seed;
    if (spec.pretrain) {
      TrainConfig tc = spec.train;
      tc.seed = seed;
      const Checkpoint ck = pretrain(*setup.train, tc, setup.arch);
      const FeatureBank tr = extract_features(*setup.train, ck.store, setup.arch, setup.eval);
      const FeatureBank te = extract_features(*setup.test, ck.store, setup.arch, setup.eval);
      r.retrieval_top1 = retrieval_accuracy(te, tr).at(1);
      r.classify_top1 = finetune_classify(&ck.store, *setup.train, *setup.test, ft, setup.arch).top1;
    } else {
      r.classify_top1 = finetune_classify(nullptr, *setup.train, *setup.test, ft, setup.arch).top1;
    }
    r.ok = true;
  } catch (const std::exception& e) {
    r.error = e.what();
  }
  return r;
}

// Evaluates every (cell, seed) pair once, sharing identical cells between
// tables; cells run concurrently on `eval.threads` workers.
class CellCache {
 public:
  explicit CellCache(const AblationSetup& setup) : setup_(setup) {}

  void request(const CellSpec& spec) {
    for (std::uint64_t s : setup_.seeds) {
      const std::string k = spec.key(s);
      if (!results_.count(k) && std::none_of(pending_.begin(), pending_.end(), [&](const auto& p) { return p.key == k; })) {
        pending_.push_back({k, spec, s});
      }
    }
  }

  void run(std::size_t threads, const std::function<void(const std::string&)>& log = {}) {
    std::vector<CellResult> out(pending_.size());
    std::mutex log_mutex;
    parallel_for(pending_.size(), threads, [&](std::size_t i) {
      out[i] = run_cell(setup_, pending_[i].spec, pending_[i].seed);
      if (log) {
        std::lock_guard lock(log_mutex);
        log(cell_label(pending_[i].spec) + " seed " + std::to_string(pending_[i].seed) +
            (out[i].ok ? " classify_top1=" + std::to_string(out[i].classify_top1) : " FAILED: " + out[i].error));
      }
    });
    for (std::size_t i = 0; i < pending_.size(); ++i) results_.emplace(pending_[i].key, std::move(out[i]));
    pending_.clear();
  }

  // Mean over seeds; nullopt if any seed failed.
  std::optional<double> mean_classify(const CellSpec& spec) const { return mean(spec, false); }
  std::optional<double> mean_retrieval(const CellSpec& spec) const { return mean(spec, true); }

  const CellResult& result(const CellSpec& spec, std::uint64_t seed) const { return results_.at(spec.key(seed)); }

  static std::string cell_label(const CellSpec& spec) {
    if (!spec.pretrain) return "scratch";
    return std::string(branch_mode_name(spec.train.branch_mode)) + "/" + cip_speed_mode_name(spec.train.cip_speed_mode) +
           "/" + view_mode_name(spec.train.view_mode) + "/t=" + std::to_string(spec.train.effective_t());
  }

 private:
  struct Pending {
    std::string key;
    CellSpec spec;
    std::uint64_t seed;
  };

  std::optional<double> mean(const CellSpec& spec, bool retrieval) const {
    double sum = 0;
    for (std::uint64_t s : setup_.seeds) {
      auto it = results_.find(spec.key(s));
      if (it == results_.end() || !it->second.ok) return std::nullopt;
      if (retrieval) {
        if (!it->second.retrieval_top1) return std::nullopt;
        sum += *it->second.retrieval_top1;
      } else {
        sum += it->second.classify_top1;
      }
    }
    return sum / static_cast<double>(setup_.seeds.size());
  }

  const AblationSetup& setup_;
  std::vector<Pending> pending_;
  std::map<std::string, CellResult> results_;
};

struct AblationGrid {
  bool table1 = true;
  bool table2 = true;
  bool table3 = true;
  std::vector<int> t_values{1, 2, 3, 4, 5};
};

struct Table2Row {
  const char* method;
  const char* configuration;
  CellSpec spec;
};

inline std::vector<Table2Row> table2_rows(const TrainConfig& base) {
  auto with = [&](BranchMode b, CipSpeedMode s) {
    CellSpec c;
    c.train = base;
    c.train.branch_mode = b;
    c.train.cip_speed_mode = s;
    return c;
  };
  CellSpec scratch;
  scratch.pretrain = false;
  return {
      {"w/o pre-training", "-", scratch},
      {"w/ CIP only", "different speed", with(BranchMode::CipOnly, CipSpeedMode::Different)},
      {"w/ MIP only", "-", with(BranchMode::MipOnly, CipSpeedMode::Different)},
      {"MIP + CIP", "random speed", with(BranchMode::Joint, CipSpeedMode::Random)},
      {"MIP + CIP", "same speed", with(BranchMode::Joint, CipSpeedMode::Same)},
      {"MIP + CIP", "different speed", with(BranchMode::Joint, CipSpeedMode::Different)},
  };
}

inline std::string format_cell(const std::optional<double>& v) {
  if (!v) return "NaN";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", *v);
  return buf;
}

// Runs the requested grids and writes table1.csv, table2.csv and table3.csv
// under `out_dir`. Failed cells are written as NaN; the grid carries on.
inline void ablate(const AblationSetup& setup, const AblationGrid& grid, const std::string& out_dir,
                   const std::function<void(const std::string&)>& log = {}) {
  CellCache cache(setup);
  std::vector<CellSpec> t_cells;
  for (int t : grid.t_values) {
    CellSpec c;
    c.train = setup.base;
    c.train.view_mode = ViewMode::LongRes;
    c.train.t = t;
    t_cells.push_back(c);
  }
  const auto t2 = table2_rows(setup.base);
  CellSpec scratch;
  scratch.pretrain = false;
  CellSpec residual, longres;
  residual.train = longres.train = setup.base;
  residual.train.view_mode = ViewMode::Residual;
  longres.train.view_mode = ViewMode::LongRes;

  if (grid.table1)
    for (const auto& c : t_cells) cache.request(c);
  if (grid.table2)
    for (const auto& r : t2) cache.request(r.spec);
  if (grid.table3)
    for (const auto* c : {&scratch, &residual, &longres}) cache.request(*c);
  cache.run(setup.eval.threads, log);

  std::filesystem::create_directories(out_dir);
  auto open = [&](const char* name) {
    std::ofstream os(std::filesystem::path(out_dir) / name);
    if (!os) throw std::runtime_error(std::string("cannot write ") + name);
    return os;
  };
  if (grid.table1) {
    auto os = open("table1.csv");
    os << "setting,t,retrieval_top1,classify_top1\n";
    for (const auto& c : t_cells) {
      os << "t=" << c.train.t << ',' << c.train.t << ',' << format_cell(cache.mean_retrieval(c)) << ','
         << format_cell(cache.mean_classify(c)) << '\n';
    }
  }
  if (grid.table2) {
    auto os = open("table2.csv");
    os << "method,configuration,classify_top1\n";
    for (const auto& r : t2) os << r.method << ',' << r.configuration << ',' << format_cell(cache.mean_classify(r.spec)) << '\n';
  }
  if (grid.table3) {
    auto os = open("table3.csv");
    os << "view,classify_top1\n";
    os << "Random," << format_cell(cache.mean_classify(scratch)) << '\n';
    os << "Residual," << format_cell(cache.mean_classify(residual)) << '\n';
    os << "LongRes," << format_cell(cache.mean_classify(longres)) << '\n';
  }
}

}  // namespace mcpnet
