#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcpnet/autodiff.hpp"
#include "mcpnet/dataset.hpp"
#include "mcpnet/encoder.hpp"
#include "mcpnet/objectives.hpp"
#include "mcpnet/rng.hpp"
#include "mcpnet/views.hpp"

namespace mcpnet {

enum class BranchMode { MipOnly, CipOnly, Joint };
enum class ViewMode { Residual, LongRes };

inline const char* branch_mode_name(BranchMode m) {
  switch (m) {
    case BranchMode::MipOnly: return "MIP_ONLY";
    case BranchMode::CipOnly: return "CIP_ONLY";
    case BranchMode::Joint: return "JOINT";
  }
  return "?";
}

inline const char* cip_speed_mode_name(CipSpeedMode m) {
  switch (m) {
    case CipSpeedMode::Different: return "DIFFERENT";
    case CipSpeedMode::Same: return "SAME";
    case CipSpeedMode::Random: return "RANDOM";
  }
  return "?";
}

inline const char* view_mode_name(ViewMode m) { return m == ViewMode::Residual ? "RESIDUAL" : "LONG_RES"; }

struct TrainConfig {
  std::size_t batch_size = 16;
  double base_lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::size_t epochs = 20;
  std::uint64_t seed = 0;
  LossConfig loss;
  BranchMode branch_mode = BranchMode::Joint;
  CipSpeedMode cip_speed_mode = CipSpeedMode::Different;
  int t = 4;
  ViewMode view_mode = ViewMode::LongRes;
  std::size_t clip_length = 16;
  bool similarity_sampling = false;
  bool augment = true;
  // Save an intermediate checkpoint every this many epochs (0 = final only).
  std::size_t checkpoint_every = 0;

  // RESIDUAL is the t = 1 special case of the long-range view.
  int effective_t() const { return view_mode == ViewMode::Residual ? 1 : t; }

  // Weight of the MIP term actually optimised; single-branch modes put all
  // weight on their branch.
  double effective_alpha() const {
    switch (branch_mode) {
      case BranchMode::MipOnly: return 1.0;
      case BranchMode::CipOnly: return 0.0;
      case BranchMode::Joint: return loss.alpha;
    }
    return loss.alpha;
  }

  SamplerConfig sampler() const {
    SamplerConfig s;
    s.length = clip_length;
    s.t = effective_t();
    s.similarity_sampling = similarity_sampling;
    s.cip_speed_mode = cip_speed_mode;
    return s;
  }

  void validate() const {
    if (batch_size < 2) throw std::invalid_argument("train: batch_size must be >= 2");
    if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
    if (!(base_lr > 0)) throw std::invalid_argument("train: base_lr must be > 0");
    if (!(momentum >= 0 && momentum < 1)) throw std::invalid_argument("train: momentum must be in [0, 1)");
    if (!(weight_decay >= 0)) throw std::invalid_argument("train: weight_decay must be >= 0");
    if (t < 1) throw std::invalid_argument("train: t must be >= 1");
    if (clip_length < 2) throw std::invalid_argument("train: clip_length must be >= 2");
    loss.validate();
  }

  // Canonical text form; its hash is the checkpoint fingerprint.
  std::string describe() const {
    std::ostringstream os;
    os.precision(17);
    os << "batch_size=" << batch_size << "\nbase_lr=" << base_lr << "\nmomentum=" << momentum
       << "\nweight_decay=" << weight_decay << "\nepochs=" << epochs << "\nseed=" << seed
       << "\ngamma=" << loss.gamma << "\ntau=" << loss.tau << "\nalpha=" << loss.alpha
       << "\nbranch_mode=" << branch_mode_name(branch_mode) << "\ncip_speed_mode=" << cip_speed_mode_name(cip_speed_mode)
       << "\nt=" << t << "\nview_mode=" << view_mode_name(view_mode) << "\nclip_length=" << clip_length
       << "\nsimilarity_sampling=" << similarity_sampling << "\naugment=" << augment << '\n';
    return os.str();
  }
};

inline std::string fingerprint(const std::string& text) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(text)));
  return buf;
}

inline double lr_schedule(double base, std::size_t b) {
  if (b < 1) throw std::invalid_argument("lr_schedule: batch size must be >= 1");
  // b / (32 / base) rather than base * b / 32: for decimal bases such as 0.1
  // the divisor rounds to an integer and the result is the nearest double.
  return static_cast<double>(b) / (32.0 / base);
}

// ---------------------------------------------------------------------------
// Batches

struct Batch {
  std::vector<std::uint32_t> video_ids;
  std::vector<MipTriplet> mip;  // empty in CIP_ONLY mode
  std::vector<CipPair> cip;     // empty in MIP_ONLY mode
};

inline std::size_t steps_per_epoch(std::size_t videos, std::size_t b) { return videos / b; }

// Video indices of one epoch, in visiting order.
inline std::vector<std::size_t> epoch_order(std::size_t videos, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(videos);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(derive_seed(seed, "epoch-order", epoch));
  rng.shuffle(order);
  return order;
}

inline Batch make_batch(const DatasetStore& data, const TrainConfig& cfg, std::size_t epoch, std::size_t step) {
  const std::size_t b = cfg.batch_size;
  if (data.size() < b) {
    throw std::invalid_argument("make_batch: dataset has " + std::to_string(data.size()) + " videos, batch needs " +
                                std::to_string(b));
  }
  if (step >= steps_per_epoch(data.size(), b)) throw std::out_of_range("make_batch: step beyond end of epoch");
  const std::vector<std::size_t> order = epoch_order(data.size(), cfg.seed, epoch);
  const SamplerConfig sampler = cfg.sampler();
  auto aug = [&](Clip c, std::uint32_t id, int which) {
    return cfg.augment ? augment(c, derive_seed(cfg.seed, "augment", epoch, id, which)) : c;
  };
  Batch batch;
  for (std::size_t i = step * b; i < (step + 1) * b; ++i) {
    const VideoRecord& v = data.records[order[i]];
    batch.video_ids.push_back(v.id);
    if (cfg.branch_mode != BranchMode::CipOnly) {
      MipTriplet m = sample_mip_triplet(v, derive_seed(cfg.seed, "mip", epoch, v.id), sampler);
      batch.mip.push_back({aug(m.rgb, v.id, 0), aug(m.lres_same, v.id, 1), aug(m.lres_diff, v.id, 2)});
    }
    if (cfg.branch_mode != BranchMode::MipOnly) {
      CipPair c = sample_cip_pair(v, derive_seed(cfg.seed, "cip", epoch, v.id), sampler);
      batch.cip.push_back({aug(c.rgb, v.id, 3), aug(c.lres, v.id, 4)});
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Optimiser

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& param)
      : std::runtime_error("non-finite gradient for parameter '" + param + "'"), param_(param) {}
  const std::string& parameter() const { return param_; }

 private:
  std::string param_;
};

template <class Real>
using Velocity = std::map<std::string, Tensor<Real>>;

// v <- momentum v + g + wd p; p <- p - lr v. Only parameters with a gradient
// entry move, so branches that took no part in the loss stay bit-identical.
// The whole step is rejected if any gradient is non-finite.
template <class Real>
void sgd_step(std::map<std::string, Tensor<Real>>& params, Velocity<Real>& velocity, const Gradients<Real>& grads,
              double lr, double momentum, double weight_decay) {
  for (const auto& [name, grad] : grads) {
    if (!grad.all_finite()) throw NonFiniteGradient(name);
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("sgd_step: gradient for unknown parameter '" + name + "'");
    if (it->second.shape() != grad.shape()) throw std::invalid_argument("sgd_step: shape mismatch for '" + name + "'");
  }
  const Real lr_r = static_cast<Real>(lr), mom = static_cast<Real>(momentum), wd = static_cast<Real>(weight_decay);
  for (const auto& [name, grad] : grads) {
    Tensor<Real>& p = params.at(name);
    auto [vit, _] = velocity.try_emplace(name, p.shape());
    Tensor<Real>& v = vit->second;
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = mom * v[i] + grad[i] + wd * p[i];
      p[i] -= lr_r * v[i];
    }
  }
}

// ---------------------------------------------------------------------------
// One optimisation step

struct StepResult {
  LossValue loss;
  double lr = 0;
};

namespace detail {

template <class Real>
struct BranchGraph {
  NodeId mip{}, cip{}, total{};
  bool has_mip = false, has_cip = false;
};

}  // namespace detail

// Builds the joint objective for a batch on graph `g`. RGB clips and residual
// clips go through the shared encoder as two groups so each view keeps its
// own batch statistics; the stats of both calls are appended to `stats`.
template <class Real>
detail::BranchGraph<Real> build_objective(Graph<Real>& g, const Bound& bound, const ParameterStore<Real>& store,
                                          const Batch& batch, const TrainConfig& cfg, const ArchConfig& arch,
                                          std::vector<std::vector<BatchStats<Real>>>* stats = nullptr) {
  const bool use_mip = cfg.branch_mode != BranchMode::CipOnly, use_cip = cfg.branch_mode != BranchMode::MipOnly;
  const std::size_t nm = use_mip ? batch.mip.size() : 0, nc = use_cip ? batch.cip.size() : 0;
  std::vector<const Clip*> rgb, res;
  for (std::size_t i = 0; i < nm; ++i) rgb.push_back(&batch.mip[i].rgb);
  for (std::size_t i = 0; i < nc; ++i) rgb.push_back(&batch.cip[i].rgb);
  for (std::size_t i = 0; i < nm; ++i) res.push_back(&batch.mip[i].lres_same);
  for (std::size_t i = 0; i < nm; ++i) res.push_back(&batch.mip[i].lres_diff);
  for (std::size_t i = 0; i < nc; ++i) res.push_back(&batch.cip[i].lres);

  auto run = [&](const std::vector<const Clip*>& clips) {
    std::vector<BatchStats<Real>> st;
    NodeId f = encode(g, bound, store, g.input(clips_to_tensor<Real>(clips)), arch, Mode::Train, &st);
    if (stats) stats->push_back(std::move(st));
    return f;
  };
  const NodeId f_rgb = run(rgb), f_res = run(res);

  detail::BranchGraph<Real> out;
  if (use_mip) {
    const NodeId r = project_mip(g, bound, slice_rows(g, f_rgb, 0, nm), arch);
    const NodeId l = project_mip(g, bound, slice_rows(g, f_res, 0, 2 * nm), arch);
    out.mip = mip_loss(g, r, slice_rows(g, l, 0, nm), slice_rows(g, l, nm, 2 * nm), cfg.loss.gamma);
    out.has_mip = true;
  }
  if (use_cip) {
    const NodeId r = project_cip(g, bound, slice_rows(g, f_rgb, nm, nm + nc), arch);
    const NodeId l = project_cip(g, bound, slice_rows(g, f_res, 2 * nm, 2 * nm + nc), arch);
    out.cip = cip_loss(g, r, l, cfg.loss.tau);
    out.has_cip = true;
  }
  if (out.has_mip && out.has_cip) {
    out.total = combined_loss(g, out.mip, out.cip, cfg.effective_alpha());
  } else {
    out.total = out.has_mip ? out.mip : out.cip;
  }
  return out;
}

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

template <class Real>
StepResult train_step(ParameterStore<Real>& store, Velocity<Real>& velocity, const Batch& batch,
                      const TrainConfig& cfg, const ArchConfig& arch) {
  Graph<Real> g;
  const Bound bound = bind(g, store);
  std::vector<std::vector<BatchStats<Real>>> stats;
  detail::BranchGraph<Real> obj;
  try {
    obj = build_objective(g, bound, store, batch, cfg, arch, &stats);
  } catch (const std::domain_error& e) {
    throw TrainingDiverged(std::string("embedding collapsed: ") + e.what());
  }
  StepResult res;
  res.loss.mip = obj.has_mip ? static_cast<double>(g.value(obj.mip).item()) : 0.0;
  res.loss.cip = obj.has_cip ? static_cast<double>(g.value(obj.cip).item()) : 0.0;
  res.loss.total = static_cast<double>(g.value(obj.total).item());
  if (!std::isfinite(res.loss.total)) {
    std::string where;
    if (auto bad = g.first_non_finite()) where = std::string(" (first at ") + op_name(g.kind(*bad)) + ")";
    throw TrainingDiverged("loss is not finite" + where);
  }
  const Gradients<Real> grads = g.backward(obj.total);
  res.lr = lr_schedule(cfg.base_lr, cfg.batch_size);
  sgd_step(store.params, velocity, grads, res.lr, cfg.momentum, cfg.weight_decay);
  for (const auto& st : stats) update_running_stats(store, st, arch);
  return res;
}

// ---------------------------------------------------------------------------
// Pretraining loop

struct EpochLoss {
  double mip = 0, cip = 0, total = 0;
  friend bool operator==(const EpochLoss&, const EpochLoss&) = default;
};

struct Checkpoint {
  ParameterStore<float> store;
  std::size_t epoch = 0;
  std::vector<EpochLoss> history;
  std::string fingerprint;
};

inline std::string format_metrics_row(std::size_t epoch, std::size_t step, const LossValue& l, double lr) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%zu,%.6g,%.6g,%.6g,%.6g\n", epoch, step, l.mip, l.cip, l.total, lr);
  return buf;
}

inline constexpr const char* kMetricsHeader = "epoch,step,mip_loss,cip_loss,total_loss,lr\n";

// Sidecar of a checkpoint file: epoch, fingerprint and the loss history.
inline void write_checkpoint_meta(std::ostream& os, const Checkpoint& ck) {
  os << "epoch " << ck.epoch << "\nfingerprint " << ck.fingerprint << '\n';
  char buf[128];
  for (std::size_t e = 0; e < ck.history.size(); ++e) {
    const EpochLoss& h = ck.history[e];
    std::snprintf(buf, sizeof buf, "loss %zu %.17g %.17g %.17g\n", e, h.mip, h.cip, h.total);
    os << buf;
  }
}

inline void read_checkpoint_meta(std::istream& is, Checkpoint& ck) {
  std::string key;
  ck.history.clear();
  while (is >> key) {
    if (key == "epoch") {
      is >> ck.epoch;
    } else if (key == "fingerprint") {
      is >> ck.fingerprint;
    } else if (key == "loss") {
      std::size_t e;
      EpochLoss h;
      is >> e >> h.mip >> h.cip >> h.total;
      ck.history.push_back(h);
    } else {
      throw std::runtime_error("checkpoint meta: unknown key '" + key + "'");
    }
    if (!is) throw std::runtime_error("checkpoint meta: malformed value for '" + key + "'");
  }
}

inline void save_full_checkpoint(const std::string& path, const Checkpoint& ck) {
  save_checkpoint(path, ck.store);
  std::ofstream meta(path + ".meta");
  if (!meta) throw std::runtime_error("cannot open " + path + ".meta for writing");
  write_checkpoint_meta(meta, ck);
}

inline Checkpoint load_full_checkpoint(const std::string& path) {
  Checkpoint ck;
  ck.store = load_checkpoint<float>(path);
  std::ifstream meta(path + ".meta");
  if (meta) read_checkpoint_meta(meta, ck);
  return ck;
}

class PretrainDiverged : public std::runtime_error {
 public:
  PretrainDiverged(const std::string& what, Checkpoint last_good)
      : std::runtime_error(what), last_good_(std::move(last_good)) {}
  const Checkpoint& last_good() const { return last_good_; }

 private:
  Checkpoint last_good_;
};

struct PretrainOptions {
  std::ostream* metrics = nullptr;  // CSV rows, header included
  std::string checkpoint_dir;       // empty = keep checkpoints in memory only
  std::function<void(std::size_t epoch, const EpochLoss&)> on_epoch;
};

inline Checkpoint pretrain(const DatasetStore& data, const TrainConfig& cfg, const ArchConfig& arch = {},
                           const PretrainOptions& opts = {}) {
  cfg.validate();
  const std::size_t steps = steps_per_epoch(data.size(), cfg.batch_size);
  if (steps == 0) {
    throw std::invalid_argument("pretrain: dataset has " + std::to_string(data.size()) + " videos, batch needs " +
                                std::to_string(cfg.batch_size));
  }
  Checkpoint ck;
  ck.store = init_params<float>(derive_seed(cfg.seed, "init"), arch);
  ck.fingerprint = fingerprint(cfg.describe());
  Velocity<float> velocity;
  if (opts.metrics) *opts.metrics << kMetricsHeader;

  auto save = [&](const std::string& name) {
    if (opts.checkpoint_dir.empty()) return;
    std::filesystem::create_directories(opts.checkpoint_dir);
    save_full_checkpoint((std::filesystem::path(opts.checkpoint_dir) / name).string(), ck);
  };

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const Checkpoint last_good = ck;
    EpochLoss sum;
    for (std::size_t step = 0; step < steps; ++step) {
      StepResult r;
      try {
        r = train_step(ck.store, velocity, make_batch(data, cfg, epoch, step), cfg, arch);
      } catch (const TrainingDiverged& e) {
        throw PretrainDiverged("pretrain diverged at epoch " + std::to_string(epoch) + " step " +
                                   std::to_string(step) + ": " + e.what(),
                               last_good);
      } catch (const NonFiniteGradient& e) {
        throw PretrainDiverged("pretrain diverged at epoch " + std::to_string(epoch) + " step " +
                                   std::to_string(step) + ": " + e.what(),
                               last_good);
      }
      if (opts.metrics) *opts.metrics << format_metrics_row(epoch, step, r.loss, r.lr);
      sum.mip += r.loss.mip;
      sum.cip += r.loss.cip;
      sum.total += r.loss.total;
    }
    const double n = static_cast<double>(steps);
    ck.history.push_back({sum.mip / n, sum.cip / n, sum.total / n});
    ck.epoch = epoch + 1;
    if (opts.on_epoch) opts.on_epoch(epoch, ck.history.back());
    if (cfg.checkpoint_every > 0 && ck.epoch % cfg.checkpoint_every == 0 && ck.epoch < cfg.epochs) {
      save("epoch" + std::to_string(ck.epoch) + ".mcpc");
    }
  }
  save("final.mcpc");
  return ck;
}

}  // namespace mcpnet
