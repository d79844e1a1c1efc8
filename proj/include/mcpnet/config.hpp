#pragma once

// Run configuration: a flat set of `section.key = value` entries, each with
// a default. Files may contain blank lines and `#` comments.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mcpnet/dataset.hpp"
#include "mcpnet/encoder.hpp"
#include "mcpnet/evaluation.hpp"
#include "mcpnet/rng.hpp"
#include "mcpnet/trainer.hpp"

namespace mcpnet {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ValueType { Int, Real, Bool, Text, Choice, IntList };

struct KeySpec {
  const char* key;
  ValueType type;
  const char* default_value;
  const char* doc;
  std::vector<std::string> choices = {};
};

inline const std::vector<KeySpec>& config_keys() {
  static const std::vector<KeySpec> keys = {
      {"run.seed", ValueType::Int, "0", "global seed; dataset/train/finetune seeds derive from it"},
      {"run.out_dir", ValueType::Text, "", "output directory (empty: $MCP_OUT, else ./mcpnet_out)"},
      {"run.threads", ValueType::Int, "1", "worker threads for feature extraction and ablation cells"},
      {"dataset.dir", ValueType::Text, "", "load train.mcpv/test.mcpv from here instead of generating"},
      {"dataset.num_classes", ValueType::Int, "8", "motion classes (2..8)"},
      {"dataset.train_per_class", ValueType::Int, "25", "training videos per class"},
      {"dataset.test_per_class", ValueType::Int, "10", "test videos per class"},
      {"dataset.frames", ValueType::Int, "64", "frames per video (>= 48)"},
      {"dataset.size", ValueType::Int, "32", "frame height and width"},
      {"train.batch_size", ValueType::Int, "16", "videos per step"},
      {"train.base_lr", ValueType::Real, "0.1", "base learning rate, scaled by batch_size / 32"},
      {"train.momentum", ValueType::Real, "0.9", "SGD momentum"},
      {"train.weight_decay", ValueType::Real, "0.0001", "SGD weight decay"},
      {"train.epochs", ValueType::Int, "20", "pretraining epochs"},
      {"train.branch_mode", ValueType::Choice, "JOINT", "branches optimised", {"JOINT", "MIP_ONLY", "CIP_ONLY"}},
      {"train.cip_speed_mode", ValueType::Choice, "DIFFERENT", "speed relation of CIP pairs",
       {"DIFFERENT", "SAME", "RANDOM"}},
      {"train.t", ValueType::Int, "4", "frame gap of the long-range residual view"},
      {"train.view_mode", ValueType::Choice, "LONG_RES", "residual view", {"LONG_RES", "RESIDUAL"}},
      {"train.clip_length", ValueType::Int, "16", "frames per clip"},
      {"train.similarity_sampling", ValueType::Bool, "false", "centre clips on the largest inter-frame change"},
      {"train.augment", ValueType::Bool, "true", "random crop, flip and brightness jitter"},
      {"train.checkpoint_every", ValueType::Int, "5", "save a checkpoint every N epochs (0: final only)"},
      {"loss.gamma", ValueType::Real, "2.0", "MIP margin"},
      {"loss.tau", ValueType::Real, "0.1", "CIP temperature"},
      {"loss.alpha", ValueType::Real, "0.5", "MIP weight in the joint loss"},
      {"model.channels", ValueType::IntList, "3,8,16,32,64", "backbone channels per stage boundary"},
      {"model.head_hidden", ValueType::Int, "128", "projection head hidden width"},
      {"model.proj_dim", ValueType::Int, "128", "projection dimension"},
      {"model.normalize_projection", ValueType::Bool, "true", "L2-normalise projected features"},
      {"eval.checkpoint", ValueType::Text, "", "checkpoint to evaluate (empty: <out_dir>/final.mcpc; none: random init)"},
      {"eval.three_clip", ValueType::Bool, "false", "average three clips per video for retrieval"},
      {"finetune.hidden", ValueType::Int, "64", "classifier hidden width"},
      {"finetune.lr", ValueType::Real, "0.005", "fine-tuning learning rate"},
      {"finetune.momentum", ValueType::Real, "0.9", "fine-tuning momentum"},
      {"finetune.weight_decay", ValueType::Real, "0.0001", "fine-tuning weight decay"},
      {"finetune.epochs", ValueType::Int, "10", "fine-tuning epochs"},
      {"finetune.batch_size", ValueType::Int, "16", "fine-tuning batch size"},
      {"ablate.seeds", ValueType::IntList, "1,2,3", "cell seeds; tables report the mean over them"},
      {"ablate.tables", ValueType::IntList, "1,2,3", "which tables to produce"},
  };
  return keys;
}

inline std::string expected_keys_text() {
  std::ostringstream os;
  for (const KeySpec& k : config_keys()) os << "  " << k.key << " = " << k.default_value << "  # " << k.doc << '\n';
  return os.str();
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline bool parse_int(const std::string& s, long long& out) {
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, out);
  return ec == std::errc() && p == end && !s.empty();
}

inline bool parse_real(const std::string& s, double& out) {
  if (s.empty()) return false;
  char* end = nullptr;
  out = std::strtod(s.c_str(), &end);
  return end == s.c_str() + s.size() && std::isfinite(out);
}

inline bool parse_bool(const std::string& s, bool& out) {
  if (s == "true" || s == "1") return out = true, true;
  if (s == "false" || s == "0") return out = false, true;
  return false;
}

inline bool parse_int_list(const std::string& s, std::vector<long long>& out) {
  out.clear();
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    long long v;
    if (!parse_int(trim(item), v)) return false;
    out.push_back(v);
  }
  return !out.empty();
}

}  // namespace detail

class RunConfig {
 public:
  RunConfig() {
    for (const KeySpec& k : config_keys()) values_[k.key] = k.default_value;
  }

  // Sets one key; `where` prefixes error messages (e.g. "config.txt:3").
  void set(const std::string& key, const std::string& raw, const std::string& where = "") {
    const std::string at = where.empty() ? "" : where + ": ";
    const KeySpec* spec = find(key);
    if (!spec) throw ConfigError(at + "unknown key '" + key + "'");
    const std::string value = detail::trim(raw);
    long long i;
    double r;
    bool b;
    std::vector<long long> list;
    bool ok = true;
    switch (spec->type) {
      case ValueType::Int: ok = detail::parse_int(value, i) && i >= 0; break;
      case ValueType::Real: ok = detail::parse_real(value, r); break;
      case ValueType::Bool: ok = detail::parse_bool(value, b); break;
      case ValueType::Text: break;
      case ValueType::Choice:
        ok = std::find(spec->choices.begin(), spec->choices.end(), value) != spec->choices.end();
        break;
      case ValueType::IntList: ok = detail::parse_int_list(value, list); break;
    }
    if (!ok) throw ConfigError(at + "malformed value '" + value + "' for " + key);
    values_[key] = value;
  }

  void parse(std::istream& is, const std::string& source) {
    std::string line;
    for (std::size_t n = 1; std::getline(is, line); ++n) {
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = detail::trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      const std::string where = source + ":" + std::to_string(n);
      if (eq == std::string::npos) throw ConfigError(where + ": expected 'section.key = value', got '" + line + "'");
      set(detail::trim(line.substr(0, eq)), line.substr(eq + 1), where);
    }
  }

  void load(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file '" + path + "'; expected keys:\n" + expected_keys_text());
    parse(is, path);
  }

  // `section.key=value` from the command line.
  void apply_override(const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + assignment + "'");
    set(detail::trim(assignment.substr(0, eq)), assignment.substr(eq + 1), "--set");
  }

  const std::string& text(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
    return it->second;
  }
  long long integer(const std::string& key) const {
    long long v = 0;
    detail::parse_int(text(key), v);
    return v;
  }
  std::size_t size(const std::string& key) const { return static_cast<std::size_t>(integer(key)); }
  double real(const std::string& key) const {
    double v = 0;
    detail::parse_real(text(key), v);
    return v;
  }
  bool flag(const std::string& key) const {
    bool v = false;
    detail::parse_bool(text(key), v);
    return v;
  }
  std::vector<long long> int_list(const std::string& key) const {
    std::vector<long long> v;
    detail::parse_int_list(text(key), v);
    return v;
  }

  // Every key with its resolved value, in name order; parseable by parse().
  std::string resolved() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
  }

  std::string out_dir() const {
    if (!text("run.out_dir").empty()) return text("run.out_dir");
    if (const char* env = std::getenv("MCP_OUT"); env && *env) return env;
    return "mcpnet_out";
  }

  std::uint64_t seed() const { return static_cast<std::uint64_t>(integer("run.seed")); }
  std::uint64_t sub_seed(const char* name) const { return derive_seed(seed(), name); }

  DatasetConfig dataset(Split split) const {
    DatasetConfig d;
    d.num_classes = static_cast<std::uint32_t>(integer("dataset.num_classes"));
    d.videos_per_class =
        static_cast<std::uint32_t>(integer(split == Split::Train ? "dataset.train_per_class" : "dataset.test_per_class"));
    d.frames = size("dataset.frames");
    d.size = size("dataset.size");
    d.seed = sub_seed(split == Split::Train ? "dataset-train" : "dataset-test");
    return d;
  }

  // Test ids start after the largest possible training id.
  std::uint32_t test_first_id() const {
    return static_cast<std::uint32_t>(integer("dataset.num_classes") * integer("dataset.train_per_class"));
  }

  ArchConfig arch() const {
    ArchConfig a;
    a.channels.clear();
    for (long long c : int_list("model.channels")) a.channels.push_back(static_cast<std::size_t>(c));
    a.head_hidden = size("model.head_hidden");
    a.proj_dim = size("model.proj_dim");
    a.normalize_projection = flag("model.normalize_projection");
    return a;
  }

  TrainConfig train() const {
    TrainConfig t;
    t.batch_size = size("train.batch_size");
    t.base_lr = real("train.base_lr");
    t.momentum = real("train.momentum");
    t.weight_decay = real("train.weight_decay");
    t.epochs = size("train.epochs");
    t.seed = sub_seed("train");
    t.loss = {real("loss.gamma"), real("loss.tau"), real("loss.alpha")};
    const std::string bm = text("train.branch_mode");
    t.branch_mode = bm == "MIP_ONLY" ? BranchMode::MipOnly : bm == "CIP_ONLY" ? BranchMode::CipOnly : BranchMode::Joint;
    const std::string sm = text("train.cip_speed_mode");
    t.cip_speed_mode = sm == "SAME" ? CipSpeedMode::Same : sm == "RANDOM" ? CipSpeedMode::Random : CipSpeedMode::Different;
    t.t = static_cast<int>(integer("train.t"));
    t.view_mode = text("train.view_mode") == "RESIDUAL" ? ViewMode::Residual : ViewMode::LongRes;
    t.clip_length = size("train.clip_length");
    t.similarity_sampling = flag("train.similarity_sampling");
    t.augment = flag("train.augment");
    t.checkpoint_every = size("train.checkpoint_every");
    return t;
  }

  FinetuneConfig finetune() const {
    FinetuneConfig f;
    f.hidden = size("finetune.hidden");
    f.lr = real("finetune.lr");
    f.momentum = real("finetune.momentum");
    f.weight_decay = real("finetune.weight_decay");
    f.epochs = size("finetune.epochs");
    f.batch_size = size("finetune.batch_size");
    f.clip_length = size("train.clip_length");
    f.seed = sub_seed("finetune");
    return f;
  }

  EvalConfig eval() const {
    EvalConfig e;
    e.clip_length = size("train.clip_length");
    e.three_clip = flag("eval.three_clip");
    e.threads = std::max<std::size_t>(1, size("run.threads"));
    return e;
  }

  // Cross-key checks, reported as config errors before anything runs.
  void validate() const {
    try {
      arch().validate();
      train().validate();
      finetune().validate();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
    const long long c = integer("dataset.num_classes");
    if (c < 2 || c > static_cast<long long>(kNumMotionPatterns))
      throw ConfigError("dataset.num_classes must be in [2, " + std::to_string(kNumMotionPatterns) + "]");
    if (integer("dataset.train_per_class") < 1 || integer("dataset.test_per_class") < 1)
      throw ConfigError("dataset.*_per_class must be >= 1");
    if (size("dataset.frames") < kMinFrames) throw ConfigError("dataset.frames must be >= " + std::to_string(kMinFrames));
    if (size("dataset.size") < 16) throw ConfigError("dataset.size must be >= 16");
    for (long long t : int_list("ablate.tables"))
      if (t < 1 || t > 3) throw ConfigError("ablate.tables entries must be 1, 2 or 3");
  }

 private:
  static const KeySpec* find(const std::string& key) {
    for (const KeySpec& k : config_keys())
      if (key == k.key) return &k;
    return nullptr;
  }

  std::map<std::string, std::string> values_;
};

}  // namespace mcpnet
