// Stochastic gradient descent with momentum (V <- mu V - alpha grad;
// W <- W + V, then kernel weights clipped to [-c, c]), epoch-wise learning
// rate decay, linearly increasing momentum, early stopping on validation NLL,
// and the two-phase protocol: phase 1 trains everything on class-balanced
// patches, phase 2 retrains only the output layer on the natural label
// distribution. Cascades train their first net fully, freeze it, then train
// the second net on larger patches carrying the first net's output maps.
#ifndef GSEG_TRAINER_HPP_
#define GSEG_TRAINER_HPP_

#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gseg/architectures.hpp"
#include "gseg/graph.hpp"
#include "gseg/sampler.hpp"

namespace gseg {

struct TrainConfig {
  double alpha0 = 0.005;
  double lr_decay = 0.1;  // multiplicative, per epoch
  double mu0 = 0.5;
  double mu_final = 0.9;
  double lambda1 = 0.0;
  double lambda2 = 0.0;
  double weight_bound = 1.0;
  int batch_size = 32;
  int max_epochs = 10;
  int patience = 3;
  int patches_per_epoch = 100000;  // desk-scale epoch; full scale is millions
  int val_patches = 2000;
  std::uint64_t seed = 0;

  void validate() const {
    if (alpha0 <= 0.0) raise<UsageError>("train config: alpha0 must be positive");
    if (mu0 < 0.0 || mu0 >= 1.0 || mu_final < 0.0 || mu_final >= 1.0)
      raise<UsageError>("train config: momentum must lie in [0, 1)");
    if (patience < 1) raise<UsageError>("train config: patience must be at least 1");
    if (batch_size < 1 || max_epochs < 1 || patches_per_epoch < 1 || val_patches < 1)
      raise<UsageError>("train config: counts must be positive");
    if (weight_bound <= 0.0) raise<UsageError>("train config: weight bound must be positive");
  }
};

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.alpha0 = j.value("alpha0", c.alpha0);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.mu0 = j.value("mu0", c.mu0);
  c.mu_final = j.value("mu_final", c.mu_final);
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.weight_bound = j.value("weight_bound", c.weight_bound);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience = j.value("patience", c.patience);
  c.patches_per_epoch = j.value("patches_per_epoch", c.patches_per_epoch);
  c.val_patches = j.value("val_patches", c.val_patches);
  c.seed = j.value("seed", c.seed);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"alpha0", c.alpha0},
                     {"lr_decay", c.lr_decay},
                     {"mu0", c.mu0},
                     {"mu_final", c.mu_final},
                     {"lambda1", c.lambda1},
                     {"lambda2", c.lambda2},
                     {"weight_bound", c.weight_bound},
                     {"batch_size", c.batch_size},
                     {"max_epochs", c.max_epochs},
                     {"patience", c.patience},
                     {"patches_per_epoch", c.patches_per_epoch},
                     {"val_patches", c.val_patches},
                     {"seed", c.seed}};
}

struct ScheduleValues {
  double alpha;
  double mu;
};

// alpha decays by the configured factor each epoch; momentum rises linearly
// from mu0 at epoch 0 to mu_final at the last epoch.
inline ScheduleValues schedule(int epoch, const TrainConfig& cfg) {
  ScheduleValues s;
  s.alpha = cfg.alpha0 * std::pow(cfg.lr_decay, epoch);
  const double t = cfg.max_epochs > 1
                       ? static_cast<double>(epoch) / static_cast<double>(cfg.max_epochs - 1)
                       : 0.0;
  s.mu = cfg.mu0 + (cfg.mu_final - cfg.mu0) * std::min(1.0, t);
  return s;
}

struct OptimizerState {
  ParameterStore velocity;  // zero-initialized, same shapes as the store
  int epoch = 0;
  double alpha = 0.0;
  double mu = 0.0;
  std::vector<std::string> trainable;  // empty: every bank trains

  bool is_trainable(const std::string& name) const {
    if (trainable.empty()) return true;
    for (const auto& t : trainable)
      if (t == name) return true;
    return false;
  }
};

inline OptimizerState make_optimizer_state(const ParameterStore& store) {
  OptimizerState st;
  st.velocity = zeros_like(store);
  return st;
}

// V <- mu V - alpha grad; W <- W + V; kernel weights clipped to
// [-weight_bound, weight_bound] (biases are exempt).
inline void sgd_momentum_step(ParameterStore& store, const ParameterStore& grads,
                              OptimizerState& state, double weight_bound) {
  if (store.banks.size() != grads.banks.size())
    raise<DataError>("sgd step: store and gradients have different bank counts");
  const float alpha = static_cast<float>(state.alpha);
  const float mu = static_cast<float>(state.mu);
  const float bound = static_cast<float>(weight_bound);
  for (std::size_t b = 0; b < store.banks.size(); ++b) {
    if (!state.is_trainable(store.banks[b].first)) continue;
    auto& w = store.banks[b].second;
    const auto& g = grads.banks[b].second;
    auto& v = state.velocity.banks[b].second;
    for (float x : g.weights)
      if (!std::isfinite(x))
        raise<NumericError>("training diverged: non-finite gradient in bank '",
                            store.banks[b].first, "'");
    for (float x : g.bias)
      if (!std::isfinite(x))
        raise<NumericError>("training diverged: non-finite gradient in bank '",
                            store.banks[b].first, "'");
    for (std::size_t i = 0; i < w.weights.size(); ++i) {
      v.weights[i] = mu * v.weights[i] - alpha * g.weights[i];
      w.weights[i] = std::clamp(w.weights[i] + v.weights[i], -bound, bound);
    }
    for (std::size_t i = 0; i < w.bias.size(); ++i) {
      v.bias[i] = mu * v.bias[i] - alpha * g.bias[i];
      w.bias[i] += v.bias[i];
    }
  }
}

// One training example: an input patch, its center label, and for cascade
// second nets the first net's probability maps.
struct TrainExample {
  Tensor input;
  std::optional<Tensor> aux;
  std::uint8_t label = 0;
};

struct ExampleSource {
  virtual ~ExampleSource() = default;
  virtual TrainExample next() = 0;
};

// Plain architectures: patches straight from a sampler.
class PatchExampleSource : public ExampleSource {
 public:
  explicit PatchExampleSource(PatchSampler sampler) : sampler_(std::move(sampler)) {}
  TrainExample next() override {
    PatchExample p = sampler_.next();
    return TrainExample{std::move(p.patch), std::nullopt, p.label};
  }
  PatchSampler& sampler() { return sampler_; }

 private:
  PatchSampler sampler_;
};

template <class S>
TensorT<S> crop_spatial(const TensorT<S>& t, int y0, int x0, int h, int w) {
  if (y0 < 0 || x0 < 0 || y0 + h > t.height || x0 + w > t.width)
    raise<DataError>("crop ", h, "x", w, "@", y0, ",", x0, " exceeds tensor ",
                     t.height, "x", t.width);
  TensorT<S> out(t.channels, h, w);
  for (int c = 0; c < t.channels; ++c)
    for (int y = 0; y < h; ++y) {
      const S* src = t.channel(c) + static_cast<std::size_t>(y0 + y) * t.width + x0;
      std::copy(src, src + w, out.channel(c) + static_cast<std::size_t>(y) * w);
    }
  return out;
}

// Cascade second nets: samples the larger first-net patch, runs the frozen
// first net over it, and crops the raw input to the second net's own size.
class CascadeExampleSource : public ExampleSource {
 public:
  CascadeExampleSource(const Architecture& arch, const ParameterStore& first_store,
                       PatchSampler sampler)
      : arch_(arch), first_store_(first_store), sampler_(std::move(sampler)),
        second_rf_(receptive_field(arch.graphs[1])) {
    if (arch_.kind != BundleKind::Cascade)
      raise<UsageError>("cascade example source needs a cascade architecture");
    if (sampler_.patch_size() != arch_.patch_size)
      raise<DataError>("cascade sampler yields ", sampler_.patch_size(),
                       " px patches, cascade needs ", arch_.patch_size);
  }

  TrainExample next() override {
    PatchExample p = sampler_.next();
    auto first = forward(arch_.graphs[0], first_store_, p.patch);
    Tensor raw = crop_spatial(p.patch, arch_.second_offset, arch_.second_offset,
                              second_rf_, second_rf_);
    return TrainExample{std::move(raw), std::move(first.layers.back().out), p.label};
  }
  PatchSampler& sampler() { return sampler_; }

 private:
  const Architecture& arch_;
  const ParameterStore& first_store_;
  PatchSampler sampler_;
  int second_rf_;
};

// Tracks the best validation epoch (strict improvement; earliest wins ties)
// and calls a halt once `patience` epochs pass without a new best.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience) : patience_(patience) {
    if (patience < 1) raise<UsageError>("early stopping patience must be at least 1");
  }

  // feed one epoch's validation loss; true means stop after this epoch
  bool observe(double val_nll) {
    const int epoch = seen_++;
    if (val_nll < best_val_) {
      best_val_ = val_nll;
      best_epoch_ = epoch;
      return false;
    }
    return epoch - best_epoch_ >= patience_;
  }

  bool is_best() const { return best_epoch_ == seen_ - 1; }
  int best_epoch() const { return best_epoch_; }
  int epochs_seen() const { return seen_; }

 private:
  int patience_;
  int seen_ = 0;
  int best_epoch_ = -1;
  double best_val_ = std::numeric_limits<double>::infinity();
};

struct EpochStats {
  int phase = 1;
  std::string net;  // which graph of the bundle
  int epoch = 0;
  double alpha = 0.0;
  double mu = 0.0;
  double train_nll = 0.0;
  double val_nll = 0.0;
  double wall_seconds = 0.0;
};

inline void to_json(nlohmann::json& j, const EpochStats& e) {
  j = nlohmann::json{{"phase", e.phase},       {"net", e.net},
                     {"epoch", e.epoch},       {"alpha", e.alpha},
                     {"mu", e.mu},             {"train_nll", e.train_nll},
                     {"val_nll", e.val_nll},   {"wall_seconds", e.wall_seconds}};
}

struct TrainResult {
  ParameterStore store;
  std::vector<EpochStats> history;
};

inline double validation_nll(const ModelGraph& g, const ParameterStore& store,
                             const std::vector<TrainExample>& validation) {
  double total = 0.0;
  for (const TrainExample& ex : validation) {
    auto t = forward(g, store, ex.input, false, 0, ex.aux ? &*ex.aux : nullptr);
    total += softmax_nll(t.sink(), {ex.label});
  }
  return total / static_cast<double>(validation.size());
}

// Core epoch loop shared by both phases. Early stopping keeps the parameters
// of the best validation epoch (earliest on ties) and stops after `patience`
// epochs without improvement.
inline TrainResult train_model(const ModelGraph& g, ParameterStore store, ExampleSource& stream,
                               const std::vector<TrainExample>& validation,
                               const TrainConfig& cfg, int phase, const std::string& net_tag) {
  cfg.validate();
  if (validation.empty()) raise<DataError>("training: validation set is empty");
  layer_channels(g);

  const bool sink_only = phase == 2;
  OptimizerState state = make_optimizer_state(store);
  if (sink_only) state.trainable = {g.sink().name};

  Rng dropout_rng(cfg.seed ^ 0xD70C0A5EDu);
  TrainResult result;
  ParameterStore best = store;
  EarlyStopper stopper(cfg.patience);

  for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const ScheduleValues sv = schedule(epoch, cfg);
    state.epoch = epoch;
    state.alpha = sv.alpha;
    state.mu = sv.mu;

    double epoch_nll = 0.0;
    int consumed = 0;
    while (consumed < cfg.patches_per_epoch) {
      const int batch = std::min(cfg.batch_size, cfg.patches_per_epoch - consumed);
      ParameterStore grad_sum = zeros_like(store);
      for (int b = 0; b < batch; ++b) {
        TrainExample ex = stream.next();
        const Tensor* aux = ex.aux ? &*ex.aux : nullptr;
        auto trace = forward(g, store, ex.input, true, dropout_rng.next_u64(), aux);
        auto back = backward(g, store, trace, ex.input, {ex.label}, cfg.lambda1, cfg.lambda2,
                             aux, sink_only);
        epoch_nll += back.data_loss;
        for (std::size_t i = 0; i < grad_sum.banks.size(); ++i) {
          auto& acc = grad_sum.banks[i].second;
          const auto& gi = back.grads.banks[i].second;
          for (std::size_t k = 0; k < acc.weights.size(); ++k) acc.weights[k] += gi.weights[k];
          for (std::size_t k = 0; k < acc.bias.size(); ++k) acc.bias[k] += gi.bias[k];
        }
      }
      const float inv = 1.0f / static_cast<float>(batch);
      for (auto& [n, bank] : grad_sum.banks) {
        for (auto& w : bank.weights) w *= inv;
        for (auto& v : bank.bias) v *= inv;
      }
      sgd_momentum_step(store, grad_sum, state, cfg.weight_bound);
      consumed += batch;
    }

    EpochStats es;
    es.phase = phase;
    es.net = net_tag;
    es.epoch = epoch;
    es.alpha = sv.alpha;
    es.mu = sv.mu;
    es.train_nll = epoch_nll / static_cast<double>(consumed);
    es.val_nll = validation_nll(g, store, validation);
    es.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(es);

    const bool stop = stopper.observe(es.val_nll);
    if (stopper.is_best()) best = store;
    if (stop) break;
  }
  result.store = std::move(best);
  return result;
}

inline TrainResult train_phase1(const ModelGraph& g, ParameterStore init, ExampleSource& balanced,
                                const std::vector<TrainExample>& validation,
                                const TrainConfig& cfg, const std::string& net_tag = "model") {
  return train_model(g, std::move(init), balanced, validation, cfg, 1, net_tag);
}

// Retrains only the output layer; every other bank stays bit-identical.
inline TrainResult train_phase2(const ModelGraph& g, ParameterStore phase1_store,
                                ExampleSource& natural,
                                const std::vector<TrainExample>& validation,
                                const TrainConfig& cfg, const std::string& net_tag = "model") {
  return train_model(g, std::move(phase1_store), natural, validation, cfg, 2, net_tag);
}

struct PhasePlan {
  bool phase1 = true;
  bool phase2 = true;
};

// A trained bundle plus its provenance.
struct TrainedModel {
  Architecture arch;
  std::vector<ParameterStore> stores;
  std::vector<double> label_freqs;
  std::vector<EpochStats> history;
};

namespace detail {

inline std::vector<TrainExample> plain_validation(const std::vector<const BrainVolume*>& vols,
                                                  SampleMode mode, int patch, int count,
                                                  std::uint64_t seed) {
  PatchSampler s(vols, mode, patch, seed);
  std::vector<TrainExample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    PatchExample p = s.next();
    out.push_back(TrainExample{std::move(p.patch), std::nullopt, p.label});
  }
  return out;
}

inline std::vector<TrainExample> cascade_validation(const Architecture& arch,
                                                    const ParameterStore& first_store,
                                                    const std::vector<const BrainVolume*>& vols,
                                                    SampleMode mode, int count,
                                                    std::uint64_t seed) {
  CascadeExampleSource src(arch, first_store,
                           PatchSampler(vols, mode, arch.patch_size, seed));
  std::vector<TrainExample> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(src.next());
  return out;
}

inline TrainResult run_phases(const ModelGraph& g, ParameterStore store, PhasePlan plan,
                              const std::vector<const BrainVolume*>& train_vols,
                              const std::vector<const BrainVolume*>& val_vols, int patch,
                              const TrainConfig& cfg, Rng& seeds, const std::string& tag) {
  TrainResult acc;
  if (plan.phase1) {
    PatchExampleSource balanced(
        PatchSampler(train_vols, SampleMode::Balanced, patch, seeds.next_u64()));
    auto val = plain_validation(val_vols, SampleMode::Balanced, patch, cfg.val_patches,
                                seeds.next_u64());
    TrainResult r = train_phase1(g, std::move(store), balanced, val, cfg, tag);
    store = std::move(r.store);
    acc.history.insert(acc.history.end(), r.history.begin(), r.history.end());
  }
  if (plan.phase2) {
    PatchExampleSource natural(
        PatchSampler(train_vols, SampleMode::Natural, patch, seeds.next_u64()));
    auto val = plain_validation(val_vols, SampleMode::Natural, patch, cfg.val_patches,
                                seeds.next_u64());
    TrainResult r = train_phase2(g, std::move(store), natural, val, cfg, tag);
    store = std::move(r.store);
    acc.history.insert(acc.history.end(), r.history.begin(), r.history.end());
  }
  acc.store = std::move(store);
  return acc;
}

}  // namespace detail

// Full training of any architecture. For cascades the first net is trained
// with both phases (or taken from init_stores when provided) and frozen; the
// phase plan then applies to the second net. For AverageCNN both pathway
// models are trained independently. init_stores, when given, seed the
// trainable nets instead of fresh initialization (resuming phase 2).
inline TrainedModel train_architecture(const Architecture& arch,
                                       const std::vector<const BrainVolume*>& train_vols,
                                       const std::vector<const BrainVolume*>& val_vols,
                                       const TrainConfig& cfg, PhasePlan plan = {},
                                       const std::vector<ParameterStore>* init_stores = nullptr) {
  cfg.validate();
  if (train_vols.empty() || val_vols.empty())
    raise<DataError>("training needs at least one training and one validation volume");
  if (!plan.phase1 && !plan.phase2) raise<UsageError>("no training phase selected");

  TrainedModel out;
  out.arch = arch;
  out.label_freqs = label_frequencies(train_vols);
  Rng seeds(cfg.seed);

  auto initial = [&](const ModelGraph& g, std::size_t slot) -> ParameterStore {
    if (init_stores) {
      if (init_stores->size() <= slot)
        raise<DataError>("init model does not provide store ", slot);
      return (*init_stores)[slot];
    }
    if (!plan.phase1)
      raise<UsageError>("--phase 2 needs an initial phase-1 model");
    return init_parameters<float>(g, out.label_freqs, seeds.next_u64());
  };

  switch (arch.kind) {
    case BundleKind::Single: {
      TrainResult r = detail::run_phases(arch.graphs[0], initial(arch.graphs[0], 0), plan,
                                         train_vols, val_vols, arch.patch_size, cfg, seeds,
                                         "model");
      out.stores = {std::move(r.store)};
      out.history = std::move(r.history);
      break;
    }
    case BundleKind::Average: {
      const char* tags[2] = {"local", "global"};
      for (int i = 0; i < 2; ++i) {
        TrainResult r = detail::run_phases(arch.graphs[i], initial(arch.graphs[i], i), plan,
                                           train_vols, val_vols, arch.patch_size, cfg, seeds,
                                           tags[i]);
        out.stores.push_back(std::move(r.store));
        out.history.insert(out.history.end(), r.history.begin(), r.history.end());
      }
      break;
    }
    case BundleKind::Cascade: {
      // first net: a full TwoPathCNN training unless a trained one is given
      ParameterStore first;
      const int first_rf = receptive_field(arch.graphs[0]);
      if (init_stores && !init_stores->empty()) {
        first = (*init_stores)[0];
      } else {
        TrainResult r = detail::run_phases(
            arch.graphs[0], init_parameters<float>(arch.graphs[0], out.label_freqs,
                                                   seeds.next_u64()),
            PhasePlan{}, train_vols, val_vols, first_rf, cfg, seeds, "first");
        first = std::move(r.store);
        out.history.insert(out.history.end(), r.history.begin(), r.history.end());
      }

      ParameterStore second;
      if (init_stores && init_stores->size() >= 2) second = (*init_stores)[1];
      else if (!plan.phase1) raise<UsageError>("--phase 2 needs an initial phase-1 model");
      else second = init_parameters<float>(arch.graphs[1], out.label_freqs, seeds.next_u64());

      TrainResult acc;
      if (plan.phase1) {
        CascadeExampleSource balanced(
            arch, first,
            PatchSampler(train_vols, SampleMode::Balanced, arch.patch_size, seeds.next_u64()));
        auto val = detail::cascade_validation(arch, first, val_vols, SampleMode::Balanced,
                                              cfg.val_patches, seeds.next_u64());
        TrainResult r = train_phase1(arch.graphs[1], std::move(second), balanced, val, cfg,
                                     "second");
        second = std::move(r.store);
        out.history.insert(out.history.end(), r.history.begin(), r.history.end());
      }
      if (plan.phase2) {
        CascadeExampleSource natural(
            arch, first,
            PatchSampler(train_vols, SampleMode::Natural, arch.patch_size, seeds.next_u64()));
        auto val = detail::cascade_validation(arch, first, val_vols, SampleMode::Natural,
                                              cfg.val_patches, seeds.next_u64());
        TrainResult r = train_phase2(arch.graphs[1], std::move(second), natural, val, cfg,
                                     "second");
        second = std::move(r.store);
        out.history.insert(out.history.end(), r.history.begin(), r.history.end());
      }
      out.stores = {std::move(first), std::move(second)};
      break;
    }
  }
  return out;
}

}  // namespace gseg

#endif  // GSEG_TRAINER_HPP_
