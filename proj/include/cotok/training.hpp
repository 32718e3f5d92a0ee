#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "cotok/autograd.hpp"
#include "cotok/config.hpp"
#include "cotok/decoder.hpp"
#include "cotok/model.hpp"
#include "cotok/params.hpp"

namespace cotok {

/// Mean cross-entropy over the non-padded target positions.
template <class T>
Var<T> token_loss(Var<T> logits, const std::vector<int>& targets, const std::vector<bool>& pad_mask) {
  if (logits.rows() != targets.size() || pad_mask.size() != targets.size())
    throw Error("token_loss: " + std::to_string(logits.rows()) + " logit rows for " +
                std::to_string(targets.size()) + " targets");
  std::vector<bool> active(pad_mask.size());
  for (std::size_t i = 0; i < pad_mask.size(); ++i) active[i] = !pad_mask[i];
  return cross_entropy(logits, targets, active);
}

/// Splits a caption at floor(len / 2): the first half becomes the question,
/// the second half the target.
inline std::pair<std::vector<int>, std::vector<int>> completion_batch(const std::vector<int>& caption) {
  if (caption.size() < 2) throw Error("completion_batch: caption needs at least 2 tokens");
  const auto mid = static_cast<long>(caption.size() / 2);
  return {{caption.begin(), caption.begin() + mid}, {caption.begin() + mid, caption.end()}};
}

/// Turns a caption-only example into a generative-completion example.
inline QAExample completion_example(const QAExample& caption_example) {
  const auto words = split_words(caption_example.question);
  if (words.size() < 2) throw Error("completion_example: caption '" + caption_example.question + "' is too short");
  const std::size_t mid = words.size() / 2;
  QAExample ex = caption_example;
  ex.question.clear();
  std::string target;
  for (std::size_t i = 0; i < words.size(); ++i) {
    std::string& dst = i < mid ? ex.question : target;
    if (!dst.empty()) dst += ' ';
    dst += words[i];
  }
  ex.answers = {target};
  return ex;
}

/// Generation loss plus the fixed-vocabulary head loss. The head sees a
/// detached copy of the fused features so it never shapes the encoder.
template <class T>
Var<T> example_loss(const PreparedExample& ex, const ModelConfig& config, ParamBinder<T>& params) {
  const auto enc = encode(ex.clips, ex.question, config, params);
  std::vector<int> inputs{kPad};
  inputs.insert(inputs.end(), ex.target.begin(), ex.target.end() - 1);
  Var<T> logits = decoder_logits(enc.fusion.sequence, enc.fusion.pad_mask, inputs, config, params);
  Var<T> loss = token_loss(logits, ex.target, std::vector<bool>(ex.target.size(), false));
  if (ex.answer_class >= 0 && static_cast<std::size_t>(ex.answer_class) < config.answer_vocab_size) {
    Var<T> head = fc_logits(detach(enc.fusion.sequence), config, params);
    loss = add(loss, cross_entropy(head, {ex.answer_class}, {true}));
  }
  return loss;
}

template <class T>
struct TrainState {
  ParamStore<T> params;
  std::map<std::string, std::vector<T>> first_moment;
  std::map<std::string, std::vector<T>> second_moment;
  std::size_t step = 0;
  std::uint64_t seed = 0;

  static TrainState init(const ModelConfig& config) {
    TrainState s;
    s.params = init_params<T>(config);
    s.seed = config.seed;
    for (const auto& [name, t] : s.params.tensors()) {
      s.first_moment.emplace(name, std::vector<T>(t.size(), T{0}));
      s.second_moment.emplace(name, std::vector<T>(t.size(), T{0}));
    }
    return s;
  }
};

struct StepReport {
  double loss = 0.0;
  double grad_norm = 0.0;
};

inline std::size_t worker_count() {
  std::size_t n = std::max<std::size_t>(1, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("COTOK_THREADS")) {
    const long cap = std::strtol(env, nullptr, 10);
    if (cap >= 1) n = std::min<std::size_t>(n, static_cast<std::size_t>(cap));
  }
  return n;
}

/// Runs fn(i) for i in [0, n) on up to worker_count() threads. Work is
/// strided, so callers that write into slot i get a fixed-order result.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min(worker_count(), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) fn(i);
    });
  for (auto& th : pool) th.join();
}

namespace detail {

template <class T>
std::string first_non_finite(const ParamStore<T>& params) {
  for (const auto& [name, t] : params.tensors())
    if (!all_finite<T>(t.data)) return name;
  return {};
}

}  // namespace detail

/// One optimisation step: per-example forward/backward (possibly on worker
/// threads), gradients summed in batch order, global-norm clipping, then Adam
/// with decoupled weight decay.
template <class T>
StepReport train_step(const std::vector<const PreparedExample*>& batch, TrainState<T>& state, const ModelConfig& config) {
  if (batch.empty()) throw Error("train_step: empty batch");
  const std::size_t n = batch.size();
  std::vector<GradMap<T>> grads(n);
  std::vector<double> losses(n, 0.0);
  std::vector<std::string> errors(n);

  auto run = [&](std::size_t i) {
    try {
      Tape<T> tape;
      ParamBinder<T> params(tape, state.params);
      Var<T> loss = example_loss(*batch[i], config, params);
      losses[i] = static_cast<double>(loss.value().data[0]);
      if (!std::isfinite(losses[i])) return;
      tape.backward(loss);
      grads[i] = params.grads();
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  };
  parallel_for(n, run);
  for (std::size_t i = 0; i < n; ++i) {
    if (!errors[i].empty()) throw Error("train_step: example '" + batch[i]->id + "': " + errors[i]);
    if (!std::isfinite(losses[i])) {
      const auto bad = detail::first_non_finite(state.params);
      throw Error("train_step: non-finite loss on example '" + batch[i]->id + "'" +
                  (bad.empty() ? std::string(" (all parameters finite)") : "; offending tensor: " + bad));
    }
  }

  GradMap<T> total = std::move(grads[0]);
  for (std::size_t i = 1; i < n; ++i)
    for (auto& [name, g] : total) {
      const auto& gi = grads[i].at(name);
      for (std::size_t j = 0; j < g.size(); ++j) g[j] += gi[j];
    }
  double sq = 0.0;
  const T inv_n = T{1} / static_cast<T>(n);
  for (auto& [name, g] : total) {
    for (auto& v : g) {
      v *= inv_n;
      sq += static_cast<double>(v) * static_cast<double>(v);
    }
    if (!all_finite<T>(g)) throw Error("train_step: non-finite gradient in '" + name + "'");
  }
  const double norm = std::sqrt(sq);
  const T clip = (config.clip_norm > 0.0 && norm > config.clip_norm) ? static_cast<T>(config.clip_norm / norm) : T{1};

  ++state.step;
  const double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.step));
  const T lr = static_cast<T>(config.learning_rate);
  const T wd = static_cast<T>(config.weight_decay);
  for (auto& [name, tensor] : state.params.tensors()) {
    const auto& g = total.at(name);
    auto& m = state.first_moment.at(name);
    auto& v = state.second_moment.at(name);
    for (std::size_t j = 0; j < g.size(); ++j) {
      const T gj = g[j] * clip;
      m[j] = static_cast<T>(beta1) * m[j] + static_cast<T>(1 - beta1) * gj;
      v[j] = static_cast<T>(beta2) * v[j] + static_cast<T>(1 - beta2) * gj * gj;
      const T mhat = m[j] / static_cast<T>(bc1);
      const T vhat = v[j] / static_cast<T>(bc2);
      tensor.data[j] -= lr * (mhat / (std::sqrt(vhat) + static_cast<T>(eps)) + wd * tensor.data[j]);
    }
  }

  StepReport report;
  for (double l : losses) report.loss += l;
  report.loss /= static_cast<double>(n);
  report.grad_norm = norm;
  return report;
}

struct TrainOptions {
  std::size_t steps = 0;  // 0: use config.train_steps
  std::string log_csv;    // step,loss,wall_seconds
  std::function<void(std::size_t, double)> on_step;
};

/// Shuffled epochs (seeded) over the training set.
template <class T>
TrainState<T> train(const std::vector<PreparedExample>& data, const ModelConfig& config, const TrainOptions& options = {}) {
  if (data.empty()) throw Error("train: empty training set");
  TrainState<T> state = TrainState<T>::init(config);
  Rng order_rng(config.seed ^ 0x5deece66dULL);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = data.size();
  const std::size_t steps = options.steps ? options.steps : config.train_steps;
  std::ofstream log;
  if (!options.log_csv.empty()) {
    log.open(options.log_csv);
    if (!log) throw Error("cannot write training log '" + options.log_csv + "'");
    log << "step,loss,wall_seconds\n";
  }
  const auto start = std::chrono::steady_clock::now();
  std::vector<const PreparedExample*> batch;
  for (std::size_t s = 0; s < steps; ++s) {
    batch.clear();
    while (batch.size() < config.batch_size) {
      if (cursor == data.size()) {
        order_rng.shuffle(order.begin(), order.end());
        cursor = 0;
      }
      batch.push_back(&data[order[cursor++]]);
    }
    const auto report = train_step(batch, state, config);
    if (log.is_open()) {
      const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      log << state.step << ',' << report.loss << ',' << wall << '\n';
    }
    if (options.on_step) options.on_step(state.step, report.loss);
  }
  return state;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;  // "<tensor>[<index>]"
  std::size_t checked = 0;
};

/// Relative error |a - n| / max(|a|, |n|, 1e-8).
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-8});
}

/// Central differences (f(x+eps) - f(x-eps)) / 2eps for a scalar function of a
/// flat vector, compared against `analytic`.
inline GradCheckResult grad_check(const std::function<double(const std::vector<double>&)>& f,
                                  const std::vector<double>& analytic, std::vector<double> point, double eps = 1e-5) {
  if (analytic.size() != point.size()) throw Error("grad_check: gradient/point size mismatch");
  GradCheckResult r;
  for (std::size_t i = 0; i < point.size(); ++i) {
    const double x = point[i];
    point[i] = x + eps;
    const double up = f(point);
    point[i] = x - eps;
    const double down = f(point);
    point[i] = x;
    if (!std::isfinite(up) || !std::isfinite(down)) throw Error("grad_check: non-finite evaluation at coordinate " + std::to_string(i));
    const double err = relative_error(analytic[i], (up - down) / (2 * eps));
    if (err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst = "[" + std::to_string(i) + "]";
    }
    ++r.checked;
  }
  return r;
}

/// Checks d loss / d params for every coordinate of every parameter tensor
/// whose name passes `select`. `loss` builds the scalar on a fresh tape.
inline GradCheckResult grad_check_params(ParamStore<double>& store,
                                         const std::function<Var<double>(ParamBinder<double>&)>& loss,
                                         const std::function<bool(const std::string&)>& select, double eps = 1e-5) {
  GradMap<double> analytic;
  {
    Tape<double> tape;
    ParamBinder<double> params(tape, store);
    Var<double> out = loss(params);
    tape.backward(out);
    analytic = params.grads();
  }
  auto evaluate = [&] {
    Tape<double> tape;
    tape.set_grad_enabled(false);
    ParamBinder<double> params(tape, store);
    return loss(params).value().data[0];
  };
  GradCheckResult r;
  for (auto& [name, tensor] : store.tensors()) {
    if (!select(name)) continue;
    const auto& g = analytic.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      const double x = tensor.data[i];
      tensor.data[i] = x + eps;
      const double up = evaluate();
      tensor.data[i] = x - eps;
      const double down = evaluate();
      tensor.data[i] = x;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw Error("grad_check: non-finite evaluation at " + name + "[" + std::to_string(i) + "]");
      const double err = relative_error(g[i], (up - down) / (2 * eps));
      if (err > r.max_rel_error) {
        r.max_rel_error = err;
        r.worst = name + "[" + std::to_string(i) + "]";
      }
      ++r.checked;
    }
  }
  return r;
}

}  // namespace cotok
