#pragma once

#include <advrsa/dataset.hpp>
#include <advrsa/network.hpp>
#include <advrsa/parallel.hpp>
#include <advrsa/random.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace advrsa {

struct TrainConfig {
  std::size_t epochs = 12;
  double learning_rate = 0.03;
  double lr_decay = 0.92;  // multiplicative per epoch
  double momentum = 0.9;
  std::size_t batch_size = 8;
  std::uint64_t seed = 7;
};

struct EpochStats {
  std::size_t epoch = 0;
  double learning_rate = 0.0;
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
};

struct TrainHistory {
  std::vector<EpochStats> epochs;
  double final_val_accuracy() const { return epochs.empty() ? 0.0 : epochs.back().val_accuracy; }
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
};

inline Evaluation evaluate(const Network& net, const std::vector<LabeledImage>& set) {
  if (set.empty()) return {};
  std::vector<double> loss(set.size());
  std::vector<int> hit(set.size());
  parallel_for(set.size(), [&](std::size_t i) {
    const ForwardRecord rec = forward(net, set[i].image);
    loss[i] = softmax_xent(rec.logits(), set[i].label).loss;
    hit[i] = argmax(rec.output()) == set[i].label;
  });
  Evaluation e;
  for (std::size_t i = 0; i < set.size(); ++i) {
    e.loss += loss[i];
    e.accuracy += hit[i];
  }
  e.loss /= static_cast<double>(set.size());
  e.accuracy /= static_cast<double>(set.size());
  return e;
}

/// Mini-batch SGD with classical momentum on mean cross-entropy. Per-image
/// gradients are summed in batch order, so the result does not depend on the
/// number of worker threads.
inline TrainHistory train(Network& net, const std::vector<LabeledImage>& train_set,
                          const std::vector<LabeledImage>& val_set, const TrainConfig& cfg) {
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  if (cfg.batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
  for (const LabeledImage& li : train_set) {
    if (li.label >= net.config().classes) {
      throw std::out_of_range("train: label " + std::to_string(li.label) + " of " + li.id + " outside [0, " +
                              std::to_string(net.config().classes) + ")");
    }
  }
  auto& params = net.parameters();
  std::vector<Tensor> velocity;
  for (const Tensor& p : params) velocity.emplace_back(p.shape());
  std::vector<std::size_t> order(train_set.size());
  TrainHistory history;
  double lr = cfg.learning_rate;
  const BackwardOptions opts{.parameters = true, .input = false};
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Engine eng = make_engine(cfg.seed, {0x7a11, epoch});
    std::shuffle(order.begin(), order.end(), eng);
    double loss_sum = 0.0;
    std::size_t hits = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::vector<LossGradient> per(n);
      parallel_for(n, [&](std::size_t b) {
        const LabeledImage& li = train_set[order[start + b]];
        per[b] = loss_and_gradient(net, li.image, li.label, opts);
      });
      const double scale = 1.0 / static_cast<double>(n);
      for (std::size_t b = 0; b < n; ++b) {
        if (!std::isfinite(per[b].loss)) {
          throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) + " (loss is not finite at lr " +
                                 format_double(lr) + "); retry with a smaller learning rate");
        }
        loss_sum += per[b].loss;
        hits += argmax(per[b].probs) == train_set[order[start + b]].label;
      }
      for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& v = velocity[k];
        Tensor& p = params[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
          double g = 0.0;
          for (std::size_t b = 0; b < n; ++b) g += per[b].grads.params[k][i];
          v[i] = cfg.momentum * v[i] - lr * (g * scale);
          p[i] += v[i];
          if (!std::isfinite(p[i])) {
            throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) +
                                   " (parameters overflowed at lr " + format_double(lr) +
                                   "); retry with a smaller learning rate");
          }
        }
      }
    }
    EpochStats st;
    st.epoch = epoch;
    st.learning_rate = lr;
    st.train_loss = loss_sum / static_cast<double>(order.size());
    st.train_accuracy = static_cast<double>(hits) / static_cast<double>(order.size());
    if (!std::isfinite(st.train_loss)) {
      throw TrainingDiverged("training diverged at epoch " + std::to_string(epoch) +
                             "; retry with a smaller learning rate");
    }
    const Evaluation ev = evaluate(net, val_set);
    st.val_loss = ev.loss;
    st.val_accuracy = ev.accuracy;
    history.epochs.push_back(st);
    lr *= cfg.lr_decay;
  }
  return history;
}

}  // namespace advrsa
