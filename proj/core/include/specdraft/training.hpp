#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "specdraft/base_lm.hpp"
#include "specdraft/corpus.hpp"
#include "specdraft/optim.hpp"
#include "specdraft/specformer.hpp"

namespace specdraft {

struct TrainConfig {
  std::size_t batch_size = 8;
  /// Micro-batches averaged into each optimizer step.
  std::size_t grad_accum = 1;
  /// Window length cut from each corpus entry.
  std::size_t seq_len = 64;
  std::size_t epochs = 1;
  /// Optimizer steps; 0 derives ceil(entries / batch) * epochs / grad_accum.
  std::size_t steps = 0;
  std::uint64_t seed = 0;
  OptimConfig optim;

  void validate() const;
  std::size_t total_steps(std::size_t corpus_entries) const;
  std::size_t steps_per_epoch(std::size_t corpus_entries) const;
};

/// Deterministic batch source: each epoch visits the entries in a seeded
/// order and cuts a seeded window of at most seq_len tokens from each.
class BatchSampler {
 public:
  BatchSampler(const Corpus& corpus, std::size_t batch_size, std::size_t seq_len, std::uint64_t seed);
  TokenBatch next();
  std::size_t epoch() const noexcept { return epoch_; }

 private:
  void reshuffle();

  const Corpus& corpus_;
  std::size_t batch_size_;
  std::size_t seq_len_;
  std::uint64_t seed_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
  std::size_t epoch_ = 0;
  std::uint64_t draws_ = 0;
};

/// Next-token cross-entropy of `tokens` under `model` (positions 0..S-2
/// predict 1..S-1).
template <typename T>
Var<T> lm_loss(const BaseLM<T>& model, const TokenBatch& tokens);

template <typename T>
struct BaseTrainResult {
  BaseLM<T> model;
  std::vector<double> losses;  // one per optimizer step
};

template <typename T>
BaseTrainResult<T> train_base(const Corpus& corpus, const BaseLMConfig& config, const TrainConfig& train);

/// Each entry is the prompt followed by the base's greedy continuation of
/// up to max_len tokens (capped by max_seq).
template <typename T>
Corpus self_distill(const BaseLM<T>& base, const std::vector<std::vector<Token>>& prompts, std::size_t max_len);

/// Targets for slot j (0-based) at context position t: x[t + 2 + j], or
/// `ignore` past the end. Row-major (batch, seq, l_d).
std::vector<Token> draft_targets(const TokenBatch& tokens, std::size_t l_d, Token ignore);

/// Draft cross-entropy averaged over every valid (t, j) pair; the base is
/// only read.
template <typename T>
Var<T> draft_loss(const BaseLM<T>& base, const SpecFormer<T>& sf, const TokenBatch& tokens);

/// Same gradient as backward(draft_loss), but computes the head and loss one
/// draft slot at a time, collecting the slot gradients on E before a single
/// backward through the draft model. Accumulates into sf's gradients and
/// returns the loss value.
template <typename T>
double grad_accum_lmhead(const BaseLM<T>& base, const SpecFormer<T>& sf, const TokenBatch& tokens,
                         std::size_t* peak_logits_elements = nullptr);

template <typename T>
struct DraftTrainResult {
  SpecFormer<T> model;
  std::vector<double> losses;
};

/// Called after every epoch with the epoch index (from 1) and current draft.
template <typename T>
using DraftCheckpointFn = std::function<void(std::size_t, const SpecFormer<T>&)>;

/// Trains a freshly initialized draft against a frozen copy of `base`.
template <typename T>
DraftTrainResult<T> train_draft(const BaseLM<T>& base, const SpecFormerConfig& config, const Corpus& corpus,
                                const TrainConfig& train, const DraftCheckpointFn<T>& on_epoch = {});

/// Top-1 accuracy of each draft slot against the true tokens of `corpus`,
/// over every position where the target exists.
template <typename T>
std::vector<double> draft_accuracy(const BaseLM<T>& base, const SpecFormer<T>& sf, const Corpus& corpus,
                                   std::size_t seq_len);

}  // namespace specdraft
