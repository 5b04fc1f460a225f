#pragma once

#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "captionforge/corpus.hpp"

namespace captionforge {

using Ngram = std::vector<std::string>;
using NgramCounts = std::map<Ngram, std::size_t>;

/// Every contiguous n-gram with its multiplicity; empty when len < n.
NgramCounts ngram_counts(std::span<const std::string> tokens, std::size_t n);

struct EvalPair {
  Tokens candidate;
  std::vector<Tokens> references;  // at least one
};

struct ClippedCounts {
  std::size_t clipped = 0;
  std::size_t total = 0;
};

/// Candidate n-gram counts clipped at their maximum count in any one of the
/// pair's references, summed over the corpus.
ClippedCounts modified_precision(std::span<const EvalPair> pairs, std::size_t n);

struct BleuOptions {
  std::size_t max_n = 4;
  // Replaces a zero precision by epsilon / total instead of zeroing the score.
  bool smoothing = false;
  double epsilon = 1e-9;
};

struct BleuReport {
  std::vector<double> bleu;        // BLEU-1 .. BLEU-max_n
  std::vector<double> precisions;  // p_1 .. p_max_n
  double bp = 1.0;
  std::size_t candidate_length = 0;
  std::size_t reference_length = 0;
  std::size_t n_pairs = 0;
};

/// Corpus BLEU with the closest-reference brevity penalty (shorter on ties).
BleuReport corpus_bleu(std::span<const EvalPair> pairs, const BleuOptions& options = {});

using Paragraph = std::vector<Tokens>;  // sentences

/// Sentences of each paragraph are concatenated, then scored with
/// corpus_bleu. Both maps must cover the same video ids.
BleuReport paragraph_bleu(const std::map<std::string, Paragraph>& predicted,
                          const std::map<std::string, std::vector<Paragraph>>& references,
                          const BleuOptions& options = {});

nlohmann::json to_json(const BleuReport& report);
std::string format_table(const BleuReport& report);

}  // namespace captionforge
