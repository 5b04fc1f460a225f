#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "captionforge/corpus.hpp"
#include "captionforge/model.hpp"

namespace captionforge {

struct Hypothesis {
  std::vector<std::size_t> tokens;  // starts with <sos>
  double logprob = 0.0;
  bool finished = false;
};

/// Appends the argmax token (ties to the lowest id) until <eos> or
/// max_len generated tokens; 0 means config.max_decode_len. The result has
/// no <sos>/<eos>.
std::vector<std::size_t> greedy_decode(const Model& model, const Tensor& features, std::size_t max_len = 0);

/// Beam search; finished hypotheses are ranked by logprob / length^alpha,
/// where length counts generated tokens including <eos>. Width 1 returns
/// exactly the greedy result.
std::vector<std::size_t> beam_decode(const Model& model, const Tensor& features, std::size_t width,
                                     double alpha = 0.7, std::size_t max_len = 0);

/// Sum of log-probabilities the model assigns to `caption` followed by <eos>
/// (the <eos> is omitted when the caption reached max_len).
double sequence_logprob(const Model& model, const Tensor& features, std::span<const std::size_t> caption,
                        std::size_t max_len = 0);

struct DecodeOptions {
  std::size_t beam_width = 1;
  double alpha = 0.7;
  std::size_t threads = 1;
};

struct DecodedCaption {
  std::string video_id;
  Tokens tokens;  // may contain <sep> in paragraph mode
};

/// Decodes every record; output order follows the input order regardless of
/// the thread count.
std::vector<DecodedCaption> decode_all(const Model& model, const Vocabulary& vocab,
                                       std::span<const VideoRecord> records,
                                       std::span<const FeatureMatrix> features, const DecodeOptions& options);

/// One line per video: video_id TAB text. Paragraph sentences are joined
/// with " . ".
std::string format_caption(const Tokens& tokens);
void write_decoded(const std::filesystem::path& path, std::span<const DecodedCaption> decoded);
/// Reads a decode file back; sentences separated by " . " become <sep>.
std::vector<DecodedCaption> read_decoded(const std::filesystem::path& path);

}  // namespace captionforge
