#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "captionforge/features.hpp"
#include "captionforge/tensor.hpp"

namespace captionforge {

class Rng;

using Tokens = std::vector<std::string>;

namespace token_id {
inline constexpr std::size_t pad = 0;
inline constexpr std::size_t sos = 1;
inline constexpr std::size_t eos = 2;
inline constexpr std::size_t unk = 3;
}  // namespace token_id

/// Sentence separator inside paragraph captions.
inline constexpr std::string_view kSeparator = "<sep>";

/// Lowercases, removes . , ! ? ; : " ( ) and splits on whitespace.
/// Internal apostrophes survive ("don't").
Tokens tokenize(std::string_view text);

std::string join_tokens(std::span<const std::string> tokens);

/// Splits a paragraph on <sep>; empty sentences are dropped.
std::vector<Tokens> split_sentences(std::span<const std::string> tokens);

/// Bijection between tokens and ids. Ids 0-3 are <pad>, <sos>, <eos>, <unk>.
class Vocabulary {
 public:
  /// Tokens with count >= min_count, by descending count then lexicographic.
  static Vocabulary build(std::span<const Tokens> captions, std::size_t min_count);
  /// Restores a vocabulary from its id-ordered token list.
  static Vocabulary from_tokens(std::vector<std::string> tokens, std::size_t min_count);

  std::size_t size() const noexcept { return tokens_.size(); }
  std::size_t min_count() const noexcept { return min_count_; }
  /// <unk> for tokens outside the vocabulary.
  std::size_t id(std::string_view token) const;
  bool contains(std::string_view token) const;
  const std::string& token(std::size_t id) const;
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }

  std::vector<std::size_t> encode(std::span<const std::string> tokens) const;
  /// Drops <pad>, <sos> and <eos>.
  Tokens decode(std::span<const std::size_t> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
  std::size_t min_count_ = 1;
};

enum class Split { train, val, test };
std::string_view to_string(Split s);
Split parse_split(std::string_view text);

struct VideoRecord {
  std::string video_id;
  std::filesystem::path feature_path;
  std::vector<Tokens> captions;  // at least one
  Split split = Split::train;
};

/// Collection of captioned videos. Stored as JSON:
/// {"version": 1, "paragraphs": bool, "extractor_tag": str,
///  "records": [{"video_id", "feature_path", "captions": [str], "split"}]}
/// Feature paths are relative to the manifest's directory.
struct Manifest {
  bool paragraphs = false;
  std::string extractor_tag = "unknown";
  std::vector<VideoRecord> records;

  std::vector<VideoRecord> split(Split s) const;
};

inline constexpr int kManifestVersion = 1;

/// Throws DataError naming the file when a record's feature file is missing.
Manifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path, const Manifest& manifest);

/// Vocabulary over every caption of the given records. Throws on an empty corpus.
Vocabulary build_vocab(std::span<const VideoRecord> records, std::size_t min_count);

/// Uniform choice of one of the record's captions.
const Tokens& sample_pairing(const VideoRecord& record, Rng& rng);

struct CaptionBatch {
  std::vector<std::size_t> record_indices;
  Tensor features;                           // [B, T_max, D], zero rows past each length
  std::vector<std::size_t> feature_lengths;  // B
  std::size_t caption_len = 0;               // L
  std::vector<std::size_t> decoder_input;    // B x L: <sos> w1 .. wn <pad>..
  std::vector<std::size_t> targets;          // B x L: w1 .. wn <eos> <pad>..

  std::size_t size() const { return record_indices.size(); }
};

/// Encodes one caption as (decoder input, target): tokens are truncated to
/// max_len - 1 and terminated with <eos>.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> shift_caption(
    const Vocabulary& vocab, std::span<const std::string> caption, std::size_t max_len);

/// One epoch of batches: records shuffled by `rng`, each paired with one
/// random caption. features[i] belongs to records[i].
std::vector<CaptionBatch> make_batches(std::span<const VideoRecord> records,
                                       std::span<const FeatureMatrix> features, const Vocabulary& vocab,
                                       std::size_t batch_size, std::size_t max_len, Rng& rng);

/// Collates the given records (in order) with their first caption.
CaptionBatch collate(std::span<const VideoRecord> records, std::span<const FeatureMatrix> features,
                     std::span<const std::size_t> indices, std::span<const Tokens* const> captions,
                     const Vocabulary& vocab, std::size_t max_len);

struct SynthCorpusSpec {
  std::uint64_t seed = 0;
  std::size_t n_classes = 8;
  std::size_t videos_per_class = 10;
  std::size_t templates = 3;      // caption templates per class
  std::size_t paraphrases = 1;    // captions per video
  bool dense = false;             // paragraphs of 3-4 sentences
  std::size_t rows_min = 4;
  std::size_t rows_max = 8;
  std::size_t feature_dim = 32;
  double signal_strength = 0.9;
  double val_fraction = 0.0;      // per class, the trailing videos go to val
};

struct SynthCorpus {
  Manifest manifest;                   // feature paths are "features/<id>.vfm"
  std::vector<FeatureMatrix> features; // parallel to manifest.records
};

/// Captions are a deterministic function of (class, template); each
/// (class, template) pair has its own feature mean, so the features
/// determine the caption.
SynthCorpus synth_corpus(const SynthCorpusSpec& spec);

/// Writes <dir>/manifest.json and <dir>/features/*.vfm.
std::filesystem::path write_corpus(const std::filesystem::path& dir, const SynthCorpus& corpus);

/// Reads the feature file of every record.
std::vector<FeatureMatrix> load_features(std::span<const VideoRecord> records);

}  // namespace captionforge
