#include "captionforge/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "captionforge/errors.hpp"
#include "captionforge/rng.hpp"

namespace captionforge {

namespace fs = std::filesystem;

Tokens tokenize(std::string_view text) {
  static constexpr std::string_view kStripped = ".,!?;:\"()";
  Tokens out;
  std::string current;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else if (kStripped.find(ch) == std::string_view::npos) {
      current.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
  std::string out;
  for (const auto& t : tokens) {
    if (!out.empty()) out += ' ';
    out += t;
  }
  return out;
}

std::vector<Tokens> split_sentences(std::span<const std::string> tokens) {
  std::vector<Tokens> out;
  Tokens current;
  for (const auto& t : tokens) {
    if (t == kSeparator) {
      if (!current.empty()) out.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(t);
    }
  }
  if (!current.empty()) out.push_back(std::move(current));
  return out;
}

// ---- Vocabulary -------------------------------------------------------------

namespace {
const std::vector<std::string> kReserved = {"<pad>", "<sos>", "<eos>", "<unk>"};
}

Vocabulary Vocabulary::build(std::span<const Tokens> captions, std::size_t min_count) {
  if (captions.empty()) throw DataError("build_vocab: empty corpus");
  std::map<std::string, std::size_t> counts;
  for (const auto& caption : captions)
    for (const auto& token : caption)
      if (std::find(kReserved.begin(), kReserved.end(), token) == kReserved.end()) ++counts[token];
  if (counts.empty()) throw DataError("build_vocab: corpus has no tokens");

  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> tokens = kReserved;
  for (auto& [token, count] : ranked)
    if (count >= min_count) tokens.push_back(token);
  return from_tokens(std::move(tokens), min_count);
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens, std::size_t min_count) {
  if (tokens.size() < kReserved.size() || !std::equal(kReserved.begin(), kReserved.end(), tokens.begin())) {
    throw DataError("vocabulary must begin with <pad>, <sos>, <eos>, <unk>");
  }
  Vocabulary v;
  v.min_count_ = min_count;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (!v.ids_.emplace(tokens[i], i).second) throw DataError("duplicate vocabulary token '" + tokens[i] + "'");
  }
  v.tokens_ = std::move(tokens);
  return v;
}

std::size_t Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? token_id::unk : it->second;
}

bool Vocabulary::contains(std::string_view token) const { return ids_.contains(std::string(token)); }

const std::string& Vocabulary::token(std::size_t id) const {
  if (id >= tokens_.size()) throw DataError("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[id];
}

std::vector<std::size_t> Vocabulary::encode(std::span<const std::string> tokens) const {
  std::vector<std::size_t> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id(t));
  return ids;
}

Tokens Vocabulary::decode(std::span<const std::size_t> ids) const {
  Tokens out;
  for (auto id : ids) {
    if (id == token_id::pad || id == token_id::sos || id == token_id::eos) continue;
    out.push_back(token(id));
  }
  return out;
}

Vocabulary build_vocab(std::span<const VideoRecord> records, std::size_t min_count) {
  std::vector<Tokens> captions;
  for (const auto& r : records) captions.insert(captions.end(), r.captions.begin(), r.captions.end());
  return Vocabulary::build(captions, min_count);
}

// ---- manifest -----------------------------------------------------------------

std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(std::string_view text) {
  if (text == "train") return Split::train;
  if (text == "val") return Split::val;
  if (text == "test") return Split::test;
  throw DataError("unknown split '" + std::string(text) + "'");
}

std::vector<VideoRecord> Manifest::split(Split s) const {
  std::vector<VideoRecord> out;
  std::copy_if(records.begin(), records.end(), std::back_inserter(out),
               [s](const VideoRecord& r) { return r.split == s; });
  return out;
}

Manifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest '" + path.string() + "'");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("manifest '" + path.string() + "' is not valid JSON: " + e.what());
  }
  const std::string where = "manifest '" + path.string() + "'";
  try {
    if (j.at("version").get<int>() != kManifestVersion) {
      throw DataError(where + ": unsupported version " + j.at("version").dump());
    }
    Manifest m;
    m.paragraphs = j.value("paragraphs", false);
    m.extractor_tag = j.value("extractor_tag", std::string("unknown"));
    const fs::path base = path.parent_path();
    for (const auto& r : j.at("records")) {
      VideoRecord rec;
      rec.video_id = r.at("video_id").get<std::string>();
      fs::path fp = r.at("feature_path").get<std::string>();
      rec.feature_path = fp.is_absolute() ? fp : base / fp;
      rec.split = parse_split(r.value("split", std::string("train")));
      for (const auto& text : r.at("captions")) rec.captions.push_back(tokenize(text.get<std::string>()));
      if (rec.captions.empty()) throw DataError(where + ": record '" + rec.video_id + "' has no captions");
      if (!fs::exists(rec.feature_path)) {
        throw DataError(where + ": feature file '" + rec.feature_path.string() + "' for '" + rec.video_id +
                        "' does not exist");
      }
      m.records.push_back(std::move(rec));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(where + ": malformed: " + e.what());
  }
}

void save_manifest(const fs::path& path, const Manifest& manifest) {
  nlohmann::json records = nlohmann::json::array();
  const fs::path base = path.parent_path();
  for (const auto& r : manifest.records) {
    nlohmann::json captions = nlohmann::json::array();
    for (const auto& c : r.captions) captions.push_back(join_tokens(c));
    std::string fp = r.feature_path.is_relative() ? r.feature_path.generic_string()
                                                  : fs::relative(r.feature_path, base).generic_string();
    records.push_back({{"video_id", r.video_id},
                       {"feature_path", fp},
                       {"captions", captions},
                       {"split", std::string(to_string(r.split))}});
  }
  nlohmann::json j = {{"version", kManifestVersion},
                      {"paragraphs", manifest.paragraphs},
                      {"extractor_tag", manifest.extractor_tag},
                      {"records", records}};
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

std::vector<FeatureMatrix> load_features(std::span<const VideoRecord> records) {
  std::vector<FeatureMatrix> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    FeatureMatrix m = read_feature_file(r.feature_path);
    m.video_id = r.video_id;
    out.push_back(std::move(m));
  }
  return out;
}

// ---- pairing and batching -----------------------------------------------------

const Tokens& sample_pairing(const VideoRecord& record, Rng& rng) {
  if (record.captions.empty()) throw DataError("record '" + record.video_id + "' has no captions");
  if (record.captions.size() == 1) return record.captions.front();
  return record.captions[rng.below(record.captions.size())];
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> shift_caption(
    const Vocabulary& vocab, std::span<const std::string> caption, std::size_t max_len) {
  if (max_len < 2) throw ConfigError("max_len must be at least 2");
  std::vector<std::size_t> ids = vocab.encode(caption.first(std::min(caption.size(), max_len - 1)));
  std::vector<std::size_t> input{token_id::sos};
  input.insert(input.end(), ids.begin(), ids.end());
  ids.push_back(token_id::eos);
  return {std::move(input), std::move(ids)};
}

CaptionBatch collate(std::span<const VideoRecord> records, std::span<const FeatureMatrix> features,
                     std::span<const std::size_t> indices, std::span<const Tokens* const> captions,
                     const Vocabulary& vocab, std::size_t max_len) {
  if (indices.empty()) throw DataError("collate: empty batch");
  const std::size_t dim = features[indices[0]].dim();
  std::size_t t_max = 0;
  for (auto i : indices) {
    if (features[i].dim() != dim) {
      throw DataError("feature dimension of '" + records[i].video_id + "' differs within a batch");
    }
    t_max = std::max(t_max, features[i].rows());
  }

  CaptionBatch b;
  b.record_indices.assign(indices.begin(), indices.end());
  b.features = Tensor({indices.size(), t_max, dim}, 0.0);
  std::vector<std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> shifted;
  for (std::size_t n = 0; n < indices.size(); ++n) {
    const auto i = indices[n];
    const FeatureMatrix& f = features[i];
    std::copy_n(f.values.data(), f.values.size(), b.features.data() + n * t_max * dim);
    b.feature_lengths.push_back(f.rows());
    if (captions[n]->empty()) throw DataError("record '" + records[i].video_id + "' has an empty caption");
    shifted.push_back(shift_caption(vocab, *captions[n], max_len));
    b.caption_len = std::max(b.caption_len, shifted.back().first.size());
  }
  b.decoder_input.assign(indices.size() * b.caption_len, token_id::pad);
  b.targets.assign(indices.size() * b.caption_len, token_id::pad);
  for (std::size_t n = 0; n < shifted.size(); ++n) {
    std::copy(shifted[n].first.begin(), shifted[n].first.end(), b.decoder_input.begin() + n * b.caption_len);
    std::copy(shifted[n].second.begin(), shifted[n].second.end(), b.targets.begin() + n * b.caption_len);
  }
  return b;
}

std::vector<CaptionBatch> make_batches(std::span<const VideoRecord> records, std::span<const FeatureMatrix> features,
                                       const Vocabulary& vocab, std::size_t batch_size, std::size_t max_len,
                                       Rng& rng) {
  if (batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (max_len < 2) throw ConfigError("max_len must be at least 2");
  if (features.size() != records.size()) throw DataError("make_batches: features and records differ in count");
  std::vector<std::size_t> order(records.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order.begin(), order.end());

  std::vector<CaptionBatch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::span<const std::size_t> idx(order.data() + start, end - start);
    std::vector<const Tokens*> captions;
    for (auto i : idx) captions.push_back(&sample_pairing(records[i], rng));
    batches.push_back(collate(records, features, idx, captions, vocab, max_len));
  }
  return batches;
}

// ---- synthetic corpus -----------------------------------------------------------

namespace {

struct Activity {
  const char* verb;
  const char* object;
};

constexpr Activity kActivities[] = {
    {"cooking", "food"},    {"playing", "guitar"}, {"riding", "horse"},  {"slicing", "onion"},
    {"driving", "car"},     {"reading", "book"},   {"painting", "wall"}, {"washing", "dishes"},
    {"kicking", "ball"},    {"eating", "pizza"},   {"cutting", "paper"}, {"climbing", "tree"},
};

constexpr const char* kSubjects[] = {"man", "woman", "child", "dog", "girl", "boy"};

Activity activity(std::size_t c, std::vector<std::string>& scratch) {
  constexpr std::size_t n = std::size(kActivities);
  if (c < n) return kActivities[c];
  scratch.push_back("doing");
  scratch.push_back("task" + std::to_string(c));
  return {"doing", scratch.back().c_str()};
}

std::string subject(std::size_t t) {
  constexpr std::size_t n = std::size(kSubjects);
  return t < n ? std::string(kSubjects[t]) : "person" + std::to_string(t);
}

std::string sentence(std::size_t c, std::size_t t, std::size_t paraphrase) {
  std::vector<std::string> scratch;
  const Activity a = activity(c, scratch);
  const std::string s = "a " + subject(t);
  const std::string v = a.verb;
  const std::string o = a.object;
  switch (paraphrase % 4) {
    case 0: return s + " is " + v + " " + o;
    case 1: return s + " is " + v + " the " + o;
    case 2: return s + " is " + v + " some " + o;
    default: return "there is " + s + " " + v + " " + o;
  }
}

std::string caption_text(const SynthCorpusSpec& spec, std::size_t c, std::size_t t, std::size_t paraphrase) {
  if (!spec.dense) return sentence(c, t, paraphrase);
  const std::size_t n_activities = std::max<std::size_t>(spec.n_classes, std::size(kActivities));
  const std::size_t sentences = 3 + (c + t) % 2;
  std::string out;
  for (std::size_t k = 0; k < sentences; ++k) {
    if (k) out += " " + std::string(kSeparator) + " ";
    out += sentence((c + k) % n_activities, t, paraphrase);
  }
  return out;
}

}  // namespace

SynthCorpus synth_corpus(const SynthCorpusSpec& spec) {
  if (spec.n_classes == 0 || spec.videos_per_class == 0) throw ConfigError("synth: need at least one class and video");
  if (spec.templates == 0) throw ConfigError("synth: need at least one template per class");
  if (spec.paraphrases == 0) throw ConfigError("synth: need at least one caption per video");
  if (!(spec.val_fraction >= 0.0 && spec.val_fraction < 1.0)) throw ConfigError("synth: val_fraction must lie in [0, 1)");

  const std::size_t n_videos = spec.n_classes * spec.videos_per_class;
  SynthFeatureSpec fs_spec;
  fs_spec.seed = spec.seed;
  fs_spec.n_videos = n_videos;
  fs_spec.rows_min = spec.rows_min;
  fs_spec.rows_max = spec.rows_max;
  fs_spec.dim = spec.feature_dim;
  fs_spec.n_classes = spec.n_classes * spec.templates;
  fs_spec.signal_strength = spec.signal_strength;
  for (std::size_t c = 0; c < spec.n_classes; ++c)
    for (std::size_t v = 0; v < spec.videos_per_class; ++v) fs_spec.labels.push_back(c * spec.templates + v % spec.templates);
  SynthFeatures features = synth_features(fs_spec);

  const auto n_val = static_cast<std::size_t>(static_cast<double>(spec.videos_per_class) * spec.val_fraction);
  SynthCorpus out;
  out.manifest.paragraphs = spec.dense;
  out.manifest.extractor_tag = "synthetic";
  for (std::size_t i = 0; i < n_videos; ++i) {
    const std::size_t c = i / spec.videos_per_class;
    const std::size_t v = i % spec.videos_per_class;
    const std::size_t t = v % spec.templates;
    VideoRecord rec;
    rec.video_id = features.videos[i].video_id;
    rec.feature_path = fs::path("features") / (rec.video_id + ".vfm");
    rec.split = v >= spec.videos_per_class - n_val ? Split::val : Split::train;
    for (std::size_t p = 0; p < spec.paraphrases; ++p) rec.captions.push_back(tokenize(caption_text(spec, c, t, p)));
    out.manifest.records.push_back(std::move(rec));
  }
  out.features = std::move(features.videos);
  return out;
}

fs::path write_corpus(const fs::path& dir, const SynthCorpus& corpus) {
  fs::create_directories(dir / "features");
  for (std::size_t i = 0; i < corpus.features.size(); ++i) {
    const auto& rec = corpus.manifest.records[i];
    write_feature_file(rec.feature_path.is_absolute() ? rec.feature_path : dir / rec.feature_path, corpus.features[i]);
  }
  const fs::path manifest = dir / "manifest.json";
  save_manifest(manifest, corpus.manifest);
  return manifest;
}

}  // namespace captionforge
