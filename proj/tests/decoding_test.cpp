#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "captionforge/decoding.hpp"
#include "captionforge/errors.hpp"
#include "captionforge/rng.hpp"
#include "captionforge/training.hpp"
#include "test_util.hpp"

using namespace captionforge;

namespace {

ModelConfig small_config(Variant variant = Variant::vanilla) {
  ModelConfig c;
  c.variant = variant;
  c.layers = 1;
  c.d_model = 8;
  c.heads = 2;
  c.d_ff = 16;
  c.dropout = 0.0;
  c.vocab_size = 9;
  c.max_decode_len = 6;
  c.feature_dim = 6;
  return c;
}

// Random model with a sharpened output layer so captions vary in length.
Model random_model(std::uint64_t seed, Variant variant = Variant::vanilla) {
  Model m = build(small_config(variant), seed);
  for (double& x : m.params[m.layout.output_projection].values()) x *= 6.0;
  return m;
}

// The last decoder block emits a constant vector b, so the logits are
// b * W_out in every position.
void force_constant_logits(Model& m, const std::vector<double>& token_logits) {
  const auto& last = m.layout.decoder.back().norm3;
  for (double& x : m.params[last.gain].values()) x = 0.0;
  for (double& x : m.params[last.bias].values()) x = 1.0;
  const std::size_t d = m.config.d_model, v = m.config.vocab_size;
  Tensor& w = m.params[m.layout.output_projection];
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < v; ++c) w[r * v + c] = token_logits[c] / static_cast<double>(d);
}

Tensor random_features(Rng& rng, std::size_t rows = 4) { return testutil::random_tensor(rng, {rows, 6}); }

}  // namespace

TEST(Greedy, ForcedEosGivesEmptyCaptionAtAnyWidth) {
  Model m = build(small_config(), 0);
  std::vector<double> logits(9, 0.0);
  logits[token_id::eos] = 10.0;
  force_constant_logits(m, logits);
  Rng rng(0);
  const Tensor f = random_features(rng);
  EXPECT_TRUE(greedy_decode(m, f).empty());
  for (std::size_t width : {1, 2, 4, 8}) EXPECT_TRUE(beam_decode(m, f, width).empty()) << width;
}

TEST(Greedy, LengthCapWithEosSuppressed) {
  Model m = build(small_config(), 0);
  std::vector<double> logits(9, 0.0);
  logits[token_id::eos] = -10.0;
  logits[5] = 10.0;
  force_constant_logits(m, logits);
  Rng rng(0);
  const Tensor f = random_features(rng);
  EXPECT_EQ(greedy_decode(m, f, 5), (std::vector<std::size_t>(5, 5)));
  EXPECT_EQ(greedy_decode(m, f).size(), 6u);  // config.max_decode_len
  EXPECT_EQ(beam_decode(m, f, 3, 0.7, 5).size(), 5u);
}

TEST(Greedy, TiesBreakToLowestId) {
  Model m = build(small_config(), 0);
  std::vector<double> logits(9, 0.0);
  logits[token_id::eos] = -10.0;
  logits[6] = 4.0;
  logits[7] = 4.0;
  force_constant_logits(m, logits);
  Rng rng(0);
  EXPECT_EQ(greedy_decode(m, random_features(rng), 3), (std::vector<std::size_t>(3, 6)));
}

TEST(Greedy, EachTokenIsTheArgmaxOfARecomputedPass) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const Model m = random_model(seed, seed % 2 ? Variant::universal : Variant::vanilla);
    Rng rng(seed + 100);
    const Tensor f = random_features(rng);
    const auto caption = greedy_decode(m, f);
    std::vector<std::size_t> prefix{token_id::sos};
    std::vector<std::size_t> expected = caption;
    if (caption.size() < m.config.max_decode_len) expected.push_back(token_id::eos);
    for (std::size_t want : expected) {
      Graph g;
      const BoundParams p = bind(g, m, false);
      const EncodeResult enc = encode(p, g.constant(f));
      const Tensor logits = decode_forward(p, prefix, enc.memory).value();
      const std::size_t v = logits.last_dim();
      const double* row = logits.data() + (prefix.size() - 1) * v;
      const auto best = static_cast<std::size_t>(std::max_element(row, row + v) - row);
      ASSERT_EQ(best, want) << "seed " << seed << " position " << prefix.size();
      prefix.push_back(want);
    }
  }
}

TEST(Beam, WidthOneMatchesGreedyOnFiftyModels) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Model m = random_model(seed, seed % 3 == 0 ? Variant::universal : Variant::vanilla);
    Rng rng(seed * 7 + 1);
    const Tensor f = random_features(rng, 1 + seed % 5);
    EXPECT_EQ(beam_decode(m, f, 1), greedy_decode(m, f)) << seed;
  }
}

TEST(Beam, AlphaZeroDominatesGreedy) {
  std::size_t strictly_better = 0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const Model m = random_model(seed);
    Rng rng(seed + 11);
    const Tensor f = random_features(rng);
    const double greedy = sequence_logprob(m, f, greedy_decode(m, f));
    for (std::size_t width : {2, 4}) {
      const double beam = sequence_logprob(m, f, beam_decode(m, f, width, 0.0));
      EXPECT_GE(beam, greedy - 1e-12) << "seed " << seed << " width " << width;
      strictly_better += beam > greedy + 1e-9;
    }
  }
  EXPECT_GT(strictly_better, 0u);  // the search does more than copy greedy
}

TEST(Beam, ConfigAndDeterminism) {
  const Model m = random_model(3);
  Rng rng(3);
  const Tensor f = random_features(rng);
  EXPECT_THROW(beam_decode(m, f, 0), ConfigError);
  EXPECT_EQ(beam_decode(m, f, 4), beam_decode(m, f, 4));
}

TEST(SequenceLogprob, MatchesTeacherForcedLogSoftmax) {
  const Model m = random_model(5);
  Rng rng(5);
  const Tensor f = random_features(rng);
  const std::vector<std::size_t> caption{4, 7};
  Graph g;
  const BoundParams p = bind(g, m, false);
  const EncodeResult enc = encode(p, g.constant(f));
  const std::vector<std::size_t> input{token_id::sos, 4, 7}, target{4, 7, token_id::eos};
  const Tensor logits = decode_forward(p, input, enc.memory).value();
  double want = 0.0;
  const std::size_t v = logits.last_dim();
  for (std::size_t t = 0; t < 3; ++t) {
    double z = 0.0;
    for (std::size_t k = 0; k < v; ++k) z += std::exp(logits[t * v + k]);
    want += logits[t * v + target[t]] - std::log(z);
  }
  EXPECT_NEAR(sequence_logprob(m, f, caption), want, 1e-10);
}

TEST(DecodeFile, RoundTripWithParagraphs) {
  testutil::TempDir dir("decode");
  const std::vector<DecodedCaption> decoded{
      {"video0", {"a", "man", "is", "cooking"}},
      {"video1", {}},
      {"video2", {"a", "dog", "runs", "<sep>", "it", "stops"}},
  };
  EXPECT_EQ(format_caption(decoded[2].tokens), "a dog runs . it stops");
  write_decoded(dir / "out.tsv", decoded);
  const auto back = read_decoded(dir / "out.tsv");
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].video_id, decoded[i].video_id);
    EXPECT_EQ(back[i].tokens, decoded[i].tokens);
  }
  EXPECT_THROW(read_decoded(dir / "absent.tsv"), DataError);
}

TEST(DecodeAll, OrderIndependentOfThreads) {
  SynthCorpusSpec spec;
  spec.n_classes = 3;
  spec.videos_per_class = 4;
  spec.feature_dim = 6;
  const SynthCorpus c = synth_corpus(spec);
  const Vocabulary vocab = build_vocab(c.manifest.records, 1);
  ModelConfig config = small_config();
  config.vocab_size = vocab.size();
  Model m = build(config, 1);
  for (double& x : m.params[m.layout.output_projection].values()) x *= 6.0;
  const auto one = decode_all(m, vocab, c.manifest.records, c.features, {2, 0.7, 1});
  for (std::size_t threads : {2, 4, 16}) {
    const auto many = decode_all(m, vocab, c.manifest.records, c.features, {2, 0.7, threads});
    ASSERT_EQ(many.size(), one.size());
    for (std::size_t i = 0; i < one.size(); ++i) {
      EXPECT_EQ(many[i].video_id, c.manifest.records[i].video_id);
      EXPECT_EQ(many[i].tokens, one[i].tokens);
    }
  }
}

TEST(Greedy, OverfitModelReproducesTrainingCaptions) {
  SynthCorpusSpec spec;
  spec.n_classes = 4;
  spec.videos_per_class = 5;
  const SynthCorpus c = synth_corpus(spec);
  const Vocabulary vocab = build_vocab(c.manifest.records, 1);
  ModelConfig mc;
  mc.layers = 2;
  mc.d_model = 32;
  mc.heads = 2;
  mc.d_ff = 64;
  mc.dropout = 0.0;
  mc.vocab_size = vocab.size();
  mc.feature_dim = 32;
  TrainConfig tc;
  tc.epochs = 300;
  tc.lr0 = 3e-3;
  tc.schedule = Schedule::cosine_restarts;
  tc.warmup_steps = 30;
  tc.restart_period = 100000;
  const TrainResult r = train(mc, tc, {c.manifest.records, c.features}, vocab);
  for (std::size_t i = 0; i < c.features.size(); ++i) {
    EXPECT_EQ(vocab.decode(greedy_decode(r.model, c.features[i].values)), c.manifest.records[i].captions[0])
        << c.manifest.records[i].video_id;
  }
}
