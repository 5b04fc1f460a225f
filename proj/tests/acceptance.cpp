// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <numbers>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "captionforge/attention.hpp"
#include "captionforge/bleu.hpp"
#include "captionforge/cli.hpp"
#include "captionforge/corpus.hpp"
#include "captionforge/decoding.hpp"
#include "captionforge/features.hpp"
#include "captionforge/gradsuite.hpp"
#include "captionforge/model.hpp"
#include "captionforge/pca.hpp"
#include "captionforge/training.hpp"
#include "test_util.hpp"

using namespace captionforge;
using testutil::random_tensor;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

// ---- 1 ----------------------------------------------------------------------

Verdict gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto entries = run_gradient_suite(0);
  const double elapsed = seconds_since(t0);
  double worst = 0.0;
  std::string worst_name;
  bool has_model = false;
  for (const auto& e : entries) {
    if (e.report.max_relative_error >= worst) {
      worst = e.report.max_relative_error;
      worst_name = e.name;
    }
    has_model = has_model || e.name == "model_vanilla";
  }
  return {has_model && worst < 1e-5 && elapsed < 60.0,
          fmt("%zu checks, worst %.2e (%s) < 1e-5, %.1f s < 60 s", entries.size(), worst, worst_name.c_str(),
              elapsed)};
}

// ---- 2 ----------------------------------------------------------------------

Tensor naive_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  const std::size_t tq = q.dim(0), tk = k.dim(0), dk = q.dim(1), dv = v.dim(1);
  Tensor out({tq, dv}, 0.0);
  for (std::size_t i = 0; i < tq; ++i) {
    std::vector<double> s(tk);
    for (std::size_t j = 0; j < tk; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < dk; ++c) dot += q.at(i, c) * k.at(j, c);
      s[j] = dot / std::sqrt(static_cast<double>(dk));
    }
    const double m = *std::max_element(s.begin(), s.end());
    double z = 0.0;
    for (double& x : s) z += (x = std::exp(x - m));
    for (std::size_t j = 0; j < tk; ++j)
      for (std::size_t c = 0; c < dv; ++c) out.at(i, c) += s[j] / z * v.at(j, c);
  }
  return out;
}

Tensor naive_matmul(const Tensor& a, const Tensor& b) {
  Tensor c({a.dim(0), b.dim(1)}, 0.0);
  for (std::size_t i = 0; i < a.dim(0); ++i)
    for (std::size_t k = 0; k < a.dim(1); ++k)
      for (std::size_t j = 0; j < b.dim(1); ++j) c.at(i, j) += a.at(i, k) * b.at(k, j);
  return c;
}

Verdict attention_invariants() {
  Rng rng(0);
  double worst_sum = 0.0, worst_leak = 0.0, worst_heads = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t t = 1 + rng.below(7), tk = 1 + rng.below(7), dk = 1 + rng.below(6);
    Graph g;
    // row sums, unmasked and causal
    const Tensor q = random_tensor(rng, {t, dk}), k = random_tensor(rng, {tk, dk}), v = random_tensor(rng, {tk, 3});
    const Tensor w = scaled_dot_product_attention(g.constant(q), g.constant(k), g.constant(v)).weights.value();
    const AttentionMask causal = causal_mask(t);
    const Tensor x = random_tensor(rng, {t, dk});
    const Tensor wc = scaled_dot_product_attention(g.constant(x), g.constant(x), g.constant(x), &causal).weights.value();
    for (const Tensor* weights : {&w, &wc}) {
      for (std::size_t i = 0; i < weights->dim(0); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < weights->dim(1); ++j) s += weights->at(i, j);
        worst_sum = std::max(worst_sum, std::abs(s - 1.0));
      }
    }

    // perturbing position j must leave every earlier output row unchanged
    if (t > 1) {
      const Tensor base = scaled_dot_product_attention(g.constant(x), g.constant(x), g.constant(x), &causal)
                              .output.value();
      const std::size_t j = 1 + rng.below(t - 1);
      Tensor bumped = x;
      for (std::size_t c = 0; c < dk; ++c) bumped.at(j, c) += rng.uniform(-3.0, 3.0);
      const Tensor after = scaled_dot_product_attention(g.constant(bumped), g.constant(bumped), g.constant(bumped),
                                                        &causal)
                               .output.value();
      for (std::size_t i = 0; i < j; ++i)
        for (std::size_t c = 0; c < dk; ++c) worst_leak = std::max(worst_leak, std::abs(base.at(i, c) - after.at(i, c)));
    }

    // one head is plain attention between the projections
    const std::size_t d = 1 + rng.below(5);
    const Tensor xq = random_tensor(rng, {t, d}), m = random_tensor(rng, {tk, d});
    const Tensor wq = random_tensor(rng, {d, d}), wk = random_tensor(rng, {d, d}), wv = random_tensor(rng, {d, d}),
                 wo = random_tensor(rng, {d, d});
    const MultiHeadWeights heads(g.constant(wq), g.constant(wk), g.constant(wv), g.constant(wo), 1);
    const Tensor mh = multi_head_attention(g.constant(xq), g.constant(m), heads).value();
    const Tensor want =
        naive_matmul(naive_attention(naive_matmul(xq, wq), naive_matmul(m, wk), naive_matmul(m, wv)), wo);
    worst_heads = std::max(worst_heads, max_abs_diff(mh, want));
  }
  return {worst_sum < 1e-10 && worst_leak < 1e-12 && worst_heads < 1e-12,
          fmt("1000 cases: row sum err %.1e < 1e-10, causal leak %.1e < 1e-12, N=1 heads %.1e < 1e-12", worst_sum,
              worst_leak, worst_heads)};
}

// ---- 3, 4 -------------------------------------------------------------------

ModelConfig tiny(Variant variant, std::size_t layers) {
  ModelConfig c;
  c.variant = variant;
  c.layers = layers;
  c.d_model = 8;
  c.heads = 2;
  c.d_ff = 16;
  c.dropout = 0.0;
  c.vocab_size = 11;
  c.max_decode_len = 6;
  c.feature_dim = 6;
  return c;
}

Verdict universal_sharing() {
  const std::size_t c1 = param_count(tiny(Variant::universal, 1)), c4 = param_count(tiny(Variant::universal, 4)),
                    c8 = param_count(tiny(Variant::universal, 8));
  const Model m = build(tiny(Variant::universal, 2), 3);
  Rng rng(4);
  const Tensor x = random_tensor(rng, {5, 6});
  Graph g;
  const BoundParams p = bind(g, m, false);
  const Tensor got = Tensor(encode(p, g.constant(x)).memory.value());
  Var state = encoder_input(p, g.constant(x));
  const Tensor& steps = m.params[*m.layout.encoder_steps];
  for (std::size_t s = 0; s < 2; ++s) {
    Tensor row({steps.dim(1)});
    for (std::size_t c = 0; c < steps.dim(1); ++c) row[c] = steps.at(s, c);
    state = encoder_layer(p, m.layout.encoder[0], add_trailing(state, g.constant(row)), nullptr);
  }
  const double diff = max_abs_diff(got, state.value());
  return {c1 == c4 && c4 == c8 && diff < 1e-12,
          fmt("param_count %zu / %zu / %zu at 1 / 4 / 8 steps; 2-step unroll diff %.1e < 1e-12", c1, c4, c8, diff)};
}

Verdict act_bookkeeping() {
  ModelConfig c = tiny(Variant::universal, 2);
  const std::size_t max_steps = 8;
  c.act = ActConfig{0.01, max_steps, 0.01};
  Rng rng(4);
  std::size_t positions = 0;
  double worst = 0.0;
  for (std::uint64_t seed = 0; positions < 500; ++seed) {
    const Model m = build(c, seed);
    const std::size_t batch = 1 + rng.below(3), t = 2 + rng.below(6);
    std::vector<std::size_t> lengths(batch);
    for (auto& l : lengths) l = 1 + rng.below(t);
    lengths[0] = t;
    Graph g;
    const BoundParams p = bind(g, m, false);
    const EncodeResult r = universal_act_encode(p, g.constant(random_tensor(rng, {batch, t, 6}, -3, 3)), lengths);
    const ActTrace& tr = *r.act;
    const Tensor& hw = m.params[*m.layout.halting_weight];
    const double hb = m.params[*m.layout.halting_bias][0];
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t i = 0; i < lengths[b]; ++i) {
        const std::size_t pos = b * t + i;
        ++positions;
        // halting probabilities recomputed from the recorded states
        double cum = 0.0;
        std::size_t used = 0;
        for (std::size_t s = 0; s < tr.step_states.size() && !used; ++s) {
          const double* st = tr.step_states[s].value().data() + pos * 8;
          double logit = hb;
          for (std::size_t k = 0; k < 8; ++k) logit += st[k] * hw[k];
          const double prob = 1.0 / (1.0 + std::exp(-logit));
          if (s + 1 == max_steps || cum + prob > 1.0 - 0.01) used = s + 1;
          else cum += prob;
        }
        const double total = cum + tr.remainder[pos];
        worst = std::max(worst, std::abs(total - 1.0));
        if (tr.steps[pos] != static_cast<double>(used)) worst = 1.0;
      }
    }
  }

  auto saturated = [&](double bias) {
    Model m = build(c, 1);
    m.params[*m.layout.halting_bias] = Tensor({1}, bias);
    Rng r(2);
    Graph g;
    const BoundParams p = bind(g, m, false);
    const Tensor steps = universal_act_encode(p, g.constant(random_tensor(r, {6, 6}))).act->steps;
    double lo = 1e9, hi = 0;
    for (double s : steps.values()) {
      lo = std::min(lo, s);
      hi = std::max(hi, s);
    }
    return std::pair{lo, hi};
  };
  const auto [plo, phi] = saturated(20.0);
  const auto [nlo, nhi] = saturated(-20.0);
  const bool halts = plo == 1.0 && phi == 1.0 && nlo == static_cast<double>(max_steps) && nhi == nlo;
  return {worst < 1e-9 && halts,
          fmt("%zu positions, |sum p + R - 1| <= %.1e < 1e-9; bias +20 -> %g step(s), -20 -> %g of %zu", positions,
              worst, phi, nlo, max_steps)};
}

// ---- 5, 6, 7 ----------------------------------------------------------------

struct SmokeRun {
  double token_acc = 0.0;
  BleuReport bleu;
  std::size_t steps = 0;
  double seconds = 0.0;
  std::vector<DecodedCaption> decoded;
};

// Settings shared by the three overfit runs.
SmokeRun smoke(Variant variant, bool dense) {
  const auto t0 = std::chrono::steady_clock::now();
  SynthCorpusSpec spec;  // 8 classes x 10 videos
  spec.seed = 0;
  spec.dense = dense;
  const SynthCorpus corpus = synth_corpus(spec);
  const auto& records = corpus.manifest.records;
  const Vocabulary vocab = build_vocab(records, 1);
  const std::size_t max_len = dense ? 80 : 20;

  ModelConfig mc;
  mc.variant = variant;
  mc.layers = 2;
  mc.d_model = 32;
  mc.heads = 2;
  mc.d_ff = 64;
  mc.dropout = 0.0;
  mc.vocab_size = vocab.size();
  mc.feature_dim = spec.feature_dim;
  mc.max_decode_len = max_len;

  TrainConfig tc;
  tc.batch_size = 16;
  tc.lr0 = 3e-3;
  tc.schedule = Schedule::cosine_restarts;
  tc.warmup_steps = 100;
  tc.restart_period = 100000;
  tc.epochs = 1000;
  tc.max_steps = 2000;
  tc.seed = 0;
  tc.max_len = max_len;

  const Dataset data{records, corpus.features};
  const TrainResult r = train(mc, tc, data, vocab);
  SmokeRun out;
  out.steps = r.steps;
  out.token_acc = evaluate_teacher_forced(r.model, data, vocab, max_len).token_acc;
  out.decoded = decode_all(r.model, vocab, records, corpus.features, {});
  if (dense) {
    std::map<std::string, Paragraph> pred;
    std::map<std::string, std::vector<Paragraph>> refs;
    for (std::size_t i = 0; i < records.size(); ++i) {
      pred[records[i].video_id] = split_sentences(out.decoded[i].tokens);
      for (const auto& c : records[i].captions) refs[records[i].video_id].push_back(split_sentences(c));
    }
    out.bleu = paragraph_bleu(pred, refs);
  } else {
    std::vector<EvalPair> pairs;
    for (std::size_t i = 0; i < records.size(); ++i) pairs.push_back({out.decoded[i].tokens, records[i].captions});
    out.bleu = corpus_bleu(pairs);
  }
  out.seconds = seconds_since(t0);
  return out;
}

Verdict smoke_vanilla() {
  const SmokeRun r = smoke(Variant::vanilla, false);
  return {r.token_acc >= 0.99 && r.bleu.bleu[3] >= 0.90 && r.steps <= 2000 && r.seconds < 300.0,
          fmt("token acc %.4f >= 0.99, BLEU-4 %.4f >= 0.90, %zu steps <= 2000, %.1f s < 300 s", r.token_acc,
              r.bleu.bleu[3], r.steps, r.seconds)};
}

Verdict smoke_universal() {
  const SmokeRun r = smoke(Variant::universal, false);
  return {r.bleu.bleu[3] >= 0.85 && r.steps <= 2000 && r.seconds < 300.0,
          fmt("BLEU-4 %.4f >= 0.85 (token acc %.4f), %zu steps <= 2000, %.1f s < 300 s", r.bleu.bleu[3], r.token_acc,
              r.steps, r.seconds)};
}

Verdict smoke_dense() {
  const SmokeRun r = smoke(Variant::vanilla, true);
  std::size_t multi = 0;
  for (const auto& d : r.decoded) multi += split_sentences(d.tokens).size() >= 2;
  const double share = static_cast<double>(multi) / static_cast<double>(r.decoded.size());
  return {r.bleu.bleu[3] >= 0.80 && share >= 0.90,
          fmt("paragraph BLEU-4 %.4f >= 0.80, %.1f%% of paragraphs with >= 2 sentences (>= 90%%), %zu steps, %.1f s",
              r.bleu.bleu[3], 100.0 * share, r.steps, r.seconds)};
}

// ---- 8 ----------------------------------------------------------------------

// Brute force: n-grams compared position by position, no maps.
std::vector<double> brute_bleu(const std::vector<EvalPair>& pairs) {
  double clipped[5] = {}, total[5] = {}, c = 0, r = 0;
  auto occurrences = [](const Tokens& seq, const Tokens& src, std::size_t at, std::size_t n) {
    std::size_t count = 0;
    for (std::size_t i = 0; i + n <= seq.size(); ++i)
      count += std::equal(seq.begin() + i, seq.begin() + i + n, src.begin() + at);
    return count;
  };
  for (const auto& p : pairs) {
    const Tokens& cand = p.candidate;
    for (std::size_t n = 1; n <= 4; ++n) {
      for (std::size_t i = 0; i + n <= cand.size(); ++i) {
        bool seen = false;
        for (std::size_t j = 0; j < i && !seen; ++j) seen = std::equal(cand.begin() + j, cand.begin() + j + n, cand.begin() + i);
        if (seen) continue;
        std::size_t best = 0;
        for (const auto& ref : p.references) best = std::max(best, occurrences(ref, cand, i, n));
        clipped[n] += static_cast<double>(std::min(occurrences(cand, cand, i, n), best));
      }
      if (cand.size() >= n) total[n] += static_cast<double>(cand.size() - n + 1);
    }
    double closest = 1e18;
    for (const auto& ref : p.references) {
      const double len = static_cast<double>(ref.size()), cl = static_cast<double>(cand.size());
      if (std::abs(len - cl) < std::abs(closest - cl) || (std::abs(len - cl) == std::abs(closest - cl) && len < closest))
        closest = len;
    }
    c += static_cast<double>(cand.size());
    r += closest;
  }
  const double bp = c > r ? 1.0 : std::exp(1.0 - r / c);
  std::vector<double> out;
  for (std::size_t n = 1; n <= 4; ++n) {
    double s = 0.0;
    bool zero = false;
    for (std::size_t i = 1; i <= n; ++i) {
      if (clipped[i] == 0.0) zero = true;
      else s += std::log(clipped[i] / total[i]) / static_cast<double>(n);
    }
    out.push_back(zero ? 0.0 : bp * std::exp(s));
  }
  return out;
}

Verdict bleu_oracle() {
  static const Tokens alphabet{"a", "man", "is", "cooking"};
  Rng rng(0);
  auto sentence = [&] {
    Tokens t(1 + rng.below(12));
    for (auto& w : t) w = alphabet[rng.below(alphabet.size())];
    return t;
  };
  double worst = 0.0;
  std::vector<EvalPair> corpus;
  for (int i = 0; i < 100; ++i) {
    EvalPair p{sentence(), {}};
    for (std::size_t k = 0, n = 1 + rng.below(3); k < n; ++k) p.references.push_back(sentence());
    corpus.push_back(p);
    // each pair alone, then the growing corpus
    const std::vector<EvalPair> single{p};
    for (const std::vector<EvalPair>* set : {&single, static_cast<const std::vector<EvalPair>*>(&corpus)}) {
      const auto want = brute_bleu(*set);
      const auto got = corpus_bleu(*set).bleu;
      for (std::size_t n = 0; n < 4; ++n) worst = std::max(worst, std::abs(got[n] - want[n]));
    }
  }
  const std::vector<EvalPair> sevens{{Tokens(7, "the"), {tokenize("the cat is on the mat")}}};
  const ClippedCounts cc = modified_precision(sevens, 1);
  const double p1 = corpus_bleu(sevens, {1}).precisions[0];
  return {worst < 1e-12 && cc.clipped == 2 && cc.total == 7 && p1 == 2.0 / 7.0,
          fmt("100 random pairs, max |diff| %.1e < 1e-12; the x7 -> %zu/%zu", worst, cc.clipped, cc.total)};
}

// ---- 9 ----------------------------------------------------------------------

Verdict pca_checks() {
  Rng rng(0);
  // random data for orthonormality and bookkeeping
  std::vector<FeatureMatrix> data;
  std::size_t n = 0;
  for (int v = 0; v < 12; ++v) {
    data.push_back({"v" + std::to_string(v), random_tensor(rng, {static_cast<std::size_t>(4 + v % 3), 10}), "test"});
    n += data.back().rows();
  }
  double ortho = 0.0, bookkeeping = 0.0, full_basis = 0.0;
  for (std::size_t k : {1, 4, 7, 10}) {
    const PcaModel m = pca_fit(data, k);
    for (std::size_t a = 0; a < k; ++a)
      for (std::size_t b = 0; b < k; ++b) {
        double dot = 0.0;
        for (std::size_t j = 0; j < 10; ++j) dot += m.components.at(a, j) * m.components.at(b, j);
        ortho = std::max(ortho, std::abs(dot - (a == b ? 1.0 : 0.0)));
      }
    // total variance from the centred data, independent of the eigensolver
    std::vector<double> mean(10, 0.0);
    for (const auto& f : data)
      for (std::size_t i = 0; i < f.rows(); ++i)
        for (std::size_t j = 0; j < 10; ++j) mean[j] += f.values.at(i, j) / static_cast<double>(n);
    double total = 0.0, err = 0.0;
    for (const auto& f : data) {
      const Tensor back = pca_reconstruct(m, pca_apply(m, f).values);
      for (std::size_t i = 0; i < f.rows(); ++i)
        for (std::size_t j = 0; j < 10; ++j) {
          total += std::pow(f.values.at(i, j) - mean[j], 2);
          err += std::pow(back.at(i, j) - f.values.at(i, j), 2);
        }
    }
    const double kept = std::accumulate(m.eigenvalues.begin(), m.eigenvalues.end(), 0.0);
    const double discarded = total - kept * static_cast<double>(n - 1);
    // with the full basis both sides are round-off, so exactness is checked instead
    if (k < 10) bookkeeping = std::max(bookkeeping, std::abs(err - discarded) / discarded);
    else full_basis = std::sqrt(err);
  }
  // rank-3 data in 8 dimensions
  Tensor basis = random_tensor(rng, {3, 8});
  std::vector<FeatureMatrix> sub;
  for (int v = 0; v < 9; ++v) {
    Tensor x({5, 8}, 0.0);
    for (std::size_t i = 0; i < 5; ++i) {
      const double a = rng.uniform(-2, 2), b = rng.uniform(-2, 2), c = rng.uniform(-2, 2);
      for (std::size_t j = 0; j < 8; ++j) x.at(i, j) = 0.5 + a * basis.at(0, j) + b * basis.at(1, j) + c * basis.at(2, j);
    }
    sub.push_back({"s" + std::to_string(v), x, "test"});
  }
  const PcaModel m3 = pca_fit(sub, 3);
  double recon = 0.0;
  for (const auto& f : sub) recon = std::max(recon, max_abs_diff(pca_reconstruct(m3, pca_apply(m3, f).values), f.values));
  return {ortho < 1e-8 && recon < 1e-8 && full_basis < 1e-8 && bookkeeping < 1e-6,
          fmt("|CC^T - I|max %.1e < 1e-8, subspace reconstruction %.1e < 1e-8, discarded-variance rel err %.1e < 1e-6 "
              "(k = 1, 4, 7; full basis residual %.1e)",
              ortho, recon, bookkeeping, full_basis)};
}

// ---- 10 ---------------------------------------------------------------------

Verdict feature_accounting() {
  const std::size_t c3d = expected_rows(500, 500, 16), i3d = expected_rows(400, 400, 8);
  testutil::TempDir dir("acceptance-features");
  Rng rng(0);
  const FeatureMatrix m{"clip", random_tensor(rng, {31, 64}, -50, 50), "test"};
  write_feature_file(dir / "clip.vfm", m);
  const FeatureMatrix back = read_feature_file(dir / "clip.vfm");
  bool exact = back.values.shape() == m.values.shape();
  for (std::size_t i = 0; exact && i < m.values.size(); ++i)
    exact = std::bit_cast<std::uint32_t>(static_cast<float>(back.values[i])) ==
            std::bit_cast<std::uint32_t>(static_cast<float>(m.values[i]));
  // checksum: byte sum of the float32 payload, stored in the last 8 bytes
  const std::string bytes = slurp(dir / "clip.vfm");
  std::uint64_t sum = 0, stored = 0;
  for (std::size_t i = 20; i < bytes.size() - 8; ++i) sum += static_cast<unsigned char>(bytes[i]);
  for (int i = 0; i < 8; ++i)
    stored |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[bytes.size() - 8 + i])) << (8 * i);
  const bool checksum = stored == sum && bytes.size() == 20 + 31 * 64 * 4 + 8;
  return {c3d == 31 && i3d == 50 && exact && checksum,
          fmt("expected_rows 500/16 -> %zu (31), 400/8 -> %zu (50); round trip %s, checksum %s", c3d, i3d,
              exact ? "bit-exact" : "DIFFERS", checksum ? "valid" : "INVALID")};
}

// ---- 11 ---------------------------------------------------------------------

Verdict schedules_and_presets() {
  double worst = 0.0;
  const double lr0 = 1e-4;
  const std::size_t warmup = 400, period = 1000;
  for (std::size_t step = 0; step < 10000; ++step) {
    const double want = step < warmup ? lr0 * static_cast<double>(step + 1) / warmup
                                      : lr0 * 0.5 *
                                            (1.0 + std::cos(std::numbers::pi *
                                                            static_cast<double>((step - warmup) % period) / period));
    worst = std::max(worst, std::abs(lr_cosine_restarts(lr0, step, warmup, period) - want));
    worst = std::max(worst, std::abs(lr_decay(lr0, step) - lr0 * std::pow(0.98, static_cast<double>(step))));
  }
  std::string presets;
  bool built = true;
  for (const auto& cfg : {ModelConfig::msvd_vanilla(100), ModelConfig::msvd_universal(100),
                          ModelConfig::activitynet_universal(100)}) {
    const Model m = build(cfg, 0);
    built = built && m.params.scalar_count() == param_count(cfg);
    presets += fmt("%s%zu/%zu/%zu", presets.empty() ? "" : "; ", cfg.layers, cfg.d_model, cfg.heads);
  }
  return {worst < 1e-12 && built, fmt("10000 steps, max |diff| %.1e < 1e-12; presets %s built", worst, presets.c_str())};
}

// ---- 12 ---------------------------------------------------------------------

struct PipelineArtifacts {
  std::string checkpoint, decoded, report, table;
  int code = 0;
};

PipelineArtifacts pipeline(const testutil::TempDir& dir) {
  PipelineArtifacts a;
  std::ostringstream out, err;
  const std::string data = (dir / "data").string(), manifest = (dir / "data" / "manifest.json").string();
  const std::string ckpt = (dir / "model.ckpt").string(), tsv = (dir / "decoded.tsv").string(),
                    report = (dir / "report.json").string();
  const std::vector<std::vector<std::string>> steps{
      {"synth", "--seed", "0", "--out", data},
      {"train", "--seed", "0", "--manifest", manifest, "--out", ckpt, "--layers", "2", "--d-model", "32", "--heads",
       "2", "--d-ff", "64", "--batch-size", "16", "--lr", "3e-3", "--schedule", "cosine", "--warmup", "20",
       "--epochs", "10"},
      {"decode", "--checkpoint", ckpt, "--manifest", manifest, "--out", tsv},
      {"eval", "--manifest", manifest, "--decoded", tsv, "--out", report},
  };
  for (const auto& args : steps) {
    std::ostringstream o;
    a.code = cli::run(args, o, err);
    if (a.code != 0) return a;
    if (args[0] == "eval") a.table = o.str();
  }
  a.checkpoint = slurp(ckpt);
  a.decoded = slurp(tsv);
  a.report = slurp(report);
  return a;
}

Verdict determinism() {
  testutil::TempDir first("acceptance-run-a"), second("acceptance-run-b");
  const PipelineArtifacts a = pipeline(first), b = pipeline(second);
  if (a.code != 0 || b.code != 0) return {false, fmt("pipeline exit codes %d and %d", a.code, b.code)};
  const bool same = !a.checkpoint.empty() && a.checkpoint == b.checkpoint && a.report == b.report &&
                    a.decoded == b.decoded && a.table == b.table;
  return {same, fmt("checkpoints %s (%zu bytes), BLEU reports %s", a.checkpoint == b.checkpoint ? "identical" : "DIFFER",
                    a.checkpoint.size(), a.report == b.report && a.table == b.table ? "identical" : "DIFFER")};
}

}  // namespace

int main() {
  const std::vector<std::pair<const char*, std::function<Verdict()>>> criteria{
      {"gradient suite", gradient_suite},
      {"attention invariants", attention_invariants},
      {"universal sharing", universal_sharing},
      {"ACT bookkeeping", act_bookkeeping},
      {"overfit smoke, vanilla", smoke_vanilla},
      {"overfit smoke, universal", smoke_universal},
      {"dense smoke", smoke_dense},
      {"BLEU oracle", bleu_oracle},
      {"PCA", pca_checks},
      {"feature accounting", feature_accounting},
      {"schedules and presets", schedules_and_presets},
      {"determinism", determinism},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failures += !v.pass;
    std::printf("%s %2zu %-26s %s\n", v.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, v.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%zu criteria, %d failed\n", criteria.size(), failures);
  return failures ? 1 : 0;
}
