#include "captionforge/decoding.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <thread>

#include "captionforge/errors.hpp"

namespace captionforge {

namespace {

// Holds the encoded memory of one video so each step only reruns the decoder.
struct DecoderSession {
  Graph graph;
  BoundParams params;
  Var memory;
  std::size_t vocab;

  DecoderSession(const Model& model, const Tensor& features) {
    params = bind(graph, model, false);
    memory = encode(params, graph.constant(features)).memory;
    vocab = model.config.vocab_size;
  }

  // Logits of the position after `prefix`.
  std::vector<double> next_logits(std::span<const std::size_t> prefix) {
    const Var logits = decode_forward(params, prefix, memory);
    const double* last = logits.value().data() + (prefix.size() - 1) * vocab;
    return {last, last + vocab};
  }
};

std::size_t resolve_max_len(const Model& model, std::size_t max_len) {
  return max_len ? max_len : model.config.max_decode_len;
}

double log_sum_exp(std::span<const double> x) {
  const double m = *std::max_element(x.begin(), x.end());
  double s = 0.0;
  for (double v : x) s += std::exp(v - m);
  return m + std::log(s);
}

// Drops the leading <sos> and a final <eos>; anything the model generated in
// between is kept as is.
std::vector<std::size_t> strip(const std::vector<std::size_t>& tokens) {
  auto end = tokens.end();
  if (tokens.size() > 1 && tokens.back() == token_id::eos) --end;
  return {tokens.begin() + 1, end};
}

double score(const Hypothesis& h, double alpha) {
  const auto generated = static_cast<double>(h.tokens.size() - 1);
  return alpha == 0.0 ? h.logprob : h.logprob / std::pow(std::max(generated, 1.0), alpha);
}

}  // namespace

std::vector<std::size_t> greedy_decode(const Model& model, const Tensor& features, std::size_t max_len) {
  max_len = resolve_max_len(model, max_len);
  DecoderSession session(model, features);
  std::vector<std::size_t> tokens{token_id::sos};
  for (std::size_t step = 0; step < max_len; ++step) {
    const auto logits = session.next_logits(tokens);
    const auto best = static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    if (best == token_id::eos) break;
    tokens.push_back(best);
  }
  return strip(tokens);
}

std::vector<std::size_t> beam_decode(const Model& model, const Tensor& features, std::size_t width, double alpha,
                                     std::size_t max_len) {
  if (width == 0) throw ConfigError("beam width must be at least 1");
  max_len = resolve_max_len(model, max_len);
  DecoderSession session(model, features);

  struct Candidate {
    std::size_t beam;
    std::size_t token;
    double total;
    double logit;
  };

  std::vector<Hypothesis> beams{{{token_id::sos}, 0.0, false}};
  std::vector<Hypothesis> finished;
  for (std::size_t step = 0; step < max_len && !beams.empty(); ++step) {
    std::vector<Candidate> candidates;
    for (std::size_t b = 0; b < beams.size(); ++b) {
      const auto logits = session.next_logits(beams[b].tokens);
      const double lse = log_sum_exp(logits);
      for (std::size_t v = 0; v < logits.size(); ++v)
        candidates.push_back({b, v, beams[b].logprob + (logits[v] - lse), logits[v]});
    }
    const std::size_t keep = std::min(width, candidates.size());
    std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(keep), candidates.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.total != b.total) return a.total > b.total;
                        if (a.beam != b.beam) return a.beam < b.beam;
                        if (a.logit != b.logit) return a.logit > b.logit;
                        return a.token < b.token;
                      });
    std::vector<Hypothesis> next;
    for (std::size_t i = 0; i < keep; ++i) {
      const Candidate& c = candidates[i];
      Hypothesis h = beams[c.beam];
      h.tokens.push_back(c.token);
      h.logprob = c.total;
      h.finished = c.token == token_id::eos || h.tokens.size() - 1 == max_len;
      (h.finished ? finished : next).push_back(std::move(h));
    }
    beams = std::move(next);
  }

  // The greedy path competes too, so a wider beam never scores below it.
  if (width > 1) {
    const auto greedy = greedy_decode(model, features, max_len);
    Hypothesis g{{token_id::sos}, sequence_logprob(model, features, greedy, max_len), true};
    g.tokens.insert(g.tokens.end(), greedy.begin(), greedy.end());
    if (greedy.size() < max_len) g.tokens.push_back(token_id::eos);
    finished.push_back(std::move(g));
  }

  const Hypothesis* best = &finished.front();
  for (const auto& h : finished)
    if (score(h, alpha) > score(*best, alpha)) best = &h;
  return strip(best->tokens);
}

double sequence_logprob(const Model& model, const Tensor& features, std::span<const std::size_t> caption,
                        std::size_t max_len) {
  max_len = resolve_max_len(model, max_len);
  DecoderSession session(model, features);
  std::vector<std::size_t> input{token_id::sos};
  input.insert(input.end(), caption.begin(), caption.end());
  std::vector<std::size_t> targets(caption.begin(), caption.end());
  if (caption.size() < max_len) targets.push_back(token_id::eos);
  const Var logits = decode_forward(session.params, input, session.memory);
  const std::size_t v = session.vocab;
  double total = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    std::span<const double> row(logits.value().data() + i * v, v);
    total += row[targets[i]] - log_sum_exp(row);
  }
  return total;
}

std::vector<DecodedCaption> decode_all(const Model& model, const Vocabulary& vocab,
                                       std::span<const VideoRecord> records,
                                       std::span<const FeatureMatrix> features, const DecodeOptions& options) {
  if (records.size() != features.size()) throw DataError("decode: records and feature matrices differ in count");
  if (options.beam_width == 0) throw ConfigError("beam width must be at least 1");
  std::vector<DecodedCaption> out(records.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < records.size(); i = next++) {
      const auto ids = beam_decode(model, features[i].values, options.beam_width, options.alpha);
      out[i] = {records[i].video_id, vocab.decode(ids)};
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(options.threads, 1, std::max<std::size_t>(records.size(), 1));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  return out;
}

std::string format_caption(const Tokens& tokens) {
  std::string out;
  for (const auto& sentence : split_sentences(tokens)) {
    if (!out.empty()) out += " . ";
    out += join_tokens(sentence);
  }
  return out;
}

void write_decoded(const std::filesystem::path& path, std::span<const DecodedCaption> decoded) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write decode output '" + path.string() + "'");
  for (const auto& d : decoded) out << d.video_id << '\t' << format_caption(d.tokens) << '\n';
}

std::vector<DecodedCaption> read_decoded(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open decode output '" + path.string() + "'");
  std::vector<DecodedCaption> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": expected video_id<TAB>caption");
    }
    DecodedCaption d{line.substr(0, tab), {}};
    std::string_view text(line);
    text.remove_prefix(tab + 1);
    // Sentences are separated by " . "; tokenize() drops the periods.
    std::size_t start = 0;
    while (start <= text.size()) {
      const auto stop = text.find(" . ", start);
      const Tokens sentence = tokenize(text.substr(start, stop == std::string_view::npos ? stop : stop - start));
      if (!sentence.empty()) {
        if (!d.tokens.empty()) d.tokens.emplace_back(kSeparator);
        d.tokens.insert(d.tokens.end(), sentence.begin(), sentence.end());
      }
      if (stop == std::string_view::npos) break;
      start = stop + 3;
    }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace captionforge
