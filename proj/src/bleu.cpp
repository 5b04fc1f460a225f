#include "captionforge/bleu.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "captionforge/errors.hpp"

namespace captionforge {

NgramCounts ngram_counts(std::span<const std::string> tokens, std::size_t n) {
  if (n == 0) throw ConfigError("ngram order must be at least 1");
  NgramCounts counts;
  for (std::size_t i = 0; i + n <= tokens.size(); ++i) ++counts[Ngram(tokens.begin() + i, tokens.begin() + i + n)];
  return counts;
}

ClippedCounts modified_precision(std::span<const EvalPair> pairs, std::size_t n) {
  ClippedCounts out;
  for (const auto& pair : pairs) {
    NgramCounts max_ref;
    for (const auto& ref : pair.references)
      for (const auto& [gram, count] : ngram_counts(ref, n)) max_ref[gram] = std::max(max_ref[gram], count);
    for (const auto& [gram, count] : ngram_counts(pair.candidate, n)) {
      const auto it = max_ref.find(gram);
      out.clipped += std::min(count, it == max_ref.end() ? std::size_t{0} : it->second);
      out.total += count;
    }
  }
  return out;
}

BleuReport corpus_bleu(std::span<const EvalPair> pairs, const BleuOptions& options) {
  if (pairs.empty()) throw DataError("BLEU needs at least one candidate");
  if (options.max_n < 1 || options.max_n > 4) throw ConfigError("BLEU order must lie in 1..4");

  BleuReport r;
  r.n_pairs = pairs.size();
  for (const auto& pair : pairs) {
    if (pair.references.empty()) throw DataError("BLEU pair without references");
    const std::size_t c = pair.candidate.size();
    std::size_t best = pair.references.front().size();
    for (const auto& ref : pair.references) {
      const std::size_t len = ref.size();
      const auto d = [c](std::size_t l) { return l > c ? l - c : c - l; };
      if (d(len) < d(best) || (d(len) == d(best) && len < best)) best = len;
    }
    r.candidate_length += c;
    r.reference_length += best;
  }
  if (r.candidate_length > r.reference_length) {
    r.bp = 1.0;
  } else if (r.candidate_length == 0) {
    r.bp = 0.0;
  } else {
    r.bp = std::exp(1.0 - static_cast<double>(r.reference_length) / static_cast<double>(r.candidate_length));
  }

  double log_sum = 0.0;
  bool zero = false;
  for (std::size_t n = 1; n <= options.max_n; ++n) {
    const ClippedCounts counts = modified_precision(pairs, n);
    double p = counts.total ? static_cast<double>(counts.clipped) / static_cast<double>(counts.total) : 0.0;
    if (p == 0.0 && options.smoothing) {
      p = options.epsilon / static_cast<double>(std::max<std::size_t>(counts.total, 1));
    }
    r.precisions.push_back(p);
    if (p == 0.0) zero = true;
    if (!zero) log_sum += std::log(p);
    r.bleu.push_back(zero || r.bp == 0.0 ? 0.0 : r.bp * std::exp(log_sum / static_cast<double>(n)));
  }
  return r;
}

BleuReport paragraph_bleu(const std::map<std::string, Paragraph>& predicted,
                          const std::map<std::string, std::vector<Paragraph>>& references,
                          const BleuOptions& options) {
  std::vector<std::string> missing, extra;
  for (const auto& [id, _] : references)
    if (!predicted.contains(id)) missing.push_back(id);
  for (const auto& [id, _] : predicted)
    if (!references.contains(id)) extra.push_back(id);
  if (!missing.empty() || !extra.empty()) {
    std::string msg = "paragraph BLEU: video ids differ;";
    auto list = [&msg](const char* label, const std::vector<std::string>& ids) {
      if (ids.empty()) return;
      msg += std::string(" ") + label + ":";
      for (const auto& id : ids) msg += " " + id;
    };
    list("without prediction", missing);
    list("without reference", extra);
    throw DataError(msg);
  }

  auto flatten = [](const Paragraph& p) {
    Tokens out;
    for (const auto& s : p) out.insert(out.end(), s.begin(), s.end());
    return out;
  };
  std::vector<EvalPair> pairs;
  for (const auto& [id, paragraph] : predicted) {
    EvalPair pair{flatten(paragraph), {}};
    for (const auto& ref : references.at(id)) pair.references.push_back(flatten(ref));
    pairs.push_back(std::move(pair));
  }
  return corpus_bleu(pairs, options);
}

nlohmann::json to_json(const BleuReport& report) {
  nlohmann::json j;
  for (std::size_t n = 0; n < report.bleu.size(); ++n) j["bleu" + std::to_string(n + 1)] = report.bleu[n];
  j["n_pairs"] = report.n_pairs;
  j["bp"] = report.bp;
  j["precisions"] = report.precisions;
  j["candidate_length"] = report.candidate_length;
  j["reference_length"] = report.reference_length;
  return j;
}

std::string format_table(const BleuReport& report) {
  std::string out = "metric   score\n";
  char line[64];
  for (std::size_t n = 0; n < report.bleu.size(); ++n) {
    std::snprintf(line, sizeof line, "BLEU-%zu   %.4f\n", n + 1, report.bleu[n]);
    out += line;
  }
  std::snprintf(line, sizeof line, "BP       %.4f\npairs    %zu\n", report.bp, report.n_pairs);
  return out + line;
}

}  // namespace captionforge
