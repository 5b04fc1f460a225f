#include "captionforge/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>

#include <CLI11.hpp>
#include <json.hpp>

#include "captionforge/attributes.hpp"
#include "captionforge/bleu.hpp"
#include "captionforge/checkpoint.hpp"
#include "captionforge/corpus.hpp"
#include "captionforge/decoding.hpp"
#include "captionforge/errors.hpp"
#include "captionforge/features.hpp"
#include "captionforge/gradsuite.hpp"
#include "captionforge/pca.hpp"
#include "captionforge/training.hpp"
#include "binary_io.hpp"

namespace captionforge::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

inline constexpr int kConfigVersion = 1;
inline constexpr const char* kConfigEnv = "CAPTIONFORGE_CONFIG";

// ---- option sets ------------------------------------------------------------------

struct SynthOptions {
  std::optional<std::uint64_t> seed;
  std::string out;
  std::size_t classes = 8, videos_per_class = 10, templates = 3, paraphrases = 1;
  bool dense = false;
  std::size_t rows_min = 4, rows_max = 8, feature_dim = 32;
  double signal = 0.9, val_fraction = 0.0;
};

struct PcaFitOptions {
  std::string manifest, out, split = "train";
  std::size_t k = 512;
};

struct PcaApplyOptions {
  std::string pca, manifest, out;
};

struct TrainOptions {
  std::optional<std::uint64_t> seed;
  std::string manifest, out, metrics, preset;
  std::string variant = "vanilla";
  std::size_t layers = 6, d_model = 512, heads = 8, d_ff = 2048;
  double dropout = 0.1;
  std::size_t max_len = 0;  // 0: 20, or 80 for paragraph corpora
  bool encoder_positions = true;
  bool act = false;
  double act_epsilon = 0.01;
  std::size_t act_max_steps = 8;
  double ponder_weight = 0.01;
  std::size_t batch_size = 64;
  double lr = 1e-4;
  std::string schedule = "decay";
  std::size_t warmup = 400, restart_period = 1000, epochs = 1, max_steps = 0;
  double grad_clip = 1.0, divergence_threshold = 20.0;
  std::size_t min_count = 0;  // 0: 1 for synthetic corpora, otherwise 2
};

struct DecodeCliOptions {
  std::string checkpoint, manifest, out, split = "all";
  std::size_t beam = 1, threads = 1;
  double alpha = 0.7;
};

struct EvalOptions {
  std::string manifest, decoded, out, split = "all";
  bool smoothing = false;
  std::size_t max_n = 4;
};

struct AttrsOptions {
  std::uint64_t seed = 0;
  std::string manifest, out, metrics, split = "train", mode = "elementwise";
  std::size_t k = 10, epochs = 200, batch_size = 64;
  double lr = 1e-2;
  bool no_stoplist = false;
};

struct GradcheckOptions {
  std::uint64_t seed = 0;
};

struct InspectOptions {
  std::vector<std::string> paths;
};

// ---- helpers -----------------------------------------------------------------------

std::string key_of(const CLI::Option* opt) {
  std::string name = opt->get_single_name();
  std::replace(name.begin(), name.end(), '-', '_');
  return name;
}

std::string flag_of(std::string key) {
  std::replace(key.begin(), key.end(), '_', '-');
  return "--" + key;
}

CLI::Option* find_option(CLI::App* sub, const std::string& key) {
  for (CLI::Option* opt : sub->get_options()) {
    if (opt->get_lnames().empty()) continue;
    if (key_of(opt) == key) return opt;
  }
  return nullptr;
}

std::string scalar_text(const json& value, const std::string& key, const fs::path& file) {
  if (value.is_string()) return value.get<std::string>();
  if (value.is_boolean()) return value.get<bool>() ? "true" : "false";
  if (value.is_number_unsigned()) return std::to_string(value.get<std::uint64_t>());
  if (value.is_number_integer()) return std::to_string(value.get<std::int64_t>());
  if (value.is_number_float()) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", value.get<double>());
    return buf;
  }
  throw ConfigError("config '" + file.string() + "': key '" + key + "' must be a string, number or boolean");
}

// Turns config entries into flags placed before the command-line flags, so
// the command line wins.
std::vector<std::string> config_args(const fs::path& file, CLI::App& app, CLI::App* sub) {
  std::ifstream in(file);
  if (!in) throw ConfigError("cannot open config file '" + file.string() + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config '" + file.string() + "' is not valid JSON: " + e.what());
  }
  if (!j.is_object()) throw ConfigError("config '" + file.string() + "' must be a JSON object");
  if (!j.contains("version") || j["version"] != kConfigVersion) {
    throw ConfigError("config '" + file.string() + "': key 'version' must be " + std::to_string(kConfigVersion));
  }

  std::vector<std::string> args;
  auto push = [&](CLI::Option* opt, const std::string& key, const json& value) {
    if (opt->get_expected_max() == 0) {
      args.push_back(flag_of(key) + "=" + scalar_text(value, key, file));
    } else {
      args.push_back(flag_of(key));
      args.push_back(scalar_text(value, key, file));
    }
  };
  std::vector<CLI::App*> subs = app.get_subcommands({});
  for (const auto& [key, value] : j.items()) {
    if (key == "version") continue;
    auto named = std::find_if(subs.begin(), subs.end(), [&](CLI::App* s) { return s->get_name() == key; });
    if (named != subs.end()) {
      if (!value.is_object()) throw ConfigError("config '" + file.string() + "': section '" + key + "' must be an object");
      if (*named != sub) continue;
      for (const auto& [k, v] : value.items()) {
        CLI::Option* opt = find_option(sub, k);
        if (!opt || k == "config") {
          throw ConfigError("config '" + file.string() + "': unknown key '" + key + "." + k + "'");
        }
        push(opt, k, v);
      }
      continue;
    }
    // Shared keys apply to every subcommand that has them.
    const bool known = std::any_of(subs.begin(), subs.end(), [&](CLI::App* s) { return find_option(s, key); });
    if (!known || key == "config") throw ConfigError("config '" + file.string() + "': unknown key '" + key + "'");
    if (CLI::Option* opt = find_option(sub, key)) push(opt, key, value);
  }
  return args;
}

Split parse_split_arg(const std::string& text) {
  try {
    return parse_split(text);
  } catch (const DataError&) {
    throw UsageError("unknown split '" + text + "' (expected train, val, test or all)");
  }
}

std::vector<VideoRecord> select(const Manifest& m, const std::string& split) {
  if (split == "all") return m.records;
  return m.split(parse_split_arg(split));
}

void require_seed(const std::optional<std::uint64_t>& seed, const char* command) {
  if (!seed) throw UsageError(std::string(command) + ": --seed is required (flag or config key 'seed')");
}

std::string fixed(double x, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, x);
  return buf;
}

// ---- subcommands -------------------------------------------------------------------

int run_synth(const SynthOptions& o, std::ostream& out) {
  require_seed(o.seed, "synth");
  SynthCorpusSpec spec;
  spec.seed = *o.seed;
  spec.n_classes = o.classes;
  spec.videos_per_class = o.videos_per_class;
  spec.templates = o.templates;
  spec.paraphrases = o.paraphrases;
  spec.dense = o.dense;
  spec.rows_min = o.rows_min;
  spec.rows_max = o.rows_max;
  spec.feature_dim = o.feature_dim;
  spec.signal_strength = o.signal;
  spec.val_fraction = o.val_fraction;
  const SynthCorpus corpus = synth_corpus(spec);
  const fs::path manifest = write_corpus(o.out, corpus);
  out << "wrote " << corpus.manifest.records.size() << " videos to " << manifest.string() << '\n';
  return 0;
}

int run_pca_fit(const PcaFitOptions& o, std::ostream& out) {
  const Manifest m = load_manifest(o.manifest);
  const auto records = select(m, o.split);
  const auto features = load_features(records);
  const PcaModel model = pca_fit(features, o.k);
  write_pca_file(o.out, model);
  out << "fitted PCA " << model.input_dim << " -> " << model.output_dim << " on " << records.size()
      << " videos; wrote " << o.out << '\n';
  return 0;
}

int run_pca_apply(const PcaApplyOptions& o, std::ostream& out) {
  const PcaModel model = read_pca_file(o.pca);
  Manifest m = load_manifest(o.manifest);
  const fs::path dir = o.out;
  fs::create_directories(dir / "features");
  for (auto& rec : m.records) {
    FeatureMatrix f = read_feature_file(rec.feature_path);
    f.extractor_tag = m.extractor_tag;
    const FeatureMatrix reduced = pca_apply(model, f);
    rec.feature_path = fs::path("features") / (rec.video_id + ".vfm");
    write_feature_file(dir / rec.feature_path, reduced);
  }
  m.extractor_tag += "+pca" + std::to_string(model.output_dim);
  save_manifest(dir / "manifest.json", m);
  out << "projected " << m.records.size() << " videos to " << model.output_dim << " dims in " << dir.string() << '\n';
  return 0;
}

ModelConfig model_config_from(const TrainOptions& o, CLI::App* sub, std::size_t vocab, std::size_t feature_dim,
                              std::size_t max_len) {
  ModelConfig c;
  if (!o.preset.empty()) {
    if (o.preset == "msvd-vanilla") c = ModelConfig::msvd_vanilla(vocab);
    else if (o.preset == "msvd-universal") c = ModelConfig::msvd_universal(vocab);
    else if (o.preset == "activitynet-universal") c = ModelConfig::activitynet_universal(vocab);
    else throw UsageError("unknown preset '" + o.preset + "' (msvd-vanilla, msvd-universal, activitynet-universal)");
  }
  auto given = [&](const char* name) { return o.preset.empty() || sub->count(name) > 0; };
  if (given("--variant")) c.variant = parse_variant(o.variant);
  if (given("--layers")) c.layers = o.layers;
  if (given("--d-model")) c.d_model = o.d_model;
  if (given("--heads")) c.heads = o.heads;
  if (given("--d-ff")) c.d_ff = o.d_ff;
  if (given("--dropout")) c.dropout = o.dropout;
  if (given("--encoder-positions")) c.encoder_positions = o.encoder_positions;
  if (o.act) c.act = ActConfig{o.act_epsilon, o.act_max_steps, o.ponder_weight};
  c.vocab_size = vocab;
  c.feature_dim = feature_dim;
  c.max_decode_len = max_len;
  c.validate();
  return c;
}

int run_train(const TrainOptions& o, CLI::App* sub, std::ostream& out) {
  require_seed(o.seed, "train");
  const Manifest m = load_manifest(o.manifest);
  const auto train_records = m.split(Split::train);
  const auto val_records = m.split(Split::val);
  if (train_records.empty()) throw DataError("manifest '" + o.manifest + "' has no train records");
  const auto train_features = load_features(train_records);
  const auto val_features = load_features(val_records);

  const std::size_t min_count = o.min_count ? o.min_count : (m.extractor_tag == "synthetic" ? 1 : 2);
  const Vocabulary vocab = build_vocab(train_records, min_count);
  const std::size_t max_len = o.max_len ? o.max_len : (m.paragraphs ? 80 : 20);

  const ModelConfig mc = model_config_from(o, sub, vocab.size(), train_features.front().dim(), max_len);
  TrainConfig tc;
  tc.batch_size = o.batch_size;
  tc.lr0 = o.lr;
  tc.schedule = parse_schedule(o.schedule);
  tc.warmup_steps = o.warmup;
  tc.restart_period = o.restart_period;
  tc.epochs = o.epochs;
  tc.max_steps = o.max_steps;
  tc.seed = *o.seed;
  tc.grad_clip_norm = o.grad_clip;
  tc.divergence_threshold = o.divergence_threshold;
  tc.max_len = max_len;
  tc.metrics_path = o.metrics;
  tc.checkpoint_path = o.out;

  out << "vocabulary " << vocab.size() << ", parameters " << param_count(mc) << ", train videos "
      << train_records.size() << ", val videos " << val_records.size() << '\n';
  const Dataset train_set{train_records, train_features};
  const Dataset val_set{val_records, val_features};
  const TrainResult r = train(mc, tc, train_set, vocab, &val_set, [&out](const EpochMetrics& e) {
    out << "epoch " << e.epoch << " loss " << fixed(e.loss) << " token_acc " << fixed(e.token_acc, 4) << " lr "
        << e.lr;
    if (e.val_loss) out << " val_loss " << fixed(*e.val_loss);
    out << '\n';
  });
  out << "trained " << r.steps << " steps; checkpoint (epoch " << r.best_epoch << ") written to " << o.out << '\n';
  return 0;
}

int run_decode(const DecodeCliOptions& o, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(o.checkpoint);
  const Vocabulary vocab = vocabulary_from_metadata(ck.metadata);
  const Manifest m = load_manifest(o.manifest);
  const auto records = select(m, o.split);
  if (records.empty()) throw DataError("manifest '" + o.manifest + "' has no records in split '" + o.split + "'");
  const auto features = load_features(records);
  const auto decoded = decode_all(ck.model, vocab, records, features, {o.beam, o.alpha, o.threads});
  write_decoded(o.out, decoded);
  out << "decoded " << decoded.size() << " videos to " << o.out << '\n';
  return 0;
}

int run_eval(const EvalOptions& o, std::ostream& out) {
  const Manifest m = load_manifest(o.manifest);
  const auto records = select(m, o.split);
  const auto decoded = read_decoded(o.decoded);
  BleuOptions opts;
  opts.max_n = o.max_n;
  opts.smoothing = o.smoothing;

  std::map<std::string, const VideoRecord*> by_id;
  for (const auto& r : records) by_id[r.video_id] = &r;
  std::map<std::string, Tokens> predicted;
  for (const auto& d : decoded) {
    if (!by_id.contains(d.video_id)) {
      throw DataError("'" + o.decoded + "': video '" + d.video_id + "' is not in manifest '" + o.manifest + "'");
    }
    predicted[d.video_id] = d.tokens;
  }

  BleuReport report;
  if (m.paragraphs) {
    std::map<std::string, Paragraph> pred;
    std::map<std::string, std::vector<Paragraph>> refs;
    for (const auto& [id, tokens] : predicted) pred[id] = split_sentences(tokens);
    for (const auto& [id, rec] : by_id)
      for (const auto& c : rec->captions) refs[id].push_back(split_sentences(c));
    report = paragraph_bleu(pred, refs, opts);
  } else {
    std::vector<EvalPair> pairs;
    for (const auto& [id, rec] : by_id) {
      const auto it = predicted.find(id);
      if (it == predicted.end()) {
        throw DataError("'" + o.decoded + "' has no caption for video '" + id + "'");
      }
      pairs.push_back({it->second, rec->captions});
    }
    report = corpus_bleu(pairs, opts);
  }
  out << format_table(report);
  if (!o.out.empty()) {
    std::ofstream f(o.out);
    if (!f) throw DataError("cannot write report '" + o.out + "'");
    f << to_json(report).dump(2) << '\n';
  }
  return 0;
}

int run_attrs(const AttrsOptions& o, std::ostream& out, std::ostream& err) {
  const Manifest m = load_manifest(o.manifest);
  const auto records = select(m, o.split);
  const auto features = load_features(records);
  AttributeTrainConfig c;
  c.k = o.k;
  c.use_stoplist = !o.no_stoplist;
  c.mode = parse_pooling(o.mode);
  c.epochs = o.epochs;
  c.batch_size = o.batch_size;
  c.lr = o.lr;
  c.seed = o.seed;
  const AttributeTrainResult r = train_attributes(records, features, c);
  for (const auto& w : r.warnings) err << "warning: " << w << '\n';

  if (!o.metrics.empty()) {
    std::ofstream f(o.metrics);
    if (!f) throw DataError("cannot write metrics file '" + o.metrics + "'");
    f << "epoch,loss,subset_acc,mean_f1\n";
    for (const auto& e : r.metrics) {
      double f1 = 0.0;
      for (double x : e.f1) f1 += x;
      f << e.epoch << ',' << e.loss << ',' << e.subset_accuracy << ',' << f1 / static_cast<double>(e.f1.size()) << '\n';
    }
  }
  std::ofstream f(o.out);
  if (!f) throw DataError("cannot write attribute export '" + o.out + "'");
  f << export_attributes(r.head, records, features).dump(2) << '\n';

  const AttributeMetrics& last = r.metrics.back();
  out << "labels:";
  for (const auto& l : r.head.labels) out << ' ' << l;
  out << "\nsubset accuracy " << fixed(last.subset_accuracy, 4) << '\n';
  for (std::size_t j = 0; j < last.f1.size(); ++j) out << "  f1 " << r.head.labels[j] << ' ' << fixed(last.f1[j], 4) << '\n';
  return 0;
}

int run_gradcheck(const GradcheckOptions& o, std::ostream& out) {
  const auto entries = run_gradient_suite(o.seed);
  bool ok = true;
  double worst = 0.0;
  for (const auto& e : entries) {
    char line[160];
    std::snprintf(line, sizeof line, "%-24s max_rel_err %.3e  tol %.0e  %s\n", e.name.c_str(),
                  e.report.max_relative_error, e.tolerance, e.passed() ? "ok" : "FAILED");
    out << line;
    ok = ok && e.passed();
    worst = std::max(worst, e.report.max_relative_error);
  }
  out << "checks " << entries.size() << ", worst relative error " << worst << '\n';
  if (!ok) throw DataError("gradient check failed");
  return 0;
}

json inspect_one(const fs::path& path) {
  const auto bytes = detail::read_file_bytes(path);
  if (bytes.size() < 4) throw FormatError(FormatError::Kind::truncated, "'" + path.string() + "' is too short");
  const std::string magic(bytes.begin(), bytes.begin() + 4);
  if (magic == "VFM1") {
    const FeatureFileHeader h = read_feature_header(path);
    const FeatureMatrix m = read_feature_file(path);  // verifies the checksum
    return {{"path", path.string()}, {"kind", "features"}, {"version", h.version}, {"rows", h.rows},
            {"dim", h.dim}, {"dtype", h.dtype}, {"checksum", "ok"}, {"finite", all_finite(m.values)}};
  }
  if (magic == "VPC1") {
    const PcaModel p = read_pca_file(path);
    return {{"path", path.string()}, {"kind", "pca"}, {"input_dim", p.input_dim}, {"output_dim", p.output_dim},
            {"leading_eigenvalues", std::vector<double>(p.eigenvalues.begin(),
                                                        p.eigenvalues.begin() + std::min<std::ptrdiff_t>(5, p.eigenvalues.size()))}};
  }
  if (magic == "VCK1") {
    const Checkpoint ck = load_checkpoint(path);
    return {{"path", path.string()},
            {"kind", "checkpoint"},
            {"model", to_json(ck.model.config)},
            {"tensors", ck.model.params.size()},
            {"parameters", ck.model.params.scalar_count()},
            {"vocabulary_size", ck.metadata.contains("vocabulary") ? ck.metadata["vocabulary"].size() : 0},
            {"train", ck.metadata.value("train", json::object())}};
  }
  throw FormatError(FormatError::Kind::bad_magic, "'" + path.string() + "' has unknown magic '" + magic + "'");
}

int run_inspect(const InspectOptions& o, std::ostream& out) {
  for (const auto& p : o.paths) out << inspect_one(p).dump(2) << '\n';
  return 0;
}

}  // namespace

int run(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Video-feature captioning with Transformer and Universal Transformer models", "captionforge"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  std::string config_path;

  auto add_config = [&](CLI::App* s) {
    s->add_option("--config", config_path, "JSON config file (fallback: $" + std::string(kConfigEnv) + ")");
  };

  SynthOptions synth;
  CLI::App* s_synth = app.add_subcommand("synth", "Generate a synthetic captioned feature corpus");
  add_config(s_synth);
  s_synth->add_option("--seed", synth.seed, "Random seed (required)");
  s_synth->add_option("--out", synth.out, "Output directory")->required();
  s_synth->add_option("--classes", synth.classes, "Activity classes")->capture_default_str();
  s_synth->add_option("--videos-per-class", synth.videos_per_class, "Videos per class")->capture_default_str();
  s_synth->add_option("--templates", synth.templates, "Caption templates per class")->capture_default_str();
  s_synth->add_option("--paraphrases", synth.paraphrases, "Captions per video")->capture_default_str();
  s_synth->add_flag("--dense", synth.dense, "Paragraph captions of 3-4 sentences");
  s_synth->add_option("--rows-min", synth.rows_min, "Minimum feature rows per video")->capture_default_str();
  s_synth->add_option("--rows-max", synth.rows_max, "Maximum feature rows per video")->capture_default_str();
  s_synth->add_option("--feature-dim", synth.feature_dim, "Feature dimension")->capture_default_str();
  s_synth->add_option("--signal", synth.signal, "Signal strength in [0, 1]")->capture_default_str();
  s_synth->add_option("--val-fraction", synth.val_fraction, "Per-class fraction held out for validation")
      ->capture_default_str();

  PcaFitOptions pfit;
  CLI::App* s_pfit = app.add_subcommand("pca-fit", "Fit PCA on a manifest split");
  add_config(s_pfit);
  s_pfit->add_option("--manifest", pfit.manifest, "Manifest path")->required();
  s_pfit->add_option("--k", pfit.k, "Output dimension")->capture_default_str();
  s_pfit->add_option("--split", pfit.split, "Split to fit on (train, val, test, all)")->capture_default_str();
  s_pfit->add_option("--out", pfit.out, "PCA model file")->required();

  PcaApplyOptions papply;
  CLI::App* s_papply = app.add_subcommand("pca-apply", "Project every feature file of a manifest");
  add_config(s_papply);
  s_papply->add_option("--pca", papply.pca, "PCA model file")->required();
  s_papply->add_option("--manifest", papply.manifest, "Manifest path")->required();
  s_papply->add_option("--out", papply.out, "Output directory for the reduced corpus")->required();

  TrainOptions tr;
  CLI::App* s_train = app.add_subcommand("train", "Train a captioning model");
  add_config(s_train);
  s_train->add_option("--seed", tr.seed, "Random seed (required)");
  s_train->add_option("--manifest", tr.manifest, "Manifest path")->required();
  s_train->add_option("--out", tr.out, "Checkpoint path")->required();
  s_train->add_option("--metrics", tr.metrics, "Per-epoch metrics CSV");
  s_train->add_option("--preset", tr.preset, "msvd-vanilla, msvd-universal or activitynet-universal");
  s_train->add_option("--variant", tr.variant, "vanilla or universal")->capture_default_str();
  s_train->add_option("--layers", tr.layers, "Layers (vanilla) or shared-layer steps (universal)")
      ->capture_default_str();
  s_train->add_option("--d-model", tr.d_model, "Model width")->capture_default_str();
  s_train->add_option("--heads", tr.heads, "Attention heads")->capture_default_str();
  s_train->add_option("--d-ff", tr.d_ff, "Feed-forward width")->capture_default_str();
  s_train->add_option("--dropout", tr.dropout, "Dropout rate")->capture_default_str();
  s_train->add_option("--max-len", tr.max_len, "Caption length cap including <eos> (0: 20, paragraphs 80)")
      ->capture_default_str();
  s_train->add_flag("--encoder-positions,!--no-encoder-positions", tr.encoder_positions,
                    "Add positional encodings to encoder inputs");
  s_train->add_flag("--act", tr.act, "Adaptive halting in the universal encoder");
  s_train->add_option("--act-epsilon", tr.act_epsilon, "Halting slack")->capture_default_str();
  s_train->add_option("--act-max-steps", tr.act_max_steps, "Maximum halting steps")->capture_default_str();
  s_train->add_option("--ponder-weight", tr.ponder_weight, "Ponder cost weight")->capture_default_str();
  s_train->add_option("--batch-size", tr.batch_size, "Batch size")->capture_default_str();
  s_train->add_option("--lr", tr.lr, "Initial learning rate")->capture_default_str();
  s_train->add_option("--schedule", tr.schedule, "decay (0.98 per epoch) or cosine (with restarts)")
      ->capture_default_str();
  s_train->add_option("--warmup", tr.warmup, "Warm-up steps of the cosine schedule")->capture_default_str();
  s_train->add_option("--restart-period", tr.restart_period, "Cosine restart period in steps")->capture_default_str();
  s_train->add_option("--epochs", tr.epochs, "Epochs")->capture_default_str();
  s_train->add_option("--max-steps", tr.max_steps, "Stop after this many optimizer steps (0: no cap)")
      ->capture_default_str();
  s_train->add_option("--grad-clip", tr.grad_clip, "Global gradient norm cap")->capture_default_str();
  s_train->add_option("--divergence-threshold", tr.divergence_threshold, "Loss above which training aborts")
      ->capture_default_str();
  s_train->add_option("--min-count", tr.min_count, "Vocabulary frequency cutoff (0: 1 synthetic, else 2)")
      ->capture_default_str();

  DecodeCliOptions dec;
  CLI::App* s_decode = app.add_subcommand("decode", "Caption every video of a manifest split");
  add_config(s_decode);
  s_decode->add_option("--checkpoint", dec.checkpoint, "Checkpoint path")->required();
  s_decode->add_option("--manifest", dec.manifest, "Manifest path")->required();
  s_decode->add_option("--split", dec.split, "train, val, test or all")->capture_default_str();
  s_decode->add_option("--out", dec.out, "Output TSV")->required();
  s_decode->add_option("--beam", dec.beam, "Beam width (1: greedy)")->capture_default_str();
  s_decode->add_option("--alpha", dec.alpha, "Length normalisation exponent")->capture_default_str();
  s_decode->add_option("--threads", dec.threads, "Decoding threads")->capture_default_str();

  EvalOptions ev;
  CLI::App* s_eval = app.add_subcommand("eval", "BLEU of a decode file against manifest captions");
  add_config(s_eval);
  s_eval->add_option("--manifest", ev.manifest, "Manifest path")->required();
  s_eval->add_option("--decoded", ev.decoded, "Decode TSV")->required();
  s_eval->add_option("--split", ev.split, "train, val, test or all")->capture_default_str();
  s_eval->add_option("--out", ev.out, "JSON report path");
  s_eval->add_option("--max-n", ev.max_n, "Highest n-gram order")->capture_default_str();
  s_eval->add_flag("--smoothing", ev.smoothing, "Epsilon smoothing of zero precisions");

  AttrsOptions at;
  CLI::App* s_attrs = app.add_subcommand("attrs-train", "Train the frame-attention attribute head");
  add_config(s_attrs);
  s_attrs->add_option("--seed", at.seed, "Random seed")->capture_default_str();
  s_attrs->add_option("--manifest", at.manifest, "Manifest path")->required();
  s_attrs->add_option("--split", at.split, "train, val, test or all")->capture_default_str();
  s_attrs->add_option("--out", at.out, "Attribute export JSON")->required();
  s_attrs->add_option("--metrics", at.metrics, "Per-epoch metrics CSV");
  s_attrs->add_option("--k", at.k, "Number of attribute words")->capture_default_str();
  s_attrs->add_option("--mode", at.mode, "elementwise or scored pooling")->capture_default_str();
  s_attrs->add_option("--epochs", at.epochs, "Epochs")->capture_default_str();
  s_attrs->add_option("--batch-size", at.batch_size, "Batch size")->capture_default_str();
  s_attrs->add_option("--lr", at.lr, "Learning rate")->capture_default_str();
  s_attrs->add_flag("--no-stoplist", at.no_stoplist, "Keep function words as candidate labels");

  GradcheckOptions gc;
  CLI::App* s_grad = app.add_subcommand("gradcheck", "Finite-difference check of every op and tiny models");
  add_config(s_grad);
  s_grad->add_option("--seed", gc.seed, "Random seed")->capture_default_str();

  InspectOptions ins;
  CLI::App* s_inspect = app.add_subcommand("inspect", "Print headers of feature, PCA or checkpoint files");
  add_config(s_inspect);
  s_inspect->add_option("paths", ins.paths, "Files to inspect")->required();

  try {
    // The config is merged by placing its entries ahead of the real flags.
    std::vector<std::string> full = args;
    auto sub_it = std::find_if(args.begin(), args.end(), [&](const std::string& a) {
      for (CLI::App* s : app.get_subcommands({}))
        if (s->get_name() == a) return true;
      return false;
    });
    if (sub_it != args.end()) {
      CLI::App* sub = app.get_subcommand(*sub_it);
      std::optional<std::string> cfg;
      for (auto it = sub_it; it != args.end(); ++it) {
        if (*it == "--config" && it + 1 != args.end()) cfg = *(it + 1);
        else if (it->rfind("--config=", 0) == 0) cfg = it->substr(9);
      }
      if (!cfg) {
        if (const char* env = std::getenv(kConfigEnv); env && *env) cfg = env;
      }
      if (cfg) {
        const auto extra = config_args(*cfg, app, sub);
        full.assign(args.begin(), sub_it + 1);
        full.insert(full.end(), extra.begin(), extra.end());
        full.insert(full.end(), sub_it + 1, args.end());
      }
    }
    std::reverse(full.begin(), full.end());
    app.parse(full);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.exit_code();
  }

  try {
    if (s_synth->parsed()) return run_synth(synth, out);
    if (s_pfit->parsed()) return run_pca_fit(pfit, out);
    if (s_papply->parsed()) return run_pca_apply(papply, out);
    if (s_train->parsed()) return run_train(tr, s_train, out);
    if (s_decode->parsed()) return run_decode(dec, out);
    if (s_eval->parsed()) return run_eval(ev, out);
    if (s_attrs->parsed()) return run_attrs(at, out, err);
    if (s_grad->parsed()) return run_gradcheck(gc, out);
    if (s_inspect->parsed()) return run_inspect(ins, out);
  } catch (const DivergenceError& e) {
    err << "diverged at epoch " << e.epoch() << ", step " << e.step() << ": " << e.what() << '\n';
    return e.exit_code();
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.exit_code();
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  return 1;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(std::move(args), std::cout, std::cerr);
}

}  // namespace captionforge::cli
