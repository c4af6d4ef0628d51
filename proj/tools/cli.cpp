#include "cli.hpp"

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "neuronscope/corpus.hpp"
#include "neuronscope/datakit.hpp"
#include "neuronscope/engine.hpp"
#include "neuronscope/errors.hpp"
#include "neuronscope/grpo.hpp"
#include "neuronscope/importance.hpp"
#include "neuronscope/intervention.hpp"
#include "neuronscope/lens.hpp"
#include "neuronscope/model.hpp"
#include "neuronscope/neurons.hpp"
#include "neuronscope/parallel.hpp"
#include "neuronscope/scoring.hpp"
#include "neuronscope/selection.hpp"
#include "neuronscope/vocabulary.hpp"

#ifndef NEURONSCOPE_VERSION
#define NEURONSCOPE_VERSION "0.0.0"
#endif

namespace neuronscope::cli {

namespace {

using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

void write_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path);
  f << content;
  if (!f) throw Error("write failed for " + path);
}

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

json read_json_file(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw DataError(path + ": malformed JSON: " + e.what());
  }
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

// Everything a run records about itself.
class Manifest {
 public:
  explicit Manifest(std::vector<std::string> args)
      : args_(std::move(args)), start_(std::chrono::steady_clock::now()) {}

  void set_command(std::string c) { command_ = std::move(c); }
  void add_input(const std::string& path) {
    if (!path.empty()) inputs_[path] = file_sha256(path);
  }
  void set_seed(std::uint64_t s) { seed_ = s; }
  void add_output(const std::string& path) {
    if (!path.empty()) outputs_.push_back(path);
  }

  void capture_config(const CLI::App& sub) {
    for (const CLI::Option* opt : sub.get_options()) {
      if (opt->get_lnames().empty()) continue;
      const std::string& name = opt->get_lnames().front();
      if (name == "help") continue;
      if (opt->count() > 0) {
        const auto& r = opt->results();
        config_[name] = r.size() == 1 ? json(r.front()) : json(r);
      } else {
        config_[name] = opt->get_default_str();
      }
    }
  }

  ojson to_json() const {
    ojson j;
    j["command"] = command_;
    j["argv"] = args_;
    j["config"] = config_;
    ojson in = ojson::object();
    for (const auto& [p, d] : inputs_) in[p] = {{"sha256", d}};
    j["inputs"] = in;
    j["outputs"] = outputs_;
    j["seed"] = seed_ ? json(*seed_) : json(nullptr);
    j["version"] = NEURONSCOPE_VERSION;
    j["wall_time_seconds"] =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    return j;
  }

 private:
  std::vector<std::string> args_;
  std::string command_;
  ojson config_ = ojson::object();
  std::map<std::string, std::string> inputs_;
  std::vector<std::string> outputs_;
  std::optional<std::uint64_t> seed_;
  std::chrono::steady_clock::time_point start_;
};

// Flags > config file > defaults: config keys become --key=value arguments
// appended only when the same flag is absent from the command line.
std::vector<std::string> merge_run_config(const std::vector<std::string>& args) {
  bool model_init = false;
  for (std::size_t i = 1; i + 1 < args.size(); ++i) {
    if (args[i] == "model" && args[i + 1] == "init") model_init = true;
  }
  if (model_init) return args;
  std::string config_path;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
  }
  if (config_path.empty()) return args;
  const json cfg = read_json_file(config_path);
  if (!cfg.is_object()) throw DataError(config_path + ": run config must be a JSON object");
  auto given = [&](const std::string& flag) {
    return std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == flag || a.rfind(flag + "=", 0) == 0;
    });
  };
  auto scalar = [](const json& v) {
    return v.is_string() ? v.get<std::string>() : v.dump();
  };
  std::vector<std::string> out = args;
  for (const auto& [key, value] : cfg.items()) {
    std::string flag = "--" + key;
    std::replace(flag.begin() + 2, flag.end(), '_', '-');
    if (flag == "--config" || given(flag) || value.is_null()) continue;
    if (value.is_array()) {
      for (const auto& v : value) out.push_back(flag + "=" + scalar(v));
    } else if (value.is_boolean()) {
      out.push_back(flag + "=" + (value.get<bool>() ? "true" : "false"));
    } else {
      out.push_back(flag + "=" + scalar(value));
    }
  }
  return out;
}

std::optional<Vocabulary> load_vocab(const std::string& path, Manifest& m) {
  if (path.empty()) return std::nullopt;
  m.add_input(path);
  return Vocabulary::load(path);
}

Model load_model(const std::string& path, Manifest& m) {
  m.add_input(path);
  return load_bundle(path);
}

std::vector<TokenSequence> load_corpus(const std::string& path, const std::optional<Vocabulary>& v,
                                       bool bos, Manifest& m) {
  m.add_input(path);
  return load_token_corpus(path, v ? &*v : nullptr, bos);
}

void write_series(const std::vector<Series>& series, const std::string& out,
                  const std::string& svg, const std::string& title, const std::string& y_label,
                  std::ostream& stdout_stream, Manifest& m) {
  const std::string body =
      ends_with(out, ".json") ? series_json(series).dump(2) + "\n" : series_csv(series);
  if (out.empty()) {
    stdout_stream << body;
  } else {
    write_file(out, body);
    m.add_output(out);
  }
  if (!svg.empty()) {
    write_file(svg, line_chart_svg(series, title, y_label));
    m.add_output(svg);
  }
}

struct Common {
  int threads = 0;
  std::string manifest;
  std::string run_config;
};

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--threads", c.threads, "Worker threads (default: NEURONSCOPE_THREADS or all cores)")
      ->check(CLI::NonNegativeNumber);
  sub->add_option("--manifest", c.manifest, "Run manifest path (default: <out>.manifest.json)");
  sub->add_option("--config", c.run_config, "JSON run config; explicit flags take precedence");
}

}  // namespace

std::string file_sha256(const std::string& path) {
  const std::string data = read_file(path);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    throw Error("SHA-256 failed for " + path);
  }
  std::string hex;
  char buf[3];
  for (unsigned int i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    hex += buf;
  }
  return hex;
}

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  Manifest manifest(raw_args);
  CLI::App app{"neuronscope: language-neuron analysis for small decoder-only transformers",
               "neuronscope"};
  app.set_version_flag("--version", NEURONSCOPE_VERSION);
  app.require_subcommand(1);
  Common common;

  // model init / info
  auto* model_cmd = app.add_subcommand("model", "Create or inspect model bundles");
  model_cmd->require_subcommand(1);
  std::string init_config, init_out;
  std::uint64_t init_seed = 0;
  auto* model_init = model_cmd->add_subcommand("init", "Randomly initialise a model bundle");
  model_init->add_option("--config", init_config, "Model config JSON")->required();
  model_init->add_option("--seed", init_seed, "Initialisation seed")->capture_default_str();
  model_init->add_option("--out", init_out, "Output bundle")->required();
  model_init->add_option("--manifest", common.manifest, "Run manifest path");
  std::string info_model, info_out;
  auto* model_info = model_cmd->add_subcommand("info", "Print a bundle's configuration");
  model_info->add_option("--model", info_model, "Model bundle")->required();
  model_info->add_option("--out", info_out, "Write JSON here instead of stdout");
  model_info->add_option("--manifest", common.manifest, "Run manifest path");

  // score
  std::string sc_model, sc_corpus, sc_vocab, sc_out;
  std::vector<std::string> sc_metrics{"cas"};
  auto* score = app.add_subcommand("score", "CAS/DAS difficulty report");
  score->add_option("--model", sc_model, "Model bundle")->required();
  score->add_option("--corpus", sc_corpus, "Scoring JSONL")->required();
  score->add_option("--vocab", sc_vocab, "Vocabulary JSON (needed for text fields)");
  score->add_option("--metric", sc_metrics, "cas, das or both")
      ->delimiter(',')
      ->capture_default_str();
  score->add_option("--out", sc_out, "Report path (.csv or .json); stdout when omitted");
  add_common(score, common);

  // detect
  std::string dt_model, dt_corpus, dt_vocab, dt_language = "target", dt_out, dt_table,
                        dt_ref_corpus, dt_ref_language = "en", dt_attn = "exact";
  double dt_tf = 0.01;
  bool dt_contrast = false, dt_bos = false;
  auto* detect = app.add_subcommand("detect", "Importance scoring and language-neuron selection");
  detect->add_option("--model", dt_model, "Model bundle")->required();
  detect->add_option("--corpus", dt_corpus, "Token corpus JSONL of the target language")->required();
  detect->add_option("--vocab", dt_vocab, "Vocabulary JSON (needed for text lines)");
  detect->add_option("--language", dt_language, "Target language tag")->capture_default_str();
  detect->add_option("--top-fraction", dt_tf, "Fraction of neurons above the threshold")
      ->capture_default_str();
  detect->add_option("--attn-mode", dt_attn, "exact or first_order")->capture_default_str();
  detect->add_flag("--contrast", dt_contrast, "Drop neurons also selected for the reference language");
  detect->add_option("--reference-corpus", dt_ref_corpus, "Reference-language corpus for --contrast");
  detect->add_option("--reference-language", dt_ref_language, "Reference language tag")
      ->capture_default_str();
  detect->add_flag("--bos", dt_bos, "Prepend <bos> to text lines");
  detect->add_option("--importance-out", dt_table, "Also save the importance table");
  detect->add_option("--out", dt_out, "NeuronSet JSON")->required();
  add_common(detect, common);

  // deactivate
  std::string da_model, da_neurons, da_out, da_eval, da_vocab, da_report;
  int da_max = 100, da_lo = 0, da_hi = -1;
  bool da_early = false;
  std::uint64_t da_seed = 0;
  auto* deact = app.add_subcommand("deactivate", "Zero the parameters of a neuron set");
  deact->add_option("--model", da_model, "Model bundle")->required();
  deact->add_option("--neurons", da_neurons, "NeuronSet JSON")->required();
  deact->add_option("--max-neurons", da_max, "Cap; larger sets are subsampled with --seed")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  deact->add_option("--seed", da_seed, "Subsampling seed")->capture_default_str();
  deact->add_flag("--early", da_early, "Keep only early-layer neurons (layer < n_layers / 3)");
  deact->add_option("--layer-lo", da_lo, "First layer kept")->capture_default_str();
  deact->add_option("--layer-hi", da_hi, "One past the last layer kept (-1: all)")
      ->capture_default_str();
  deact->add_option("--eval", da_eval, "Token corpus to report NLL on before/after");
  deact->add_option("--vocab", da_vocab, "Vocabulary JSON for --eval text");
  deact->add_option("--report", da_report, "NLL report JSON (stdout when omitted)");
  deact->add_option("--out", da_out, "Output bundle")->required();
  add_common(deact, common);

  // tune
  std::string tn_model, tn_neurons, tn_data, tn_vocab, tn_out, tn_prov, tn_holdout,
      tn_opt = "adam";
  TrainConfig tn_cfg;
  bool tn_bos = false;
  auto* tune = app.add_subcommand("tune", "Train only the parameters of a neuron set");
  tune->add_option("--model", tn_model, "Model bundle")->required();
  tune->add_option("--neurons", tn_neurons, "NeuronSet JSON")->required();
  tune->add_option("--data", tn_data, "Token corpus JSONL")->required();
  tune->add_option("--holdout", tn_holdout, "Held-out corpus for early stopping");
  tune->add_option("--vocab", tn_vocab, "Vocabulary JSON for text lines");
  tune->add_flag("--bos", tn_bos, "Prepend <bos> to text lines");
  tune->add_option("--lr", tn_cfg.learning_rate, "Learning rate")->capture_default_str();
  tune->add_option("--steps", tn_cfg.steps, "Optimizer steps")->capture_default_str();
  tune->add_option("--batch-size", tn_cfg.batch_size, "Sequences per step")->capture_default_str();
  tune->add_option("--seed", tn_cfg.seed, "Shuffle seed")->capture_default_str();
  tune->add_option("--optimizer", tn_opt, "adam or sgd")->capture_default_str();
  tune->add_option("--early-stop-patience", tn_cfg.early_stop_patience, "0 disables")
      ->capture_default_str();
  tune->add_option("--eval-every", tn_cfg.eval_every, "Held-out evaluation period")
      ->capture_default_str();
  tune->add_option("--out", tn_out, "Output bundle")->required();
  tune->add_option("--provenance", tn_prov, "Provenance JSON (default: <out>.provenance.json)");
  add_common(tune, common);

  // lens
  auto* lens = app.add_subcommand("lens", "Logit lens, language ratios, hidden similarity");
  lens->require_subcommand(1);
  std::string ln_model, ln_vocab, ln_text, ln_out, ln_svg, ln_corpus, ln_corpus_b,
      ln_pooling = "mean", ln_label_a = "a", ln_label_b = "b";
  std::vector<int> ln_ids;
  int ln_layer = -1, ln_topk = 5, ln_k = 1;
  bool ln_raw = false, ln_bos = false;
  auto* lens_logit = lens->add_subcommand("logit", "Top tokens read off each layer");
  lens_logit->add_option("--model", ln_model, "Model bundle")->required();
  lens_logit->add_option("--vocab", ln_vocab, "Vocabulary JSON");
  lens_logit->add_option("--text", ln_text, "Input text (needs --vocab)");
  lens_logit->add_option("--ids", ln_ids, "Input token ids")->delimiter(',');
  lens_logit->add_option("--layer", ln_layer, "Layer 0..n_layers (-1: all)")->capture_default_str();
  lens_logit->add_option("--top-k", ln_topk, "Tokens per position")->capture_default_str();
  lens_logit->add_flag("--raw-lens", ln_raw, "Skip the final norm");
  lens_logit->add_option("--out", ln_out, "JSON output (stdout when omitted)");
  add_common(lens_logit, common);
  auto* lens_ratio = lens->add_subcommand("ratio", "Per-layer language shares of lens tokens");
  lens_ratio->add_option("--model", ln_model, "Model bundle")->required();
  lens_ratio->add_option("--vocab", ln_vocab, "Vocabulary JSON")->required();
  lens_ratio->add_option("--corpus", ln_corpus, "Token corpus JSONL")->required();
  lens_ratio->add_option("--k", ln_k, "Top-k tokens per position")->capture_default_str();
  lens_ratio->add_flag("--raw-lens", ln_raw, "Skip the final norm");
  lens_ratio->add_flag("--bos", ln_bos, "Prepend <bos> to text lines");
  lens_ratio->add_option("--out", ln_out, "CSV or .json output (stdout when omitted)");
  lens_ratio->add_option("--svg", ln_svg, "Also draw an SVG line chart");
  add_common(lens_ratio, common);
  auto* lens_sim = lens->add_subcommand("similarity", "Cosine similarity of parallel corpora");
  lens_sim->add_option("--model", ln_model, "Model bundle")->required();
  lens_sim->add_option("--vocab", ln_vocab, "Vocabulary JSON");
  lens_sim->add_option("--corpus-a", ln_corpus, "First corpus")->required();
  lens_sim->add_option("--corpus-b", ln_corpus_b, "Aligned second corpus")->required();
  lens_sim->add_option("--label-a", ln_label_a, "Name of the first corpus")->capture_default_str();
  lens_sim->add_option("--label-b", ln_label_b, "Name of the second corpus")->capture_default_str();
  lens_sim->add_option("--pooling", ln_pooling, "mean or last")->capture_default_str();
  lens_sim->add_flag("--bos", ln_bos, "Prepend <bos> to text lines");
  lens_sim->add_option("--out", ln_out, "CSV or .json output (stdout when omitted)");
  lens_sim->add_option("--svg", ln_svg, "Also draw an SVG line chart");
  add_common(lens_sim, common);

  // grpo
  std::string gr_policy, gr_reference, gr_tasks, gr_vocab, gr_out, gr_log;
  GrpoConfig gr_cfg;
  int gr_steps = 1;
  auto* grpo = app.add_subcommand("grpo", "GRPO fine-tuning with outcome and format rewards");
  grpo->add_option("--policy", gr_policy, "Starting policy bundle")->required();
  grpo->add_option("--reference", gr_reference, "Reference bundle (default: the policy)");
  grpo->add_option("--tasks", gr_tasks, "Task JSONL {prompt, gold_answer}")->required();
  grpo->add_option("--vocab", gr_vocab, "Vocabulary JSON")->required();
  grpo->add_option("--steps", gr_steps, "Training steps")->capture_default_str();
  grpo->add_option("--group-size", gr_cfg.group_size, "Responses per prompt")->capture_default_str();
  grpo->add_option("--kl-coef", gr_cfg.kl_coef, "KL penalty")->capture_default_str();
  grpo->add_option("--lr", gr_cfg.learning_rate, "Learning rate")->capture_default_str();
  grpo->add_option("--batch-size", gr_cfg.batch_size, "Prompts per step")->capture_default_str();
  grpo->add_option("--mini-batch", gr_cfg.mini_batch, "Prompts per update")->capture_default_str();
  grpo->add_option("--clip", gr_cfg.clip_ratio, "Clip ratio")->capture_default_str();
  grpo->add_option("--max-response-tokens", gr_cfg.max_response_tokens, "Sampling cap")
      ->capture_default_str();
  grpo->add_option("--temperature", gr_cfg.temperature, "Sampling temperature")
      ->capture_default_str();
  grpo->add_option("--outcome-weight", gr_cfg.outcome_weight, "Outcome reward weight")
      ->capture_default_str();
  grpo->add_option("--format-weight", gr_cfg.format_weight, "Format reward weight")
      ->capture_default_str();
  grpo->add_option("--seed", gr_cfg.seed, "Sampling seed")->capture_default_str();
  grpo->add_option("--log", gr_log, "Per-step JSONL log (default: <out>.log.jsonl)");
  grpo->add_option("--out", gr_out, "Output bundle")->required();
  add_common(grpo, common);

  // data
  auto* data = app.add_subcommand("data", "Self-correction dataset tools");
  data->require_subcommand(1);
  std::string db_input, db_out, db_failed, db_gen_config, db_trigger = "wait",
                                                          db_template = "self_correction_v1",
                                                          db_language = "en";
  bool db_stub = false;
  std::uint64_t db_seed = 0;
  int db_in_flight = 4;
  auto* data_build = data->add_subcommand("build", "Generate self-correction samples");
  data_build->add_option("--input", db_input, "JSONL {problem, incorrect_solution[, gold_answer, language]}")
      ->required();
  data_build->add_flag("--stub", db_stub, "Use the deterministic stub generator");
  data_build->add_option("--seed", db_seed, "Stub seed")->capture_default_str();
  data_build->add_option("--generator-config", db_gen_config,
                         "JSON {endpoint, api_key, timeout_seconds, max_attempts, backoff_ms}");
  data_build->add_option("--trigger", db_trigger, "Trigger word")->capture_default_str();
  data_build->add_option("--template", db_template, "Prompt template id")->capture_default_str();
  data_build->add_option("--language", db_language, "Default sample language (en, ko)")
      ->capture_default_str();
  data_build->add_option("--max-in-flight", db_in_flight, "Concurrent generator requests")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);
  data_build->add_option("--out", db_out, "Accepted samples JSONL")->required();
  data_build->add_option("--failed", db_failed, "Validation failures JSONL");
  add_common(data_build, common);
  std::string dv_input, dv_out;
  auto* data_validate = data->add_subcommand("validate", "Schema and stage validation");
  data_validate->add_option("--input", dv_input, "Samples JSONL")->required();
  data_validate->add_option("--out", dv_out, "Report JSON (stdout when omitted)");
  add_common(data_validate, common);

  std::vector<std::string> args;
  try {
    args = merge_run_config(raw_args);
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return kExitData;
  }
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, r;
    const int code = app.exit(e, o, r);
    out << o.str();
    err << r.str();
    return code == 0 ? kExitOk : kExitUsage;
  }

  CLI::App* leaf = &app;
  std::string command;
  while (!leaf->get_subcommands().empty()) {
    leaf = leaf->get_subcommands().front();
    command += (command.empty() ? "" : " ") + leaf->get_name();
  }
  manifest.set_command(command);
  manifest.capture_config(*leaf);
  const int threads = resolve_threads(common.threads);
  std::string primary_out;

  try {
    if (leaf == model_init) {
      manifest.add_input(init_config);
      const ModelConfig cfg = read_json_file(init_config).get<ModelConfig>();
      manifest.set_seed(init_seed);
      save_bundle(init_random(cfg, init_seed), init_out);
      primary_out = init_out;
    } else if (leaf == model_info) {
      const Model m = load_model(info_model, manifest);
      std::size_t count = 0;
      ojson tensors = ojson::array();
      for (const auto& [name, shape] : tensor_shapes(m.config)) {
        tensors.push_back({{"name", name}, {"shape", {shape.first, shape.second}}});
        count += static_cast<std::size_t>(shape.first) * static_cast<std::size_t>(shape.second);
      }
      ojson j;
      j["config"] = json(m.config);
      j["parameter_count"] = count;
      j["tensors"] = tensors;
      if (info_out.empty()) {
        out << j.dump(2) << "\n";
      } else {
        write_file(info_out, j.dump(2) + "\n");
        primary_out = info_out;
      }
    } else if (leaf == score) {
      const Model m = load_model(sc_model, manifest);
      const auto vocab = load_vocab(sc_vocab, manifest);
      manifest.add_input(sc_corpus);
      const auto corpus = load_scoring_corpus(sc_corpus, vocab ? &*vocab : nullptr);
      std::vector<Metric> metrics;
      for (const auto& s : sc_metrics) metrics.push_back(parse_metric(s));
      const auto report = difficulty_report(Engine(m), corpus, metrics, threads);
      const std::string body =
          ends_with(sc_out, ".json") ? report.to_json().dump(2) + "\n" : report.to_csv();
      if (sc_out.empty()) {
        out << body;
      } else {
        write_file(sc_out, body);
        primary_out = sc_out;
      }
    } else if (leaf == detect) {
      const Model m = load_model(dt_model, manifest);
      const auto vocab = load_vocab(dt_vocab, manifest);
      const Engine engine(m);
      const ImportanceOptions opts{parse_attn_mode(dt_attn), threads};
      auto table = compute_importance_table(engine, load_corpus(dt_corpus, vocab, dt_bos, manifest),
                                            dt_language, opts);
      if (!dt_table.empty()) {
        table.save(dt_table);
        manifest.add_output(dt_table);
      }
      NeuronSet set;
      if (dt_contrast) {
        if (dt_ref_corpus.empty()) throw ArgumentError("--contrast needs --reference-corpus");
        if (dt_ref_language == dt_language) {
          throw ArgumentError("reference language must differ from the target language");
        }
        std::map<std::string, ImportanceTable> tables;
        tables.emplace(dt_ref_language,
                       compute_importance_table(engine, load_corpus(dt_ref_corpus, vocab, dt_bos, manifest),
                                                dt_ref_language, opts));
        tables.emplace(dt_language, std::move(table));
        set = select_language_neurons(tables, dt_language, dt_tf, true, dt_ref_language);
      } else {
        set = select_language_neurons(table, dt_tf);
      }
      set.save(dt_out);
      primary_out = dt_out;
      err << "selected " << set.size() << " neurons for '" << dt_language << "'\n";
    } else if (leaf == deact) {
      const Model m = load_model(da_model, manifest);
      manifest.add_input(da_neurons);
      NeuronSet set = NeuronSet::load(da_neurons);
      const int hi = da_early ? early_layer_limit(m.config) : (da_hi < 0 ? m.config.n_layers : da_hi);
      set = set.restricted_to_layers(da_lo, hi);
      manifest.set_seed(da_seed);
      if (set.size() > static_cast<std::size_t>(da_max)) {
        std::mt19937_64 rng(da_seed);
        std::vector<NeuronId> picked;
        std::sample(set.neurons.begin(), set.neurons.end(), std::back_inserter(picked),
                    da_max, rng);
        set.neurons = std::move(picked);
      }
      const Model result = deactivate(m, set);
      save_bundle(result, da_out);
      primary_out = da_out;
      if (!da_eval.empty()) {
        const auto vocab = load_vocab(da_vocab, manifest);
        const auto corpus = load_corpus(da_eval, vocab, false, manifest);
        auto mean_nll = [&](const Model& model) {
          const Engine e(model);
          double total = 0.0;
          std::size_t tokens = 0;
          for (const auto& s : corpus) {
            total += sequence_nll(e, s);
            tokens += s.size() - 1;
          }
          return total / static_cast<double>(tokens);
        };
        ojson rep;
        rep["neurons"] = set.size();
        rep["nll_before"] = mean_nll(m);
        rep["nll_after"] = mean_nll(result);
        if (da_report.empty()) {
          out << rep.dump(2) << "\n";
        } else {
          write_file(da_report, rep.dump(2) + "\n");
          manifest.add_output(da_report);
        }
      }
      err << "deactivated " << set.size() << " neurons\n";
    } else if (leaf == tune) {
      const Model m = load_model(tn_model, manifest);
      manifest.add_input(tn_neurons);
      const NeuronSet set = NeuronSet::load(tn_neurons);
      const auto vocab = load_vocab(tn_vocab, manifest);
      const auto dataset = load_corpus(tn_data, vocab, tn_bos, manifest);
      std::optional<std::vector<TokenSequence>> holdout;
      if (!tn_holdout.empty()) holdout = load_corpus(tn_holdout, vocab, tn_bos, manifest);
      if (tn_opt == "adam") {
        tn_cfg.optimizer = OptimizerKind::adam;
      } else if (tn_opt == "sgd") {
        tn_cfg.optimizer = OptimizerKind::sgd;
      } else {
        throw ArgumentError("unknown optimizer '" + tn_opt + "'");
      }
      tn_cfg.validate();
      manifest.set_seed(tn_cfg.seed);
      const TrainResult result = train_masked(m, InterventionMask(m.config, set), dataset, tn_cfg,
                                              holdout ? &*holdout : nullptr, threads);
      save_bundle(result.model, tn_out);
      primary_out = tn_out;
      const std::string prov = tn_prov.empty() ? tn_out + ".provenance.json" : tn_prov;
      write_file(prov, provenance_json(set, tn_cfg, result).dump(2) + "\n");
      manifest.add_output(prov);
      err << "tuned " << set.size() << " neurons for " << result.steps_run << " steps\n";
    } else if (leaf == lens_logit) {
      const Model m = load_model(ln_model, manifest);
      const auto vocab = load_vocab(ln_vocab, manifest);
      TokenSequence tokens;
      if (!ln_text.empty()) {
        if (!vocab) throw ArgumentError("--text needs --vocab");
        tokens = vocab->encode(ln_text, true);
      } else if (!ln_ids.empty()) {
        tokens.ids = ln_ids;
      } else {
        throw ArgumentError("give --text or --ids");
      }
      const Engine engine(m);
      std::vector<int> layers;
      if (ln_layer >= 0) {
        layers.push_back(ln_layer);
      } else {
        for (int l = 0; l <= m.config.n_layers; ++l) layers.push_back(l);
      }
      ojson readings = ojson::array();
      for (int layer : layers) {
        for (const auto& r : logit_lens(engine, tokens, layer, vocab ? &*vocab : nullptr, ln_topk, ln_raw)) {
          ojson top = ojson::array();
          for (const auto& t : r.top) top.push_back({{"id", t.id}, {"token", t.token}, {"prob", t.prob}});
          readings.push_back({{"layer", r.layer},
                              {"position", r.position},
                              {"top", top},
                              {"languages",
                               {{"korean", r.tally.korean},
                                {"english", r.tally.english},
                                {"other", r.tally.other}}}});
        }
      }
      if (ln_out.empty()) {
        out << readings.dump(2) << "\n";
      } else {
        write_file(ln_out, readings.dump(2) + "\n");
        primary_out = ln_out;
      }
    } else if (leaf == lens_ratio) {
      const Model m = load_model(ln_model, manifest);
      const auto vocab = load_vocab(ln_vocab, manifest);
      const auto corpus = load_corpus(ln_corpus, vocab, ln_bos, manifest);
      const auto ratios = language_ratio(Engine(m), *vocab, corpus, ln_k, ln_raw);
      write_series(to_series(ratios), ln_out, ln_svg, "Language ratio of lens tokens", "share",
                   out, manifest);
      primary_out = ln_out;
    } else if (leaf == lens_sim) {
      const Model m = load_model(ln_model, manifest);
      const auto vocab = load_vocab(ln_vocab, manifest);
      Pooling pooling;
      if (ln_pooling == "mean") {
        pooling = Pooling::mean;
      } else if (ln_pooling == "last") {
        pooling = Pooling::last;
      } else {
        throw ArgumentError("unknown pooling '" + ln_pooling + "'");
      }
      auto curve = hidden_similarity(Engine(m), load_corpus(ln_corpus, vocab, ln_bos, manifest),
                                     load_corpus(ln_corpus_b, vocab, ln_bos, manifest), pooling);
      curve.label_a = ln_label_a;
      curve.label_b = ln_label_b;
      write_series(to_series(curve), ln_out, ln_svg, "Hidden-state cosine similarity", "cosine",
                   out, manifest);
      primary_out = ln_out;
    } else if (leaf == grpo) {
      const Model policy = load_model(gr_policy, manifest);
      const Model reference = gr_reference.empty() ? policy : load_model(gr_reference, manifest);
      const auto vocab = load_vocab(gr_vocab, manifest);
      manifest.add_input(gr_tasks);
      const auto tasks = load_tasks(gr_tasks, &*vocab);
      if (tasks.empty()) throw DataError(gr_tasks + " holds no tasks");
      if (gr_steps < 1) throw ArgumentError("--steps must be >= 1");
      gr_cfg.validate();
      manifest.set_seed(gr_cfg.seed);
      GrpoTrainer trainer(policy, reference, gr_cfg, text_reward(*vocab), threads);
      const std::string log_path = gr_log.empty() ? gr_out + ".log.jsonl" : gr_log;
      std::ofstream log(log_path);
      if (!log) throw Error("cannot write " + log_path);
      std::size_t cursor = 0;
      for (int s = 0; s < gr_steps; ++s) {
        std::vector<Task> batch;
        for (int b = 0; b < gr_cfg.batch_size; ++b) batch.push_back(tasks[cursor++ % tasks.size()]);
        log << trainer.step(batch).to_json().dump() << "\n";
      }
      manifest.add_output(log_path);
      save_bundle(trainer.policy(), gr_out);
      primary_out = gr_out;
    } else if (leaf == data_build) {
      manifest.add_input(db_input);
      std::vector<BuildInput> inputs;
      for_each_jsonl(db_input, [&](const json& obj, std::size_t line) {
        BuildInput in;
        for (const char* f : {"problem", "incorrect_solution"}) {
          if (!obj.contains(f) || !obj[f].is_string()) {
            throw DataError(std::string("missing string field '") + f + "'", line, f);
          }
        }
        in.problem = obj["problem"];
        in.incorrect_solution = obj["incorrect_solution"];
        if (obj.contains("gold_answer")) {
          in.gold_answer = obj["gold_answer"].is_string() ? obj["gold_answer"].get<std::string>()
                                                          : obj["gold_answer"].dump();
        }
        if (obj.contains("language") && obj["language"].is_string()) {
          in.language = obj["language"].get<std::string>();
        }
        inputs.push_back(std::move(in));
      });
      std::unique_ptr<GeneratorClient> client;
      if (db_stub) {
        client = std::make_unique<StubGenerator>(db_seed);
        manifest.set_seed(db_seed);
      } else {
        HttpGeneratorConfig gc;
        if (!db_gen_config.empty()) {
          manifest.add_input(db_gen_config);
          gc = HttpGeneratorConfig::from_json(read_json_file(db_gen_config));
        } else {
          gc.apply_environment();
        }
        if (gc.endpoint.empty()) {
          throw ArgumentError("no generator: pass --stub, --generator-config or set GENERATOR_ENDPOINT");
        }
        client = std::make_unique<HttpGeneratorClient>(gc);
      }
      BuildOptions opts;
      opts.trigger = db_trigger;
      opts.template_id = db_template;
      opts.language = db_language;
      prompt_template(opts.template_id);
      const auto results = build_samples(inputs, *client, opts, db_in_flight);
      std::vector<SelfCorrectionSample> accepted;
      std::string failed;
      for (std::size_t i = 0; i < results.size(); ++i) {
        if (!results[i].trigger_recognized && i == 0) {
          err << "warning: trigger '" << db_trigger << "' is not in the trigger lexicon\n";
        }
        if (results[i].status == BuildStatus::ok) {
          accepted.push_back(results[i].sample);
        } else {
          json j = to_json(results[i].sample);
          j["input_line"] = i + 1;
          j["error"] = results[i].message;
          failed += j.dump() + "\n";
        }
      }
      export_jsonl(accepted, db_out);
      primary_out = db_out;
      if (!db_failed.empty()) {
        write_file(db_failed, failed);
        manifest.add_output(db_failed);
      }
      err << accepted.size() << " accepted, " << results.size() - accepted.size()
          << " failed validation\n";
    } else if (leaf == data_validate) {
      manifest.add_input(dv_input);
      const auto samples = ingest_jsonl(dv_input);
      ojson reports = ojson::array();
      std::size_t clean = 0;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        const StageReport r = validate_code_switch_stages(samples[i]);
        if (r.ok()) ++clean;
        ojson j = r.to_json();
        j["line"] = i + 1;
        reports.push_back(std::move(j));
      }
      ojson summary;
      summary["samples"] = samples.size();
      summary["stage_ok"] = clean;
      summary["reports"] = reports;
      if (dv_out.empty()) {
        out << summary.dump(2) << "\n";
      } else {
        write_file(dv_out, summary.dump(2) + "\n");
        primary_out = dv_out;
      }
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ArgumentError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const BundleError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const LengthError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }

  manifest.add_output(primary_out);
  const ojson mj = manifest.to_json();
  const std::string manifest_path =
      !common.manifest.empty() ? common.manifest
                               : (primary_out.empty() ? std::string() : primary_out + ".manifest.json");
  try {
    if (manifest_path.empty()) {
      err << mj.dump() << "\n";
    } else {
      write_file(manifest_path, mj.dump(2) + "\n");
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}

}  // namespace neuronscope::cli
