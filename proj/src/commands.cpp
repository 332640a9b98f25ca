#include "attnlab/commands.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "attnlab/verification.hpp"

namespace attnlab {

namespace {

constexpr std::uint64_t kStreamCorpusSeed = 0x636f7270;
constexpr std::uint64_t kStreamModelSeed = 0x6d6f646c;

std::string with_thousands(std::int64_t value) {
  std::string digits = std::to_string(value);
  std::string out;
  int count = 0;
  for (auto it = digits.rbegin(); it != digits.rend(); ++it) {
    if (count != 0 && count % 3 == 0) out.push_back(',');
    out.push_back(*it);
    ++count;
  }
  return {out.rbegin(), out.rend()};
}

nlohmann::json model_config_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size},
          {"max_positions", c.max_positions},
          {"type_vocab_size", c.type_vocab_size},
          {"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"hidden", c.hidden},
          {"intermediate", c.intermediate},
          {"operator", to_string(c.operator_kind)},
          {"ln_eps", c.ln_eps},
          {"dropout", c.dropout},
          {"tie_mlm_decoder", c.tie_mlm_decoder}};
}

nlohmann::json manifest_base(const std::string& command, std::uint64_t seed) {
  return {{"tool", kToolName}, {"version", kToolVersion}, {"command", command}, {"seed", seed}};
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string digest_hex(std::uint64_t digest) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(digest));
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// params
// ---------------------------------------------------------------------------

int cmd_params(const ParamsOptions& options, std::ostream& out) {
  std::vector<OperatorKind> kinds;
  if (options.op == "all") {
    kinds = {OperatorKind::Original, OperatorKind::Symmetric, OperatorKind::Pairwise};
  } else if (auto kind = operator_kind_from_string(options.op)) {
    kinds = {*kind};
  } else {
    out << "params: unknown operator '" << options.op << "'\n";
    return kExitUsage;
  }

  struct Row {
    std::string config_name;
    OperatorKind kind;
    std::int64_t count;
    std::string saved;
  };
  auto rows_for = [&](const std::string& name, const ModelConfig& base) {
    std::vector<Row> rows;
    ModelConfig original = base;
    original.operator_kind = OperatorKind::Original;
    const std::int64_t original_count = count_params(original);
    for (OperatorKind kind : kinds) {
      ModelConfig cfg = base;
      cfg.operator_kind = kind;
      const std::int64_t count = count_params(cfg);
      Row row{name, kind, count, "-"};
      if (kind != OperatorKind::Original) row.saved = savings_percent(count, original_count) + "%";
      rows.push_back(std::move(row));
    }
    return rows;
  };

  std::vector<Row> rows;
  if (options.selector == "small") {
    rows = rows_for("bert-small", ModelConfig::bert_small(OperatorKind::Original));
  } else if (options.selector == "base") {
    rows = rows_for("bert-base", ModelConfig::bert_base(OperatorKind::Original));
  } else if (options.selector == "custom") {
    rows = rows_for("custom", options.custom);
  } else {
    out << "params: unknown config selector '" << options.selector << "'\n";
    return kExitUsage;
  }

  std::ostringstream table;
  table << "config      operator   parameters     saved\n";
  for (const Row& row : rows) {
    char line[128];
    std::snprintf(line, sizeof(line), "%-11s %-10s %14s %8s\n", row.config_name.c_str(),
                  to_string(row.kind), with_thousands(row.count).c_str(), row.saved.c_str());
    table << line;
  }
  out << table.str();

  if (!options.csv_path.empty()) {
    nlohmann::json manifest = manifest_base("params", 0);
    manifest["selector"] = options.selector;
    manifest["operator"] = options.op;
    std::ostringstream csv;
    csv << "# manifest=" << manifest.dump() << "\n";
    csv << "config,operator,parameters,saved\n";
    for (const Row& row : rows) {
      csv << row.config_name << "," << to_string(row.kind) << "," << row.count << ","
          << (row.saved == "-" ? "" : row.saved) << "\n";
    }
    write_text_file(options.csv_path, csv.str());
    out << "wrote " << options.csv_path.string() << "\n";
  }

  if (options.check) {
    bool ok = true;
    for (const CheckResult& r : verify_counts(0, 0)) {
      if (r.name.rfind("count ", 0) == 0) {
        out << r.name << ": " << (r.pass ? "PASS" : ("FAIL (" + r.detail + ")")) << "\n";
        ok &= r.pass;
      }
    }
    if (!ok) return kExitFailure;
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// verify
// ---------------------------------------------------------------------------

int cmd_verify(const VerifyOptions& options, std::ostream& out) {
  std::vector<std::pair<std::string, std::vector<CheckResult>>> suites;
  const bool all = options.suite == "all";
  if (all || options.suite == "algebra") {
    suites.emplace_back("algebra", verify_algebra(options.seed, options.trials));
  }
  if (all || options.suite == "gradients") {
    suites.emplace_back("gradients", verify_gradients(options.seed));
  }
  if (all || options.suite == "counts") {
    suites.emplace_back("counts", verify_counts(options.seed, options.random_configs));
  }
  if (suites.empty()) {
    out << "verify: unknown suite '" << options.suite << "'\n";
    return kExitUsage;
  }

  bool ok = true;
  for (const auto& [name, results] : suites) {
    out << "suite " << name << "\n";
    for (const CheckResult& r : results) {
      char line[256];
      std::snprintf(line, sizeof(line), "  %-44s max err %.3e (bound %.0e) %s\n", r.name.c_str(),
                    r.worst, r.bound, r.pass ? "PASS" : "FAIL");
      out << line;
      if (!r.detail.empty()) out << "      " << r.detail << "\n";
      ok &= r.pass;
    }
  }
  out << (ok ? "verification passed" : "verification FAILED") << "\n";
  return ok ? kExitOk : kExitFailure;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

int cmd_train(const TrainOptions& options, std::ostream& out) {
  TrainOptions opts = options;
  if (opts.out_dir.empty()) {
    out << "train: --out directory is required\n";
    return kExitUsage;
  }
  std::error_code ec;
  std::filesystem::create_directories(opts.out_dir, ec);
  if (ec) {
    out << "train: cannot create output directory " << opts.out_dir.string() << ": "
        << ec.message() << "\n";
    return kExitUsage;
  }

  // single-seed contract: every stream derives from train.seed
  opts.corpus.seed = mix_seed(opts.train.seed, kStreamCorpusSeed);
  opts.corpus.vocab_size = opts.model.vocab_size;
  if (opts.corpus.seq_len > opts.model.max_positions) {
    out << "train: corpus seq_len " << opts.corpus.seq_len << " exceeds model max_positions "
        << opts.model.max_positions << "\n";
    return kExitUsage;
  }
  const int eval_need = opts.train.eval_batches * opts.train.batch_size;
  if (opts.corpus_sequences <= 0) opts.corpus_sequences = 4096 + eval_need;

  out << "operator " << to_string(opts.model.operator_kind) << ", "
      << with_thousands(count_params(opts.model)) << " parameters, " << opts.train.steps
      << " steps\n";
  const Corpus corpus = generate_corpus(opts.corpus, opts.corpus_sequences);
  const double floor = theoretical_floor(opts.corpus);
  out << "corpus: " << corpus.n_sequences << " sequences of " << opts.corpus.seq_len
      << " tokens, conditional-entropy floor " << std::setprecision(4) << floor << " nats\n";

  EncoderModel model = build_model(opts.model, mix_seed(opts.train.seed, kStreamModelSeed));
  RunTrace trace = train(model, corpus, opts.train);

  const auto trace_path = opts.out_dir / "trace.csv";
  const auto ckpt_path = opts.out_dir / "checkpoint.bin";
  const auto manifest_path = opts.out_dir / "manifest.json";
  write_text_file(trace_path, trace_to_csv(trace));
  save_checkpoint(ckpt_path, model);

  nlohmann::json manifest = manifest_base("train", opts.train.seed);
  manifest["operator"] = to_string(opts.model.operator_kind);
  manifest["model"] = model_config_json(opts.model);
  manifest["corpus"] = {{"vocab_size", opts.corpus.vocab_size},
                        {"seq_len", opts.corpus.seq_len},
                        {"markov_order", opts.corpus.markov_order},
                        {"transition_temperature", opts.corpus.transition_temperature},
                        {"seed", opts.corpus.seed},
                        {"sequences", opts.corpus_sequences},
                        {"theoretical_floor_nats", floor}};
  manifest["train"] = {{"steps", opts.train.steps},
                       {"batch_size", opts.train.batch_size},
                       {"peak_lr", opts.train.peak_lr},
                       {"warmup_steps", opts.train.warmup_steps},
                       {"beta1", opts.train.beta1},
                       {"beta2", opts.train.beta2},
                       {"adam_eps", opts.train.adam_eps},
                       {"weight_decay", opts.train.weight_decay},
                       {"mask_prob", opts.train.mask_prob},
                       {"mask_token_only", opts.train.mask_token_only},
                       {"eval_every", opts.train.eval_every},
                       {"eval_batches", opts.train.eval_batches},
                       {"lr_schedule", "linear warmup to peak, linear decay to zero"}};
  manifest["outputs"] = {{"trace", "trace.csv"}, {"checkpoint", "checkpoint.bin"}};
  manifest["batch_digest"] = digest_hex(trace.batch_digest);
  manifest["initial_eval_loss"] = trace.records.front().eval_loss;
  manifest["final_eval_loss"] = trace.records.back().eval_loss;
  manifest["wall_clock_sec"] = trace.wall_clock_sec;
  if (opts.save_corpus) {
    corpus.save(opts.out_dir / "corpus.bin");
    manifest["outputs"]["corpus"] = "corpus.bin";
  }
  write_text_file(manifest_path, manifest.dump(2) + "\n");

  char summary[160];
  std::snprintf(summary, sizeof(summary),
                "eval loss %.4f -> %.4f over %d steps (%.1fs), batch digest %s\n",
                trace.records.front().eval_loss, trace.records.back().eval_loss,
                opts.train.steps, trace.wall_clock_sec, digest_hex(trace.batch_digest).c_str());
  out << summary;
  out << "wrote " << trace_path.string() << ", " << ckpt_path.string() << ", "
      << manifest_path.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// compare
// ---------------------------------------------------------------------------

namespace {

std::string schedule_fingerprint(const RunTrace& t) {
  // everything that must match for a fair comparison; the operator may differ
  std::ostringstream s;
  const ModelConfig& m = t.model_config;
  s << m.vocab_size << "|" << m.max_positions << "|" << m.type_vocab_size << "|" << m.n_layers
    << "|" << m.n_heads << "|" << m.hidden << "|" << m.intermediate << "|" << m.ln_eps << "|"
    << m.dropout << "|" << m.tie_mlm_decoder;
  const CorpusSpec& c = t.corpus_spec;
  s << "#" << c.vocab_size << "|" << c.seq_len << "|" << c.markov_order << "|"
    << c.transition_temperature << "|" << c.seed << "|" << t.corpus_sequences;
  const TrainConfig& tc = t.train_config;
  s << "#" << tc.steps << "|" << tc.batch_size << "|" << tc.peak_lr << "|" << tc.warmup_steps
    << "|" << tc.beta1 << "|" << tc.beta2 << "|" << tc.adam_eps << "|" << tc.weight_decay << "|"
    << tc.mask_prob << "|" << tc.mask_token_only << "|" << tc.eval_every << "|" << tc.eval_batches << "|" << tc.seed;
  return s.str();
}

}  // namespace

int cmd_compare(const CompareOptions& options, std::ostream& out) {
  if (options.traces.size() < 2) {
    out << "compare: need at least two trace files\n";
    return kExitUsage;
  }
  std::vector<RunTrace> traces;
  for (const auto& path : options.traces) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
      out << "compare: cannot open " << path.string() << "\n";
      return kExitUsage;
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    try {
      traces.push_back(trace_from_csv(buffer.str()));
    } catch (const std::exception& e) {
      out << "compare: " << path.string() << ": " << e.what() << "\n";
      return kExitUsage;
    }
  }

  const std::string fingerprint = schedule_fingerprint(traces.front());
  for (std::size_t i = 1; i < traces.size(); ++i) {
    if (schedule_fingerprint(traces[i]) != fingerprint) {
      out << "compare: refusing " << options.traces[i].string()
          << ": its seed or schedule differs from " << options.traces.front().string()
          << "; runs are only comparable under identical data and schedule\n";
      return kExitUsage;
    }
    if (traces[i].batch_digest != traces.front().batch_digest) {
      out << "compare: refusing " << options.traces[i].string()
          << ": batch digest mismatch, the runs did not consume the same data stream\n";
      return kExitUsage;
    }
  }

  std::ostringstream report;
  report << "operator,initial_eval_loss,final_eval_loss,steps_to_95pct,plateau_exit_step\n";
  out << "operator    initial    final      steps-to-95%   plateau-exit\n";
  for (const RunTrace& trace : traces) {
    const auto to95 = steps_to_fraction(trace, 0.95);
    const auto exit_step = plateau_exit_step(trace);
    const std::string to95_s = to95 ? std::to_string(*to95) : "none";
    const std::string exit_s = exit_step ? std::to_string(*exit_step) : "none";
    char line[160];
    std::snprintf(line, sizeof(line), "%-11s %-10.4f %-10.4f %-14s %s\n",
                  to_string(trace.model_config.operator_kind), trace.records.front().eval_loss,
                  trace.records.back().eval_loss, to95_s.c_str(), exit_s.c_str());
    out << line;
    char row[160];
    std::snprintf(row, sizeof(row), "%s,%.10g,%.10g,%s,%s\n",
                  to_string(trace.model_config.operator_kind), trace.records.front().eval_loss,
                  trace.records.back().eval_loss, to95_s.c_str(), exit_s.c_str());
    report << row;
  }

  if (!options.out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(options.out_dir, ec);
    if (ec) {
      out << "compare: cannot create output directory " << options.out_dir.string() << "\n";
      return kExitUsage;
    }
    nlohmann::json manifest = manifest_base("compare", traces.front().train_config.seed);
    manifest["inputs"] = nlohmann::json::array();
    for (const auto& p : options.traces) manifest["inputs"].push_back(p.string());
    manifest["outputs"] = {{"report", "report.csv"}, {"combined", "combined.csv"}};

    std::ostringstream combined;
    combined << "operator,step,train_loss,eval_loss,lr\n";
    for (const RunTrace& trace : traces) {
      for (const TraceRecord& rec : trace.records) {
        char row[160];
        std::snprintf(row, sizeof(row), "%s,%d,%.10g,%.10g,%.10g\n",
                      to_string(trace.model_config.operator_kind), rec.step, rec.train_loss,
                      rec.eval_loss, rec.lr);
        combined << row;
      }
    }
    write_text_file(options.out_dir / "report.csv",
                    "# manifest=" + manifest.dump() + "\n" + report.str());
    write_text_file(options.out_dir / "combined.csv",
                    "# manifest=" + manifest.dump() + "\n" + combined.str());
    write_text_file(options.out_dir / "manifest.json", manifest.dump(2) + "\n");
    out << "wrote " << (options.out_dir / "report.csv").string() << " and combined.csv\n";
  }
  return kExitOk;
}

}  // namespace attnlab
