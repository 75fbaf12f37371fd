#include "kbvqa/cli.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "kbvqa/config.hpp"
#include "kbvqa/evaluation.hpp"
#include "kbvqa/llm_pipeline.hpp"
#include "kbvqa/reasoner.hpp"
#include "kbvqa/retriever.hpp"

namespace kbvqa {

namespace {

namespace fs = std::filesystem;

fs::path require(const fs::path& p) {
  if (!fs::exists(p)) throw MissingArtifact(p);
  return p;
}

std::string label_for(SourceMode kb, SourceMode sg) {
  std::string out;
  if (kb != SourceMode::None) out += "kb_" + std::string(mode_name(kb));
  if (sg != SourceMode::None) out += (out.empty() ? "" : "+") + std::string("sg_") + std::string(mode_name(sg));
  return out.empty() ? "none" : out;
}

const char* stem(Source s) { return s == Source::KB ? "retriever_kb" : "retriever_sg"; }

// Everything a command may need, loaded lazily from the content-addressed directories.
class Session {
 public:
  explicit Session(RunConfig cfg) : cfg_(std::move(cfg)), base_(cfg_.d_base, 0) {}

  const RunConfig& cfg() const { return cfg_; }
  const BaseEmbedder& base() const { return base_; }

  void load_data() {
    if (loaded_) return;
    auto dir = cfg_.data_path();
    kb_ = KnowledgeGraph::load_jsonl(require(dir / "kb.jsonl"), Source::KB);
    scenes_ = load_scene_graphs(require(dir / "scenes.jsonl"));
    train_ = load_qa_jsonl(require(dir / "train.jsonl"));
    val_ = load_qa_jsonl(require(dir / "val.jsonl"));
    test_ = load_qa_jsonl(require(dir / "test.jsonl"));
    vocab_ = AnswerVocab::build(train_);
    loaded_ = true;
  }

  const std::vector<QARecord>& train() const { return train_; }
  const std::vector<QARecord>& split(const std::string& name) const {
    if (name == "train") return train_;
    if (name == "val") return val_;
    if (name == "test") return test_;
    throw UsageError("unknown split '" + name + "' (train|val|test)");
  }
  const AnswerVocab& vocab() const { return vocab_; }

  const QARecord& record(const std::string& id) const {
    for (const auto* set : {&test_, &val_, &train_})
      for (const auto& r : *set)
        if (r.id == id) return r;
    throw UsageError("no record with id " + id);
  }

  const TripletCorpus& corpus(Source s) {
    load_data();
    auto& c = corpus_[s == Source::KB ? 0 : 1];
    if (!c)
      c = std::make_unique<TripletCorpus>(s == Source::KB ? TripletCorpus::from_kb(kb_, scenes_, cfg_.kb_hops)
                                                          : TripletCorpus::from_scenes(scenes_));
    return *c;
  }

  bool has_retriever(Source s) const {
    auto dir = cfg_.retriever_path();
    return fs::exists(dir / (std::string(stem(s)) + "_question_head.json")) &&
           fs::exists(dir / (std::string(stem(s)) + "_triplet_head.json"));
  }

  const DualEncoder& encoder(Source s) {
    std::size_t i = s == Source::KB ? 0 : 1;
    if (!encoder_[i]) {
      auto dir = cfg_.retriever_path();
      require(dir / (std::string(stem(s)) + "_question_head.json"));
      require(dir / (std::string(stem(s)) + "_triplet_head.json"));
      encoder_[i] = DualEncoder::load(dir, stem(s), base_);
    }
    return *encoder_[i];
  }

  const RetrievalIndex& index(Source s) {
    std::size_t i = s == Source::KB ? 0 : 1;
    if (!index_[i]) index_[i] = std::make_unique<RetrievalIndex>(corpus(s), encoder(s));
    return *index_[i];
  }

  // Builder for the given modes; retrievers are attached only where a mode needs them.
  InputBuilder& builder(SourceMode kb, SourceMode sg, std::size_t top_k) {
    load_data();
    auto key = std::to_string(top_k);
    auto it = builders_.find(key);
    if (it == builders_.end())
      it = builders_.emplace(key, std::make_unique<InputBuilder>(reasoner_features(cfg_.dim), kb, sg, top_k)).first;
    InputBuilder& b = *it->second;
    for (auto [src, m] : {std::pair{Source::KB, kb}, std::pair{Source::SG, sg}}) {
      if (m == SourceMode::Ret && !attached_[key][src == Source::KB ? 0 : 1]) {
        b.attach(src, {&corpus(src), &encoder(src), &index(src)});
        attached_[key][src == Source::KB ? 0 : 1] = true;
      }
    }
    b.set_modes(kb, sg);
    return b;
  }

  fs::path reasoner_file(const std::string& label) const {
    return cfg_.reasoner_path() / ("reasoner_" + label + ".json");
  }

 private:
  RunConfig cfg_;
  BaseEmbedder base_;
  bool loaded_ = false;
  KnowledgeGraph kb_{Source::KB};
  std::vector<SceneGraph> scenes_;
  std::vector<QARecord> train_, val_, test_;
  AnswerVocab vocab_;
  std::unique_ptr<TripletCorpus> corpus_[2];
  std::optional<DualEncoder> encoder_[2];
  std::unique_ptr<RetrievalIndex> index_[2];
  std::map<std::string, std::unique_ptr<InputBuilder>> builders_;
  std::map<std::string, std::array<bool, 2>> attached_;
};

void write_curve(const fs::path& path, const std::vector<double>& curve) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "epoch,loss\n" << std::setprecision(10);
  for (std::size_t i = 0; i < curve.size(); ++i) out << i + 1 << "," << curve[i] << "\n";
}

Source parse_source(const std::string& s) { return s == "kb" ? Source::KB : Source::SG; }

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Predictions of the LLM branch for one knowledge configuration.
class LlmRunner {
 public:
  LlmRunner(Session& s, const std::vector<QARecord>& records, Branch branch, std::ostream& err)
      : session_(s), records_(records), branch_(branch), err_(err), selector_(s.train(), s.base()) {
    for (const auto& r : records_) shots_.push_back(selector_.select(r, s.cfg().n_shots));
    endpoint_ = s.cfg().endpoint;
    if (s.cfg().transcript) {
      fs::create_directories(s.cfg().report_path());
      endpoint_.transcript = s.cfg().report_path() / "transcript.jsonl";
    }
  }

  std::string prompt(std::size_t i, SourceMode kb, SourceMode sg) {
    auto& b = session_.builder(kb, sg, session_.cfg().retriever_k);
    std::vector<QARecord> shots;
    for (auto j : shots_[i]) shots.push_back(session_.train()[j]);
    return render_prompt(shots, records_[i], b).rendered;
  }

  std::vector<Prediction> run(SourceMode kb, SourceMode sg) {
    std::vector<Prediction> out;
    for (std::size_t i = 0; i < records_.size(); ++i) {
      std::string p = prompt(i, kb, sg);
      std::string completion =
          branch_ == Branch::LlmMock ? mock_llm(p, answer_key(records_[i])) : llm_complete(p, endpoint_);
      out.push_back({records_[i].id, parse_answer(completion)});
      if (branch_ == Branch::LlmLive && (i + 1) % 50 == 0) err_ << "  " << i + 1 << "/" << records_.size() << "\n";
    }
    return out;
  }

 private:
  Session& session_;
  const std::vector<QARecord>& records_;
  Branch branch_;
  std::ostream& err_;
  ShotSelector selector_;
  std::vector<std::vector<std::size_t>> shots_;
  LlmEndpoint endpoint_;
};

std::vector<Prediction> reasoner_predictions(Session& s, const std::vector<QARecord>& records, SourceMode kb,
                                             SourceMode sg, const ReasonerParams& params) {
  auto& b = s.builder(kb, sg, s.cfg().reasoner.top_k);
  std::vector<Prediction> out;
  for (const auto& r : records) out.push_back({r.id, predict(r, b, params, s.vocab())});
  return out;
}

void write_report(const EvalReport& rep, const fs::path& dir, const std::string& name) {
  fs::create_directories(dir);
  emit_qtype(rep, dir / (name + "_qtype.csv"), ReportFormat::Csv);
  emit_qtype(rep, dir / (name + "_qtype.md"), ReportFormat::Markdown);
  emit_split(rep, dir / (name + "_split.csv"), ReportFormat::Csv);
  emit_split(rep, dir / (name + "_split.md"), ReportFormat::Markdown);
}

std::string pct(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << 100.0 * v;
  return os.str();
}

SourceMode flag_mode(const std::string& mode, const std::string& on) {
  return on == "on" ? parse_mode(mode) : SourceMode::None;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Knowledge-based VQA laboratory: synthetic data, retrieval, reasoning and prompting"};
  app.require_subcommand(1);
  app.fallthrough();
  app.get_formatter()->column_width(44);

  std::string config_file;
  std::vector<std::string> sets;
  app.add_option("--config", config_file, "key = value config file with [section] headers")->check(CLI::ExistingFile);
  app.add_option("--set", sets, "override, e.g. --set reasoner.epochs=10 (repeatable)");

  const RunConfig defaults;
  std::map<std::string, std::string> key_values;
  for (const auto& k : config_keys()) {
    app.add_option("--" + k.name, key_values[k.name], k.help)
        ->default_str(defaults.get(k.name))
        ->group("Config keys (also settable in the config file)");
  }

  auto* gen = app.add_subcommand("gen-data", "generate the world, questions and splits");

  std::string source = "kb";
  auto* train_ret = app.add_subcommand("train-retriever", "train the question/triplet projection heads");
  train_ret->add_option("--source", source, "kb|sg")->check(CLI::IsMember({"kb", "sg"}))->required();

  std::string ks_text;
  std::string eval_split = "test";
  auto* eval_ret = app.add_subcommand("eval-retriever", "hit@k of the trained retriever and the base-cosine baseline");
  eval_ret->add_option("--source", source, "kb|sg")->check(CLI::IsMember({"kb", "sg"}))->required();
  eval_ret->add_option("--k", ks_text, "comma-separated cutoffs (default retriever.eval_ks)");
  eval_ret->add_option("--split", eval_split, "train|val|test")->capture_default_str();

  std::string mode = "ret", kb_on = "on", sg_on = "on";
  auto add_modes = [&](CLI::App* sub, std::vector<std::string> modes) {
    sub->add_option("--mode", mode, "knowledge mode for enabled sources")->check(CLI::IsMember(modes))->capture_default_str();
    sub->add_option("--kb", kb_on, "use KB knowledge")->check(CLI::IsMember({"on", "off"}))->capture_default_str();
    sub->add_option("--sg", sg_on, "use scene graph knowledge")->check(CLI::IsMember({"on", "off"}))->capture_default_str();
  };
  auto* train_rea = app.add_subcommand("train-reasoner", "train the multi-hop reasoner for one knowledge configuration");
  add_modes(train_rea, {"ret", "gt"});

  std::string branch = "reasoner";
  auto* eval = app.add_subcommand("eval", "score one configuration per question type and split");
  add_modes(eval, {"ret", "gt", "none"});
  eval->add_option("--branch", branch, "reasoner|llm-mock|llm-live")
      ->check(CLI::IsMember({"reasoner", "llm-mock", "llm-live"}))
      ->capture_default_str();
  eval->add_option("--split", eval_split, "train|val|test")->capture_default_str();

  bool transcript = false;
  eval->add_flag("--transcript", transcript, "log LLM requests and responses to reports/<hash>/transcript.jsonl");

  auto* ablate = app.add_subcommand("ablate", "evaluate the seven knowledge configurations");
  ablate->add_flag("--transcript", transcript, "log LLM requests and responses to reports/<hash>/transcript.jsonl");
  ablate->add_option("--branch", branch, "reasoner|llm-mock|llm-live")
      ->check(CLI::IsMember({"reasoner", "llm-mock", "llm-live"}))
      ->capture_default_str();
  ablate->add_option("--split", eval_split, "train|val|test")->capture_default_str();

  std::string record_id;
  auto* prompt = app.add_subcommand("prompt", "print the few-shot prompt for one record");
  prompt->add_option("--record-id", record_id, "record id, e.g. q000123")->required();
  add_modes(prompt, {"ret", "gt", "none"});

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    RunConfig cfg;
    if (!config_file.empty()) cfg.load_file(config_file);
    for (const auto& s : sets) {
      auto eq = s.find('=');
      if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + s + "'");
      cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
    for (const auto& k : config_keys())
      if (app.count("--" + k.name) > 0) cfg.set(k.name, key_values[k.name]);
    if (transcript) cfg.transcript = true;
    cfg.validate();
    Session session(cfg);
    auto t0 = std::chrono::steady_clock::now();

    if (*gen) {
      World world = generate_world(cfg.world);
      auto records = generate_questions(world, cfg.questions_per_image);
      auto split = split_dataset(records, cfg.split, cfg.seed);
      auto dir = cfg.data_path();
      fs::create_directories(dir);
      world.kb.save_jsonl(dir / "kb.jsonl");
      save_scene_graphs(dir / "scenes.jsonl", world.scenes);
      save_qa_jsonl(dir / "train.jsonl", split.train);
      save_qa_jsonl(dir / "val.jsonl", split.val);
      save_qa_jsonl(dir / "test.jsonl", split.test);
      std::ofstream(dir / "config.ini") << cfg.canonical({"", "world"});
      out << "data " << dir.string() << ": " << world.kb.size() << " KB triplets, " << world.scenes.size()
          << " scene graphs, " << records.size() << " questions (" << split.train.size() << "/" << split.val.size()
          << "/" << split.test.size() << ")\n";
    } else if (*train_ret) {
      Source src = parse_source(source);
      session.load_data();
      auto enc = DualEncoder::with_heads(session.base(), cfg.hidden, cfg.dim, cfg.seed);
      auto stats = train_retriever(session.train(), session.corpus(src), enc, cfg.retriever);
      auto dir = cfg.retriever_path();
      enc.save(dir, stem(src));
      write_curve(dir / (std::string(stem(src)) + "_curve.csv"), stats.curve);
      std::ofstream(dir / "config.ini") << cfg.canonical({"", "world", "encoder", "retriever"});
      out << "retriever " << source << " trained in " << std::fixed << std::setprecision(1) << seconds_since(t0)
          << "s; loss " << (stats.curve.empty() ? 0.0 : stats.curve.front()) << " -> "
          << (stats.curve.empty() ? 0.0 : stats.curve.back()) << "; checkpoint " << dir.string() << "\n";
    } else if (*eval_ret) {
      Source src = parse_source(source);
      std::vector<std::size_t> ks = cfg.eval_ks;
      if (!ks_text.empty()) {
        ks.clear();
        std::stringstream ss(ks_text);
        for (std::string part; std::getline(ss, part, ',');) {
          std::size_t k = 0;
          try {
            k = std::stoul(part);
          } catch (const std::exception&) {
            throw UsageError("--k expects positive integers, got '" + part + "'");
          }
          if (k == 0) throw UsageError("--k values must be positive");
          ks.push_back(k);
        }
      }
      session.load_data();
      const auto& records = session.split(eval_split);
      const auto& corpus = session.corpus(src);
      auto trained = retrieval_metrics(records, corpus, session.index(src), session.encoder(src), ks);
      auto bl = DualEncoder::baseline(session.base());
      RetrievalIndex bl_index(corpus, bl);
      auto baseline = retrieval_metrics(records, corpus, bl_index, bl, ks);
      auto dir = cfg.report_dir / cfg.retriever_hash();
      fs::create_directories(dir);
      write_metrics_csv(dir / ("retrieval_" + source + ".csv"), src, trained);
      write_metrics_csv(dir / ("retrieval_" + source + "_baseline.csv"), src, baseline);
      out << "source k any_hit all_hit baseline_any baseline_all n\n";
      for (std::size_t i = 0; i < ks.size(); ++i)
        out << source << " " << ks[i] << " " << std::fixed << std::setprecision(4) << trained[i].any_hit << " "
            << trained[i].all_hit << " " << baseline[i].any_hit << " " << baseline[i].all_hit << " " << trained[i].n
            << "\n";
    } else if (*train_rea) {
      SourceMode kb = flag_mode(mode, kb_on), sg = flag_mode(mode, sg_on);
      std::string label = label_for(kb, sg);
      session.load_data();
      auto& b = session.builder(kb, sg, cfg.reasoner.top_k);
      ReasonerConfig rc = cfg.reasoner;
      rc.dim = cfg.dim;
      bool retrieved = kb == SourceMode::Ret || sg == SourceMode::Ret;
      auto params = init_reasoner(rc, session.vocab(), reasoner_features(cfg.dim), retrieved);
      auto stats = train_reasoner(
          session.train(), b, session.vocab(), params, rc,
          [&](int e, double loss) { err << "  epoch " << e << " loss " << std::setprecision(5) << loss << "\n"; },
          &session.split("val"));
      auto dir = cfg.reasoner_path();
      fs::create_directories(dir);
      params.save(session.reasoner_file(label), session.vocab().hash());
      write_curve(dir / ("reasoner_" + label + "_curve.csv"), stats.curve);
      write_curve(dir / ("reasoner_" + label + "_val_accuracy.csv"), stats.val_accuracy);
      std::ofstream(dir / "config.ini") << cfg.canonical({"", "world", "encoder", "retriever", "reasoner"});
      out << "reasoner " << label << " trained in " << std::fixed << std::setprecision(1) << seconds_since(t0)
          << "s; kept epoch " << stats.best_epoch << " (val accuracy "
          << pct(stats.val_accuracy.empty() || stats.best_epoch == 0 ? 0.0 : stats.val_accuracy[stats.best_epoch - 1])
          << "); checkpoint " << session.reasoner_file(label).string() << "\n";
    } else if (*eval) {
      SourceMode kb = flag_mode(mode, kb_on), sg = flag_mode(mode, sg_on);
      std::string label = label_for(kb, sg);
      Branch br = parse_branch(branch);
      session.load_data();
      const auto& records = session.split(eval_split);
      std::vector<Prediction> preds;
      if (br == Branch::Reasoner) {
        auto params = ReasonerParams::load(require(session.reasoner_file(label)), session.vocab().hash());
        preds = reasoner_predictions(session, records, kb, sg, params);
      } else {
        LlmRunner runner(session, records, br, err);
        preds = runner.run(kb, sg);
      }
      EvalReport rep = score(preds, records,
                             {{"config", label}, {"branch", branch}, {"split", eval_split},
                              {"config_hash", cfg.reasoner_hash()}});
      write_report(rep, cfg.report_path(), "eval_" + branch + "_" + label);
      out << branch << " " << label << " " << eval_split << " accuracy " << pct(rep.overall.accuracy()) << " (n "
          << rep.overall.n << ")\n";
      for (std::size_t t = 0; t < 7; ++t)
        out << "  qtype " << t << " " << pct(rep.qtype[t].accuracy()) << " (n " << rep.qtype[t].n << ")\n";
      out << "  1hop " << pct(rep.hop[0].accuracy()) << "  2hop " << pct(rep.hop[1].accuracy()) << "  kb "
          << pct(rep.kb[0].accuracy()) << "  nokb " << pct(rep.kb[1].accuracy()) << "\n";
    } else if (*ablate) {
      Branch br = parse_branch(branch);
      session.load_data();
      const auto& records = session.split(eval_split);
      std::unique_ptr<LlmRunner> runner;
      if (br != Branch::Reasoner) runner = std::make_unique<LlmRunner>(session, records, br, err);
      auto grid = run_ablation(records, br, [&](const AblationConfig& c) -> std::optional<std::vector<Prediction>> {
        for (auto [src, m] : {std::pair{Source::KB, c.kb}, std::pair{Source::SG, c.sg}})
          if (m == SourceMode::Ret && !session.has_retriever(src)) {
            err << "  " << c.label << ": no " << source_name(src) << " retriever checkpoint, skipped\n";
            return std::nullopt;
          }
        if (br == Branch::Reasoner) {
          auto file = session.reasoner_file(c.label);
          if (!fs::exists(file)) {
            err << "  " << c.label << ": no reasoner checkpoint, skipped\n";
            return std::nullopt;
          }
          return reasoner_predictions(session, records, c.kb, c.sg, ReasonerParams::load(file, session.vocab().hash()));
        }
        return runner->run(c.kb, c.sg);
      });
      auto dir = cfg.report_path();
      fs::create_directories(dir);
      emit_grid(grid, dir / ("ablation_" + branch + ".csv"), ReportFormat::Csv);
      emit_grid(grid, dir / ("ablation_" + branch + ".md"), ReportFormat::Markdown);
      for (const auto& e : grid.entries) {
        if (e.present) write_report(*e.report, dir, "ablation_" + branch + "_" + e.config);
        out << std::left << std::setw(15) << e.config << (e.present ? pct(e.accuracy) : std::string("absent")) << "\n";
      }
      out << "grid written to " << (dir / ("ablation_" + branch + ".csv")).string() << "\n";
    } else if (*prompt) {
      SourceMode kb = mode == "none" ? SourceMode::None : flag_mode(mode, kb_on);
      SourceMode sg = mode == "none" ? SourceMode::None : flag_mode(mode, sg_on);
      session.load_data();
      const QARecord& rec = session.record(record_id);
      std::vector<QARecord> pool;
      for (const auto& r : session.train())
        if (r.id != rec.id) pool.push_back(r);
      ShotSelector selector(pool, session.base());
      std::vector<QARecord> shots;
      for (auto i : selector.select(rec, cfg.n_shots)) shots.push_back(pool[i]);
      out << render_prompt(shots, rec, session.builder(kb, sg, cfg.retriever_k)).rendered;
    }
    return kExitOk;
  } catch (const MissingArtifact& e) {
    err << "error: " << e.what() << "\n";
    return kExitMissing;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace kbvqa
