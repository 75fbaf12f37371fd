#include "kbvqa/evaluation.hpp"

#include <cctype>
#include <cstdio>
#include <fstream>
#include <set>
#include <unordered_map>

namespace kbvqa {

std::string normalize_answer(const std::string& s) {
  std::string out;
  for (unsigned char c : s) out.push_back(static_cast<char>(std::tolower(c)));
  auto strip = [](unsigned char c) { return std::isspace(c) || std::ispunct(c); };
  while (!out.empty() && strip(static_cast<unsigned char>(out.back()))) out.pop_back();
  std::size_t i = 0;
  while (i < out.size() && strip(static_cast<unsigned char>(out[i]))) ++i;
  return out.substr(i);
}

EvalReport score(const std::vector<Prediction>& predictions, const std::vector<QARecord>& records,
                 std::map<std::string, std::string> metadata) {
  std::unordered_map<std::string, const std::string*> by_id;
  for (const auto& p : predictions)
    if (!by_id.emplace(p.id, &p.answer).second) throw AlignmentError("duplicate prediction for record " + p.id);
  if (by_id.size() != records.size())
    throw AlignmentError(std::to_string(predictions.size()) + " predictions for " + std::to_string(records.size()) +
                         " records");
  EvalReport r;
  r.metadata = std::move(metadata);
  for (const auto& rec : records) {
    auto it = by_id.find(rec.id);
    if (it == by_id.end()) throw AlignmentError("no prediction for record " + rec.id);
    if (rec.qtype < 0 || rec.qtype > 6) throw ValidationError("record " + rec.id + " has qtype outside 0..6");
    bool ok = normalize_answer(*it->second) == normalize_answer(rec.answer);
    for (Cell* c : {&r.overall, &r.qtype[static_cast<std::size_t>(rec.qtype)], &r.hop[rec.qtype <= 2 ? 0 : 1],
                    &r.kb[rec.kb_related ? 0 : 1]}) {
      c->n += 1;
      c->correct += ok ? 1 : 0;
    }
  }
  return r;
}

const std::vector<AblationConfig>& ablation_configs() {
  using M = SourceMode;
  static const std::vector<AblationConfig> configs = {
      {"none", M::None, M::None},   {"kb_ret", M::Ret, M::None}, {"sg_ret", M::None, M::Ret},
      {"kb_ret+sg_ret", M::Ret, M::Ret}, {"kb_gt", M::GT, M::None}, {"sg_gt", M::None, M::GT},
      {"kb_gt+sg_gt", M::GT, M::GT}};
  return configs;
}

std::string_view branch_name(Branch b) {
  switch (b) {
    case Branch::Reasoner: return "reasoner";
    case Branch::LlmMock: return "llm-mock";
    case Branch::LlmLive: return "llm-live";
  }
  return "reasoner";
}

Branch parse_branch(std::string_view s) {
  if (s == "reasoner") return Branch::Reasoner;
  if (s == "llm-mock") return Branch::LlmMock;
  if (s == "llm-live") return Branch::LlmLive;
  throw std::invalid_argument("unknown branch '" + std::string(s) + "' (reasoner|llm-mock|llm-live)");
}

const GridEntry& AblationGrid::at(const std::string& label) const {
  for (const auto& e : entries)
    if (e.config == label) return e;
  throw std::out_of_range("no ablation configuration " + label);
}

AblationGrid run_ablation(const std::vector<QARecord>& records, Branch branch,
                          const std::function<std::optional<std::vector<Prediction>>(const AblationConfig&)>&
                              predict_config) {
  AblationGrid grid;
  grid.branch = branch;
  for (const auto& cfg : ablation_configs()) {
    GridEntry e;
    e.config = cfg.label;
    if (auto preds = predict_config(cfg)) {
      EvalReport rep = score(*preds, records,
                             {{"config", cfg.label},
                              {"branch", std::string(branch_name(branch))},
                              {"kb_mode", std::string(mode_name(cfg.kb))},
                              {"sg_mode", std::string(mode_name(cfg.sg))}});
      e.present = true;
      e.accuracy = rep.overall.accuracy();
      e.n = rep.overall.n;
      e.report = std::move(rep);
    }
    grid.entries.push_back(std::move(e));
  }
  return grid;
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

using Row = std::vector<std::string>;

void write_table(const std::filesystem::path& path, ReportFormat format, const Row& header,
                 const std::vector<Row>& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write report " + path.string());
  auto line = [&](const Row& r) {
    if (format == ReportFormat::Csv) {
      for (std::size_t i = 0; i < r.size(); ++i) out << (i ? "," : "") << r[i];
    } else {
      out << "|";
      for (const auto& c : r) out << " " << c << " |";
    }
    out << '\n';
  };
  line(header);
  if (format == ReportFormat::Markdown) line(Row(header.size(), "---"));
  for (const auto& r : rows) line(r);
  if (!out) throw std::runtime_error("failed writing report " + path.string());
}

}  // namespace

void emit_qtype(const EvalReport& report, const std::filesystem::path& path, ReportFormat format) {
  std::vector<Row> rows;
  for (std::size_t t = 0; t < report.qtype.size(); ++t)
    if (report.qtype[t].n > 0)
      rows.push_back({std::to_string(t), fmt(report.qtype[t].accuracy()), std::to_string(report.qtype[t].n)});
  write_table(path, format, {"qtype", "accuracy", "n"}, rows);
}

void emit_split(const EvalReport& report, const std::filesystem::path& path, ReportFormat format) {
  std::vector<Row> rows;
  const std::pair<const char*, const Cell*> cells[] = {
      {"1hop", &report.hop[0]}, {"2hop", &report.hop[1]}, {"kb", &report.kb[0]}, {"nokb", &report.kb[1]}};
  for (auto [name, c] : cells)
    if (c->n > 0) rows.push_back({name, fmt(c->accuracy()), std::to_string(c->n)});
  write_table(path, format, {"split", "accuracy", "n"}, rows);
}

void emit_grid(const AblationGrid& grid, const std::filesystem::path& path, ReportFormat format) {
  std::vector<Row> rows;
  for (const auto& e : grid.entries)
    if (e.present) rows.push_back({e.config, std::string(branch_name(grid.branch)), fmt(e.accuracy), std::to_string(e.n)});
  write_table(path, format, {"config", "branch", "accuracy", "n"}, rows);
}

}  // namespace kbvqa
