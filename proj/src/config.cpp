#include "kbvqa/config.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "kbvqa/text.hpp"

namespace kbvqa {

namespace {

std::string trim(std::string s) {
  auto sp = [](unsigned char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  while (!s.empty() && sp(static_cast<unsigned char>(s.back()))) s.pop_back();
  std::size_t i = 0;
  while (i < s.size() && sp(static_cast<unsigned char>(s[i]))) ++i;
  return s.substr(i);
}

template <typename T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  auto s = trim(v);
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty())
    throw ConfigError("config key " + key + ": cannot parse '" + v + "' as a number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  auto s = trim(v);
  if (s == "true" || s == "on" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "off" || s == "0" || s == "no") return false;
  throw ConfigError("config key " + key + ": expected a boolean, got '" + v + "'");
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

template <typename T>
std::string list(const T& xs) {
  std::string out;
  for (std::size_t i = 0; i < xs.size(); ++i) out += (i ? "," : "") + num(static_cast<double>(xs[i]));
  return out;
}

struct Field {
  ConfigKey key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define KB_INT(name, help, member, type)                                                   \
  Field {                                                                                  \
    {name, help}, [](const RunConfig& c) { return std::to_string(c.member); },             \
        [](RunConfig& c, const std::string& v) { c.member = parse_number<type>(name, v); } \
  }
#define KB_REAL(name, help, member)                                                          \
  Field {                                                                                    \
    {name, help}, [](const RunConfig& c) { return num(c.member); },                          \
        [](RunConfig& c, const std::string& v) { c.member = parse_number<double>(name, v); } \
  }
#define KB_BOOL(name, help, member)                                                                        \
  Field {                                                                                                  \
    {name, help}, [](const RunConfig& c) { return std::string(c.member ? "true" : "false"); },             \
        [](RunConfig& c, const std::string& v) { c.member = parse_bool(name, v); }                         \
  }
#define KB_STR(name, help, member)                                                                     \
  Field {                                                                                              \
    {name, help}, [](const RunConfig& c) { return std::string(c.member); },                            \
        [](RunConfig& c, const std::string& v) { c.member = trim(v); }                                 \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      KB_INT("seed", "seed for splits, head init and training order", seed, std::uint64_t),
      KB_INT("world.seed", "world generator seed", world.seed, std::uint64_t),
      KB_INT("world.n_images", "number of images (scene graphs)", world.n_images, int),
      KB_INT("world.entities_per_image", "objects per scene graph", world.sg_entities_per_image, int),
      KB_INT("world.triplets_per_image", "triplets per scene graph", world.sg_triplets_per_image, int),
      KB_INT("world.objects", "visual object vocabulary shared with the KB", world.n_objects, int),
      KB_INT("world.sg_relations", "scene graph relation vocabulary", world.sg_relations, int),
      KB_INT("world.kb_entities", "KB-only concepts", world.kb_entities, int),
      KB_INT("world.kb_relations", "KB relation vocabulary", world.kb_relations, int),
      KB_INT("world.kb_triplets", "KB size", world.kb_triplets, int),
      KB_REAL("world.object_head_fraction", "share of KB triplets headed by a visual object",
              world.object_head_fraction),
      KB_REAL("world.object_tail_fraction", "share of KB triplets with a visual object tail",
              world.object_tail_fraction),
      KB_REAL("world.kb_question_fraction", "share of KB-related questions", world.kb_question_fraction),
      KB_INT("world.questions_per_image", "questions generated per image", questions_per_image, int),
      Field{{"world.split", "train,val,test ratios by image"},
            [](const RunConfig& c) { return list(c.split); },
            [](RunConfig& c, const std::string& v) {
              std::vector<double> xs;
              std::stringstream ss(v);
              for (std::string part; std::getline(ss, part, ',');) xs.push_back(parse_number<double>("world.split", part));
              if (xs.size() != 3) throw ConfigError("world.split needs three comma-separated ratios");
              c.split = {xs[0], xs[1], xs[2]};
            }},
      KB_INT("encoder.d_base", "base embedding width", d_base, std::size_t),
      KB_INT("encoder.hidden", "projection head hidden width", hidden, std::size_t),
      KB_INT("encoder.dim", "encoder output width D (also the reasoner width)", dim, std::size_t),
      KB_INT("retriever.epochs", "retriever training epochs", retriever.epochs, int),
      KB_INT("retriever.batch", "retriever batch size", retriever.batch, std::size_t),
      KB_REAL("retriever.lr", "retriever learning rate", retriever.lr),
      KB_REAL("retriever.weight_decay", "retriever AdamW weight decay", retriever.weight_decay),
      KB_INT("retriever.k", "triplets retrieved per source for prompts", retriever_k, std::size_t),
      KB_INT("retriever.kb_hops", "hops of the keyword-seeded KB subgraph", kb_hops, int),
      Field{{"retriever.eval_ks", "cutoffs reported by eval-retriever"},
            [](const RunConfig& c) { return list(c.eval_ks); },
            [](RunConfig& c, const std::string& v) {
              std::vector<std::size_t> ks;
              std::stringstream ss(v);
              for (std::string part; std::getline(ss, part, ',');)
                ks.push_back(parse_number<std::size_t>("retriever.eval_ks", part));
              if (ks.empty()) throw ConfigError("retriever.eval_ks is empty");
              c.eval_ks = ks;
            }},
      KB_INT("reasoner.epochs", "reasoner training epochs", reasoner.epochs, int),
      KB_INT("reasoner.batch", "reasoner batch size", reasoner.batch, std::size_t),
      KB_REAL("reasoner.lr", "reasoner learning rate", reasoner.lr),
      KB_REAL("reasoner.weight_decay", "reasoner AdamW weight decay", reasoner.weight_decay),
      KB_INT("reasoner.layers", "query-update layers L", reasoner.layers, int),
      KB_BOOL("reasoner.residual", "carry the query across layers", reasoner.residual),
      KB_INT("reasoner.top_k", "retrieved triplets per source fed to the reasoner", reasoner.top_k, std::size_t),
      Field{{"reasoner.init", "parameter init: structured|random"},
            [](const RunConfig& c) {
              return std::string(c.reasoner.init == ReasonerInit::Random ? "random" : "structured");
            },
            [](RunConfig& c, const std::string& v) {
              auto s = trim(v);
              if (s == "random") c.reasoner.init = ReasonerInit::Random;
              else if (s == "structured") c.reasoner.init = ReasonerInit::Structured;
              else throw ConfigError("reasoner.init must be structured or random");
            }},
      KB_INT("llm.n_shots", "in-context examples per prompt", n_shots, std::size_t),
      KB_STR("llm.base_url", "completion endpoint base URL", endpoint.base_url),
      KB_STR("llm.path", "completion endpoint path", endpoint.path),
      KB_STR("llm.model", "model name sent with each request", endpoint.model),
      KB_STR("llm.auth_env", "environment variable holding the API token", endpoint.auth_env),
      Field{{"llm.timeout_ms", "request timeout in milliseconds"},
            [](const RunConfig& c) { return std::to_string(c.endpoint.timeout.count()); },
            [](RunConfig& c, const std::string& v) {
              c.endpoint.timeout = std::chrono::milliseconds(parse_number<long long>("llm.timeout_ms", v));
            }},
      KB_INT("llm.max_tokens", "completion length limit", endpoint.max_tokens, int),
      KB_REAL("llm.temperature", "sampling temperature", endpoint.temperature),
      KB_INT("llm.attempts", "attempts per request", endpoint.attempts, int),
      KB_BOOL("llm.transcript", "log requests and responses to a JSONL transcript", transcript),
      Field{{"paths.data_dir", "generated data root"},
            [](const RunConfig& c) { return c.data_dir.string(); },
            [](RunConfig& c, const std::string& v) { c.data_dir = trim(v); }},
      Field{{"paths.checkpoint_dir", "checkpoint root"},
            [](const RunConfig& c) { return c.checkpoint_dir.string(); },
            [](RunConfig& c, const std::string& v) { c.checkpoint_dir = trim(v); }},
      Field{{"paths.report_dir", "report root"},
            [](const RunConfig& c) { return c.report_dir.string(); },
            [](RunConfig& c, const std::string& v) { c.report_dir = trim(v); }},
  };
  return table;
}

const Field& field(const std::string& key) {
  for (const auto& f : fields())
    if (f.key.name == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

std::string short_hash(const std::string& text) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
  return std::string(buf).substr(0, 12);
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& f : fields()) out.push_back(f.key);
    return out;
  }();
  return keys;
}

void RunConfig::set(const std::string& key, const std::string& value) { field(trim(key)).set(*this, value); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

void RunConfig::validate() const {
  try {
    world.validate();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("world: ") + e.what());
  }
  if (questions_per_image < 1) throw ConfigError("world.questions_per_image must be at least 1");
  double total = split[0] + split[1] + split[2];
  if (split[0] <= 0 || split[1] < 0 || split[2] <= 0 || std::abs(total - 1.0) > 1e-9)
    throw ConfigError("world.split must be non-negative with positive train/test shares summing to 1");
  if (d_base == 0 || hidden == 0 || dim == 0) throw ConfigError("encoder widths must be positive");
  if (retriever.epochs < 0 || reasoner.epochs < 0) throw ConfigError("epochs must be non-negative");
  if (retriever.batch < 2) throw ConfigError("retriever.batch must be at least 2 (in-batch negatives)");
  if (reasoner.batch < 1) throw ConfigError("reasoner.batch must be positive");
  if (!(retriever.lr > 0) || !(reasoner.lr > 0)) throw ConfigError("learning rates must be positive");
  if (retriever.weight_decay < 0 || reasoner.weight_decay < 0) throw ConfigError("weight decay must be non-negative");
  if (retriever_k == 0 || reasoner.top_k == 0) throw ConfigError("top-k values must be positive");
  if (kb_hops < 0) throw ConfigError("retriever.kb_hops must be non-negative");
  if (reasoner.layers < 1) throw ConfigError("reasoner.layers must be at least 1");
  if (n_shots == 0) throw ConfigError("llm.n_shots must be at least 1");
  if (endpoint.attempts < 1) throw ConfigError("llm.attempts must be at least 1");
  if (endpoint.max_tokens < 1) throw ConfigError("llm.max_tokens must be positive");
  if (endpoint.timeout.count() <= 0) throw ConfigError("llm.timeout_ms must be positive");
}

void RunConfig::load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::string section, line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto s = trim(line);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": bad section header");
      section = trim(s.substr(1, s.size() - 2));
      continue;
    }
    auto eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": expected key = value");
    auto key = trim(s.substr(0, eq));
    auto value = trim(s.substr(eq + 1));
    try {
      set(section.empty() ? key : section + "." + key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

std::string RunConfig::canonical(const std::vector<std::string>& sections) const {
  std::string out;
  for (const auto& f : fields()) {
    const auto& name = f.key.name;
    auto dot = name.find('.');
    std::string sec = dot == std::string::npos ? "" : name.substr(0, dot);
    if (!sections.empty() && std::find(sections.begin(), sections.end(), sec) == sections.end()) continue;
    out += name + " = " + f.get(*this) + "\n";
  }
  return out;
}

std::string RunConfig::data_hash() const { return short_hash(canonical({"", "world"})); }

std::string RunConfig::retriever_hash() const {
  return short_hash(data_hash() + "\n" + canonical({"encoder"}) + canonical({"retriever"}));
}

std::string RunConfig::reasoner_hash() const { return short_hash(retriever_hash() + "\n" + canonical({"reasoner"})); }

}  // namespace kbvqa
