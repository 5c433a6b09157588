#include "memoryformer/config.h"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace mf {

namespace pt = boost::property_tree;

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("train config: " + m); };
  if (!(base_lr >= 0.0)) fail("base_lr must be >= 0");
  if (!(table_lr_multiplier > 0.0)) fail("table_lr_multiplier must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) fail("betas must be in [0, 1)");
  if (!(eps > 0.0)) fail("eps must be > 0");
  if (steps == 0) fail("steps must be >= 1");
  if (warmup_steps > steps) fail("warmup_steps exceeds steps");
  if (batch_size == 0) fail("batch_size must be >= 1");
  if (!(eval_fraction > 0.0 && eval_fraction < 1.0)) fail("eval_fraction must be in (0, 1)");
}

std::size_t TrainConfig::resolved_warmup() const {
  return warmup_steps ? warmup_steps : std::max<std::size_t>(1, steps / 100);
}

void RunConfig::validate() const {
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  train.validate();
  if (seq_len() > model.context) throw ConfigError("train.seq_len exceeds model.context");
}

namespace {

template <typename N>
N parse_number(const std::string& key, const std::string& text) {
  N v{};
  const char* b = text.data();
  const char* e = b + text.size();
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e) throw ConfigError("config: bad value '" + text + "' for " + key);
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes" || text == "on") return true;
  if (text == "false" || text == "0" || text == "no" || text == "off") return false;
  throw ConfigError("config: bad boolean '" + text + "' for " + key);
}

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define MF_SIZE(sec, f)                                                                               \
  {                                                                                                   \
    #sec "." #f, {[](RunConfig& c, const std::string& k, const std::string& v) {                     \
                    c.sec.f = parse_number<std::remove_cvref_t<decltype(c.sec.f)>>(k, v);             \
                  },                                                                                  \
                  [](const RunConfig& c) { return std::to_string(c.sec.f); } }                        \
  }
#define MF_DOUBLE(sec, f)                                                                             \
  {                                                                                                   \
    #sec "." #f, {[](RunConfig& c, const std::string& k, const std::string& v) {                     \
                    c.sec.f = parse_number<double>(k, v);                                             \
                  },                                                                                  \
                  [](const RunConfig& c) { return format_double(c.sec.f); } }                         \
  }
#define MF_BOOL(sec, f)                                                                                      \
  {                                                                                                          \
    #sec "." #f, {[](RunConfig& c, const std::string& k, const std::string& v) { c.sec.f = parse_bool(k, v); }, \
                  [](const RunConfig& c) { return std::string(c.sec.f ? "true" : "false"); } }               \
  }

// Ordered as written by write_run_config.
const std::vector<std::pair<std::string, Field>>& fields() {
  static const std::vector<std::pair<std::string, Field>> table = {
      {"model.variant",
       {[](RunConfig& c, const std::string&, const std::string& v) {
          try {
            c.model.variant = parse_variant(v);
          } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
          }
        },
        [](const RunConfig& c) { return to_string(c.model.variant); }}},
      MF_SIZE(model, n_layers),
      MF_SIZE(model, hidden),
      MF_SIZE(model, heads),
      MF_SIZE(model, tau),
      MF_SIZE(model, chunks),
      MF_SIZE(model, expand_bits),
      MF_DOUBLE(model, temperature),
      MF_SIZE(model, vocab),
      MF_SIZE(model, context),
      MF_BOOL(model, block_gelu),
      {"model.residual",
       {[](RunConfig& c, const std::string&, const std::string& v) {
          try {
            c.model.residual = parse_residual(v);
          } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
          }
        },
        [](const RunConfig& c) { return to_string(c.model.residual); }}},
      MF_DOUBLE(model, table_init_std),
      MF_DOUBLE(train, base_lr),
      MF_DOUBLE(train, table_lr_multiplier),
      MF_DOUBLE(train, beta1),
      MF_DOUBLE(train, beta2),
      MF_DOUBLE(train, eps),
      MF_DOUBLE(train, weight_decay),
      MF_DOUBLE(train, grad_clip),
      MF_SIZE(train, warmup_steps),
      MF_SIZE(train, steps),
      MF_SIZE(train, batch_size),
      MF_SIZE(train, seq_len),
      MF_SIZE(train, seed),
      {"train.corpus",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.train.corpus = v; },
        [](const RunConfig& c) { return c.train.corpus; }}},
      MF_DOUBLE(train, eval_fraction),
      MF_SIZE(train, eval_interval),
      MF_SIZE(train, eval_windows),
      MF_SIZE(train, checkpoint_interval),
      MF_BOOL(train, sparse_table_moments),
  };
  return table;
}

#undef MF_SIZE
#undef MF_DOUBLE
#undef MF_BOOL

const Field& field(const std::string& key) {
  for (const auto& [k, f] : fields())
    if (k == key) return f;
  throw ConfigError("config: unknown key '" + key + "'");
}

pt::ptree read_ini_stream(std::istream& is, const std::string& what) {
  pt::ptree tree;
  try {
    pt::read_ini(is, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(what + ": " + e.message() + " at line " + std::to_string(e.line()));
  }
  return tree;
}

std::ifstream open_or_throw(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  return in;
}

}  // namespace

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
  field(key).set(cfg, key, value);
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  apply_override(cfg, assignment.substr(0, eq), assignment.substr(eq + 1));
}

RunConfig parse_run_config(std::istream& is, const std::filesystem::path& base_dir) {
  const pt::ptree tree = read_ini_stream(is, "run config");
  RunConfig cfg;
  for (const auto& [section, body] : tree) {
    if (section == "checkpoint") continue;
    if (section != "model" && section != "train") throw ConfigError("config: unknown section [" + section + "]");
    for (const auto& [key, value] : body) apply_override(cfg, section + "." + key, value.data());
  }
  if (!cfg.train.corpus.empty() && std::filesystem::path(cfg.train.corpus).is_relative() && !base_dir.empty()) {
    cfg.train.corpus = (base_dir / cfg.train.corpus).lexically_normal().string();
  }
  cfg.validate();
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  auto in = open_or_throw(path);
  return parse_run_config(in, path.parent_path());
}

void write_run_config(std::ostream& os, const RunConfig& cfg) {
  std::string section;
  for (const auto& [key, f] : fields()) {
    const std::string sec = key.substr(0, key.find('.'));
    if (sec != section) {
      if (!section.empty()) os << '\n';
      os << '[' << sec << "]\n";
      section = sec;
    }
    os << key.substr(key.find('.') + 1) << " = " << f.get(cfg) << '\n';
  }
}

std::string to_ini(const RunConfig& cfg) {
  std::ostringstream os;
  write_run_config(os, cfg);
  return os.str();
}

AblationGrid load_grid(const std::filesystem::path& path) {
  auto in = open_or_throw(path);
  const pt::ptree tree = read_ini_stream(in, "grid " + path.string());
  AblationGrid grid;
  bool has_grid = false;
  for (const auto& [section, body] : tree) {
    if (section == "grid") {
      has_grid = true;
      for (const auto& [key, value] : body) {
        if (key == "base") {
          grid.base = (path.parent_path() / value.data()).lexically_normal();
        } else {
          field(key);
          grid.common.emplace_back(key, value.data());
        }
      }
      continue;
    }
    GridRun run{section, {}};
    for (const auto& [key, value] : body) {
      field(key);
      run.overrides.emplace_back(key, value.data());
    }
    grid.runs.push_back(std::move(run));
  }
  if (!has_grid || grid.base.empty()) throw ConfigError("grid " + path.string() + ": missing [grid] base");
  if (grid.runs.empty()) throw ConfigError("grid " + path.string() + ": no runs");
  return grid;
}

}  // namespace mf
