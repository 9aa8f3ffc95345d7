// harness.hpp — experiment configs, resumable parallel sweeps, CSV records, power-law fits and reports
#pragma once

#include "closedsys/experiments.hpp"
#include "closedsys/fit.hpp"
#include "closedsys/hash.hpp"

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <thread>

namespace closedsys::harness {

using json = nlohmann::json;
namespace fs = std::filesystem;

inline constexpr const char* kCsvHeader = "config_hash,experiment,sweep_param,sweep_value,time,metric,value,diag_norm_drift,diag_residual";
inline constexpr const char* kOutputRootEnv = "CLOSEDSYS_OUTPUT_ROOT";
inline constexpr const char* kFailedMetric = "failed";

// ---- configuration ---------------------------------------------------------------------------

struct SweepSpec {
  std::string param;
  std::vector<double> values;
};

struct FitSpec {
  std::string metric;
  std::string axis;
  std::optional<double> min_slope, max_slope;
  std::string criterion;  // name of the acceptance check the verdict belongs to
};

struct ExperimentConfig {
  std::string experiment;
  json params = json::object();  // complete: defaults merged with the user's values
  std::optional<SweepSpec> sweep;
  std::vector<double> times{0.0};
  std::string output;
  std::uint64_t seed = 0;
  std::vector<FitSpec> fits;

  // Everything that determines the records; the output location is excluded.
  json canonical() const {
    json j;
    j["experiment"] = experiment;
    j["params"] = params;
    j["times"] = times;
    j["seed"] = seed;
    if (sweep) j["sweep"] = {{"param", sweep->param}, {"values", sweep->values}};
    return j;
  }
  std::string hash() const { return sha256_hex(canonical().dump()); }
  std::string short_hash() const { return hash().substr(0, 16); }

  json to_json() const {
    json j = canonical();
    j["output"] = output;
    j["config_hash"] = short_hash();
    json fl = json::array();
    for (const auto& f : fits) {
      json e{{"metric", f.metric}, {"axis", f.axis}, {"criterion", f.criterion}};
      if (f.min_slope) e["min_slope"] = *f.min_slope;
      if (f.max_slope) e["max_slope"] = *f.max_slope;
      fl.push_back(e);
    }
    j["fits"] = fl;
    return j;
  }
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems) : std::runtime_error(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& p) {
    std::string s = "invalid experiment config:";
    for (const auto& e : p) s += "\n  - " + e;
    return s;
  }
  std::vector<std::string> problems_;
};

namespace detail {

inline bool type_matches(const experiments::ParamSpec& s, const json& v) {
  using K = experiments::ParamKind;
  auto numeric_list = [](const json& a) {
    if (!a.is_array()) return false;
    for (const auto& x : a)
      if (!x.is_number()) return false;
    return true;
  };
  switch (s.kind) {
    case K::number: return v.is_number();
    case K::integer: return v.is_number_integer();
    case K::boolean: return v.is_boolean();
    case K::string: return v.is_string();
    case K::vector: return numeric_list(v) && v.size() >= 1 && v.size() <= 3;
    case K::number_list: return numeric_list(v);
    case K::vector_list:
      if (!v.is_array()) return false;
      for (const auto& e : v)
        if (!numeric_list(e) || e.empty() || e.size() > 3) return false;
      return true;
  }
  return false;
}

inline const char* kind_name(experiments::ParamKind k) {
  using K = experiments::ParamKind;
  switch (k) {
    case K::number: return "a number";
    case K::integer: return "an integer";
    case K::boolean: return "a boolean";
    case K::string: return "a string";
    case K::vector: return "a vector of 1 to 3 numbers";
    case K::number_list: return "a list of numbers";
    case K::vector_list: return "a list of vectors";
  }
  return "?";
}

inline std::string line_col(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return "line " + std::to_string(line) + ", column " + std::to_string(col);
}

inline std::vector<double> read_number_list(const json& v, const std::string& where, std::vector<std::string>& errs) {
  std::vector<double> out;
  if (!v.is_array() || v.empty()) {
    errs.push_back(where + ": must be a non-empty list of numbers");
    return out;
  }
  for (const auto& x : v) {
    if (!x.is_number()) {
      errs.push_back(where + ": must contain only numbers");
      return {};
    }
    out.push_back(x.get<double>());
  }
  return out;
}

}  // namespace detail

// Validates a parsed document and collects every violated invariant.
inline ExperimentConfig config_from_json(const json& doc) {
  std::vector<std::string> errs;
  ExperimentConfig c;
  if (!doc.is_object()) throw ConfigError({"top level: must be a JSON object"});
  static const std::set<std::string> known = {"experiment", "params", "sweep", "times", "output", "seed", "fits", "description", "config_hash"};
  for (const auto& [k, v] : doc.items())
    if (!known.count(k)) errs.push_back("unknown top-level key \"" + k + "\"");

  const experiments::ExperimentSpec* spec = nullptr;
  if (!doc.contains("experiment") || !doc["experiment"].is_string()) {
    errs.emplace_back("experiment: required string naming the experiment");
  } else {
    c.experiment = doc["experiment"].get<std::string>();
    spec = experiments::find_experiment(c.experiment);
    if (!spec) {
      std::string ids;
      for (const auto& e : experiments::registry()) ids += (ids.empty() ? "" : ", ") + e.id;
      errs.push_back("unknown experiment id \"" + c.experiment + "\" (known: " + ids + ")");
    }
  }

  if (doc.contains("seed")) {
    if (doc["seed"].is_number_unsigned())
      c.seed = doc["seed"].get<std::uint64_t>();
    else if (doc["seed"].is_number_integer() && doc["seed"].get<std::int64_t>() >= 0)
      c.seed = static_cast<std::uint64_t>(doc["seed"].get<std::int64_t>());
    else
      errs.emplace_back("seed: must be a non-negative 64-bit integer");
  }
  if (doc.contains("output")) {
    if (doc["output"].is_string())
      c.output = doc["output"].get<std::string>();
    else
      errs.emplace_back("output: must be a string path");
  }

  if (doc.contains("times")) {
    const json& t = doc["times"];
    if (t.is_object()) {
      if (!t.contains("start") || !t.contains("stop") || !t.contains("step") || !t["start"].is_number() || !t["stop"].is_number() ||
          !t["step"].is_number()) {
        errs.emplace_back("times: an object form needs numeric start, stop and step");
      } else {
        const double a = t["start"].get<double>(), b = t["stop"].get<double>(), h = t["step"].get<double>();
        if (!(h > 0.0) || b < a) {
          errs.emplace_back("times: need step > 0 and stop >= start");
        } else {
          c.times.clear();
          const auto n = static_cast<long>(std::floor((b - a) / h + 1e-9));
          for (long i = 0; i <= n; ++i) c.times.push_back(a + static_cast<double>(i) * h);
        }
      }
    } else {
      auto v = detail::read_number_list(t, "times", errs);
      if (!v.empty()) c.times = v;
    }
    if (c.times.front() < 0.0) errs.emplace_back("times: must be nonnegative");
    for (std::size_t i = 1; i < c.times.size(); ++i)
      if (!(c.times[i] > c.times[i - 1])) {
        errs.emplace_back("times: values must be strictly increasing");
        break;
      }
  }

  json params = json::object();
  if (doc.contains("params") && !doc["params"].is_object()) errs.emplace_back("params: must be an object");
  if (spec) {
    params = spec->defaults();
    if (doc.contains("params") && doc["params"].is_object()) {
      for (const auto& [k, v] : doc["params"].items()) {
        const auto* ps = spec->find(k);
        if (!ps) {
          errs.push_back("params." + k + ": unknown parameter for experiment " + spec->id);
          continue;
        }
        if (!detail::type_matches(*ps, v)) {
          errs.push_back("params." + k + ": must be " + detail::kind_name(ps->kind));
          continue;
        }
        if (!ps->choices.empty() && std::find(ps->choices.begin(), ps->choices.end(), v.get<std::string>()) == ps->choices.end()) {
          std::string opts;
          for (const auto& o : ps->choices) opts += (opts.empty() ? "" : ", ") + o;
          errs.push_back("params." + k + ": must be one of " + opts);
          continue;
        }
        params[k] = v;
      }
    }
    if (!spec->uses_times && doc.contains("times") && c.times.size() > 1)
      errs.push_back("times: experiment " + spec->id + " has no time axis");
  }
  c.params = params;

  if (doc.contains("sweep")) {
    const json& s = doc["sweep"];
    if (!s.is_object() || !s.contains("param") || !s["param"].is_string()) {
      errs.emplace_back("sweep: needs a \"param\" string and either \"values\" or \"geometric\"");
    } else {
      SweepSpec sw;
      sw.param = s["param"].get<std::string>();
      if (spec) {
        const auto* ps = spec->find(sw.param);
        if (!ps)
          errs.push_back("sweep.param: \"" + sw.param + "\" is not a parameter of " + spec->id);
        else if (ps->kind != experiments::ParamKind::number && ps->kind != experiments::ParamKind::integer)
          errs.push_back("sweep.param: \"" + sw.param + "\" is not numeric");
      }
      if (s.contains("values") == s.contains("geometric")) {
        errs.emplace_back("sweep: give exactly one of \"values\" or \"geometric\"");
      } else if (s.contains("values")) {
        sw.values = detail::read_number_list(s["values"], "sweep.values", errs);
      } else {
        const json& g = s["geometric"];
        if (!g.is_object() || !g.contains("start") || !g.contains("factor") || !g.contains("count") || !g["start"].is_number() ||
            !g["factor"].is_number() || !g["count"].is_number_integer() || g["count"].get<int>() < 1) {
          errs.emplace_back("sweep.geometric: needs numeric start and factor and a positive integer count");
        } else {
          double v = g["start"].get<double>();
          for (int i = 0; i < g["count"].get<int>(); ++i, v *= g["factor"].get<double>()) sw.values.push_back(v);
        }
      }
      for (std::size_t i = 1; i < sw.values.size(); ++i)
        if (!(sw.values[i] > sw.values[i - 1])) {
          errs.emplace_back("sweep values strictly increasing: required, got a non-increasing step");
          break;
        }
      c.sweep = sw;
    }
  }

  if (doc.contains("fits")) {
    if (!doc["fits"].is_array()) {
      errs.emplace_back("fits: must be a list");
    } else {
      for (const auto& f : doc["fits"]) {
        FitSpec fs;
        if (!f.is_object() || !f.contains("metric") || !f["metric"].is_string() || !f.contains("axis") || !f["axis"].is_string()) {
          errs.emplace_back("fits: each entry needs string \"metric\" and \"axis\"");
          continue;
        }
        fs.metric = f["metric"].get<std::string>();
        fs.axis = f["axis"].get<std::string>();
        for (const char* key : {"min_slope", "max_slope"})
          if (f.contains(key) && !f[key].is_number()) errs.push_back(std::string("fits: ") + key + " must be a number");
        if (f.contains("criterion") && !f["criterion"].is_string()) errs.emplace_back("fits: criterion must be a string");
        if (f.contains("min_slope") && f["min_slope"].is_number()) fs.min_slope = f["min_slope"].get<double>();
        if (f.contains("max_slope") && f["max_slope"].is_number()) fs.max_slope = f["max_slope"].get<double>();
        if (f.contains("criterion") && f["criterion"].is_string()) fs.criterion = f["criterion"].get<std::string>();
        if (fs.axis != "time" && (!c.sweep || c.sweep->param != fs.axis))
          errs.push_back("fits: axis \"" + fs.axis + "\" is neither \"time\" nor the sweep parameter");
        c.fits.push_back(fs);
      }
    }
  }

  // Semantic checks at the base point and at every sweep point.
  if (spec && errs.empty()) {
    std::set<std::string> seen;
    auto check = [&](const json& p, const std::string& where) {
      for (const auto& e : spec->validate(experiments::Params(p))) {
        const std::string msg = where.empty() ? e : e + " (at " + where + ")";
        if (seen.insert(e).second) errs.push_back(msg);
      }
    };
    if (c.sweep) {
      for (double v : c.sweep->values) {
        json p = c.params;
        p[c.sweep->param] = spec->find(c.sweep->param)->kind == experiments::ParamKind::integer ? json(static_cast<long>(std::llround(v))) : json(v);
        std::ostringstream w;
        w.precision(17);
        w << c.sweep->param << " = " << v;
        check(p, w.str());
      }
    } else {
      check(c.params, "");
    }
  }
  // An echoed config carries its hash; it must still describe the same records.
  if (errs.empty() && doc.contains("config_hash")) {
    const json& h = doc["config_hash"];
    if (!h.is_string() || (h.get<std::string>() != c.short_hash() && h.get<std::string>() != c.hash()))
      errs.emplace_back("config_hash: does not match the config contents");
  }
  if (!errs.empty()) throw ConfigError(errs);
  return c;
}

// JSON Schema of the config format, generated from the experiment registry.
inline json config_schema() {
  auto number_list = [](bool increasing) {
    json j{{"type", "array"}, {"items", {{"type", "number"}}}, {"minItems", 1}};
    if (increasing) j["description"] = "strictly increasing";
    return j;
  };
  auto param_schema = [&](const experiments::ParamSpec& p) {
    json j;
    switch (p.kind) {
      case experiments::ParamKind::number: j = {{"type", "number"}}; break;
      case experiments::ParamKind::integer: j = {{"type", "integer"}}; break;
      case experiments::ParamKind::boolean: j = {{"type", "boolean"}}; break;
      case experiments::ParamKind::string:
        j = {{"type", "string"}};
        if (!p.choices.empty()) j["enum"] = p.choices;
        break;
      case experiments::ParamKind::vector: j = {{"type", "array"}, {"items", {{"type", "number"}}}, {"minItems", 1}, {"maxItems", 3}}; break;
      case experiments::ParamKind::vector_list:
        j = {{"type", "array"}, {"items", {{"type", "array"}, {"items", {{"type", "number"}}}, {"minItems", 1}, {"maxItems", 3}}}, {"minItems", 1}};
        break;
      case experiments::ParamKind::number_list: j = number_list(false); break;
    }
    j["description"] = p.help;
    j["default"] = p.default_value;
    return j;
  };
  json variants = json::array();
  for (const auto& e : experiments::registry()) {
    json props = json::object();
    for (const auto& p : e.params) props[p.name] = param_schema(p);
    variants.push_back({{"description", e.description},
                        {"properties", {{"experiment", {{"const", e.id}}}, {"params", {{"type", "object"}, {"properties", props}, {"additionalProperties", false}}}}}});
  }
  json times = {{"oneOf", json::array({number_list(true), {{"type", "object"},
                                                            {"required", {"start", "stop", "step"}},
                                                            {"properties", {{"start", {{"type", "number"}, {"minimum", 0}}},
                                                                            {"stop", {{"type", "number"}}},
                                                                            {"step", {{"type", "number"}, {"exclusiveMinimum", 0}}}}},
                                                            {"additionalProperties", false}}})}};
  json sweep = {{"type", "object"},
                {"required", {"param"}},
                {"properties",
                 {{"param", {{"type", "string"}}},
                  {"values", number_list(true)},
                  {"geometric",
                   {{"type", "object"},
                    {"required", {"start", "factor", "count"}},
                    {"properties", {{"start", {{"type", "number"}}}, {"factor", {{"type", "number"}}}, {"count", {{"type", "integer"}, {"minimum", 1}}}}},
                    {"additionalProperties", false}}}}},
                {"oneOf", json::array({{{"required", {"values"}}}, {{"required", {"geometric"}}}})},
                {"additionalProperties", false}};
  json fit = {{"type", "object"},
              {"required", {"metric", "axis"}},
              {"properties",
               {{"metric", {{"type", "string"}}},
                {"axis", {{"type", "string"}, {"description", "\"time\" or the sweep parameter"}}},
                {"min_slope", {{"type", "number"}}},
                {"max_slope", {{"type", "number"}}},
                {"criterion", {{"type", "string"}}}}},
              {"additionalProperties", false}};
  return {{"$schema", "https://json-schema.org/draft/2020-12/schema"},
          {"$id", "experiment_config.schema.json"},
          {"title", "closedsys experiment config"},
          {"type", "object"},
          {"required", {"experiment"}},
          {"properties",
           {{"description", {{"type", "string"}}},
            {"experiment", {{"type", "string"}}},
            {"params", {{"type", "object"}}},
            {"sweep", sweep},
            {"times", times},
            {"output", {{"type", "string"}, {"description", "run directory, relative to the output root unless absolute"}}},
            {"seed", {{"type", "integer"}, {"minimum", 0}}},
            {"config_hash", {{"type", "string"}, {"description", "hash echoed by a run; checked against the contents"}}},
            {"fits", {{"type", "array"}, {"items", fit}}}}},
          {"additionalProperties", false},
          {"oneOf", variants}};
}

inline ExperimentConfig parse_config(const std::string& text, const std::string& origin = "config") {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError({origin + ": parse error at " + detail::line_col(text, e.byte > 0 ? e.byte - 1 : 0) + " (byte " +
                       std::to_string(e.byte) + ")"});
  }
  return config_from_json(doc);
}

inline ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError({path.string() + ": cannot open file"});
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

// ---- output locations ------------------------------------------------------------------------

// Relative outputs resolve against $CLOSEDSYS_OUTPUT_ROOT (default "results").
inline fs::path output_root() {
  const char* env = std::getenv(kOutputRootEnv);
  return env && *env ? fs::path(env) : fs::path("results");
}

inline fs::path output_dir(const ExperimentConfig& c) {
  const fs::path sub = c.output.empty() ? fs::path(c.experiment + "-" + c.short_hash()) : fs::path(c.output);
  return sub.is_absolute() ? sub : output_root() / sub;
}

// ---- CSV -------------------------------------------------------------------------------------

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string q = "\"";
  for (char ch : s) q += ch == '"' ? std::string("\"\"") : std::string(1, ch);
  return q + "\"";
}

struct CsvRow {
  std::string config_hash;
  ExperimentRecord rec;
};

inline std::string format_row(const std::string& hash, const ExperimentRecord& r) {
  return csv_field(hash) + "," + csv_field(r.experiment) + "," + csv_field(r.sweep_param) + "," + format_number(r.sweep_value) + "," +
         format_number(r.time) + "," + csv_field(r.metric) + "," + format_number(r.value) + "," + format_number(r.diag_norm_drift) + "," +
         format_number(r.diag_residual);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char ch = line[i];
    if (quoted) {
      if (ch == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (ch == '"') {
        quoted = false;
      } else {
        cur += ch;
      }
    } else if (ch == '"') {
      quoted = true;
    } else if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

inline CsvRow parse_row(const std::string& line) {
  const auto f = split_csv_line(line);
  if (f.size() != 9) throw std::runtime_error("CSV row has " + std::to_string(f.size()) + " fields, expected 9: " + line);
  auto num = [](const std::string& s) { return std::strtod(s.c_str(), nullptr); };
  return {f[0], {f[1], f[2], num(f[3]), num(f[4]), f[5], num(f[6]), num(f[7]), num(f[8])}};
}

inline std::vector<CsvRow> read_csv(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCsvHeader) throw std::runtime_error(path.string() + ": missing or unexpected CSV header");
  std::vector<CsvRow> rows;
  while (std::getline(in, line))
    if (!line.empty()) rows.push_back(parse_row(line));
  return rows;
}

inline void write_csv(const fs::path& path, const std::string& hash, const RecordList& recs) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << kCsvHeader << '\n';
  for (const auto& r : recs) out << format_row(hash, r) << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

// Append-only log of completed sweep points. Each point is a block of CSV rows followed by a
// "#done <index>" line, so a block cut short by an interruption is discarded on resume.
class Journal {
 public:
  Journal(fs::path path, std::string hash) : path_(std::move(path)), hash_(std::move(hash)) {}

  // Completed points and their records; a torn trailing block is dropped and the file truncated.
  std::map<std::size_t, RecordList> load() {
    std::map<std::size_t, RecordList> done;
    if (!fs::exists(path_)) return done;
    std::ifstream in(path_, std::ios::binary);
    std::string line;
    RecordList pending;
    std::uintmax_t good_bytes = 0, pos = 0;
    bool header = true;
    while (std::getline(in, line)) {
      pos += line.size() + 1;
      if (header) {
        if (line != kCsvHeader) break;
        header = false;
        good_bytes = pos;
        continue;
      }
      if (line.rfind("#done ", 0) == 0) {
        if (in.eof()) break;  // no trailing newline: the marker itself may be torn
        done[std::stoul(line.substr(6))] = std::move(pending);
        pending.clear();
        good_bytes = pos;
      } else {
        try {
          CsvRow r = parse_row(line);
          if (r.config_hash != hash_) break;
          pending.push_back(r.rec);
        } catch (const std::exception&) {
          break;
        }
      }
    }
    in.close();
    if (header) good_bytes = 0;
    fs::resize_file(path_, good_bytes);
    return done;
  }

  // The single writer: blocks are appended whole under a lock and flushed.
  void append(std::size_t index, const RecordList& recs) {
    std::lock_guard<std::mutex> lock(mu_);
    const bool fresh = !fs::exists(path_) || fs::file_size(path_) == 0;
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    if (!out) throw std::runtime_error("cannot append to " + path_.string());
    std::string block;
    if (fresh) block += std::string(kCsvHeader) + "\n";
    for (const auto& r : recs) block += format_row(hash_, r) + "\n";
    block += "#done " + std::to_string(index) + "\n";
    out << block;
    out.flush();
  }

  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
  std::string hash_;
  std::mutex mu_;
};

// ---- sweeps ----------------------------------------------------------------------------------

struct SweepOptions {
  unsigned jobs = 0;             // 0 selects the hardware concurrency
  fs::path out_dir;              // empty selects output_dir(config)
  bool resume = true;
  std::function<void(const std::string&)> log;  // progress messages
  // Testing hook: stop after this many newly completed points (0 = run all).
  std::size_t stop_after = 0;
};

struct SweepResult {
  RecordList records;
  std::vector<std::string> failures;  // one message per failed point
  std::size_t points = 0, resumed = 0;
  fs::path dir;
  bool complete = true;
};

inline unsigned default_jobs() { return std::max(1u, std::thread::hardware_concurrency()); }

inline std::vector<std::pair<std::string, double>> sweep_points(const ExperimentConfig& c) {
  if (!c.sweep) return {{"none", 0.0}};
  std::vector<std::pair<std::string, double>> pts;
  for (double v : c.sweep->values) pts.emplace_back(c.sweep->param, v);
  return pts;
}

// Runs one sweep point; the sweep coordinates are stamped onto every record.
inline RecordList run_point(const ExperimentConfig& c, std::size_t index, const fs::path& cache_dir) {
  const auto* spec = experiments::find_experiment(c.experiment);
  if (!spec) throw std::invalid_argument("unknown experiment " + c.experiment);
  const auto pts = sweep_points(c);
  json p = c.params;
  const auto& [name, value] = pts.at(index);
  if (c.sweep) {
    const bool integral = spec->find(name)->kind == experiments::ParamKind::integer;
    p[name] = integral ? json(static_cast<long>(std::llround(value))) : json(value);
  }
  experiments::RunContext ctx;
  ctx.times = c.times;
  ctx.seed = c.seed;
  ctx.cache_dir = cache_dir;
  RecordList recs = spec->run(experiments::Params(p), ctx);
  for (auto& r : recs) {
    r.experiment = c.experiment;
    r.sweep_param = name;
    r.sweep_value = value;
    if (!std::isfinite(r.value)) throw std::runtime_error("non-finite value for metric " + r.metric);
  }
  return recs;
}

inline SweepResult run_sweep(const ExperimentConfig& c, const SweepOptions& opt = {}) {
  SweepResult res;
  res.dir = opt.out_dir.empty() ? output_dir(c) : opt.out_dir;
  fs::create_directories(res.dir);
  const std::string hash = c.short_hash();
  const fs::path cache = output_root() / "tables";
  Journal journal(res.dir / (hash + ".journal.csv"), hash);
  std::map<std::size_t, RecordList> done;
  if (opt.resume)
    done = journal.load();
  else if (fs::exists(journal.path()))
    fs::remove(journal.path());
  res.resumed = done.size();
  const auto pts = sweep_points(c);
  res.points = pts.size();
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (!done.count(i)) todo.push_back(i);
  if (opt.log && res.resumed) opt.log("resuming: " + std::to_string(res.resumed) + " of " + std::to_string(pts.size()) + " points already done");

  std::mutex mu;
  std::map<std::size_t, std::string> messages;
  std::atomic<std::size_t> next{0}, finished{0};
  auto worker = [&] {
    for (;;) {
      if (opt.stop_after && finished.load() >= opt.stop_after) return;
      const std::size_t k = next.fetch_add(1);
      if (k >= todo.size()) return;
      const std::size_t i = todo[k];
      RecordList recs;
      try {
        recs = run_point(c, i, cache);
      } catch (const std::exception& e) {
        // A failed point becomes one marker row; the message goes to the summary.
        recs = {{c.experiment, pts[i].first, pts[i].second, 0.0, kFailedMetric, 1.0, 0.0, 0.0}};
        std::lock_guard<std::mutex> lock(mu);
        messages[i] = e.what();
        if (opt.log) opt.log("point " + std::to_string(i) + " failed: " + e.what());
      }
      if (opt.stop_after && finished.load() >= opt.stop_after) return;
      journal.append(i, recs);
      ++finished;
      {
        std::lock_guard<std::mutex> lock(mu);
        done[i] = std::move(recs);
        if (opt.log) opt.log("point " + std::to_string(i + 1) + "/" + std::to_string(pts.size()) + " done");
      }
    }
  };
  const unsigned jobs = std::max(1u, std::min<unsigned>(opt.jobs ? opt.jobs : default_jobs(), static_cast<unsigned>(std::max<std::size_t>(1, todo.size()))));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (unsigned j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  res.complete = done.size() == pts.size();
  for (std::size_t i = 0; i < pts.size(); ++i) {
    auto it = done.find(i);
    if (it == done.end()) continue;
    for (const auto& r : it->second) {
      if (r.metric == kFailedMetric) {
        std::ostringstream m;
        m.precision(17);
        m << "point " << i << " (" << r.sweep_param << " = " << r.sweep_value << ") failed";
        if (messages.count(i)) m << ": " << messages[i];
        res.failures.push_back(m.str());
      }
      res.records.push_back(r);
    }
  }
  return res;
}

// ---- fits ------------------------------------------------------------------------------------

struct FitResult {
  std::string metric, axis, criterion;
  std::size_t points = 0;
  double slope = 0.0, intercept = 0.0, rms = 0.0;
  std::optional<double> min_slope, max_slope;
  std::string verdict;  // "pass", "fail" or "reported" (no bound given)
  std::string error;

  json to_json() const {
    json j{{"metric", metric}, {"axis", axis},       {"criterion", criterion}, {"points", points},
           {"slope", slope},   {"intercept", intercept}, {"residual_rms", rms}, {"verdict", verdict}};
    if (min_slope) j["min_slope"] = *min_slope;
    if (max_slope) j["max_slope"] = *max_slope;
    if (!error.empty()) j["error"] = error;
    return j;
  }
};

// Samples of `metric` along `axis`: "time", or a sweep parameter. Each axis point takes the maximum
// over the other coordinate, so a sweep axis sees sup_t of the metric.
inline std::vector<std::pair<double, double>> axis_samples(const RecordList& recs, const std::string& metric, const std::string& axis) {
  std::map<double, double> best;
  for (const auto& r : recs) {
    if (r.metric != metric) continue;
    double x;
    if (axis == "time")
      x = r.time;
    else if (r.sweep_param == axis)
      x = r.sweep_value;
    else
      continue;
    auto it = best.find(x);
    if (it == best.end())
      best[x] = r.value;
    else
      it->second = std::max(it->second, r.value);
  }
  return {best.begin(), best.end()};
}

inline FitResult fit_power_law(const RecordList& recs, const std::string& metric, const std::string& axis,
                               std::optional<double> min_slope = {}, std::optional<double> max_slope = {}, const std::string& criterion = "") {
  FitResult f;
  f.metric = metric;
  f.axis = axis;
  f.criterion = criterion;
  f.min_slope = min_slope;
  f.max_slope = max_slope;
  const auto s = axis_samples(recs, metric, axis);
  std::vector<double> xs, ys;
  std::string bad;
  for (const auto& [x, y] : s) {
    if (!(x > 0.0) || !(y > 0.0) || !std::isfinite(x) || !std::isfinite(y)) {
      bad += (bad.empty() ? "" : "; ") + axis + " = " + format_number(x) + " value = " + format_number(y);
      continue;
    }
    xs.push_back(x);
    ys.push_back(y);
  }
  f.points = xs.size();
  if (!bad.empty()) {
    f.verdict = "fail";
    f.error = "nonpositive values (log undefined): " + bad;
    return f;
  }
  if (xs.size() < 3) {
    f.verdict = "fail";
    f.error = "need at least 3 points, have " + std::to_string(xs.size());
    return f;
  }
  const PowerFit p = closedsys::fit_power_law(xs, ys);
  f.slope = p.slope;
  f.intercept = p.intercept;
  f.rms = p.rms;
  if (!min_slope && !max_slope)
    f.verdict = "reported";
  else
    f.verdict = ((!min_slope || f.slope >= *min_slope) && (!max_slope || f.slope <= *max_slope)) ? "pass" : "fail";
  return f;
}

// ---- reports ---------------------------------------------------------------------------------

inline std::string file_sha256(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return sha256_hex(ss.str());
}

inline std::string safe_name(const std::string& s) {
  std::string o;
  for (char ch : s) o += (std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_' || ch == '.' || ch == '=') ? ch : '_';
  return o;
}

struct Report {
  fs::path csv, summary;
  std::vector<fs::path> plots;
  bool all_pass = true;
};

// records.csv + summary.json + plots/<metric>[...].dat (two whitespace-separated columns).
inline Report emit_report(const RecordList& recs, const std::vector<FitResult>& fits, const fs::path& dir, const json& config_echo,
                          const std::string& hash, const std::vector<std::string>& failures = {}) {
  if (recs.empty()) throw std::invalid_argument("emit_report: no records");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("emit_report: cannot create " + dir.string() + ": " + ec.message());
  Report rep;
  rep.csv = dir / "records.csv";
  write_csv(rep.csv, hash, recs);

  std::map<std::string, std::map<std::pair<std::string, double>, std::vector<std::pair<double, double>>>> series;
  std::set<std::string> metrics;
  for (const auto& r : recs) {
    metrics.insert(r.metric);
    series[r.metric][{r.sweep_param, r.sweep_value}].emplace_back(r.time, r.value);
  }
  fs::create_directories(dir / "plots");
  auto write_plot = [&](const fs::path& p, const std::string& xlabel, const std::vector<std::pair<double, double>>& pts,
                        const std::string& ylabel) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << "# " << xlabel << " " << ylabel << '\n';
    for (const auto& [x, y] : pts) out << format_number(x) << ' ' << format_number(y) << '\n';
    rep.plots.push_back(p);
  };
  for (const auto& [metric, by_point] : series) {
    if (metric == kFailedMetric) continue;
    for (const auto& [pt, pts] : by_point) {
      const std::string tag = pt.first == "none" ? "" : "_" + pt.first + "=" + format_number(pt.second);
      write_plot(dir / "plots" / safe_name(metric + tag + ".dat"), "time", pts, metric);
    }
    if (by_point.size() > 1 && by_point.begin()->first.first != "none")
      write_plot(dir / "plots" / safe_name(metric + "_sup_vs_" + by_point.begin()->first.first + ".dat"), by_point.begin()->first.first,
                 axis_samples(recs, metric, by_point.begin()->first.first), "sup_t " + metric);
  }

  json s;
  s["config"] = config_echo;
  s["config_hash"] = hash;
  s["record_count"] = recs.size();
  s["metrics"] = metrics;
  json fl = json::array();
  for (const auto& f : fits) {
    fl.push_back(f.to_json());
    if (f.verdict == "fail") rep.all_pass = false;
  }
  s["fits"] = fl;
  s["failures"] = failures;
  if (!failures.empty()) rep.all_pass = false;
  s["all_pass"] = rep.all_pass;
  json hashes;
  hashes["records.csv"] = file_sha256(rep.csv);
  for (const auto& p : rep.plots) hashes[("plots/" + p.filename().string())] = file_sha256(p);
  s["content_sha256"] = hashes;
  rep.summary = dir / "summary.json";
  std::ofstream out(rep.summary, std::ios::binary | std::ios::trunc);
  out << s.dump(2) << '\n';
  return rep;
}

inline std::vector<FitResult> configured_fits(const ExperimentConfig& c, const RecordList& recs) {
  std::vector<FitResult> out;
  for (const auto& f : c.fits) out.push_back(fit_power_law(recs, f.metric, f.axis, f.min_slope, f.max_slope, f.criterion));
  return out;
}

// Runs a config end to end: sweep, config echo, fits and report.
struct RunOutcome {
  SweepResult sweep;
  std::vector<FitResult> fits;
  Report report;
  bool ok = false;
};

inline RunOutcome execute(const ExperimentConfig& c, const SweepOptions& opt = {}) {
  RunOutcome o;
  o.sweep = run_sweep(c, opt);
  if (!o.sweep.complete) return o;
  {
    std::ofstream out(o.sweep.dir / "config.json", std::ios::binary | std::ios::trunc);
    out << c.to_json().dump(2) << '\n';
  }
  o.fits = configured_fits(c, o.sweep.records);
  o.report = emit_report(o.sweep.records, o.fits, o.sweep.dir, c.to_json(), c.short_hash(), o.sweep.failures);
  o.ok = o.report.all_pass;
  return o;
}

}  // namespace closedsys::harness
