#include "agm/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "agm/ads.hpp"
#include "agm/agm.hpp"
#include "agm/errors.hpp"
#include "agm/methods.hpp"

namespace agm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path workspace_root() {
  const char* env = std::getenv(kWorkspaceEnv);
  return env != nullptr && *env != '\0' ? fs::path(env) : fs::current_path();
}

fs::path resolve(const fs::path& p) {
  return p.is_absolute() ? p : workspace_root() / p;
}

void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write " + tmp.string());
    out << content;
    out.flush();
    if (!out) throw Error("short write on " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("not found: " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

namespace {

json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw SchemaError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

std::string fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

const char* const kSplits[] = {"train", "validation", "test", "ads"};

}  // namespace

std::string to_string(Protocol p) {
  return p == Protocol::leave_one_out ? "leave_one_out" : "single_source";
}

Protocol protocol_from_string(const std::string& s) {
  if (s == "leave_one_out") return Protocol::leave_one_out;
  if (s == "single_source") return Protocol::single_source;
  throw ArgumentError("unknown protocol: " + s);
}

void to_json(json& j, const RunConfig& c) {
  std::vector<std::string> methods;
  for (auto m : c.methods) methods.push_back(agm::to_string(m));
  j = json::object();
  j["methods"] = methods;
  j["protocol"] = to_string(c.protocol);
  j["folds"] = c.folds;
  j["seeds"] = c.seeds;
  j["data_dir"] = c.data_dir;
  j["output_dir"] = c.output_dir;
  j["preset"] = c.preset;
  j["train"] = c.train;
}

void from_json(const json& j, RunConfig& c) {
  static const std::set<std::string> known{"methods", "protocol", "folds", "seeds",
                                           "data_dir", "output_dir", "train", "preset"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown run config key: " + key);
  }
  try {
    if (j.contains("preset")) {
      const auto p = j["preset"].get<std::string>();
      if (p == "full") {
        c.train = full_scale_preset();
      } else if (p != "desk") {
        throw ConfigError("unknown preset: " + p);
      }
      c.preset = p;
    }
    if (j.contains("methods")) {
      c.methods.clear();
      const auto& m = j["methods"];
      if (m.is_string() && m.get<std::string>() == "all") {
        c.methods = all_methods();
      } else {
        for (const auto& name : m) c.methods.push_back(method_from_string(name.get<std::string>()));
      }
    }
    if (j.contains("protocol")) c.protocol = protocol_from_string(j["protocol"].get<std::string>());
    if (j.contains("folds")) c.folds = j["folds"].get<std::vector<std::string>>();
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    if (j.contains("data_dir")) c.data_dir = j["data_dir"].get<std::string>();
    if (j.contains("output_dir")) c.output_dir = j["output_dir"].get<std::string>();
    if (j.contains("train")) agm::from_json(j["train"], c.train);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad run config: ") + e.what());
  } catch (const ArgumentError& e) {
    throw ConfigError(e.what());
  }
  c.train.validate();
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ArgumentError("override must look like key.path=value: " + assignment);
  }
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  json* node = &doc;
  std::stringstream keys(path);
  std::string key;
  std::vector<std::string> parts;
  while (std::getline(keys, key, '.')) parts.push_back(key);
  for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
    node = &(*node)[parts[i]];
  }
  (*node)[parts.back()] = value;
}

void write_corpus(const fs::path& dir, const SyntheticSuite& suite,
                  const json& provenance) {
  fs::create_directories(dir);
  const auto& vocab = suite.tokenizer.vocabulary();
  std::string vocab_text;
  for (const auto& w : vocab.words()) vocab_text += w + '\n';
  write_atomic(dir / "vocab.txt", vocab_text);

  nlohmann::ordered_json manifest;
  manifest["provenance"] = provenance;
  manifest["max_seq_len"] = suite.tokenizer.max_seq_len();
  manifest["vocab_size"] = vocab.size();
  manifest["domains"] = json::array();
  for (const auto& d : suite.domains) {
    nlohmann::ordered_json entry;
    entry["name"] = d.name;
    const std::vector<Example>* parts[] = {&d.splits.train, &d.splits.validation,
                                           &d.splits.test, &d.splits.ads};
    for (int s = 0; s < 4; ++s) {
      std::string lines;
      std::vector<std::string> ids;
      for (const auto& e : *parts[s]) {
        lines += to_jsonl_line(e) + '\n';
        ids.push_back(e.id);
      }
      write_atomic(dir / d.name / (std::string(kSplits[s]) + ".jsonl"), lines);
      entry["splits"][kSplits[s]] = ids;
    }
    manifest["domains"].push_back(entry);
  }
  write_atomic(dir / "manifest.json", manifest.dump(1) + '\n');
}

Corpus load_corpus(const fs::path& dir) {
  if (!fs::exists(dir / "manifest.json")) {
    throw MissingArtifactError("no corpus manifest in " + dir.string());
  }
  json manifest = read_json(dir / "manifest.json");
  Corpus c{Tokenizer(Vocabulary::load(dir / "vocab.txt"),
                     manifest.at("max_seq_len").get<int>()),
           {}, manifest};
  for (const auto& entry : manifest.at("domains")) {
    Domain d;
    d.name = entry.at("name").get<std::string>();
    std::vector<Example>* parts[] = {&d.splits.train, &d.splits.validation,
                                     &d.splits.test, &d.splits.ads};
    for (int s = 0; s < 4; ++s) {
      const fs::path p = dir / d.name / (std::string(kSplits[s]) + ".jsonl");
      if (!fs::exists(p)) throw MissingArtifactError("missing split file " + p.string());
      *parts[s] = ingest_jsonl(p, d.name, c.tokenizer);
    }
    c.domains.push_back(std::move(d));
  }
  return c;
}

fs::path cell_dir(const fs::path& output, Method method, Protocol protocol,
                  const std::string& fold, std::uint64_t seed) {
  const std::string prefix = protocol == Protocol::leave_one_out ? "target-" : "source-";
  return output / agm::to_string(method) / (prefix + fold) /
         ("seed-" + std::to_string(seed));
}

json cell_snapshot(const RunConfig& config, Method method, const std::string& fold,
                   std::uint64_t seed, const Corpus& corpus) {
  json j;
  j["method"] = agm::to_string(method);
  j["protocol"] = to_string(config.protocol);
  j["fold"] = fold;
  j["seed"] = seed;
  j["data_dir"] = config.data_dir;
  j["data_fingerprint"] = fnv1a(corpus.manifest.dump());
  TrainConfig train = config.train;
  if (config.preset == "full" && !is_agm(method)) {
    train.batch_size = 32;
    train.grad_accumulation = 1;
  }
  j["train"] = train;
  return j;
}

namespace {

std::vector<std::string> domain_names(const Corpus& c) {
  std::vector<std::string> out;
  for (const auto& d : c.domains) out.push_back(d.name);
  return out;
}

bool has_cell_files(const fs::path& dir) {
  if (!fs::exists(dir)) return false;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.rfind("cell", 0) == 0 && entry.path().extension() == ".json") return true;
  }
  return false;
}

}  // namespace

std::vector<CellResult> run_snapshot(const json& snapshot, const fs::path& dir,
                                     bool overwrite) {
  if (has_cell_files(dir) && !overwrite) {
    throw ArgumentError("cell already exists: " + dir.string() +
                        " (pass --overwrite to replace it)");
  }
  TrainConfig train;
  Method method;
  Protocol protocol;
  std::string fold, data_dir, fingerprint;
  std::uint64_t seed = 0;
  try {
    agm::from_json(snapshot.at("train"), train);
    method = method_from_string(snapshot.at("method").get<std::string>());
    protocol = protocol_from_string(snapshot.at("protocol").get<std::string>());
    fold = snapshot.at("fold").get<std::string>();
    seed = snapshot.at("seed").get<std::uint64_t>();
    data_dir = snapshot.at("data_dir").get<std::string>();
    fingerprint = snapshot.value("data_fingerprint", std::string());
  } catch (const json::exception& e) {
    throw SchemaError(std::string("malformed config snapshot: ") + e.what());
  }
  train.validate();
  const Corpus corpus = load_corpus(resolve(data_dir));
  if (!fingerprint.empty() && fingerprint != fnv1a(corpus.manifest.dump())) {
    throw SchemaError("corpus in " + data_dir + " differs from the one this snapshot used");
  }
  if (train.model.vocab_size < corpus.tokenizer.vocabulary().size()) {
    throw ConfigError("model vocabulary smaller than the corpus vocabulary");
  }
  if (train.model.max_seq_len < corpus.tokenizer.max_seq_len()) {
    throw ConfigError("model position table shorter than the corpus max_seq_len");
  }

  if (fs::exists(dir)) fs::remove_all(dir);
  fs::create_directories(dir);
  write_atomic(dir / "config.json", snapshot.dump(1) + '\n');

  TransferRun run = [&] {
    if (protocol == Protocol::leave_one_out) {
      return run_cell_detailed(method, train, corpus.domains, fold, seed);
    }
    const std::string sources[] = {fold};
    std::vector<std::string> targets;
    for (const auto& d : corpus.domains) {
      if (d.name != fold) targets.push_back(d.name);
    }
    return run_transfer(method, train, corpus.domains, sources, targets, seed);
  }();

  const fs::path model_tmp = dir / "model.bin.tmp";
  run.trained.model.save(model_tmp);
  fs::rename(model_tmp, dir / "model.bin");
  const fs::path log_tmp = dir / "log.jsonl.tmp";
  run.trained.log.write_jsonl(log_tmp);
  fs::rename(log_tmp, dir / "log.jsonl");
  nlohmann::ordered_json flags = nlohmann::ordered_json::object();
  for (const auto& [token, counts] : run.trained.final_epoch_flags) {
    flags[corpus.tokenizer.token_string(token)] = {{"flagged", counts.flagged},
                                                   {"unflagged", counts.unflagged}};
  }
  write_atomic(dir / "flags.json", flags.dump(1) + '\n');
  for (const auto& cell : run.cells) {
    const std::string name =
        protocol == Protocol::leave_one_out ? "cell.json" : "cell-" + cell.target + ".json";
    write_atomic(dir / name, json(cell).dump(1) + '\n');
  }
  return run.cells;
}

std::vector<CellResult> collect_cells(const fs::path& runs) {
  if (!fs::exists(runs)) throw MissingArtifactError("no run directory " + runs.string());
  std::vector<CellResult> cells;
  std::optional<json> reference;
  fs::path reference_path;
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(runs)) {
    const auto name = entry.path().filename().string();
    if (entry.is_regular_file() && name.rfind("cell", 0) == 0 &&
        entry.path().extension() == ".json") {
      files.push_back(entry.path());
    }
  }
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    cells.push_back(read_json(f).get<CellResult>());
    const fs::path snap = f.parent_path() / "config.json";
    if (!fs::exists(snap)) continue;
    json s = read_json(snap);
    for (const char* k : {"method", "fold", "seed", "protocol"}) s.erase(k);
    // Batch shape is method-dependent under the full preset.
    if (s.contains("train")) {
      s["train"].erase("batch_size");
      s["train"].erase("grad_accumulation");
    }
    if (!reference) {
      reference = s;
      reference_path = snap;
    } else if (s != *reference) {
      std::string diff;
      for (const auto& op : json::diff(*reference, s)) {
        diff += "\n  " + op.value("path", std::string()) + ": " +
                (op.contains("value") ? op["value"].dump() : std::string("(removed)"));
      }
      throw SchemaError("mixed configurations: " + snap.string() + " differs from " +
                        reference_path.string() + diff);
    }
  }
  if (cells.empty()) throw MissingArtifactError("no cell results under " + runs.string());
  return cells;
}

std::vector<Aggregate> aggregate(const std::vector<CellResult>& cells) {
  std::map<std::tuple<std::string, std::string, std::string>, std::vector<CellResult>> groups;
  for (const auto& c : cells) groups[{c.method, c.source, c.target}].push_back(c);
  std::vector<Aggregate> out;
  for (const auto& [key, group] : groups) {
    Aggregate a;
    a.report = make_report(group);
    const auto& [method, source, target] = key;
    a.row.method = method;
    a.row.target = source.empty() ? target : source + "->" + target;
    a.row.source_f1 = mean(a.report.source_f1);
    a.row.target_f1 = mean(a.report.target_f1);
    a.row.delta = mean(a.report.delta);
    a.row.te = mean(a.report.te);
    a.row.ci_low = a.report.delta_ci.first;
    a.row.ci_high = a.report.delta_ci.second;
    a.source_sd = stddev(a.report.source_f1);
    a.target_sd = stddev(a.report.target_f1);
    a.delta_sd = stddev(a.report.delta);
    a.te_sd = stddev(a.report.te);
    out.push_back(std::move(a));
  }
  return out;
}

namespace {

std::string num(double v, int precision = 17) {
  std::ostringstream s;
  s << std::setprecision(precision) << v;
  return s.str();
}

std::string fixed3(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(3) << v;
  return s.str();
}

std::string mean_sd(double m, double sd, std::size_t n) {
  return n > 1 ? fixed3(m) + " ± " + fixed3(sd) : fixed3(m);
}

}  // namespace

std::string summary_csv(const std::vector<Aggregate>& rows) {
  std::string out = "method,target,source_f1,target_f1,delta,te,ci_low,ci_high\n";
  for (const auto& a : rows) {
    const auto& r = a.row;
    out += r.method + ',' + r.target + ',' + num(r.source_f1) + ',' + num(r.target_f1) +
           ',' + num(r.delta) + ',' + num(r.te) + ',' + num(r.ci_low) + ',' +
           num(r.ci_high) + '\n';
  }
  return out;
}

std::vector<SummaryRow> parse_summary_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) ||
      line != "method,target,source_f1,target_f1,delta,te,ci_low,ci_high") {
    throw SchemaError("unexpected summary header");
  }
  std::vector<SummaryRow> rows;
  int n = 1;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream cells(line);
    std::string cell;
    while (std::getline(cells, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw SchemaError("summary line " + std::to_string(n) + ": 8 fields expected");
    try {
      rows.push_back({f[0], f[1], std::stod(f[2]), std::stod(f[3]), std::stod(f[4]),
                      std::stod(f[5]), std::stod(f[6]), std::stod(f[7])});
    } catch (const std::exception&) {
      throw SchemaError("summary line " + std::to_string(n) + ": bad number");
    }
  }
  return rows;
}

std::string gap_table_markdown(const std::vector<Aggregate>& rows,
                               const std::vector<std::string>& methods) {
  std::vector<std::string> columns = methods;
  if (columns.empty()) {
    for (auto m : all_methods()) {
      const auto name = agm::to_string(m);
      for (const auto& a : rows) {
        if (a.row.method == name) {
          columns.push_back(name);
          break;
        }
      }
    }
  }
  std::vector<std::string> targets;
  for (const auto& a : rows) {
    if (std::find(targets.begin(), targets.end(), a.row.target) == targets.end()) {
      targets.push_back(a.row.target);
    }
  }
  std::string out = "| Target |";
  for (const auto& m : columns) out += " " + m + " |";
  out += "\n|---|";
  for (std::size_t i = 0; i < columns.size(); ++i) out += "---|";
  out += '\n';
  for (const auto& t : targets) {
    std::vector<const Aggregate*> cells(columns.size(), nullptr);
    double best = INFINITY;
    for (std::size_t i = 0; i < columns.size(); ++i) {
      for (const auto& a : rows) {
        if (a.row.target == t && a.row.method == columns[i]) cells[i] = &a;
      }
      if (cells[i] != nullptr) best = std::min(best, cells[i]->row.delta);
    }
    out += "| " + t + " |";
    for (const auto* a : cells) {
      if (a == nullptr) {
        out += " – |";
        continue;
      }
      const std::string v = mean_sd(a->row.delta, a->delta_sd, a->report.delta.size());
      out += a->row.delta == best ? " **" + v + "** |" : " " + v + " |";
    }
    out += '\n';
  }
  return out;
}

std::string f1_table_markdown(const std::vector<Aggregate>& rows) {
  std::string out =
      "| Method | Target | Source F1 | Target F1 | Δ | TE | Δ 95% CI |\n"
      "|---|---|---|---|---|---|---|\n";
  for (const auto& a : rows) {
    const auto n = a.report.delta.size();
    out += "| " + a.row.method + " | " + a.row.target + " | " +
           mean_sd(a.row.source_f1, a.source_sd, n) + " | " +
           mean_sd(a.row.target_f1, a.target_sd, n) + " | " +
           mean_sd(a.row.delta, a.delta_sd, n) + " | " + mean_sd(a.row.te, a.te_sd, n) +
           " | [" + fixed3(a.row.ci_low) + ", " + fixed3(a.row.ci_high) + "] |\n";
  }
  return out;
}

HeatmapColumn heatmap_column(const Model& model, const Tokenizer& tokenizer,
                             const Example& example, const std::string& label,
                             double tau_high) {
  HeatmapColumn col;
  col.label = label;
  const auto mask = mask_from_tokens(example.tokens);
  const auto attr = grad_x_input(model, example.tokens, mask, -1, false);
  col.scores = attr.scores;
  col.prediction = model.predict(example.tokens, mask);
  col.flagged.assign(example.tokens.size(), 0);
  const auto eligible = eligible_positions(example.tokens, mask);
  if (!eligible.empty()) {
    for (int p : detect_spurious(attr, tau_high, eligible).flagged) {
      col.flagged[static_cast<std::size_t>(p)] = 1;
    }
  }
  for (int t : example.tokens) col.tokens.push_back(tokenizer.token_string(t));
  return col;
}

namespace {

std::string html_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

double column_scale(const HeatmapColumn& c) {
  double m = 0.0;
  for (double s : c.scores) m = std::max(m, std::abs(s));
  return m > 0.0 ? m : 1.0;
}

bool is_pad(const std::string& token) { return token == "[PAD]"; }

}  // namespace

std::string heatmap_html(const std::vector<HeatmapRow>& rows) {
  std::ostringstream out;
  out << "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>Token attribution"
         "</title>\n<style>body{font-family:sans-serif}td{vertical-align:top;padding:6px;"
         "border-bottom:1px solid #ddd}.tok{display:inline-block;margin:1px;padding:1px 3px;"
         "border-radius:3px}.flag{outline:2px solid #000}</style></head><body>\n"
      << "<p>Red pushes toward the predicted label's loss, blue away; outlined tokens "
         "are flagged by detection.</p>\n<table>\n<tr><th>example</th>";
  if (!rows.empty()) {
    for (const auto& c : rows.front().columns) out << "<th>" << html_escape(c.label) << "</th>";
  }
  out << "</tr>\n";
  for (const auto& r : rows) {
    out << "<tr><td>" << html_escape(r.id) << "<br>label " << r.label << "</td>";
    for (const auto& c : r.columns) {
      const double scale = column_scale(c);
      out << "<td>pred " << c.prediction << "<br>";
      for (std::size_t i = 0; i < c.tokens.size(); ++i) {
        out << "<span class=\"tok" << (c.flagged[i] ? " flag" : "") << "\"";
        if (!is_pad(c.tokens[i]) && c.scores[i] != 0.0) {
          const double a = std::min(1.0, std::abs(c.scores[i]) / scale);
          out << " style=\"background:rgba(" << (c.scores[i] > 0 ? "220,40,40," : "40,80,220,")
              << std::setprecision(3) << a << ")\"";
        }
        out << " title=\"" << std::setprecision(6) << c.scores[i] << "\">"
            << html_escape(c.tokens[i]) << "</span>";
      }
      out << "</td>";
    }
    out << "</tr>\n";
  }
  out << "</table></body></html>\n";
  return out.str();
}

std::string heatmap_ansi(const std::vector<HeatmapRow>& rows) {
  std::ostringstream out;
  for (const auto& r : rows) {
    out << r.id << " (label " << r.label << ")\n";
    for (const auto& c : r.columns) {
      const double scale = column_scale(c);
      out << "  " << c.label << " pred " << c.prediction << ": ";
      for (std::size_t i = 0; i < c.tokens.size(); ++i) {
        const std::string tok = c.flagged[i] ? "[" + c.tokens[i] + "]" : c.tokens[i];
        if (is_pad(c.tokens[i]) || c.scores[i] == 0.0) {
          out << tok << ' ';
          continue;
        }
        const int level = static_cast<int>(std::lround(155.0 * std::abs(c.scores[i]) / scale));
        const int r8 = c.scores[i] > 0 ? 255 : 255 - level;
        const int b8 = c.scores[i] > 0 ? 255 - level : 255;
        const int g8 = 255 - level;
        out << "\x1b[48;2;" << r8 << ';' << g8 << ';' << b8 << "m\x1b[30m" << tok
            << "\x1b[0m ";
      }
      out << '\n';
    }
  }
  return out.str();
}

namespace {

// -- subcommands -------------------------------------------------------------

struct Options {
  // generate-data
  std::string out_dir = "data";
  SuiteOptions suite;
  std::vector<std::string> jsonl_inputs;
  // train
  std::string config_file;
  std::string snapshot_file;
  std::vector<std::string> overrides;
  std::string methods, folds, seeds, protocol, data_dir, output_dir;
  bool overwrite = false;
  // report
  std::string runs_dir = "runs";
  std::string report_dir;
  // heatmap
  std::vector<std::string> checkpoints;
  std::vector<std::string> labels;
  std::string vocab_file;
  std::string input_file;
  int limit = 20;
  std::string html_out = "heatmap.html";
  bool ansi = false;
  // ads
  std::string ads_method = "erm";
  std::uint64_t ads_seed = 42;
  int ig_steps = kDefaultIGSteps;
};

int cmd_generate(const Options& o, std::ostream& out) {
  const fs::path dir = resolve(o.out_dir);
  json provenance = {{"seed", o.suite.seed},
                     {"divisor", o.suite.divisor},
                     {"vocab_capacity", o.suite.vocab_capacity},
                     {"max_seq_len", o.suite.max_seq_len}};
  SplitSpec split = scaled_split_spec(o.suite.divisor);
  if (o.jsonl_inputs.empty()) {
    provenance["rho"] = o.suite.rho;
    const auto specs = default_suite(o.suite.rho);
    const auto suite = generate_suite(specs, split, o.suite.seed, o.suite.vocab_capacity,
                                      o.suite.max_seq_len);
    write_corpus(dir, suite, provenance);
    out << "wrote " << suite.domains.size() << " synthetic domains to " << dir.string() << '\n';
    return kExitOk;
  }
  // External corpora: name=path pairs. Text is read twice, once to build the
  // vocabulary and once to tokenize with it.
  std::vector<std::pair<std::string, fs::path>> inputs;
  std::vector<std::string> texts;
  for (const auto& spec : o.jsonl_inputs) {
    const auto eq = spec.find('=');
    if (eq == std::string::npos) throw ArgumentError("--jsonl expects name=path: " + spec);
    inputs.emplace_back(spec.substr(0, eq), resolve(spec.substr(eq + 1)));
    const Tokenizer probe(Vocabulary(), o.suite.max_seq_len);
    std::ifstream in(inputs.back().second);
    if (!in) throw MissingArtifactError("not found: " + inputs.back().second.string());
    for (const auto& e : ingest_jsonl(inputs.back().second, inputs.back().first, probe)) {
      texts.push_back(e.text);
    }
  }
  SyntheticSuite suite{Tokenizer(Vocabulary::build({}, texts, o.suite.vocab_capacity),
                                 o.suite.max_seq_len),
                       {}};
  provenance["jsonl"] = o.jsonl_inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto examples = ingest_jsonl(inputs[i].second, inputs[i].first, suite.tokenizer);
    SplitSpec s = split;
    const int total = static_cast<int>(examples.size());
    if (s.total() > total) {
      // Keep the default proportions when the file is smaller than the spec.
      const double f = static_cast<double>(total) / s.total();
      s.ads_heldout = static_cast<int>(s.ads_heldout * f);
      s.validation = static_cast<int>(s.validation * f);
      s.test = static_cast<int>(s.test * f);
      s.train = total - s.ads_heldout - s.validation - s.test;
    }
    suite.domains.push_back(
        {inputs[i].first, make_splits(examples, s, o.suite.seed + 7919 * (i + 1))});
  }
  write_corpus(dir, suite, provenance);
  out << "wrote " << suite.domains.size() << " ingested domains to " << dir.string() << '\n';
  return kExitOk;
}

RunConfig run_config_from(const Options& o) {
  json doc = json::object();
  if (!o.config_file.empty()) doc = read_json(resolve(o.config_file));
  for (const auto& a : o.overrides) apply_override(doc, a);
  if (!o.methods.empty()) {
    doc["methods"] = o.methods == "all" ? json("all") : json(split_list(o.methods));
  }
  if (!o.folds.empty()) doc["folds"] = split_list(o.folds);
  if (!o.seeds.empty()) {
    std::vector<std::uint64_t> seeds;
    for (const auto& s : split_list(o.seeds)) seeds.push_back(std::stoull(s));
    doc["seeds"] = seeds;
  }
  if (!o.protocol.empty()) doc["protocol"] = o.protocol;
  if (!o.data_dir.empty()) doc["data_dir"] = o.data_dir;
  if (!o.output_dir.empty()) doc["output_dir"] = o.output_dir;
  RunConfig c;
  from_json(doc, c);
  return c;
}

int cmd_train(const Options& o, std::ostream& out) {
  if (!o.snapshot_file.empty()) {
    const fs::path snap = resolve(o.snapshot_file);
    const json s = read_json(snap);
    const fs::path dir = o.output_dir.empty() ? snap.parent_path() : resolve(o.output_dir);
    for (const auto& c : run_snapshot(s, dir, o.overwrite)) {
      out << json(c).dump() << '\n';
    }
    return kExitOk;
  }
  const RunConfig config = run_config_from(o);
  const Corpus corpus = load_corpus(resolve(config.data_dir));
  const auto folds = config.folds.empty() ? domain_names(corpus) : config.folds;
  const fs::path output = resolve(config.output_dir);
  int done = 0;
  for (auto method : config.methods) {
    for (const auto& fold : folds) {
      for (auto seed : config.seeds) {
        const fs::path dir = cell_dir(output, method, config.protocol, fold, seed);
        const json snap = cell_snapshot(config, method, fold, seed, corpus);
        for (const auto& c : run_snapshot(snap, dir, o.overwrite)) {
          out << agm::to_string(method) << ' ' << (c.source.empty() ? "" : c.source + "->")
              << c.target << " seed " << seed << ": source " << fixed3(c.source_f1)
              << " target " << fixed3(c.target_f1) << " delta " << fixed3(c.delta) << '\n';
        }
        ++done;
      }
    }
  }
  out << done << " cells written under " << output.string() << '\n';
  return kExitOk;
}

int cmd_report(const Options& o, std::ostream& out, std::ostream& err) {
  const fs::path runs = resolve(o.runs_dir);
  const auto rows = aggregate(collect_cells(runs));
  for (const auto& a : rows) {
    if (a.report.delta.size() == 1) {
      err << "warning: " << a.row.method << " on " << a.row.target
          << " has a single seed; std omitted\n";
    }
  }
  const fs::path dir = o.report_dir.empty() ? runs : resolve(o.report_dir);
  write_atomic(dir / "summary.csv", summary_csv(rows));
  write_atomic(dir / "gap_table.md", gap_table_markdown(rows));
  std::vector<std::string> ablation;
  for (auto m : {Method::agm_full, Method::agm_mask_only, Method::agm_no_mask,
                 Method::agm_random}) {
    ablation.push_back(agm::to_string(m));
  }
  write_atomic(dir / "ablation_table.md", gap_table_markdown(rows, ablation));
  write_atomic(dir / "f1_table.md", f1_table_markdown(rows));
  out << gap_table_markdown(rows);
  return kExitOk;
}

int cmd_heatmap(const Options& o, std::ostream& out) {
  if (o.checkpoints.empty() || o.checkpoints.size() > 2) {
    throw ArgumentError("heatmap takes one or two --checkpoint paths");
  }
  std::vector<Model> models;
  for (const auto& p : o.checkpoints) models.push_back(Model::load(resolve(p)));
  const Vocabulary vocab = Vocabulary::load(resolve(o.vocab_file));
  for (const auto& m : models) {
    if (m.config().vocab_size < vocab.size()) {
      throw SchemaError("checkpoint vocabulary (" + std::to_string(m.config().vocab_size) +
                        ") is smaller than " + o.vocab_file + " (" +
                        std::to_string(vocab.size()) + ")");
    }
  }
  const Tokenizer tokenizer(vocab, models.front().config().max_seq_len);
  auto examples = ingest_jsonl(resolve(o.input_file), "input", tokenizer);
  if (o.limit > 0 && examples.size() > static_cast<std::size_t>(o.limit)) {
    examples.resize(static_cast<std::size_t>(o.limit));
  }
  std::vector<HeatmapRow> rows;
  for (const auto& e : examples) {
    HeatmapRow r{e.id, e.label, {}};
    for (std::size_t i = 0; i < models.size(); ++i) {
      const std::string label =
          i < o.labels.size() ? o.labels[i] : (models.size() == 2 ? (i == 0 ? "vanilla" : "agm")
                                                                  : "model");
      r.columns.push_back(heatmap_column(models[i], tokenizer, e, label));
    }
    rows.push_back(std::move(r));
  }
  if (o.ansi) {
    out << heatmap_ansi(rows);
  } else {
    const fs::path target = resolve(o.html_out);
    write_atomic(target, heatmap_html(rows));
    out << "wrote " << rows.size() << " examples to " << target.string() << '\n';
  }
  return kExitOk;
}

int cmd_ads(const Options& o, std::ostream& out) {
  const Corpus corpus = load_corpus(resolve(o.data_dir.empty() ? "data" : o.data_dir));
  const fs::path runs = resolve(o.runs_dir);
  const Method method = method_from_string(o.ads_method);
  std::map<std::string, Model> owned;
  std::vector<std::string> missing;
  std::vector<TransferPair> pairs;
  for (const auto& d : corpus.domains) {
    const fs::path dir = cell_dir(runs, method, Protocol::single_source, d.name, o.ads_seed);
    if (!fs::exists(dir / "model.bin")) {
      missing.push_back((dir / "model.bin").string());
      continue;
    }
    owned.emplace(d.name, Model::load(dir / "model.bin"));
    for (const auto& t : corpus.domains) {
      if (t.name == d.name) continue;
      const fs::path cell = dir / ("cell-" + t.name + ".json");
      if (!fs::exists(cell)) {
        missing.push_back(cell.string());
        continue;
      }
      pairs.push_back({d.name, t.name, read_json(cell).get<CellResult>().delta});
    }
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& m : missing) list += "\n  " + m;
    throw MissingArtifactError("single-source cells missing (train with --protocol "
                               "single_source):" + list);
  }
  std::map<std::string, const Model*> models;
  for (const auto& [name, m] : owned) models[name] = &m;
  std::map<std::string, std::vector<Example>> corpora;
  for (const auto& d : corpus.domains) corpora[d.name] = d.splits.ads;
  const auto reports = ads_study(models, corpora, pairs, ADSOptions{o.ig_steps});
  const fs::path dir = o.report_dir.empty() ? runs : resolve(o.report_dir);
  write_atomic(dir / "ads.csv", ads_csv(reports));
  const json corr = ads_correlation_json(reports);
  write_atomic(dir / "ads_correlation.json", corr.dump(1) + '\n');
  out << corr.dump() << '\n';
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Attribution-guided masking experiments"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("generate-data", "Write the synthetic suite (or ingest JSONL)");
  gen->add_option("--out", o.out_dir, "Corpus directory");
  gen->add_option("--seed", o.suite.seed, "Generation seed");
  gen->add_option("--rho", o.suite.rho, "Spurious strength of every domain");
  gen->add_option("--divisor", o.suite.divisor, "Split sizes are 10000/2000/3000/500 divided by this");
  gen->add_option("--vocab-capacity", o.suite.vocab_capacity);
  gen->add_option("--max-seq-len", o.suite.max_seq_len);
  gen->add_option("--jsonl", o.jsonl_inputs, "name=path of an external corpus (repeatable)");

  auto* train = app.add_subcommand("train", "Train a grid of cells");
  train->add_option("--config", o.config_file, "Run config (JSON)");
  train->add_option("--snapshot", o.snapshot_file, "Re-run one cell from its config.json");
  train->add_option("--set", o.overrides, "key.path=value override (repeatable)");
  train->add_option("--methods", o.methods, "Comma list or 'all'");
  train->add_option("--folds", o.folds, "Comma list of targets (or sources)");
  train->add_option("--seeds", o.seeds, "Comma list");
  train->add_option("--protocol", o.protocol, "leave_one_out or single_source");
  train->add_option("--data", o.data_dir);
  train->add_option("--out", o.output_dir);
  train->add_flag("--overwrite", o.overwrite, "Replace existing cells");

  auto* report = app.add_subcommand("report", "Summarize cell results");
  report->add_option("--runs", o.runs_dir);
  report->add_option("--out", o.report_dir, "Output directory (default: the runs directory)");

  auto* heat = app.add_subcommand("heatmap", "Token attribution heatmaps");
  heat->add_option("--checkpoint", o.checkpoints, "One or two model.bin files")->required();
  heat->add_option("--label", o.labels, "Column label per checkpoint");
  heat->add_option("--vocab", o.vocab_file)->required();
  heat->add_option("--input", o.input_file, "JSONL examples")->required();
  heat->add_option("--limit", o.limit);
  heat->add_option("--out", o.html_out, "HTML report path");
  heat->add_flag("--ansi", o.ansi, "Print to the terminal instead");

  auto* ads = app.add_subcommand("ads", "Attribution drift study over single-source models");
  ads->add_option("--runs", o.runs_dir);
  ads->add_option("--data", o.data_dir);
  ads->add_option("--method", o.ads_method);
  ads->add_option("--seed", o.ads_seed);
  ads->add_option("--ig-steps", o.ig_steps);
  ads->add_option("--out", o.report_dir);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_generate(o, out);
    if (train->parsed()) return cmd_train(o, out);
    if (report->parsed()) return cmd_report(o, out, err);
    if (heat->parsed()) return cmd_heatmap(o, out);
    if (ads->parsed()) return cmd_ads(o, out);
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    if (!e.diagnostics().empty()) err << e.diagnostics() << '\n';
    return kExitNumeric;
  } catch (const MissingArtifactError& e) {
    err << "missing artifact: " << e.what() << '\n';
    return kExitMissing;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  }
  return kExitUsage;
}

}  // namespace agm::cli
