#pragma once

#include "lorentz/errors.hpp"
#include "lorentz/linalg.hpp"
#include "lorentz/markov.hpp"
#include "lorentz/microsim.hpp"

#include <json.hpp>

#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

namespace lorentz {

inline constexpr int schema_version = 1;

/// Shortest decimal that reads back to the same double.
inline std::string format_number(double x) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

inline std::string format_number(long long x) { return std::to_string(x); }
inline std::string format_number(std::size_t x) { return std::to_string(x); }

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

// ---------------------------------------------------------------------------
// Configuration: `key = value` lines, `#` comments, `[section]` lines prefix the
// keys that follow with `section.`; dotted keys may also be written out in full.

class Config {
 public:
  static Config parse(const std::string& text, const std::string& origin = "<string>") {
    Config c;
    c.text_ = text;
    std::istringstream is(text);
    std::string line, section;
    int no = 0;
    while (std::getline(is, line)) {
      ++no;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line.erase(hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto where = origin + ":" + std::to_string(no);
      if (line.front() == '[') {
        if (line.back() != ']') throw config_error("ConfigSyntax", where + ": unterminated section");
        section = trim(line.substr(1, line.size() - 2));
        continue;
      }
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw config_error("ConfigSyntax", where + ": expected key = value");
      std::string key = trim(line.substr(0, eq));
      if (key.empty()) throw config_error("ConfigSyntax", where + ": empty key");
      if (!section.empty()) key = section + "." + key;
      if (c.values_.count(key)) throw config_error("DuplicateKey", where + ": " + key);
      c.values_[key] = trim(line.substr(eq + 1));
    }
    return c;
  }

  static Config load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw config_error("ConfigFile", "cannot open " + path);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path);
  }

  const std::string& text() const { return text_; }
  const std::map<std::string, std::string>& values() const { return values_; }

  bool has(const std::string& key) const {
    used_.insert(key);
    return values_.count(key) > 0;
  }

  std::string str(const std::string& key) const {
    used_.insert(key);
    const auto it = values_.find(key);
    if (it == values_.end()) throw config_error("MissingKey", key);
    return it->second;
  }
  std::string str(const std::string& key, const std::string& dflt) const { return has(key) ? str(key) : dflt; }

  double num(const std::string& key) const { return to_double(key, str(key)); }
  double num(const std::string& key, double dflt) const { return has(key) ? num(key) : dflt; }

  long long integer(const std::string& key) const {
    const auto s = str(key);
    long long v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) {
      // allow 1e5 style counts
      const double d = to_double(key, s);
      if (d != std::floor(d) || std::abs(d) > 9e15) throw config_error("BadValue", key + ": not an integer: " + s);
      return static_cast<long long>(d);
    }
    return v;
  }
  long long integer(const std::string& key, long long dflt) const { return has(key) ? integer(key) : dflt; }

  std::size_t count(const std::string& key, std::size_t dflt) const {
    const long long v = integer(key, static_cast<long long>(dflt));
    if (v < 0) throw config_error("BadValue", key + " must be nonnegative");
    return static_cast<std::size_t>(v);
  }

  bool flag(const std::string& key, bool dflt) const {
    if (!has(key)) return dflt;
    const auto s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw config_error("BadValue", key + ": expected true or false, got " + s);
  }

  /// Whitespace- or comma-separated numbers.
  std::vector<double> list(const std::string& key) const {
    std::string s = str(key);
    for (auto& ch : s)
      if (ch == ',') ch = ' ';
    std::istringstream is(s);
    std::vector<double> out;
    std::string tok;
    while (is >> tok) out.push_back(to_double(key, tok));
    return out;
  }
  std::vector<double> list(const std::string& key, std::vector<double> dflt) const {
    return has(key) ? list(key) : dflt;
  }

  std::vector<std::string> words(const std::string& key, std::vector<std::string> dflt = {}) const {
    if (!has(key)) return dflt;
    std::string s = str(key);
    for (auto& ch : s)
      if (ch == ',') ch = ' ';
    std::istringstream is(s);
    std::vector<std::string> out;
    std::string tok;
    while (is >> tok) out.push_back(tok);
    return out;
  }

  template <int D> Vec<D> vec(const std::string& key) const {
    const auto v = list(key);
    if (v.size() != static_cast<std::size_t>(D))
      throw config_error("BadValue", key + ": expected " + std::to_string(D) + " numbers");
    Vec<D> out;
    for (int i = 0; i < D; ++i) out[i] = v[i];
    return out;
  }
  template <int D> Vec<D> vec(const std::string& key, const Vec<D>& dflt) const { return has(key) ? vec<D>(key) : dflt; }

  /// Rows separated by `;`.
  template <int D> Mat<D> mat(const std::string& key, const Mat<D>& dflt) const {
    if (!has(key)) return dflt;
    const auto s = str(key);
    Mat<D> m;
    std::istringstream rows(s);
    std::string row;
    int r = 0;
    while (std::getline(rows, row, ';')) {
      if (r >= D) throw config_error("BadValue", key + ": too many rows");
      std::istringstream is(row);
      std::string tok;
      int c = 0;
      while (is >> tok) {
        if (c >= D) throw config_error("BadValue", key + ": too many columns");
        m(r, c++) = to_double(key, tok);
      }
      if (c != D) throw config_error("BadValue", key + ": row " + std::to_string(r) + " needs " + std::to_string(D) + " entries");
      ++r;
    }
    if (r != D) throw config_error("BadValue", key + ": expected " + std::to_string(D) + " rows");
    return m;
  }

  /// Keys never queried; a typo in a key is an error, not a silent default.
  std::vector<std::string> unused() const {
    std::vector<std::string> out;
    for (const auto& [k, v] : values_)
      if (!used_.count(k)) out.push_back(k);
    return out;
  }

  void require_all_used() const {
    const auto u = unused();
    if (u.empty()) return;
    std::string msg;
    for (const auto& k : u) msg += (msg.empty() ? "" : ", ") + k;
    throw config_error("UnknownKey", msg);
  }

 private:
  static double to_double(const std::string& key, const std::string& s) {
    double v = 0.0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size()) throw config_error("BadValue", key + ": not a number: " + s);
    return v;
  }

  std::string text_;
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
};

// ---------------------------------------------------------------------------
// CSV with a schema line `# lorentz.<kind> schema_version=N` before the header.

inline std::string schema_line(const std::string& kind) {
  return "# lorentz." + kind + " schema_version=" + std::to_string(schema_version);
}

inline std::vector<std::string> indexed(const std::string& stem, int d) {
  std::vector<std::string> out;
  for (int i = 1; i <= d; ++i) out.push_back(stem + "_" + std::to_string(i));
  return out;
}

class CsvWriter {
 public:
  CsvWriter(std::ostream& os, const std::string& kind, const std::vector<std::string>& columns)
      : os_(os), n_(columns.size()) {
    os_ << schema_line(kind) << '\n';
    for (std::size_t i = 0; i < columns.size(); ++i) os_ << (i ? "," : "") << columns[i];
    os_ << '\n';
  }

  void row(const std::vector<std::string>& cells) {
    if (cells.size() != n_) throw std::logic_error("csv row has the wrong width");
    for (std::size_t i = 0; i < cells.size(); ++i) os_ << (i ? "," : "") << cells[i];
    os_ << '\n';
  }

 private:
  std::ostream& os_;
  std::size_t n_;
};

template <class V> void append(std::vector<std::string>& cells, const V& v) {
  for (int i = 0; i < v.size(); ++i) cells.push_back(format_number(v[i]));
}

template <int D> std::vector<std::string> chain_dump_columns() {
  std::vector<std::string> c{"k", "tau"};
  for (const char* stem : {"m", "w", "v"})
    for (const auto& s : indexed(stem, D)) c.push_back(s);
  c.push_back("traj");
  return c;
}

/// Micro collision chains: one row per collision, k counted from 1, tau the
/// microscopic flight time ending in collision k.
template <int D>
void write_chain_dump(std::ostream& os, const std::vector<CollisionChain<D>>& chains, std::size_t first_traj = 0) {
  CsvWriter w(os, "chain_dump", chain_dump_columns<D>());
  for (std::size_t t = 0; t < chains.size(); ++t) {
    std::size_t k = 0;
    for (const auto& r : chains[t].records) {
      std::vector<std::string> cells{format_number(++k), format_number(r.tau)};
      append(cells, r.m);
      append(cells, r.w);
      append(cells, r.v);
      cells.push_back(format_number(first_traj + t));
      w.row(cells);
    }
  }
}

template <int D> std::vector<std::string> segment_columns() {
  std::vector<std::string> c{"k", "T"};
  for (const auto& s : indexed("S", D)) c.push_back(s);
  c.push_back("traj");
  return c;
}

/// Limiting segment chains: row k holds S_k and the collision time T_k = |S_1| + ... + |S_k|.
template <int D> void write_segments(std::ostream& os, const std::vector<SegmentChain<D>>& chains) {
  CsvWriter w(os, "segment_chain", segment_columns<D>());
  for (std::size_t t = 0; t < chains.size(); ++t)
    for (std::size_t k = 0; k < chains[t].size(); ++k) {
      std::vector<std::string> cells{format_number(k + 1), format_number(chains[t].T[k])};
      append(cells, chains[t].segment(k));
      cells.push_back(format_number(t));
      w.row(cells);
    }
}

template <int D> std::vector<std::string> path_columns(bool extended) {
  std::vector<std::string> c{"t"};
  for (const auto& s : indexed("Q", D)) c.push_back(s);
  for (const auto& s : indexed("V", D)) c.push_back(s);
  if (extended) {
    c.push_back("xi");
    for (const auto& s : indexed("Vplus", D)) c.push_back(s);
  }
  c.push_back("path");
  return c;
}

template <int D> struct PathRow {
  std::size_t path = 0;
  double t = 0.0;
  ExtendedState<D> state;
};

template <int D> void write_path_dump(std::ostream& os, const std::vector<PathRow<D>>& rows, bool extended) {
  CsvWriter w(os, "path_dump", path_columns<D>(extended));
  for (const auto& r : rows) {
    std::vector<std::string> cells{format_number(r.t)};
    append(cells, r.state.Q);
    append(cells, r.state.V);
    if (extended) {
      cells.push_back(format_number(r.state.xi));
      append(cells, r.state.V_plus);
    }
    cells.push_back(format_number(r.path));
    w.row(cells);
  }
}

struct CsvTable {
  std::string kind;
  int version = 0;
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(const std::string& name) const {
    for (std::size_t i = 0; i < columns.size(); ++i)
      if (columns[i] == name) return i;
    throw Error(ErrorKind::Validation, "SchemaMismatch", "no column " + name);
  }
  double number(std::size_t row, const std::string& name) const { return std::stod(rows.at(row).at(column(name))); }
};

inline std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') out.push_back("");
  return out;
}

/// Reads a schema-tagged CSV; the kind must match when `expected_kind` is given.
inline CsvTable read_csv(std::istream& is, const std::string& expected_kind = "") {
  auto mismatch = [](const std::string& m) { return Error(ErrorKind::Validation, "SchemaMismatch", m); };
  std::string line;
  if (!std::getline(is, line)) throw mismatch("empty file");
  CsvTable t;
  {
    std::istringstream h(line);
    std::string hash, tag, ver;
    h >> hash >> tag >> ver;
    if (hash != "#" || tag.rfind("lorentz.", 0) != 0 || ver.rfind("schema_version=", 0) != 0)
      throw mismatch("missing schema line");
    t.kind = tag.substr(8);
    t.version = std::stoi(ver.substr(15));
  }
  if (!expected_kind.empty() && t.kind != expected_kind) throw mismatch("expected " + expected_kind + ", got " + t.kind);
  if (t.version != schema_version) throw mismatch("unsupported schema version " + std::to_string(t.version));
  if (!std::getline(is, line)) throw mismatch("missing header");
  t.columns = split_csv(trim(line));
  while (std::getline(is, line)) {
    line = trim(line);
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != t.columns.size()) throw mismatch("row width differs from header");
    t.rows.push_back(std::move(cells));
  }
  return t;
}

inline CsvTable read_csv(const std::string& path, const std::string& expected_kind = "") {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw config_error("InputFile", "cannot open " + path);
  return read_csv(is, expected_kind);
}

// ---------------------------------------------------------------------------
// JSON lines: each record carries its schema tag.

inline nlohmann::json tagged(const std::string& kind, nlohmann::json j) {
  j["schema"] = "lorentz." + kind;
  j["schema_version"] = schema_version;
  return j;
}

inline void write_jsonl(std::ostream& os, const std::vector<nlohmann::json>& records) {
  for (const auto& r : records) os << r.dump() << '\n';
}

inline std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw config_error("InputFile", "cannot open " + path);
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    try {
      out.push_back(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::Validation, "SchemaMismatch", path + ": " + e.what());
    }
    if (!out.back().contains("schema_version") || out.back()["schema_version"] != schema_version)
      throw Error(ErrorKind::Validation, "SchemaMismatch", path + ": record without a supported schema_version");
  }
  if (out.empty()) throw Error(ErrorKind::Validation, "SchemaMismatch", path + ": no records");
  return out;
}

/// Summary table of report records (validation reports and residual records).
inline void write_summary(std::ostream& os, const std::vector<nlohmann::json>& records) {
  CsvWriter w(os, "summary", {"source", "name", "statistic", "value", "threshold", "p_value", "pass"});
  auto num = [](const nlohmann::json& j, const char* k) {
    return j.contains(k) && j[k].is_number() ? format_number(j[k].get<double>()) : std::string();
  };
  for (const auto& r : records) {
    const std::string src = r.value("schema", "");
    std::string name = r.value("name", "");
    if (name.empty() && r.contains("t")) name = "t=" + num(r, "t");
    const std::string stat = r.value("statistic", r.value("kind", ""));
    const std::string thr = r.contains("tolerance") ? num(r, "tolerance") : num(r, "threshold");
    w.row({src, name, stat, num(r, "value"), thr, num(r, "p_value"), r.value("pass", false) ? "true" : "false"});
  }
}

}  // namespace lorentz
