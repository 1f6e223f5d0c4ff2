#pragma once

// ActivationMatrix files: CSV (header row of unit ids, first column stimulus
// id) or "ADVMAT01" binary (u64 header length, JSON header, row-major f64).
// Vertex geometry CSV: vertex_id,x_mm,y_mm[,hemisphere].

#include <advrsa/io.hpp>
#include <advrsa/rsa.hpp>

#include <json.hpp>

#include <filesystem>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

namespace advrsa {

inline constexpr std::string_view matrix_magic = "ADVMAT01";

/// CSV text; an optional leading '#' comment line carries provenance.
inline std::string encode_matrix_csv(const ActivationMatrix& m, const std::string& comment = {}) {
  std::ostringstream out;
  if (!comment.empty()) out << "# " << comment << '\n';
  out << "stimulus";
  for (const auto& u : m.unit_ids) out << ',' << csv_field(u);
  out << '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) {
    out << csv_field(m.stimulus_ids[r]);
    for (std::size_t c = 0; c < m.cols(); ++c) out << ',' << format_double(m.at(r, c));
    out << '\n';
  }
  return out.str();
}

inline ActivationMatrix read_matrix_csv(const std::filesystem::path& path, bool allow_nan = false) {
  const auto lines = read_csv_lines(path);
  const std::string name = path.string();
  if (lines.empty()) throw FormatError(name + ": empty matrix file");
  ActivationMatrix m;
  m.source = path.stem().string();
  auto header = split_csv_line(lines[0].second);
  if (header.size() < 2) throw FormatError(name + ":" + std::to_string(lines[0].first) + ": header needs at least one unit column");
  m.unit_ids.assign(header.begin() + 1, header.end());
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto& [lineno, text] = lines[i];
    const auto fields = split_csv_line(text);
    const std::string where = name + ":" + std::to_string(lineno);
    if (fields.size() != header.size()) {
      throw FormatError(where + ": expected " + std::to_string(header.size()) + " fields, found " +
                        std::to_string(fields.size()));
    }
    m.stimulus_ids.push_back(fields[0]);
    for (std::size_t c = 1; c < fields.size(); ++c) {
      const double v = parse_double(fields[c], where + " column " + std::to_string(c + 1));
      if (std::isnan(v) && !allow_nan) {
        throw FormatError(where + ": NaN at row " + std::to_string(i) + " (stimulus '" + fields[0] + "'), column " +
                          std::to_string(c) + " (unit '" + m.unit_ids[c - 1] + "')");
      }
      m.values.push_back(v);
    }
  }
  return m;
}

inline std::string encode_matrix_binary(const ActivationMatrix& m, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json header{{"format_version", 1},
                        {"toolkit_version", std::string(toolkit_version)},
                        {"source", m.source},
                        {"rows", m.rows()},
                        {"cols", m.cols()},
                        {"stimulus_ids", m.stimulus_ids},
                        {"unit_ids", m.unit_ids},
                        {"meta", extra}};
  const std::string text = header.dump();
  ByteWriter w;
  w.bytes(matrix_magic);
  w.u64(text.size());
  w.bytes(text);
  w.f64s(m.values);
  return w.str();
}

inline ActivationMatrix decode_matrix_binary(std::string bytes, const std::string& name) {
  ByteReader r(std::move(bytes), name);
  if (r.bytes(matrix_magic.size()) != matrix_magic) r.fail("bad magic (expected ADVMAT01)");
  const std::uint64_t len = r.u64();
  const std::size_t header_at = r.position();
  const std::string_view text = r.bytes(len);
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(name + " at byte " + std::to_string(header_at + e.byte) + ": invalid JSON header: " + e.what());
  }
  ActivationMatrix m;
  try {
    m.source = h.at("source");
    m.stimulus_ids = h.at("stimulus_ids").get<std::vector<std::string>>();
    m.unit_ids = h.at("unit_ids").get<std::vector<std::string>>();
    if (h.at("rows").get<std::size_t>() != m.rows() || h.at("cols").get<std::size_t>() != m.cols()) {
      throw FormatError(name + ": row/column counts disagree with id lists");
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(name + ": malformed matrix header: " + e.what());
  }
  m.values.resize(m.rows() * m.cols());
  r.f64s(m.values);
  if (!r.at_end()) r.fail("trailing bytes after matrix payload");
  return m;
}

inline void write_matrix(const std::filesystem::path& path, const ActivationMatrix& m, const std::string& comment = {}) {
  if (path.extension() == ".csv") {
    write_text_file(path, encode_matrix_csv(m, comment));
  } else {
    write_text_file(path, encode_matrix_binary(m, comment.empty() ? nlohmann::json::object()
                                                                   : nlohmann::json{{"comment", comment}}));
  }
}

/// Dispatches on content: ADVMAT01 magic means binary, anything else is CSV.
inline ActivationMatrix read_matrix(const std::filesystem::path& path, bool allow_nan = false) {
  std::string bytes = read_text_file(path);
  if (bytes.starts_with(matrix_magic)) {
    ActivationMatrix m = decode_matrix_binary(std::move(bytes), path.string());
    if (!allow_nan) {
      try {
        m.validate();
      } catch (const std::invalid_argument& e) {
        throw FormatError(path.string() + ": " + e.what());
      }
    }
    return m;
  }
  return read_matrix_csv(path, allow_nan);
}

inline std::string encode_geometry_csv(const VertexGeometry& g) {
  std::ostringstream out;
  out << "vertex_id,x_mm,y_mm,hemisphere\n";
  for (std::size_t i = 0; i < g.size(); ++i) {
    out << csv_field(g.ids[i]) << ',' << format_double(g.x_mm[i]) << ',' << format_double(g.y_mm[i]) << ','
        << csv_field(g.hemisphere[i]) << '\n';
  }
  return out.str();
}

inline VertexGeometry read_geometry_csv(const std::filesystem::path& path) {
  const auto lines = read_csv_lines(path);
  const std::string name = path.string();
  if (lines.empty()) throw FormatError(name + ": empty geometry file");
  const auto header = split_csv_line(lines[0].second);
  if (header.size() < 3 || header[0] != "vertex_id" || header[1] != "x_mm" || header[2] != "y_mm") {
    throw FormatError(name + ":" + std::to_string(lines[0].first) +
                      ": expected header vertex_id,x_mm,y_mm[,hemisphere]");
  }
  VertexGeometry g;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const auto& [lineno, text] = lines[i];
    const std::string where = name + ":" + std::to_string(lineno);
    const auto f = split_csv_line(text);
    if (f.size() != header.size()) throw FormatError(where + ": expected " + std::to_string(header.size()) + " fields");
    g.ids.push_back(f[0]);
    g.x_mm.push_back(parse_double(f[1], where));
    g.y_mm.push_back(parse_double(f[2], where));
    g.hemisphere.push_back(f.size() > 3 ? f[3] : std::string{});
  }
  try {
    g.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(name + ": " + e.what());
  }
  return g;
}

struct ReorderResult {
  ActivationMatrix matrix;
  bool reordered = false;
};

/// Puts rows into the canonical stimulus order; every canonical id must be
/// present exactly once and no extra ids are allowed.
inline ReorderResult align_stimuli(const ActivationMatrix& m, const std::vector<std::string>& canonical) {
  std::unordered_map<std::string, std::size_t> at;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    if (!at.emplace(m.stimulus_ids[r], r).second) {
      throw FormatError(m.source + ": duplicate stimulus id '" + m.stimulus_ids[r] + "'");
    }
  }
  std::vector<std::size_t> rows;
  for (const auto& id : canonical) {
    const auto it = at.find(id);
    if (it == at.end()) throw FormatError(m.source + ": missing stimulus id '" + id + "'");
    rows.push_back(it->second);
  }
  if (m.rows() != canonical.size()) {
    throw FormatError(m.source + ": " + std::to_string(m.rows() - canonical.size()) +
                      " stimulus ids not in the stimulus manifest");
  }
  ReorderResult out{m.select_rows(rows), false};
  out.matrix.source = m.source;
  for (std::size_t i = 0; i < rows.size(); ++i) out.reordered = out.reordered || rows[i] != i;
  return out;
}

}  // namespace advrsa
