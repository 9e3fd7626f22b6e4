#pragma once

// ot-field v1 text format:
//   ot-field v1 dim=<d> n=<n_space> nt=<n_time> [config=<digest>]
//   <doubles, whitespace separated, row-major (t, x[, y])>
// nt is the grid's number of time intervals; the number of time rows is
// implied by the value count (nt+1 for node fields, nt for staggered ones).

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "otgeo/grid.hpp"

namespace otgeo {

struct FieldFile {
  int dim = 1;
  int n = 0;
  int nt = 0;
  std::string digest;
  std::vector<double> values;

  std::size_t slice_size() const { return dim == 1 ? static_cast<std::size_t>(n) : static_cast<std::size_t>(n) * n; }
  std::size_t rows() const { return slice_size() == 0 ? 0 : values.size() / slice_size(); }
};

class FieldFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::string field_header(int dim, int n, int nt) {
  return "ot-field v1 dim=" + std::to_string(dim) + " n=" + std::to_string(n) + " nt=" + std::to_string(nt);
}

/// Shortest decimal form that round-trips the double exactly.
inline std::string format_double(double x) {
  char buf[40];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, x);
    if (std::strtod(buf, nullptr) == x) break;
  }
  return buf;
}

/// One time row per line. A non-empty digest is appended to the header.
inline std::string serialize_field(const Grid& grid, std::span<const double> values, const std::string& digest = "") {
  const std::size_t row = grid.nodes();
  if (values.size() % row != 0) throw FieldFormatError("field size is not a multiple of the slice size");
  std::string out = field_header(grid.dim(), grid.n(), grid.nt());
  if (!digest.empty()) out += " config=" + digest;
  out += '\n';
  for (std::size_t r = 0; r < values.size() / row; ++r) {
    for (std::size_t s = 0; s < row; ++s) {
      if (s) out += ' ';
      out += format_double(values[r * row + s]);
    }
    out += '\n';
  }
  return out;
}

inline void write_field(const std::string& path, const Grid& grid, std::span<const double> values,
                        const std::string& digest = "") {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FieldFormatError("cannot open " + path + " for writing");
  os << serialize_field(grid, values, digest);
  if (!os) throw FieldFormatError("write failed: " + path);
}

inline FieldFile parse_field(const std::string& text) {
  std::istringstream is(text);
  std::string header;
  if (!std::getline(is, header)) throw FieldFormatError("empty field file");
  FieldFile f;
  char tail = 0;
  if (std::sscanf(header.c_str(), "ot-field v1 dim=%d n=%d nt=%d%c", &f.dim, &f.n, &f.nt, &tail) < 3)
    throw FieldFormatError("bad header: '" + header + "'");
  if (f.dim != 1 && f.dim != 2) throw FieldFormatError("bad dim in header: '" + header + "'");
  if (f.n <= 0 || f.nt <= 0) throw FieldFormatError("bad sizes in header: '" + header + "'");
  if (const auto pos = header.find(" config="); pos != std::string::npos) f.digest = header.substr(pos + 8);
  std::string tok;
  while (is >> tok) {
    char* end = nullptr;
    const double v = std::strtod(tok.c_str(), &end);
    if (end == tok.c_str() || *end != '\0') throw FieldFormatError("not a number: '" + tok + "'");
    f.values.push_back(v);
  }
  if (f.values.empty() || f.values.size() % f.slice_size() != 0)
    throw FieldFormatError("value count " + std::to_string(f.values.size()) + " is not a multiple of the slice size");
  return f;
}

inline FieldFile read_field(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FieldFormatError("cannot open " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_field(ss.str());
}

}  // namespace otgeo
