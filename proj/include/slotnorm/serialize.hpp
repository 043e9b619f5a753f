#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "slotnorm/tensor.hpp"

namespace slotnorm {

// Named double arrays plus free-form string metadata, stored in one file: a
// magic/version header, a JSON manifest describing every array (name, shape,
// dtype, byte offset into the payload), then the raw little-endian payload.
struct Checkpoint {
  std::vector<std::pair<std::string, Tensor>> arrays;
  std::map<std::string, std::string> meta;

  // The array with the given name; loading a model from a checkpoint that
  // lacks one of its parameters is a hard error.
  const Tensor& find(const std::string& name) const;
};

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::string& path);

// --- CSV, RFC-4180 quoting ---
// Fields containing commas, quotes or line breaks are wrapped in double
// quotes with embedded quotes doubled; rows are CRLF-terminated.
std::string csv_encode(const std::vector<std::vector<std::string>>& rows);
// Inverse of csv_encode; also accepts bare-LF row endings. Stray or
// unterminated quotes are rejected.
std::vector<std::vector<std::string>> csv_decode(const std::string& text);

// --- SVG line plots ---
struct PlotSeries {
  std::string label;
  std::string color;  // any CSS color
  std::vector<double> x, y;
  // Optional shaded band around the line (same length as x), for spreads
  // such as min-max across seeds; leave empty for none.
  std::vector<double> y_low, y_high;
};

struct PlotSpec {
  std::string title, x_label, y_label;
  double width = 640.0, height = 400.0;
  std::vector<PlotSeries> series;
};

// Standalone SVG 1.1 document: axes with tick marks and grid lines, one
// band polygon and marked polyline per series, and a legend. Output is a
// pure function of the spec.
std::string render_line_plot(const PlotSpec& spec);

// --- small file helpers ---
void write_text_file(const std::string& path, const std::string& text);
std::string read_text_file(const std::string& path);

}  // namespace slotnorm
