#include "slotnorm/serialize.hpp"

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace slotnorm {

namespace {

constexpr char kCheckpointMagic[4] = {'S', 'N', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

template <typename T>
void write_raw(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw std::runtime_error("checkpoint file truncated");
  return v;
}

}  // namespace

const Tensor& Checkpoint::find(const std::string& name) const {
  for (const auto& [n, t] : arrays)
    if (n == name) return t;
  throw std::runtime_error("checkpoint has no array named " + name);
}

void save_checkpoint(const std::string& path, const Checkpoint& checkpoint) {
  std::set<std::string> seen;
  nlohmann::json entries = nlohmann::json::array();
  std::int64_t offset = 0;
  for (const auto& [name, tensor] : checkpoint.arrays) {
    require(!name.empty(), "checkpoint array names must be non-empty");
    require(seen.insert(name).second, "duplicate checkpoint array name: " + name);
    require(tensor.defined(), "checkpoint array is undefined: " + name);
    entries.push_back({{"name", name},
                       {"shape", tensor.shape()},
                       {"dtype", "f64"},
                       {"offset", offset},
                       {"count", tensor.size()}});
    offset += tensor.size() * 8;
  }
  const nlohmann::json manifest = {{"arrays", entries}, {"meta", checkpoint.meta}};
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out.write(kCheckpointMagic, 4);
  write_raw(out, kCheckpointVersion);
  write_raw(out, static_cast<std::uint64_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, tensor] : checkpoint.arrays)
    out.write(reinterpret_cast<const char*>(tensor.data()),
              static_cast<std::streamsize>(tensor.size() * 8));
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  const std::uint32_t version = read_raw<std::uint32_t>(in);
  if (version != kCheckpointVersion)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t manifest_len = read_raw<std::uint64_t>(in);
  std::string text(manifest_len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(manifest_len));
  if (!in) throw std::runtime_error("checkpoint file truncated");
  const std::string payload{std::istreambuf_iterator<char>(in),
                            std::istreambuf_iterator<char>()};

  Checkpoint checkpoint;
  try {
    const nlohmann::json manifest = nlohmann::json::parse(text);
    checkpoint.meta = manifest.at("meta").get<std::map<std::string, std::string>>();
    for (const auto& entry : manifest.at("arrays")) {
      const std::string name = entry.at("name").get<std::string>();
      if (entry.at("dtype").get<std::string>() != "f64")
        throw std::runtime_error("unsupported dtype for checkpoint array " + name);
      const Shape shape = entry.at("shape").get<Shape>();
      const std::int64_t count = entry.at("count").get<std::int64_t>();
      const std::int64_t offset = entry.at("offset").get<std::int64_t>();
      std::int64_t expect = 1;
      for (std::int64_t d : shape) {
        if (d < 0) throw std::runtime_error("corrupt shape for checkpoint array " + name);
        expect *= d;
      }
      if (expect != count)
        throw std::runtime_error("corrupt shape for checkpoint array " + name);
      if (offset < 0 || count < 0 ||
          offset + count * 8 > static_cast<std::int64_t>(payload.size()))
        throw std::runtime_error("checkpoint file truncated");
      Array data(count);
      std::memcpy(data.data(), payload.data() + offset, static_cast<std::size_t>(count * 8));
      checkpoint.arrays.emplace_back(name, Tensor::from_array(shape, std::move(data)));
    }
  } catch (const nlohmann::json::exception&) {
    throw std::runtime_error("corrupt checkpoint manifest in " + path);
  }
  return checkpoint;
}

std::string csv_encode(const std::vector<std::vector<std::string>>& rows) {
  std::string out;
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (i > 0) out += ',';
      const std::string& field = row[i];
      if (field.find_first_of(",\"\r\n") == std::string::npos) {
        out += field;
      } else {
        out += '"';
        for (char c : field) {
          if (c == '"') out += '"';
          out += c;
        }
        out += '"';
      }
    }
    out += "\r\n";
  }
  return out;
}

std::vector<std::vector<std::string>> csv_decode(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string field;
  bool quoted = false;      // between an opening quote and its closer
  bool was_quoted = false;  // the current field just closed its quote
  auto end_field = [&] {
    row.push_back(std::move(field));
    field.clear();
    was_quoted = false;
  };
  auto end_row = [&] {
    end_field();
    rows.push_back(std::move(row));
    row.clear();
  };
  std::size_t i = 0;
  while (i < text.size()) {
    const char c = text[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          i += 2;
          continue;
        }
        quoted = false;
        was_quoted = true;
        ++i;
        continue;
      }
      field += c;
      ++i;
      continue;
    }
    if (c == '"') {
      if (!field.empty() || was_quoted)
        throw std::runtime_error("malformed CSV: quote inside an unquoted field");
      quoted = true;
      ++i;
      continue;
    }
    if (was_quoted && c != ',' && c != '\r' && c != '\n')
      throw std::runtime_error("malformed CSV: text after a closing quote");
    if (c == ',') {
      end_field();
      ++i;
      continue;
    }
    if (c == '\r') {
      if (i + 1 >= text.size() || text[i + 1] != '\n')
        throw std::runtime_error("malformed CSV: bare carriage return");
      end_row();
      i += 2;
      continue;
    }
    if (c == '\n') {
      end_row();
      ++i;
      continue;
    }
    field += c;
    ++i;
  }
  if (quoted) throw std::runtime_error("malformed CSV: unterminated quoted field");
  if (!field.empty() || !row.empty() || was_quoted) end_row();
  return rows;
}

namespace {

std::string xml_escape(const std::string& s) {
  std::string out;
  out.reserve(s.size());
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      case '\'': out += "&apos;"; break;
      default: out += c;
    }
  }
  return out;
}

// Pixel coordinates with a fixed two-decimal format so the document is a
// deterministic function of the spec.
std::string px_fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v + 0.0);
  return buf;
}

// Tick spacing of the form {1,2,5} * 10^k giving roughly five intervals.
double nice_step(double span) {
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  const double base = raw / mag;
  if (base < 1.5) return mag;
  if (base < 3.5) return 2.0 * mag;
  if (base < 7.5) return 5.0 * mag;
  return 10.0 * mag;
}

}  // namespace

std::string render_line_plot(const PlotSpec& spec) {
  require(!spec.series.empty(), "render_line_plot: at least one series is required");
  require(spec.width >= 160.0 && spec.height >= 120.0, "render_line_plot: canvas too small");
  double xlo = std::numeric_limits<double>::infinity(), xhi = -xlo;
  double ylo = xlo, yhi = -xlo;
  for (const PlotSeries& s : spec.series) {
    require(!s.x.empty() && s.x.size() == s.y.size(),
            "render_line_plot: series x and y must pair up");
    require(s.y_low.size() == s.y_high.size() &&
                (s.y_low.empty() || s.y_low.size() == s.x.size()),
            "render_line_plot: band must be empty or match the series length");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      require(std::isfinite(s.x[i]) && std::isfinite(s.y[i]),
              "render_line_plot: series values must be finite");
      xlo = std::min(xlo, s.x[i]);
      xhi = std::max(xhi, s.x[i]);
      ylo = std::min(ylo, s.y[i]);
      yhi = std::max(yhi, s.y[i]);
      if (!s.y_low.empty()) {
        require(std::isfinite(s.y_low[i]) && std::isfinite(s.y_high[i]),
                "render_line_plot: band values must be finite");
        ylo = std::min(ylo, s.y_low[i]);
        yhi = std::max(yhi, s.y_high[i]);
      }
    }
  }
  auto widen = [](double& lo, double& hi) {
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    } else {
      const double pad = 0.05 * (hi - lo);
      lo -= pad;
      hi += pad;
    }
  };
  widen(xlo, xhi);
  widen(ylo, yhi);

  const double left = 56.0, right = 16.0, top = 28.0, bottom = 44.0;
  const double pw = spec.width - left - right, ph = spec.height - top - bottom;
  auto px = [&](double x) { return left + (x - xlo) / (xhi - xlo) * pw; };
  auto py = [&](double y) { return top + (yhi - y) / (yhi - ylo) * ph; };

  std::string svg;
  svg += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  svg += "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"" +
         px_fmt(spec.width) + "\" height=\"" + px_fmt(spec.height) + "\" viewBox=\"0 0 " +
         px_fmt(spec.width) + " " + px_fmt(spec.height) +
         "\" font-family=\"Helvetica, Arial, sans-serif\">\n";
  svg += "<rect width=\"" + px_fmt(spec.width) + "\" height=\"" + px_fmt(spec.height) +
         "\" fill=\"white\"/>\n";
  if (!spec.title.empty())
    svg += "<text x=\"" + px_fmt(spec.width / 2.0) +
           "\" y=\"18\" text-anchor=\"middle\" font-size=\"13\">" + xml_escape(spec.title) +
           "</text>\n";

  // Grid lines and tick labels.
  const double xstep = nice_step(xhi - xlo), ystep = nice_step(yhi - ylo);
  for (double t = std::ceil(xlo / xstep) * xstep; t <= xhi + 1e-9 * xstep; t += xstep) {
    const std::string x = px_fmt(px(t));
    svg += "<line x1=\"" + x + "\" y1=\"" + px_fmt(top) + "\" x2=\"" + x + "\" y2=\"" +
           px_fmt(top + ph) + "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + x + "\" y=\"" + px_fmt(top + ph + 16.0) +
           "\" text-anchor=\"middle\" font-size=\"11\">" + tick_fmt(t) + "</text>\n";
  }
  for (double t = std::ceil(ylo / ystep) * ystep; t <= yhi + 1e-9 * ystep; t += ystep) {
    const std::string y = px_fmt(py(t));
    svg += "<line x1=\"" + px_fmt(left) + "\" y1=\"" + y + "\" x2=\"" + px_fmt(left + pw) +
           "\" y2=\"" + y + "\" stroke=\"#dddddd\" stroke-width=\"1\"/>\n";
    svg += "<text x=\"" + px_fmt(left - 6.0) + "\" y=\"" + px_fmt(py(t) + 4.0) +
           "\" text-anchor=\"end\" font-size=\"11\">" + tick_fmt(t) + "</text>\n";
  }
  svg += "<rect x=\"" + px_fmt(left) + "\" y=\"" + px_fmt(top) + "\" width=\"" + px_fmt(pw) +
         "\" height=\"" + px_fmt(ph) + "\" fill=\"none\" stroke=\"#333333\"/>\n";

  // Bands first so every line stays visible on top of them.
  for (const PlotSeries& s : spec.series) {
    if (s.y_low.empty()) continue;
    std::string points;
    for (std::size_t i = 0; i < s.x.size(); ++i)
      points += px_fmt(px(s.x[i])) + "," + px_fmt(py(s.y_high[i])) + " ";
    for (std::size_t i = s.x.size(); i-- > 0;)
      points += px_fmt(px(s.x[i])) + "," + px_fmt(py(s.y_low[i])) + " ";
    points.pop_back();
    svg += "<polygon points=\"" + points + "\" fill=\"" + xml_escape(s.color) +
           "\" fill-opacity=\"0.18\" stroke=\"none\"/>\n";
  }
  for (const PlotSeries& s : spec.series) {
    if (s.x.size() > 1) {
      std::string points;
      for (std::size_t i = 0; i < s.x.size(); ++i)
        points += px_fmt(px(s.x[i])) + "," + px_fmt(py(s.y[i])) + " ";
      points.pop_back();
      svg += "<polyline points=\"" + points + "\" fill=\"none\" stroke=\"" +
             xml_escape(s.color) + "\" stroke-width=\"1.5\"/>\n";
    }
    for (std::size_t i = 0; i < s.x.size(); ++i)
      svg += "<circle cx=\"" + px_fmt(px(s.x[i])) + "\" cy=\"" + px_fmt(py(s.y[i])) +
             "\" r=\"2.5\" fill=\"" + xml_escape(s.color) + "\"/>\n";
  }

  // Legend, top-right inside the plot area.
  for (std::size_t i = 0; i < spec.series.size(); ++i) {
    const PlotSeries& s = spec.series[i];
    const double lx = left + pw - 150.0;
    const double ly = top + 14.0 + 16.0 * static_cast<double>(i);
    svg += "<line x1=\"" + px_fmt(lx) + "\" y1=\"" + px_fmt(ly - 4.0) + "\" x2=\"" +
           px_fmt(lx + 18.0) + "\" y2=\"" + px_fmt(ly - 4.0) + "\" stroke=\"" +
           xml_escape(s.color) + "\" stroke-width=\"1.5\"/>\n";
    svg += "<text x=\"" + px_fmt(lx + 24.0) + "\" y=\"" + px_fmt(ly) +
           "\" font-size=\"11\">" + xml_escape(s.label) + "</text>\n";
  }

  if (!spec.x_label.empty())
    svg += "<text x=\"" + px_fmt(left + pw / 2.0) + "\" y=\"" + px_fmt(spec.height - 8.0) +
           "\" text-anchor=\"middle\" font-size=\"12\">" + xml_escape(spec.x_label) +
           "</text>\n";
  if (!spec.y_label.empty())
    svg += "<text x=\"14\" y=\"" + px_fmt(top + ph / 2.0) +
           "\" text-anchor=\"middle\" font-size=\"12\" transform=\"rotate(-90 14 " +
           px_fmt(top + ph / 2.0) + ")\">" + xml_escape(spec.y_label) + "</text>\n";
  svg += "</svg>\n";
  return svg;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open file for writing: " + path);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("failed writing file: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return std::move(buffer).str();
}

}  // namespace slotnorm
