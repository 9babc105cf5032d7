#include "esd/io.hpp"

#include "esd/schedule.hpp"

#include <charconv>
#include <chrono>
#include <ctime>
#include <fstream>
#include <sstream>

namespace esd {

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

Eigen::Index CsvTable::column(const std::string& name) const {
  for (std::size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<Eigen::Index>(i);
  return -1;
}

std::vector<Eigen::Index> CsvTable::require_columns(const std::vector<std::string>& expected,
                                                    const std::string& what) const {
  std::vector<Eigen::Index> idx;
  for (const auto& name : expected) {
    const auto c = column(name);
    if (c < 0) {
      std::string list;
      for (const auto& e : expected) list += (list.empty() ? "" : ", ") + e;
      std::string have;
      for (const auto& h : header) have += (have.empty() ? "" : ", ") + h;
      throw std::invalid_argument(what + ": expected columns [" + list + "], found [" + have + "]");
    }
    idx.push_back(c);
  }
  return idx;
}

namespace {

std::vector<std::string> split(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == ' ' || cell.back() == '\r')) cell.pop_back();
    std::size_t start = 0;
    while (start < cell.size() && cell[start] == ' ') ++start;
    out.push_back(cell.substr(start));
  }
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

double parse_double(const std::string& s, std::size_t line_no) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  if (!s.empty() && *first == '+') ++first;
  const auto res = std::from_chars(first, last, v);
  if (res.ec != std::errc() || res.ptr != last) {
    throw std::invalid_argument("csv line " + std::to_string(line_no) + ": not a number: '" + s + "'");
  }
  return v;
}

}  // namespace

CsvTable read_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::ios_base::failure("cannot read " + path);
  CsvTable table;
  std::vector<std::vector<double>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      table.comments.push_back(line.substr(line.size() > 1 && line[1] == ' ' ? 2 : 1));
      continue;
    }
    auto cells = split(line);
    if (table.header.empty()) {
      table.header = std::move(cells);
      continue;
    }
    if (cells.size() != table.header.size()) {
      throw std::invalid_argument(path + ": line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                                  " fields, header has " + std::to_string(table.header.size()));
    }
    std::vector<double> row;
    row.reserve(cells.size());
    for (const auto& c : cells) row.push_back(parse_double(c, line_no));
    rows.push_back(std::move(row));
  }
  if (table.header.empty()) throw std::invalid_argument(path + ": empty csv");
  table.data.resize(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(table.header.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      table.data(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
  return table;
}

void write_csv(const std::string& path, const std::vector<std::string>& header, const Mat& rows,
               const std::vector<std::string>& comments) {
  require_dim(rows.cols(), static_cast<Eigen::Index>(header.size()), "write_csv");
  std::string out;
  for (const auto& c : comments) out += "# " + c + "\n";
  for (std::size_t j = 0; j < header.size(); ++j) out += (j ? "," : "") + header[j];
  out += '\n';
  for (Eigen::Index i = 0; i < rows.rows(); ++i) {
    for (Eigen::Index j = 0; j < rows.cols(); ++j) {
      if (j) out += ',';
      out += format_double(rows(i, j));
    }
    out += '\n';
  }
  write_file(path, out);
}

Batch read_points(const std::string& path) {
  const CsvTable t = read_csv(path);
  const auto cols = t.require_columns({"x0", "x1"}, path);
  Batch out(t.data.rows(), 2);
  for (Eigen::Index i = 0; i < t.data.rows(); ++i) {
    out(i, 0) = t.data(i, cols[0]);
    out(i, 1) = t.data(i, cols[1]);
  }
  return out;
}

void write_points(const std::string& path, const Batch& points, const std::vector<std::string>& comments) {
  std::vector<std::string> header;
  for (Eigen::Index j = 0; j < points.cols(); ++j) header.push_back("x" + std::to_string(j));
  write_csv(path, header, points, comments);
}

std::string read_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::ios_base::failure("cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::ios_base::failure("cannot write " + path);
  os << content;
  os.flush();
  if (!os) throw std::ios_base::failure("failed writing " + path);
}

std::string file_hash(const std::string& path) { return hex64(fnv1a(read_file(path))); }

void write_manifest(const std::string& path, nlohmann::json manifest) {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char stamp[32];
  std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
  manifest["written_at"] = stamp;
  write_file(path, manifest.dump(2) + "\n");
}

SvgCanvas::SvgCanvas(double xmin, double xmax, double ymin, double ymax, int width, int height)
    : xmin_(xmin), xmax_(xmax), ymin_(ymin), ymax_(ymax), width_(width), height_(height) {
  if (!(xmax > xmin) || !(ymax > ymin)) {
    // Degenerate window: widen symmetrically so a single point still renders.
    if (!(xmax > xmin)) { xmin_ -= 1.0; xmax_ += 1.0; }
    if (!(ymax > ymin)) { ymin_ -= 1.0; ymax_ += 1.0; }
  }
}

double SvgCanvas::px(double x) const { return margin_ + (x - xmin_) / (xmax_ - xmin_) * (width_ - 2 * margin_); }
double SvgCanvas::py(double y) const { return height_ - margin_ - (y - ymin_) / (ymax_ - ymin_) * (height_ - 2 * margin_); }

namespace {
std::string f2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}
}  // namespace

void SvgCanvas::title(const std::string& text) { title_ = text; }

void SvgCanvas::axes() {
  const std::string box = "M" + f2(px(xmin_)) + " " + f2(py(ymin_)) + " H" + f2(px(xmax_)) + " V" + f2(py(ymax_)) +
                          " H" + f2(px(xmin_)) + " Z";
  elements_.push_back("<path d=\"" + box + "\" fill=\"none\" stroke=\"#444\" stroke-width=\"1\"/>");
}

void SvgCanvas::points(const Mat& xy, const std::string& color, double radius, double opacity) {
  std::string d;
  for (Eigen::Index i = 0; i < xy.rows(); ++i) {
    if (!std::isfinite(xy(i, 0)) || !std::isfinite(xy(i, 1))) continue;
    d += "M" + f2(px(xy(i, 0))) + " " + f2(py(xy(i, 1))) + "h0";
  }
  elements_.push_back("<path d=\"" + d + "\" stroke=\"" + color + "\" stroke-width=\"" + f2(2 * radius) +
                      "\" stroke-linecap=\"round\" stroke-opacity=\"" + f2(opacity) + "\"/>");
}

void SvgCanvas::arrow(double x, double y, double dx, double dy, const std::string& color) {
  const double x0 = px(x), y0 = py(y);
  const double x1 = px(x + dx), y1 = py(y + dy);
  const double len = std::hypot(x1 - x0, y1 - y0);
  std::string d = "M" + f2(x0) + " " + f2(y0) + "L" + f2(x1) + " " + f2(y1);
  if (len > 1e-9) {
    const double ux = (x1 - x0) / len, uy = (y1 - y0) / len;
    const double head = std::min(5.0, 0.4 * len);
    d += "M" + f2(x1 - head * (ux - 0.5 * uy)) + " " + f2(y1 - head * (uy + 0.5 * ux)) + "L" + f2(x1) + " " + f2(y1) +
         "L" + f2(x1 - head * (ux + 0.5 * uy)) + " " + f2(y1 - head * (uy - 0.5 * ux));
  }
  elements_.push_back("<path class=\"arrow\" d=\"" + d + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1\"/>");
}

void SvgCanvas::polyline(const std::vector<double>& xs, const std::vector<double>& ys, const std::string& color,
                         double width) {
  std::string pts;
  for (std::size_t i = 0; i < xs.size(); ++i) pts += (i ? " " : "") + f2(px(xs[i])) + "," + f2(py(ys[i]));
  elements_.push_back("<polyline points=\"" + pts + "\" fill=\"none\" stroke=\"" + color + "\" stroke-width=\"" +
                      f2(width) + "\"/>");
}

void SvgCanvas::band(const std::vector<double>& xs, const std::vector<double>& lower, const std::vector<double>& upper,
                     const std::string& color, double opacity) {
  std::string d;
  for (std::size_t i = 0; i < xs.size(); ++i) d += (i ? "L" : "M") + f2(px(xs[i])) + " " + f2(py(upper[i]));
  for (std::size_t i = xs.size(); i-- > 0;) d += "L" + f2(px(xs[i])) + " " + f2(py(lower[i]));
  d += "Z";
  elements_.push_back("<path class=\"band\" d=\"" + d + "\" fill=\"" + color + "\" fill-opacity=\"" + f2(opacity) +
                      "\" stroke=\"none\"/>");
}

std::string SvgCanvas::str() const {
  std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width_) + "\" height=\"" +
                    std::to_string(height_) + "\" viewBox=\"0 0 " + std::to_string(width_) + " " +
                    std::to_string(height_) + "\">\n";
  if (!title_.empty()) {
    std::string esc;
    for (char c : title_) {
      if (c == '<') esc += "&lt;";
      else if (c == '>') esc += "&gt;";
      else if (c == '&') esc += "&amp;";
      else esc += c;
    }
    out += "<title>" + esc + "</title>\n";
  }
  for (const auto& e : elements_) out += e + "\n";
  out += "</svg>\n";
  return out;
}

}  // namespace esd
