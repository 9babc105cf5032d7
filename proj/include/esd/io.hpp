#pragma once

// Headered CSV, run manifests and a small SVG writer.

#include "esd/types.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace esd {

/// Shortest round-trip decimal form, independent of the C locale.
std::string format_double(double v);

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::string> comments;  // lines that started with '#', without the marker
  Mat data;                            // rows x columns

  /// Column index by name, or -1.
  Eigen::Index column(const std::string& name) const;
  /// Throws std::invalid_argument listing `expected` when any name is missing.
  std::vector<Eigen::Index> require_columns(const std::vector<std::string>& expected, const std::string& what) const;
};

/// Throws std::ios_base::failure on IO errors and std::invalid_argument on malformed content.
CsvTable read_csv(const std::string& path);

void write_csv(const std::string& path, const std::vector<std::string>& header, const Mat& rows,
               const std::vector<std::string>& comments = {});

/// Two-column point file (x0, x1, ...) as an unweighted batch.
Batch read_points(const std::string& path);
void write_points(const std::string& path, const Batch& points, const std::vector<std::string>& comments = {});

std::string read_file(const std::string& path);
void write_file(const std::string& path, const std::string& content);

/// FNV-1a of a file's bytes as 16 hex digits.
std::string file_hash(const std::string& path);

/// Adds a UTC timestamp and writes pretty-printed JSON.
void write_manifest(const std::string& path, nlohmann::json manifest);

/// Static plot canvas over a fixed data window; paths and polylines only.
class SvgCanvas {
 public:
  SvgCanvas(double xmin, double xmax, double ymin, double ymax, int width = 640, int height = 640);

  void title(const std::string& text);
  void axes();
  /// Each point drawn as a zero-length round-capped path segment.
  void points(const Mat& xy, const std::string& color, double radius = 2.0, double opacity = 0.6);
  void arrow(double x, double y, double dx, double dy, const std::string& color);
  void polyline(const std::vector<double>& xs, const std::vector<double>& ys, const std::string& color,
                double width = 1.5);
  /// Closed band between lower and upper curves.
  void band(const std::vector<double>& xs, const std::vector<double>& lower, const std::vector<double>& upper,
            const std::string& color, double opacity = 0.25);
  std::string str() const;
  std::size_t element_count() const { return elements_.size(); }

 private:
  double px(double x) const;
  double py(double y) const;

  double xmin_, xmax_, ymin_, ymax_;
  int width_, height_;
  int margin_ = 40;
  std::string title_;
  std::vector<std::string> elements_;
};

}  // namespace esd
