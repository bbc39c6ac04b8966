#pragma once

#include <filesystem>
#include <functional>
#include <json.hpp>
#include <string>
#include <vector>

#include "af/tensor.hpp"

namespace af {

// %.17g, enough digits for bit-faithful reparse.
std::string format_double(double v);

// RFC-4180 CSV with a header row and CRLF line ends.
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

struct ScatterSeries {
  std::vector<std::array<double, 2>> points;
  std::string color = "#1f6fb2";
  double point_radius = 1.2;
};

// Deterministic SVG scatter (no timestamps or generator metadata).
void write_svg_scatter(const std::filesystem::path& path, const std::vector<ScatterSeries>& series,
                       double lo_x, double hi_x, double lo_y, double hi_y,
                       const std::string& title = "");

// 8-bit binary PGM preview of an [h, w] tensor, linearly mapped from
// [lo, hi] (tensor range when lo == hi).
void write_pgm(const std::filesystem::path& path, const Tensor& image, double lo = 0.0,
               double hi = 0.0);

// Grid of equally-sized [h, w] tiles from a [N, h*w] batch.
void write_pgm_grid(const std::filesystem::path& path, const Tensor& batch, std::int64_t h,
                    std::int64_t w, std::int64_t columns);

std::uint64_t config_hash(const nlohmann::json& j);

// Atomic JSON write (temp file + rename).
void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& j);

// Index-parallel map with deterministic output slots; worker count is capped
// by AMBIENTFLOW_THREADS (default 1).
void parallel_for_indexed(std::int64_t count, const std::function<void(std::int64_t)>& fn);
int worker_cap();

}  // namespace af
