#include "af/report.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <thread>

#include "af/error.hpp"

namespace af {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

namespace {

std::string csv_quote(const std::string& field) {
  bool needs = field.find_first_of(",\"\r\n") != std::string::npos;
  if (!needs) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

}  // namespace

void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw IoError("cannot write csv: " + path.string());
  for (size_t i = 0; i < header.size(); ++i) os << (i ? "," : "") << csv_quote(header[i]);
  os << "\r\n";
  for (const auto& row : rows) {
    for (size_t i = 0; i < row.size(); ++i) os << (i ? "," : "") << csv_quote(row[i]);
    os << "\r\n";
  }
  if (!os) throw IoError("csv write failed: " + path.string());
}

void write_svg_scatter(const std::filesystem::path& path, const std::vector<ScatterSeries>& series,
                       double lo_x, double hi_x, double lo_y, double hi_y,
                       const std::string& title) {
  const int size = 640, margin = 40;
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw IoError("cannot write svg: " + path.string());
  auto sx = [&](double x) {
    return margin + (x - lo_x) / (hi_x - lo_x) * (size - 2 * margin);
  };
  auto sy = [&](double y) {
    return size - margin - (y - lo_y) / (hi_y - lo_y) * (size - 2 * margin);
  };
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
     << "\" viewBox=\"0 0 " << size << " " << size << "\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<rect x=\"" << margin << "\" y=\"" << margin << "\" width=\"" << size - 2 * margin
     << "\" height=\"" << size - 2 * margin << "\" fill=\"none\" stroke=\"#888\"/>\n";
  if (!title.empty())
    os << "<text x=\"" << size / 2 << "\" y=\"24\" text-anchor=\"middle\" font-family=\"monospace\" "
          "font-size=\"14\">"
       << title << "</text>\n";
  for (const auto& s : series) {
    for (const auto& p : s.points) {
      if (p[0] < lo_x || p[0] > hi_x || p[1] < lo_y || p[1] > hi_y) continue;
      os << "<circle cx=\"" << format_double(sx(p[0])) << "\" cy=\"" << format_double(sy(p[1]))
         << "\" r=\"" << s.point_radius << "\" fill=\"" << s.color << "\" fill-opacity=\"0.6\"/>\n";
    }
  }
  os << "</svg>\n";
  if (!os) throw IoError("svg write failed: " + path.string());
}

void write_pgm(const std::filesystem::path& path, const Tensor& image, double lo, double hi) {
  if (image.rank() != 2) throw UsageError("pgm preview expects [h, w]");
  double a = lo, b = hi;
  if (a == b) {
    a = image.array().minCoeff();
    b = image.array().maxCoeff();
    if (a == b) b = a + 1.0;
  }
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw IoError("cannot write pgm: " + path.string());
  os << "P5\n" << image.dim(1) << " " << image.dim(0) << "\n255\n";
  for (std::int64_t i = 0; i < image.size(); ++i) {
    double t = (image[i] - a) / (b - a);
    t = std::min(1.0, std::max(0.0, t));
    os.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
  }
  if (!os) throw IoError("pgm write failed: " + path.string());
}

void write_pgm_grid(const std::filesystem::path& path, const Tensor& batch, std::int64_t h,
                    std::int64_t w, std::int64_t columns) {
  if (batch.rank() != 2 || batch.dim(1) != h * w)
    throw UsageError("pgm grid expects [N, h*w] batch");
  const std::int64_t count = batch.dim(0);
  const std::int64_t cols = std::max<std::int64_t>(1, columns);
  const std::int64_t rows = (count + cols - 1) / cols;
  const std::int64_t pad = 2;
  Tensor canvas = Tensor::full({rows * (h + pad) - pad, cols * (w + pad) - pad},
                               batch.array().minCoeff());
  for (std::int64_t i = 0; i < count; ++i) {
    const std::int64_t r0 = (i / cols) * (h + pad), c0 = (i % cols) * (w + pad);
    for (std::int64_t y = 0; y < h; ++y)
      for (std::int64_t x = 0; x < w; ++x)
        canvas.mutable_array()[(r0 + y) * canvas.dim(1) + c0 + x] = batch[i * h * w + y * w + x];
  }
  write_pgm(path, canvas);
}

std::uint64_t config_hash(const nlohmann::json& j) {
  const std::string s = j.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void write_json_atomic(const std::filesystem::path& path, const nlohmann::json& j) {
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw IoError("cannot write: " + tmp.string());
    os << j.dump(2) << "\n";
    if (!os) throw IoError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

int worker_cap() {
  const char* env = std::getenv("AMBIENTFLOW_THREADS");
  if (!env) return 1;
  int v = std::atoi(env);
  if (v < 1) return 1;
  return std::min(v, static_cast<int>(std::thread::hardware_concurrency() > 0
                                          ? std::thread::hardware_concurrency()
                                          : 1u));
}

void parallel_for_indexed(std::int64_t count, const std::function<void(std::int64_t)>& fn) {
  const int workers = worker_cap();
  if (workers <= 1 || count <= 1) {
    for (std::int64_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::int64_t> next{0};
  std::vector<std::thread> pool;
  std::exception_ptr error;
  std::mutex error_mu;
  for (int t = 0; t < workers; ++t)
    pool.emplace_back([&]() {
      for (;;) {
        const std::int64_t i = next.fetch_add(1);
        if (i >= count) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(error_mu);
          if (!error) error = std::current_exception();
          return;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

}  // namespace af
