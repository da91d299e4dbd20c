#include "circ/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <fstream>
#include <stdexcept>

namespace circ {

namespace {

std::string fmt(const char* f, ...) {
  char buf[256];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

std::string esc(const std::string& s) {
  std::string out;
  for (const char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      default: out += c;
    }
  }
  return out;
}

// white at 0 to dark blue at 1
std::string ramp(double v) {
  v = std::clamp(v, 0.0, 1.0);
  const int r = static_cast<int>(std::lround(255 + v * (33 - 255)));
  const int g = static_cast<int>(std::lround(255 + v * (102 - 255)));
  const int b = static_cast<int>(std::lround(255 + v * (172 - 255)));
  return fmt("#%02x%02x%02x", r, g, b);
}

std::string open_svg(double w, double h) {
  return fmt(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.2f\" height=\"%.2f\" "
      "viewBox=\"0 0 %.2f %.2f\" font-family=\"monospace\">\n",
      w, h, w, h);
}

std::string text_at(double x, double y, const std::string& s, double px,
                    const char* anchor = "start", const char* extra = "") {
  return fmt("<text x=\"%.2f\" y=\"%.2f\" font-size=\"%.2f\" text-anchor=\"%s\"%s>", x, y, px,
             anchor, extra) +
         esc(s) + "</text>\n";
}

std::string rect_at(double x, double y, double w, double h, const std::string& fill,
                    const char* extra = "") {
  return fmt("<rect x=\"%.2f\" y=\"%.2f\" width=\"%.2f\" height=\"%.2f\" fill=\"%s\"%s/>\n", x, y,
             w, h, fill.c_str(), extra);
}

std::string line_at(double x1, double y1, double x2, double y2, const char* stroke,
                    double width) {
  return fmt(
      "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"%s\" "
      "stroke-width=\"%.2f\"/>\n",
      x1, y1, x2, y2, stroke, width);
}

}  // namespace

std::string heatmap_svg(const SimilarityMatrix& m, const std::string& title, double lo,
                        double hi) {
  const int k = m.k();
  const double cell = 46.0, label = 150.0, top = 40.0, pad = 10.0;
  const double w = label + k * cell + pad, h = top + label + k * cell + pad;
  std::string s = open_svg(w, h);
  s += rect_at(0, 0, w, h, "#ffffff");
  s += text_at(pad, 24, title, 15);
  const double gx = label, gy = top + label;
  for (int j = 0; j < k; j++) {
    // column labels, rotated up from the grid edge
    s += fmt("<g transform=\"translate(%.2f,%.2f) rotate(-60)\">", gx + j * cell + cell / 2 + 4,
             gy - 6) +
         text_at(0, 0, m.labels[j], 11) + "</g>\n";
  }
  for (int i = 0; i < k; i++) {
    s += text_at(gx - 6, gy + i * cell + cell / 2 + 4, m.labels[i], 11, "end");
    for (int j = 0; j < k; j++) {
      const double v = m.at(i, j);
      const double unit = hi > lo ? (v - lo) / (hi - lo) : 0.0;
      s += rect_at(gx + j * cell, gy + i * cell, cell, cell, ramp(unit),
                   " stroke=\"#cccccc\" stroke-width=\"0.5\"");
      const char* color = unit > 0.55 ? " fill=\"#ffffff\"" : " fill=\"#000000\"";
      s += text_at(gx + j * cell + cell / 2, gy + i * cell + cell / 2 + 4, fmt("%.2f", v), 11,
                   "middle", color);
    }
  }
  // family boundary lines
  for (int i = 1; i < k; i++) {
    if (m.family_of[i] != m.family_of[i - 1]) {
      s += line_at(gx, gy + i * cell, gx + k * cell, gy + i * cell, "#d62728", 2.0);
      s += line_at(gx + i * cell, gy, gx + i * cell, gy + k * cell, "#d62728", 2.0);
    }
  }
  s += "</svg>\n";
  return s;
}

std::string dendrogram_svg(const Dendrogram& d, const std::string& title) {
  const int k = static_cast<int>(d.labels.size());
  const double slot = 110.0, top = 50.0, plot_h = 240.0, label_h = 150.0, pad = 20.0;
  const double w = std::max(360.0, pad * 2 + k * slot);
  const double h = top + plot_h + label_h;
  const auto order = dendrogram_leaf_order(d);
  std::vector<int> slot_of(k);
  for (int i = 0; i < k; i++) slot_of[order[i]] = i;

  double dmax = 1e-12;
  for (const auto& mg : d.merges) dmax = std::max(dmax, mg.distance);
  auto xpos = [&](double leaf_slot) { return pad + leaf_slot * slot + slot / 2; };
  auto ypos = [&](double dist) { return top + plot_h - (dist / dmax) * (plot_h - 10.0); };

  std::string s = open_svg(w, h);
  s += rect_at(0, 0, w, h, "#ffffff");
  s += text_at(pad, 26, title, 15);
  // per cluster: x center and current height
  std::vector<double> cx(2 * std::max(k, 1) - 1), cy(2 * std::max(k, 1) - 1);
  for (int i = 0; i < k; i++) {
    cx[i] = xpos(slot_of[i]);
    cy[i] = ypos(0.0);
    s += fmt("<g transform=\"translate(%.2f,%.2f) rotate(55)\">", cx[i] - 4, top + plot_h + 14) +
         text_at(0, 0, d.labels[i], 11) + "</g>\n";
  }
  for (std::size_t step = 0; step < d.merges.size(); step++) {
    const auto& mg = d.merges[step];
    const double y = ypos(mg.distance);
    s += line_at(cx[mg.a], cy[mg.a], cx[mg.a], y, "#1f77b4", 1.5);
    s += line_at(cx[mg.b], cy[mg.b], cx[mg.b], y, "#1f77b4", 1.5);
    s += line_at(cx[mg.a], y, cx[mg.b], y, "#1f77b4", 1.5);
    s += text_at((cx[mg.a] + cx[mg.b]) / 2, y - 4, fmt("%.3f", mg.distance), 9, "middle");
    const int nc = k + static_cast<int>(step);
    cx[nc] = (cx[mg.a] + cx[mg.b]) / 2;
    cy[nc] = y;
  }
  s += "</svg>\n";
  return s;
}

std::string structure_svg(const StructureReport& r, const std::string& title) {
  const double cell = 60.0, gx = 90.0, gy = 70.0, pad = 20.0;
  const double hist_y = gy + 4 * cell + 60.0, hist_h = 120.0, hist_w = 300.0;
  const double w = std::max(gx + 4 * cell + pad, gx + 2 * hist_w + 60.0);
  const double h = hist_y + hist_h + 70.0;
  const char* kinds[4] = {"input", "head", "mlp", "logits"};

  int maxc = 1;
  for (const auto& row : r.kind_grid) {
    for (const int c : row) maxc = std::max(maxc, c);
  }
  std::string s = open_svg(w, h);
  s += rect_at(0, 0, w, h, "#ffffff");
  s += text_at(pad, 26, title, 15);
  s += text_at(pad, 46, fmt("shared edges: %d", r.intersection.size()), 12);
  for (int i = 0; i < 4; i++) {
    s += text_at(gx - 6, gy + i * cell + cell / 2 + 4, kinds[i], 11, "end");
    s += text_at(gx + i * cell + cell / 2, gy - 8, kinds[i], 11, "middle");
    for (int j = 0; j < 4; j++) {
      const double unit = double(r.kind_grid[i][j]) / maxc;
      s += rect_at(gx + j * cell, gy + i * cell, cell, cell, ramp(unit),
                   " stroke=\"#cccccc\" stroke-width=\"0.5\"");
      const char* color = unit > 0.55 ? " fill=\"#ffffff\"" : " fill=\"#000000\"";
      s += text_at(gx + j * cell + cell / 2, gy + i * cell + cell / 2 + 4,
                   fmt("%d", r.kind_grid[i][j]), 11, "middle", color);
    }
  }
  s += text_at(gx - 70, gy + 2 * cell, "src", 11);
  s += text_at(gx + 2 * cell - 10, gy - 30, "dst", 11);

  auto bars = [&](const std::vector<LayerHistogramBin>& hist, double x0,
                  const std::string& name) {
    std::string out = text_at(x0, hist_y - 10, name, 12);
    int hm = 1;
    for (const auto& b : hist) hm = std::max(hm, b.count);
    out += line_at(x0, hist_y + hist_h, x0 + hist_w, hist_y + hist_h, "#000000", 1.0);
    for (const auto& b : hist) {
      const double bx = x0 + b.position * (hist_w - 24.0);
      const double bh = (double(b.count) / hm) * (hist_h - 10.0);
      out += rect_at(bx, hist_y + hist_h - bh, 24.0, bh, "#1f77b4");
      out += text_at(bx + 12.0, hist_y + hist_h - bh - 4, fmt("%d", b.count), 10, "middle");
      out += text_at(bx + 12.0, hist_y + hist_h + 14, fmt("%.2f", b.position), 9, "middle");
    }
    return out;
  };
  s += bars(r.src_hist, gx, "source depth (0 = input, 1 = logits)");
  s += bars(r.dst_hist, gx + hist_w + 50.0, "destination depth");
  s += "</svg>\n";
  return s;
}

void write_text_file(const std::string& text, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << text;
}

}  // namespace circ
