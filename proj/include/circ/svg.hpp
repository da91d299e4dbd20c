#pragma once

#include <string>

#include "circ/compare.hpp"
#include "circ/stats.hpp"

namespace circ {

// Hand-assembled SVG strings with %.2f coordinates throughout, so the same
// inputs always produce the same bytes.

// Cell color is a linear ramp from white at `lo` to a dark blue at `hi`
// (values clamped); every cell carries its numeric label. A line is drawn
// between rows/columns where the task family changes.
std::string heatmap_svg(const SimilarityMatrix& m, const std::string& title, double lo = 0.0,
                        double hi = 1.0);

// Standard bracket layout: leaves at the bottom in traversal order, merge
// heights proportional to merge distance.
std::string dendrogram_svg(const Dendrogram& d, const std::string& title);

// Kind grid plus the two normalized-layer histograms.
std::string structure_svg(const StructureReport& r, const std::string& title);

void write_text_file(const std::string& text, const std::string& path);

}  // namespace circ
