#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>

#include "geometry.hpp"

namespace vmap {

struct SvgStyle {
  double px_per_m = 20.0;
  double margin_px = 20.0;
  double legend_px = 150.0;
};

namespace detail {

inline const char* class_color(ElementClass c) {
  switch (c) {
    case ElementClass::kPedCrossing: return "#1f77b4";
    case ElementClass::kDivider: return "#ff7f0e";
    case ElementClass::kBoundary: return "#2ca02c";
  }
  return "#000000";
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

}  // namespace detail

/// Ground truth dashed, predictions solid; arrowheads mark the vertex order.
/// Output depends only on the inputs.
inline std::string render_svg(const VectorMap& gt, const VectorMap& pred, const GridSpec& g, const SvgStyle& st = {}) {
  const double w = g.extent_x() * st.px_per_m, h = g.extent_y() * st.px_per_m;
  const double total_w = w + 2 * st.margin_px + st.legend_px, total_h = h + 2 * st.margin_px;
  auto px = [&](Point p) {
    return detail::fmt(st.margin_px + (p.x - g.origin.x) * st.px_per_m) + "," +
           detail::fmt(st.margin_px + h - (p.y - g.origin.y) * st.px_per_m);
  };
  std::string s;
  s += "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
  s += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + detail::fmt(total_w) + "\" height=\"" +
       detail::fmt(total_h) + "\" viewBox=\"0 0 " + detail::fmt(total_w) + " " + detail::fmt(total_h) + "\">\n";
  s += "<defs>\n";
  for (int c = 0; c < kNumElementClasses; ++c) {
    const auto cls = static_cast<ElementClass>(c);
    s += "<marker id=\"arrow-" + std::string(class_name(cls)) +
         "\" viewBox=\"0 0 10 10\" refX=\"9\" refY=\"5\" markerWidth=\"6\" markerHeight=\"6\" orient=\"auto\">"
         "<path d=\"M0,0 L10,5 L0,10 Z\" fill=\"" +
         detail::class_color(cls) + "\"/></marker>\n";
  }
  s += "</defs>\n";
  s += "<rect class=\"frame\" x=\"" + detail::fmt(st.margin_px) + "\" y=\"" + detail::fmt(st.margin_px) + "\" width=\"" +
       detail::fmt(w) + "\" height=\"" + detail::fmt(h) + "\" fill=\"white\" stroke=\"black\" stroke-width=\"1\"/>\n";

  auto draw = [&](const VectorMap& m, bool dashed, const char* group) {
    s += std::string("<g class=\"") + group + "\">\n";
    for (const auto& e : m) {
      const auto& v = e.poly.vertices();
      std::string d = "M" + px(v.front());
      const std::size_t last = e.poly.closed() ? v.size() - 1 : v.size();
      for (std::size_t i = 1; i < last; ++i) d += " L" + px(v[i]);
      if (e.poly.closed()) d += " Z";
      s += "<path d=\"" + d + "\" fill=\"none\" stroke=\"" + detail::class_color(e.cls) + "\" stroke-width=\"2\"";
      if (dashed) s += " stroke-dasharray=\"6 4\"";
      s += " marker-end=\"url(#arrow-" + std::string(class_name(e.cls)) + ")\"/>\n";
    }
    s += "</g>\n";
  };
  draw(gt, true, "ground-truth");
  draw(pred, false, "prediction");

  const double lx = w + 2 * st.margin_px, ly = st.margin_px;
  s += "<g class=\"legend\" font-family=\"sans-serif\" font-size=\"12\">\n";
  for (int c = 0; c < kNumElementClasses; ++c) {
    const auto cls = static_cast<ElementClass>(c);
    const double y = ly + 18.0 * c + 10.0;
    s += "<line x1=\"" + detail::fmt(lx) + "\" y1=\"" + detail::fmt(y) + "\" x2=\"" + detail::fmt(lx + 24) + "\" y2=\"" +
         detail::fmt(y) + "\" stroke=\"" + detail::class_color(cls) + "\" stroke-width=\"3\"/>\n";
    s += "<text x=\"" + detail::fmt(lx + 30) + "\" y=\"" + detail::fmt(y + 4) + "\">" + std::string(class_name(cls)) +
         "</text>\n";
  }
  const double y1 = ly + 18.0 * kNumElementClasses + 10.0, y2 = y1 + 18.0;
  s += "<line x1=\"" + detail::fmt(lx) + "\" y1=\"" + detail::fmt(y1) + "\" x2=\"" + detail::fmt(lx + 24) + "\" y2=\"" +
       detail::fmt(y1) + "\" stroke=\"black\" stroke-width=\"2\" stroke-dasharray=\"6 4\"/>\n";
  s += "<text x=\"" + detail::fmt(lx + 30) + "\" y=\"" + detail::fmt(y1 + 4) + "\">ground truth</text>\n";
  s += "<line x1=\"" + detail::fmt(lx) + "\" y1=\"" + detail::fmt(y2) + "\" x2=\"" + detail::fmt(lx + 24) + "\" y2=\"" +
       detail::fmt(y2) + "\" stroke=\"black\" stroke-width=\"2\"/>\n";
  s += "<text x=\"" + detail::fmt(lx + 30) + "\" y=\"" + detail::fmt(y2 + 4) + "\">prediction</text>\n";
  s += "</g>\n</svg>\n";
  return s;
}

inline void write_svg(const std::filesystem::path& path, const std::string& svg) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << svg;
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace vmap
