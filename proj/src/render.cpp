#include "links/render.hpp"

#include "links/errors.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace links::render {

namespace {

constexpr double kPanel = 320.0;
constexpr double kMargin = 20.0;

struct Frame
{
   Eigen::Vector2d lo;
   double scale = 1.0;

   Eigen::Vector2d map(const Eigen::Vector2d& p, double x0) const
   {
      return {x0 + kMargin + (p.x() - lo.x()) * scale, kMargin + (p.y() - lo.y()) * scale};
   }
};

Frame fit(const Eigen::Matrix<double, Eigen::Dynamic, 2>& pts)
{
   Frame f;
   f.lo = pts.colwise().minCoeff().transpose();
   const Eigen::Vector2d hi = pts.colwise().maxCoeff().transpose();
   const double extent      = std::max((hi - f.lo).maxCoeff(), 1e-12);
   f.scale                  = (kPanel - 2.0 * kMargin) / extent;
   const Eigen::Vector2d pad = ((kPanel - 2.0 * kMargin) / f.scale - (hi - f.lo).array()).matrix() / 2.0;
   f.lo -= pad;
   return f;
}

const char* joint_colour(const SkeletonTopology& topo, int j)
{
   const auto& l = topo.segment(Segment::left);
   const auto& r = topo.segment(Segment::right);
   const bool in_l = std::find(l.begin(), l.end(), j) != l.end();
   const bool in_r = std::find(r.begin(), r.end(), j) != r.end();
   if(in_l && !in_r) return "#1f77b4";
   if(in_r && !in_l) return "#d62728";
   return "#333333";
}

void draw(std::ostringstream& out, const Eigen::Matrix<double, Eigen::Dynamic, 2>& pts, const Frame& f, double x0,
          const SkeletonTopology& topo, bool dashed)
{
   for(const auto& [p, c] : topo.bones) {
      const auto a = f.map(pts.row(p).transpose(), x0);
      const auto b = f.map(pts.row(c).transpose(), x0);
      out << "<line x1=\"" << a.x() << "\" y1=\"" << a.y() << "\" x2=\"" << b.x() << "\" y2=\"" << b.y()
          << "\" stroke=\"" << (dashed ? "#aaaaaa" : joint_colour(topo, c)) << "\" stroke-width=\"3\""
          << (dashed ? " stroke-dasharray=\"4 3\"" : "") << "/>\n";
   }
   if(dashed) return;
   for(Eigen::Index j = 0; j < pts.rows(); ++j) {
      const auto a = f.map(pts.row(j).transpose(), x0);
      out << "<circle cx=\"" << a.x() << "\" cy=\"" << a.y() << "\" r=\"3.5\" fill=\""
          << joint_colour(topo, int(j)) << "\"/>\n";
   }
}

std::string header(double width, const std::string& title)
{
   std::ostringstream out;
   out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << kPanel + 20.0
       << "\" viewBox=\"0 0 " << width << ' ' << kPanel + 20.0 << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
   if(!title.empty())
      out << "<text x=\"8\" y=\"" << kPanel + 12.0 << "\" font-family=\"sans-serif\" font-size=\"12\">" << title
          << "</text>\n";
   return out.str();
}

} // namespace

std::string svg_2d(const Pose2D& pose, const SkeletonTopology& topo, const std::string& title)
{
   if(pose.rows() != topo.joint_count()) throw std::invalid_argument("svg_2d: pose does not match topology");
   std::ostringstream out;
   out << header(kPanel, title);
   draw(out, pose, fit(pose), 0.0, topo, false);
   out << "</svg>\n";
   return out.str();
}

std::string svg_3d(const Pose3D& pose, const SkeletonTopology& topo, const std::optional<Pose3D>& reference,
                   const std::string& title)
{
   if(pose.rows() != topo.joint_count()) throw std::invalid_argument("svg_3d: pose does not match topology");
   std::ostringstream out;
   out << header(2.0 * kPanel, title);
   for(int panel = 0; panel < 2; ++panel) {
      const int hcol = panel == 0 ? 0 : 2;
      auto project   = [&](const Pose3D& p) {
         Eigen::Matrix<double, Eigen::Dynamic, 2> q(p.rows(), 2);
         q.col(0) = p.col(hcol);
         q.col(1) = p.col(1);
         return q;
      };
      auto pts = project(pose);
      Eigen::Matrix<double, Eigen::Dynamic, 2> all = pts;
      if(reference) {
         const auto ref = project(*reference);
         all.conservativeResize(pts.rows() + ref.rows(), 2);
         all.bottomRows(ref.rows()) = ref;
      }
      const Frame f   = fit(all);
      const double x0 = panel * kPanel;
      if(reference) draw(out, project(*reference), f, x0, topo, true);
      draw(out, pts, f, x0, topo, false);
   }
   out << "</svg>\n";
   return out.str();
}

void write_text(const std::filesystem::path& path, const std::string& text)
{
   if(path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
   std::ofstream out(path);
   if(!out) throw ConfigError("cannot write '" + path.string() + "'");
   out << text;
}

} // namespace links::render
