#include "links/checkpoint.hpp"

#include "links/errors.hpp"

#include <fstream>
#include <sstream>

namespace links {

Json matrix_to_json(const nn::Matrix& m)
{
   Json rows = Json::array();
   for(Eigen::Index i = 0; i < m.rows(); ++i) {
      Json row = Json::array();
      for(Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
      rows.push_back(std::move(row));
   }
   return Json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::move(rows)}};
}

nn::Matrix matrix_from_json(const Json& j)
{
   const auto rows = j.at("rows").get<Eigen::Index>();
   const auto cols = j.at("cols").get<Eigen::Index>();
   const auto& data = j.at("data");
   if(rows < 0 || cols < 0 || Eigen::Index(data.size()) != rows)
      throw DataError("checkpoint: matrix row count mismatch");
   nn::Matrix m(rows, cols);
   for(Eigen::Index i = 0; i < rows; ++i) {
      const auto& row = data.at(size_t(i));
      if(Eigen::Index(row.size()) != cols) throw DataError("checkpoint: ragged matrix");
      for(Eigen::Index k = 0; k < cols; ++k) m(i, k) = row.at(size_t(k)).get<double>();
   }
   return m;
}

Json params_to_json(const nn::Module& module)
{
   Json out = Json::array();
   for(const auto* p : module.params()) out.push_back(matrix_to_json(p->value));
   return out;
}

void params_from_json(nn::Module& module, const Json& j)
{
   auto ps = module.params();
   if(!j.is_array() || j.size() != ps.size())
      throw DataError("checkpoint: parameter tensor count mismatch");
   for(size_t i = 0; i < ps.size(); ++i) {
      nn::Matrix m = matrix_from_json(j[i]);
      if(m.rows() != ps[i]->value.rows() || m.cols() != ps[i]->value.cols())
         throw DataError("checkpoint: parameter shape mismatch at tensor " + std::to_string(i));
      ps[i]->value = std::move(m);
      ps[i]->grad.setZero();
   }
   module.touch();
}

Json read_json_file(const std::filesystem::path& path)
{
   std::ifstream in(path);
   if(!in) throw ConfigError("cannot open '" + path.string() + "'");
   try {
      return Json::parse(in);
   } catch(const Json::exception& e) {
      throw DataError("malformed JSON in '" + path.string() + "': " + e.what());
   }
}

void write_json_file(const std::filesystem::path& path, const Json& j)
{
   if(path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
   std::ofstream out(path);
   if(!out) throw ConfigError("cannot write '" + path.string() + "'");
   out << j.dump(1) << '\n';
   if(!out) throw ConfigError("write failed for '" + path.string() + "'");
}

void check_header(const Json& j, const std::string& kind)
{
   if(!j.is_object() || j.value("format_version", -1) != kCheckpointFormatVersion)
      throw DataError("checkpoint: unsupported format_version");
   if(j.value("kind", std::string()) != kind)
      throw DataError("checkpoint: expected kind '" + kind + "', got '"
                      + j.value("kind", std::string()) + "'");
}

} // namespace links
