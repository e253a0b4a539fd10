#include "latentlab/io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace latentlab {

using nlohmann::json;

void Dataset::validate() const {
  if (values.rows() < 1) throw InvalidArgument("Dataset: needs at least one row");
  if (!values.allFinite()) throw NonFinite("Dataset: values must be finite");
  if (!column_names.empty() && static_cast<Eigen::Index>(column_names.size()) != values.cols())
    throw InvalidArgument("Dataset: column name count does not match column count");
}

ParseError::ParseError(const std::string& what, std::size_t row, std::size_t col)
    : Error(what + (row > 0 ? " at row " + std::to_string(row) + ", column " + std::to_string(col) : std::string())),
      row_(row),
      col_(col) {}

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && (s[b] == ' ' || s[b] == '\t' || s[b] == '\r')) ++b;
  while (e > b && (s[e - 1] == ' ' || s[e - 1] == '\t' || s[e - 1] == '\r')) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> split_cells(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = line.find(',', start);
    cells.push_back(trim(std::string_view(line).substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return cells;
}

std::optional<double> parse_number(const std::string& cell) {
  if (cell.empty()) return std::nullopt;
  double value = 0.0;
  const char* first = cell.data();
  const char* last = cell.data() + cell.size();
  if (*first == '+') ++first;
  const auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last) return std::nullopt;
  return value;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

Dataset parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(text);
  std::string line;
  std::vector<std::size_t> line_numbers;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    rows.push_back(split_cells(line));
    line_numbers.push_back(line_no);
  }
  if (rows.empty()) throw ParseError("CSV: no data", 0, 0);

  Dataset ds;
  std::size_t first_data = 0;
  bool header = false;
  for (const auto& cell : rows.front())
    if (!parse_number(cell)) header = true;
  if (header) {
    ds.column_names = rows.front();
    first_data = 1;
  }
  const std::size_t width = rows.front().size();
  if (first_data >= rows.size()) throw ParseError("CSV: header without data rows", 0, 0);
  ds.values.resize(static_cast<Eigen::Index>(rows.size() - first_data), static_cast<Eigen::Index>(width));
  for (std::size_t r = first_data; r < rows.size(); ++r) {
    if (rows[r].size() != width)
      throw ParseError("CSV: expected " + std::to_string(width) + " columns, found " + std::to_string(rows[r].size()),
                       line_numbers[r], rows[r].size());
    for (std::size_t c = 0; c < width; ++c) {
      const auto v = parse_number(rows[r][c]);
      if (!v) throw ParseError("CSV: non-numeric cell '" + rows[r][c] + "'", line_numbers[r], c + 1);
      if (!std::isfinite(*v)) throw ParseError("CSV: non-finite cell '" + rows[r][c] + "'", line_numbers[r], c + 1);
      ds.values(static_cast<Eigen::Index>(r - first_data), static_cast<Eigen::Index>(c)) = *v;
    }
  }
  return ds;
}

Dataset read_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_csv(buf.str());
}

std::string format_csv(const Dataset& dataset) {
  std::string out;
  if (!dataset.column_names.empty()) {
    for (std::size_t c = 0; c < dataset.column_names.size(); ++c) {
      if (c) out += ',';
      out += dataset.column_names[c];
    }
    out += '\n';
  }
  for (Eigen::Index r = 0; r < dataset.values.rows(); ++r) {
    for (Eigen::Index c = 0; c < dataset.values.cols(); ++c) {
      if (c) out += ',';
      out += format_double(dataset.values(r, c));
    }
    out += '\n';
  }
  return out;
}

void write_csv(const Dataset& dataset, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << format_csv(dataset);
}

std::pair<Dataset, VectorXd> center(const Dataset& dataset) {
  VectorXd mean = column_mean(dataset.values);
  Dataset out = dataset;
  out.values.rowwise() -= mean.transpose();
  return {std::move(out), std::move(mean)};
}

namespace json_io {

namespace {

json matrix_json(const Eigen::Ref<const MatrixXd>& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    json row = json::array();
    for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
    rows.push_back(std::move(row));
  }
  return rows;
}

json vector_json(const Eigen::Ref<const VectorXd>& v) {
  json out = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(v(i));
  return out;
}

const json& field(const json& j, const char* name) {
  if (!j.is_object() || !j.contains(name)) throw ParseError(std::string("model JSON: missing field '") + name + "'", 0, 0);
  return j.at(name);
}

MatrixXd matrix_from(const json& j, Eigen::Index rows, Eigen::Index cols, const char* name) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != rows)
    throw ParseError(std::string("model JSON: '") + name + "' has the wrong number of rows", 0, 0);
  MatrixXd m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const json& row = j[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<Eigen::Index>(row.size()) != cols)
      throw ParseError(std::string("model JSON: '") + name + "' row " + std::to_string(r) + " has the wrong length", 0, 0);
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = row[static_cast<std::size_t>(c)].get<double>();
  }
  return m;
}

VectorXd vector_from(const json& j, Eigen::Index size, const char* name) {
  if (!j.is_array() || static_cast<Eigen::Index>(j.size()) != size)
    throw ParseError(std::string("model JSON: '") + name + "' has the wrong length", 0, 0);
  VectorXd v(size);
  for (Eigen::Index i = 0; i < size; ++i) v(i) = j[static_cast<std::size_t>(i)].get<double>();
  return v;
}

void expect_type(const json& j, const char* type) {
  if (field(j, "type").get<std::string>() != type)
    throw ParseError(std::string("model JSON: expected type '") + type + "'", 0, 0);
}

Eigen::Index dim_field(const json& j, const char* name) { return field(j, name).get<Eigen::Index>(); }

}  // namespace

json to_json(const fa::FactorModel<double>& m) {
  return {{"type", "fa"},
          {"d", m.d()},
          {"p", m.p()},
          {"loading", matrix_json(m.loading)},
          {"offset", vector_json(m.offset)},
          {"noise_diag", vector_json(m.noise_diag)}};
}

json to_json(const ppca::PpcaModel<double>& m) {
  return {{"type", "ppca"},
          {"d", m.d()},
          {"p", m.p()},
          {"loading", matrix_json(m.loading)},
          {"offset", vector_json(m.offset)},
          {"sigma2", m.sigma2},
          {"rank_warning", m.rank_warning}};
}

json to_json(const ppca::PcaModel<double>& m) {
  return {{"type", "pca"},
          {"d", m.components.rows()},
          {"p", m.components.cols()},
          {"components", matrix_json(m.components)},
          {"explained_variance", vector_json(m.explained_variance)},
          {"offset", vector_json(m.offset)}};
}

json to_json(const ad::Mlp& net) {
  json layers = json::array();
  for (const auto& l : net.layers) {
    layers.push_back({{"w", matrix_json(l.weights)},
                      {"b", vector_json(l.bias.row(0).transpose())},
                      {"act", ad::activation_name(l.activation)}});
  }
  return {{"layers", layers}};
}

json to_json(const vae::VaeModel& m) {
  return {{"type", "vae"},
          {"d", m.d()},
          {"p", m.p()},
          {"h", m.h()},
          {"encoder_trunk", to_json(m.encoder_trunk)},
          {"head_mean", to_json(m.head_mean)},
          {"head_logvar", to_json(m.head_logvar)},
          {"decoder", to_json(m.decoder)},
          {"kl_weight", m.kl_weight}};
}

fa::FactorModel<double> factor_model_from_json(const json& j) {
  expect_type(j, "fa");
  const auto d = dim_field(j, "d");
  const auto p = dim_field(j, "p");
  fa::FactorModel<double> m{matrix_from(field(j, "loading"), d, p, "loading"), vector_from(field(j, "offset"), d, "offset"),
                            vector_from(field(j, "noise_diag"), d, "noise_diag")};
  m.validate();
  return m;
}

ppca::PpcaModel<double> ppca_model_from_json(const json& j) {
  expect_type(j, "ppca");
  const auto d = dim_field(j, "d");
  const auto p = dim_field(j, "p");
  ppca::PpcaModel<double> m{matrix_from(field(j, "loading"), d, p, "loading"), vector_from(field(j, "offset"), d, "offset"),
                            field(j, "sigma2").get<double>(), j.value("rank_warning", false)};
  m.validate();
  return m;
}

ppca::PcaModel<double> pca_model_from_json(const json& j) {
  expect_type(j, "pca");
  const auto d = dim_field(j, "d");
  const auto p = dim_field(j, "p");
  return {matrix_from(field(j, "components"), d, p, "components"),
          vector_from(field(j, "explained_variance"), p, "explained_variance"), vector_from(field(j, "offset"), d, "offset")};
}

ad::Mlp mlp_from_json(const json& j) {
  ad::Mlp net;
  for (const json& l : field(j, "layers")) {
    const json& w = field(l, "w");
    if (!w.is_array() || w.empty() || !w[0].is_array()) throw ParseError("Mlp JSON: 'w' must be a non-empty matrix", 0, 0);
    const auto rows = static_cast<Eigen::Index>(w.size());
    const auto cols = static_cast<Eigen::Index>(w[0].size());
    ad::Layer layer;
    layer.weights = matrix_from(w, rows, cols, "w");
    layer.bias = vector_from(field(l, "b"), cols, "b").transpose();
    layer.activation = ad::parse_activation(field(l, "act").get<std::string>());
    net.layers.push_back(std::move(layer));
  }
  net.validate();
  return net;
}

vae::VaeModel vae_model_from_json(const json& j) {
  expect_type(j, "vae");
  vae::VaeModel m;
  m.encoder_trunk = mlp_from_json(field(j, "encoder_trunk"));
  m.head_mean = mlp_from_json(field(j, "head_mean"));
  m.head_logvar = mlp_from_json(field(j, "head_logvar"));
  m.decoder = mlp_from_json(field(j, "decoder"));
  m.kl_weight = j.value("kl_weight", 1.0);
  m.validate();
  if (m.d() != dim_field(j, "d") || m.p() != dim_field(j, "p") || m.h() != dim_field(j, "h"))
    throw ParseError("VAE JSON: declared dimensions do not match the networks", 0, 0);
  return m;
}

AnyModel model_from_json(const json& j) {
  const auto type = field(j, "type").get<std::string>();
  if (type == "fa") return factor_model_from_json(j);
  if (type == "ppca") return ppca_model_from_json(j);
  if (type == "pca") return pca_model_from_json(j);
  if (type == "vae") return vae_model_from_json(j);
  throw ParseError("model JSON: unknown type '" + type + "'", 0, 0);
}

json model_to_json(const AnyModel& m) {
  return std::visit([](const auto& model) { return to_json(model); }, m);
}

AnyModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("model JSON: ") + e.what(), 0, 0);
  }
  return model_from_json(j);
}

void save_model(const AnyModel& m, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << model_to_json(m).dump(2) << '\n';
}

}  // namespace json_io

void write_fit_trace_csv(const fa::FitTrace& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "iteration,loglik\n";
  for (std::size_t i = 0; i < trace.loglik_per_iter.size(); ++i)
    out << (i + 1) << ',' << format_double(trace.loglik_per_iter[i]) << '\n';
}

void write_vae_trace_csv(const std::vector<vae::EpochRecord>& trace, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << "epoch,elbo_mean,recon_mean,kl_mean\n";
  for (const auto& r : trace)
    out << r.epoch << ',' << format_double(r.elbo_mean) << ',' << format_double(r.recon_mean) << ','
        << format_double(r.kl_mean) << '\n';
}

json RunReport::to_json() const {
  json m = json::object();
  for (const auto& [k, v] : metrics) {
    if (!std::isfinite(v)) throw NonFinite("RunReport: metric '" + k + "' is not finite");
    m[k] = v;
  }
  json j = {{"command", command}, {"seed", seed}, {"metrics", m}};
  j["trace_path"] = trace_path ? json(*trace_path) : json(nullptr);
  return j;
}

}  // namespace latentlab
