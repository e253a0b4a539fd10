#pragma once

#include "latentlab/autodiff.hpp"
#include "latentlab/core.hpp"
#include "latentlab/factor_analysis.hpp"
#include "latentlab/ppca.hpp"
#include "latentlab/vae.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace latentlab {

/// n x d numeric table with optional column names.
struct Dataset {
  MatrixXd values;
  std::vector<std::string> column_names;

  void validate() const;
};

class ParseError : public Error {
 public:
  /// `row` and `col` are 1-based positions in the file; 0 means "not applicable".
  ParseError(const std::string& what, std::size_t row, std::size_t col);
  std::size_t row() const noexcept { return row_; }
  std::size_t col() const noexcept { return col_; }

 private:
  std::size_t row_;
  std::size_t col_;
};

/// Comma-separated numbers; a first row containing any non-numeric cell is
/// taken as the header.
Dataset parse_csv(const std::string& text);
Dataset read_csv(const std::filesystem::path& path);
/// Emits 17 significant digits so read(write(D)) is exact.
std::string format_csv(const Dataset& dataset);
void write_csv(const Dataset& dataset, const std::filesystem::path& path);

/// Returns the centered data and the column means.
std::pair<Dataset, VectorXd> center(const Dataset& dataset);

namespace json_io {

using nlohmann::json;

json to_json(const fa::FactorModel<double>& m);
json to_json(const ppca::PpcaModel<double>& m);
json to_json(const ppca::PcaModel<double>& m);
json to_json(const ad::Mlp& net);
json to_json(const vae::VaeModel& m);

fa::FactorModel<double> factor_model_from_json(const json& j);
ppca::PpcaModel<double> ppca_model_from_json(const json& j);
ppca::PcaModel<double> pca_model_from_json(const json& j);
ad::Mlp mlp_from_json(const json& j);
vae::VaeModel vae_model_from_json(const json& j);

using AnyModel = std::variant<fa::FactorModel<double>, ppca::PpcaModel<double>, ppca::PcaModel<double>, vae::VaeModel>;

/// Dispatches on the "type" field.
AnyModel model_from_json(const json& j);
json model_to_json(const AnyModel& m);

AnyModel load_model(const std::filesystem::path& path);
void save_model(const AnyModel& m, const std::filesystem::path& path);

}  // namespace json_io

void write_fit_trace_csv(const fa::FitTrace& trace, const std::filesystem::path& path);
void write_vae_trace_csv(const std::vector<vae::EpochRecord>& trace, const std::filesystem::path& path);

/// Outcome of one CLI run.
struct RunReport {
  std::string command;
  std::uint64_t seed = 0;
  std::map<std::string, double> metrics;
  std::optional<std::string> trace_path;

  nlohmann::json to_json() const;
};

}  // namespace latentlab
