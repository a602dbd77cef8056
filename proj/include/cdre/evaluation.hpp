#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "cdre/backbones.hpp"
#include "cdre/config.hpp"
#include "cdre/experiment.hpp"
#include "cdre/model.hpp"

namespace cdre::eval {

struct CurvePoint {
  double bpp = 0.0;
  double metric = 0.0;
  int quality = 0;  // 0 when unknown (e.g. hand-written curves)
};

struct RateTaskCurve {
  std::string label;
  std::vector<CurvePoint> points;
  std::string config_hash;
};

// One point per quality: mean base bpp over `data` (plus side bpp when the
// CDRE path is active and include_side_channel is set) against top-1
// accuracy. use_cdre=false evaluates the plain backbone.
RateTaskCurve rate_task_curve(const model::CdreModel& model, std::span<const int> qualities,
                              const std::vector<tasks::SyntheticSample>& data,
                              bool include_side_channel, bool use_cdre, std::string label);

// Bjontegaard delta rate in percent; negative means the test curve needs
// fewer bits for the same metric.
double bd_rate(const RateTaskCurve& anchor, const RateTaskCurve& test);

nlohmann::json curve_to_json(const RateTaskCurve& c);
RateTaskCurve curve_from_json(const nlohmann::json& j);
// CSV: header "label,bpp,metric[,quality]", one row per point.
std::string curve_to_csv(const RateTaskCurve& c);
RateTaskCurve curve_from_csv(const std::string& text);

// .csv files use CSV; everything else JSON. Reading sniffs the content.
void write_curve(const std::filesystem::path& path, const RateTaskCurve& c);
RateTaskCurve read_curve(const std::filesystem::path& path);

// Plot data: one block per curve, "# label" then "bpp metric" rows, blocks
// separated by two blank lines.
std::string plot_data(std::span<const RateTaskCurve> curves);

std::size_t count_params(const nn::ParamStore& store, std::string_view group);

inline const char* kEncoderSideGroups[] = {"extractor", "dist_enc", "modulation"};
inline const char* kDecoderSideGroups[] = {"dist_dec", "transform", "embed"};

struct OverheadReport {
  std::map<std::string, std::size_t> params_by_group;
  std::map<std::string, double> macs_per_pixel_by_group;
  double side_bpp = 0.0;
  int height = 0, width = 0;

  std::size_t encoder_side_params() const;
  double encoder_side_macs_per_pixel() const;
  std::size_t decoder_side_params() const;
  double decoder_side_macs_per_pixel() const;
};

// Analytic parameter and MAC accounting for a source of size H x W. The
// extractor runs on both the original and the compressed frame.
OverheadReport overhead(const model::CdreModel& model, int height, int width);

double macs_per_pixel(double macs, int height, int width);

// ---------------------------------------------------------------------------
// Ablations

enum class AblationKind { kExtractorParts, kEmbeddingDepth, kChannels };

AblationKind parse_ablation_kind(const std::string& name);
std::string ablation_kind_name(AblationKind k);

struct AblationVariant {
  std::string name;
  config::RunConfig config;
};

// Row configs in table order. extractor_parts follows the extractor table
// (no cosine; single scale; both; concatenation instead of modulation);
// embedding_depth is {1,2,3,4}; channels is {1,3,6,10,16}.
std::vector<AblationVariant> ablation_variants(AblationKind kind, const config::RunConfig& base);

struct AblationRow {
  std::string name;
  std::string config_hash;
  std::vector<std::string> changed_fields;
  RateTaskCurve curve;
  std::optional<double> bd_rate;
  std::string error;  // set when bd_rate could not be computed
  double accuracy_at_lowest_quality = 0.0;
};

struct AblationTable {
  AblationKind kind = AblationKind::kChannels;
  std::string anchor_label;
  std::string base_config_hash;
  RateTaskCurve anchor;
  std::vector<AblationRow> rows;

  std::string to_csv() const;
};

// Trains and evaluates every variant with identical seeds. The anchor is
// the full model for extractor_parts and the plain backbone otherwise.
AblationTable run_ablation(AblationKind kind, const config::RunConfig& base,
                           const experiment::Progress& progress = nullptr);

} // namespace cdre::eval
