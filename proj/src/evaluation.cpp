#include "cdre/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <Eigen/Dense>

#include "cdre/distortion_codec.hpp"
#include "cdre/error.hpp"

namespace cdre::eval {

namespace fs = std::filesystem;
using nlohmann::json;

RateTaskCurve rate_task_curve(const model::CdreModel& model, std::span<const int> qualities,
                              const std::vector<tasks::SyntheticSample>& data,
                              bool include_side_channel, bool use_cdre, std::string label) {
  if (qualities.empty()) throw invalid_argument("rate_task_curve needs at least one quality");
  if (data.empty()) throw invalid_argument("rate_task_curve needs an evaluation set");
  RateTaskCurve curve;
  curve.label = std::move(label);
  for (int q : qualities) {
    const codec::CodecQuality quality(q);
    double base = 0.0, side = 0.0;
    std::vector<int> pred, labels;
    for (const auto& s : data) {
      const auto pair = codec::compress(s.image, quality);
      base += pair.base_bpp;
      Tensor logits;
      if (use_cdre) {
        const auto bytes = distortion::serialize(model.encode_bits(pair));
        const auto bits = distortion::deserialize(bytes);
        side += distortion::side_bpp(bits);
        logits = model.logits_with_bits(pair.compressed, bits);
      } else {
        logits = model.logits_plain(pair.compressed);
      }
      pred.push_back(tasks::argmax(logits.data));
      labels.push_back(s.label);
    }
    const double n = static_cast<double>(data.size());
    CurvePoint p;
    p.quality = q;
    p.bpp = base / n + (use_cdre && include_side_channel ? side / n : 0.0);
    p.metric = tasks::task_metric(pred, labels);
    curve.points.push_back(p);
  }
  return curve;
}

// ---------------------------------------------------------------------------
// BD-rate

namespace {

struct Prepared {
  std::vector<double> metric;
  std::vector<double> log_rate;
};

Prepared prepare(const RateTaskCurve& c, const char* role) {
  const std::string name = std::string(role) + " curve '" + c.label + "'";
  if (c.points.size() < 4) {
    throw data_error(name + " has " + std::to_string(c.points.size()) +
                     " points; BD-rate needs at least 4");
  }
  auto pts = c.points;
  for (const auto& p : pts) {
    if (!(p.bpp > 0.0) || !std::isfinite(p.bpp) || !std::isfinite(p.metric)) {
      throw data_error(name + " has a non-positive or non-finite point");
    }
  }
  std::stable_sort(pts.begin(), pts.end(),
                   [](const CurvePoint& a, const CurvePoint& b) { return a.bpp < b.bpp; });
  Prepared out;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (i > 0 && pts[i].bpp <= pts[i - 1].bpp) throw data_error(name + " repeats a bpp value");
    if (i > 0 && pts[i].metric <= pts[i - 1].metric) {
      throw data_error("non-monotonic metric in " + name);
    }
    out.metric.push_back(pts[i].metric);
    out.log_rate.push_back(std::log10(pts[i].bpp));
  }
  return out;
}

// Least-squares cubic log_rate(metric), coefficients lowest order first.
Eigen::Vector4d fit_cubic(const Prepared& p) {
  const auto n = static_cast<Eigen::Index>(p.metric.size());
  Eigen::MatrixXd a(n, 4);
  Eigen::VectorXd b(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = p.metric[i];
    a(i, 0) = 1.0;
    a(i, 1) = m;
    a(i, 2) = m * m;
    a(i, 3) = m * m * m;
    b(i) = p.log_rate[i];
  }
  return a.colPivHouseholderQr().solve(b);
}

double integrate(const Eigen::Vector4d& c, double lo, double hi) {
  double s = 0.0;
  for (int k = 0; k < 4; ++k) {
    s += c(k) * (std::pow(hi, k + 1) - std::pow(lo, k + 1)) / (k + 1);
  }
  return s;
}

} // namespace

double bd_rate(const RateTaskCurve& anchor, const RateTaskCurve& test) {
  const auto a = prepare(anchor, "anchor");
  const auto t = prepare(test, "test");
  const double lo = std::max(a.metric.front(), t.metric.front());
  const double hi = std::min(a.metric.back(), t.metric.back());
  if (!(hi > lo)) throw data_error("disjoint quality ranges");
  const double ia = integrate(fit_cubic(a), lo, hi);
  const double it = integrate(fit_cubic(t), lo, hi);
  const double mean_diff = (it - ia) / (hi - lo);
  return (std::pow(10.0, mean_diff) - 1.0) * 100.0;
}

// ---------------------------------------------------------------------------
// Curve files

json curve_to_json(const RateTaskCurve& c) {
  json pts = json::array();
  for (const auto& p : c.points) {
    json e{{"bpp", p.bpp}, {"metric", p.metric}};
    if (p.quality > 0) e["quality"] = p.quality;
    pts.push_back(e);
  }
  return json{{"label", c.label}, {"config_hash", c.config_hash}, {"points", pts}};
}

RateTaskCurve curve_from_json(const json& j) {
  try {
    RateTaskCurve c;
    c.label = j.at("label").get<std::string>();
    c.config_hash = j.value("config_hash", "");
    for (const auto& e : j.at("points")) {
      CurvePoint p;
      p.bpp = e.at("bpp").get<double>();
      p.metric = e.at("metric").get<double>();
      p.quality = e.value("quality", 0);
      c.points.push_back(p);
    }
    return c;
  } catch (const json::exception& e) {
    throw data_error(std::string("malformed curve: ") + e.what());
  }
}

std::string curve_to_csv(const RateTaskCurve& c) {
  std::ostringstream os;
  if (!c.config_hash.empty()) os << "# config_hash=" << c.config_hash << "\n";
  os << "label,bpp,metric,quality\n";
  char buf[96];
  for (const auto& p : c.points) {
    std::snprintf(buf, sizeof buf, ",%.17g,%.17g,%d\n", p.bpp, p.metric, p.quality);
    os << c.label << buf;
  }
  return os.str();
}

RateTaskCurve curve_from_csv(const std::string& text) {
  RateTaskCurve c;
  std::istringstream is(text);
  std::string line;
  bool header = false;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      const auto pos = line.find("config_hash=");
      if (pos != std::string::npos) c.config_hash = line.substr(pos + 12);
      continue;
    }
    if (!header) {
      if (line.rfind("label,bpp,metric", 0) != 0) {
        throw data_error("curve csv: expected header 'label,bpp,metric'");
      }
      header = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells.size() < 3) throw data_error("curve csv line " + std::to_string(lineno) + ": too few fields");
    try {
      CurvePoint p;
      std::size_t used = 0;
      p.bpp = std::stod(cells[1], &used);
      if (used != cells[1].size()) throw std::invalid_argument("bpp");
      p.metric = std::stod(cells[2], &used);
      if (used != cells[2].size()) throw std::invalid_argument("metric");
      if (cells.size() > 3 && !cells[3].empty()) p.quality = std::stoi(cells[3]);
      if (c.label.empty()) c.label = cells[0];
      c.points.push_back(p);
    } catch (const std::exception&) {
      throw data_error("curve csv line " + std::to_string(lineno) + ": bad number");
    }
  }
  if (!header) throw data_error("curve csv: missing header");
  return c;
}

void write_curve(const fs::path& path, const RateTaskCurve& c) {
  std::ofstream os(path);
  if (!os) throw data_error("cannot write " + path.string());
  if (path.extension() == ".csv") {
    os << curve_to_csv(c);
  } else {
    os << curve_to_json(c).dump(2) << "\n";
  }
  if (!os) throw data_error("failed writing " + path.string());
}

RateTaskCurve read_curve(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw data_error("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string text = ss.str();
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') {
    try {
      return curve_from_json(json::parse(text));
    } catch (const json::parse_error& e) {
      throw data_error(path.string() + ": " + e.what());
    }
  }
  return curve_from_csv(text);
}

std::string plot_data(std::span<const RateTaskCurve> curves) {
  std::ostringstream os;
  char buf[64];
  for (std::size_t i = 0; i < curves.size(); ++i) {
    if (i > 0) os << "\n\n";
    os << "# " << curves[i].label << "\n# bpp metric\n";
    for (const auto& p : curves[i].points) {
      std::snprintf(buf, sizeof buf, "%.10g %.10g\n", p.bpp, p.metric);
      os << buf;
    }
  }
  return os.str();
}

// ---------------------------------------------------------------------------
// Overhead

std::size_t count_params(const nn::ParamStore& store, std::string_view group) {
  return store.count(group);
}

namespace {

template <typename Map, typename Groups>
auto sum_groups(const Map& m, const Groups& groups) {
  typename Map::mapped_type total{};
  for (const char* g : groups) {
    auto it = m.find(g);
    if (it != m.end()) total += it->second;
  }
  return total;
}

} // namespace

std::size_t OverheadReport::encoder_side_params() const {
  return sum_groups(params_by_group, kEncoderSideGroups);
}
double OverheadReport::encoder_side_macs_per_pixel() const {
  return sum_groups(macs_per_pixel_by_group, kEncoderSideGroups);
}
std::size_t OverheadReport::decoder_side_params() const {
  return sum_groups(params_by_group, kDecoderSideGroups);
}
double OverheadReport::decoder_side_macs_per_pixel() const {
  return sum_groups(macs_per_pixel_by_group, kDecoderSideGroups);
}

double macs_per_pixel(double macs, int height, int width) {
  if (height <= 0 || width <= 0) throw invalid_argument("macs_per_pixel needs H*W > 0");
  return macs / (static_cast<double>(height) * width);
}

OverheadReport overhead(const model::CdreModel& model, int height, int width) {
  if (height <= 0 || width <= 0) throw invalid_argument("overhead needs H*W > 0");
  OverheadReport r;
  r.height = height;
  r.width = width;
  const auto& store = model.params();
  for (const auto& g : store.groups()) r.params_by_group[g] = store.count(g);
  const int lh = distortion::latent_size(height), lw = distortion::latent_size(width);
  const bool cnn = model.config().backbone.family == tasks::Family::kCnn;
  auto mpp = [&](double macs) { return macs_per_pixel(macs, height, width); };
  r.macs_per_pixel_by_group["extractor"] = mpp(2.0 * model.extractor().macs(height, width));
  r.macs_per_pixel_by_group["dist_enc"] = mpp(model.encoder().encoder_macs(height, width));
  r.macs_per_pixel_by_group["modulation"] = mpp(model.encoder().conditioning_macs(height, width));
  r.macs_per_pixel_by_group["dist_dec"] =
      mpp(cnn ? model.cnn_decoder().macs(lh, lw) : model.token_decoder().macs(lh, lw));
  r.macs_per_pixel_by_group["transform"] =
      mpp(model.embedding().transform_macs(height, width, lh * lw));
  r.macs_per_pixel_by_group["embed"] = mpp(model.embedding().embed_macs(height, width, lh * lw));
  r.side_bpp = distortion::side_bpp(model.config().latent_channels, height, width);
  return r;
}

// ---------------------------------------------------------------------------
// Ablations

AblationKind parse_ablation_kind(const std::string& name) {
  if (name == "extractor_parts") return AblationKind::kExtractorParts;
  if (name == "embedding_depth") return AblationKind::kEmbeddingDepth;
  if (name == "channels") return AblationKind::kChannels;
  throw invalid_argument("unknown ablation kind '" + name +
                         "' (expected extractor_parts|embedding_depth|channels)");
}

std::string ablation_kind_name(AblationKind k) {
  switch (k) {
    case AblationKind::kExtractorParts: return "extractor_parts";
    case AblationKind::kEmbeddingDepth: return "embedding_depth";
    default: return "channels";
  }
}

std::vector<AblationVariant> ablation_variants(AblationKind kind, const config::RunConfig& base) {
  std::vector<AblationVariant> out;
  switch (kind) {
    case AblationKind::kExtractorParts: {
      auto v = base;
      v.cdre.cosine_term = false;
      out.push_back({"no_cosine", v});
      v = base;
      v.cdre.multi_scale = false;
      out.push_back({"single_scale", v});
      v = base;
      v.cdre.multi_scale = false;
      v.cdre.cosine_term = false;
      out.push_back({"single_scale_no_cosine", v});
      v = base;
      v.cdre.modulation = false;
      out.push_back({"concat_fusion", v});
      break;
    }
    case AblationKind::kEmbeddingDepth:
      for (int d : {1, 2, 3, 4}) {
        auto v = base;
        v.cdre.depth = d;
        out.push_back({"depth_" + std::to_string(d), v});
      }
      break;
    case AblationKind::kChannels:
      for (int ch : {1, 3, 6, 10, 16}) {
        auto v = base;
        v.cdre.channels = ch;
        out.push_back({"channels_" + std::to_string(ch), v});
      }
      break;
  }
  return out;
}

std::string AblationTable::to_csv() const {
  std::ostringstream os;
  os << "# kind=" << ablation_kind_name(kind) << " anchor=" << anchor_label
     << " config_hash=" << base_config_hash << "\n";
  os << "row,config_hash,changed,bd_rate_percent,accuracy_at_lowest_quality,error\n";
  char buf[64];
  for (const auto& r : rows) {
    std::string changed;
    for (const auto& f : r.changed_fields) changed += (changed.empty() ? "" : ";") + f;
    os << r.name << "," << r.config_hash << "," << changed << ",";
    if (r.bd_rate) {
      std::snprintf(buf, sizeof buf, "%.4f", *r.bd_rate);
      os << buf;
    }
    std::snprintf(buf, sizeof buf, ",%.4f,", r.accuracy_at_lowest_quality);
    os << buf << r.error << "\n";
  }
  return os.str();
}

AblationTable run_ablation(AblationKind kind, const config::RunConfig& base,
                           const experiment::Progress& progress) {
  base.validate();
  AblationTable table;
  table.kind = kind;
  table.base_config_hash = config::config_hash_hex(base);
  const auto splits = experiment::make_splits(base);
  const training::TrainingData data(splits.train, base.codec.train_qualities);
  const auto& qualities = base.eval.qualities;
  const bool side = base.eval.include_side_channel;

  // Backbone and head are pretrained once; every variant shares them.
  auto donor = std::make_unique<model::CdreModel>(config::model_config(base));
  training::pretrain_backbone(*donor, splits.train, config::pretrain_config(base));
  if (progress) progress("pretrained shared backbone");

  if (kind == AblationKind::kExtractorParts) {
    const auto full = experiment::train_run(base, data, donor.get());
    table.anchor_label = "cdre_full";
    table.anchor = rate_task_curve(*full.model, qualities, splits.eval, side, true, "cdre_full");
  } else {
    table.anchor_label = "baseline";
    table.anchor = rate_task_curve(*donor, qualities, splits.eval, false, false, "baseline");
  }
  table.anchor.config_hash = table.base_config_hash;

  for (const auto& v : ablation_variants(kind, base)) {
    AblationRow row;
    row.name = v.name;
    row.config_hash = config::config_hash_hex(v.config);
    row.changed_fields = config::diff_fields(base, v.config);
    const auto run = experiment::train_run(v.config, data, donor.get());
    row.curve = rate_task_curve(*run.model, qualities, splits.eval, side, true, v.name);
    row.curve.config_hash = row.config_hash;
    const auto lowest = std::min_element(row.curve.points.begin(), row.curve.points.end(),
                                         [](const CurvePoint& a, const CurvePoint& b) {
                                           return a.quality < b.quality;
                                         });
    row.accuracy_at_lowest_quality = lowest->metric;
    try {
      row.bd_rate = bd_rate(table.anchor, row.curve);
    } catch (const Error& e) {
      row.error = e.what();
    }
    if (progress) progress("row " + v.name + " done");
    table.rows.push_back(std::move(row));
  }
  return table;
}

} // namespace cdre::eval
