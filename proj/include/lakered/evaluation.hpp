#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lakered/checkpoint.hpp"
#include "lakered/image.hpp"
#include "lakered/nn.hpp"
#include "lakered/png_io.hpp"

namespace lakered {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Desk-scale feature extractor: a frozen, fixed-seed convolutional network.
// Weights ship with the repository; the id binds every report to the exact
// weights used, and numbers from different extractors are never comparable.
// ---------------------------------------------------------------------------

struct DeskExtractor {
  static constexpr int kInputSize = 64;
  static constexpr int kFeatureDim = 64;
  static constexpr uint64_t kInitSeed = 0x4c414b45524544ull;

  nn::Conv2d<float> conv1, conv2, conv3;
  std::string id = "deskconv-v1";

  static DeskExtractor create_v1() {
    DeskExtractor e;
    Rng rng(kInitSeed);
    e.conv1.init("extractor.conv1", 3, 16, 3, 2, rng);
    e.conv2.init("extractor.conv2", 16, 32, 3, 2, rng);
    e.conv3.init("extractor.conv3", 32, 32, 3, 2, rng);
    return e;
  }

  void save(const std::string& path) const {
    Checkpoint ck;
    ck.set_meta("kind", "desk-extractor");
    ck.set_meta("version", "v1");
    auto& self = const_cast<DeskExtractor&>(*this);
    nn::ParamSet<float> ps;
    self.conv1.collect(ps);
    self.conv2.collect(ps);
    self.conv3.collect(ps);
    ck.add_params(ps);
    ck.save(path);
  }

  static DeskExtractor load(const std::string& path) {
    DeskExtractor e = create_v1();
    Checkpoint ck = Checkpoint::load(path);
    if (ck.get_meta("kind").value_or("") != "desk-extractor")
      throw CheckpointError("not an extractor file: " + path);
    nn::ParamSet<float> ps;
    e.conv1.collect(ps);
    e.conv2.collect(ps);
    e.conv3.collect(ps);
    ck.load_params(ps);
    e.id = "deskconv-v1:" + hex64(file_hash(path));
    return e;
  }

  // One feature row per image: per-channel mean and per-channel RMS of the
  // final activation map.
  VectorXd features(const GridF& image) {
    GridF in = image;
    if (in.h != kInputSize || in.w != kInputSize)
      in = resize_bilinear(in, kInputSize, kInputSize);
    auto silu = [](GridF g) {
      for (auto& v : g.v) v = v * nn::sigmoid(v);
      return g;
    };
    GridF h = silu(conv1.forward(in));
    h = silu(conv2.forward(h));
    h = silu(conv3.forward(h));
    const int c = h.c;
    VectorXd out(2 * c);
    out.setZero();
    const int cells = h.h * h.w;
    for (int cell = 0; cell < cells; ++cell)
      for (int ch = 0; ch < c; ++ch) {
        const double v = h.v[size_t(cell) * c + ch];
        out[ch] += v;
        out[c + ch] += v * v;
      }
    for (int ch = 0; ch < c; ++ch) {
      out[ch] /= cells;
      out[c + ch] = std::sqrt(out[c + ch] / cells);
    }
    return out;
  }
};

inline MatrixXd extract_features(const std::vector<GridF>& images,
                                 DeskExtractor& extractor) {
  if (images.empty()) throw DataError("extract_features: empty image list");
  MatrixXd out(images.size(), DeskExtractor::kFeatureDim);
  for (size_t i = 0; i < images.size(); ++i)
    out.row(Eigen::Index(i)) = extractor.features(images[i]).transpose();
  return out;
}

// ---------------------------------------------------------------------------
// Gaussian statistics and the Frechet distance.
// ---------------------------------------------------------------------------

struct GaussianStats {
  VectorXd mean;
  MatrixXd covariance;  // symmetric PSD
};

inline GaussianStats gaussian_stats(const MatrixXd& features) {
  const Eigen::Index n = features.rows();
  if (n < 2) throw DataError("gaussian_stats: need at least 2 samples");
  GaussianStats s;
  s.mean = features.colwise().mean();
  MatrixXd centered = features.rowwise() - s.mean.transpose();
  s.covariance = centered.transpose() * centered / double(n - 1);
  s.covariance = ((s.covariance + s.covariance.transpose()) / 2.0).eval();
  return s;
}

// Principal square root of a symmetric PSD matrix via eigendecomposition.
// Eigenvalues in [-1e-6, 0) are clamped to zero; anything lower is an error.
inline MatrixXd matrix_sqrt_spd(const MatrixXd& a) {
  if (a.rows() != a.cols()) throw std::invalid_argument("matrix_sqrt_spd: not square");
  const double scale = std::max(1.0, a.cwiseAbs().maxCoeff());
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale)
    throw std::invalid_argument("matrix_sqrt_spd: input not symmetric");
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(
      ((a + a.transpose()) / 2.0).eval());
  VectorXd vals = eig.eigenvalues();
  for (Eigen::Index i = 0; i < vals.size(); ++i) {
    if (vals[i] < -1e-6)
      throw std::invalid_argument("matrix_sqrt_spd: input is indefinite");
    vals[i] = std::sqrt(std::max(vals[i], 0.0));
  }
  MatrixXd root =
      eig.eigenvectors() * vals.asDiagonal() * eig.eigenvectors().transpose();
  return ((root + root.transpose()) / 2.0).eval();
}

// ||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)), with the product root
// computed through the symmetric form sqrt(sqrt(S1) S2 sqrt(S1)).
inline double fid(const GaussianStats& a, const GaussianStats& b) {
  if (a.mean.size() != b.mean.size())
    throw std::invalid_argument("fid: dimension mismatch");
  const double mean_term = (a.mean - b.mean).squaredNorm();
  MatrixXd s1_root = matrix_sqrt_spd(a.covariance);
  MatrixXd inner = s1_root * b.covariance * s1_root;
  inner = ((inner + inner.transpose()) / 2.0).eval();
  const double trace_root = matrix_sqrt_spd(inner).trace();
  double value = mean_term + a.covariance.trace() + b.covariance.trace() -
                 2.0 * trace_root;
  if (value < -1e-6) throw std::invalid_argument("fid: negative distance");
  return std::max(value, 0.0);
}

// ---------------------------------------------------------------------------
// KID: block-averaged unbiased MMD^2 with the cubic polynomial kernel
// k(x,y) = (x.y/d + 1)^3. Diagonal terms of the within-set sums are excluded,
// so single-block estimates can be slightly negative.
// ---------------------------------------------------------------------------

inline double kid(const MatrixXd& features_a, const MatrixXd& features_b,
                  int block_size) {
  if (block_size < 2) throw DataError("kid: block_size must be >= 2");
  if (features_a.rows() < block_size || features_b.rows() < block_size)
    throw DataError("kid: need at least block_size samples per side");
  if (features_a.cols() != features_b.cols())
    throw DataError("kid: dimension mismatch");
  const double d = double(features_a.cols());
  auto kernel = [&](const MatrixXd& x, const MatrixXd& y) -> MatrixXd {
    MatrixXd k = (x * y.transpose() / d).array() + 1.0;
    return k.array().cube();
  };
  const int m = block_size;
  const Eigen::Index n_blocks =
      std::min(features_a.rows(), features_b.rows()) / m;
  double acc = 0;
  for (Eigen::Index blk = 0; blk < n_blocks; ++blk) {
    MatrixXd x = features_a.middleRows(blk * m, m);
    MatrixXd y = features_b.middleRows(blk * m, m);
    MatrixXd kxx = kernel(x, x);
    MatrixXd kyy = kernel(y, y);
    MatrixXd kxy = kernel(x, y);
    const double sum_xx = kxx.sum() - kxx.trace();
    const double sum_yy = kyy.sum() - kyy.trace();
    const double mmd2 = sum_xx / (double(m) * (m - 1)) +
                        sum_yy / (double(m) * (m - 1)) -
                        2.0 * kxy.mean();
    acc += mmd2;
  }
  return acc / double(n_blocks);
}

// ---------------------------------------------------------------------------
// Directory-level evaluation and the metrics report.
// ---------------------------------------------------------------------------

struct MetricsReport {
  double fid = 0;
  double kid = 0;
  int n_generated = 0;
  int n_reference = 0;
  int kid_block_size = 0;
  std::string extractor_id;
  std::string config_hash;
};

inline std::vector<std::filesystem::path> list_pngs(
    const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw DataError("not a directory: " + dir.string());
  std::vector<std::filesystem::path> out;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png")
      out.push_back(e.path());
  std::sort(out.begin(), out.end());
  if (out.empty()) throw DataError("no png files in: " + dir.string());
  return out;
}

inline std::vector<GridF> load_images(
    const std::vector<std::filesystem::path>& paths) {
  std::vector<GridF> out;
  out.reserve(paths.size());
  for (const auto& p : paths) {
    ImageU8 img = read_png(p.string());
    if (img.c == 1) {
      ImageU8 rgb(img.h, img.w, 3);
      for (size_t i = 0; i < img.v.size(); ++i)
        for (int ch = 0; ch < 3; ++ch) rgb.v[i * 3 + ch] = img.v[i];
      img = std::move(rgb);
    }
    out.push_back(to_float(img));
  }
  return out;
}

inline MetricsReport evaluate(const std::filesystem::path& generated_dir,
                              const std::filesystem::path& reference_dir,
                              DeskExtractor& extractor, int kid_block_size,
                              const std::string& config_hash_hex) {
  const auto gen_paths = list_pngs(generated_dir);
  const auto ref_paths = list_pngs(reference_dir);
  MatrixXd gen_features = extract_features(load_images(gen_paths), extractor);
  MatrixXd ref_features = extract_features(load_images(ref_paths), extractor);

  MetricsReport report;
  report.n_generated = int(gen_paths.size());
  report.n_reference = int(ref_paths.size());
  report.extractor_id = extractor.id;
  report.config_hash = config_hash_hex;
  report.fid = fid(gaussian_stats(gen_features), gaussian_stats(ref_features));
  // Shrink the block size when a directory is smaller than the configured
  // block; the report records the size actually used.
  report.kid_block_size = std::max(
      2, std::min<int>(kid_block_size,
                       int(std::min(gen_features.rows(), ref_features.rows()))));
  report.kid = kid(gen_features, ref_features, report.kid_block_size);
  return report;
}

// Desk-extractor numbers are never comparable to published InceptionNet
// numbers; asking for that label is a hard error.
inline nlohmann::ordered_json report_to_json(const MetricsReport& r,
                                             bool claim_paper_comparable = false) {
  if (claim_paper_comparable)
    throw ConfigError(
        "refusing to label metrics as paper-comparable: extractor '" +
        r.extractor_id + "' is not an InceptionNet backend");
  nlohmann::ordered_json j;
  j["schema"] = "lakered-metrics-v1";
  j["fid"] = r.fid;
  j["kid"] = r.kid;
  j["n_generated"] = r.n_generated;
  j["n_reference"] = r.n_reference;
  j["kid_block_size"] = r.kid_block_size;
  j["extractor"] = r.extractor_id;
  j["config_hash"] = r.config_hash;
  j["paper_comparable"] = false;
  j["note"] =
      "metrics are comparable only across reports with the same extractor id";
  return j;
}

inline void write_report(const MetricsReport& r, const std::string& path,
                         bool claim_paper_comparable = false) {
  nlohmann::ordered_json j = report_to_json(r, claim_paper_comparable);
  std::ofstream out(path);
  if (!out) throw DataError("cannot write report: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace lakered
