#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nfa/metrics.hpp"
#include "nfa/tensor.hpp"
#include "nfa/volume.hpp"

namespace nfa {

/// Mean-centered PCA over a cohort of latent priors.
struct PcaResult {
  std::int64_t n = 0;    ///< subjects
  std::int64_t dim = 0;  ///< latent length
  std::int64_t k = 0;    ///< retained components
  std::vector<double> mean;                      ///< [dim]
  std::vector<std::vector<double>> components;   ///< k rows of length dim, orthonormal
  std::vector<double> explained_variance;        ///< k eigenvalues, non-increasing
  std::vector<double> explained_variance_ratio;  ///< each in [0,1], sums to <= 1
  std::vector<std::vector<double>> projections;  ///< n rows of length k
  bool zero_variance = false;                    ///< all priors identical
};

/// Eigendecomposition of the sample covariance, components ordered by
/// descending eigenvalue. Sign convention: the largest-magnitude entry of each
/// component is positive (first such entry on exact ties).
/// Throws std::invalid_argument for <2 priors, ragged rows, or k outside
/// [1, min(dim, n)].
PcaResult pca(const std::vector<std::vector<double>>& priors, std::int64_t k);

/// mean + sum of projections[subject][j] * components[j]. Exact (within
/// rounding) when k spans the centered data.
std::vector<double> pca_reconstruct(const PcaResult& p, std::int64_t subject);

/// Pearson correlation with a degenerate-input flag instead of a NaN.
struct Correlation {
  double r = 0;
  bool zero_variance = false;  ///< either variable constant; r forced to 0
};

/// Throws std::invalid_argument on size mismatch or fewer than 2 samples.
Correlation pearson(const std::vector<double>& x, const std::vector<double>& y);

/// Per-component association between latent structure and a scalar response.
struct LatentCorrelation {
  PcaResult pca;
  std::vector<double> response;          ///< per subject (mean Jacobian determinant)
  std::vector<Correlation> per_component;  ///< k entries
};

/// PCA over the priors, then Pearson r between each projected coordinate and
/// the per-subject response value.
LatentCorrelation latent_response_correlation(const std::vector<std::vector<double>>& priors,
                                              const std::vector<double>& response,
                                              std::int64_t k);

/// Response = masked mean Jacobian determinant of each subject's displacement
/// field, evaluated on `grid`. One field per prior.
LatentCorrelation latent_jacobian_correlation(const std::vector<std::vector<double>>& priors,
                                              const std::vector<DispFieldFn>& fields,
                                              const Dims3& grid,
                                              const std::vector<std::uint8_t>* mask,
                                              std::int64_t k);

/// Scatter table: subject,response,pc1..pck. Names default to s0..s{n-1}.
void write_scatter_csv(const std::string& path, const LatentCorrelation& c,
                       const std::vector<std::string>& names = {});

/// Variance table: component,explained_variance,explained_variance_ratio.
void write_variance_csv(const std::string& path, const PcaResult& p);

/// Flatten a [1,L] latent prior tensor into a double row.
template <typename S>
std::vector<double> latent_row(const Tensor<S>& prior) {
  std::vector<double> row(static_cast<std::size_t>(prior.numel()));
  for (std::int64_t i = 0; i < prior.numel(); ++i)
    row[static_cast<std::size_t>(i)] = static_cast<double>(prior.data()[i]);
  return row;
}

}  // namespace nfa
