#include "nfa/analysis.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace nfa {

PcaResult pca(const std::vector<std::vector<double>>& priors, std::int64_t k) {
  const std::int64_t n = static_cast<std::int64_t>(priors.size());
  if (n < 2) throw std::invalid_argument("pca: need at least 2 priors, got " + std::to_string(n));
  const std::int64_t dim = static_cast<std::int64_t>(priors[0].size());
  if (dim < 1) throw std::invalid_argument("pca: empty priors");
  for (const auto& p : priors)
    if (static_cast<std::int64_t>(p.size()) != dim)
      throw std::invalid_argument("pca: priors have inconsistent lengths");
  const std::int64_t k_max = std::min(dim, n);
  if (k < 1 || k > k_max)
    throw std::invalid_argument("pca: k = " + std::to_string(k) + " outside [1, " +
                                std::to_string(k_max) + "]");

  Eigen::MatrixXd x(n, dim);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < dim; ++j) x(i, j) = priors[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw std::runtime_error("pca: eigendecomposition failed");

  PcaResult out;
  out.n = n;
  out.dim = dim;
  out.k = k;
  out.mean.assign(mean.data(), mean.data() + dim);

  double total = 0;
  for (std::int64_t j = 0; j < dim; ++j) total += std::max(0.0, eig.eigenvalues()(j));
  out.zero_variance = !(total > 0);

  out.components.resize(static_cast<std::size_t>(k));
  out.explained_variance.resize(static_cast<std::size_t>(k));
  out.explained_variance_ratio.resize(static_cast<std::size_t>(k));
  for (std::int64_t c = 0; c < k; ++c) {
    const std::int64_t src = dim - 1 - c;  // eigenvalues come back ascending
    Eigen::VectorXd v = eig.eigenvectors().col(src);
    std::int64_t peak = 0;
    for (std::int64_t j = 1; j < dim; ++j)
      if (std::abs(v(j)) > std::abs(v(peak))) peak = j;
    if (v(peak) < 0) v = -v;
    auto& comp = out.components[static_cast<std::size_t>(c)];
    comp.assign(v.data(), v.data() + dim);
    const double lambda = std::max(0.0, eig.eigenvalues()(src));
    out.explained_variance[static_cast<std::size_t>(c)] = lambda;
    out.explained_variance_ratio[static_cast<std::size_t>(c)] =
        out.zero_variance ? 0.0 : std::clamp(lambda / total, 0.0, 1.0);
  }

  out.projections.assign(static_cast<std::size_t>(n), std::vector<double>(static_cast<std::size_t>(k)));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < k; ++c) {
      double dot = 0;
      const auto& comp = out.components[static_cast<std::size_t>(c)];
      for (std::int64_t j = 0; j < dim; ++j) dot += x(i, j) * comp[static_cast<std::size_t>(j)];
      out.projections[static_cast<std::size_t>(i)][static_cast<std::size_t>(c)] = dot;
    }
  return out;
}

std::vector<double> pca_reconstruct(const PcaResult& p, std::int64_t subject) {
  if (subject < 0 || subject >= p.n)
    throw std::out_of_range("pca_reconstruct: subject " + std::to_string(subject) + " outside [0, " +
                            std::to_string(p.n) + ")");
  std::vector<double> out = p.mean;
  const auto& proj = p.projections[static_cast<std::size_t>(subject)];
  for (std::int64_t c = 0; c < p.k; ++c) {
    const auto& comp = p.components[static_cast<std::size_t>(c)];
    for (std::int64_t j = 0; j < p.dim; ++j)
      out[static_cast<std::size_t>(j)] += proj[static_cast<std::size_t>(c)] * comp[static_cast<std::size_t>(j)];
  }
  return out;
}

Correlation pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size())
    throw std::invalid_argument("pearson: size mismatch " + std::to_string(x.size()) + " vs " +
                                std::to_string(y.size()));
  const std::size_t n = x.size();
  if (n < 2) throw std::invalid_argument("pearson: need at least 2 samples");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx;
    const double dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  Correlation c;
  if (!(sxx > 0) || !(syy > 0)) {
    c.zero_variance = true;
    return c;
  }
  c.r = sxy / std::sqrt(sxx * syy);
  c.r = std::clamp(c.r, -1.0, 1.0);
  return c;
}

LatentCorrelation latent_response_correlation(const std::vector<std::vector<double>>& priors,
                                              const std::vector<double>& response,
                                              std::int64_t k) {
  if (response.size() != priors.size())
    throw std::invalid_argument("latent_response_correlation: " + std::to_string(priors.size()) +
                                " priors but " + std::to_string(response.size()) + " responses");
  LatentCorrelation out;
  out.pca = pca(priors, k);
  out.response = response;
  out.per_component.resize(static_cast<std::size_t>(k));
  std::vector<double> col(priors.size());
  for (std::int64_t c = 0; c < k; ++c) {
    for (std::size_t i = 0; i < priors.size(); ++i)
      col[i] = out.pca.projections[i][static_cast<std::size_t>(c)];
    out.per_component[static_cast<std::size_t>(c)] = pearson(col, response);
  }
  return out;
}

LatentCorrelation latent_jacobian_correlation(const std::vector<std::vector<double>>& priors,
                                              const std::vector<DispFieldFn>& fields,
                                              const Dims3& grid,
                                              const std::vector<std::uint8_t>* mask,
                                              std::int64_t k) {
  if (fields.size() != priors.size())
    throw std::invalid_argument("latent_jacobian_correlation: " + std::to_string(priors.size()) +
                                " priors but " + std::to_string(fields.size()) + " fields");
  std::vector<double> mjd(fields.size());
  for (std::size_t i = 0; i < fields.size(); ++i)
    mjd[i] = jacobian_stats(fields[i], grid, mask).mean_det;
  return latent_response_correlation(priors, mjd, k);
}

void write_scatter_csv(const std::string& path, const LatentCorrelation& c,
                       const std::vector<std::string>& names) {
  if (!names.empty() && names.size() != c.response.size())
    throw std::invalid_argument("write_scatter_csv: " + std::to_string(names.size()) +
                                " names but " + std::to_string(c.response.size()) + " subjects");
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write scatter table to '" + path + "'");
  os << "subject,response";
  for (std::int64_t j = 0; j < c.pca.k; ++j) os << ",pc" << (j + 1);
  os << "\n";
  os.precision(10);
  for (std::size_t i = 0; i < c.response.size(); ++i) {
    if (names.empty())
      os << "s" << i;
    else
      os << names[i];
    os << "," << c.response[i];
    for (std::int64_t j = 0; j < c.pca.k; ++j) os << "," << c.pca.projections[i][static_cast<std::size_t>(j)];
    os << "\n";
  }
}

void write_variance_csv(const std::string& path, const PcaResult& p) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write variance table to '" + path + "'");
  os << "component,explained_variance,explained_variance_ratio\n";
  os.precision(10);
  for (std::int64_t j = 0; j < p.k; ++j)
    os << (j + 1) << "," << p.explained_variance[static_cast<std::size_t>(j)] << ","
       << p.explained_variance_ratio[static_cast<std::size_t>(j)] << "\n";
}

}  // namespace nfa
